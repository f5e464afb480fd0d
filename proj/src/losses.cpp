#include "concept_lattice/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace concept_lattice {

namespace {

Tensor l1_gap(const Tensor& a, const Tensor& b) { return mean(abs(a - b)); }

Tensor accumulate(const Tensor& sum, const Tensor& term) { return sum.defined() ? sum + term : term; }

void check_logits(const Tensor& z, const char* what) {
  for (double v : z.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string("adv_loss: non-finite discriminator score on ") + what);
  }
}

double sum_values(const std::vector<NamedValue>& values) {
  double s = 0.0;
  for (const auto& v : values) s += v.value;
  return s;
}

}  // namespace

const Mapping& MappingTable::at(const MappingRef& ref) const {
  const auto& side = ref.direction == ShiftDirection::forward ? forward : inverse;
  if (ref.concept_index >= side.size() || !side[ref.concept_index]) {
    throw std::invalid_argument("MappingTable: no mapping " + ref.name());
  }
  return side[ref.concept_index];
}

void LossWeights::validate() const {
  if (lambda_cyc < 0 || mu_comm < 0 || identity_weight < 0) {
    throw std::invalid_argument("LossWeights: weights must be non-negative");
  }
}

double LossBreakdown::recompute_generator_total(const LossWeights& w) const {
  return sum_values(adv) + w.lambda_cyc * (sum_values(cyc2) + sum_values(cyc4)) + w.mu_comm * sum_values(comm) +
         w.identity_weight * sum_values(identity);
}

std::vector<NamedValue> LossBreakdown::columns() const {
  std::vector<NamedValue> out;
  for (const auto& v : adv) out.push_back({v.name + "_g", v.value});
  for (const auto& v : adv_discriminator) out.push_back({v.name + "_d", v.value});
  for (const auto* family : {&cyc2, &cyc4, &comm, &identity}) out.insert(out.end(), family->begin(), family->end());
  out.push_back({"total_generator", total_generator});
  out.push_back({"total_discriminator", total_discriminator});
  return out;
}

AdversarialValue adv_loss(const Critic& critic, const Tensor& real, const Tensor& fake, AdversarialForm form) {
  if (real.rank() == 0 || fake.rank() == 0 || real.dim(0) == 0 || fake.dim(0) == 0) {
    throw ShapeError("adv_loss: empty batch");
  }
  const Shape real_img(real.shape().begin() + 1, real.shape().end());
  const Shape fake_img(fake.shape().begin() + 1, fake.shape().end());
  if (real_img != fake_img) throw ShapeError("adv_loss: real and fake image shapes differ");

  const Tensor z_real = critic(real, true);
  const Tensor z_fake = critic(fake, true);
  check_logits(z_real, "real batch");
  check_logits(z_fake, "fake batch");
  // log(1 - sigmoid(z)) = log_sigmoid(-z)
  const Tensor log_not_fake = mean(log_sigmoid(-1.0 * z_fake));
  AdversarialValue out;
  out.d_objective = mean(log_sigmoid(z_real)) + log_not_fake;
  out.g_objective = form == AdversarialForm::non_saturating ? -1.0 * mean(log_sigmoid(z_fake)) : log_not_fake;
  return out;
}

Tensor cyc2_loss(const Mapping& there, const Mapping& back, const Tensor& batch) {
  return l1_gap(back(there(batch)), batch);
}

Tensor cyc4_loss(const MappingTable& maps, const Tensor& batch, NodeId anchor, std::size_t i, std::size_t j) {
  auto around = [&](std::size_t first, std::size_t second) {
    Tensor x = batch;
    NodeId at = anchor;
    for (std::size_t k : {first, second, first, second}) {
      x = maps.apply(shift_from(at, k), x);
      at = toggle(at, k);
    }
    return l1_gap(x, batch);
  };
  return around(i, j) + around(j, i);
}

Tensor comm_loss(const MappingTable& maps, const Tensor& batch, NodeId anchor, std::size_t i, std::size_t j) {
  const Tensor ij = maps.apply(shift_from(toggle(anchor, i), j), maps.apply(shift_from(anchor, i), batch));
  const Tensor ji = maps.apply(shift_from(toggle(anchor, j), i), maps.apply(shift_from(anchor, j), batch));
  return l1_gap(ij, ji);
}

Tensor identity_loss(const Mapping& mapping, const Tensor& batch) { return l1_gap(mapping(batch), batch); }

LossAssembler::LossAssembler(const ConstraintManifest& manifest, LossWeights weights)
    : manifest_(manifest), weights_(weights) {
  weights_.validate();
}

const Tensor& LossAssembler::walk(const MappingTable& maps, const Batches& batches, NodeId anchor,
                                  const std::vector<std::size_t>& steps) {
  auto key = std::make_pair(anchor, steps);
  if (auto it = paths_.find(key); it != paths_.end()) return it->second;
  Tensor out;
  if (steps.empty()) {
    auto b = batches.find(anchor);
    if (b == batches.end()) {
      throw std::invalid_argument("total_loss: no batch for anchor node " +
                                  node_label(anchor, manifest_.n_concepts));
    }
    out = b->second;
  } else {
    const std::vector<std::size_t> prefix(steps.begin(), steps.end() - 1);
    const Tensor& before = walk(maps, batches, anchor, prefix);
    NodeId at = anchor;
    for (std::size_t k : prefix) at = toggle(at, k);
    out = maps.apply(shift_from(at, steps.back()), before);
  }
  return paths_.emplace(std::move(key), out).first->second;
}

const Critic& LossAssembler::critic_for(const CriticSet& critics, NodeId node) const {
  auto it = critics.find(node);
  if (it == critics.end()) {
    throw std::invalid_argument("total_loss: no discriminator at node " + node_label(node, manifest_.n_concepts));
  }
  return it->second;
}

void LossAssembler::forward_generators(const MappingTable& maps, const Batches& batches) {
  paths_.clear();
  fakes_.clear();
  breakdown_ = LossBreakdown{};
  constraint_total_ = Tensor();
  batches_ = &batches;
  const std::size_t n = manifest_.n_concepts;

  Tensor cyc, comm, ident;
  for (const auto& c : manifest_.terms) {
    const Tensor& x = walk(maps, batches, c.anchor, {});
    switch (c.kind) {
      case LossKind::adversarial: {
        if (!batches.count(c.discriminator_node())) {
          throw std::invalid_argument("total_loss: no real batch for discriminator node " +
                                      node_label(c.discriminator_node(), n));
        }
        fakes_.emplace_back(&c, walk(maps, batches, c.anchor, c.walks[0]));
        break;
      }
      case LossKind::cyc2: {
        const Tensor term = l1_gap(walk(maps, batches, c.anchor, c.walks[0]), x);
        breakdown_.cyc2.push_back({c.name(n), term.item()});
        cyc = accumulate(cyc, term);
        break;
      }
      case LossKind::cyc4: {
        if (weights_.disable_cyc4) break;
        const Tensor term =
            l1_gap(walk(maps, batches, c.anchor, c.walks[0]), x) + l1_gap(walk(maps, batches, c.anchor, c.walks[1]), x);
        breakdown_.cyc4.push_back({c.name(n), term.item()});
        cyc = accumulate(cyc, term);
        break;
      }
      case LossKind::comm: {
        if (weights_.disable_comm) break;
        const Tensor term = l1_gap(walk(maps, batches, c.anchor, c.walks[0]), walk(maps, batches, c.anchor, c.walks[1]));
        breakdown_.comm.push_back({c.name(n), term.item()});
        comm = accumulate(comm, term);
        break;
      }
      case LossKind::identity: {
        if (weights_.identity_weight == 0.0) break;
        Tensor term;
        for (const auto& w : c.walks) term = accumulate(term, identity_loss(maps.at(shift_into(c.anchor, w[0])), x));
        breakdown_.identity.push_back({c.name(n), term.item()});
        ident = accumulate(ident, term);
        break;
      }
    }
  }
  if (cyc.defined()) constraint_total_ = accumulate(constraint_total_, weights_.lambda_cyc * cyc);
  if (comm.defined()) constraint_total_ = accumulate(constraint_total_, weights_.mu_comm * comm);
  if (ident.defined()) constraint_total_ = accumulate(constraint_total_, weights_.identity_weight * ident);
}

Tensor LossAssembler::discriminator_loss(const CriticSet& critics) {
  if (!batches_) throw std::logic_error("discriminator_loss: forward_generators has not run");
  const std::size_t n = manifest_.n_concepts;
  Tensor total;
  breakdown_.adv_discriminator.clear();
  for (const auto& [c, fake] : fakes_) {
    const NodeId target = c->discriminator_node();
    const auto v = adv_loss(critic_for(critics, target), batches_->at(target), fake.detach(), weights_.adversarial_form);
    breakdown_.adv_discriminator.push_back({c->name(n), v.d_objective.item()});
    total = accumulate(total, -1.0 * v.d_objective);
  }
  if (!total.defined()) total = Tensor::scalar(0.0);
  breakdown_.total_discriminator = total.item();
  return total;
}

Tensor LossAssembler::generator_loss(const CriticSet& critics) {
  if (!batches_) throw std::logic_error("generator_loss: forward_generators has not run");
  const std::size_t n = manifest_.n_concepts;
  Tensor total = constraint_total_;
  breakdown_.adv.clear();
  for (const auto& [c, fake] : fakes_) {
    const Tensor z_fake = critic_for(critics, c->discriminator_node())(fake, false);
    check_logits(z_fake, "fake batch");
    const Tensor g = weights_.adversarial_form == AdversarialForm::non_saturating
                         ? -1.0 * mean(log_sigmoid(z_fake))
                         : mean(log_sigmoid(-1.0 * z_fake));
    breakdown_.adv.push_back({c->name(n), g.item()});
    total = accumulate(total, g);
  }
  if (!total.defined()) total = Tensor::scalar(0.0);
  breakdown_.total_generator = total.item();
  return total;
}

LossEvaluation total_loss(const ConstraintManifest& manifest, const MappingTable& maps, const CriticSet& critics,
                          const Batches& batches, const LossWeights& weights) {
  LossAssembler assembler(manifest, weights);
  assembler.forward_generators(maps, batches);
  LossEvaluation out;
  out.discriminator_total = assembler.discriminator_loss(critics);
  out.generator_total = assembler.generator_loss(critics);
  out.breakdown = assembler.breakdown();
  return out;
}

}  // namespace concept_lattice
