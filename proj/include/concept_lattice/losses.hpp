#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "concept_lattice/concept_graph.hpp"
#include "concept_lattice/tensor.hpp"

namespace concept_lattice {

using Mapping = std::function<Tensor(const Tensor&)>;

/// G_k and F_k for every concept, indexed by concept.
struct MappingTable {
  std::vector<Mapping> forward;
  std::vector<Mapping> inverse;

  std::size_t n_concepts() const { return forward.size(); }
  const Mapping& at(const MappingRef& ref) const;
  Tensor apply(const MappingRef& ref, const Tensor& images) const { return at(ref)(images); }
};

/// Discriminator as seen by the losses: images -> [batch] logits, so that
/// D = sigmoid(logit). `track_params == false` must keep its parameters out
/// of the tape.
using Critic = std::function<Tensor(const Tensor&, bool track_params)>;
using CriticSet = std::map<NodeId, Critic>;
using Batches = std::map<NodeId, Tensor>;

enum class AdversarialForm {
  non_saturating,  // generator minimizes -mean log D(fake)
  minimax,         // generator minimizes mean log(1 - D(fake))
};

struct LossWeights {
  double lambda_cyc = 10.0;
  double mu_comm = 10.0;
  double identity_weight = 10.0;
  bool disable_cyc4 = false;
  bool disable_comm = false;
  AdversarialForm adversarial_form = AdversarialForm::non_saturating;

  void validate() const;
};

struct NamedValue {
  std::string name;
  double value = 0.0;
};

struct LossBreakdown {
  std::vector<NamedValue> adv;                // generator-side objective per term
  std::vector<NamedValue> adv_discriminator;  // mean log D(real) + mean log(1 - D(fake))
  std::vector<NamedValue> cyc2, cyc4, comm, identity;
  double total_generator = 0.0;
  /// Minimized by the discriminators: -sum of adv_discriminator.
  double total_discriminator = 0.0;

  double recompute_generator_total(const LossWeights& w) const;

  /// Flat view for the run log: every named term, then the two totals.
  std::vector<NamedValue> columns() const;
};

struct AdversarialValue {
  Tensor d_objective;  // maximized by D
  Tensor g_objective;  // minimized by G
};

/// Both players' objectives for one discriminator. Gradients flow wherever
/// the inputs and the critic track them; callers detach as needed.
/// Throws NumericError on non-finite logits.
AdversarialValue adv_loss(const Critic& critic, const Tensor& real, const Tensor& fake,
                          AdversarialForm form = AdversarialForm::non_saturating);

/// mean |F(G(x)) - x|
Tensor cyc2_loss(const Mapping& there, const Mapping& back, const Tensor& batch);
/// Both rotations around the square through concepts i, j, summed.
Tensor cyc4_loss(const MappingTable& maps, const Tensor& batch, NodeId anchor, std::size_t i, std::size_t j);
/// mean |(B o A)(x) - (A o B)(x)| with A, B the shifts of i and j from the anchor.
Tensor comm_loss(const MappingTable& maps, const Tensor& batch, NodeId anchor, std::size_t i, std::size_t j);
/// mean |M(x) - x|
Tensor identity_loss(const Mapping& mapping, const Tensor& batch);

/// Evaluates a manifest in the order a training step needs it:
///   1. forward_generators: every constraint term and the fakes for the
///      adversarial terms (sub-compositions shared between terms),
///   2. discriminator_loss: critics on real data and detached fakes,
///   3. generator_loss: constraint terms plus adversarial terms through
///      critics with frozen parameters.
/// Ablated families are never evaluated.
class LossAssembler {
public:
  LossAssembler(const ConstraintManifest& manifest, LossWeights weights);

  /// Throws std::invalid_argument naming the node if an anchor has no batch.
  void forward_generators(const MappingTable& maps, const Batches& batches);
  Tensor discriminator_loss(const CriticSet& critics);
  Tensor generator_loss(const CriticSet& critics);

  const LossBreakdown& breakdown() const { return breakdown_; }
  const LossWeights& weights() const { return weights_; }

private:
  const Tensor& walk(const MappingTable& maps, const Batches& batches, NodeId anchor,
                     const std::vector<std::size_t>& steps);
  const Critic& critic_for(const CriticSet& critics, NodeId node) const;

  const ConstraintManifest& manifest_;
  LossWeights weights_;
  LossBreakdown breakdown_;
  std::map<std::pair<NodeId, std::vector<std::size_t>>, Tensor> paths_;
  std::vector<std::pair<const Constraint*, Tensor>> fakes_;
  const Batches* batches_ = nullptr;
  Tensor constraint_total_;
};

struct LossEvaluation {
  LossBreakdown breakdown;
  Tensor generator_total;
  Tensor discriminator_total;
};

/// One-shot evaluation of the whole objective; the generator total sees the
/// critics as they are (frozen), the discriminator total sees detached fakes.
LossEvaluation total_loss(const ConstraintManifest& manifest, const MappingTable& maps, const CriticSet& critics,
                          const Batches& batches, const LossWeights& weights);

}  // namespace concept_lattice
