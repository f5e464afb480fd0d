#include "concept_lattice/concept_graph.hpp"

#include <algorithm>
#include <bit>
#include <limits>
#include <numeric>

namespace concept_lattice {

namespace {

constexpr std::size_t kMaxConcepts = 16;

void require_node(NodeId node, std::size_t n, const char* who) {
  if (node >= (NodeId{1} << n)) {
    throw GraphError(std::string(who) + ": node " + std::to_string(node) + " outside the " +
                     std::to_string(n) + "-concept lattice");
  }
}

}  // namespace

std::string node_label(NodeId node, std::size_t n_concepts) {
  std::string s(n_concepts, '0');
  for (std::size_t k = 0; k < n_concepts; ++k) {
    if (concept_active(node, k)) s[k] = '1';
  }
  return s;
}

NodeId parse_node_label(const std::string& label, std::size_t n_concepts) {
  if (label.size() != n_concepts) {
    throw GraphError("node label '" + label + "' must have " + std::to_string(n_concepts) + " characters");
  }
  NodeId node = 0;
  for (std::size_t k = 0; k < n_concepts; ++k) {
    if (label[k] == '1') {
      node |= NodeId{1} << k;
    } else if (label[k] != '0') {
      throw GraphError("node label '" + label + "' may contain only 0 and 1");
    }
  }
  return node;
}

ConceptGraph::ConceptGraph(std::size_t n_concepts, std::set<NodeId> observed)
    : n_(n_concepts), observed_(std::move(observed)) {
  if (n_ == 0 || n_ > kMaxConcepts) {
    throw GraphError("concept count must be in [1, " + std::to_string(kMaxConcepts) + "]");
  }
  if (observed_.empty()) throw GraphError("observed node set is empty");
  for (NodeId v : observed_) require_node(v, n_, "ConceptGraph");
  for (std::size_t k = 0; k < n_; ++k) {
    bool off = false, on = false;
    for (NodeId v : observed_) (concept_active(v, k) ? on : off) = true;
    if (!off || !on) {
      throw GraphError("concept " + std::to_string(k + 1) +
                       " is unlearnable: no observed node with it " + (on ? "inactive" : "active"));
    }
  }
}

std::string MappingRef::name() const {
  std::string s = (direction == ShiftDirection::forward ? "G" : "F") + std::to_string(concept_index + 1);
  if (variant > 0) s += "#" + std::to_string(variant);
  return s;
}

MappingRef shift_from(NodeId from, std::size_t concept_index, std::size_t variant) {
  return {concept_index, concept_active(from, concept_index) ? ShiftDirection::inverse : ShiftDirection::forward,
          variant};
}

MappingRef shift_into(NodeId to, std::size_t concept_index, std::size_t variant) {
  return {concept_index, concept_active(to, concept_index) ? ShiftDirection::forward : ShiftDirection::inverse,
          variant};
}

std::string sequence_name(const std::vector<MappingRef>& seq) {
  std::string s;
  for (const auto& m : seq) s += m.name();
  return s;
}

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::adversarial: return "adv";
    case LossKind::cyc2: return "cyc2";
    case LossKind::cyc4: return "cyc4";
    case LossKind::comm: return "comm";
    case LossKind::identity: return "id";
  }
  return "unknown";
}

std::vector<std::vector<MappingRef>> Constraint::mapping_sequences() const {
  std::vector<std::vector<MappingRef>> out;
  for (const auto& walk : walks) {
    std::vector<MappingRef> seq;
    if (kind == LossKind::identity) {
      for (std::size_t k : walk) seq.push_back(shift_into(anchor, k));
    } else {
      NodeId cur = anchor;
      for (std::size_t k : walk) {
        seq.push_back(shift_from(cur, k));
        cur = toggle(cur, k);
      }
    }
    out.push_back(std::move(seq));
  }
  return out;
}

NodeId Constraint::discriminator_node() const {
  if (kind != LossKind::adversarial) throw std::logic_error("discriminator_node: not an adversarial term");
  return toggle(anchor, walks.front().front());
}

std::string Constraint::name(std::size_t n_concepts) const {
  std::string s = to_string(kind) + "_" + node_label(anchor, n_concepts);
  if (kind == LossKind::identity) return s;
  return s + "_" + sequence_name(mapping_sequences().front());
}

std::size_t ConstraintManifest::count(LossKind kind) const {
  return static_cast<std::size_t>(
      std::count_if(terms.begin(), terms.end(), [&](const Constraint& c) { return c.kind == kind; }));
}

std::size_t ConstraintManifest::count(LossKind kind, std::size_t layer) const {
  return static_cast<std::size_t>(std::count_if(terms.begin(), terms.end(), [&](const Constraint& c) {
    return c.kind == kind && c.layer == layer;
  }));
}

std::size_t InferencePlan::layer_of(NodeId node) const {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].count(node)) return l + 1;
  }
  return 0;
}

namespace {

// A node joins the next layer once some square face through it has its other
// three corners known: that face carries the cycle and commutativity terms
// that pin the node down. If no face completes, fall back to plain adjacency
// so every node is eventually assigned.
std::vector<std::set<NodeId>> inference_layers(const ConceptGraph& graph) {
  const std::size_t n = graph.n_concepts();
  std::vector<bool> known(graph.node_count(), false);
  std::size_t remaining = graph.node_count();
  for (NodeId v : graph.observed()) {
    known[v] = true;
    --remaining;
  }
  auto completes_face = [&](NodeId v) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const NodeId a = toggle(v, i), b = toggle(v, j), c = toggle(a, j);
        if (known[a] && known[b] && known[c]) return true;
      }
    }
    return false;
  };
  auto adjacent_known = [&](NodeId v) {
    for (std::size_t k = 0; k < n; ++k) {
      if (known[toggle(v, k)]) return true;
    }
    return false;
  };

  std::vector<std::set<NodeId>> layers;
  while (remaining > 0) {
    std::set<NodeId> next;
    for (NodeId v = 0; v < graph.node_count(); ++v) {
      if (!known[v] && completes_face(v)) next.insert(v);
    }
    if (next.empty()) {
      for (NodeId v = 0; v < graph.node_count(); ++v) {
        if (!known[v] && adjacent_known(v)) next.insert(v);
      }
    }
    for (NodeId v : next) known[v] = true;
    remaining -= next.size();
    layers.push_back(std::move(next));
  }
  return layers;
}

ConstraintManifest build_manifest(const ConceptGraph& graph, const std::vector<std::set<NodeId>>& layers,
                                  const ManifestOptions& options) {
  const std::size_t n = graph.n_concepts();
  std::vector<std::pair<NodeId, std::size_t>> anchors;  // (node, layer)
  for (NodeId v : graph.observed()) anchors.emplace_back(v, 0);
  if (n >= 3 && options.anchor_inferred_layers && layers.size() > 1) {
    for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
      for (NodeId v : layers[l]) anchors.emplace_back(v, l + 1);
    }
  }

  ConstraintManifest m;
  m.n_concepts = n;
  for (const auto& [a, layer] : anchors) {
    if (layer != 0) continue;
    for (std::size_t k = 0; k < n; ++k) {
      if (graph.is_observed(toggle(a, k))) m.terms.push_back({LossKind::adversarial, a, 0, {{k}}});
    }
  }
  for (const auto& [a, layer] : anchors) {
    for (std::size_t k = 0; k < n; ++k) m.terms.push_back({LossKind::cyc2, a, layer, {{k, k}}});
  }
  for (const auto& [a, layer] : anchors) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        m.terms.push_back({LossKind::cyc4, a, layer, {{i, j, i, j}, {j, i, j, i}}});
      }
    }
  }
  for (const auto& [a, layer] : anchors) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) m.terms.push_back({LossKind::comm, a, layer, {{i, j}, {j, i}}});
    }
  }
  if (options.include_identity) {
    for (const auto& [a, layer] : anchors) {
      if (layer != 0) continue;
      Constraint c{LossKind::identity, a, 0, {}};
      for (std::size_t k = 0; k < n; ++k) c.walks.push_back({k});
      m.terms.push_back(std::move(c));
    }
  }
  return m;
}

}  // namespace

InferencePlan plan_inference(const ConceptGraph& graph, const ManifestOptions& options) {
  InferencePlan plan;
  plan.layers = inference_layers(graph);
  plan.constraints = build_manifest(graph, plan.layers, options);
  for (const auto& c : plan.constraints.terms) {
    if (c.layer == 0 || plan.seeds.count(c.anchor)) continue;
    // Nearest observed node (lowest id on ties), bits toggled in ascending order.
    NodeId best = 0;
    int best_dist = std::numeric_limits<int>::max();
    for (NodeId u : graph.observed()) {
      const int d = std::popcount(u ^ c.anchor);
      if (d < best_dist) {
        best = u;
        best_dist = d;
      }
    }
    SeedPath seed{best, {}};
    for (std::size_t k = 0; k < graph.n_concepts(); ++k) {
      if (concept_active(best ^ c.anchor, k)) seed.walk.push_back(k);
    }
    plan.seeds.emplace(c.anchor, std::move(seed));
  }
  return plan;
}

ConstraintManifest enumerate_constraints(const ConceptGraph& graph, const ManifestOptions& options) {
  return build_manifest(graph, inference_layers(graph), options);
}

std::vector<std::vector<MappingRef>> composition_paths(const ConceptGraph& graph, NodeId source, NodeId target,
                                                       const std::vector<std::size_t>& variants) {
  const std::size_t n = graph.n_concepts();
  require_node(source, n, "composition_paths");
  require_node(target, n, "composition_paths");
  if (source == target) throw GraphError("composition_paths: source equals target");
  if (!variants.empty() && variants.size() != n) {
    throw GraphError("composition_paths: expected " + std::to_string(n) + " variant counts");
  }
  auto variant_count = [&](std::size_t k) { return variants.empty() ? std::size_t{1} : variants[k]; };

  std::vector<std::size_t> order;
  for (std::size_t k = 0; k < n; ++k) {
    if (concept_active(source ^ target, k)) {
      if (variant_count(k) == 0) throw GraphError("composition_paths: concept " + std::to_string(k + 1) + " has no mapping");
      order.push_back(k);
    }
  }

  std::vector<std::vector<MappingRef>> paths;
  do {
    // Mixed-radix counter over the variant choice of each step.
    std::vector<std::size_t> choice(order.size(), 0);
    while (true) {
      std::vector<MappingRef> path;
      NodeId cur = source;
      for (std::size_t s = 0; s < order.size(); ++s) {
        path.push_back(shift_from(cur, order[s], choice[s]));
        cur = toggle(cur, order[s]);
      }
      paths.push_back(std::move(path));
      std::size_t s = 0;
      while (s < order.size() && ++choice[s] == variant_count(order[s])) choice[s++] = 0;
      if (s == order.size()) break;
    }
  } while (std::next_permutation(order.begin(), order.end()));
  return paths;
}

nlohmann::json plan_to_json(const ConceptGraph& graph, const InferencePlan& plan) {
  const std::size_t n = graph.n_concepts();
  nlohmann::json j;
  j["n_concepts"] = n;
  j["observed"] = nlohmann::json::array();
  for (NodeId v : graph.observed()) j["observed"].push_back(node_label(v, n));
  j["layers"] = nlohmann::json::array();
  for (const auto& layer : plan.layers) {
    nlohmann::json l = nlohmann::json::array();
    for (NodeId v : layer) l.push_back(node_label(v, n));
    j["layers"].push_back(l);
  }
  j["nodes"] = nlohmann::json::array();
  for (NodeId v = 0; v < graph.node_count(); ++v) {
    j["nodes"].push_back({{"id", v},
                          {"label", node_label(v, n)},
                          {"observed", graph.is_observed(v)},
                          {"layer", plan.layer_of(v)}});
  }
  j["constraints"] = nlohmann::json::array();
  for (const auto& c : plan.constraints.terms) {
    nlohmann::json seqs = nlohmann::json::array();
    for (const auto& seq : c.mapping_sequences()) {
      nlohmann::json names = nlohmann::json::array();
      for (const auto& m : seq) names.push_back(m.name());
      seqs.push_back(names);
    }
    j["constraints"].push_back({{"kind", to_string(c.kind)},
                                {"name", c.name(n)},
                                {"anchor", node_label(c.anchor, n)},
                                {"layer", c.layer},
                                {"mappings", seqs}});
  }
  nlohmann::json counts;
  for (auto kind : {LossKind::adversarial, LossKind::cyc2, LossKind::cyc4, LossKind::comm, LossKind::identity}) {
    counts[to_string(kind)] = plan.constraints.count(kind);
  }
  j["counts"] = counts;
  nlohmann::json seeds = nlohmann::json::object();
  for (const auto& [node, seed] : plan.seeds) {
    seeds[node_label(node, n)] = {{"source", node_label(seed.source, n)}, {"walk", seed.walk}};
  }
  j["seeds"] = seeds;
  return j;
}

}  // namespace concept_lattice
