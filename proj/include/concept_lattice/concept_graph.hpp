#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace concept_lattice {

/// Hypercube node; bit k is the state of concept k+1.
using NodeId = std::uint32_t;

/// Subdomain label in XY... order: character k is bit k ("10" is node 1).
std::string node_label(NodeId node, std::size_t n_concepts);
NodeId parse_node_label(const std::string& label, std::size_t n_concepts);

inline NodeId toggle(NodeId node, std::size_t concept_index) {
  return node ^ (NodeId{1} << concept_index);
}
inline bool concept_active(NodeId node, std::size_t concept_index) {
  return (node >> concept_index) & 1U;
}

class GraphError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Binary concept lattice with the set of nodes that have real data.
class ConceptGraph {
public:
  /// Throws GraphError for n == 0, out-of-range or empty observed sets, and
  /// for any concept that lacks an observed node on either side of its toggle.
  ConceptGraph(std::size_t n_concepts, std::set<NodeId> observed);

  std::size_t n_concepts() const { return n_; }
  std::size_t node_count() const { return std::size_t{1} << n_; }
  const std::set<NodeId>& observed() const { return observed_; }
  bool is_observed(NodeId node) const { return observed_.count(node) != 0; }

private:
  std::size_t n_;
  std::set<NodeId> observed_;
};

enum class ShiftDirection { forward, inverse };

/// One learned mapping: G_k (forward, sets bit k) or F_k (inverse, clears
/// bit k). `variant` selects among several trained copies of one concept.
struct MappingRef {
  std::size_t concept_index = 0;
  ShiftDirection direction = ShiftDirection::forward;
  std::size_t variant = 0;

  /// "G1", "F2"; variants beyond the first get a suffix: "G2#1".
  std::string name() const;
  bool operator==(const MappingRef&) const = default;
};

/// The mapping that toggles `concept_index` when applied at `from`.
MappingRef shift_from(NodeId from, std::size_t concept_index, std::size_t variant = 0);
/// The mapping whose target is `to` along `concept_index`.
MappingRef shift_into(NodeId to, std::size_t concept_index, std::size_t variant = 0);

std::string sequence_name(const std::vector<MappingRef>& seq);

enum class LossKind { adversarial, cyc2, cyc4, comm, identity };
std::string to_string(LossKind kind);

/// One loss term. Walks are concept-toggle sequences applied left to right
/// starting from the anchor's data:
///   adversarial {{k}}          -> discriminator at toggle(anchor, k)
///   cyc2        {{k, k}}
///   cyc4        {{i,j,i,j}, {j,i,j,i}}   (both rotations, summed)
///   comm        {{i, j}, {j, i}}         (L1 gap between the two results)
///   identity    {{k}, ...}               one per concept; uses the mapping
///                                        *into* the anchor, see shift_into
struct Constraint {
  LossKind kind;
  NodeId anchor;
  std::size_t layer = 0;  // 0: anchor has real data; l > 0: inferred layer l
  std::vector<std::vector<std::size_t>> walks;

  std::vector<std::vector<MappingRef>> mapping_sequences() const;
  NodeId discriminator_node() const;  // adversarial only
  std::string name(std::size_t n_concepts) const;
};

struct ConstraintManifest {
  std::size_t n_concepts = 0;
  std::vector<Constraint> terms;

  std::size_t count(LossKind kind) const;
  std::size_t count(LossKind kind, std::size_t layer) const;
};

struct ManifestOptions {
  bool include_identity = true;
  /// Constrain later layers through earlier inferred ones; honoured only for
  /// n >= 3.
  bool anchor_inferred_layers = true;
};

/// Where an inferred anchor's samples come from: real data at `source`,
/// pushed through `walk`.
struct SeedPath {
  NodeId source;
  std::vector<std::size_t> walk;
};

struct InferencePlan {
  std::vector<std::set<NodeId>> layers;
  ConstraintManifest constraints;
  std::map<NodeId, SeedPath> seeds;  // one per inferred anchor node

  std::size_t layer_of(NodeId node) const;  // 0 for observed nodes
};

/// Breadth-first inference order: layer l holds the nodes that complete a
/// square face whose other three corners are observed or in layers < l.
/// When no face completes, the next layer is the plain hypercube frontier.
InferencePlan plan_inference(const ConceptGraph& graph, const ManifestOptions& options = {});

/// Constraints anchored at observed nodes and, for n >= 3, at every inferred
/// layer that precedes another layer.
ConstraintManifest enumerate_constraints(const ConceptGraph& graph, const ManifestOptions& options = {});

/// Every minimal ordering of concept shifts from `source` to `target`.
/// `variants[k]` is the number of trained copies of concept k (default 1
/// each); the result has d! * prod(variants of toggled concepts) entries.
std::vector<std::vector<MappingRef>> composition_paths(const ConceptGraph& graph, NodeId source,
                                                       NodeId target,
                                                       const std::vector<std::size_t>& variants = {});

nlohmann::json plan_to_json(const ConceptGraph& graph, const InferencePlan& plan);

}  // namespace concept_lattice
