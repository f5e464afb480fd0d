#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "concept_lattice/concept_graph.hpp"
#include "concept_lattice/data.hpp"
#include "concept_lattice/losses.hpp"
#include "concept_lattice/trainer.hpp"

namespace concept_lattice {

class EvalError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Concept mappings of one trained experiment, named for the registry.
struct Experiment {
  std::string name;
  std::vector<std::string> concept_names;  // local order
  MappingTable table;
  std::shared_ptr<const void> owner;  // keeps the networks behind `table` alive
};

/// Loads the generators of a checkpoint as an experiment named after its unit.
Experiment experiment_from_checkpoint(const Checkpoint& ckpt, const std::string& name = {});

/// Merged concept registry. Concept k of the set is bit k of its lattice; a
/// concept trained in several experiments has one variant per experiment.
class MappingSet {
public:
  std::size_t n_concepts() const { return names_.size(); }
  const std::vector<std::string>& concept_names() const { return names_; }
  std::size_t concept_index(const std::string& name) const;  // throws EvalError
  std::size_t variant_count(std::size_t k) const { return variants_.at(k).size(); }
  std::vector<std::size_t> variant_counts() const;
  /// Experiment that supplied a variant.
  const std::string& source(std::size_t k, std::size_t variant) const;

  const Mapping& at(const MappingRef& ref) const;
  /// Table over the first variant of every concept.
  MappingTable table() const;

  /// Every minimal composition path from `source` to `target`, over all variants.
  std::vector<std::vector<MappingRef>> paths(NodeId source, NodeId target) const;

  void add(const Experiment& experiment, const std::vector<std::string>& shared);

private:
  struct Variant {
    std::string experiment;
    Mapping forward, inverse;
  };
  std::vector<std::string> names_;
  std::vector<std::vector<Variant>> variants_;
  std::vector<std::shared_ptr<const void>> owners_;
};

/// Registry over several experiments. A concept name used by more than one
/// experiment must be listed in `shared`, else EvalError.
MappingSet compose_experiments(const std::vector<Experiment>& experiments,
                               const std::vector<std::string>& shared_concepts = {});
MappingSet compose_experiments(const std::vector<Checkpoint>& checkpoints,
                               const std::vector<std::string>& shared_concepts = {});

/// Applies the path left to right, in chunks; the result carries no tape.
Tensor synthesize(const MappingSet& mappings, const Tensor& images, const std::vector<MappingRef>& path);

struct AccuracyFragment {
  std::string path;
  std::vector<double> per_concept;  // same order as the registry
  double joint = 0.0;
  std::vector<double> residual_quantiles;  // q50, q90, q99 of the oracle residual
  double realistic = 0.0;                  // residual below the realism threshold
};

struct JointAccuracy {
  NodeId source = 0;
  NodeId target = 0;
  std::vector<AccuracyFragment> paths;
  /// Headline numbers: the canonical path (concepts applied in ascending order).
  AccuracyFragment canonical;
  double mean_joint = 0.0;  // over all paths
};

/// Synthesizes target-node images from real source images along every path
/// and scores them with the oracle. The oracle checks the concepts of the
/// registry; attribute k of the oracle is concept k.
JointAccuracy eval_joint_accuracy(const MappingSet& mappings, const AttributeOracle& oracle, const Tensor& source_images,
                                  NodeId source, NodeId target);

/// Oracle accuracy of real images against their own node.
AccuracyFragment eval_real_accuracy(const AttributeOracle& oracle, const Tensor& images, NodeId node,
                                    std::size_t n_concepts);

struct AnchorResiduals {
  NodeId anchor = 0;
  std::vector<NamedValue> cyc2;  // per concept walk out and back
  std::vector<NamedValue> cyc4;  // per concept pair, both rotations summed
  std::vector<NamedValue> comm;  // per concept pair
};

/// Mean distance-2 / distance-4 reconstruction L1 and the commutativity gap at
/// every anchor with data.
std::vector<AnchorResiduals> eval_cycle_and_comm(const MappingTable& maps, const std::map<NodeId, Tensor>& datasets,
                                                 std::size_t n_concepts);

struct EvalReport {
  std::vector<std::string> concept_names;
  std::string checkpoint_digest;
  std::uint64_t test_seed = 0;
  std::vector<AccuracyFragment> real;  // validation rows: oracle on real test data
  std::vector<JointAccuracy> synthesis;
  std::vector<AnchorResiduals> residuals;

  nlohmann::json to_json() const;
};

/// Column layouts of the qualitative panels for anchor Σ00 of concepts i, j:
/// clockwise G_i G_j F_i F_j, counterclockwise G_j G_i F_j F_i, and the two
/// routes into the opposite corner.
struct Panel {
  std::string name;
  std::vector<std::vector<MappingRef>> columns;  // prefix paths; column 0 is the input
};
std::vector<Panel> figure_panels(std::size_t i = 0, std::size_t j = 1);

/// Rows of images, one row per input: [input, path_1(input), ...], tiled with
/// a 1 px separator and written as PPM/PGM.
void write_panel(const std::filesystem::path& path, const MappingSet& mappings, const Tensor& inputs,
                 const Panel& panel);
/// Plain grid of images, 5 per row.
void write_grid(const std::filesystem::path& path, const Tensor& images, std::size_t per_row = 5);

struct AugmentedImage {
  std::filesystem::path file;
  std::string source;
  NodeId node = 0;
  bool original = false;
};

/// For every probe image (known to sit at `source_node`) writes the original
/// and one synthesized variant per requested node, along the canonical path.
/// Also writes manifest.csv (file,source,node,original) into `out_dir`.
std::vector<AugmentedImage> export_augmented(const MappingSet& mappings, const Tensor& probes,
                                             const std::vector<std::string>& probe_names, NodeId source_node,
                                             const std::vector<NodeId>& nodes, const std::filesystem::path& out_dir);

/// Every node of the registry's lattice other than `source`.
std::vector<NodeId> all_other_nodes(std::size_t n_concepts, NodeId source);

}  // namespace concept_lattice
