#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "concept_lattice/concept_graph.hpp"
#include "concept_lattice/data.hpp"
#include "concept_lattice/losses.hpp"
#include "concept_lattice/nn.hpp"

namespace concept_lattice {

class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class CheckpointError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class TrainMode { conceptgan, baseline_cyclegan };
std::string to_string(TrainMode mode);
TrainMode parse_train_mode(const std::string& name);

struct DatasetSpec {
  std::string source = "synthetic";  // "synthetic" or "csv"
  std::size_t samples_per_node = 256;
  std::size_t test_samples = 500;
  std::string csv_path;
  std::string image_dir;
};

struct TrainConfig {
  std::size_t n_concepts = 2;
  std::set<NodeId> observed{0, 1, 2};
  std::vector<std::string> concept_names{"shape", "style"};
  DatasetSpec data;
  GeneratorConfig generator = GeneratorConfig::desk();
  DiscriminatorConfig discriminator = DiscriminatorConfig::desk();
  LossWeights weights;
  std::size_t batch_size = 16;
  LrSchedule schedule{2e-4, 30, 30};
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 0;  // epochs; 0 keeps only the final one
  TrainMode mode = TrainMode::conceptgan;
  bool anchor_inferred_layers = true;

  static TrainConfig desk();
  static TrainConfig paper();

  std::size_t epochs() const { return schedule.constant_epochs + schedule.decay_epochs; }
  void validate() const;  // throws ConfigError

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are errors.
  static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& defaults = desk());
  /// SHA-256 of the canonical JSON dump.
  std::string hash() const;
};

/// One independently trained lattice: every concept for ConceptGAN, a single
/// concept for each baseline unit. Local node bits map to the global
/// concepts listed in `concept_indices`; other global bits come from `base`.
struct UnitSpec {
  std::string name = "main";
  std::vector<std::size_t> concept_indices;
  NodeId base = 0;

  NodeId to_global(NodeId local) const;
};

/// Networks of one unit: G_k / F_k per local concept and a discriminator at
/// every node that receives fakes.
class ConceptModel {
public:
  ConceptModel(const TrainConfig& config, UnitSpec unit, const std::set<NodeId>& local_observed);

  std::size_t n_concepts() const { return unit_.concept_indices.size(); }
  const UnitSpec& unit() const { return unit_; }
  const ConceptGraph& graph() const { return graph_; }
  const InferencePlan& plan() const { return plan_; }

  Generator& forward(std::size_t k) { return forward_[k]; }
  Generator& inverse(std::size_t k) { return inverse_[k]; }
  const Generator& forward(std::size_t k) const { return forward_[k]; }
  const Generator& inverse(std::size_t k) const { return inverse_[k]; }
  std::map<NodeId, Discriminator>& discriminators() { return discriminators_; }
  const std::map<NodeId, Discriminator>& discriminators() const { return discriminators_; }

  MappingTable table() const;
  CriticSet critics() const;

  std::vector<ParameterList*> generator_parameters();
  std::vector<ParameterList*> discriminator_parameters();
  /// Every parameter of the unit, generators first, keyed by path.
  std::vector<const NamedParameter*> all_parameters() const;

private:
  UnitSpec unit_;
  ConceptGraph graph_;
  InferencePlan plan_;
  std::vector<Generator> forward_, inverse_;
  std::map<NodeId, Discriminator> discriminators_;
};

/// Everything needed to continue a unit bit-exactly.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string config_json;
  std::string config_hash;
  std::string unit_name;
  std::vector<std::size_t> concept_indices;
  std::vector<std::string> concept_names;  // local order
  NodeId base = 0;
  std::uint64_t epoch = 0;
  std::uint64_t step = 0;
  std::string rng_state;
  std::map<std::string, Tensor> tensors;  // parameters and Adam moments
  std::map<std::string, std::uint64_t> adam_steps;

  void save(const std::filesystem::path& path) const;
  /// Parses the whole file before returning; throws CheckpointError.
  static Checkpoint load(const std::filesystem::path& path);
  TrainConfig config() const;
  UnitSpec unit() const;
};

std::string sha256_hex(const std::string& bytes);
std::string file_digest(const std::filesystem::path& path);

/// Restores a model from a checkpoint's config and parameter table.
ConceptModel model_from_checkpoint(const Checkpoint& ckpt);

struct RunLog {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;  // one per optimization step

  void append(const std::vector<NamedValue>& values);
  void write_csv(const std::filesystem::path& path) const;
};

struct TrainOptions {
  std::filesystem::path out_dir;       // checkpoints/ and logs/ below it; empty = keep in memory
  std::filesystem::path resume_from;   // checkpoint of this unit to continue
  std::size_t stop_after_epoch = 0;    // 0 = run to the end of the schedule
  std::function<void(const std::string&)> progress;
};

struct UnitResult {
  Checkpoint checkpoint;
  RunLog log;
  std::filesystem::path checkpoint_path;
};

struct TrainResult {
  std::vector<UnitResult> units;
};

/// The training sets of a config, indexed by global node.
std::map<NodeId, SubdomainDataset> training_data(const TrainConfig& config);
/// Held-out synthetic samples for evaluation, from a seed disjoint from training.
std::map<NodeId, SubdomainDataset> test_data(const TrainConfig& config);

/// Unit layout for a mode: one "main" unit, or units "A" and "B".
std::vector<UnitSpec> units_for(const TrainConfig& config);

/// Alternating optimization; one unit or both baseline units in sequence.
/// A non-finite loss throws NumericError after writing
/// checkpoints/<unit>_last_good.clck when out_dir is set.
TrainResult train(const TrainConfig& config, const TrainOptions& options = {});

/// Trains one unit (the building block of train()).
UnitResult train_unit(const TrainConfig& config, const UnitSpec& unit,
                      const std::map<NodeId, SubdomainDataset>& global_data, const TrainOptions& options);

}  // namespace concept_lattice
