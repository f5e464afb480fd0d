#include "concept_lattice/trainer.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace concept_lattice {

using nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Stable per-name seed: FNV-1a of the name folded into the run seed.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(seed ^ splitmix64(h));
}

std::string adversarial_form_name(AdversarialForm f) {
  return f == AdversarialForm::non_saturating ? "non_saturating" : "minimax";
}

AdversarialForm parse_adversarial_form(const std::string& s) {
  if (s == "non_saturating") return AdversarialForm::non_saturating;
  if (s == "minimax") return AdversarialForm::minimax;
  throw ConfigError("config: adversarial_form must be non_saturating or minimax, got '" + s + "'");
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: " + where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("config: unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read_key(const json& j, const char* key, T& target, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    target = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: bad value for '" + std::string(key) + "' in " + where);
  }
}

std::string network_name(char kind, std::size_t global_concept) {
  return std::string(1, kind) + std::to_string(global_concept + 1);
}

// Little-endian binary helpers for the checkpoint container.
void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }
void put_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }
void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw CheckpointError("checkpoint: truncated file");
  return v;
}
std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw CheckpointError("checkpoint: truncated file");
  return v;
}
std::string get_string(std::istream& in) {
  const std::uint32_t n = get_u32(in);
  if (n > (1U << 28)) throw CheckpointError("checkpoint: implausible string length");
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw CheckpointError("checkpoint: truncated file");
  return s;
}

const char kCheckpointMagic[4] = {'C', 'L', 'C', 'K'};

}  // namespace

std::string to_string(TrainMode mode) { return mode == TrainMode::conceptgan ? "conceptgan" : "baseline_cyclegan"; }

TrainMode parse_train_mode(const std::string& name) {
  if (name == "conceptgan") return TrainMode::conceptgan;
  if (name == "baseline_cyclegan" || name == "baseline") return TrainMode::baseline_cyclegan;
  throw ConfigError("config: mode must be conceptgan or baseline_cyclegan, got '" + name + "'");
}

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.generator = GeneratorConfig::paper();
  c.discriminator = DiscriminatorConfig::paper();
  c.schedule = LrSchedule{2e-4, 150, 150};
  return c;
}

void TrainConfig::validate() const {
  if (n_concepts < 1 || n_concepts > 16) throw ConfigError("config: n_concepts must be in 1..16");
  try {
    ConceptGraph graph(n_concepts, observed);
  } catch (const GraphError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (concept_names.size() != n_concepts) throw ConfigError("config: need one concept name per concept");
  if (std::set<std::string>(concept_names.begin(), concept_names.end()).size() != concept_names.size()) {
    throw ConfigError("config: concept names must be distinct");
  }
  if (data.source == "synthetic") {
    if (n_concepts > 3) throw ConfigError("config: synthetic glyph data supports at most 3 concepts");
    if (data.samples_per_node == 0) throw ConfigError("config: samples_per_node must be positive");
  } else if (data.source == "csv") {
    if (data.csv_path.empty()) throw ConfigError("config: csv source needs data.csv_path");
  } else {
    throw ConfigError("config: data.source must be synthetic or csv");
  }
  try {
    generator.validate();
    discriminator.validate();
    weights.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (generator.input_size != discriminator.input_size || generator.channels != discriminator.channels) {
    throw ConfigError("config: generator and discriminator image shapes differ");
  }
  if (batch_size < 1) throw ConfigError("config: batch_size must be at least 1");
  if (!(schedule.base_lr > 0) || !std::isfinite(schedule.base_lr)) {
    throw ConfigError("config: learning_rate must be positive and finite");
  }
  if (mode == TrainMode::baseline_cyclegan) {
    if (n_concepts != 2) throw ConfigError("config: baseline mode requires n_concepts = 2");
    for (NodeId v : {0U, 1U, 2U}) {
      if (!observed.count(v)) throw ConfigError("config: baseline mode needs data at 00, 10 and 01");
    }
  }
}

json TrainConfig::to_json() const {
  json obs = json::array();
  for (NodeId v : observed) obs.push_back(node_label(v, n_concepts));
  return json{
      {"n_concepts", n_concepts},
      {"observed", obs},
      {"concept_names", concept_names},
      {"data",
       {{"source", data.source},
        {"samples_per_node", data.samples_per_node},
        {"test_samples", data.test_samples},
        {"csv_path", data.csv_path},
        {"image_dir", data.image_dir}}},
      {"generator",
       {{"input_size", generator.input_size},
        {"channels", generator.channels},
        {"base_filters", generator.base_filters},
        {"n_residual_blocks", generator.n_residual_blocks},
        {"profile", to_string(generator.profile)}}},
      {"discriminator",
       {{"input_size", discriminator.input_size},
        {"channels", discriminator.channels},
        {"base_filters", discriminator.base_filters},
        {"profile", to_string(discriminator.profile)}}},
      {"loss",
       {{"lambda_cyc", weights.lambda_cyc},
        {"mu_comm", weights.mu_comm},
        {"identity_weight", weights.identity_weight},
        {"disable_cyc4", weights.disable_cyc4},
        {"disable_comm", weights.disable_comm},
        {"adversarial_form", adversarial_form_name(weights.adversarial_form)}}},
      {"batch_size", batch_size},
      {"schedule",
       {{"learning_rate", schedule.base_lr},
        {"constant_epochs", schedule.constant_epochs},
        {"decay_epochs", schedule.decay_epochs}}},
      {"seed", seed},
      {"checkpoint_every", checkpoint_every},
      {"mode", to_string(mode)},
      {"anchor_inferred_layers", anchor_inferred_layers},
  };
}

TrainConfig TrainConfig::from_json(const json& j, const TrainConfig& defaults) {
  TrainConfig c = defaults;
  reject_unknown(j,
                 {"n_concepts", "observed", "concept_names", "data", "generator", "discriminator", "loss", "batch_size",
                  "schedule", "seed", "checkpoint_every", "mode", "anchor_inferred_layers"},
                 "config");
  read_key(j, "n_concepts", c.n_concepts, "config");
  if (j.contains("n_concepts") && !j.contains("concept_names") && c.concept_names.size() != c.n_concepts) {
    c.concept_names.clear();
    for (std::size_t k = 0; k < c.n_concepts; ++k) {
      c.concept_names.push_back(k < 3 ? kSyntheticConcepts[k] : "c" + std::to_string(k + 1));
    }
  }
  if (j.contains("observed")) {
    if (!j["observed"].is_array()) throw ConfigError("config: observed must be an array");
    c.observed.clear();
    for (const auto& v : j["observed"]) {
      try {
        if (v.is_string()) {
          c.observed.insert(parse_node_label(v.get<std::string>(), c.n_concepts));
        } else if (v.is_number_unsigned()) {
          c.observed.insert(v.get<NodeId>());
        } else {
          throw ConfigError("config: observed entries must be labels or node ids");
        }
      } catch (const GraphError& e) {
        throw ConfigError(std::string("config: ") + e.what());
      }
    }
  }
  read_key(j, "concept_names", c.concept_names, "config");
  if (j.contains("data")) {
    const auto& d = j["data"];
    reject_unknown(d, {"source", "samples_per_node", "test_samples", "csv_path", "image_dir"}, "data");
    read_key(d, "source", c.data.source, "data");
    read_key(d, "samples_per_node", c.data.samples_per_node, "data");
    read_key(d, "test_samples", c.data.test_samples, "data");
    read_key(d, "csv_path", c.data.csv_path, "data");
    read_key(d, "image_dir", c.data.image_dir, "data");
  }
  auto read_profile = [](const json& o, Profile& p, const std::string& where) {
    if (!o.contains("profile")) return;
    try {
      p = parse_profile(o["profile"].get<std::string>());
    } catch (const std::exception&) {
      throw ConfigError("config: bad profile in " + where);
    }
  };
  if (j.contains("generator")) {
    const auto& g = j["generator"];
    reject_unknown(g, {"input_size", "channels", "base_filters", "n_residual_blocks", "profile"}, "generator");
    read_key(g, "input_size", c.generator.input_size, "generator");
    read_key(g, "channels", c.generator.channels, "generator");
    read_key(g, "base_filters", c.generator.base_filters, "generator");
    read_key(g, "n_residual_blocks", c.generator.n_residual_blocks, "generator");
    read_profile(g, c.generator.profile, "generator");
  }
  if (j.contains("discriminator")) {
    const auto& d = j["discriminator"];
    reject_unknown(d, {"input_size", "channels", "base_filters", "profile"}, "discriminator");
    read_key(d, "input_size", c.discriminator.input_size, "discriminator");
    read_key(d, "channels", c.discriminator.channels, "discriminator");
    read_key(d, "base_filters", c.discriminator.base_filters, "discriminator");
    read_profile(d, c.discriminator.profile, "discriminator");
  }
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    reject_unknown(l, {"lambda_cyc", "mu_comm", "identity_weight", "disable_cyc4", "disable_comm", "adversarial_form"},
                   "loss");
    read_key(l, "lambda_cyc", c.weights.lambda_cyc, "loss");
    read_key(l, "mu_comm", c.weights.mu_comm, "loss");
    read_key(l, "identity_weight", c.weights.identity_weight, "loss");
    read_key(l, "disable_cyc4", c.weights.disable_cyc4, "loss");
    read_key(l, "disable_comm", c.weights.disable_comm, "loss");
    if (l.contains("adversarial_form")) {
      std::string form;
      read_key(l, "adversarial_form", form, "loss");
      c.weights.adversarial_form = parse_adversarial_form(form);
    }
  }
  read_key(j, "batch_size", c.batch_size, "config");
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    reject_unknown(s, {"learning_rate", "constant_epochs", "decay_epochs"}, "schedule");
    read_key(s, "learning_rate", c.schedule.base_lr, "schedule");
    read_key(s, "constant_epochs", c.schedule.constant_epochs, "schedule");
    read_key(s, "decay_epochs", c.schedule.decay_epochs, "schedule");
  }
  read_key(j, "seed", c.seed, "config");
  read_key(j, "checkpoint_every", c.checkpoint_every, "config");
  if (j.contains("mode")) {
    std::string mode;
    read_key(j, "mode", mode, "config");
    c.mode = parse_train_mode(mode);
  }
  read_key(j, "anchor_inferred_layers", c.anchor_inferred_layers, "config");
  c.validate();
  return c;
}

std::string TrainConfig::hash() const { return sha256_hex(to_json().dump()); }

NodeId UnitSpec::to_global(NodeId local) const {
  NodeId g = base;
  for (std::size_t k = 0; k < concept_indices.size(); ++k) {
    if (concept_active(local, k)) g |= NodeId{1} << concept_indices[k];
  }
  return g;
}

namespace {

std::set<NodeId> local_observed_for(const TrainConfig& config, const UnitSpec& unit) {
  std::set<NodeId> out;
  for (NodeId l = 0; l < (NodeId{1} << unit.concept_indices.size()); ++l) {
    if (config.observed.count(unit.to_global(l))) out.insert(l);
  }
  return out;
}

}  // namespace

ConceptModel::ConceptModel(const TrainConfig& config, UnitSpec unit, const std::set<NodeId>& local_observed)
    : unit_(std::move(unit)),
      graph_(unit_.concept_indices.size(), local_observed),
      plan_(plan_inference(graph_, ManifestOptions{true, config.anchor_inferred_layers})) {
  for (std::size_t k = 0; k < n_concepts(); ++k) {
    const std::string g = network_name('G', unit_.concept_indices[k]);
    const std::string f = network_name('F', unit_.concept_indices[k]);
    forward_.push_back(build_generator(config.generator, derive_seed(config.seed, g), g));
    inverse_.push_back(build_generator(config.generator, derive_seed(config.seed, f), f));
  }
  const std::size_t n_global = config.n_concepts;
  for (const auto& c : plan_.constraints.terms) {
    if (c.kind != LossKind::adversarial) continue;
    const NodeId local = c.discriminator_node();
    if (discriminators_.count(local)) continue;
    const std::string name = "D" + node_label(unit_.to_global(local), n_global);
    discriminators_.emplace(local, build_discriminator(config.discriminator, derive_seed(config.seed, name), name));
  }
}

MappingTable ConceptModel::table() const {
  MappingTable t;
  for (std::size_t k = 0; k < n_concepts(); ++k) {
    const Generator* g = &forward_[k];
    const Generator* f = &inverse_[k];
    t.forward.push_back([g](const Tensor& x) { return (*g)(x); });
    t.inverse.push_back([f](const Tensor& x) { return (*f)(x); });
  }
  return t;
}

CriticSet ConceptModel::critics() const {
  CriticSet out;
  for (const auto& [node, d] : discriminators_) {
    const Discriminator* p = &d;
    out.emplace(node, [p](const Tensor& x, bool track) { return p->logits(x, track); });
  }
  return out;
}

std::vector<ParameterList*> ConceptModel::generator_parameters() {
  std::vector<ParameterList*> out;
  for (std::size_t k = 0; k < n_concepts(); ++k) {
    out.push_back(&forward_[k].parameters());
    out.push_back(&inverse_[k].parameters());
  }
  return out;
}

std::vector<ParameterList*> ConceptModel::discriminator_parameters() {
  std::vector<ParameterList*> out;
  for (auto& [node, d] : discriminators_) out.push_back(&d.parameters());
  return out;
}

std::vector<const NamedParameter*> ConceptModel::all_parameters() const {
  std::vector<const NamedParameter*> out;
  for (std::size_t k = 0; k < n_concepts(); ++k) {
    for (const auto& p : forward_[k].parameters()) out.push_back(&p);
    for (const auto& p : inverse_[k].parameters()) out.push_back(&p);
  }
  for (const auto& [node, d] : discriminators_) {
    for (const auto& p : d.parameters()) out.push_back(&p);
  }
  return out;
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256: digest failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return out.str();
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("digest: cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return sha256_hex(buf.str());
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::ostringstream out(std::ios::binary);
  out.write(kCheckpointMagic, 4);
  put_u32(out, kVersion);
  put_string(out, config_hash);
  put_string(out, config_json);
  put_string(out, unit_name);
  put_u32(out, static_cast<std::uint32_t>(concept_indices.size()));
  for (std::size_t k = 0; k < concept_indices.size(); ++k) {
    put_u64(out, concept_indices[k]);
    put_string(out, concept_names.at(k));
  }
  put_u32(out, base);
  put_u64(out, epoch);
  put_u64(out, step);
  put_string(out, rng_state);
  put_u32(out, static_cast<std::uint32_t>(adam_steps.size()));
  for (const auto& [name, s] : adam_steps) {
    put_string(out, name);
    put_u64(out, s);
  }
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_string(out, name);
    write_tensor(out, t);
  }
  // Write-then-rename so a crash never leaves a half-written checkpoint.
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream file(tmp, std::ios::binary | std::ios::trunc);
    if (!file) throw CheckpointError("checkpoint: cannot write " + path.string());
    const std::string bytes = out.str();
    file.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!file) throw CheckpointError("checkpoint: write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kCheckpointMagic)) {
    throw CheckpointError("checkpoint: " + path.string() + " is not a checkpoint file");
  }
  const std::uint32_t version = get_u32(in);
  if (version != kVersion) {
    throw CheckpointError("checkpoint: version " + std::to_string(version) + " not supported (expected " +
                          std::to_string(kVersion) + ")");
  }
  Checkpoint c;
  try {
    c.config_hash = get_string(in);
    c.config_json = get_string(in);
    c.unit_name = get_string(in);
    const std::uint32_t n = get_u32(in);
    if (n > 64) throw CheckpointError("checkpoint: implausible concept count");
    for (std::uint32_t k = 0; k < n; ++k) {
      c.concept_indices.push_back(static_cast<std::size_t>(get_u64(in)));
      c.concept_names.push_back(get_string(in));
    }
    c.base = get_u32(in);
    c.epoch = get_u64(in);
    c.step = get_u64(in);
    c.rng_state = get_string(in);
    const std::uint32_t n_adam = get_u32(in);
    for (std::uint32_t i = 0; i < n_adam; ++i) {
      std::string name = get_string(in);
      c.adam_steps[name] = get_u64(in);
    }
    const std::uint32_t n_tensors = get_u32(in);
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
      std::string name = get_string(in);
      c.tensors.emplace(std::move(name), read_tensor(in));
    }
  } catch (const FormatError& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("checkpoint: trailing bytes");
  if (sha256_hex(c.config_json) != c.config_hash) throw CheckpointError("checkpoint: config hash mismatch");
  return c;
}

TrainConfig Checkpoint::config() const {
  try {
    return TrainConfig::from_json(json::parse(config_json));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint: stored config unreadable: ") + e.what());
  }
}

UnitSpec Checkpoint::unit() const { return UnitSpec{unit_name, concept_indices, base}; }

namespace {

void restore_parameters(ConceptModel& model, const Checkpoint& ckpt) {
  // Validate everything first so a bad table leaves the model untouched.
  std::vector<std::pair<Tensor, const Tensor*>> writes;
  auto collect = [&](std::vector<ParameterList*> lists) {
    for (auto* list : lists) {
      for (auto& p : *list) {
        auto it = ckpt.tensors.find(p.path);
        if (it == ckpt.tensors.end()) throw CheckpointError("checkpoint: missing parameter " + p.path);
        if (it->second.shape() != p.value.shape()) throw CheckpointError("checkpoint: shape mismatch for " + p.path);
        writes.emplace_back(p.value, &it->second);
      }
    }
  };
  collect(model.generator_parameters());
  collect(model.discriminator_parameters());
  for (auto& [dst, src] : writes) {
    auto d = dst.mutable_data();
    std::copy(src->data().begin(), src->data().end(), d.begin());
  }
}

}  // namespace

ConceptModel model_from_checkpoint(const Checkpoint& ckpt) {
  const TrainConfig config = ckpt.config();
  const UnitSpec unit = ckpt.unit();
  ConceptModel model(config, unit, local_observed_for(config, unit));
  restore_parameters(model, ckpt);
  return model;
}

void RunLog::append(const std::vector<NamedValue>& values) {
  if (columns.empty()) {
    for (const auto& v : values) columns.push_back(v.name);
  } else if (values.size() != columns.size()) {
    throw std::logic_error("RunLog: row width changed");
  }
  std::vector<double> row;
  for (const auto& v : values) row.push_back(v.value);
  rows.push_back(std::move(row));
}

void RunLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("RunLog: cannot write " + path.string());
  for (std::size_t i = 0; i < columns.size(); ++i) out << (i ? "," : "") << columns[i];
  out << "\n" << std::setprecision(17);
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << "\n";
  }
}

namespace {

GlyphGrid grid_for(const TrainConfig& config) {
  GlyphGrid grid;
  grid.image_size = config.generator.input_size;
  grid.channels = config.generator.channels;
  return grid;
}

}  // namespace

std::map<NodeId, SubdomainDataset> training_data(const TrainConfig& config) {
  config.validate();
  std::map<NodeId, SubdomainDataset> out;
  if (config.data.source == "synthetic") {
    const GlyphGrid grid = grid_for(config);
    const std::uint64_t seed = derive_seed(config.seed, "data/train");
    for (NodeId v : config.observed) {
      out.emplace(v, sample_subdomain(v, config.data.samples_per_node, seed, grid, config.n_concepts));
    }
    return out;
  }
  auto all = load_attribute_csv(config.data.image_dir, config.data.csv_path, config.concept_names);
  for (NodeId v : config.observed) {
    auto& ds = all.at(v);
    if (ds.size() == 0) {
      throw ConfigError("config: no training images for observed node " + node_label(v, config.n_concepts));
    }
    if (ds.images.dim(1) != config.generator.channels || ds.images.dim(2) != config.generator.input_size ||
        ds.images.dim(3) != config.generator.input_size) {
      throw ConfigError("config: CSV images do not match the network input shape");
    }
    out.emplace(v, std::move(ds));
  }
  return out;
}

std::map<NodeId, SubdomainDataset> test_data(const TrainConfig& config) {
  config.validate();
  if (config.data.source != "synthetic") return training_data(config);
  std::map<NodeId, SubdomainDataset> out;
  const GlyphGrid grid = grid_for(config);
  const std::uint64_t seed = derive_seed(config.seed, "data/test");
  for (NodeId v = 0; v < (NodeId{1} << config.n_concepts); ++v) {
    out.emplace(v, sample_subdomain(v, config.data.test_samples, seed, grid, config.n_concepts));
  }
  return out;
}

std::vector<UnitSpec> units_for(const TrainConfig& config) {
  if (config.mode == TrainMode::baseline_cyclegan) {
    return {UnitSpec{"A", {0}, 0}, UnitSpec{"B", {1}, 0}};
  }
  UnitSpec main;
  for (std::size_t k = 0; k < config.n_concepts; ++k) main.concept_indices.push_back(k);
  return {main};
}

namespace {

struct UnitState {
  ConceptModel model;
  std::map<std::string, AdamState> adam;  // keyed by network name
  std::mt19937_64 rng;
  std::uint64_t epoch = 0;
  std::uint64_t step = 0;
};

Checkpoint snapshot(const TrainConfig& config, const UnitState& s) {
  Checkpoint c;
  c.config_json = config.to_json().dump();
  c.config_hash = sha256_hex(c.config_json);
  c.unit_name = s.model.unit().name;
  c.concept_indices = s.model.unit().concept_indices;
  for (std::size_t k : c.concept_indices) c.concept_names.push_back(config.concept_names.at(k));
  c.base = s.model.unit().base;
  c.epoch = s.epoch;
  c.step = s.step;
  std::ostringstream rng;
  rng << s.rng;
  c.rng_state = rng.str();
  for (const NamedParameter* p : s.model.all_parameters()) c.tensors.emplace(p->path, p->value.detach());
  for (const auto& [name, st] : s.adam) {
    c.adam_steps[name] = st.step;
    for (const auto& [path, m] : st.first_moment) c.tensors.emplace("adam/m/" + path, Tensor({m.size()}, m));
    for (const auto& [path, v] : st.second_moment) c.tensors.emplace("adam/v/" + path, Tensor({v.size()}, v));
  }
  return c;
}

void restore_optimizers(UnitState& s, const Checkpoint& c) {
  for (auto& [name, st] : s.adam) {
    auto it = c.adam_steps.find(name);
    if (it == c.adam_steps.end()) throw CheckpointError("checkpoint: no optimizer state for " + name);
    st.step = it->second;
  }
  for (const auto& [key, t] : c.tensors) {
    const bool first = key.rfind("adam/m/", 0) == 0, second = key.rfind("adam/v/", 0) == 0;
    if (!first && !second) continue;
    const std::string path = key.substr(7);
    const std::string net = path.substr(0, path.find('/'));
    auto it = s.adam.find(net);
    if (it == s.adam.end()) throw CheckpointError("checkpoint: optimizer state for unknown network " + net);
    auto& slot = first ? it->second.first_moment[path] : it->second.second_moment[path];
    slot.assign(t.data().begin(), t.data().end());
  }
}

std::string network_of(const ParameterList& list) {
  const std::string& path = list.front().path;
  return path.substr(0, path.find('/'));
}

}  // namespace

UnitResult train_unit(const TrainConfig& config, const UnitSpec& unit,
                      const std::map<NodeId, SubdomainDataset>& global_data, const TrainOptions& options) {
  config.validate();
  UnitState s{ConceptModel(config, unit, local_observed_for(config, unit)), {}, std::mt19937_64(), 0, 0};
  s.rng.seed(derive_seed(config.seed, "batches/" + unit.name));
  for (auto* list : s.model.generator_parameters()) s.adam[network_of(*list)].base_lr = config.schedule.base_lr;
  for (auto* list : s.model.discriminator_parameters()) s.adam[network_of(*list)].base_lr = config.schedule.base_lr;

  if (!options.resume_from.empty()) {
    const Checkpoint c = Checkpoint::load(options.resume_from);
    if (c.config_hash != config.hash()) throw CheckpointError("checkpoint: config differs from the resumed run");
    if (c.unit_name != unit.name) throw CheckpointError("checkpoint: belongs to unit " + c.unit_name);
    restore_parameters(s.model, c);
    restore_optimizers(s, c);
    std::istringstream rng(c.rng_state);
    rng >> s.rng;
    if (!rng) throw CheckpointError("checkpoint: bad RNG state");
    s.epoch = c.epoch;
    s.step = c.step;
  }

  // Local view of the data.
  std::map<NodeId, const SubdomainDataset*> data;
  std::size_t largest = 0;
  for (NodeId l : s.model.graph().observed()) {
    const NodeId g = unit.to_global(l);
    auto it = global_data.find(g);
    if (it == global_data.end() || it->second.size() == 0) {
      throw ConfigError("train: no data for observed node " + node_label(g, config.n_concepts));
    }
    data.emplace(l, &it->second);
    largest = std::max(largest, it->second.size());
  }
  const std::size_t steps_per_epoch = (largest + config.batch_size - 1) / config.batch_size;

  std::filesystem::path ckpt_dir, log_dir;
  if (!options.out_dir.empty()) {
    ckpt_dir = options.out_dir / "checkpoints";
    log_dir = options.out_dir / "logs";
    std::filesystem::create_directories(ckpt_dir);
    std::filesystem::create_directories(log_dir);
  }

  const MappingTable table = s.model.table();
  const CriticSet critics = s.model.critics();
  const InferencePlan& plan = s.model.plan();
  LossAssembler assembler(plan.constraints, config.weights);
  auto draw = [&](NodeId local) {
    const SubdomainDataset& ds = *data.at(local);
    std::vector<std::size_t> idx(config.batch_size);
    for (auto& i : idx) i = static_cast<std::size_t>(s.rng() % ds.size());
    return ds.gather(idx);
  };

  UnitResult result;
  Checkpoint last_good = snapshot(config, s);
  const std::size_t end_epoch =
      options.stop_after_epoch ? std::min(options.stop_after_epoch, config.epochs()) : config.epochs();
  while (s.epoch < end_epoch) {
    const double lr = lr_at(config.schedule, static_cast<std::size_t>(s.epoch));
    try {
      for (std::size_t k = 0; k < steps_per_epoch; ++k) {
        Batches batches;
        for (const auto& [local, ds] : data) batches.emplace(local, draw(local));
        for (const auto& [anchor, seed] : plan.seeds) {
          Tensor x = draw(seed.source);
          NodeId at = seed.source;
          for (std::size_t c : seed.walk) {
            x = table.apply(shift_from(at, c), x);
            at = toggle(at, c);
          }
          batches.emplace(anchor, x.detach());
        }
        assembler.forward_generators(table, batches);
        backward(assembler.discriminator_loss(critics));
        for (auto* list : s.model.discriminator_parameters()) adam_step(s.adam.at(network_of(*list)), *list, lr);
        backward(assembler.generator_loss(critics));
        for (auto* list : s.model.generator_parameters()) adam_step(s.adam.at(network_of(*list)), *list, lr);

        std::vector<NamedValue> row{{"step", static_cast<double>(s.step)},
                                    {"epoch", static_cast<double>(s.epoch)},
                                    {"lr", lr}};
        for (auto& v : assembler.breakdown().columns()) row.push_back(std::move(v));
        result.log.append(row);
        ++s.step;
      }
    } catch (const NumericError&) {
      if (!ckpt_dir.empty()) last_good.save(ckpt_dir / (unit.name + "_last_good.clck"));
      throw;
    }
    ++s.epoch;
    last_good = snapshot(config, s);
    if (!ckpt_dir.empty() && config.checkpoint_every && s.epoch % config.checkpoint_every == 0) {
      last_good.save(ckpt_dir / (unit.name + "_epoch" + std::to_string(s.epoch) + ".clck"));
    }
    if (options.progress) {
      std::ostringstream msg;
      msg << "unit " << unit.name << " epoch " << s.epoch << "/" << config.epochs() << " lr " << lr;
      if (!result.log.rows.empty()) {
        const auto& row = result.log.rows.back();
        msg << " G " << row[row.size() - 2] << " D " << row.back();
      }
      options.progress(msg.str());
    }
  }

  result.checkpoint = last_good;
  if (!ckpt_dir.empty()) {
    result.checkpoint_path = ckpt_dir / (unit.name + ".clck");
    result.checkpoint.save(result.checkpoint_path);
    result.log.write_csv(log_dir / (unit.name + "_steps.csv"));
  }
  return result;
}

TrainResult train(const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  const auto data = training_data(config);
  TrainResult out;
  const auto units = units_for(config);
  for (const auto& unit : units) {
    TrainOptions unit_options = options;
    if (!options.resume_from.empty() && units.size() > 1) {
      // Baseline resume points at the directory holding both unit checkpoints.
      unit_options.resume_from = options.resume_from / (unit.name + ".clck");
    }
    out.units.push_back(train_unit(config, unit, data, unit_options));
  }
  return out;
}

}  // namespace concept_lattice
