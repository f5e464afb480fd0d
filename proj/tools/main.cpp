// concept_lattice command-line entry point: plan, train, eval, synth, augment.
#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "concept_lattice/eval.hpp"
#include "concept_lattice/trainer.hpp"

namespace fs = std::filesystem;
using namespace concept_lattice;
using nlohmann::json;

namespace {

class UsageError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class InputError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  std::string profile = "desk";
  bool dump_config = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "JSON run configuration");
  cmd->add_option("--seed", o.seed, "Seed for every random choice (overrides the config)");
  cmd->add_option("--out", o.out, "Output directory")->capture_default_str();
  cmd->add_option("--profile", o.profile, "Default profile")->check(CLI::IsMember({"desk", "paper"}))->capture_default_str();
  cmd->add_flag("--dump-config", o.dump_config, "Print the resolved configuration and exit");
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Precedence: profile defaults < config file < command-line flags.
TrainConfig resolve_config(const CommonOptions& o, const std::function<void(TrainConfig&)>& flags = {}) {
  TrainConfig c = o.profile == "paper" ? TrainConfig::paper() : TrainConfig::desk();
  if (!o.config_path.empty()) {
    json j;
    try {
      j = json::parse(read_file(o.config_path));
    } catch (const json::parse_error& e) {
      throw ConfigError("config: " + o.config_path + " is not valid JSON: " + e.what());
    }
    c = TrainConfig::from_json(j, c);
  }
  if (o.seed) c.seed = *o.seed;
  if (flags) flags(c);
  c.validate();
  return c;
}

std::size_t thread_cap() {
  const char* env = std::getenv("CONCEPT_LATTICE_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw UsageError("CONCEPT_LATTICE_THREADS must be a positive integer");
  return static_cast<std::size_t>(v);
}

struct Layout {
  fs::path root, checkpoints, logs, reports, images;

  explicit Layout(const fs::path& out)
      : root(out), checkpoints(out / "checkpoints"), logs(out / "logs"), reports(out / "reports"), images(out / "images") {
    for (const auto& d : {checkpoints, logs, reports, images}) fs::create_directories(d);
  }
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw InputError("cannot write " + path.string());
}

// Records the command and every file it left under the output layout.
void write_manifest(const Layout& layout, const std::string& command, const std::vector<std::string>& argv,
                    const CommonOptions& o, std::uint64_t seed) {
  json artifacts = json::array();
  std::vector<fs::path> files;
  for (const auto& d : {layout.checkpoints, layout.logs, layout.reports, layout.images}) {
    for (const auto& e : fs::recursive_directory_iterator(d)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    artifacts.push_back({{"path", fs::relative(f, layout.root).generic_string()}, {"sha256", file_digest(f)}});
  }
  json m{{"command", command},
         {"argv", argv},
         {"seed", seed},
         {"out", layout.root.string()},
         {"config_path", o.config_path},
         {"config_sha256", o.config_path.empty() ? "" : sha256_hex(read_file(o.config_path))},
         {"threads", thread_cap()},
         {"artifacts", artifacts}};
  write_json(layout.root / (command + "_manifest.json"), m);
}

std::vector<Checkpoint> load_checkpoints(const std::vector<std::string>& paths) {
  if (paths.empty()) throw UsageError("at least one --checkpoint is required");
  std::vector<std::string> missing;
  for (const auto& p : paths) {
    if (!fs::exists(p)) missing.push_back(p);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw InputError("missing checkpoint files: " + list);
  }
  std::vector<Checkpoint> out;
  for (const auto& p : paths) out.push_back(Checkpoint::load(p));
  return out;
}

struct Inputs {
  Tensor images;
  std::vector<std::string> names;
};

Inputs load_inputs(const std::vector<std::string>& paths) {
  if (paths.empty()) throw UsageError("at least one --input image is required");
  std::vector<std::string> missing;
  for (const auto& p : paths) {
    if (!fs::exists(p)) missing.push_back(p);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw InputError("missing input files: " + list);
  }
  Inputs in;
  std::vector<double> data;
  Shape image;
  for (const auto& p : paths) {
    const Tensor t = read_pnm(p);
    if (image.empty()) image = t.shape();
    if (t.shape() != image) throw InputError("input " + p + " differs in shape from the first input");
    data.insert(data.end(), t.data().begin(), t.data().end());
    in.names.push_back(fs::path(p).filename().string());
  }
  in.images = Tensor({paths.size(), image[0], image[1], image[2]}, std::move(data));
  return in;
}

NodeId parse_node(const std::string& label, std::size_t n) {
  try {
    return parse_node_label(label, n);
  } catch (const GraphError& e) {
    throw UsageError(e.what());
  }
}

int cmd_plan(const CommonOptions& o, const std::vector<std::string>& argv, int n_flag,
             const std::vector<std::string>& observed_flag) {
  TrainConfig c = resolve_config(o, [&](TrainConfig& cfg) {
    if (n_flag > 0) {
      cfg.n_concepts = static_cast<std::size_t>(n_flag);
      if (cfg.concept_names.size() != cfg.n_concepts) {
        cfg.concept_names.clear();
        for (int k = 0; k < n_flag; ++k) cfg.concept_names.push_back("c" + std::to_string(k + 1));
      }
    }
    if (!observed_flag.empty()) {
      cfg.observed.clear();
      for (const auto& l : observed_flag) cfg.observed.insert(parse_node(l, cfg.n_concepts));
    }
  });
  if (o.dump_config) {
    std::cout << c.to_json().dump(2) << "\n";
    return 0;
  }
  const ConceptGraph graph(c.n_concepts, c.observed);
  const InferencePlan plan = plan_inference(graph, ManifestOptions{true, c.anchor_inferred_layers});
  const std::size_t n = c.n_concepts;
  std::cout << "observed:";
  for (NodeId v : c.observed) std::cout << " " << node_label(v, n);
  std::cout << "\nlayers:";
  for (const auto& layer : plan.layers) {
    std::cout << " {";
    bool first = true;
    for (NodeId v : layer) {
      std::cout << (first ? "" : ",") << v;
      first = false;
    }
    std::cout << "}";
  }
  std::cout << "\n";
  for (std::size_t l = 0; l < plan.layers.size(); ++l) {
    std::cout << "layer " << l + 1 << ":";
    for (NodeId v : plan.layers[l]) std::cout << " " << node_label(v, n);
    std::cout << "\n";
  }
  const auto& m = plan.constraints;
  std::cout << "terms: adv " << m.count(LossKind::adversarial) << " cyc2 " << m.count(LossKind::cyc2) << " cyc4 "
            << m.count(LossKind::cyc4) << " comm " << m.count(LossKind::comm) << " id " << m.count(LossKind::identity)
            << "\n";
  const Layout layout(o.out);
  write_json(layout.reports / "plan.json", plan_to_json(graph, plan));
  write_manifest(layout, "plan", argv, o, c.seed);
  return 0;
}

struct TrainFlags {
  std::string mode;
  bool no_cyc4 = false, no_comm = false;
  std::string resume;
  std::size_t stop_after = 0;
  bool quiet = false;
};

int cmd_train(const CommonOptions& o, const std::vector<std::string>& argv, const TrainFlags& f) {
  TrainConfig c = resolve_config(o, [&](TrainConfig& cfg) {
    if (!f.mode.empty()) cfg.mode = parse_train_mode(f.mode);
    if (f.no_cyc4) cfg.weights.disable_cyc4 = true;
    if (f.no_comm) cfg.weights.disable_comm = true;
  });
  if (o.dump_config) {
    std::cout << c.to_json().dump(2) << "\n";
    return 0;
  }
  const Layout layout(o.out);
  write_json(layout.reports / "config.json", c.to_json());
  TrainOptions t;
  t.out_dir = layout.root;
  t.stop_after_epoch = f.stop_after;
  if (!f.resume.empty()) {
    if (!fs::exists(f.resume)) throw InputError("missing resume checkpoint: " + f.resume);
    t.resume_from = f.resume;
  }
  if (!f.quiet) t.progress = [](const std::string& s) { std::cerr << s << "\n"; };
  const auto result = train(c, t);
  for (const auto& u : result.units) {
    std::cout << "checkpoint " << u.checkpoint_path.string() << " sha256 " << file_digest(u.checkpoint_path) << "\n";
  }
  write_manifest(layout, "train", argv, o, c.seed);
  return 0;
}

struct EvalFlags {
  std::vector<std::string> checkpoints;
  std::vector<std::string> shared;
  std::size_t test_samples = 0;
  std::size_t panel_rows = 5;
};

int cmd_eval(const CommonOptions& o, const std::vector<std::string>& argv, const EvalFlags& f) {
  // Everything is loaded and computed before the first file is written.
  const auto ckpts = load_checkpoints(f.checkpoints);
  const MappingSet set = compose_experiments(ckpts, f.shared);
  TrainConfig c = ckpts.front().config();
  if (o.seed) c.seed = *o.seed;
  if (f.test_samples) c.data.test_samples = f.test_samples;
  const std::size_t n = c.n_concepts;
  if (set.n_concepts() != n) throw UsageError("checkpoints cover " + std::to_string(set.n_concepts()) +
                                              " concepts, the run has " + std::to_string(n));
  const auto test = test_data(c);
  std::map<NodeId, Tensor> observed_test;
  for (NodeId v : c.observed) observed_test.emplace(v, test.at(v).images);

  EvalReport report;
  report.concept_names = set.concept_names();
  for (const auto& p : f.checkpoints) {
    report.checkpoint_digest += (report.checkpoint_digest.empty() ? "" : ",") + file_digest(p);
  }
  report.test_seed = c.seed;
  const bool synthetic = c.data.source == "synthetic";
  if (synthetic && observed_test.count(0)) {
    GlyphGrid grid;
    grid.image_size = c.generator.input_size;
    grid.channels = c.generator.channels;
    const AttributeOracle oracle(grid, n);
    for (const auto& [v, ds] : test) {
      if (!ds.size()) continue;
      report.real.push_back(eval_real_accuracy(oracle, ds.images, v, n));
      report.real.back().path = node_label(v, n);
    }
    for (NodeId target = 1; target < (NodeId{1} << n); ++target) {
      report.synthesis.push_back(eval_joint_accuracy(set, oracle, test.at(0).images, 0, target));
    }
  }
  report.residuals = eval_cycle_and_comm(set.table(), observed_test, n);

  json j = report.to_json();
  j["observed"] = json::array();
  for (NodeId v : c.observed) j["observed"].push_back(node_label(v, n));
  for (auto& s : j["synthesis"]) s["unobserved"] = !c.observed.count(parse_node_label(s["target"], n));
  for (const auto& s : j["synthesis"]) {
    if (s["unobserved"].get<bool>()) {
      j["joint_accuracy"] = s["joint_accuracy"];
      break;
    }
  }

  const Layout layout(o.out);
  write_json(layout.reports / "eval.json", j);
  if (n >= 2 && observed_test.count(0)) {
    const std::size_t rows = std::min(f.panel_rows, test.at(0).size());
    std::vector<std::size_t> idx(rows);
    for (std::size_t i = 0; i < rows; ++i) idx[i] = i;
    const Tensor inputs = test.at(0).gather(idx);
    for (const auto& panel : figure_panels()) {
      write_panel(layout.images / ("panel_" + panel.name + (c.generator.channels == 3 ? ".ppm" : ".pgm")), set, inputs,
                  panel);
    }
  }
  std::cout << j.dump(2) << "\n";
  write_manifest(layout, "eval", argv, o, c.seed);
  return 0;
}

struct SynthFlags {
  std::vector<std::string> checkpoints, shared, inputs, nodes;
  std::string source, target;
};

int cmd_synth(const CommonOptions& o, const std::vector<std::string>& argv, const SynthFlags& f) {
  const auto ckpts = load_checkpoints(f.checkpoints);
  const MappingSet set = compose_experiments(ckpts, f.shared);
  const Inputs in = load_inputs(f.inputs);
  const std::size_t n = set.n_concepts();
  const NodeId source = f.source.empty() ? 0 : parse_node(f.source, n);
  const NodeId target = f.target.empty() ? (NodeId{1} << n) - 1 : parse_node(f.target, n);
  const auto paths = set.paths(source, target);

  std::vector<std::pair<std::string, Tensor>> outputs;
  for (const auto& path : paths) outputs.emplace_back(sequence_name(path), synthesize(set, in.images, path));

  const Layout layout(o.out);
  const std::string ext = in.images.dim(1) == 3 ? ".ppm" : ".pgm";
  std::ofstream manifest(layout.images / "synth_manifest.csv");
  manifest << "file,source,node,path\n";
  std::size_t written = 0;
  for (std::size_t i = 0; i < in.names.size(); ++i) {
    const std::string stem = fs::path(in.names[i]).stem().string();
    for (const auto& [name, images] : outputs) {
      std::string safe = name;
      std::replace(safe.begin(), safe.end(), '#', 'v');
      const std::string file = stem + "_" + node_label(target, n) + "_" + safe + ext;
      const std::size_t per = numel(images.shape()) / images.dim(0);
      write_pnm(layout.images / file,
                Tensor({images.dim(1), images.dim(2), images.dim(3)},
                       std::vector<double>(images.data().begin() + static_cast<std::ptrdiff_t>(i * per),
                                           images.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * per))));
      manifest << file << "," << in.names[i] << "," << node_label(target, n) << "," << name << "\n";
      ++written;
    }
  }
  manifest.close();
  std::cout << "paths " << paths.size() << " images " << written << "\n";
  write_manifest(layout, "synth", argv, o, o.seed.value_or(0));
  return 0;
}

int cmd_augment(const CommonOptions& o, const std::vector<std::string>& argv, const SynthFlags& f) {
  const auto ckpts = load_checkpoints(f.checkpoints);
  const MappingSet set = compose_experiments(ckpts, f.shared);
  const Inputs in = load_inputs(f.inputs);
  const std::size_t n = set.n_concepts();
  const NodeId source = f.source.empty() ? 0 : parse_node(f.source, n);
  std::vector<NodeId> nodes;
  if (f.nodes.empty()) {
    nodes = all_other_nodes(n, source);
  } else if (!(f.nodes.size() == 1 && f.nodes[0] == "none")) {
    for (const auto& l : f.nodes) nodes.push_back(parse_node(l, n));
  }
  const Layout layout(o.out);
  const auto out = export_augmented(set, in.images, in.names, source, nodes, layout.images / "augmented");
  std::cout << "inputs " << in.names.size() << " images " << out.size() << "\n";
  write_manifest(layout, "augment", argv, o, o.seed.value_or(0));
  return 0;
}

std::string error_code(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return "usage";
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const GraphError*>(&e)) return "config";
  if (dynamic_cast<const CheckpointError*>(&e)) return "checkpoint";
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const InputError*>(&e)) return "input";
  if (dynamic_cast<const NumericError*>(&e)) return "numeric";
  if (dynamic_cast<const EvalError*>(&e)) return "eval";
  return "internal";
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '"', '\'');
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compositional concept mappings on a binary concept lattice"};
  app.require_subcommand(1);
  const std::vector<std::string> args(argv, argv + argc);

  CommonOptions plan_o, train_o, eval_o, synth_o, aug_o;
  int plan_n = 0;
  std::vector<std::string> plan_observed;
  auto* plan = app.add_subcommand("plan", "Print and export the inference plan");
  add_common(plan, plan_o);
  plan->add_option("--n", plan_n, "Number of concepts");
  plan->add_option("--observed", plan_observed, "Observed node labels, e.g. 00 10 01");

  TrainFlags tf;
  auto* train_cmd = app.add_subcommand("train", "Train concept mappings");
  add_common(train_cmd, train_o);
  train_cmd->add_option("--mode", tf.mode, "conceptgan or baseline")
      ->check(CLI::IsMember({"conceptgan", "baseline", "baseline_cyclegan"}));
  train_cmd->add_flag("--no-cyc4", tf.no_cyc4, "Drop the distance-4 cycle terms");
  train_cmd->add_flag("--no-comm", tf.no_comm, "Drop the commutativity terms");
  train_cmd->add_option("--resume", tf.resume, "Checkpoint to continue from");
  train_cmd->add_option("--stop-after-epoch", tf.stop_after, "Stop once this epoch is complete");
  train_cmd->add_flag("--quiet", tf.quiet, "No per-epoch progress on stderr");

  EvalFlags ef;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate checkpoints with the attribute oracle");
  add_common(eval_cmd, eval_o);
  eval_cmd->add_option("--checkpoint", ef.checkpoints, "Checkpoint file(s); two for the baseline")->required();
  eval_cmd->add_option("--shared", ef.shared, "Concept names shared between checkpoints");
  eval_cmd->add_option("--test-samples", ef.test_samples, "Test images per node");

  SynthFlags sf, af;
  auto* synth_cmd = app.add_subcommand("synth", "Synthesize images along every composition path");
  add_common(synth_cmd, synth_o);
  synth_cmd->add_option("--checkpoint", sf.checkpoints, "Checkpoint file(s)")->required();
  synth_cmd->add_option("--shared", sf.shared, "Concept names shared between checkpoints");
  synth_cmd->add_option("--input", sf.inputs, "Input PGM/PPM images")->required();
  synth_cmd->add_option("--source", sf.source, "Node label of the inputs (default all zeros)");
  synth_cmd->add_option("--target", sf.target, "Target node label (default all ones)");

  auto* aug_cmd = app.add_subcommand("augment", "Export each input plus one variant per node");
  add_common(aug_cmd, aug_o);
  aug_cmd->add_option("--checkpoint", af.checkpoints, "Checkpoint file(s)")->required();
  aug_cmd->add_option("--shared", af.shared, "Concept names shared between checkpoints");
  aug_cmd->add_option("--input", af.inputs, "Input PGM/PPM images")->required();
  aug_cmd->add_option("--source", af.source, "Node label of the inputs (default all zeros)");
  aug_cmd->add_option("--nodes", af.nodes, "Target node labels (default every other node; 'none' for originals only)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error code=usage message=\"" << one_line(e.what()) << "\"\n";
    return 2;
  }

  try {
    thread_cap();
    if (*plan) return cmd_plan(plan_o, args, plan_n, plan_observed);
    if (*train_cmd) return cmd_train(train_o, args, tf);
    if (*eval_cmd) return cmd_eval(eval_o, args, ef);
    if (*synth_cmd) return cmd_synth(synth_o, args, sf);
    if (*aug_cmd) return cmd_augment(aug_o, args, af);
  } catch (const std::exception& e) {
    const std::string code = error_code(e);
    std::cerr << "error code=" << code << " message=\"" << one_line(e.what()) << "\"\n";
    return code == "usage" || code == "config" ? 2 : 1;
  }
  return 0;
}
