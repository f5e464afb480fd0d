// Acceptance criteria 1-9. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.
//
// Desk runs are deterministic, so finished runs are cached under
// ACCEPTANCE_RUN_DIR keyed by config hash together with their measured wall
// time. Set CONCEPT_LATTICE_ACCEPTANCE_DIR to move the cache; delete it to
// retrain from scratch.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "concept_lattice/eval.hpp"
#include "gradcheck.hpp"
#include "planner_oracle.hpp"
#include "primitive_cases.hpp"

using namespace concept_lattice;
using namespace concept_lattice::testing;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

std::string fmt(double v, int digits = 3) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("concept_lattice_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------------------

Verdict planner_fidelity() {
  Verdict v;
  const auto start = Clock::now();
  v.require(plan_inference(ConceptGraph(3, {0, 1, 2, 4})).layers == std::vector<std::set<NodeId>>{{3, 5, 6}, {7}},
            "observed {0,1,2,4}");
  v.require(plan_inference(ConceptGraph(3, {0, 4, 6, 7})).layers == std::vector<std::set<NodeId>>{{2, 5}, {1, 3}},
            "observed {0,4,6,7}");
  std::size_t valid = 0;
  for (unsigned mask = 0; mask < 256; ++mask) {
    const auto observed = observed_from_mask(mask, 8);
    if (!oracle_valid(observed, 3)) continue;
    ++valid;
    if (plan_inference(ConceptGraph(3, observed)).layers != oracle_layers(observed, 3)) {
      v.require(false, "oracle mismatch at mask " + std::to_string(mask));
    }
  }
  const double t = seconds_since(start);
  v.require(t < 1.0, "runtime " + fmt(t) + " s");
  if (v.pass) v.detail = "both documented cases, " + std::to_string(valid) + " valid subsets agree, " + fmt(t) + " s";
  return v;
}

Verdict constraint_counts() {
  Verdict v;
  const auto m = enumerate_constraints(ConceptGraph(2, {0, 1, 2}));
  const std::size_t adv = m.count(LossKind::adversarial), c2 = m.count(LossKind::cyc2), c4 = m.count(LossKind::cyc4),
                    cm = m.count(LossKind::comm);
  v.require(adv == 4 && c2 == 6 && c4 == 3 && cm == 3, "counts differ");
  v.detail = (v.pass ? "" : v.detail + ": ") + "adv " + std::to_string(adv) + " cyc2 " + std::to_string(c2) + " cyc4 " +
             std::to_string(c4) + " comm " + std::to_string(cm);
  return v;
}

Verdict autodiff() {
  Verdict v;
  const auto start = Clock::now();
  double worst_primitive = 0.0;
  for (const auto& c : primitive_cases()) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      std::mt19937_64 rng(seed * 7919 + 1);
      std::vector<Tensor> inputs;
      for (const auto& s : c.shapes) inputs.push_back(random_tensor(s, rng, true, c.lo, c.hi));
      const Tensor weights = random_tensor(c.build(inputs).shape(), rng, false);
      const auto r = grad_check([&] { return probe_loss(c.build(inputs), weights); }, inputs);
      worst_primitive = std::max(worst_primitive, r.max_rel_error);
      if (r.max_rel_error >= 1e-6) v.require(false, std::string(c.name) + " seed " + std::to_string(seed));
    }
  }

  double worst_composed = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed + 100);
    auto g = build_generator(GeneratorConfig{8, 1, 2, 1, Profile::custom}, seed);
    std::normal_distribution<double> normal(0.0, 0.5);
    for (auto& p : g.parameters()) {
      for (double& x : p.value.mutable_data()) x = normal(rng);
    }
    const auto x = random_tensor({2, 1, 8, 8}, rng, false);
    const auto target = random_tensor({2, 1, 8, 8}, rng, false);
    std::vector<Tensor> leaves;
    for (auto& p : g.parameters()) leaves.push_back(p.value);
    const auto r = grad_check([&] { return mean(abs(g(x) - target)) + mean(g(x) * g(x)); }, leaves, 1e-6);
    worst_composed = std::max(worst_composed, r.max_rel_error);
    if (r.max_rel_error >= 1e-4) v.require(false, "generator seed " + std::to_string(seed));
  }
  const double t = seconds_since(start);
  v.require(t < 60.0, "runtime " + fmt(t) + " s");
  const std::string summary = "max rel error primitives " + [&] {
    std::ostringstream s;
    s << std::scientific << std::setprecision(1) << worst_primitive << ", generator " << worst_composed;
    return s.str();
  }() + ", " + fmt(t, 1) + " s";
  v.detail = v.pass ? summary : v.detail + "; " + summary;
  return v;
}

Mapping affine(double scale, double shift) {
  return [=](const Tensor& x) { return add_scalar(mul_scalar(x, scale), shift); };
}

Tensor pixels(std::vector<double> values) {
  const std::size_t b = values.size();
  return Tensor({b, 1, 1, 1}, std::move(values));
}

Critic uniform_critic() {
  return [](const Tensor& x, bool) { return Tensor::full({x.dim(0)}, 0.0); };
}

Verdict loss_algebra() {
  Verdict v;
  // G1: x+1, F1: x-1, G2: 2x, F2: x/2
  const MappingTable maps{{affine(1, 1), affine(2, 0)}, {affine(1, -1), affine(0.5, 0)}};
  const auto x = pixels({0.75});
  const auto rotation = [&](std::size_t a, std::size_t b) {
    Tensor y = x;
    NodeId at = 0;
    for (std::size_t k : {a, b, a, b}) {
      y = maps.apply(shift_from(at, k), y);
      at = toggle(at, k);
    }
    return std::abs(y.item() - 0.75);
  };
  v.require(std::abs(rotation(0, 1) - 0.5) < 1e-12, "clockwise residual");
  v.require(std::abs(rotation(1, 0) - 0.5) < 1e-12, "counterclockwise residual");
  v.require(std::abs(cyc4_loss(maps, x, 0, 0, 1).item() - 1.0) < 1e-12, "cyc4 term");
  v.require(std::abs(comm_loss(maps, pixels({0.3, -0.8}), 0, 0, 1).item() - 1.0) < 1e-12, "comm term");

  const auto manifest = enumerate_constraints(ConceptGraph(2, {0, 1, 2}));
  const Batches batches{{0, pixels({0.5, -1.0})}, {1, pixels({0.25})}, {2, pixels({-0.75, 1.0})}};
  const CriticSet critics{{0, uniform_critic()}, {1, uniform_critic()}, {2, uniform_critic()}};
  const auto e = total_loss(manifest, maps, critics, batches, LossWeights{});
  const double expected = 4 * std::log(2.0) + 10 * 4.0 + 10 * 2.5 + 10 * 4.375;
  const double total = e.generator_total.item();
  v.require(std::abs(total - expected) < 1e-12, "assembled total " + fmt(total, 12));

  const auto id = [](const Tensor& t) { return t; };
  const MappingTable identity{{id, id}, {id, id}};
  const auto zero = total_loss(manifest, identity, critics, batches, LossWeights{});
  for (const auto* family : {&zero.breakdown.cyc2, &zero.breakdown.cyc4, &zero.breakdown.comm, &zero.breakdown.identity}) {
    for (const auto& t : *family) v.require(t.value == 0.0, "identity " + t.name + " = " + fmt(t.value, 17));
  }
  if (v.pass) {
    v.detail = "cyc4 rotations 0.5 + 0.5, comm 1.0, total " + fmt(total, 12) + " (hand " + fmt(expected, 12) +
               "), identity terms 0";
  }
  return v;
}

// ---------------------------------------------------------------------------
// Desk runs

struct RunOutcome {
  double canonical_joint = 0.0;
  double mean_joint = 0.0;
  double seconds = 0.0;
  bool cached = false;
};

fs::path run_root() {
  if (const char* env = std::getenv("CONCEPT_LATTICE_ACCEPTANCE_DIR")) return env;
  return ACCEPTANCE_RUN_DIR;
}

TrainConfig desk_config(std::uint64_t seed, TrainMode mode, bool no_cyc4, bool no_comm) {
  TrainConfig c = TrainConfig::desk();
  c.seed = seed;
  c.mode = mode;
  c.weights.disable_cyc4 = no_cyc4;
  c.weights.disable_comm = no_comm;
  return c;
}

std::vector<fs::path> unit_checkpoints(const TrainConfig& c, const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& u : units_for(c)) out.push_back(dir / "checkpoints" / (u.name + ".clck"));
  return out;
}

// Trains (or reuses a cached run of) one config and scores the zero-shot node.
RunOutcome desk_run(const TrainConfig& c, const std::string& label) {
  const auto dir = run_root() / c.hash().substr(0, 16);
  const auto meta_path = dir / "run.json";
  RunOutcome out;
  std::vector<Checkpoint> ckpts;

  bool reuse = fs::exists(meta_path);
  if (reuse) {
    try {
      const auto meta = json::parse(std::ifstream(meta_path));
      reuse = meta.at("config_hash") == c.hash();
      out.seconds = meta.at("seconds").get<double>();
      for (const auto& p : unit_checkpoints(c, dir)) {
        ckpts.push_back(Checkpoint::load(p));
        reuse = reuse && ckpts.back().config_hash == c.hash() && ckpts.back().epoch == c.epochs();
      }
    } catch (const std::exception&) {
      reuse = false;
    }
  }
  if (reuse) {
    out.cached = true;
  } else {
    ckpts.clear();
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::cout << "  training " << label << " (" << c.epochs() << " epochs)" << std::endl;
    TrainOptions o;
    o.out_dir = dir;
    o.progress = [&](const std::string& line) { std::cout << "    " << label << " " << line << std::endl; };
    const auto start = Clock::now();
    auto result = train(c, o);
    out.seconds = seconds_since(start);
    for (auto& u : result.units) ckpts.push_back(std::move(u.checkpoint));
    std::ofstream(meta_path) << json{{"config_hash", c.hash()}, {"label", label}, {"seconds", out.seconds}}.dump(2);
  }

  const MappingSet set = compose_experiments(ckpts);
  GlyphGrid grid;
  grid.image_size = c.generator.input_size;
  grid.channels = c.generator.channels;
  const AttributeOracle oracle(grid, c.n_concepts);
  const auto test = test_data(c);
  const auto acc = eval_joint_accuracy(set, oracle, test.at(0).images, 0, 3);
  out.canonical_joint = acc.canonical.joint;
  out.mean_joint = acc.mean_joint;
  std::cout << "  " << label << ": joint " << fmt(out.canonical_joint) << " (" << acc.canonical.path
            << "), mean over paths " << fmt(out.mean_joint) << ", " << fmt(out.seconds / 60.0, 1) << " min"
            << (out.cached ? " (cached)" : "") << std::endl;
  return out;
}

struct Arm {
  std::string name;
  std::vector<RunOutcome> runs;

  double median_joint() const {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.canonical_joint);
    return median(v);
  }
  std::string joints() const {
    std::string s;
    for (const auto& r : runs) s += (s.empty() ? "" : "/") + fmt(r.canonical_joint);
    return s;
  }
};

Arm run_arm(const std::string& name, TrainMode mode, bool no_cyc4, bool no_comm) {
  Arm arm{name, {}};
  for (std::uint64_t seed : {1, 2, 3}) {
    arm.runs.push_back(desk_run(desk_config(seed, mode, no_cyc4, no_comm), name + " seed " + std::to_string(seed)));
  }
  return arm;
}

Verdict synthesis_quality(const Arm& full) {
  Verdict v;
  const double m = full.median_joint();
  double slowest = 0.0;
  for (const auto& r : full.runs) slowest = std::max(slowest, r.seconds);
  v.require(m >= 0.85, "median joint " + fmt(m) + " < 0.850");
  v.require(slowest <= 30 * 60.0, "slowest run " + fmt(slowest / 60.0, 1) + " min");
  const std::string summary =
      "median joint " + fmt(m) + " (seeds " + full.joints() + "), slowest run " + fmt(slowest / 60.0, 1) + " min";
  v.detail = v.pass ? summary : v.detail + "; " + summary;
  return v;
}

Verdict baseline_separation(const Arm& full, const Arm& baseline) {
  Verdict v;
  const double gap = full.median_joint() - baseline.median_joint();
  v.require(gap >= 0.20 - 1e-12, "gap below 20 points");
  v.detail = (v.pass ? "" : v.detail + ": ") + "full " + fmt(full.median_joint()) + " vs baseline " +
             fmt(baseline.median_joint()) + " (seeds " + baseline.joints() + "), gap " + fmt(100 * gap, 1) + " points";
  return v;
}

Verdict ablation_ordering(const Arm& full, const Arm& no_comm, const Arm& no_cyc4) {
  Verdict v;
  const double a = full.median_joint(), b = no_comm.median_joint(), c = no_cyc4.median_joint();
  v.require(a >= b, "full < no-comm");
  v.require(b >= c, "no-comm < no-cyc4");
  v.detail = (v.pass ? "" : v.detail + ": ") + "medians full " + fmt(a) + ", no-comm " + fmt(b) + " (" +
             no_comm.joints() + "), no-cyc4 " + fmt(c) + " (" + no_cyc4.joints() + ")";
  return v;
}

// ---------------------------------------------------------------------------

Experiment identity_experiment(const std::string& name, std::vector<std::string> concepts) {
  const Mapping id = [](const Tensor& x) { return x; };
  MappingTable t{std::vector<Mapping>(concepts.size(), id), std::vector<Mapping>(concepts.size(), id)};
  return Experiment{name, std::move(concepts), std::move(t), {}};
}

Verdict composition_counts() {
  Verdict v;
  const auto set = compose_experiments({identity_experiment("a", {"c1", "c2"}), identity_experiment("b", {"c2", "c3"})},
                                       {"c2"});
  const std::size_t paths = set.paths(0, 7).size();
  v.require(paths == 12, "paths " + std::to_string(paths));

  const GlyphGrid grid;
  const auto probes = sample_subdomain(0, 2, 3, grid);
  const auto two = compose_experiments({identity_experiment("e", {"shape", "style"})});
  const auto d2 = scratch("aug2"), d3 = scratch("aug3");
  const std::size_t per2 = export_augmented(two, probes.images, {"p0.pgm", "p1.pgm"}, 0, all_other_nodes(2, 0), d2).size() / 2;
  const std::size_t per3 =
      export_augmented(set, probes.images, {"p0.pgm", "p1.pgm"}, 0, all_other_nodes(3, 0), d3).size() / 2;
  v.require(per2 == 4, "2-concept images per input " + std::to_string(per2));
  v.require(per3 == 8, "3-concept images per input " + std::to_string(per3));
  if (v.pass) {
    v.detail = std::to_string(paths) + " paths; " + std::to_string(per2) + " and " + std::to_string(per3) +
               " images per input";
  }
  return v;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.generator = GeneratorConfig{8, 1, 2, 1, Profile::custom};
  c.discriminator = DiscriminatorConfig{8, 1, 2, Profile::custom};
  c.data.samples_per_node = 8;
  c.data.test_samples = 6;
  c.batch_size = 4;
  c.schedule = LrSchedule{2e-4, 2, 2};
  c.seed = 5;
  return c;
}

Verdict determinism_and_resume() {
  Verdict v;
  for (TrainMode mode : {TrainMode::conceptgan, TrainMode::baseline_cyclegan}) {
    TrainConfig c = tiny_config();
    c.mode = mode;
    const std::string tag = to_string(mode);
    const auto a = scratch(tag + "_a"), b = scratch(tag + "_b"), part = scratch(tag + "_part");
    TrainOptions oa, ob;
    oa.out_dir = a;
    ob.out_dir = b;
    const auto ra = train(c, oa), rb = train(c, ob);
    for (std::size_t u = 0; u < ra.units.size(); ++u) {
      v.require(file_digest(ra.units[u].checkpoint_path) == file_digest(rb.units[u].checkpoint_path),
                tag + " repeat differs");
    }
    for (std::size_t k = 1; k < c.epochs(); ++k) {
      TrainOptions first;
      first.out_dir = part;
      first.stop_after_epoch = k;
      train(c, first);
      TrainOptions second;
      second.out_dir = part;
      second.resume_from = mode == TrainMode::conceptgan ? part / "checkpoints" / "main.clck" : part / "checkpoints";
      const auto resumed = train(c, second);
      for (std::size_t u = 0; u < ra.units.size(); ++u) {
        v.require(file_digest(resumed.units[u].checkpoint_path) == file_digest(ra.units[u].checkpoint_path),
                  tag + " resume after epoch " + std::to_string(k) + " differs");
      }
    }
  }
  if (v.pass) v.detail = "repeat runs and resume after every epoch are bit-identical (ConceptGAN and baseline)";
  return v;
}

}  // namespace

int main() {
  std::vector<std::pair<int, Verdict>> verdicts;
  auto report = [&](int n, const std::function<Verdict()>& f) {
    Verdict v;
    try {
      v = f();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("exception: ") + e.what();
    }
    std::cout << "criterion " << n << ": " << (v.pass ? "PASS" : "FAIL") << " " << v.detail << std::endl;
    verdicts.emplace_back(n, v);
  };

  report(1, planner_fidelity);
  report(2, constraint_counts);
  report(3, autodiff);
  report(4, loss_algebra);

  std::cout << "desk runs in " << run_root().string() << std::endl;
  Arm full, baseline, no_comm, no_cyc4;
  std::string run_error;
  try {
    full = run_arm("full", TrainMode::conceptgan, false, false);
    baseline = run_arm("baseline", TrainMode::baseline_cyclegan, false, false);
    no_comm = run_arm("no-comm", TrainMode::conceptgan, false, true);
    no_cyc4 = run_arm("no-cyc4", TrainMode::conceptgan, true, false);
  } catch (const std::exception& e) {
    run_error = e.what();
  }
  auto guarded = [&](const std::function<Verdict()>& f) {
    return [&, f] {
      if (!run_error.empty()) throw std::runtime_error("desk run failed: " + run_error);
      return f();
    };
  };
  report(5, guarded([&] { return synthesis_quality(full); }));
  report(6, guarded([&] { return baseline_separation(full, baseline); }));
  report(7, guarded([&] { return ablation_ordering(full, no_comm, no_cyc4); }));
  report(8, composition_counts);
  report(9, determinism_and_resume);

  std::size_t passed = 0;
  std::cout << "summary:";
  for (const auto& [n, v] : verdicts) {
    std::cout << " " << n << "=" << (v.pass ? "PASS" : "FAIL");
    passed += v.pass;
  }
  std::cout << " (" << passed << "/" << verdicts.size() << ")" << std::endl;
  return passed == verdicts.size() ? 0 : 1;
}
