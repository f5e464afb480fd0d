#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "concept_lattice/data.hpp"
#include "concept_lattice/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "concept_lattice_cli";

struct Result {
  int code;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Result run(const std::string& args, const std::string& env = "") {
  const auto out = kRoot / "stdout.txt", err = kRoot / "stderr.txt";
  const std::string cmd = env + " " + CONCEPT_LATTICE_CLI + " " + args + " > " + out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

fs::path tiny_config(const std::string& name, json extra = json::object()) {
  json j{{"generator", {{"input_size", 8}, {"channels", 1}, {"base_filters", 2}, {"n_residual_blocks", 1}, {"profile", "custom"}}},
         {"discriminator", {{"input_size", 8}, {"channels", 1}, {"base_filters", 2}, {"profile", "custom"}}},
         {"data", {{"samples_per_node", 8}, {"test_samples", 6}}},
         {"batch_size", 4},
         {"schedule", {{"learning_rate", 2e-4}, {"constant_epochs", 1}, {"decay_epochs", 1}}}};
  j.merge_patch(extra);
  const auto path = kRoot / (name + ".json");
  std::ofstream(path) << j.dump();
  return path;
}

bool single_error_line(const std::string& err) {
  return err.rfind("error code=", 0) == 0 && err.find('\n') == err.size() - 1;
}

std::string artifact_digests(const fs::path& manifest) {
  const auto m = json::parse(slurp(manifest));
  std::string s;
  for (const auto& a : m["artifacts"]) s += a["path"].get<std::string>() + "=" + a["sha256"].get<std::string>() + ";";
  return s;
}

struct Setup {
  Setup() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
  }
};
const Setup setup;

}  // namespace

TEST_CASE("plan prints layers and term counts") {
  auto r = run("plan --n 3 --observed 000 100 010 001 --out " + (kRoot / "plan3").string());
  CHECK(r.code == 0);
  CHECK(r.out.find("layers: {3,5,6} {7}") != std::string::npos);
  CHECK(fs::exists(kRoot / "plan3" / "reports" / "plan.json"));
  CHECK(fs::exists(kRoot / "plan3" / "plan_manifest.json"));

  r = run("plan --out " + (kRoot / "plan2").string());
  CHECK(r.code == 0);
  CHECK(r.out.find("terms: adv 4 cyc2 6 cyc4 3 comm 3 id 3") != std::string::npos);

  r = run("plan --n 2 --observed 00 10 --out " + (kRoot / "bad").string());
  CHECK(r.code != 0);
  CHECK(single_error_line(r.err));
  CHECK(r.err.find("code=config") != std::string::npos);

  r = run("plan --dump-config --seed 9");
  CHECK(r.code == 0);
  CHECK(json::parse(r.out)["seed"] == 9);
}

TEST_CASE("train is deterministic and records its artifacts") {
  const auto cfg = tiny_config("train");
  const auto a = kRoot / "train_a", b = kRoot / "train_b";
  CHECK(run("train --quiet --config " + cfg.string() + " --seed 7 --out " + a.string()).code == 0);
  CHECK(run("train --quiet --config " + cfg.string() + " --seed 7 --out " + b.string()).code == 0);
  CHECK(fs::exists(a / "checkpoints" / "main.clck"));
  CHECK(fs::exists(a / "logs" / "main_steps.csv"));
  CHECK(artifact_digests(a / "train_manifest.json") == artifact_digests(b / "train_manifest.json"));
  const auto manifest = json::parse(slurp(a / "train_manifest.json"));
  CHECK(manifest["seed"] == 7);
  CHECK(manifest["artifacts"].size() == 3);  // checkpoint, step log, resolved config

  const auto c = kRoot / "train_c";
  CHECK(run("train --quiet --config " + cfg.string() + " --seed 8 --out " + c.string()).code == 0);
  CHECK(concept_lattice::file_digest(a / "checkpoints" / "main.clck") !=
        concept_lattice::file_digest(c / "checkpoints" / "main.clck"));

  // Flags override the file; --dump-config shows the result.
  auto r = run("train --dump-config --config " + cfg.string() + " --no-cyc4 --mode baseline");
  CHECK(r.code == 0);
  const auto dumped = json::parse(r.out);
  CHECK(dumped["loss"]["disable_cyc4"] == true);
  CHECK(dumped["mode"] == "baseline_cyclegan");
  CHECK(dumped["batch_size"] == 4);
}

TEST_CASE("train ablations and baseline") {
  const auto cfg = tiny_config("ablate");
  const auto d = kRoot / "no_cyc4";
  CHECK(run("train --quiet --no-cyc4 --config " + cfg.string() + " --out " + d.string()).code == 0);
  const auto header = slurp(d / "logs" / "main_steps.csv").substr(0, slurp(d / "logs" / "main_steps.csv").find('\n'));
  CHECK(header.find("cyc4") == std::string::npos);
  CHECK(header.find("comm_00") != std::string::npos);

  const auto base = kRoot / "baseline";
  CHECK(run("train --quiet --mode baseline --config " + cfg.string() + " --out " + base.string()).code == 0);
  CHECK(fs::exists(base / "checkpoints" / "A.clck"));
  CHECK(fs::exists(base / "checkpoints" / "B.clck"));
}

TEST_CASE("eval writes a report and three panels") {
  const auto cfg = tiny_config("eval");
  const auto d = kRoot / "eval_run";
  REQUIRE(run("train --quiet --config " + cfg.string() + " --out " + d.string()).code == 0);
  auto r = run("eval --checkpoint " + (d / "checkpoints" / "main.clck").string() + " --out " + d.string());
  CHECK(r.code == 0);
  const auto report = json::parse(slurp(d / "reports" / "eval.json"));
  CHECK(report.contains("joint_accuracy"));
  CHECK(report["synthesis"].size() == 3);
  for (const char* p : {"panel_clockwise.pgm", "panel_counterclockwise.pgm", "panel_commutative.pgm"}) {
    CHECK(fs::exists(d / "images" / p));
  }
  const auto first = slurp(d / "reports" / "eval.json");
  CHECK(run("eval --checkpoint " + (d / "checkpoints" / "main.clck").string() + " --out " + d.string()).code == 0);
  CHECK(slurp(d / "reports" / "eval.json") == first);

  // Baseline: the two units compose into one mapping set.
  const auto base = kRoot / "eval_base";
  REQUIRE(run("train --quiet --mode baseline --config " + cfg.string() + " --out " + base.string()).code == 0);
  r = run("eval --checkpoint " + (base / "checkpoints" / "A.clck").string() + " " +
          (base / "checkpoints" / "B.clck").string() + " --out " + base.string());
  CHECK(r.code == 0);
  CHECK(json::parse(slurp(base / "reports" / "eval.json"))["synthesis"][2]["canonical_path"] == "G1G2");

  // A corrupt checkpoint fails before any report is written.
  const auto bad = kRoot / "corrupt";
  fs::create_directories(bad);
  std::string bytes = slurp(d / "checkpoints" / "main.clck");
  std::ofstream(bad / "main.clck", std::ios::binary) << bytes.substr(0, bytes.size() / 3);
  r = run("eval --checkpoint " + (bad / "main.clck").string() + " --out " + (bad / "out").string());
  CHECK(r.code != 0);
  CHECK(single_error_line(r.err));
  CHECK(r.err.find("code=checkpoint") != std::string::npos);
  CHECK(!fs::exists(bad / "out" / "reports" / "eval.json"));
}

TEST_CASE("synth and augment") {
  const auto one = tiny_config("exp1", {{"concept_names", {"shape", "style"}}});
  const auto two = tiny_config("exp2", {{"concept_names", {"style", "stripe"}}, {"seed", 3}});
  const auto d1 = kRoot / "exp1", d2 = kRoot / "exp2";
  REQUIRE(run("train --quiet --config " + one.string() + " --out " + d1.string()).code == 0);
  REQUIRE(run("train --quiet --config " + two.string() + " --out " + d2.string()).code == 0);

  concept_lattice::GlyphGrid grid;
  grid.image_size = 8;
  const auto probes = concept_lattice::sample_subdomain(0, 2, 11, grid);
  std::string inputs;
  for (std::size_t i = 0; i < 2; ++i) {
    const auto p = kRoot / ("probe" + std::to_string(i) + ".pgm");
    concept_lattice::write_pnm(p, concept_lattice::reshape(probes.gather({i}), {1, 8, 8}));
    inputs += " " + p.string();
  }
  const std::string ck1 = (d1 / "checkpoints" / "main.clck").string(), ck2 = (d2 / "checkpoints" / "main.clck").string();

  const auto s = kRoot / "synth";
  auto r = run("synth --checkpoint " + ck1 + " " + ck2 + " --shared style --target 111 --input" + inputs + " --out " +
               s.string());
  CHECK(r.code == 0);
  CHECK(r.out.find("paths 12 images 24") != std::string::npos);

  r = run("synth --checkpoint " + ck1 + " " + ck2 + " --input" + inputs + " --out " + s.string());
  CHECK(r.code != 0);
  CHECK(r.err.find("not declared shared") != std::string::npos);

  r = run("synth --checkpoint " + ck1 + " --input " + (kRoot / "nope.pgm").string() + " " +
          (kRoot / "nada.pgm").string() + " --out " + s.string());
  CHECK(r.code != 0);
  CHECK(single_error_line(r.err));
  CHECK(r.err.find("nope.pgm") != std::string::npos);
  CHECK(r.err.find("nada.pgm") != std::string::npos);

  const auto a2 = kRoot / "aug2";
  r = run("augment --checkpoint " + ck1 + " --input" + inputs + " --out " + a2.string());
  CHECK(r.code == 0);
  CHECK(r.out.find("inputs 2 images 8") != std::string::npos);

  const auto a3 = kRoot / "aug3";
  r = run("augment --checkpoint " + ck1 + " " + ck2 + " --shared style --input" + inputs + " --out " + a3.string());
  CHECK(r.code == 0);
  CHECK(r.out.find("inputs 2 images 16") != std::string::npos);

  const auto a0 = kRoot / "aug0";
  r = run("augment --checkpoint " + ck1 + " --nodes none --input" + inputs + " --out " + a0.string());
  CHECK(r.out.find("inputs 2 images 2") != std::string::npos);
}

TEST_CASE("environment and usage errors are single lines") {
  auto r = run("plan --out " + (kRoot / "env").string(), "CONCEPT_LATTICE_THREADS=zero");
  CHECK(r.code == 2);
  CHECK(single_error_line(r.err));
  CHECK(run("plan --out " + (kRoot / "env").string(), "CONCEPT_LATTICE_THREADS=2").code == 0);
  r = run("frobnicate");
  CHECK(r.code == 2);
  CHECK(single_error_line(r.err));
  r = run("train --config " + (kRoot / "missing.json").string());
  CHECK(r.code != 0);
  CHECK(single_error_line(r.err));
}
