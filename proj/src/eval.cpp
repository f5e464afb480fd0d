#include "concept_lattice/eval.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

namespace concept_lattice {

using nlohmann::json;

namespace {

constexpr std::size_t kChunk = 64;

Tensor rows(const Tensor& images, std::size_t begin, std::size_t end) {
  const std::size_t per = numel(images.shape()) / images.dim(0);
  Shape shape = images.shape();
  shape[0] = end - begin;
  std::vector<double> out(images.data().begin() + static_cast<std::ptrdiff_t>(begin * per),
                          images.data().begin() + static_cast<std::ptrdiff_t>(end * per));
  return Tensor(shape, std::move(out));
}

Tensor single(const Tensor& images, std::size_t i) {
  const auto r = rows(images, i, i + 1);
  return reshape(r, Shape(r.shape().begin() + 1, r.shape().end()));
}

double scalar(const Tensor& t) { return t.data()[0]; }

double quantile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto i = static_cast<std::size_t>(q * static_cast<double>(v.size() - 1) + 0.5);
  return v[std::min(i, v.size() - 1)];
}

// Oracle attribute slot of each registry concept: the glyph attribute of the
// same name when there is one, else the concept's own position.
std::vector<std::size_t> oracle_slots(const std::vector<std::string>& names) {
  std::vector<std::size_t> slots;
  for (std::size_t k = 0; k < names.size(); ++k) {
    auto it = std::find(std::begin(kSyntheticConcepts), std::end(kSyntheticConcepts), names[k]);
    slots.push_back(it == std::end(kSyntheticConcepts) ? k : static_cast<std::size_t>(it - std::begin(kSyntheticConcepts)));
  }
  return slots;
}

AccuracyFragment score(const AttributeOracle& oracle, const Tensor& images, NodeId target,
                       const std::vector<std::size_t>& slots) {
  AccuracyFragment f;
  const auto results = oracle.classify_batch(images);
  std::vector<std::size_t> hits(slots.size(), 0);
  std::size_t joint = 0, realistic = 0;
  std::vector<double> residuals;
  for (const auto& r : results) {
    bool all = true;
    for (std::size_t k = 0; k < slots.size(); ++k) {
      const bool ok = concept_active(r.attributes, slots[k]) == concept_active(target, k);
      hits[k] += ok;
      all = all && ok;
    }
    joint += all;
    realistic += r.residual <= oracle.realism_threshold();
    residuals.push_back(r.residual);
  }
  const double n = results.empty() ? 1.0 : static_cast<double>(results.size());
  for (auto h : hits) f.per_concept.push_back(static_cast<double>(h) / n);
  f.joint = static_cast<double>(joint) / n;
  f.realistic = static_cast<double>(realistic) / n;
  f.residual_quantiles = {quantile(residuals, 0.5), quantile(residuals, 0.9), quantile(residuals, 0.99)};
  return f;
}

json fragment_json(const AccuracyFragment& f, const std::vector<std::string>& names) {
  json per = json::object();
  for (std::size_t k = 0; k < f.per_concept.size(); ++k) per[names.at(k)] = f.per_concept[k];
  return json{{"path", f.path},
              {"per_concept", per},
              {"joint", f.joint},
              {"realistic", f.realistic},
              {"residual_q50", f.residual_quantiles.at(0)},
              {"residual_q90", f.residual_quantiles.at(1)},
              {"residual_q99", f.residual_quantiles.at(2)}};
}

json named_values(const std::vector<NamedValue>& values) {
  json out = json::object();
  for (const auto& v : values) out[v.name] = v.value;
  return out;
}

}  // namespace

Experiment experiment_from_checkpoint(const Checkpoint& ckpt, const std::string& name) {
  auto model = std::make_shared<ConceptModel>(model_from_checkpoint(ckpt));
  Experiment e;
  e.name = name.empty() ? ckpt.unit_name : name;
  e.concept_names = ckpt.concept_names;
  e.table = model->table();
  e.owner = model;
  return e;
}

std::size_t MappingSet::concept_index(const std::string& name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw EvalError("eval: unknown concept '" + name + "'");
  return static_cast<std::size_t>(it - names_.begin());
}

std::vector<std::size_t> MappingSet::variant_counts() const {
  std::vector<std::size_t> out;
  for (const auto& v : variants_) out.push_back(v.size());
  return out;
}

const std::string& MappingSet::source(std::size_t k, std::size_t variant) const {
  return variants_.at(k).at(variant).experiment;
}

const Mapping& MappingSet::at(const MappingRef& ref) const {
  if (ref.concept_index >= names_.size() || ref.variant >= variants_[ref.concept_index].size()) {
    throw EvalError("eval: no mapping " + ref.name());
  }
  const auto& v = variants_[ref.concept_index][ref.variant];
  return ref.direction == ShiftDirection::forward ? v.forward : v.inverse;
}

MappingTable MappingSet::table() const {
  MappingTable t;
  for (const auto& v : variants_) {
    t.forward.push_back(v.front().forward);
    t.inverse.push_back(v.front().inverse);
  }
  return t;
}

std::vector<std::vector<MappingRef>> MappingSet::paths(NodeId source, NodeId target) const {
  if (names_.empty()) throw EvalError("eval: empty mapping set");
  std::set<NodeId> all;
  for (NodeId v = 0; v < (NodeId{1} << names_.size()); ++v) all.insert(v);
  const ConceptGraph graph(names_.size(), all);
  return composition_paths(graph, source, target, variant_counts());
}

void MappingSet::add(const Experiment& e, const std::vector<std::string>& shared) {
  if (e.concept_names.size() != e.table.n_concepts()) {
    throw EvalError("eval: experiment " + e.name + " names " + std::to_string(e.concept_names.size()) +
                    " concepts but has " + std::to_string(e.table.n_concepts()) + " mappings");
  }
  for (std::size_t k = 0; k < e.concept_names.size(); ++k) {
    const std::string& name = e.concept_names[k];
    auto it = std::find(names_.begin(), names_.end(), name);
    Variant v{e.name, e.table.forward[k], e.table.inverse[k]};
    if (it == names_.end()) {
      names_.push_back(name);
      variants_.push_back({std::move(v)});
      continue;
    }
    if (std::find(shared.begin(), shared.end(), name) == shared.end()) {
      throw EvalError("eval: concept '" + name + "' appears in several experiments but is not declared shared");
    }
    variants_[static_cast<std::size_t>(it - names_.begin())].push_back(std::move(v));
  }
  if (e.owner) owners_.push_back(e.owner);
}

MappingSet compose_experiments(const std::vector<Experiment>& experiments,
                               const std::vector<std::string>& shared_concepts) {
  if (experiments.empty()) throw EvalError("eval: no experiments to compose");
  MappingSet set;
  for (const auto& e : experiments) set.add(e, shared_concepts);
  for (const auto& name : shared_concepts) {
    if (set.variant_count(set.concept_index(name)) < 2) {
      throw EvalError("eval: shared concept '" + name + "' is trained by only one experiment");
    }
  }
  return set;
}

MappingSet compose_experiments(const std::vector<Checkpoint>& checkpoints,
                               const std::vector<std::string>& shared_concepts) {
  std::vector<Experiment> experiments;
  std::set<std::string> used;
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    std::string name = checkpoints[i].unit_name;
    if (!used.insert(name).second) name += "#" + std::to_string(i);
    used.insert(name);
    experiments.push_back(experiment_from_checkpoint(checkpoints[i], name));
  }
  return compose_experiments(experiments, shared_concepts);
}

Tensor synthesize(const MappingSet& mappings, const Tensor& images, const std::vector<MappingRef>& path) {
  if (path.empty()) return images.detach();
  if (images.rank() != 4) throw ShapeError("synthesize: expected [batch, C, H, W]");
  std::vector<double> out;
  out.reserve(numel(images.shape()));
  for (std::size_t b = 0; b < images.dim(0); b += kChunk) {
    Tensor x = rows(images, b, std::min(images.dim(0), b + kChunk));
    for (const auto& ref : path) x = mappings.at(ref)(x).detach();
    if (x.shape() != Shape{x.dim(0), images.dim(1), images.dim(2), images.dim(3)}) {
      throw ShapeError("synthesize: mapping " + sequence_name(path) + " changed the image shape");
    }
    out.insert(out.end(), x.data().begin(), x.data().end());
  }
  return Tensor(images.shape(), std::move(out));
}

JointAccuracy eval_joint_accuracy(const MappingSet& mappings, const AttributeOracle& oracle, const Tensor& source_images,
                                  NodeId source, NodeId target) {
  if (source_images.rank() != 4 || source_images.dim(0) == 0) throw EvalError("eval: no source images");
  if (mappings.n_concepts() > oracle.n_concepts()) {
    throw EvalError("eval: oracle covers fewer concepts than the mapping set");
  }
  const auto slots = oracle_slots(mappings.concept_names());
  JointAccuracy out;
  out.source = source;
  out.target = target;
  const auto paths = mappings.paths(source, target);
  double total = 0.0;
  for (const auto& path : paths) {
    AccuracyFragment f = score(oracle, synthesize(mappings, source_images, path), target, slots);
    f.path = sequence_name(path);
    total += f.joint;
    out.paths.push_back(std::move(f));
  }
  // composition_paths lists the ascending, first-variant ordering first.
  out.canonical = out.paths.front();
  out.mean_joint = total / static_cast<double>(paths.size());
  return out;
}

AccuracyFragment eval_real_accuracy(const AttributeOracle& oracle, const Tensor& images, NodeId node,
                                    std::size_t n_concepts) {
  std::vector<std::size_t> slots(n_concepts);
  std::iota(slots.begin(), slots.end(), std::size_t{0});
  AccuracyFragment f = score(oracle, images, node, slots);
  f.path = "real";
  return f;
}

std::vector<AnchorResiduals> eval_cycle_and_comm(const MappingTable& maps, const std::map<NodeId, Tensor>& datasets,
                                                 std::size_t n_concepts) {
  if (maps.n_concepts() != n_concepts) throw EvalError("eval: mapping table does not match the concept count");
  std::vector<AnchorResiduals> out;
  for (const auto& [anchor, images] : datasets) {
    if (images.rank() != 4 || images.dim(0) == 0) continue;
    AnchorResiduals r;
    r.anchor = anchor;
    const std::size_t count = images.dim(0);
    std::vector<double> cyc2(n_concepts, 0.0);
    std::map<std::pair<std::size_t, std::size_t>, std::pair<double, double>> pairs;
    // Chunked means, weighted by chunk size.
    for (std::size_t b = 0; b < count; b += kChunk) {
      const Tensor x = rows(images, b, std::min(count, b + kChunk));
      const double w = static_cast<double>(x.dim(0)) / static_cast<double>(count);
      for (std::size_t k = 0; k < n_concepts; ++k) {
        const auto& there = maps.at(shift_from(anchor, k));
        const auto& back = maps.at(shift_from(toggle(anchor, k), k));
        cyc2[k] += w * scalar(cyc2_loss(there, back, x));
      }
      for (std::size_t i = 0; i < n_concepts; ++i) {
        for (std::size_t j = i + 1; j < n_concepts; ++j) {
          pairs[{i, j}].first += w * scalar(cyc4_loss(maps, x, anchor, i, j));
          pairs[{i, j}].second += w * scalar(comm_loss(maps, x, anchor, i, j));
        }
      }
    }
    for (std::size_t k = 0; k < n_concepts; ++k) {
      const auto there = shift_from(anchor, k), back = shift_from(toggle(anchor, k), k);
      r.cyc2.push_back({sequence_name({there, back}), cyc2[k]});
    }
    for (const auto& [ij, v] : pairs) {
      const auto [i, j] = ij;
      std::vector<MappingRef> cw;
      NodeId at = anchor;
      for (std::size_t c : {i, j, i, j}) {
        cw.push_back(shift_from(at, c));
        at = toggle(at, c);
      }
      const auto a = shift_from(anchor, i), b = shift_from(anchor, j);
      const auto b2 = shift_from(toggle(anchor, i), j), a2 = shift_from(toggle(anchor, j), i);
      r.cyc4.push_back({sequence_name(cw), v.first});
      r.comm.push_back({sequence_name({a, b2}) + "|" + sequence_name({b, a2}), v.second});
    }
    out.push_back(std::move(r));
  }
  return out;
}

json EvalReport::to_json() const {
  const std::size_t n = concept_names.size();
  json real_rows = json::object();
  for (const auto& f : real) real_rows[f.path] = fragment_json(f, concept_names);
  json synth = json::array();
  for (const auto& s : synthesis) {
    json paths = json::array();
    for (const auto& f : s.paths) paths.push_back(fragment_json(f, concept_names));
    synth.push_back(json{{"source", node_label(s.source, n)},
                         {"target", node_label(s.target, n)},
                         {"joint_accuracy", s.canonical.joint},
                         {"per_concept_accuracy", fragment_json(s.canonical, concept_names)["per_concept"]},
                         {"canonical_path", s.canonical.path},
                         {"mean_joint_accuracy_over_paths", s.mean_joint},
                         {"paths", paths}});
  }
  json res = json::array();
  for (const auto& r : residuals) {
    res.push_back(json{{"anchor", node_label(r.anchor, n)},
                       {"cyc2", named_values(r.cyc2)},
                       {"cyc4", named_values(r.cyc4)},
                       {"comm", named_values(r.comm)}});
  }
  return json{{"concepts", concept_names},
              {"checkpoint_digest", checkpoint_digest},
              {"test_seed", test_seed},
              {"real", real_rows},
              {"synthesis", synth},
              {"residuals", res}};
}

std::vector<Panel> figure_panels(std::size_t i, std::size_t j) {
  auto prefixes = [](const std::vector<std::size_t>& walk) {
    std::vector<std::vector<MappingRef>> cols{{}};
    NodeId at = 0;
    std::vector<MappingRef> path;
    for (std::size_t c : walk) {
      path.push_back(shift_from(at, c));
      at = toggle(at, c);
      cols.push_back(path);
    }
    return cols;
  };
  Panel cw{"clockwise", prefixes({i, j, i, j})};
  Panel ccw{"counterclockwise", prefixes({j, i, j, i})};
  Panel comm{"commutative", prefixes({i, j})};
  const auto other = prefixes({j, i});
  comm.columns.insert(comm.columns.end(), other.begin() + 1, other.end());
  return {cw, ccw, comm};
}

namespace {

// Tiles [count, C, H, W] images into a grid with 1 px mid-grey separators.
Tensor tile(const std::vector<Tensor>& images, std::size_t per_row) {
  if (images.empty()) throw EvalError("eval: nothing to tile");
  const std::size_t c = images[0].dim(0), h = images[0].dim(1), w = images[0].dim(2);
  const std::size_t n_rows = (images.size() + per_row - 1) / per_row;
  const std::size_t H = n_rows * (h + 1) + 1, W = per_row * (w + 1) + 1;
  std::vector<double> out(c * H * W, 0.0);
  for (std::size_t idx = 0; idx < images.size(); ++idx) {
    const std::size_t r0 = 1 + (idx / per_row) * (h + 1), c0 = 1 + (idx % per_row) * (w + 1);
    const auto src = images[idx].data();
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) out[(ch * H + r0 + y) * W + c0 + x] = src[(ch * h + y) * w + x];
  }
  return Tensor({c, H, W}, std::move(out));
}

}  // namespace

void write_panel(const std::filesystem::path& path, const MappingSet& mappings, const Tensor& inputs,
                 const Panel& panel) {
  std::vector<Tensor> columns;
  for (const auto& p : panel.columns) columns.push_back(synthesize(mappings, inputs, p));
  std::vector<Tensor> cells;
  for (std::size_t i = 0; i < inputs.dim(0); ++i) {
    for (const auto& col : columns) cells.push_back(single(col, i));
  }
  write_pnm(path, tile(cells, panel.columns.size()));
}

void write_grid(const std::filesystem::path& path, const Tensor& images, std::size_t per_row) {
  std::vector<Tensor> cells;
  for (std::size_t i = 0; i < images.dim(0); ++i) cells.push_back(single(images, i));
  write_pnm(path, tile(cells, per_row));
}

std::vector<NodeId> all_other_nodes(std::size_t n_concepts, NodeId source) {
  std::vector<NodeId> out;
  for (NodeId v = 0; v < (NodeId{1} << n_concepts); ++v) {
    if (v != source) out.push_back(v);
  }
  return out;
}

std::vector<AugmentedImage> export_augmented(const MappingSet& mappings, const Tensor& probes,
                                             const std::vector<std::string>& probe_names, NodeId source_node,
                                             const std::vector<NodeId>& nodes, const std::filesystem::path& out_dir) {
  if (probes.rank() != 4) throw ShapeError("augment: expected [batch, C, H, W] probes");
  if (probe_names.size() != probes.dim(0)) throw EvalError("augment: one name per probe image required");
  const std::size_t n = mappings.n_concepts();
  const std::string ext = probes.dim(1) == 3 ? ".ppm" : ".pgm";
  std::filesystem::create_directories(out_dir);

  std::map<NodeId, Tensor> synthesized;
  for (NodeId node : nodes) {
    if (node >= (NodeId{1} << n)) throw EvalError("augment: node " + std::to_string(node) + " outside the lattice");
    if (node == source_node || synthesized.count(node)) continue;
    synthesized.emplace(node, synthesize(mappings, probes, mappings.paths(source_node, node).front()));
  }

  std::vector<AugmentedImage> out;
  for (std::size_t i = 0; i < probes.dim(0); ++i) {
    const std::string stem = std::filesystem::path(probe_names[i]).stem().string();
    AugmentedImage orig{out_dir / (stem + "_" + node_label(source_node, n) + "_orig" + ext), probe_names[i],
                        source_node, true};
    write_pnm(orig.file, single(probes, i));
    out.push_back(orig);
    for (const auto& [node, images] : synthesized) {
      AugmentedImage a{out_dir / (stem + "_" + node_label(node, n) + ext), probe_names[i], node, false};
      write_pnm(a.file, single(images, i));
      out.push_back(a);
    }
  }

  std::ofstream manifest(out_dir / "manifest.csv");
  manifest << "file,source,node,original\n";
  for (const auto& a : out) {
    manifest << a.file.filename().string() << "," << a.source << "," << node_label(a.node, n) << ","
             << (a.original ? 1 : 0) << "\n";
  }
  if (!manifest) throw EvalError("augment: cannot write manifest in " + out_dir.string());
  return out;
}

}  // namespace concept_lattice
