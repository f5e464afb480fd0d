#include "concept_lattice/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace concept_lattice {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Uniform index in [0, n) from a 64-bit stream without modulo bias worth
// caring about at these n.
std::size_t pick(std::uint64_t& state, std::size_t n) {
  state = splitmix64(state);
  return static_cast<std::size_t>((static_cast<unsigned __int128>(state) * n) >> 64);
}

bool inside(int x, int y, const GlyphParams& p) {
  const int r = p.radius();
  const int dx = x - p.cx, dy = y - p.cy;
  if (p.shape_attr == 0) return std::abs(dx) <= r && std::abs(dy) <= r;
  return dx * dx + dy * dy <= r * r;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

NodeId GlyphParams::node() const {
  return static_cast<NodeId>(shape_attr) | static_cast<NodeId>(style_attr) << 1 |
         static_cast<NodeId>(stripe_attr) << 2;
}

std::vector<int> GlyphGrid::sizes() const {
  std::vector<int> out;
  for (int s = 5; s <= static_cast<int>(image_size) - 3; s += 2) out.push_back(s);
  return out;
}

int GlyphGrid::min_center(int size) const { return size / 2 + 1; }
int GlyphGrid::max_center(int size) const { return static_cast<int>(image_size) - 2 - size / 2; }

void GlyphGrid::validate(const GlyphParams& p) const {
  auto bad = [](const std::string& msg) { throw DataError("glyph: " + msg); };
  if (p.shape_attr < 0 || p.shape_attr > 1 || p.style_attr < 0 || p.style_attr > 1 || p.stripe_attr < 0 ||
      p.stripe_attr > 1) {
    bad("attribute out of range");
  }
  if (p.size < 5 || p.size % 2 == 0 || p.size > static_cast<int>(image_size) - 3) {
    bad("size " + std::to_string(p.size) + " not on the grid for image size " + std::to_string(image_size));
  }
  if (p.cx < min_center(p.size) || p.cx > max_center(p.size) || p.cy < min_center(p.size) ||
      p.cy > max_center(p.size)) {
    bad("glyph at (" + std::to_string(p.cx) + "," + std::to_string(p.cy) + ") size " + std::to_string(p.size) +
        " leaves the image");
  }
  if (!(p.intensity > 0.0 && p.intensity <= 1.0)) bad("intensity outside (0,1]");
}

std::vector<std::uint8_t> glyph_mask(const GlyphParams& p, std::size_t image_size) {
  const int n = static_cast<int>(image_size);
  std::vector<std::uint8_t> mask(image_size * image_size, 0);
  auto in = [&](int x, int y) { return x >= 0 && y >= 0 && x < n && y < n && inside(x, y, p); };
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      if (!in(x, y)) continue;
      if (p.style_attr == 1 && in(x - 1, y) && in(x + 1, y) && in(x, y - 1) && in(x, y + 1)) continue;
      mask[y * n + x] = 1;
    }
  }
  if (p.stripe_attr == 1) {
    for (int x = p.cx - p.radius(); x <= p.cx + p.radius(); ++x) mask[p.cy * n + x] ^= 1;
  }
  return mask;
}

Tensor render_glyph(const GlyphParams& params, const GlyphGrid& grid) {
  grid.validate(params);
  const auto mask = glyph_mask(params, grid.image_size);
  const std::size_t plane = mask.size();
  std::vector<double> data(grid.channels * plane);
  for (std::size_t c = 0; c < grid.channels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) data[c * plane + i] = mask[i] ? 2.0 * params.intensity - 1.0 : -1.0;
  }
  return Tensor({grid.channels, grid.image_size, grid.image_size}, std::move(data));
}

Tensor SubdomainDataset::gather(const std::vector<std::size_t>& indices) const {
  if (size() == 0) throw DataError("gather: dataset at node " + std::to_string(node) + " is empty");
  const std::size_t per = images.size() / images.dim(0);
  std::vector<double> out;
  out.reserve(indices.size() * per);
  const auto src = images.data();
  for (std::size_t i : indices) {
    if (i >= size()) throw DataError("gather: index out of range");
    out.insert(out.end(), src.begin() + i * per, src.begin() + (i + 1) * per);
  }
  return Tensor({indices.size(), images.dim(1), images.dim(2), images.dim(3)}, std::move(out));
}

SubdomainDataset sample_subdomain(NodeId node, std::size_t count, std::uint64_t seed, const GlyphGrid& grid,
                                  std::size_t n_concepts) {
  if (n_concepts < 1 || n_concepts > 3) throw DataError("synthetic glyphs support 1 to 3 concepts");
  if (node >= (NodeId{1} << n_concepts)) throw DataError("node outside the concept cube");
  const auto sizes = grid.sizes();
  if (sizes.empty()) throw DataError("image size too small for any glyph");

  SubdomainDataset ds;
  ds.node = node;
  const std::size_t n = grid.image_size;
  const std::size_t per = grid.channels * n * n;
  std::vector<double> data(count * per);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t state = splitmix64(seed ^ splitmix64(0x6c61747469636500ULL + node) ^ splitmix64(i + 1));
    GlyphParams p;
    p.shape_attr = concept_active(node, 0);
    p.style_attr = n_concepts > 1 && concept_active(node, 1);
    p.stripe_attr = n_concepts > 2 && concept_active(node, 2);
    p.size = sizes[pick(state, sizes.size())];
    const int lo = grid.min_center(p.size), span = grid.max_center(p.size) - lo + 1;
    p.cx = lo + static_cast<int>(pick(state, span));
    p.cy = lo + static_cast<int>(pick(state, span));
    p.intensity = grid.intensities[pick(state, grid.intensities.size())];
    const Tensor img = render_glyph(p, grid);
    std::copy(img.data().begin(), img.data().end(), data.begin() + i * per);
    ds.params.push_back(p);
  }
  ds.images = Tensor({count, grid.channels, n, n}, std::move(data));
  return ds;
}

AttributeOracle::AttributeOracle(GlyphGrid grid, std::size_t n_concepts) : grid_(std::move(grid)), n_(n_concepts) {
  if (n_ < 1 || n_ > 3) throw DataError("oracle supports 1 to 3 concepts");
  threshold_ = kRealismThreshold16 * std::sqrt(static_cast<double>(grid_.channels * grid_.image_size *
                                                                    grid_.image_size) / 256.0);
  for (int stripe = 0; stripe <= (n_ > 2 ? 1 : 0); ++stripe) {
    for (int style = 0; style <= (n_ > 1 ? 1 : 0); ++style) {
      for (int shape = 0; shape <= 1; ++shape) {
        for (int size : grid_.sizes()) {
          for (int cy = grid_.min_center(size); cy <= grid_.max_center(size); ++cy) {
            for (int cx = grid_.min_center(size); cx <= grid_.max_center(size); ++cx) {
              MaskEntry e;
              e.params = GlyphParams{shape, style, stripe, size, cx, cy, 1.0};
              const auto mask = glyph_mask(e.params, grid_.image_size);
              for (std::uint32_t i = 0; i < mask.size(); ++i) {
                if (mask[i]) e.lit.push_back(i);
              }
              masks_.push_back(std::move(e));
            }
          }
        }
      }
    }
  }
}

OracleResult AttributeOracle::classify(const Tensor& image) const {
  const std::size_t n = grid_.image_size, c = grid_.channels, plane = n * n;
  if (image.size() != c * plane) {
    throw ShapeError("oracle: expected one " + std::to_string(c) + "x" + std::to_string(n) + "x" +
                     std::to_string(n) + " image");
  }
  // ||x - t||^2 with t = -1 + 2I M splits into ||x + 1||^2 - 4I S + 4I^2 C |M|,
  // where S sums x + 1 over the mask in every channel.
  const auto x = image.data();
  std::vector<double> shifted(plane, 0.0);
  double base = 0.0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double v = x[ch * plane + i] + 1.0;
      shifted[i] += v;
      base += v * v;
    }
  }
  double best = std::numeric_limits<double>::infinity();
  const MaskEntry* best_mask = nullptr;
  double best_intensity = 0.0;
  for (const auto& m : masks_) {
    double s = 0.0;
    for (std::uint32_t i : m.lit) s += shifted[i];
    const double area = static_cast<double>(c * m.lit.size());
    for (double level : grid_.intensities) {
      const double r2 = base - 4.0 * level * s + 4.0 * level * level * area;
      if (r2 < best) {
        best = r2;
        best_mask = &m;
        best_intensity = level;
      }
    }
  }
  OracleResult out;
  out.match = best_mask->params;
  out.match.intensity = best_intensity;
  out.attributes = out.match.node() & ((NodeId{1} << n_) - 1);
  // The expanded form cancels badly near zero; score the winner directly.
  const Tensor t = render_glyph(out.match, grid_);
  double direct = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) direct += (x[i] - t.data()[i]) * (x[i] - t.data()[i]);
  out.residual = std::sqrt(direct);
  out.degenerate = out.residual > threshold_;
  return out;
}

std::vector<OracleResult> AttributeOracle::classify_batch(const Tensor& images) const {
  if (images.rank() != 4) throw ShapeError("oracle: expected a [B,C,H,W] batch");
  const std::size_t per = images.size() / std::max<std::size_t>(images.dim(0), 1);
  std::vector<OracleResult> out;
  for (std::size_t b = 0; b < images.dim(0); ++b) {
    const auto src = images.data().subspan(b * per, per);
    out.push_back(classify(Tensor({images.dim(1), images.dim(2), images.dim(3)}, {src.begin(), src.end()})));
  }
  return out;
}

std::map<NodeId, SubdomainDataset> load_attribute_csv(const std::filesystem::path& image_dir,
                                                      const std::filesystem::path& csv_path,
                                                      const std::vector<std::string>& concepts) {
  if (concepts.empty() || concepts.size() > 16) throw DataError("load_attribute_csv: need 1 to 16 concepts");
  std::ifstream in(csv_path);
  if (!in) throw DataError("load_attribute_csv: cannot open " + csv_path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("load_attribute_csv: empty file " + csv_path.string());
  const auto header = split_csv(line);
  if (header.empty() || header[0] != "filename") {
    throw DataError("load_attribute_csv: first column must be 'filename'");
  }
  std::vector<std::size_t> columns;
  for (const auto& name : concepts) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError("load_attribute_csv: no column '" + name + "'");
    columns.push_back(static_cast<std::size_t>(it - header.begin()));
  }

  std::map<NodeId, std::vector<std::pair<std::string, Tensor>>> rows;
  std::set<std::string> seen;
  Shape image_shape;
  std::size_t row_number = 1;
  while (std::getline(in, line)) {
    ++row_number;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv(line);
    const std::string where = "load_attribute_csv: row " + std::to_string(row_number) + ": ";
    if (cells.size() != header.size()) throw DataError(where + "expected " + std::to_string(header.size()) + " fields");
    if (!seen.insert(cells[0]).second) throw DataError(where + "duplicate filename " + cells[0]);
    NodeId node = 0;
    for (std::size_t k = 0; k < columns.size(); ++k) {
      const std::string& label = cells[columns[k]];
      if (label == "1" || label == "+1") {
        node |= NodeId{1} << k;
      } else if (label != "-1") {
        throw DataError(where + "label '" + label + "' in column " + concepts[k] + " is not +1 or -1");
      }
    }
    const auto file = image_dir / cells[0];
    if (!std::filesystem::exists(file)) throw DataError(where + "missing image " + file.string());
    Tensor img = read_pnm(file);
    if (image_shape.empty()) image_shape = img.shape();
    if (img.shape() != image_shape) throw DataError(where + "image size differs from earlier rows");
    rows[node].emplace_back(cells[0], std::move(img));
  }

  std::map<NodeId, SubdomainDataset> out;
  for (NodeId v = 0; v < (NodeId{1} << concepts.size()); ++v) {
    SubdomainDataset ds;
    ds.node = v;
    auto it = rows.find(v);
    if (it != rows.end()) {
      std::vector<double> data;
      for (auto& [name, img] : it->second) {
        data.insert(data.end(), img.data().begin(), img.data().end());
        ds.sources.push_back(name);
      }
      ds.images = Tensor({it->second.size(), image_shape[0], image_shape[1], image_shape[2]}, std::move(data));
    }
    out.emplace(v, std::move(ds));
  }
  return out;
}

Tensor read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("read_pnm: cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
      } else {
        t.push_back(ch);
      }
    }
    return t;
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") throw DataError("read_pnm: " + path.string() + " is not binary PGM/PPM");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw DataError("read_pnm: malformed header in " + path.string());
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) {
    throw DataError("read_pnm: unsupported header in " + path.string());
  }
  const std::size_t c = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> raw(w * h * c);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw DataError("read_pnm: truncated pixel data in " + path.string());
  }
  std::vector<double> data(raw.size());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        data[ch * w * h + y * w + x] = 2.0 * raw[(y * w + x) * c + ch] / static_cast<double>(maxval) - 1.0;
      }
    }
  }
  return Tensor({c, h, w}, std::move(data));
}

void write_pnm(const std::filesystem::path& path, const Tensor& image) {
  Shape s = image.shape();
  if (s.size() == 4 && s[0] == 1) s.erase(s.begin());
  if (s.size() != 3 || (s[0] != 1 && s[0] != 3)) throw ShapeError("write_pnm: expected [1|3, H, W]");
  const std::size_t c = s[0], h = s[1], w = s[2];
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("write_pnm: cannot write " + path.string());
  out << (c == 3 ? "P6" : "P5") << "\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> raw(c * h * w);
  const auto d = image.data();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = std::clamp((d[ch * w * h + y * w + x] + 1.0) / 2.0, 0.0, 1.0);
        raw[(y * w + x) * c + ch] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

}  // namespace concept_lattice
