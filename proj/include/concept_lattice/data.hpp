#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "concept_lattice/concept_graph.hpp"
#include "concept_lattice/tensor.hpp"

namespace concept_lattice {

class DataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Concept k of the synthetic lattice is attribute k in this order.
inline constexpr const char* kSyntheticConcepts[] = {"shape", "style", "stripe"};

struct GlyphParams {
  int shape_attr = 0;   // 0 square, 1 disc
  int style_attr = 0;   // 0 filled, 1 outline
  int stripe_attr = 0;  // 0 none, 1 centre row inverted
  int size = 5;         // odd side length / diameter
  int cx = 0, cy = 0;
  double intensity = 1.0;

  int radius() const { return size / 2; }
  NodeId node() const;
  bool operator==(const GlyphParams&) const = default;
};

/// The discrete rendering grid every sample and every oracle template is
/// drawn from.
struct GlyphGrid {
  std::size_t image_size = 16;
  std::size_t channels = 1;
  std::vector<double> intensities{0.6, 0.7, 0.8, 0.9, 1.0};

  std::vector<int> sizes() const;  // 5, 7, ..., largest odd <= image_size - 3
  int min_center(int size) const;  // one-pixel margin around the glyph
  int max_center(int size) const;
  void validate(const GlyphParams& p) const;  // throws DataError
};

/// Lit-pixel mask (row-major image_size^2) of a glyph; intensity ignored.
std::vector<std::uint8_t> glyph_mask(const GlyphParams& params, std::size_t image_size);

/// [channels, N, N]; background -1, lit pixels 2 * intensity - 1.
Tensor render_glyph(const GlyphParams& params, const GlyphGrid& grid);

struct SubdomainDataset {
  NodeId node = 0;
  Tensor images;                     // [count, C, H, W]
  std::vector<GlyphParams> params;   // synthetic only
  std::vector<std::string> sources;  // file-backed only

  std::size_t size() const { return images.defined() && images.rank() == 4 ? images.dim(0) : 0; }
  Tensor gather(const std::vector<std::size_t>& indices) const;
};

/// `count` independent grid draws whose attributes equal the bits of
/// `node` (concept k = attribute k). Deterministic in (node, seed).
SubdomainDataset sample_subdomain(NodeId node, std::size_t count, std::uint64_t seed, const GlyphGrid& grid,
                                  std::size_t n_concepts = 2);

struct OracleResult {
  GlyphParams match;   // nearest template
  NodeId attributes;   // bits for the first n concepts of the oracle
  double residual;     // L2 distance to that template
  bool degenerate;     // residual above the realism threshold
};

/// Exact nearest-template classifier over the whole rendering grid.
class AttributeOracle {
public:
  /// Largest template residual still considered a realistic sample: the 99th
  /// percentile of residuals of real 16x16 samples with N(0, 0.05) pixel
  /// noise is ~0.85; scaled with sqrt(pixels) for other sizes.
  static constexpr double kRealismThreshold16 = 0.9;

  AttributeOracle(GlyphGrid grid, std::size_t n_concepts);

  OracleResult classify(const Tensor& image) const;  // [C,H,W] or [1,C,H,W]
  std::vector<OracleResult> classify_batch(const Tensor& images) const;

  std::size_t n_concepts() const { return n_; }
  double realism_threshold() const { return threshold_; }
  const GlyphGrid& grid() const { return grid_; }
  std::size_t template_count() const { return masks_.size() * grid_.intensities.size(); }

private:
  struct MaskEntry {
    GlyphParams params;
    std::vector<std::uint32_t> lit;  // pixel indices
  };
  GlyphGrid grid_;
  std::size_t n_;
  double threshold_;
  std::vector<MaskEntry> masks_;
};

/// Splits labelled images into hypercube nodes by the chosen columns.
/// Every node of the n-concept cube is present in the result, possibly empty.
std::map<NodeId, SubdomainDataset> load_attribute_csv(const std::filesystem::path& image_dir,
                                                      const std::filesystem::path& csv_path,
                                                      const std::vector<std::string>& concepts);

/// Binary PPM (P6, 3 channels) or PGM (P5, 1 channel), 8-bit.
Tensor read_pnm(const std::filesystem::path& path);  // [C,H,W] in [-1,1]
void write_pnm(const std::filesystem::path& path, const Tensor& image);

}  // namespace concept_lattice
