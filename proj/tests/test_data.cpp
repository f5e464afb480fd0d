#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "concept_lattice/data.hpp"

using namespace concept_lattice;
namespace fs = std::filesystem;

namespace {

std::size_t lit_count(const Tensor& img) {
  return static_cast<std::size_t>(std::count_if(img.data().begin(), img.data().end(), [](double v) { return v > -1.0; }));
}

// Pearson statistic against a uniform distribution over the observed bins.
double chi_square_uniform(const std::vector<std::size_t>& counts) {
  double total = 0;
  for (auto c : counts) total += static_cast<double>(c);
  const double expected = total / static_cast<double>(counts.size());
  double chi = 0;
  for (auto c : counts) chi += (c - expected) * (c - expected) / expected;
  return chi;
}

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("concept_lattice_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("glyph geometry") {
  const GlyphGrid grid;
  for (int s : grid.sizes()) {
    const int c = grid.min_center(s);
    CHECK(lit_count(render_glyph({0, 0, 0, s, c, c, 1.0}, grid)) == static_cast<std::size_t>(s * s));
    CHECK(lit_count(render_glyph({0, 1, 0, s, c, c, 1.0}, grid)) == static_cast<std::size_t>(4 * s - 4));
    const int r = s / 2;
    std::size_t brute = 0;
    for (int y = -r; y <= r; ++y)
      for (int x = -r; x <= r; ++x) brute += x * x + y * y <= r * r;
    CHECK(lit_count(render_glyph({1, 0, 0, s, c + 1, c, 0.8}, grid)) == brute);
  }
  CHECK(grid.sizes() == std::vector<int>{5, 7, 9, 11, 13});
}

TEST_CASE("pixel values and bounds") {
  const GlyphGrid grid;
  const auto img = render_glyph({0, 0, 0, 5, 8, 8, 0.6}, grid);
  CHECK(img.shape() == Shape{1, 16, 16});
  for (double v : img.data()) CHECK((v == -1.0 || std::abs(v - 0.2) < 1e-15));
  CHECK_THROWS_AS(render_glyph({0, 0, 0, 13, 6, 7, 1.0}, grid), DataError);  // touches the border
  CHECK_THROWS_AS(render_glyph({0, 0, 0, 6, 8, 8, 1.0}, grid), DataError);
  CHECK_THROWS_AS(render_glyph({0, 0, 0, 15, 8, 8, 1.0}, grid), DataError);
  CHECK_NOTHROW(render_glyph({0, 0, 0, 13, 7, 8, 1.0}, grid));
  GlyphGrid colour = grid;
  colour.channels = 3;
  CHECK(render_glyph({1, 1, 0, 7, 8, 8, 1.0}, colour).shape() == Shape{3, 16, 16});
}

TEST_CASE("stripe inverts the centre row") {
  const GlyphGrid grid;
  const auto plain = render_glyph({0, 0, 0, 7, 8, 8, 1.0}, grid);
  const auto striped = render_glyph({0, 0, 1, 7, 8, 8, 1.0}, grid);
  CHECK(lit_count(plain) - lit_count(striped) == 7);
}

TEST_CASE("subdomain sampling") {
  const GlyphGrid grid;
  CHECK(sample_subdomain(3, 0, 1, grid).size() == 0);
  const auto a = sample_subdomain(2, 50, 9, grid), b = sample_subdomain(2, 50, 9, grid);
  CHECK(std::ranges::equal(a.images.data(), b.images.data()));
  CHECK(a.params == b.params);
  CHECK(!std::ranges::equal(a.images.data(), sample_subdomain(2, 50, 10, grid).images.data()));
  for (const auto& p : a.params) CHECK(p.node() == 2);
  for (double v : a.images.data()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  // Node-specific streams: same seed, different nodes do not share geometry.
  const auto other = sample_subdomain(1, 50, 9, grid);
  std::size_t same = 0;
  for (std::size_t i = 0; i < 50; ++i) same += other.params[i].cx == a.params[i].cx && other.params[i].size == a.params[i].size;
  CHECK(same < 10);
}

TEST_CASE("sampling marginals are uniform on the grid") {
  const GlyphGrid grid;
  const auto ds = sample_subdomain(0, 1000, 123, grid);
  std::vector<std::size_t> sizes(5, 0), levels(5, 0), offsets(grid.max_center(5) - grid.min_center(5) + 1, 0);
  for (const auto& p : ds.params) {
    ++sizes[(p.size - 5) / 2];
    ++levels[static_cast<std::size_t>(std::lround((p.intensity - 0.6) * 10))];
    if (p.size == 5) ++offsets[p.cx - grid.min_center(5)];
  }
  // 99.9% critical values: df 4 -> 18.47, df 9 -> 27.88.
  CHECK(chi_square_uniform(sizes) < 18.47);
  CHECK(chi_square_uniform(levels) < 18.47);
  CHECK(offsets.size() == 10);
  CHECK(chi_square_uniform(offsets) < 27.88);
  for (auto c : sizes) CHECK(std::abs(static_cast<double>(c) - 200.0) < 0.25 * 200.0);
}

TEST_CASE("oracle is exact on every grid point") {
  for (std::size_t n : {2, 3}) {
    const GlyphGrid grid;
    const AttributeOracle oracle(grid, n);
    std::size_t checked = 0;
    for (int stripe = 0; stripe <= (n > 2 ? 1 : 0); ++stripe)
      for (int style = 0; style <= 1; ++style)
        for (int shape = 0; shape <= 1; ++shape)
          for (int s : grid.sizes())
            for (int cy = grid.min_center(s); cy <= grid.max_center(s); ++cy)
              for (int cx = grid.min_center(s); cx <= grid.max_center(s); ++cx)
                for (double level : grid.intensities) {
                  const GlyphParams p{shape, style, stripe, s, cx, cy, level};
                  const auto r = oracle.classify(render_glyph(p, grid));
                  CHECK(r.attributes == p.node());
                  CHECK(r.match == p);
                  CHECK(r.residual < 1e-6);
                  CHECK(!r.degenerate);
                  ++checked;
                }
    CHECK(checked == oracle.template_count());
  }
}

TEST_CASE("oracle is robust to small pixel noise") {
  const GlyphGrid grid;
  const AttributeOracle oracle(grid, 2);
  std::mt19937_64 rng(77);
  std::normal_distribution<double> noise(0.0, 0.05);
  std::size_t unchanged = 0;
  std::vector<double> residuals;
  for (NodeId node = 0; node < 4; ++node) {
    const auto ds = sample_subdomain(node, 250, 5 + node, grid);
    std::vector<double> data(ds.images.data().begin(), ds.images.data().end());
    for (double& v : data) v += noise(rng);
    const auto results = oracle.classify_batch(Tensor(ds.images.shape(), data));
    for (const auto& r : results) {
      unchanged += r.attributes == node;
      residuals.push_back(r.residual);
    }
  }
  CHECK(unchanged >= 990);
  std::sort(residuals.begin(), residuals.end());
  const double p99 = residuals[static_cast<std::size_t>(0.99 * residuals.size())];
  MESSAGE("99th percentile residual under noise 0.05: " << p99);
  CHECK(p99 < oracle.realism_threshold());
  CHECK(p99 > 0.85 * oracle.realism_threshold());
}

TEST_CASE("blank image is degenerate") {
  const GlyphGrid grid;
  const AttributeOracle oracle(grid, 2);
  const auto r = oracle.classify(Tensor::full({1, 16, 16}, -1.0));
  CHECK(r.degenerate);
  CHECK(r.residual > 2 * oracle.realism_threshold());
  CHECK_THROWS_AS(oracle.classify(Tensor::full({1, 8, 8}, -1.0)), ShapeError);
}

TEST_CASE("PNM round trip") {
  const auto dir = scratch_dir("pnm");
  const auto grey = render_glyph({1, 0, 0, 9, 8, 8, 1.0}, GlyphGrid{});
  write_pnm(dir / "g.pgm", grey);
  CHECK(std::ranges::equal(read_pnm(dir / "g.pgm").data(), grey.data()));
  GlyphGrid colour;
  colour.channels = 3;
  const auto rgb = render_glyph({0, 1, 0, 9, 8, 8, 1.0}, colour);
  write_pnm(dir / "c.ppm", rgb);
  CHECK(read_pnm(dir / "c.ppm").shape() == Shape{3, 16, 16});
  CHECK(std::ranges::equal(read_pnm(dir / "c.ppm").data(), rgb.data()));
  std::ofstream(dir / "bad.ppm") << "P3\n1 1\n255\n0 0 0\n";
  CHECK_THROWS_AS(read_pnm(dir / "bad.ppm"), DataError);
  std::ofstream(dir / "short.pgm", std::ios::binary) << "P5\n4 4\n255\n12";
  CHECK_THROWS_AS(read_pnm(dir / "short.pgm"), DataError);
}

TEST_CASE("attribute CSV ingestion") {
  const auto dir = scratch_dir("csv");
  const GlyphGrid grid;
  for (int i = 0; i < 4; ++i) write_pnm(dir / ("img" + std::to_string(i) + ".pgm"), render_glyph({i & 1, i >> 1, 0, 7, 8, 8, 1.0}, grid));

  std::ofstream(dir / "all.csv") << "filename,Smiling,Eyeglasses,Bangs\n"
                                    "img0.pgm,-1,-1,1\nimg1.pgm,1,-1,-1\nimg2.pgm,-1,1,1\nimg3.pgm,1,1,-1\n";
  const auto all = load_attribute_csv(dir, dir / "all.csv", {"Smiling", "Eyeglasses"});
  CHECK(all.size() == 4);
  for (const auto& [node, ds] : all) {
    CHECK(ds.size() == 1);
    CHECK(ds.sources[0] == "img" + std::to_string(node) + ".pgm");
  }

  std::ofstream(dir / "three.csv") << "filename,Smiling,Eyeglasses\nimg0.pgm,-1,-1\nimg1.pgm,1,-1\nimg2.pgm,-1,1\n";
  const auto three = load_attribute_csv(dir, dir / "three.csv", {"Smiling", "Eyeglasses"});
  CHECK(three.at(3).size() == 0);
  CHECK(three.at(2).size() == 1);

  auto expect_error = [&](const std::string& body, const std::string& fragment) {
    std::ofstream(dir / "bad.csv") << body;
    try {
      load_attribute_csv(dir, dir / "bad.csv", {"Smiling", "Eyeglasses"});
      FAIL("expected an error for " << fragment);
    } catch (const DataError& e) {
      CHECK_MESSAGE(std::string(e.what()).find(fragment) != std::string::npos, e.what());
    }
  };
  expect_error("filename,Smiling,Eyeglasses\nimg0.pgm,-1,-1\nimg0.pgm,1,-1\n", "row 3");
  expect_error("filename,Smiling,Eyeglasses\nimg0.pgm,-1,0\n", "row 2");
  expect_error("filename,Smiling,Eyeglasses\nimg0.pgm,-1\n", "row 2");
  expect_error("filename,Smiling,Eyeglasses\nimg0.pgm,-1,1\nnope.pgm,1,1\n", "missing image");
  expect_error("filename,Smiling\nimg0.pgm,-1\n", "Eyeglasses");
  CHECK_THROWS_AS(load_attribute_csv(dir, dir / "absent.csv", {"Smiling"}), DataError);
}
