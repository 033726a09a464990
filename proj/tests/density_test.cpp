#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "excount/density.hpp"

using namespace excount;

namespace {

// Independent per-dot mass: direct double loop over the whole image, no
// truncation window bookkeeping.
DensityMap oracle_density(const std::vector<Point>& pts, int h, int w, double sigma, double scale) {
  DensityMap d(h, w, scale);
  for (const Point& p : pts) {
    std::vector<double> k(std::size_t(h) * w, 0.0);
    double total = 0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double dx = x + 0.5 - p.x, dy = y + 0.5 - p.y;
        if (std::floor(p.x) - x > std::ceil(4 * sigma) || x - std::floor(p.x) > std::ceil(4 * sigma)) continue;
        if (std::floor(p.y) - y > std::ceil(4 * sigma) || y - std::floor(p.y) > std::ceil(4 * sigma)) continue;
        if (dx * dx + dy * dy > 16 * sigma * sigma) continue;
        k[std::size_t(y) * w + x] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
        total += k[std::size_t(y) * w + x];
      }
    }
    for (std::size_t i = 0; i < k.size(); ++i) d.grid[i] += scale * k[i] / total;
  }
  return d;
}

}  // namespace

TEST(GenerateDensity, ZeroPointsGiveZeroMap) {
  const DensityMap d = generate_density_map({}, 16, 20, 4.0);
  EXPECT_EQ(d.height, 16);
  EXPECT_EQ(d.width, 20);
  for (double v : d.grid) EXPECT_EQ(v, 0.0);
}

TEST(GenerateDensity, CenteredPointSumsToScale) {
  for (double sigma : {0.5, 1.0, 4.0, 10.0, 40.0}) {
    for (double scale : {1.0, 60.0}) {
      const DensityMap d = generate_density_map({{16, 16}}, 32, 32, sigma, scale);
      EXPECT_NEAR(d.sum(), scale, 1e-6 * scale) << sigma;
    }
  }
}

TEST(GenerateDensity, SevenCornerPointsMatchKernelSumOracle) {
  const std::vector<Point> pts{{0.1, 0.1}, {63.9, 0.2}, {0.3, 63.7}, {63.5, 63.5}, {1.0, 2.0}, {62.0, 1.5}, {2.5, 61.0}};
  const DensityMap d = generate_density_map(pts, 64, 64, 4.0, 1.0);
  EXPECT_NEAR(d.sum(), 7.0, 1e-3);
  EXPECT_NEAR(count_from_density(d), 7.0, 1e-3);
  const DensityMap o = oracle_density(pts, 64, 64, 4.0, 1.0);
  for (std::size_t i = 0; i < d.size(); ++i) ASSERT_NEAR(d.grid[i], o.grid[i], 1e-12) << i;
}

TEST(GenerateDensity, OutOfBoundsPointNamed) {
  try {
    generate_density_map({{1, 1}, {64, 10}}, 64, 64, 4.0);
    FAIL() << "expected an error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("point 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(generate_density_map({{-0.01, 3}}, 8, 8, 1.0), ConfigError);
  EXPECT_THROW(generate_density_map({{1, 1}}, 8, 8, 0.0), ConfigError);
}

TEST(GenerateDensity, NonnegativeAndCountInvariantOnRandomSets) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 100; ++t) {
    std::uniform_int_distribution<int> n_dist(0, 30), side(8, 48);
    const int h = side(rng), w = side(rng);
    std::uniform_real_distribution<double> ux(0.0, std::nextafter(double(w), 0.0)), uy(0.0, std::nextafter(double(h), 0.0));
    std::vector<Point> pts(n_dist(rng));
    for (auto& p : pts) p = {ux(rng), uy(rng)};
    const DensityMap d = generate_density_map(pts, h, w, 2.0 + t % 5, 1.0 + t % 3);
    for (double v : d.grid) ASSERT_GE(v, 0.0);
    ASSERT_NEAR(count_from_density(d), double(pts.size()), 1e-3 * pts.size() + 1e-6);
  }
}

TEST(CountFromDensity, DividesByScale) {
  DensityMap d(2, 3, 60.0);
  d.grid = {70, 70, 70, 70, 70, 70};
  EXPECT_DOUBLE_EQ(count_from_density(d), 7.0);
  EXPECT_EQ(count_from_density(DensityMap(4, 4)), 0.0);
}

TEST(DensityFile, RoundTripIsExactAndByteStable) {
  const DensityMap d = generate_density_map({{3, 4}, {10.5, 2.25}}, 12, 17, 2.0, 60.0);
  const std::string bytes = write_density(d);
  EXPECT_EQ(bytes.size(), 4 + 13 + 4u * 12 * 17);
  const DensityMap r = read_density(bytes);
  EXPECT_EQ(write_density(r), bytes);
  // Values that are exact in float32 survive bit for bit.
  EXPECT_EQ(read_density(write_density(r)), r);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_EQ(r.grid[i], static_cast<double>(static_cast<float>(d.grid[i])));
}

TEST(DensityFile, RejectsCorruptInputWithOffsets) {
  const std::string good = write_density(generate_density_map({{1, 1}}, 4, 5, 1.0));
  auto message = [](const std::string& bytes) {
    try {
      read_density(bytes);
    } catch (const FormatError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_NE(message(bad_magic).find("magic at offset 0"), std::string::npos);
  std::string bad_version = good;
  bad_version[4] = 9;
  EXPECT_NE(message(bad_version).find("offset 4"), std::string::npos);
  EXPECT_NE(message(good.substr(0, 10)).find("truncated header"), std::string::npos);
  EXPECT_NE(message(good.substr(0, good.size() - 3)).find("truncated payload at offset " + std::to_string(good.size() - 3)),
            std::string::npos);
  EXPECT_NE(message(good + "x").find("trailing bytes at offset " + std::to_string(good.size())), std::string::npos);
  std::string bad_scale = good;
  for (int i = 13; i < 17; ++i) bad_scale[i] = 0;
  EXPECT_NE(message(bad_scale).find("scale at offset 13"), std::string::npos);
}
