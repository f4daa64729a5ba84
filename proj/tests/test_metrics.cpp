#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "specfield/hsio.hpp"
#include "specfield/metrics.hpp"
#include "support.hpp"

using namespace specfield;
using namespace testing_support;

namespace {

SpectralCube random_cube(std::size_t w, std::size_t h, std::size_t b, std::uint64_t seed, double lo = 0.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(static_cast<float>(lo), 1.0f);
  SpectralCube c(w, h, b);
  for (auto& v : c.data) v = u(rng);
  return c;
}

// Naive oracles: pixel-outer loops through at(), long double accumulation.
long double naive_mse(const SpectralCube& p, const SpectralCube& g) {
  long double s = 0;
  for (std::size_t y = 0; y < g.height; ++y)
    for (std::size_t x = 0; x < g.width; ++x)
      for (std::size_t b = 0; b < g.bands; ++b) {
        const long double d = static_cast<long double>(p.at(b, y, x)) - g.at(b, y, x);
        s += d * d;
      }
  return s / static_cast<long double>(g.data.size());
}

double naive_sam(const SpectralCube& p, const SpectralCube& g) {
  long double s = 0;
  std::size_t n = 0;
  for (std::size_t y = 0; y < g.height; ++y)
    for (std::size_t x = 0; x < g.width; ++x) {
      const auto a = p.pixel(y, x), c = g.pixel(y, x);
      long double dot = 0, na = 0, nc = 0;
      for (std::size_t b = 0; b < g.bands; ++b) {
        dot += static_cast<long double>(a[b]) * c[b];
        na += static_cast<long double>(a[b]) * a[b];
        nc += static_cast<long double>(c[b]) * c[b];
      }
      if (na == 0 || nc == 0) continue;
      long double cosv = dot / std::sqrt(na * nc);
      cosv = std::min<long double>(1, std::max<long double>(-1, cosv));
      s += std::acos(cosv);
      ++n;
    }
  return static_cast<double>(s / static_cast<long double>(n));
}

double naive_mrae(const SpectralCube& p, const SpectralCube& g, double eps) {
  long double s = 0;
  for (std::size_t y = 0; y < g.height; ++y)
    for (std::size_t x = 0; x < g.width; ++x) {
      long double px = 0;
      for (std::size_t b = 0; b < g.bands; ++b)
        px += std::abs(static_cast<long double>(p.at(b, y, x)) - g.at(b, y, x)) / (g.at(b, y, x) + eps);
      s += px / static_cast<long double>(g.bands);
    }
  return static_cast<double>(s / static_cast<long double>(g.pixel_count()));
}

// Direct 2-D windowed SSIM with an explicit 11x11 kernel.
double naive_ssim(const SpectralCube& p, const SpectralCube& g) {
  double k[11][11];
  double ks = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) ks += k[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / 4.5);
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0;
  for (std::size_t b = 0; b < g.bands; ++b) {
    double band = 0;
    std::size_t n = 0;
    for (std::size_t y = 0; y + 11 <= g.height; ++y)
      for (std::size_t x = 0; x + 11 <= g.width; ++x) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int i = 0; i < 11; ++i)
          for (int j = 0; j < 11; ++j) {
            const double w = k[i][j] / ks;
            const double a = p.at(b, y + i, x + j), c = g.at(b, y + i, x + j);
            mx += w * a;
            my += w * c;
            sxx += w * a * a;
            syy += w * c * c;
            sxy += w * a * c;
          }
        const double vx = sxx - mx * mx, vy = syy - my * my, cv = sxy - mx * my;
        band += (2 * mx * my + c1) * (2 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++n;
      }
    total += band / static_cast<double>(n);
  }
  return total / static_cast<double>(g.bands);
}

}  // namespace

TEST(Psnr, UniformErrorIsTwentyDecibels) {
  SpectralCube g(4, 4, 3), p(4, 4, 3);
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    g.data[i] = 0.5f;
    p.data[i] = 0.5f + (i % 2 ? 0.1f : -0.1f);
  }
  EXPECT_NEAR(psnr(p, g), 20.0, 1e-5);
}

TEST(Psnr, IdenticalIsCapped) {
  const auto g = random_cube(5, 5, 2, 1);
  EXPECT_EQ(psnr(g, g), kPsnrCap);
  EXPECT_EQ(rmse(g, g), 0.0);
}

TEST(Psnr, ShapeMismatchRejected) {
  EXPECT_THROW((void)psnr(SpectralCube(2, 2, 2), SpectralCube(2, 2, 3)), DimensionError);
}

TEST(Oracles, MseFamilyMatchesNaiveLoops) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto g = random_cube(9, 7, 5, seed), p = random_cube(9, 7, 5, seed + 100);
    const long double m = naive_mse(p, g);
    EXPECT_NEAR(mse(p, g), static_cast<double>(m), 1e-12);
    EXPECT_NEAR(rmse(p, g), static_cast<double>(std::sqrt(m)), 1e-9);
    EXPECT_NEAR(psnr(p, g), static_cast<double>(10 * std::log10(1 / m)), 1e-9);
  }
}

TEST(Oracles, PerBandPsnrMatchesNaiveLoop) {
  const auto g = random_cube(6, 6, 4, 3), p = random_cube(6, 6, 4, 4);
  const auto per = psnr_per_band(p, g);
  for (std::size_t b = 0; b < 4; ++b) {
    long double s = 0;
    for (std::size_t y = 0; y < 6; ++y)
      for (std::size_t x = 0; x < 6; ++x) s += std::pow(static_cast<long double>(p.at(b, y, x)) - g.at(b, y, x), 2);
    EXPECT_NEAR(per[b], static_cast<double>(10 * std::log10(36 / s)), 1e-9);
  }
}

TEST(Oracles, SamMatchesNaiveLoop) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto g = random_cube(8, 8, 6, seed), p = random_cube(8, 8, 6, seed + 50);
    EXPECT_NEAR(sam(p, g).mean, naive_sam(p, g), 1e-9);
  }
}

TEST(Oracles, MraeMatchesNaiveLoop) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto g = random_cube(8, 5, 4, seed, 0.05), p = random_cube(8, 5, 4, seed + 7);
    EXPECT_NEAR(mrae_map(p, g).mean, naive_mrae(p, g, 1e-6), 1e-9);
  }
}

TEST(Oracles, SsimMatchesDirectWindowLoop) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto g = random_cube(16, 16, 3, seed);
    auto p = g;
    std::mt19937_64 rng(seed + 9);
    std::normal_distribution<float> n(0.0f, 0.1f);
    for (auto& v : p.data) v = std::clamp(v + n(rng), 0.0f, 1.0f);
    EXPECT_NEAR(ssim(p, g), naive_ssim(p, g), 1e-6);
  }
}

TEST(Oracles, SsimMatchesScikitImageFixture) {
  const auto dir = source_dir() / "tests" / "fixtures";
  const auto g = read_cube((dir / "ssim_gt_16x16x2.hsc").string());
  const auto p = read_cube((dir / "ssim_pred_16x16x2.hsc").string());
  std::ifstream in(dir / "ssim_expected.txt");
  double expected = 0;
  ASSERT_TRUE(in >> expected);
  EXPECT_NEAR(ssim(p, g), expected, 1e-6);
  EXPECT_NEAR(naive_ssim(p, g), expected, 1e-6);
}

TEST(Ssim, IdenticalIsOneAndSmallImageRejected) {
  const auto g = random_cube(12, 13, 2, 8);
  EXPECT_NEAR(ssim(g, g), 1.0, 1e-12);
  EXPECT_THROW((void)ssim(SpectralCube(10, 20, 1), SpectralCube(10, 20, 1)), DimensionError);
}

TEST(Sam, OrthogonalSpectraIsHalfPi) {
  SpectralCube p(1, 1, 2), g(1, 1, 2);
  p.data = {1.0f, 0.0f};
  g.data = {0.0f, 1.0f};
  EXPECT_NEAR(sam(p, g).mean, std::numbers::pi / 2, 1e-12);
}

TEST(Sam, ScaleInvariantAndZeroForEqual) {
  const auto g = random_cube(6, 6, 5, 2, 0.1);
  auto half = g;
  for (auto& v : half.data) v *= 0.5f;
  EXPECT_NEAR(sam(half, g).mean, 0.0, 1e-6);
  EXPECT_NEAR(sam(g, g).mean, 0.0, 1e-6);
}

TEST(Sam, ZeroPixelsSkippedAndAllZeroRejected) {
  SpectralCube p(2, 1, 2), g(2, 1, 2);
  p.data = {1.0f, 0.0f, 0.0f, 1.0f};  // band planes: pixel0 = (1,0), pixel1 = (0,1)
  g.data = {1.0f, 0.0f, 0.0f, 0.0f};  // pixel1 of gt is zero
  const auto r = sam(p, g);
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_NEAR(r.mean, 0.0, 1e-12);
  EXPECT_THROW((void)sam(SpectralCube(2, 2, 3), SpectralCube(2, 2, 3)), NumericError);
}

TEST(Mrae, TenPercentError) {
  SpectralCube g(3, 3, 4), p(3, 3, 4);
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    g.data[i] = 0.5f;
    p.data[i] = 0.55f;
  }
  EXPECT_NEAR(mrae_map(p, g).mean, 0.1, 1e-6);
}

TEST(Mrae, MeanEqualsHeatmapMean) {
  const auto g = random_cube(10, 7, 3, 11, 0.05), p = random_cube(10, 7, 3, 12);
  const auto m = mrae_map(p, g);
  long double s = 0;
  for (double v : m.values) s += v;
  EXPECT_NEAR(m.mean, static_cast<double>(s / m.values.size()), 1e-9);
  const auto q = m.quantize(0.0, 2.0);
  EXPECT_EQ(q.size(), 70u);
  EXPECT_THROW((void)m.quantize(1.0, 1.0), UsageError);
}

TEST(Properties, SymmetricMetrics) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto a = random_cube(7, 7, 4, seed), b = random_cube(7, 7, 4, seed + 30);
    EXPECT_EQ(rmse(a, b), rmse(b, a));
    EXPECT_NEAR(sam(a, b).mean, sam(b, a).mean, 1e-15);
  }
}

TEST(Properties, PsnrDecreasesWithNoiseAmplitude) {
  const auto g = random_cube(16, 16, 4, 21);
  std::mt19937_64 rng(77);
  std::normal_distribution<float> n;
  std::vector<float> noise(g.data.size());
  for (auto& v : noise) v = n(rng);
  double previous = kPsnrCap + 1;
  for (float amp : {0.001f, 0.002f, 0.005f, 0.01f, 0.02f, 0.05f, 0.1f, 0.2f}) {
    auto p = g;
    for (std::size_t i = 0; i < p.data.size(); ++i) p.data[i] += amp * noise[i];
    const double v = psnr(p, g);
    EXPECT_LT(v, previous) << "amplitude " << amp;
    previous = v;
  }
}

TEST(Report, EvaluateAndAverage) {
  const auto g = random_cube(12, 12, 3, 5, 0.1), p = random_cube(12, 12, 3, 6, 0.1);
  const auto r = evaluate(p, g, true);
  EXPECT_EQ(r.psnr_per_band.size(), 3u);
  EXPECT_DOUBLE_EQ(r.psnr, psnr(p, g));
  MetricReport total;
  total.accumulate(r);
  total.accumulate(r);
  total.divide(2);
  EXPECT_NEAR(total.sam, r.sam, 1e-15);
  const auto j = nlohmann::json::parse(r.to_record());
  EXPECT_DOUBLE_EQ(j["rmse"].get<double>(), r.rmse);
  EXPECT_NE(r.to_text().find("psnr = "), std::string::npos);
}
