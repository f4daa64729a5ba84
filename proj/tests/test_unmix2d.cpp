#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "specfield/unmix2d.hpp"

using namespace specfield;

namespace {

// Brute-force projection: try every support, keep the feasible one nearest to v.
std::vector<double> enumerate_projection(const std::vector<double>& v) {
  const std::size_t k = v.size();
  std::vector<double> best;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t mask = 1; mask < (std::size_t{1} << k); ++mask) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < k; ++i)
      if (mask >> i & 1) {
        sum += v[i];
        ++n;
      }
    const double shift = (sum - 1.0) / static_cast<double>(n);
    std::vector<double> a(k, 0.0);
    bool ok = true;
    for (std::size_t i = 0; i < k; ++i)
      if (mask >> i & 1) {
        a[i] = v[i] - shift;
        if (a[i] < 0.0) ok = false;
      }
    if (!ok) continue;
    double d = 0.0;
    for (std::size_t i = 0; i < k; ++i) d += (a[i] - v[i]) * (a[i] - v[i]);
    if (d < best_d) {
      best_d = d;
      best = a;
    }
  }
  return best;
}

EndmemberDictionary separated_dictionary(std::size_t b, std::size_t k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  EndmemberDictionary e(b, k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < b; ++j) e.set(j, i, u(rng));
  return e;
}

// Pure pixels first (shuffled in later), then Dirichlet interior mixtures.
PixelMatrix pure_pixel_data(const EndmemberDictionary& e, std::size_t mixtures, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> ex(1.0);
  const std::size_t k = e.endmember_count(), b = e.band_count();
  PixelMatrix y(b, k + mixtures);
  for (std::size_t n = 0; n < k + mixtures; ++n) {
    AbundanceVector a{std::vector<double>(k, 0.0)};
    if (n < k) {
      a.weights[n] = 1.0;
    } else {
      double s = 0.0;
      for (auto& w : a.weights) s += (w = ex(rng) + 0.05);
      for (auto& w : a.weights) w /= s;
    }
    const auto px = lmm_mix(e, a);
    for (std::size_t j = 0; j < b; ++j) y(j, n) = px[j];
  }
  // Move pure pixels to scattered positions.
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t dst = (i * 37 + 11) % y.pixels;
    for (std::size_t j = 0; j < b; ++j) std::swap(y(j, i), y(j, dst));
  }
  return y;
}

}  // namespace

TEST(SimplexProject, FixedPointOnSimplex) {
  const std::vector<double> v{0.2, 0.3, 0.5};
  const auto a = simplex_project(v);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a[i], v[i], 1e-15);
}

TEST(SimplexProject, VertexSnap) {
  const std::vector<double> v{2.0, 0.0};
  const auto a = simplex_project(v);
  EXPECT_EQ(a[0], 1.0);
  EXPECT_EQ(a[1], 0.0);
}

TEST(SimplexProject, MatchesSupportEnumeration) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> g(0.2, 1.0);
  for (std::size_t k = 1; k <= 5; ++k) {
    for (int trial = 0; trial < 1000; ++trial) {
      std::vector<double> v(k);
      for (auto& x : v) x = g(rng);
      const auto a = simplex_project(v);
      const auto ref = enumerate_projection(v);
      for (std::size_t i = 0; i < k; ++i) EXPECT_NEAR(a[i], ref[i], 1e-12);
    }
  }
}

TEST(SimplexProjectProperty, IdempotentAndFeasible) {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<double> v(1 + trial % 9);
    for (auto& x : v) x = u(rng);
    const auto a = simplex_project(v);
    double s = 0.0;
    for (double w : a.weights) {
      EXPECT_GE(w, 0.0);
      s += w;
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
    const auto b = simplex_project(a.weights);
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(b[i], a[i], 1e-9);
  }
}

TEST(Fcls, RecoversVertex) {
  const auto e = separated_dictionary(8, 3, 1);
  for (std::size_t k = 0; k < 3; ++k) {
    const auto y = e.column(k);
    const auto a = fcls_solve(e, y, {5000, 0.0, 20});
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(a[j], j == k ? 1.0 : 0.0, 1e-4);
    const auto r = lmm_mix(e, a);
    double res = 0.0;
    for (std::size_t b = 0; b < 8; ++b) res += (r[b] - y[b]) * (r[b] - y[b]);
    EXPECT_LT(std::sqrt(res), 1e-6);
  }
}

TEST(Fcls, HalfMixture) {
  const auto e = EndmemberDictionary::from_columns({Spectrum{0.9, 0.1, 0.3, 0.5}, Spectrum{0.2, 0.8, 0.6, 0.1}});
  const auto y = lmm_mix(e, AbundanceVector{{0.5, 0.5}});
  const auto a = fcls_solve(e, y);
  EXPECT_NEAR(a[0], 0.5, 1e-4);
  EXPECT_NEAR(a[1], 0.5, 1e-4);
}

TEST(Fcls, SingleEndmemberIsOne) {
  const auto e = EndmemberDictionary::from_columns({Spectrum{0.3, 0.6}});
  EXPECT_EQ(fcls_solve(e, Spectrum{0.9, 0.0})[0], 1.0);
  EXPECT_EQ(fcls_solve(e, Spectrum{0.0, 0.0})[0], 1.0);
}

TEST(Fcls, InvertsRandomForwardMixtures) {
  std::mt19937_64 rng(23);
  std::exponential_distribution<double> ex(1.0);
  const auto e = separated_dictionary(10, 4, 2);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    AbundanceVector a{std::vector<double>(4)};
    double s = 0.0;
    for (auto& w : a.weights) s += (w = ex(rng));
    for (auto& w : a.weights) w /= s;
    const auto est = fcls_solve(e, lmm_mix(e, a), {20000, 0.0, 20});
    for (std::size_t k = 0; k < 4; ++k) worst = std::max(worst, std::abs(est[k] - a[k]));
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(FclsProperty, NeverWorseThanUniform) {
  std::mt19937_64 rng(24);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t b = 3 + trial % 6, k = 1 + trial % 5;
    EndmemberDictionary e(b, k);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < b; ++j) e.set(j, i, u(rng));
    Spectrum y(b);
    for (auto& v : y.values) v = u(rng);
    const auto a = fcls_solve(e, y, {50, 0.0, 20});
    const auto uniform = lmm_mix(e, AbundanceVector{std::vector<double>(k, 1.0 / static_cast<double>(k))});
    const auto fit = lmm_mix(e, a);
    double ru = 0.0, rf = 0.0;
    for (std::size_t j = 0; j < b; ++j) {
      ru += (y[j] - uniform[j]) * (y[j] - uniform[j]);
      rf += (y[j] - fit[j]) * (y[j] - fit[j]);
    }
    EXPECT_LE(rf, ru + 1e-12);
    double s = 0.0;
    for (double w : a.weights) {
      EXPECT_GE(w, 0.0);
      s += w;
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(FclsProperty, ObjectiveNonincreasingWithSafeStep) {
  std::mt19937_64 rng(25);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto e = separated_dictionary(6, 3, 3);
  Spectrum y(6);
  for (auto& v : y.values) v = u(rng);
  double prev = std::numeric_limits<double>::infinity();
  for (int iters = 1; iters <= 60; ++iters) {
    const auto a = fcls_solve(e, y, {iters, 0.0, 20});
    const auto fit = lmm_mix(e, a);
    double obj = 0.0;
    for (std::size_t j = 0; j < 6; ++j) obj += (y[j] - fit[j]) * (y[j] - fit[j]);
    EXPECT_LE(obj, prev + 1e-15);
    prev = obj;
  }
}

TEST(Vca, RecoversPurePixels) {
  const auto e = separated_dictionary(8, 3, 4);
  const auto y = pure_pixel_data(e, 400, 5);
  EXPECT_LE(match_endmembers(vca_extract(y, 3, 1), e).max_angle, 1e-6);
}

TEST(Vca, RecoversPurePixelsHigherOrder) {
  const auto e = separated_dictionary(12, 5, 6);
  const auto y = pure_pixel_data(e, 1000, 7);
  EXPECT_LE(match_endmembers(vca_extract(y, 5, 3), e).max_angle, 1e-6);
}

TEST(Vca, SingleEndmemberPicksLargestProjection) {
  const auto e = separated_dictionary(6, 1, 8);
  PixelMatrix y(6, 50);
  for (std::size_t n = 0; n < 50; ++n)
    for (std::size_t b = 0; b < 6; ++b) y(b, n) = e(b, 0) * (n == 17 ? 1.0 : 0.2 + 0.6 * static_cast<double>(n) / 50.0);
  const auto r = vca_select(y, 1, 0);
  EXPECT_EQ(r.indices[0], 17u);
  EXPECT_LE(spectral_angle(r.endmembers.column(0), e.column(0)), 1e-6);
}

TEST(Vca, SeedsAgreeUpToPermutation) {
  const auto e = separated_dictionary(8, 4, 9);
  const auto y = pure_pixel_data(e, 300, 10);
  const auto a = vca_extract(y, 4, 1), b = vca_extract(y, 4, 99);
  EXPECT_LE(match_endmembers(a, b).max_angle, 1e-9);
}

TEST(Vca, ReturnsInputColumns) {
  std::mt19937_64 rng(26);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PixelMatrix y(7, 200);
  for (auto& v : y.data) v = u(rng);
  const auto r = vca_select(y, 4, 2);
  for (std::size_t k = 0; k < 4; ++k) {
    ASSERT_LT(r.indices[k], 200u);
    for (std::size_t b = 0; b < 7; ++b)
      EXPECT_EQ(r.endmembers(b, k), static_cast<double>(static_cast<float>(y(b, r.indices[k]))));
  }
}

TEST(Vca, RejectsTooManyEndmembers) {
  PixelMatrix y(3, 10);
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = 0.1 * static_cast<double>(i % 7);
  EXPECT_THROW(vca_extract(y, 4, 0), UsageError);
  PixelMatrix z(8, 2);
  EXPECT_THROW(vca_extract(z, 3, 0), UsageError);
}

TEST(Vca, RankDeficientNamesRank) {
  // Every pixel is a multiple of one spectrum: rank 1.
  PixelMatrix y(5, 40);
  for (std::size_t n = 0; n < 40; ++n)
    for (std::size_t b = 0; b < 5; ++b) y(b, n) = (0.1 + 0.02 * static_cast<double>(n)) * (0.2 + 0.1 * static_cast<double>(b));
  try {
    vca_extract(y, 3, 0);
    FAIL() << "expected NumericError";
  } catch (const NumericError& err) {
    EXPECT_NE(std::string(err.what()).find("rank 1"), std::string::npos) << err.what();
  }
}

TEST(MatchEndmembers, PermutationInvariant) {
  const auto e = separated_dictionary(6, 3, 11);
  const auto p = EndmemberDictionary::from_columns({e.column(2), e.column(0), e.column(1)});
  const auto m = match_endmembers(p, e);
  EXPECT_EQ(m.estimate_for_truth, (std::vector<int>{1, 2, 0}));
  EXPECT_LE(m.max_angle, 1e-7);
}
