#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "specfield/error.hpp"
#include "specfield/hungarian.hpp"
#include "specfield/rng.hpp"
#include "specfield/speccore.hpp"

namespace specfield {

/// B x N matrix of spectral pixels, one pixel per column (column-major).
struct PixelMatrix {
  std::size_t bands = 0;
  std::size_t pixels = 0;
  std::vector<double> data;

  PixelMatrix() = default;
  PixelMatrix(std::size_t b, std::size_t n) : bands(b), pixels(n), data(b * n, 0.0) {}

  double operator()(std::size_t b, std::size_t n) const { return data[n * bands + b]; }
  double& operator()(std::size_t b, std::size_t n) { return data[n * bands + b]; }

  Spectrum pixel(std::size_t n) const {
    return Spectrum(std::vector<double>(data.begin() + static_cast<std::ptrdiff_t>(n * bands),
                                        data.begin() + static_cast<std::ptrdiff_t>((n + 1) * bands)));
  }

  void set_pixel(std::size_t n, const Spectrum& s) {
    detail::require_dims(bands, s.size(), "pixel band count");
    std::copy(s.values.begin(), s.values.end(), data.begin() + static_cast<std::ptrdiff_t>(n * bands));
  }
};

// ---------------------------------------------------------------------------
// Simplex projection and FCLS

/// Euclidean projection onto {a >= 0, sum(a) = 1} (sort-based).
inline AbundanceVector simplex_project(std::span<const double> v) {
  if (v.empty()) throw DimensionError("simplex_project: empty vector");
  std::vector<double> u(v.begin(), v.end());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumulative = 0.0, theta = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cumulative += u[j];
    const double t = (cumulative - 1.0) / static_cast<double>(j + 1);
    if (u[j] - t > 0.0) theta = t;
  }
  AbundanceVector a{std::vector<double>(v.size())};
  for (std::size_t i = 0; i < v.size(); ++i) a.weights[i] = std::max(v[i] - theta, 0.0);
  return a;
}

namespace detail {

inline Eigen::MatrixXd to_eigen(const EndmemberDictionary& e) {
  Eigen::MatrixXd m(e.band_count(), e.endmember_count());
  for (std::size_t k = 0; k < e.endmember_count(); ++k)
    for (std::size_t b = 0; b < e.band_count(); ++b) m(b, k) = e(b, k);
  return m;
}

// Largest eigenvalue of a symmetric PSD matrix by power iteration.
inline double power_iteration(const Eigen::MatrixXd& g, int iterations) {
  Eigen::VectorXd x = Eigen::VectorXd::Ones(g.rows()).normalized();
  double lambda = 0.0;
  for (int i = 0; i < iterations; ++i) {
    const Eigen::VectorXd y = g * x;
    const double n = y.norm();
    if (n == 0.0) return 0.0;
    lambda = x.dot(y);
    x = y / n;
  }
  return std::max(lambda, (g * x).norm());
}

}  // namespace detail

struct FclsOptions {
  int iterations = 500;
  double step = 0.0;  // <= 0 selects 0.9 / ||E^T E||_2
  int power_iterations = 20;
};

/// Simplex-constrained least squares min ||y - E a||^2 by projected gradient.
/// Returns the best iterate seen.
inline AbundanceVector fcls_solve(const EndmemberDictionary& e, const Spectrum& y, const FclsOptions& opt = {}) {
  detail::require_dims(e.band_count(), y.size(), "fcls_solve band count");
  const std::size_t k_count = e.endmember_count();
  if (k_count == 1) return AbundanceVector{{1.0}};

  const Eigen::MatrixXd em = detail::to_eigen(e);
  const Eigen::Map<const Eigen::VectorXd> yv(y.values.data(), static_cast<Eigen::Index>(y.size()));
  const Eigen::MatrixXd gram = em.transpose() * em;
  const Eigen::VectorXd ety = em.transpose() * yv;
  double step = opt.step;
  if (step <= 0.0) {
    const double lipschitz = detail::power_iteration(gram, opt.power_iterations);
    step = lipschitz > 0.0 ? 0.9 / lipschitz : 1.0;
  }

  auto objective = [&](const Eigen::VectorXd& a) { return (em * a - yv).squaredNorm(); };
  Eigen::VectorXd a = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(k_count), 1.0 / static_cast<double>(k_count));
  Eigen::VectorXd best = a;
  double best_obj = objective(a);
  for (int it = 0; it < std::max(1, opt.iterations); ++it) {
    const Eigen::VectorXd trial = a - step * (gram * a - ety);
    const auto projected = simplex_project(std::span<const double>(trial.data(), k_count));
    a = Eigen::Map<const Eigen::VectorXd>(projected.weights.data(), static_cast<Eigen::Index>(k_count));
    const double obj = objective(a);
    if (obj < best_obj) {
      best_obj = obj;
      best = a;
    }
  }
  return AbundanceVector{std::vector<double>(best.data(), best.data() + k_count)};
}

// ---------------------------------------------------------------------------
// Vertex component analysis

struct VcaResult {
  EndmemberDictionary endmembers;
  std::vector<std::size_t> indices;  // selected pixel columns
};

namespace detail {

inline std::size_t numerical_rank(const Eigen::MatrixXd& y) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(y);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) == 0.0) return 0;
  const double tol = sv(0) * 1e-9 * static_cast<double>(std::max(y.rows(), y.cols()));
  std::size_t r = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) r += sv(i) > tol ? 1 : 0;
  return r;
}

}  // namespace detail

/// VCA endmember selection (affine-projection variant). Selected endmembers
/// are actual input pixels, clamped to [0,1].
inline VcaResult vca_select(const PixelMatrix& pixels, std::size_t k_count, std::uint64_t seed) {
  const std::size_t bands = pixels.bands, n = pixels.pixels;
  if (k_count == 0) throw UsageError("vca: endmember count must be >= 1");
  if (k_count > std::min(bands, n)) {
    throw UsageError("vca: K=" + std::to_string(k_count) + " exceeds min(B=" + std::to_string(bands) +
                     ", N=" + std::to_string(n) + ")");
  }
  const Eigen::Map<const Eigen::MatrixXd> y(pixels.data.data(), static_cast<Eigen::Index>(bands),
                                            static_cast<Eigen::Index>(n));
  const std::size_t rank = detail::numerical_rank(y * y.transpose());
  if (rank < k_count) {
    throw NumericError("vca: data has numerical rank " + std::to_string(rank) + " < K=" + std::to_string(k_count));
  }

  auto rng = make_rng(seed, "vca");
  Eigen::MatrixXd projected;  // k_count x n
  if (k_count == 1) {
    // Single endmember: project onto the leading direction of the raw data.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(y * y.transpose() / static_cast<double>(n));
    projected = eig.eigenvectors().col(static_cast<Eigen::Index>(bands) - 1).transpose() * y;
  } else {
    const Eigen::VectorXd mean = y.rowwise().mean();
    const Eigen::MatrixXd centered = y.colwise() - mean;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(centered * centered.transpose() / static_cast<double>(n));
    const Eigen::Index d = static_cast<Eigen::Index>(k_count) - 1;
    // Eigenvalues ascend; take the top d directions.
    const Eigen::MatrixXd ud = eig.eigenvectors().rightCols(d);
    const Eigen::MatrixXd xp = ud.transpose() * centered;
    const double c = xp.colwise().norm().maxCoeff();
    projected.resize(d + 1, static_cast<Eigen::Index>(n));
    projected.topRows(d) = xp;
    projected.row(d).setConstant(c);
  }

  const auto p = static_cast<Eigen::Index>(k_count);
  Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(p, p);
  basis(p - 1, 0) = 1.0;
  std::vector<std::size_t> indices(k_count, 0);
  for (std::size_t i = 0; i < k_count; ++i) {
    Eigen::VectorXd w(p);
    for (Eigen::Index j = 0; j < p; ++j) w(j) = normal(rng);
    // With K=1 the initial basis spans the projected space; use the single axis.
    Eigen::VectorXd f =
        k_count == 1 ? Eigen::VectorXd::Ones(1) : Eigen::VectorXd(w - basis * (basis.completeOrthogonalDecomposition().pseudoInverse() * w));
    const double fn = f.norm();
    if (fn == 0.0) throw NumericError("vca: degenerate projection direction at round " + std::to_string(i));
    f /= fn;
    const Eigen::VectorXd v = (f.transpose() * projected).transpose();
    Eigen::Index best = 0;
    v.cwiseAbs().maxCoeff(&best);
    indices[i] = static_cast<std::size_t>(best);
    basis.col(static_cast<Eigen::Index>(i)) = projected.col(best);
  }

  VcaResult out{EndmemberDictionary(bands, k_count), indices};
  for (std::size_t k = 0; k < k_count; ++k) {
    for (std::size_t b = 0; b < bands; ++b) out.endmembers.set(b, k, std::clamp(pixels(b, indices[k]), 0.0, 1.0));
  }
  return out;
}

inline EndmemberDictionary vca_extract(const PixelMatrix& pixels, std::size_t k_count, std::uint64_t seed) {
  return vca_select(pixels, k_count, seed).endmembers;
}

// ---------------------------------------------------------------------------
// Permutation-invariant endmember comparison

struct EndmemberMatch {
  std::vector<int> estimate_for_truth;  // truth column k -> estimate column
  std::vector<double> angles;           // per truth column, radians
  double max_angle = 0.0;
};

/// Hungarian assignment on pairwise spectral angle.
inline EndmemberMatch match_endmembers(const EndmemberDictionary& estimate, const EndmemberDictionary& truth) {
  detail::require_dims(truth.band_count(), estimate.band_count(), "match_endmembers band count");
  const std::size_t kt = truth.endmember_count(), ke = estimate.endmember_count();
  std::vector<double> cost(kt * ke);
  for (std::size_t i = 0; i < kt; ++i)
    for (std::size_t j = 0; j < ke; ++j) cost[i * ke + j] = spectral_angle(truth.column(i), estimate.column(j));
  EndmemberMatch m;
  m.estimate_for_truth = hungarian_assign(cost, kt, ke);
  m.angles.assign(kt, 0.0);
  for (std::size_t i = 0; i < kt; ++i) {
    const int j = m.estimate_for_truth[i];
    m.angles[i] = j < 0 ? 3.14159265358979323846 / 2 : cost[i * ke + static_cast<std::size_t>(j)];
    m.max_angle = std::max(m.max_angle, m.angles[i]);
  }
  return m;
}

}  // namespace specfield
