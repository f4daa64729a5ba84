#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "specfield/field.hpp"
#include "specfield/renderer.hpp"
#include "support.hpp"

using namespace specfield;
using namespace testing_support;

namespace {

// Scalar projection of every PointSample output onto fixed weights.
struct Probe {
  double density = 0.0, tint = 0.0;
  std::vector<double> abundance, scaling, specular, diffuse, radiance;

  static Probe random(std::size_t k, std::size_t b, std::mt19937_64& rng) {
    std::normal_distribution<double> g;
    Probe p;
    p.density = 0.01 * g(rng);
    p.tint = g(rng);
    for (std::size_t i = 0; i < k; ++i) {
      p.abundance.push_back(g(rng));
      p.scaling.push_back(g(rng));
    }
    for (std::size_t i = 0; i < b; ++i) {
      p.specular.push_back(g(rng));
      p.diffuse.push_back(g(rng));
      p.radiance.push_back(g(rng));
    }
    return p;
  }

  double value(const PointSample& s) const {
    double v = density * s.density + tint * s.tint;
    for (std::size_t i = 0; i < abundance.size(); ++i) v += abundance[i] * s.abundance[i] + scaling[i] * s.scaling[i];
    for (std::size_t i = 0; i < specular.size(); ++i)
      v += specular[i] * s.specular[i] + diffuse[i] * s.diffuse[i] + radiance[i] * s.radiance[i];
    return v;
  }

  PointSampleGrad grad() const { return {density, abundance, scaling, tint, specular, diffuse, radiance}; }
};

VoxelField two_by_two(std::size_t k, std::size_t b) { return VoxelField(GridResolution{2, 2, 2}, Aabb{}, k, b); }

}  // namespace

TEST(FieldSample, ZeroParametersActivationIdentities) {
  auto f = two_by_two(2, 4);
  f.set_endmembers(EndmemberDictionary::from_columns({Spectrum{0.2, 0.4, 0.6, 0.8}, Spectrum{0.9, 0.7, 0.5, 0.3}}));
  const auto s = sample(f, f.vertex_position(1, 0, 1), normalize(Vec3{0.3, -0.2, 0.9}));
  EXPECT_NEAR(s.density, 25.0 * std::log(2.0), 1e-12);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_DOUBLE_EQ(s.abundance[k], 0.5);
    EXPECT_DOUBLE_EQ(s.scaling[k], 0.5);
  }
  EXPECT_DOUBLE_EQ(s.tint, 0.5);
  for (std::size_t b = 0; b < 4; ++b) {
    EXPECT_DOUBLE_EQ(s.specular[b], 0.5);
    const double cd = 0.5 * (0.5 * f.endmembers()(b, 0) + 0.5 * f.endmembers()(b, 1));
    EXPECT_NEAR(s.diffuse[b], cd, 1e-15);
    EXPECT_NEAR(s.radiance[b], cd + 0.25, 1e-15);
  }
}

TEST(FieldSample, CornerReturnsStoredValues) {
  auto f = random_field({4, 3, 5}, 3, 2, 1);
  const auto& lay = f.layout();
  const Vec3 d{0.0, 0.0, 1.0};
  for (std::size_t iz = 0; iz < 5; ++iz)
    for (std::size_t iy = 0; iy < 3; ++iy)
      for (std::size_t ix = 0; ix < 4; ++ix) {
        const auto v = f.voxel(f.voxel_index(ix, iy, iz));
        const auto s = sample(f, f.vertex_position(ix, iy, iz), d);
        EXPECT_NEAR(s.density, 25.0 * softplus(v[lay.density()]), 1e-9);
        EXPECT_NEAR(s.tint, sigmoid_gate(v[lay.tint()]), 1e-12);
        std::vector<double> logits(3);
        for (std::size_t k = 0; k < 3; ++k) logits[k] = v[lay.abundance() + k];
        const auto a = softmax_abundance(logits);
        for (std::size_t k = 0; k < 3; ++k) {
          EXPECT_NEAR(s.abundance[k], a[k], 1e-12);
          EXPECT_NEAR(s.scaling[k], sigmoid_gate(v[lay.scaling() + k]), 1e-12);
        }
      }
}

TEST(FieldSample, MidpointInterpolatesLinearly) {
  auto f = two_by_two(1, 1);
  for (std::size_t iz = 0; iz < 2; ++iz)
    for (std::size_t iy = 0; iy < 2; ++iy) f.voxel(f.voxel_index(1, iy, iz))[0] = 2.0f;
  const auto s = sample(f, Vec3{0.0, -1.0, -1.0}, Vec3{1.0, 0.0, 0.0});
  EXPECT_NEAR(s.density, 25.0 * softplus(1.0), 1e-12);
}

TEST(FieldSample, OutsideBoundsIsEmpty) {
  auto f = random_field({3, 3, 3}, 4, 3, 2);
  const auto s = sample(f, Vec3{1.5, 0.0, 0.0}, Vec3{0.0, 1.0, 0.0});
  EXPECT_EQ(s.density, 0.0);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(s.abundance[k], 0.25);
}

TEST(FieldSample, RejectsNonUnitDirection) {
  auto f = two_by_two(1, 1);
  EXPECT_THROW(sample(f, Vec3{}, Vec3{0.0, 0.0, 1.1}), UsageError);
  EXPECT_NO_THROW(sample(f, Vec3{}, Vec3{0.0, 0.0, 1.0 + 5e-7}));
}

TEST(FieldSample, NanParameterNamesVoxel) {
  auto f = two_by_two(2, 2);
  const std::size_t v = f.voxel_index(1, 0, 1);
  f.voxel(v)[3] = std::numeric_limits<float>::quiet_NaN();
  try {
    sample(f, Vec3{0.1, 0.1, 0.1}, Vec3{1.0, 0.0, 0.0});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("voxel " + std::to_string(v)), std::string::npos) << e.what();
  }
}

TEST(FieldSample, ConstructorValidates) {
  EXPECT_THROW(VoxelField(GridResolution{1, 2, 2}, Aabb{}, 1, 1), UsageError);
  EXPECT_THROW(VoxelField(GridResolution{2, 2, 2}, Aabb{}, 1, 1, 0.0), UsageError);
  EXPECT_THROW(VoxelField(GridResolution{2, 2, 2}, Aabb{{0, 0, 0}, {1, 0, 1}}, 1, 1), UsageError);
}

TEST(FieldProperty, ConstraintsHoldEverywhere) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto f = random_field({5, 5, 5}, 1 + static_cast<std::size_t>(trial % 5), 4, 100 + static_cast<std::uint64_t>(trial));
    for (int q = 0; q < 500; ++q) {
      const auto s = sample(f, random_point(f.bounds(), rng), random_unit(rng));
      EXPECT_GE(s.density, 0.0);
      double total = 0.0;
      for (double a : s.abundance.weights) {
        EXPECT_GE(a, 0.0);
        total += a;
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
      for (double v : s.scaling.scales) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
      EXPECT_GE(s.tint, 0.0);
      EXPECT_LE(s.tint, 1.0);
      for (std::size_t b = 0; b < s.radiance.size(); ++b)
        EXPECT_NEAR(s.radiance[b], std::max(0.0, s.diffuse[b] + s.tint * s.specular[b]), 1e-15);
    }
  }
}

TEST(FieldProperty, ContinuousInPosition) {
  std::mt19937_64 rng(4);
  auto f = random_field({6, 6, 6}, 3, 5, 5);
  for (int q = 0; q < 2000; ++q) {
    const Vec3 x = random_point(Aabb{{-0.99, -0.99, -0.99}, {0.99, 0.99, 0.99}}, rng);
    const Vec3 y = x + random_unit(rng) * 1e-6;
    const Vec3 d = random_unit(rng);
    const auto a = sample(f, x, d), b = sample(f, y, d);
    // sigma carries the constant factor density_scale; the bound applies to the activation.
    EXPECT_NEAR(a.density / f.density_scale(), b.density / f.density_scale(), 1e-4);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(a.abundance[k], b.abundance[k], 1e-4);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(a.radiance[i], b.radiance[i], 1e-4);
  }
}

TEST(FieldProperty, SpecularIgnoresPositionWithConstantSh) {
  std::mt19937_64 rng(6);
  auto f = random_field({4, 4, 4}, 2, 3, 7);
  const auto& lay = f.layout();
  const auto first = f.voxel(0);
  std::vector<float> sh(first.begin() + static_cast<std::ptrdiff_t>(lay.specular()), first.end());
  for (std::size_t v = 0; v < f.resolution().voxels(); ++v)
    std::copy(sh.begin(), sh.end(), f.voxel(v).begin() + static_cast<std::ptrdiff_t>(lay.specular()));
  for (int q = 0; q < 200; ++q) {
    const Vec3 d = random_unit(rng);
    const auto a = sample(f, random_point(f.bounds(), rng), d), b = sample(f, random_point(f.bounds(), rng), d);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.specular[i], b.specular[i], 1e-6);
  }
}

TEST(FieldProperty, DiffuseIgnoresDirection) {
  std::mt19937_64 rng(8);
  auto f = random_field({4, 4, 4}, 3, 4, 9);
  for (int q = 0; q < 200; ++q) {
    const Vec3 x = random_point(f.bounds(), rng);
    const auto a = sample(f, x, random_unit(rng)), b = sample(f, x, random_unit(rng));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(a.diffuse[i], b.diffuse[i]);
  }
}

TEST(FieldFlags, AblationOverrides) {
  auto f = random_field({3, 3, 3}, 3, 2, 10);
  ModelFlags flags;
  flags.specular = false;
  flags.scaling = false;
  f.set_flags(flags);
  const auto s = sample(f, Vec3{0.2, 0.1, -0.3}, Vec3{0.0, 1.0, 0.0});
  EXPECT_EQ(s.tint, 0.0);
  for (double v : s.scaling.scales) EXPECT_EQ(v, 1.0);
  flags = {};
  flags.constrained = false;
  f.set_flags(flags);
  const auto& lay = f.layout();
  const auto v = f.voxel(f.voxel_index(1, 1, 1));
  const auto u = sample(f, f.vertex_position(1, 1, 1), Vec3{0.0, 1.0, 0.0});
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(u.abundance[k], v[lay.abundance() + k], 1e-7);
}

TEST(FieldBackward, ZeroUpstreamGivesZero) {
  auto f = random_field({3, 3, 3}, 2, 3, 11);
  const auto g = sample_backward(f, Vec3{0.1, 0.2, 0.3}, Vec3{1.0, 0.0, 0.0}, PointSampleGrad{});
  for (double v : g.raw) EXPECT_EQ(v, 0.0);
  for (double v : g.endmembers) EXPECT_EQ(v, 0.0);
}

TEST(FieldBackward, EndmemberGradientAtCorner) {
  auto f = random_field({3, 3, 3}, 3, 4, 12);
  const Vec3 x = f.vertex_position(1, 2, 0), d{0.0, 0.0, -1.0};
  const auto s = sample(f, x, d);
  for (std::size_t b = 0; b < 4; ++b) {
    PointSampleGrad g;
    g.diffuse.assign(4, 0.0);
    g.diffuse[b] = 1.0;
    const auto out = sample_backward(f, x, d, g);
    for (std::size_t k = 0; k < 3; ++k) {
      for (std::size_t bb = 0; bb < 4; ++bb) {
        const double expect = bb == b ? s.scaling[k] * s.abundance[k] : 0.0;
        EXPECT_NEAR(out.endmembers[k * 4 + bb], expect, 1e-15);
      }
    }
  }
}

TEST(FieldBackward, MatchesCentralDifferences) {
  std::mt19937_64 rng(13);
  double worst = 0.0;
  std::size_t checked = 0;
  for (int instance = 0; instance < 1000; ++instance) {
    const std::size_t k = 1 + rng() % 4, b = 1 + rng() % 5;
    auto f = random_field({3, 3, 3}, k, b, 1000 + static_cast<std::uint64_t>(instance));
    ModelFlags flags;
    flags.specular = rng() % 4 != 0;
    flags.scaling = rng() % 4 != 0;
    f.set_flags(flags);
    const Vec3 x = random_point(Aabb{{-0.95, -0.95, -0.95}, {0.95, 0.95, 0.95}}, rng);
    const Vec3 d = random_unit(rng);
    const auto probe = Probe::random(k, b, rng);
    const auto g = sample_backward(f, x, d, probe.grad());
    const std::size_t p = f.params_per_voxel();

    for (int check = 0; check < 3; ++check) {
      const std::size_t corner = rng() % 8, param = rng() % p;
      float& slot = f.params()[g.corners.index[corner] * p + param];
      const float saved = slot;
      slot = static_cast<float>(saved + 1e-4);
      const double up = probe.value(sample(f, x, d));
      const double hi = slot;
      slot = static_cast<float>(saved - 1e-4);
      const double down = probe.value(sample(f, x, d));
      const double lo = slot;
      slot = saved;
      const double numeric = (up - down) / (hi - lo);
      const double r = rel_error(g.corner_grad(corner, param), numeric);
      worst = std::max(worst, r);
      ++checked;
      EXPECT_LE(r, 1e-3) << "instance " << instance << " corner " << corner << " param " << param;
    }
    {
      const std::size_t e = rng() % (k * b);
      float& slot = f.endmembers().raw()[e];
      const float saved = slot;
      slot = static_cast<float>(saved + 1e-4);
      const double up = probe.value(sample(f, x, d));
      const double hi = slot;
      slot = static_cast<float>(saved - 1e-4);
      const double down = probe.value(sample(f, x, d));
      const double lo = slot;
      slot = saved;
      const double r = rel_error(g.endmembers[e], (up - down) / (hi - lo));
      worst = std::max(worst, r);
      ++checked;
      EXPECT_LE(r, 1e-3) << "instance " << instance << " endmember entry " << e;
    }
  }
  EXPECT_GE(checked, 1000u);
  RecordProperty("max_rel_error", std::to_string(worst));
}

TEST(FieldGradientModes, DeterministicAndAtomicAgree) {
  auto f = random_field({5, 5, 5}, 3, 4, 14);
  std::mt19937_64 rng(15);
  std::vector<Ray> rays;
  for (int i = 0; i < 256; ++i) {
    const Vec3 o = random_unit(rng) * 3.0;
    rays.push_back(Ray{o, normalize(random_point(Aabb{{-0.5, -0.5, -0.5}, {0.5, 0.5, 0.5}}, rng) - o), 1.5, 4.5});
  }
  std::vector<double> grad(4, 0.0);
  for (auto& v : grad) v = 0.3;
  MarchOptions opt;
  opt.n_samples = 48;
  opt.gradient_scaling = true;

  FieldGradient ordered(f);
  {
    const unsigned parts = 4;
    std::vector<FieldGradient> locals(parts, FieldGradient(f));
    parallel_chunks(rays.size(), parts, [&](unsigned part, std::size_t lo, std::size_t hi) {
      MarchWorkspace ws(f, opt.n_samples);
      RayRender r;
      for (std::size_t i = lo; i < hi; ++i) {
        march_into(f, rays[i], opt, ws, r);
        march_backward_into(f, opt, ws, grad, {}, locals[part]);
      }
    });
    for (const auto& l : locals) ordered.add(l);
  }
  FieldGradient shared(f);
  parallel_chunks(rays.size(), 4, [&](unsigned, std::size_t lo, std::size_t hi) {
    MarchWorkspace ws(f, opt.n_samples);
    RayRender r;
    for (std::size_t i = lo; i < hi; ++i) {
      march_into(f, rays[i], opt, ws, r);
      march_backward_into(f, opt, ws, grad, {}, shared, AccumulationMode::atomic);
    }
  });
  for (std::size_t i = 0; i < ordered.params.size(); ++i) EXPECT_NEAR(shared.params[i], ordered.params[i], 1e-5);
  for (std::size_t i = 0; i < ordered.endmembers.size(); ++i)
    EXPECT_NEAR(shared.endmembers[i], ordered.endmembers[i], 1e-5);
}

TEST(ReplaceEndmember, SameColumnRendersIdentically) {
  auto f = random_field({4, 4, 4}, 3, 5, 16);
  const auto g = replace_endmember(f, 1, f.endmembers().column(1));
  Camera cam{20.0, 20.0, 8.0, 8.0, 16, 16, look_at({0.0, 0.5, 3.0}, {0.0, 0.0, 0.0})};
  const auto a = render_image(f, cam, 1.5, 4.5, 32), b = render_image(g, cam, 1.5, 4.5, 32);
  EXPECT_EQ(a.spectral.data, b.spectral.data);
  EXPECT_EQ(a.abundance, b.abundance);
}

TEST(ReplaceEndmember, OnlyColumnChanges) {
  auto f = random_field({3, 3, 3}, 2, 3, 17);
  const auto g = replace_endmember(f, 0, Spectrum{0.1, 0.2, 0.3});
  EXPECT_EQ(g.endmembers().column(1), f.endmembers().column(1));
  EXPECT_NEAR(g.endmembers()(2, 0), 0.3, 1e-7);
  EXPECT_TRUE(std::equal(f.params().begin(), f.params().end(), g.params().begin()));
}

TEST(ReplaceEndmember, RejectsInvalidInput) {
  auto f = random_field({3, 3, 3}, 1, 2, 18);
  auto doubled = f.endmembers().column(0);
  for (auto& v : doubled.values) v = 2.0 * v + 0.6;
  EXPECT_THROW(replace_endmember(f, 0, doubled), UsageError);
  EXPECT_THROW(replace_endmember(f, 1, Spectrum{0.1, 0.1}), UsageError);
  EXPECT_THROW(replace_endmember(f, 0, Spectrum{0.1}), DimensionError);
}
