#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "pulsereg/loss.hpp"
#include "pulsereg/ops.hpp"
#include "pulsereg/warp.hpp"
#include "testing.hpp"

using namespace pulsereg;
using namespace pulsereg::testing;

namespace {

Array<double> constant_stack(int phases, Shape spatial, const std::vector<Vec3>& c) {
  Array<double> f(Shape{3 * phases, spatial[0], spatial[1], spatial[2]});
  const auto v = f.voxels();
  for (int n = 0; n < phases; ++n)
    for (int k = 0; k < 3; ++k)
      for (std::int64_t i = 0; i < v; ++i) f.values[(3 * n + k) * v + i] = c[static_cast<std::size_t>(n)][k];
  return f;
}

// Reference gradient energy: every forward difference written out per axis.
double gradient_energy_oracle(const Array<double>& u) {
  double acc = 0;
  for (std::int64_t c = 0; c < u.dim(0); ++c)
    for (std::int64_t z = 0; z < u.dim(1); ++z)
      for (std::int64_t y = 0; y < u.dim(2); ++y)
        for (std::int64_t x = 0; x < u.dim(3); ++x) {
          const double dx = x + 1 < u.dim(3) ? u(c, z, y, x + 1) - u(c, z, y, x) : 0.0;
          const double dy = y + 1 < u.dim(2) ? u(c, z, y + 1, x) - u(c, z, y, x) : 0.0;
          const double dz = z + 1 < u.dim(1) ? u(c, z + 1, y, x) - u(c, z, y, x) : 0.0;
          acc += dx * dx + dy * dy + dz * dz;
        }
  return acc / static_cast<double>(u.size());
}

// Seam reference from the patch/neighbor geometry: the neighbor below the
// patch along `axis` contributes layers at distance 1..k.
double seam_oracle(const Array<double>& u, const SeamContext<double>& s) {
  double acc = 0;
  std::int64_t pairs = 0;
  for (int axis = 0; axis < 3; ++axis) {
    if (!s.band[axis]) continue;
    const auto& b = *s.band[axis];
    const std::int64_t layers = b.dim(static_cast<std::size_t>(3 - axis));
    for (std::int64_t z = 0; z < s.valid.z; ++z)
      for (std::int64_t y = 0; y < s.valid.y; ++y)
        for (std::int64_t x = 0; x < s.valid.x; ++x) {
          const std::int64_t p[3] = {x, y, z};
          if (p[axis] != 0) continue;
          for (std::int64_t k = 0; k < layers; ++k) {
            std::int64_t q[3] = {x, y, z};
            q[axis] = k;
            for (std::int64_t n = 0; n < u.dim(0) / 3; ++n) {
              double sq = 0;
              for (int c = 0; c < 3; ++c) sq += std::pow(u(3 * n + c, z, y, x) - b(3 * n + c, q[2], q[1], q[0]), 2);
              acc += sq / static_cast<double>(k + 1);
              ++pairs;
            }
          }
        }
  }
  return pairs ? acc / static_cast<double>(pairs) : 0.0;
}


}  // namespace

TEST_CASE("ncc examples") {
  Rng rng(1);
  const auto a = random_array(rng, {1, 6, 6, 6});
  CHECK(ncc(a, a).value == doctest::Approx(1.0).epsilon(1e-14));
  Array<double> neg = a;
  for (double& v : neg.values) v = -v;
  CHECK(ncc(a, neg).value == doctest::Approx(-1.0).epsilon(1e-14));
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng r2(seed);
    const auto x = random_array(r2, {1, 6, 6, 6}), y = random_array(r2, {1, 6, 6, 6});
    const Mask m = random_mask(r2, {1, 6, 6, 6}, 0.6);
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < x.values.size(); ++i)
      if (m.values[i]) xs.push_back(x.values[i]), ys.push_back(y.values[i]);
    CHECK(std::abs(ncc(x, y, &m).value - naive_ncc(xs, ys)) < 1e-12);
    CHECK(std::abs(ncc(x, y).value - naive_ncc(x.values, y.values)) < 1e-12);
  }
  const Array<double> flat(Shape{1, 3, 3, 3}, 2.0);
  const auto d = ncc(flat, a.shape == flat.shape ? a : random_array(rng, {1, 3, 3, 3}));
  CHECK(d.degenerate);
  CHECK(d.value == 0.0);
  Mask one(Shape{1, 3, 3, 3}, 0);
  one.values[4] = 1;
  CHECK_THROWS_AS(ncc(flat, flat, &one), InvalidArgument);
}

TEST_CASE("ncc gradient") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    Tensor<double> a(random_array(rng, {1, 3, 4, 5}), true), b(random_array(rng, {1, 3, 4, 5}), true);
    const Mask m = random_mask(rng, {1, 3, 4, 5}, 0.7);
    CHECK(gradient_error([&](Graph<double>& g) { return ncc(g, a, b, &m).value; }, {a, b}) < 1e-4);
  }
}

TEST_CASE("dissimilarity examples") {
  Rng rng(2);
  const auto img = random_array(rng, {1, 4, 4, 4});
  Array<double> same(Shape{3, 4, 4, 4});
  for (int n = 0; n < 3; ++n) std::copy(img.values.begin(), img.values.end(), same.values.begin() + n * 64);
  Graph<double> g;
  CHECK(dissimilarity(g, same, Tensor<double>(Array<double>(Shape{9, 4, 4, 4})), nullptr).value.item() ==
        doctest::Approx(0.0).epsilon(1e-14));
  Array<double> anti(Shape{2, 4, 4, 4});
  for (std::size_t i = 0; i < 64; ++i) anti.values[i] = img.values[i], anti.values[64 + i] = -img.values[i];
  CHECK(dissimilarity(g, anti, Tensor<double>(Array<double>(Shape{6, 4, 4, 4})), nullptr).value.item() ==
        doctest::Approx(1.0));

  // Per-transition manual computation.
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng r(10 + seed);
    const int n = 2 + static_cast<int>(seed % 3);
    const auto images = smooth_array(r, {n, 5, 5, 6}, 3.0);
    const auto fields = random_array(r, {3 * n, 5, 5, 6}, -1, 1);
    const Mask m = random_mask(r, {1, 5, 5, 6}, 0.8);
    double expect = 0;
    for (int k = 0; k < n; ++k) {
      const auto warped = warp_volume(channel_slice(images, (k + 1) % n, 1), channel_slice(fields, 3 * k, 3));
      expect += (1 - ncc(channel_slice(images, k, 1), warped, &m).value) / 2 / n;
    }
    Graph<double> g2;
    CHECK(dissimilarity(g2, images, Tensor<double>(fields), &m).value.item() == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("smoothness examples") {
  Graph<double> g;
  const SeamContext<double> none;
  CHECK(smoothness(g, Tensor<double>(Array<double>(Shape{6, 4, 4, 4})), none, 0.1, 2.0).item() == 0.0);
  CHECK(smoothness(g, Tensor<double>(constant_stack(2, {4, 4, 4}, {{1, 2, 3}, {-1, 0.5, 2}})), none, 0.1, 2.0).item() ==
        0.0);

  // u = 0.1 * (x, y, z) on 8^3: each component has one axis with step 0.1
  // on 7 of 8 positions, so the mean squared difference is 0.01 * 7 / 8.
  Array<double> lin(Shape{6, 8, 8, 8});
  for (int n = 0; n < 2; ++n)
    for (std::int64_t z = 0; z < 8; ++z)
      for (std::int64_t y = 0; y < 8; ++y)
        for (std::int64_t x = 0; x < 8; ++x) {
          lin(3 * n + 0, z, y, x) = 0.1 * x;
          lin(3 * n + 1, z, y, x) = 0.1 * y;
          lin(3 * n + 2, z, y, x) = 0.1 * z;
        }
  CHECK(gradient_energy(lin) == doctest::Approx(0.01 * 7.0 / 8.0).epsilon(1e-12));
  const double s_max = 4.0;
  CHECK(smoothness(g, Tensor<double>(lin), none, 0.0, s_max).item() ==
        doctest::Approx(0.01 * 7.0 / 8.0 / (4 * s_max * s_max)).epsilon(1e-12));
}

TEST_CASE("smoothness terms match their references") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Shape s{6, 3 + static_cast<std::int64_t>(seed % 4), 4, 5};
    const auto u = random_array(rng, s, -2, 2);
    CHECK(gradient_energy(u) == doctest::Approx(gradient_energy_oracle(u)).epsilon(1e-12));
    const auto seams = random_seams(rng, s, {s[3] - static_cast<std::int64_t>(seed % 2), s[2], s[1]});
    CHECK(seam_energy(u, seams) == doctest::Approx(seam_oracle(u, seams)).epsilon(1e-12));
  }
}

TEST_CASE("smoothness ignores a global offset without seams") {
  Rng rng(4);
  const auto u = random_array(rng, {9, 4, 5, 6});
  Array<double> shifted = u;
  for (std::int64_t c = 0; c < 9; ++c)
    for (std::int64_t i = 0; i < u.voxels(); ++i) shifted.values[c * u.voxels() + i] += 0.3 * (c + 1);
  Graph<double> g;
  CHECK(smoothness(g, Tensor<double>(u), {}, 0.1, 3.0).item() ==
        doctest::Approx(smoothness(g, Tensor<double>(shifted), {}, 0.1, 3.0).item()).epsilon(1e-12));
}

TEST_CASE("cyclic examples") {
  Graph<double> g;
  CHECK(cyclic(g, Tensor<double>(Array<double>(Shape{6, 4, 4, 4})), 2.0).item() == 0.0);
  // Opposite constants: interior trajectories close exactly, border ones clamp
  // but still return because the fields are constant.
  CHECK(cyclic(g, Tensor<double>(constant_stack(2, {4, 4, 4}, {{0.5, -0.25, 1}, {-0.5, 0.25, -1}})), 2.0).item() ==
        doctest::Approx(0.0));
  const Vec3 c{0.3, -0.2, 0.1};
  const double s_max = 5.0;
  const double expect = (16 * (0.09 + 0.04 + 0.01)) / (16 * s_max * s_max);
  CHECK(cyclic(g, Tensor<double>(constant_stack(4, {6, 6, 6}, {c, c, c, c})), s_max).item() ==
        doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("cyclic for two phases is the round-trip defect") {
  Rng rng(5);
  const auto stack = smooth_array(rng, {6, 6, 6, 6}, 1.0);
  const auto fs = split_field_stack(stack, Grid{{6, 6, 6}});
  const auto a = compose(fs, 0, 1);
  double acc = 0;
  for (std::int64_t z = 0; z < 6; ++z)
    for (std::int64_t y = 0; y < 6; ++y)
      for (std::int64_t x = 0; x < 6; ++x) {
        const Vec3 p{static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
        const Vec3 q = p + Vec3{a(0, z, y, x), a(1, z, y, x), a(2, z, y, x)};
        const Vec3 r = q + sample_vector(fs.fields[1], q);
        acc += std::pow((r - p).norm(), 2);
      }
  Graph<double> g;
  CHECK(cyclic(g, Tensor<double>(stack), 3.0).item() == doctest::Approx(acc / 216 / 36).epsilon(1e-12));
}

TEST_CASE("normalization keeps every term in [0, 1]") {
  // Fields bounded by the displacement cap, including worst-case patterns
  // (checkerboards at full magnitude) alongside uniform noise.
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(seed);
    const int n = 2 + static_cast<int>(seed % 3);
    const double cap = rng.uniform(0.5, 10.0);
    const Shape s{3 * n, 2 + static_cast<std::int64_t>(rng.uniform() * 5), 2 + static_cast<std::int64_t>(rng.uniform() * 5),
                  2 + static_cast<std::int64_t>(rng.uniform() * 5)};
    Array<double> u(s);
    const auto v = u.voxels();
    const bool extreme = seed % 4 == 0;
    for (std::int64_t p = 0; p < n; ++p)
      for (std::int64_t i = 0; i < v; ++i) {
        Vec3 d;
        if (extreme) {
          const std::int64_t x = i % s[3], y = (i / s[3]) % s[2], z = i / (s[3] * s[2]);
          const double sign = (x + y + z) % 2 ? 1.0 : -1.0;
          d = Vec3{sign, sign, sign};
          d = (cap / d.norm()) * d;
        } else {
          d = Vec3{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
          if (d.norm() > 1) d = (1.0 / d.norm()) * d;
          d = cap * d;
        }
        for (int c = 0; c < 3; ++c) u.values[(3 * p + c) * v + i] = d[c];
      }
    SeamContext<double> seams;
    seams.valid = {s[3], s[2], s[1]};
    Shape bs = s;
    bs[3] = 3;
    Array<double> band(bs);
    for (std::size_t i = 0; i < band.values.size(); ++i) band.values[i] = (i % 2 ? cap : -cap) / std::sqrt(3.0);
    seams.band[0] = band;
    const auto images = random_array(rng, {n, s[1], s[2], s[3]});
    LossWeights w;
    w.displacement_cap = cap;
    Graph<double> g;
    const auto t = total_loss(g, images, Tensor<double>(u), nullptr, seams, w);
    REQUIRE(t.dissimilarity >= 0);
    REQUIRE(t.dissimilarity <= 1);
    REQUIRE(t.smoothness >= 0);
    REQUIRE(t.smoothness <= 1);
    REQUIRE(t.cyclic >= 0);
    REQUIRE(t.cyclic <= 1 + 1e-12);
  }
}

TEST_CASE("total loss") {
  Rng rng(6);
  const auto img = random_array(rng, {1, 4, 4, 4});
  Array<double> same(Shape{2, 4, 4, 4});
  for (int n = 0; n < 2; ++n) std::copy(img.values.begin(), img.values.end(), same.values.begin() + n * 64);
  Graph<double> g;
  CHECK(total_loss(g, same, Tensor<double>(Array<double>(Shape{6, 4, 4, 4})), nullptr, {}, LossWeights{}).total.item() ==
        doctest::Approx(0.0).epsilon(1e-14));

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng r(seed);
    const auto images = smooth_array(r, {3, 4, 5, 4}, 2.0);
    const auto u = random_array(r, {9, 4, 5, 4}, -1, 1);
    const auto seams = random_seams(r, u.shape, {4, 5, 4});
    LossWeights w;
    w.alpha = 0.1;
    w.displacement_cap = 2.5;
    Graph<double> g2;
    const auto t = total_loss(g2, images, Tensor<double>(u), nullptr, seams, w);
    CHECK(t.total.item() == doctest::Approx(t.dissimilarity + w.lambda0 * t.smoothness + w.lambda1 * t.cyclic).epsilon(1e-12));
    w.lambda0 = w.lambda1 = 0;
    Graph<double> g3;
    CHECK(total_loss(g3, images, Tensor<double>(u), nullptr, seams, w).total.item() == t.dissimilarity);
  }
}

TEST_CASE("total loss gradient with detached positions") {
  // The reference loss re-evaluates D and R directly and C at the positions
  // recorded from the unperturbed fields, which is the quantity the analytic
  // gradient differentiates.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(300 + seed);
    const int n = 2 + static_cast<int>(seed % 3);
    const Shape s{3 * n, 4, 4, 5};
    const auto images = smooth_array(rng, {n, 4, 4, 5}, 3.0);
    // |u| < 0.9 keeps samples off the clamp boundary, where the warp has a kink.
    const auto u0 = random_array(rng, s, -0.9, 0.9);
    const auto seams = random_seams(rng, s, {5, 4, 4});
    const Mask m = random_mask(rng, {1, 4, 4, 5}, 0.8);
    LossWeights w;
    w.alpha = 0.1;
    w.displacement_cap = 1.0;
    w.lambda0 = 0.3;
    w.lambda1 = 0.5;
    Tensor<double> u(u0, true);
    Graph<double> g;
    const auto t = total_loss(g, images, u, &m, seams, w);
    g.backward(t.total);
    const std::vector<double> analytic = u.grad();
    std::vector<Array<double>> fields;
    for (int k = 0; k < n; ++k) fields.push_back(channel_slice(u0, 3 * k, 3));
    const auto pos = trajectory_positions(std::span<const Array<double>>(fields), 0);
    const auto f = [&](const Array<double>& x) {
      Graph<double> gg;
      const double d = dissimilarity(gg, images, Tensor<double>(x), &m).value.item();
      const double r = smoothness(gg, Tensor<double>(x), seams, w.alpha, w.displacement_cap).item();
      return d + w.lambda0 * r + w.lambda1 * cyclic_at_positions(x, pos, w.displacement_cap);
    };
    std::vector<double> numeric(analytic.size());
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      Array<double> p = u0, q = u0;
      p.values[i] += 1e-5;
      q.values[i] -= 1e-5;
      numeric[i] = (f(p) - f(q)) / 2e-5;
    }
    INFO("seed " << seed);
    CHECK(relative_error(analytic, numeric) < 1e-4);
  }
}

TEST_CASE("loss trace csv") {
  const auto path = std::filesystem::temp_directory_path() / "pulsereg_loss_trace.csv";
  const std::vector<LossRecord> trace{{0, 0.5, 0.1, 0.2, 0.8}, {1, 0.25, 0.1, 0.2, 0.55}};
  write_loss_csv(path, trace);
  std::ifstream is(path);
  std::string header, first;
  std::getline(is, header);
  std::getline(is, first);
  CHECK(header == "iteration,dissimilarity,smoothness,cyclic,total");
  CHECK(first == "0,0.5,0.1,0.2,0.8");
  std::filesystem::remove(path);
}
