#include <cmath>

#include "doctest.h"
#include "pulsereg/metrics.hpp"
#include "testing.hpp"

using namespace pulsereg;
using namespace pulsereg::testing;

namespace {

FieldSet<double> constant_fields(Extent3 dims, const std::vector<Vec3>& c, Vec3 spacing = {1, 1, 1}) {
  FieldSet<double> fs;
  fs.grid.dims = dims;
  fs.grid.spacing = spacing;
  for (const Vec3& v : c) {
    Array<double> f(Shape{3, dims.z, dims.y, dims.x});
    const auto n = f.voxels();
    for (int k = 0; k < 3; ++k)
      for (std::int64_t i = 0; i < n; ++i) f.values[k * n + i] = v[k];
    fs.fields.push_back(std::move(f));
  }
  return fs;
}

Mask box(Shape s, Extent3 lo, Extent3 hi) {
  Mask m(std::move(s), 0);
  for (std::int64_t z = lo.z; z < hi.z; ++z)
    for (std::int64_t y = lo.y; y < hi.y; ++y)
      for (std::int64_t x = lo.x; x < hi.x; ++x) m(0, z, y, x) = 1;
  return m;
}


}  // namespace

TEST_CASE("tre examples") {
  const std::vector<Vec3> a{{0, 0, 0}, {1, 2, 3}}, b{{3, 4, 0}, {1, 2, 3}};
  const auto s = tre(a, b);
  CHECK(s.mean == doctest::Approx(2.5));
  CHECK(s.std == doctest::Approx(2.5));
  CHECK(s.max == 5.0);
  CHECK(tre(a, a).mean == 0.0);
  CHECK(tre(a, a).std == 0.0);
  CHECK(tre(a, b).mean == tre(b, a).mean);
  CHECK_THROWS_AS(tre(a, std::vector<Vec3>{{0, 0, 0}}), InvalidArgument);
  const std::vector<Vec3> p{{0, 0, 0}}, q{{3, 4, 0}};
  CHECK(tre(p, q).mean == 5.0);
}

TEST_CASE("dice examples") {
  const Shape s{1, 4, 4, 6};
  const Mask a = box(s, {0, 0, 0}, {2, 2, 2}), b = box(s, {1, 0, 0}, {3, 2, 2}), far = box(s, {4, 2, 2}, {6, 4, 4});
  CHECK(dice(a, a).value == 1.0);
  CHECK(dice(a, far).value == 0.0);
  CHECK(dice(a, b).value == 0.5);
  CHECK(dice(a, b).value == dice(b, a).value);
  const auto e = dice(Mask(s, 0), Mask(s, 0));
  CHECK(e.value == 1.0);
  CHECK(e.both_empty);
  CHECK_THROWS_AS(dice(a, Mask(Shape{1, 4, 4, 5}, 0)), InvalidArgument);
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const Mask x = random_mask(rng, s, 0.3), y = random_mask(rng, s, 0.3);
    CHECK((dice(x, y).value == 1.0) == (x.values == y.values));
  }
}

TEST_CASE("surface distance examples") {
  const Shape s{1, 3, 3, 8};
  Mask a(s, 0), b(s, 0);
  a(0, 1, 1, 1) = 1;
  b(0, 1, 1, 5) = 1;
  const auto d = surface_distance(a, b, {1, 1, 1});
  CHECK(d.hausdorff == 4.0);
  CHECK(d.assd == 4.0);
  const auto self = surface_distance(a, a, {1, 1, 1});
  CHECK(self.hausdorff == 0.0);
  CHECK(self.assd == 0.0);
  CHECK_THROWS_AS(surface_distance(a, Mask(s, 0), {1, 1, 1}), InvalidArgument);
  const auto scaled = surface_distance(a, b, {0.5, 2, 2});
  CHECK(scaled.hausdorff == 2.0);
}

TEST_CASE("surface distance matches all-pairs brute force") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    const Mask a = blob(rng, 10), b = blob(rng, 10);
    const Vec3 spacing{rng.uniform(0.5, 2), rng.uniform(0.5, 2), rng.uniform(0.5, 2)};
    const auto got = surface_distance(a, b, spacing);
    const auto ref = naive_surface_distance(a, b, spacing);
    CHECK(std::abs(got.hausdorff - ref.hausdorff) <= 1e-9 * std::max(1.0, ref.hausdorff));
    CHECK(std::abs(got.assd - ref.assd) <= 1e-9 * std::max(1.0, ref.assd));
    const auto rev = surface_distance(b, a, spacing);
    CHECK(rev.hausdorff == doctest::Approx(got.hausdorff).epsilon(1e-12));
    CHECK(rev.assd == doctest::Approx(got.assd).epsilon(1e-12));
  }
}

TEST_CASE("distance transform matches brute force") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(50 + seed);
    const Mask seeds = random_mask(rng, {1, 5, 6, 7}, 0.05 + 0.1 * rng.uniform());
    const Vec3 sp{rng.uniform(0.5, 2), rng.uniform(0.5, 2), rng.uniform(0.5, 2)};
    const auto dt = distance_transform(seeds, sp);
    for (std::int64_t z = 0; z < 5; ++z)
      for (std::int64_t y = 0; y < 6; ++y)
        for (std::int64_t x = 0; x < 7; ++x) {
          double best = std::numeric_limits<double>::infinity();
          for (std::int64_t zz = 0; zz < 5; ++zz)
            for (std::int64_t yy = 0; yy < 6; ++yy)
              for (std::int64_t xx = 0; xx < 7; ++xx)
                if (seeds(0, zz, yy, xx))
                  best = std::min(best, Vec3{(x - xx) * sp.x, (y - yy) * sp.y, (z - zz) * sp.z}.norm());
          if (std::isinf(best)) CHECK(std::isinf(dt(0, z, y, x)));
          else CHECK(std::abs(dt(0, z, y, x) - best) <= 1e-9 * std::max(1.0, best));
        }
  }
}

TEST_CASE("jacobian examples") {
  const auto zero = jacobian_stats(Array<double>(Shape{3, 5, 5, 5}));
  CHECK(zero.interior.mean == 1.0);
  CHECK(zero.interior.std == 0.0);
  CHECK(zero.fof_percent == 0.0);

  Array<double> lin(Shape{3, 6, 7, 8});
  for (std::int64_t z = 0; z < 6; ++z)
    for (std::int64_t y = 0; y < 7; ++y)
      for (std::int64_t x = 0; x < 8; ++x) {
        lin(0, z, y, x) = 0.1 * x;
        lin(1, z, y, x) = 0.1 * y;
        lin(2, z, y, x) = 0.1 * z;
      }
  const auto det = jacobian_determinant(lin);
  for (std::int64_t z = 1; z < 5; ++z)
    for (std::int64_t y = 1; y < 6; ++y)
      for (std::int64_t x = 1; x < 7; ++x) CHECK(std::abs(det(0, z, y, x) - 1.331) < 1e-12);

  Rng rng(2);
  const auto t = constant_fields({5, 6, 7}, {{rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)}, {0, 0, 0}});
  const auto js = jacobian_stats(t.fields[0]);
  CHECK(js.interior.mean == 1.0);
  CHECK(js.border.mean == 1.0);
  CHECK(js.fof_percent == 0.0);

  // A reflected axis folds everywhere.
  Array<double> flip(Shape{3, 4, 4, 4});
  for (std::int64_t z = 0; z < 4; ++z)
    for (std::int64_t y = 0; y < 4; ++y)
      for (std::int64_t x = 0; x < 4; ++x) flip(0, z, y, x) = -2.0 * x;
  const auto fs = jacobian_stats(flip);
  CHECK(fs.fof_percent == 100.0);
  CHECK(fs.folded == 8);
  CHECK(fs.border_fof_percent == 100.0);
}

TEST_CASE("jacobian matches independent cofactor expansion") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const auto u = smooth_array(rng, {3, 5, 6, 7}, 4.0);
    const auto det = jacobian_determinant(u);
    for (std::int64_t z = 0; z < 5; ++z)
      for (std::int64_t y = 0; y < 6; ++y)
        for (std::int64_t x = 0; x < 7; ++x) {
          const double ref = naive_jacobian_det(u, z, y, x);
          CHECK(std::abs(det(0, z, y, x) - ref) <= 1e-12 * std::max(1.0, std::abs(ref)));
        }
  }
}

TEST_CASE("jacobian summary splits interior and border") {
  Array<double> det(Shape{1, 3, 3, 3}, 2.0);
  det(0, 1, 1, 1) = -1.0;
  const auto s = jacobian_summary(det);
  CHECK(s.interior.count == 1);
  CHECK(s.interior.mean == -1.0);
  CHECK(s.fof_percent == 100.0);
  CHECK(s.border.count == 26);
  CHECK(s.border_fof_percent == 0.0);
}

TEST_CASE("mask and landmark transport") {
  const Extent3 dims{10, 8, 8};
  const Shape s{1, 8, 8, 10};
  const auto fs = constant_fields(dims, {{2, 0, 0}, {-2, 0, 0}});
  const Mask m = box(s, {2, 2, 2}, {5, 5, 5});
  const Mask moved = transport_mask(fs, m, 0, 1);
  CHECK(moved.values == box(s, {4, 2, 2}, {7, 5, 5}).values);
  CHECK(transport_mask(fs, m, 0, 0).values == m.values);
  const std::vector<Vec3> pts{{3, 3, 3}};
  CHECK(transport_landmarks(fs, pts, 0, 1)[0].x == doctest::Approx(5.0));
  CHECK(transport_landmarks(fs, pts, 0, 0)[0].x == doctest::Approx(3.0));
}

TEST_CASE("eval4d examples") {
  const Extent3 dims{8, 8, 8};
  const Shape s{1, 8, 8, 8};
  const std::vector<Vec3> lm{{2, 3, 4}, {5, 5, 5}, {3.5, 2.5, 4.5}};
  SUBCASE("zero fields with identical annotations") {
    const auto fs = constant_fields(dims, {{}, {}, {}, {}});
    PhaseAnnotations ann;
    const Mask m = box(s, {2, 2, 2}, {6, 6, 6});
    for (int p = 0; p < 4; ++p) {
      ann.landmarks.push_back(lm);
      ann.masks.push_back(m);
    }
    const auto e = eval4d(fs, ann);
    CHECK(e.entries.size() == 16);
    for (const auto& en : e.entries) {
      CHECK(en.tre->mean == 0.0);
      CHECK(en.masks->dice == 1.0);
      CHECK(en.masks->hausdorff == 0.0);
    }
    REQUIRE(e.landmark_curve.size() == 4);
    for (const auto& c : e.landmark_curve) {
      CHECK(c.mean == 0.0);
      CHECK(c.entries == 12);
    }
  }
  SUBCASE("closed constant fields score the full cycle as perfect") {
    const auto fs = constant_fields(dims, {{1, 0, 0}, {0.5, 0.5, 0}, {-1, 0, 0}, {-0.5, -0.5, 0}});
    PhaseAnnotations ann;
    ann.landmarks.resize(4);
    ann.landmarks[0] = lm;
    const auto e = eval4d(fs, ann);
    REQUIRE(e.entries.size() == 1);
    CHECK(e.entries[0].offset == 4);
    CHECK(e.entries[0].tre->mean < 1e-6);
  }
  SUBCASE("partially annotated") {
    const auto fs = constant_fields(dims, {{1, 0, 0}, {-1, 0, 0}, {0, 0, 0}});
    PhaseAnnotations ann;
    ann.landmarks = {lm, std::nullopt, lm};
    const auto e = eval4d(fs, ann);
    // Phase 0 -> {2, 0}; phase 2 -> {0, 2}.
    CHECK(e.entries.size() == 4);
  }
}

TEST_CASE("inverse consistency") {
  const Extent3 dims{12, 12, 12};
  const std::vector<Vec3> lm{{4, 5, 6}, {6, 6, 6}, {7.5, 4.5, 5}};
  SUBCASE("exact inverse constants") {
    const auto fs = constant_fields(dims, {{1.5, -1, 0.5}, {-1.5, 1, -0.5}});
    PhaseAnnotations ann;
    ann.landmarks = {lm, lm};
    const auto ic = inverse_consistency_3d(fs, ann);
    REQUIRE(ic.directions.size() == 2);
    CHECK(*ic.mean_tre < 1e-12);
  }
  SUBCASE("constructed closure defect") {
    const Vec3 delta{0.3, -0.2, 0.6};
    const auto fs = constant_fields(dims, {{1.5, -1, 0.5}, Vec3{-1.5, 1, -0.5} + delta});
    PhaseAnnotations ann;
    ann.landmarks = {lm, std::nullopt};
    const auto ic = inverse_consistency_3d(fs, ann);
    REQUIRE(ic.directions.size() == 1);
    CHECK(std::abs(ic.directions[0].tre->mean - delta.norm()) < 0.1);
    CHECK(ic.notices.size() == 1);
  }
  SUBCASE("needs two phases") {
    PhaseAnnotations ann;
    CHECK_THROWS_AS(inverse_consistency_3d(constant_fields(dims, {{}, {}, {}}), ann), InvalidArgument);
  }
}
