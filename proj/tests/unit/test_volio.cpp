#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "doctest.h"
#include "pulsereg/config_file.hpp"
#include "pulsereg/landmarks.hpp"
#include "pulsereg/metaimage.hpp"
#include "pulsereg/metrics.hpp"
#include "pulsereg/phantom.hpp"
#include "testing.hpp"

using namespace pulsereg;
using namespace pulsereg::testing;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("pulsereg_volio_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  fs::path operator/(const std::string& name) const { return path / name; }
};

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary);
  os << s;
}

std::string header(const std::string& dims, const std::string& type, const std::string& extra = "") {
  return "ObjectType = Image\nNDims = 3\nDimSize = " + dims + "\nElementSpacing = 1 1 1\n" + extra +
         "ElementType = " + type + "\nElementDataFile = LOCAL\n";
}

}  // namespace

TEST_CASE("metaimage round trip keeps values, grid and channels") {
  TempDir dir;
  Rng rng(3);
  for (const char* ext : {".mha", ".mhd"}) {
    Array<double> src = random_array(rng, Shape{2, 3, 4, 5}, -100, 100);
    Array<float> data = src.cast<float>();
    VolumeHeader h;
    h.grid.spacing = {0.7, 1.25, 2.5};
    h.grid.origin = {-10.5, 3.0, 7.125};
    const fs::path p = dir / (std::string("v") + ext);
    write_volume(p, data, h);
    const MetaVolume mv = read_volume(p);
    CHECK(mv.header.channels == 2);
    CHECK(mv.header.grid.dims == Extent3{5, 4, 3});
    CHECK(mv.header.grid.spacing.y == 1.25);
    CHECK(mv.header.grid.origin.z == 7.125);
    CHECK(mv.data.shape == data.shape);
    CHECK(mv.data.values == data.values);
    if (std::string(ext) == ".mhd") CHECK(fs::exists(dir / "v.raw"));
  }
}

TEST_CASE("metaimage integer types round trip and reject unrepresentable values") {
  TempDir dir;
  Array<float> a(Shape{1, 2, 2, 2});
  for (std::size_t i = 0; i < a.values.size(); ++i) a.values[i] = static_cast<float>(i * 37) - 100.0f;
  VolumeHeader h;
  h.type = ElementType::Short;
  h.big_endian = true;
  write_volume(dir / "s.mha", a, h);
  CHECK(read_volume(dir / "s.mha").data.values == a.values);
  a.values[0] = 0.5f;
  CHECK_THROWS_AS(write_volume(dir / "bad.mha", a, h), InvalidArgument);
  a.values[0] = 40000.0f;
  CHECK_THROWS_AS(write_volume(dir / "bad.mha", a, h), InvalidArgument);
}

TEST_CASE("metaimage big-endian shorts match a manual byte swap") {
  TempDir dir;
  const std::int16_t values[] = {1, -2, 300, -32768, 32767, 0, 258, -513};
  std::string payload;
  for (const auto v : values) {
    const auto u = static_cast<std::uint16_t>(v);
    payload.push_back(static_cast<char>(u >> 8));
    payload.push_back(static_cast<char>(u & 0xff));
  }
  write_text(dir / "be.mha", header("2 2 2", "MET_SHORT", "ElementByteOrderMSB = True\n") + payload);
  const MetaVolume mv = read_volume(dir / "be.mha");
  for (int i = 0; i < 8; ++i) CHECK(mv.data.values[i] == static_cast<float>(values[i]));
}

TEST_CASE("metaimage payload length must match the header") {
  TempDir dir;
  const std::string body(8 * 4, '\0');
  write_text(dir / "ok.mha", header("2 2 2", "MET_FLOAT") + body);
  CHECK_NOTHROW(read_volume(dir / "ok.mha"));
  write_text(dir / "short.mha", header("2 2 2", "MET_FLOAT") + body.substr(1));
  CHECK_THROWS_AS(read_volume(dir / "short.mha"), IoError);
  write_text(dir / "long.mha", header("2 2 2", "MET_FLOAT") + body + "x");
  CHECK_THROWS_AS(read_volume(dir / "long.mha"), IoError);
}

TEST_CASE("metaimage header problems") {
  TempDir dir;
  const std::string body(8, '\0');
  SUBCASE("unknown keys warn but load") {
    write_text(dir / "u.mha", header("2 2 2", "MET_UCHAR", "Frobnicate = 7\n") + body);
    const MetaVolume mv = read_volume(dir / "u.mha");
    REQUIRE(mv.header.warnings.size() == 1);
    CHECK(mv.header.warnings[0].find("Frobnicate") != std::string::npos);
  }
  SUBCASE("missing mandatory key") {
    write_text(dir / "m.mha", "NDims = 3\nElementType = MET_UCHAR\nElementDataFile = LOCAL\n" + body);
    CHECK_THROWS_WITH_AS(read_volume(dir / "m.mha"), doctest::Contains("DimSize"), IoError);
  }
  SUBCASE("unsupported element type") {
    write_text(dir / "t.mha", header("2 2 2", "MET_DOUBLE") + std::string(64, '\0'));
    CHECK_THROWS_WITH_AS(read_volume(dir / "t.mha"), doctest::Contains("MET_DOUBLE"), IoError);
  }
  SUBCASE("two dimensions") {
    write_text(dir / "n.mha", "NDims = 2\nDimSize = 2 2\nElementType = MET_UCHAR\nElementDataFile = LOCAL\n" +
                                  std::string(4, '\0'));
    CHECK_THROWS_AS(read_volume(dir / "n.mha"), IoError);
  }
  SUBCASE("compressed") {
    write_text(dir / "c.mha", header("2 2 2", "MET_UCHAR", "CompressedData = True\n") + body);
    CHECK_THROWS_WITH_AS(read_volume(dir / "c.mha"), doctest::Contains("compressed"), IoError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(read_volume(dir / "nope.mha"), IoError); }
  SUBCASE("bad extension on write") {
    CHECK_THROWS_AS(write_volume(dir / "x.nii", Array<float>(Shape{1, 1, 1, 1}), VolumeHeader{}), InvalidArgument);
  }
}

TEST_CASE("fields keep units and convert to voxels") {
  TempDir dir;
  Rng rng(8);
  const Array<float> f = random_array(rng, Shape{3, 2, 3, 4}, -2, 2).cast<float>();
  Grid g;
  g.dims = {4, 3, 2};
  g.spacing = {0.5, 2.0, 4.0};
  write_field(dir / "mm.mha", f, g, DisplacementUnits::Millimeter);
  const FieldFile ff = read_field(dir / "mm.mha");
  CHECK(ff.units == DisplacementUnits::Millimeter);
  CHECK(ff.field.values == f.values);
  const Array<float> v = field_to_voxels(ff);
  const auto n = v.voxels();
  for (int c = 0; c < 3; ++c)
    for (std::int64_t i = 0; i < n; ++i)
      CHECK(v.values[c * n + i] == doctest::Approx(f.values[c * n + i] / g.spacing[c]).epsilon(1e-6));
  write_field(dir / "vox.mha", f, g, DisplacementUnits::Voxel);
  CHECK(field_to_voxels(read_field(dir / "vox.mha")).values == f.values);
  write_mask(dir / "one.mha", Mask(Shape{1, 2, 3, 4}, 1), g);
  CHECK_THROWS_WITH_AS(read_field(dir / "one.mha"), doctest::Contains("3 channels"), IoError);
}

TEST_CASE("mask round trip binarizes") {
  TempDir dir;
  Rng rng(4);
  const Mask m = random_mask(rng, Shape{1, 5, 6, 7}, 0.3);
  Grid g;
  g.dims = {7, 6, 5};
  write_mask(dir / "m.mha", m, g);
  Grid back;
  CHECK(read_mask(dir / "m.mha", &back).values == m.values);
  CHECK(back == g);
  Array<float> soft(Shape{1, 1, 1, 3});
  soft.values = {0.0f, 0.25f, -3.0f};
  write_volume(dir / "soft.mha", soft, VolumeHeader{});
  CHECK(read_mask(dir / "soft.mha").values == std::vector<std::uint8_t>{0, 1, 1});
}

TEST_CASE("landmarks: voxel coordinates go through the grid") {
  TempDir dir;
  Grid g;
  g.dims = {10, 10, 10};
  g.spacing = {2.0, 3.0, 0.5};
  g.origin = {1.0, -1.0, 4.0};
  write_text(dir / "v.txt", "# space: voxel\n1 2 3\n0, 0, 0\n");
  const LandmarkSet s = read_landmarks(dir / "v.txt", std::nullopt, g);
  CHECK(s.source_space == CoordinateSpace::Voxel);
  REQUIRE(s.points.size() == 2);
  CHECK(s.points[0].x == 3.0);
  CHECK(s.points[0].y == 5.0);
  CHECK(s.points[0].z == 5.5);
  CHECK(s.points[1].x == 1.0);

  write_text(dir / "b1.txt", "# space: voxel\n# base: 1\n2 3 4\n");
  const LandmarkSet one = read_landmarks(dir / "b1.txt", std::nullopt, g);
  CHECK(one.points[0].x == s.points[0].x);
  CHECK(one.points[0].z == s.points[0].z);

  write_text(dir / "mm.txt", "1.5 -2 7\n");
  const LandmarkSet mm = read_landmarks(dir / "mm.txt", CoordinateSpace::Millimeter, g);
  CHECK(mm.points[0].y == -2.0);
  CHECK_THROWS_AS(read_landmarks(dir / "mm.txt", std::nullopt, g), InvalidArgument);
}

TEST_CASE("landmark errors carry the line number") {
  TempDir dir;
  const Grid g;
  write_text(dir / "a.txt", "# space: mm\n1 2 3\n\n4 5\n");
  CHECK_THROWS_WITH_AS(read_landmarks(dir / "a.txt", std::nullopt, g), doctest::Contains("a.txt:4"), IoError);
  write_text(dir / "b.txt", "1 2 3 4\n");
  CHECK_THROWS_WITH_AS(read_landmarks(dir / "b.txt", CoordinateSpace::Millimeter, g), doctest::Contains(":1:"), IoError);
  write_text(dir / "c.txt", "1 2 x\n");
  CHECK_THROWS_AS(read_landmarks(dir / "c.txt", CoordinateSpace::Millimeter, g), IoError);
  write_text(dir / "d.txt", "# space: furlongs\n");
  CHECK_THROWS_AS(read_landmarks(dir / "d.txt", std::nullopt, g), IoError);
}

TEST_CASE("landmark count equals the number of data lines, round trip exact") {
  TempDir dir;
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Vec3> pts;
    const int n = static_cast<int>(rng.uniform(0, 30));
    for (int i = 0; i < n; ++i) pts.push_back({rng.uniform(-100, 100), rng.uniform(-100, 100), rng.uniform(-100, 100)});
    write_landmarks(dir / "p.txt", pts);
    const LandmarkSet s = read_landmarks(dir / "p.txt", std::nullopt, Grid{});
    REQUIRE(s.points.size() == pts.size());
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < 3; ++k) CHECK(s.points[i][k] == pts[i][k]);
  }
}

TEST_CASE("phantom with zero amplitude has identical phases") {
  PhantomSpec spec;
  spec.size = {16, 16, 16};
  spec.amplitude = 0;
  spec.landmarks = 10;
  const Phantom ph = generate_phantom(spec);
  const auto v = ph.volumes.images.voxels();
  for (int p = 1; p < spec.phases; ++p)
    for (std::int64_t i = 0; i < v; ++i) REQUIRE(ph.volumes.images.values[p * v + i] == ph.volumes.images.values[i]);
  for (const auto& f : ph.truth.fields)
    for (const double x : f.values) REQUIRE(x == 0.0);
}

TEST_CASE("phantom motion model closes and inverts") {
  const PhantomMotion m({20, 21, 19.5}, 12.0, 0.2, 4);
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    const Vec3 x{rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(0, 40)};
    for (int p = 0; p < 4; ++p) {
      CHECK((m.forward(p, m.inverse(p, x)) - x).norm() < 1e-9);
    }
    Vec3 walk = x;
    for (int p = 0; p < 4; ++p) walk = walk + m.displacement(p, walk);
    CHECK((walk - x).norm() < 1e-10);
  }
  CHECK(m.scale(0) == 0.0);
  CHECK(m.scale(1) == doctest::Approx(0.2));
  CHECK(m.scale(3) == doctest::Approx(-0.2));
  CHECK_THROWS_AS(PhantomMotion({0, 0, 0}, 1, 0.5, 4), InvalidArgument);
  const PhantomMotion pair({0, 0, 0}, 10.0, 0.1, 2);
  CHECK(pair.scale(1) == 0.1);
  CHECK((pair.forward(1, {10, 0, 0}) - Vec3{11, 0, 0}).norm() < 1e-12);
}

TEST_CASE("phantom ground truth") {
  PhantomSpec spec;
  spec.size = {32, 32, 32};
  spec.amplitude = 0.1 * 12.8;
  spec.landmarks = 30;
  const Phantom ph = generate_phantom(spec);
  const Vec3 c = spec.resolved_center();
  const double r0 = spec.resolved_radius();
  CHECK(r0 == doctest::Approx(12.8));

  // Phase 1 has the largest expansion: surface landmarks sit at (1 + a) r0.
  for (const Vec3& p : ph.landmarks[1]) CHECK((p - c).norm() == doctest::Approx(1.1 * r0).epsilon(1e-12));
  for (const Vec3& p : ph.landmarks[0]) CHECK((p - c).norm() == doctest::Approx(r0).epsilon(1e-12));

  // Fields chain landmarks phase to phase and close over the cycle.
  for (int p = 0; p < spec.phases; ++p) {
    const int q = (p + 1) % spec.phases;
    for (std::size_t k = 0; k < ph.landmarks[p].size(); ++k) {
      const Vec3 x = ph.landmarks[p][k];
      CHECK((x + ph.motion.displacement(p, x) - ph.landmarks[q][k]).norm() < 1e-9);
    }
  }
  const Array<double> closure = closure_defect(ph.truth, 0);
  const auto v = closure.voxels();
  const Mask& fg = ph.masks[0];
  double worst = 0;
  for (std::int64_t i = 0; i < v; ++i) {
    if (!fg.values[i]) continue;
    const Vec3 d{closure.values[i], closure.values[v + i], closure.values[2 * v + i]};
    worst = std::max(worst, d.norm());
  }
  // Sampled fields: closure is limited by trilinear interpolation of a smooth map.
  CHECK(worst < 0.05);

  // The exterior flow is volume preserving, the sphere scales uniformly, so the
  // interior mean is 1 + (ratio^3 - 1) * sphere fraction of the interior block.
  for (int p = 0; p < spec.phases; ++p) {
    const JacobianStats js = jacobian_stats(ph.truth.fields[p]);
    CHECK(js.fof_percent == 0.0);
    const double grow = (1 + ph.motion.scale(p + 1)) / (1 + ph.motion.scale(p));
    const double radius = r0 * (1 + ph.motion.scale(p));
    const double fraction = 4.0 / 3.0 * 3.14159265358979 * radius * radius * radius / (30.0 * 30.0 * 30.0);
    CHECK(js.interior.mean == doctest::Approx(1 + (grow * grow * grow - 1) * fraction).epsilon(0.01));
  }
  const auto& m0 = ph.masks[0];
  std::int64_t count = 0;
  for (const auto b : m0.values) count += b;
  CHECK(static_cast<double>(count) == doctest::Approx(4.0 / 3.0 * 3.14159265 * r0 * r0 * r0).epsilon(0.05));
}

TEST_CASE("phantom spec validation") {
  PhantomSpec s;
  s.phases = 1;
  CHECK_THROWS_AS(generate_phantom(s), InvalidArgument);
  s = {};
  s.amplitude = s.resolved_radius();
  CHECK_THROWS_WITH_AS(generate_phantom(s), doctest::Contains("radius / 2"), InvalidArgument);
  s = {};
  s.size = {3, 64, 64};
  CHECK_THROWS_AS(generate_phantom(s), InvalidArgument);
}

TEST_CASE("config files") {
  const ConfigMap m = parse_config("# comment\npatch = 48\n\nlearning_rate = 0.003  # trailing\nmask = auto\n");
  CHECK(m.at("patch").value == "48");
  CHECK(m.at("learning_rate").line == 4);
  RunSettings s;
  apply_config(m, s);
  CHECK(s.pipeline.patch == 48);
  CHECK(s.pipeline.adam.learning_rate == 0.003);
  CHECK(s.mask == "auto");

  CHECK_THROWS_WITH_AS(parse_config("a = 1\nb\n", "f.cfg"), doctest::Contains("f.cfg:2"), InvalidArgument);
  CHECK_THROWS_WITH_AS(parse_config("a = 1\na = 2\n"), doctest::Contains("duplicate"), InvalidArgument);
  RunSettings t;
  CHECK_THROWS_WITH_AS(apply_config(parse_config("colour = red\n"), t), doctest::Contains("unknown key"),
                       InvalidArgument);
  CHECK_THROWS_WITH_AS(apply_config(parse_config("\npatch = big\n"), t), doctest::Contains(":2:"), InvalidArgument);
  CHECK_THROWS_AS(apply_config(parse_config("precision = half\n"), t), InvalidArgument);
  CHECK_THROWS_WITH_AS(apply_config(parse_config("levels = 0\n"), t), doctest::Contains("levels"), InvalidArgument);
  RunSettings u;
  u.resample_mm = 2.0;
  apply_config(parse_config("resample = none\n"), u);
  CHECK_FALSE(u.resample_mm.has_value());
}
