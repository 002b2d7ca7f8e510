#include "commands.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pulsereg/config_file.hpp"
#include "pulsereg/error.hpp"
#include "pulsereg/landmarks.hpp"
#include "pulsereg/metaimage.hpp"
#include "pulsereg/metrics.hpp"
#include "pulsereg/phantom.hpp"
#include "pulsereg/pipeline.hpp"

#ifndef PULSEREG_VERSION
#define PULSEREG_VERSION "unknown"
#endif

namespace pulsereg::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
  if (!os) throw IoError("failed writing " + path.string());
}

void make_out_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

// The manifest goes to disk before any work and is completed afterwards, so an
// interrupted run still says what it was doing.
class Manifest {
 public:
  Manifest(fs::path dir, std::string subcommand, const std::vector<std::string>& command_line) : path_(dir / "manifest.json") {
    doc_["subcommand"] = std::move(subcommand);
    doc_["tool_version"] = PULSEREG_VERSION;
    doc_["command_line"] = command_line;
    doc_["output_dir"] = fs::absolute(dir).string();
    doc_["started"] = utc_now();
    doc_["status"] = "running";
  }
  json& operator[](const char* key) { return doc_[key]; }
  void write() const { write_json(path_, doc_); }
  void finish(const std::string& status) {
    doc_["status"] = status;
    doc_["finished"] = utc_now();
    write();
  }

 private:
  fs::path path_;
  json doc_;
};

json grid_json(const Grid& g) {
  return {{"dims", {g.dims.x, g.dims.y, g.dims.z}},
          {"spacing", {g.spacing.x, g.spacing.y, g.spacing.z}},
          {"origin", {g.origin.x, g.origin.y, g.origin.z}}};
}

json stats_json(const Stats& s) { return {{"mean", s.mean}, {"std", s.std}, {"max", s.max}, {"count", s.count}}; }

json jacobian_json(const JacobianStats& j) {
  return {{"interior", stats_json(j.interior)},
          {"fof_percent", j.fof_percent},
          {"folded", j.folded},
          {"border", stats_json(j.border)},
          {"border_fof_percent", j.border_fof_percent}};
}

json loss_json(const LossRecord& r) {
  return {{"iteration", r.iteration},
          {"dissimilarity", r.dissimilarity},
          {"smoothness", r.smoothness},
          {"cyclic", r.cyclic},
          {"total", r.total}};
}

json pipeline_json(const RunSettings& s) {
  const auto& p = s.pipeline;
  return {{"patch", p.patch},
          {"levels", p.levels},
          {"eps", p.eps},
          {"window", p.window},
          {"max_iterations", p.max_iterations},
          {"learning_rate", p.adam.learning_rate},
          {"lambda0", p.weights.lambda0},
          {"lambda1", p.weights.lambda1},
          {"alpha", p.weights.alpha},
          {"coarse_alpha", p.coarse_alpha},
          {"base_channels", p.network.base_channels},
          {"encoder_convs", p.network.convs_per_encoder_block},
          {"decoder_convs", p.network.convs_per_decoder_block},
          {"seed", p.seed},
          {"threads", p.threads},
          {"precision", s.precision},
          {"mask", s.mask},
          {"resample", s.resample_mm ? json(*s.resample_mm) : json("none")}};
}

std::string two_digits(int i) {
  std::ostringstream os;
  os << std::setw(2) << std::setfill('0') << i;
  return os.str();
}

std::vector<fs::path> resolve_phase_list(const std::vector<std::string>& items) {
  if (items.size() == 1 && fs::path(items[0]).extension() == ".txt") {
    const fs::path list = items[0];
    std::ifstream is(list);
    if (!is) throw IoError("cannot open phase list " + list.string());
    std::vector<fs::path> out;
    for (std::string line; std::getline(is, line);) {
      const auto b = line.find_first_not_of(" \t\r");
      if (b == std::string::npos || line[b] == '#') continue;
      const auto e = line.find_last_not_of(" \t\r");
      fs::path p = line.substr(b, e - b + 1);
      out.push_back(p.is_absolute() ? p : list.parent_path() / p);
    }
    return out;
  }
  return {items.begin(), items.end()};
}

Volume4D read_phases(const std::vector<fs::path>& paths) {
  if (paths.size() < 2) throw InvalidArgument("--phases needs at least 2 volumes, got " + std::to_string(paths.size()));
  std::vector<Array<float>> images;
  Grid grid;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    MetaVolume mv = read_volume(paths[i]);
    if (mv.header.channels != 1) throw IoError(paths[i].string() + ": phase images must have one channel");
    if (i == 0) grid = mv.header.grid;
    else if (!(mv.header.grid.dims == grid.dims))
      throw InvalidArgument(paths[i].string() + ": extent differs from " + paths[0].string());
    images.push_back(std::move(mv.data));
  }
  Volume4D v = stack_phases(images, grid);
  for (const auto& p : paths) v.sources.push_back(p.string());
  return v;
}

int default_threads() {
  if (const char* env = std::getenv("PULSEREG_THREADS")) {
    const int t = std::atoi(env);
    if (t >= 1) return t;
    spdlog::warn("ignoring PULSEREG_THREADS='{}'", env);
  }
  return 1;
}

RunSettings resolve_settings(const RegisterArgs& a) {
  RunSettings s;
  if (a.config) apply_config(read_config(*a.config), s, a.config->string());
  auto& p = s.pipeline;
  if (a.patch) p.patch = *a.patch;
  if (a.levels) p.levels = *a.levels;
  if (a.mask) s.mask = *a.mask;
  if (a.resample) {
    if (*a.resample == "none") {
      s.resample_mm.reset();
    } else {
      try {
        std::size_t used = 0;
        s.resample_mm = std::stod(*a.resample, &used);
        if (used != a.resample->size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw InvalidArgument("--resample expects 'none' or a voxel size in mm, got '" + *a.resample + "'");
      }
    }
  }
  if (a.seed) p.seed = *a.seed;
  if (a.max_iterations) p.max_iterations = *a.max_iterations;
  if (a.learning_rate) p.adam.learning_rate = *a.learning_rate;
  if (a.alpha) p.weights.alpha = *a.alpha;
  if (a.lambda0) p.weights.lambda0 = *a.lambda0;
  if (a.lambda1) p.weights.lambda1 = *a.lambda1;
  if (a.eps) p.eps = *a.eps;
  if (a.precision) s.precision = *a.precision;
  p.threads = a.deterministic ? 1 : a.threads.value_or(default_threads());

  static const std::set<int> patches{48, 64, 80, 96};
  if (!patches.count(p.patch))
    throw InvalidArgument("patch must be one of 48, 64, 80, 96, got " + std::to_string(p.patch));
  if (p.levels < 1 || p.levels > 3) throw InvalidArgument("levels must be 1, 2 or 3, got " + std::to_string(p.levels));
  if (s.precision != "float" && s.precision != "double")
    throw InvalidArgument("precision must be float or double, got '" + s.precision + "'");
  if (s.resample_mm && !(*s.resample_mm > 0)) throw InvalidArgument("--resample must be > 0 mm");
  p.validate();
  p.network.validate();
  return s;
}

template <typename T>
int run_registration(const Volume4D& raw, const Volume4D& volumes, const RunSettings& s, const fs::path& out,
                     Manifest& manifest) {
  const auto on_patch = [](const PatchReport& r) {
    if (r.skipped) {
      spdlog::debug("x{} patch {}: skipped ({})", r.factor, r.index, r.note);
      return;
    }
    spdlog::info("x{} patch {}: {} iterations, D {:.5f} -> {:.5f}{} ({:.1f} s)", r.factor, r.index, r.iterations,
                 r.first.dissimilarity, r.last.dissimilarity, r.capped ? " [cap]" : "", r.seconds);
  };
  const RegistrationResult<T> result = register_volumes<T>(volumes, s.pipeline, on_patch);

  json report;
  report["phases"] = volumes.phases();
  report["input_grid"] = grid_json(raw.grid);
  report["registration_grid"] = grid_json(volumes.grid);
  report["seconds"] = result.seconds;
  report["diverged"] = result.diverged;
  const fs::path loss_dir = out / "loss";
  make_out_dir(loss_dir);
  json levels = json::array();
  for (const auto& level : result.levels) {
    json lj{{"factor", level.factor},
            {"dims", {level.dims.x, level.dims.y, level.dims.z}},
            {"patch_edge", {level.patch_edge.x, level.patch_edge.y, level.patch_edge.z}},
            {"alpha", level.alpha},
            {"displacement_cap", level.displacement_cap},
            {"seconds", level.seconds}};
    json patches = json::array();
    for (const auto& p : level.patches) {
      json pj{{"index", p.index},
              {"origin", {p.origin.x, p.origin.y, p.origin.z}},
              {"extent", {p.extent.x, p.extent.y, p.extent.z}},
              {"iterations", p.iterations},
              {"converged", p.converged},
              {"capped", p.capped},
              {"skipped", p.skipped},
              {"diverged", p.diverged},
              {"seconds", p.seconds}};
      if (!p.note.empty()) pj["note"] = p.note;
      if (!p.skipped) {
        pj["first"] = loss_json(p.first);
        pj["last"] = loss_json(p.last);
      }
      if (!p.trace.empty()) {
        const std::string name = "x" + std::to_string(level.factor) + "_patch_" + std::to_string(p.index) + ".csv";
        write_loss_csv(loss_dir / name, p.trace);
        pj["loss_csv"] = "loss/" + name;
      }
      patches.push_back(std::move(pj));
    }
    lj["patches"] = std::move(patches);
    levels.push_back(std::move(lj));
  }
  report["levels"] = std::move(levels);

  if (result.diverged) {
    write_json(out / "report.json", report);
    spdlog::error("registration diverged; see report.json for the offending patch");
    manifest.finish("diverged");
    return kDiverged;
  }

  const bool resampled = !(volumes.grid == raw.grid);
  json fields = json::array();
  for (int n = 0; n < volumes.phases(); ++n) {
    Array<T> u = result.fields.fields[static_cast<std::size_t>(n)];
    if (resampled) u = resample_field(u, volumes.grid, raw.grid);
    const Array<float> vox = u.template cast<float>();
    Array<float> mm = vox;
    const auto v = mm.voxels();
    for (int c = 0; c < 3; ++c)
      for (std::int64_t i = 0; i < v; ++i) mm.values[c * v + i] *= static_cast<float>(raw.grid.spacing[c]);
    const std::string stem = "u_" + two_digits(n);
    write_field(out / (stem + "_vox.mha"), vox, raw.grid, DisplacementUnits::Voxel);
    write_field(out / (stem + "_mm.mha"), mm, raw.grid, DisplacementUnits::Millimeter);
    fields.push_back({{"transition", std::to_string(n) + "->" + std::to_string((n + 1) % volumes.phases())},
                      {"voxel", stem + "_vox.mha"},
                      {"mm", stem + "_mm.mha"},
                      {"jacobian", jacobian_json(jacobian_stats(vox))}});
  }
  report["fields"] = std::move(fields);
  write_json(out / "report.json", report);
  manifest.finish("ok");
  return kOk;
}

std::vector<fs::path> find_fields(const fs::path& dir) {
  std::vector<fs::path> out;
  for (int n = 0;; ++n) {
    const fs::path p = dir / ("u_" + two_digits(n) + "_vox.mha");
    if (!fs::exists(p)) break;
    out.push_back(p);
  }
  if (out.size() < 2)
    throw IoError(dir.string() + ": expected field files u_00_vox.mha, u_01_vox.mha, ... (found " +
                  std::to_string(out.size()) + ")");
  return out;
}

bool present(const std::vector<std::string>& items, std::size_t i) { return i < items.size() && items[i] != "-"; }

json mask_scores_json(const MaskScores& m) { return {{"dice", m.dice}, {"hausdorff", m.hausdorff}, {"assd", m.assd}}; }

}  // namespace

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const InvalidArgument& e) {
    spdlog::error("{}", e.what());
    return kInvalidArgs;
  } catch (const IoError& e) {
    spdlog::error("{}", e.what());
    return kIoError;
  } catch (const fs::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return kIoError;
  } catch (const DivergenceError& e) {
    spdlog::error("{}", e.what());
    return kDiverged;
  } catch (const std::exception& e) {
    spdlog::error("unexpected failure: {}", e.what());
    return kFailure;
  }
}

int cmd_register(const RegisterArgs& a) {
  const RunSettings s = resolve_settings(a);
  const auto paths = resolve_phase_list(a.phases);
  make_out_dir(a.out);
  Manifest manifest(a.out, "register", a.command_line);
  json inputs = json::array();
  for (const auto& p : paths) inputs.push_back(p.string());
  manifest["inputs"] = inputs;
  manifest["seed"] = s.pipeline.seed;
  manifest["deterministic"] = a.deterministic;
  manifest["config"] = pipeline_json(s);
  manifest.write();

  const Volume4D raw = read_phases(paths);
  PreprocessOptions po;
  if (s.mask == "auto") {
    po.mask_mode = MaskMode::Auto;
  } else if (s.mask != "none") {
    Grid mg;
    po.mask = read_mask(s.mask, &mg);
    if (!(mg.dims == raw.grid.dims)) throw InvalidArgument("mask extent does not match the phase images");
    po.mask_mode = MaskMode::File;
  }
  po.isotropic_mm = s.resample_mm;
  const Volume4D volumes = preprocess(raw, po);
  spdlog::info("registering {} phases of {}x{}x{} voxels", volumes.phases(), volumes.grid.dims.x, volumes.grid.dims.y,
               volumes.grid.dims.z);
  return s.precision == "double" ? run_registration<double>(raw, volumes, s, a.out, manifest)
                                 : run_registration<float>(raw, volumes, s, a.out, manifest);
}

int cmd_evaluate(const EvaluateArgs& a) {
  if (a.mode != "3d-inverse" && a.mode != "4d-matrix")
    throw InvalidArgument("--mode must be 3d-inverse or 4d-matrix, got '" + a.mode + "'");
  std::optional<CoordinateSpace> space;
  if (a.landmark_space == "voxel") space = CoordinateSpace::Voxel;
  else if (a.landmark_space == "mm") space = CoordinateSpace::Millimeter;
  else if (!a.landmark_space.empty()) throw InvalidArgument("--landmark-space must be voxel or mm");
  make_out_dir(a.out);
  Manifest manifest(a.out, "evaluate", a.command_line);
  manifest["inputs"] = {{"fields", a.fields.string()}, {"landmarks", a.landmarks}, {"masks", a.masks}};
  manifest["config"] = {{"mode", a.mode}};
  manifest.write();

  FieldSet<float> fs_;
  for (const auto& p : find_fields(a.fields)) {
    FieldFile f = read_field(p);
    if (fs_.fields.empty()) fs_.grid = f.grid;
    else if (!(f.grid.dims == fs_.grid.dims)) throw IoError(p.string() + ": extent differs from u_00_vox.mha");
    fs_.fields.push_back(field_to_voxels(f));
  }
  const int n = fs_.phases();
  if (a.landmarks.size() > static_cast<std::size_t>(n) || a.masks.size() > static_cast<std::size_t>(n))
    throw InvalidArgument("more annotation files than phases (" + std::to_string(n) + ")");

  PhaseAnnotations ann;
  ann.landmarks.resize(static_cast<std::size_t>(n));
  ann.masks.resize(static_cast<std::size_t>(n));
  int annotated = 0;
  for (int i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    if (present(a.landmarks, k)) ann.landmarks[k] = read_landmarks(a.landmarks[k], space, fs_.grid).points;
    if (present(a.masks, k)) {
      Grid g;
      ann.masks[k] = read_mask(a.masks[k], &g);
      if (!(g.dims == fs_.grid.dims)) throw InvalidArgument(a.masks[k] + ": mask extent does not match the fields");
    }
    if (ann.landmarks[k] || ann.masks[k]) ++annotated;
  }

  json report{{"mode", a.mode}, {"phases", n}};
  if (a.mode == "3d-inverse") {
    if (n != 2) throw InvalidArgument("3d-inverse needs exactly 2 fields, found " + std::to_string(n));
    if (annotated != 2) throw InvalidArgument("3d-inverse needs landmarks or masks for both phases");
    const InverseConsistency ic = inverse_consistency_3d(fs_, ann);
    json dirs = json::array();
    std::ofstream csv(a.out / "curve.csv");
    csv << "start,mean,std\n" << std::setprecision(10);
    for (const auto& d : ic.directions) {
      json dj{{"start", d.start}};
      if (d.tre) {
        dj["tre"] = stats_json(*d.tre);
        csv << d.start << ',' << d.tre->mean << ',' << d.tre->std << '\n';
      }
      if (d.masks) dj["masks"] = mask_scores_json(*d.masks);
      dirs.push_back(std::move(dj));
    }
    report["directions"] = std::move(dirs);
    if (ic.mean_tre) report["mean_tre"] = *ic.mean_tre;
    if (ic.mean_dice) report["mean_dice"] = *ic.mean_dice;
    report["notices"] = ic.notices;
    for (const auto& note : ic.notices) spdlog::warn("{}", note);
  } else {
    if (annotated == 0) throw InvalidArgument("4d-matrix needs at least one annotated phase (--landmarks or --masks)");
    const Eval4D e = eval4d(fs_, ann);
    std::ofstream csv(a.out / "matrix.csv");
    csv << "source,target,offset,tre_mean,tre_std,tre_before_mean,tre_before_std,dice,hausdorff,assd,dice_before\n"
        << std::setprecision(10);
    json entries = json::array();
    for (int i = 0; i < n; ++i)
      for (int k = 1; k <= n; ++k) {
        const int j = (i + k) % n;
        const MatrixEntry* m = nullptr;
        for (const auto& x : e.entries)
          if (x.source == i && x.offset == k) m = &x;
        csv << i << ',' << j << ',' << k;
        if (m && m->tre) csv << ',' << m->tre->mean << ',' << m->tre->std << ',' << m->tre_before->mean << ',' << m->tre_before->std;
        else csv << ",,,,";
        if (m && m->masks) csv << ',' << m->masks->dice << ',' << m->masks->hausdorff << ',' << m->masks->assd << ',' << m->masks_before->dice;
        else csv << ",,,,";
        csv << '\n';
        if (!m) continue;
        json ej{{"source", i}, {"target", j}, {"offset", k}};
        if (m->tre) ej["tre"] = stats_json(*m->tre), ej["tre_before"] = stats_json(*m->tre_before);
        if (m->masks) ej["masks"] = mask_scores_json(*m->masks), ej["masks_before"] = mask_scores_json(*m->masks_before);
        entries.push_back(std::move(ej));
      }
    if (!csv) throw IoError("failed writing matrix.csv");
    const auto curve = [&](const std::vector<CurvePoint>& c, const fs::path& path) {
      std::ofstream os(path);
      os << "offset,entries,mean,std,mean_before,std_before\n" << std::setprecision(10);
      json j = json::array();
      for (const auto& p : c) {
        os << p.offset << ',' << p.entries << ',' << p.mean << ',' << p.std << ',' << p.mean_before << ',' << p.std_before << '\n';
        j.push_back({{"offset", p.offset}, {"entries", p.entries}, {"mean", p.mean}, {"std", p.std},
                     {"mean_before", p.mean_before}, {"std_before", p.std_before}});
      }
      if (!os) throw IoError("failed writing " + path.string());
      return j;
    };
    report["entries"] = std::move(entries);
    report["landmark_curve"] = curve(e.landmark_curve, a.out / "curve.csv");
    if (!e.dice_curve.empty()) report["dice_curve"] = curve(e.dice_curve, a.out / "dice_curve.csv");
  }
  write_json(a.out / "eval.json", report);
  manifest.finish("ok");
  return kOk;
}

int cmd_phantom(const PhantomArgs& a) {
  if (a.size.size() != 3) throw InvalidArgument("--size takes 3 extents (x y z)");
  PhantomSpec spec;
  spec.size = {a.size[0], a.size[1], a.size[2]};
  spec.phases = a.phases;
  spec.radius = a.radius;
  spec.noise = a.noise;
  spec.landmarks = a.landmarks;
  spec.seed = a.seed;
  spec.amplitude = a.amplitude.value_or(a.relative_amplitude * spec.resolved_radius());
  spec.validate();
  make_out_dir(a.out);
  Manifest manifest(a.out, "phantom", a.command_line);
  manifest["seed"] = a.seed;
  const Vec3 c = spec.resolved_center();
  manifest["config"] = {{"size", a.size},
                        {"phases", spec.phases},
                        {"amplitude", spec.amplitude},
                        {"radius", spec.resolved_radius()},
                        {"center", {c.x, c.y, c.z}},
                        {"noise", spec.noise},
                        {"landmarks", spec.landmarks}};
  manifest.write();

  const Phantom ph = generate_phantom(spec);
  const Grid& g = ph.volumes.grid;
  const auto v = g.dims.count();
  std::ofstream list(a.out / "phases.txt");
  for (int p = 0; p < spec.phases; ++p) {
    const std::string k = two_digits(p);
    Array<float> img(Shape{1, g.dims.z, g.dims.y, g.dims.x});
    std::copy_n(ph.volumes.images.values.begin() + p * v, v, img.values.begin());
    VolumeHeader h;
    h.grid = g;
    write_volume(a.out / ("phase_" + k + ".mha"), img, h);
    write_mask(a.out / ("mask_" + k + ".mha"), ph.masks[static_cast<std::size_t>(p)], g);
    write_landmarks(a.out / ("landmarks_" + k + ".txt"), ph.landmarks[static_cast<std::size_t>(p)]);
    write_field(a.out / ("truth_" + k + "_vox.mha"), ph.truth.fields[static_cast<std::size_t>(p)].cast<float>(), g,
                DisplacementUnits::Voxel);
    list << "phase_" << k << ".mha\n";
  }
  if (!list) throw IoError("failed writing phases.txt");
  manifest.finish("ok");
  return kOk;
}

int cmd_jacobian(const JacobianArgs& a) {
  if (!a.spacing.empty() && a.spacing.size() != 3) throw InvalidArgument("--spacing takes 3 values (x y z)");
  for (const double s : a.spacing)
    if (!(s > 0)) throw InvalidArgument("--spacing values must be > 0");
  make_out_dir(a.out);
  Manifest manifest(a.out, "jacobian", a.command_line);
  manifest["inputs"] = {a.field.string()};
  manifest.write();

  FieldFile f = read_field(a.field);
  if (!a.spacing.empty()) f.grid.spacing = {a.spacing[0], a.spacing[1], a.spacing[2]};
  const Array<double> det = jacobian_determinant(field_to_voxels(f));
  const JacobianStats js = jacobian_summary(det);
  VolumeHeader h;
  h.grid = f.grid;
  write_volume(a.out / "jacobian.mha", det.cast<float>(), h);
  json report = jacobian_json(js);
  report["field"] = a.field.string();
  write_json(a.out / "jacobian.json", report);
  spdlog::info("det mean {:.4f} std {:.4f}, FoF {:.3f}%", js.interior.mean, js.interior.std, js.fof_percent);
  manifest.finish("ok");
  return kOk;
}

}  // namespace pulsereg::cli
