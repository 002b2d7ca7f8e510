#include <spdlog/spdlog.h>

#include <CLI11.hpp>

#include "commands.hpp"

using namespace pulsereg::cli;

int main(int argc, char** argv) {
  CLI::App app{"pulsereg: one-shot cyclic deformable registration of periodic 3-D/4-D image series"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));
  const std::vector<std::string> command_line(argv, argv + argc);

  RegisterArgs reg;
  auto* r = app.add_subcommand("register", "Register N phase images (N = 2: extreme phases; N > 2: a full cycle)");
  r->add_option("--phases", reg.phases, "Phase volumes in order, or one .txt file listing them")->required();
  r->add_option("--patch", reg.patch, "Patch edge in voxels (default 80)")->check(CLI::IsMember({48, 64, 80, 96}));
  r->add_option("--levels", reg.levels, "Resolution levels (default 3)")->check(CLI::IsMember({1, 2, 3}));
  r->add_option("--mask", reg.mask, "Foreground mask: none, auto or a mask file");
  r->add_option("--resample", reg.resample, "Isotropic voxel size in mm, or none");
  r->add_option("--seed", reg.seed, "Network initialization seed");
  r->add_option("--out", reg.out, "Output directory")->required();
  r->add_flag("--deterministic", reg.deterministic, "Serial patch scheduling; identical inputs give identical fields");
  r->add_option("--threads", reg.threads, "Concurrent patches (default $PULSEREG_THREADS or 1)")->check(CLI::PositiveNumber);
  r->add_option("--config", reg.config, "key = value settings file; flags override it")->check(CLI::ExistingFile);
  r->add_option("--max-iterations", reg.max_iterations, "Iteration cap per patch")->check(CLI::PositiveNumber);
  r->add_option("--lr", reg.learning_rate, "Adam learning rate");
  r->add_option("--alpha", reg.alpha, "Seam weight inside the smoothness term");
  r->add_option("--lambda0", reg.lambda0, "Smoothness weight");
  r->add_option("--lambda1", reg.lambda1, "Cyclic weight");
  r->add_option("--eps", reg.eps, "Convergence threshold on the loss moving average");
  r->add_option("--precision", reg.precision, "float or double")->check(CLI::IsMember({"float", "double"}));

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Score registered fields against landmarks and/or masks");
  e->add_option("--fields", ev.fields, "Directory holding u_XX_vox.mha")->required()->check(CLI::ExistingDirectory);
  e->add_option("--landmarks", ev.landmarks, "Landmark file per phase, in order ('-' = none)");
  e->add_option("--masks", ev.masks, "Mask file per phase, in order ('-' = none)");
  e->add_option("--landmark-space", ev.landmark_space, "voxel or mm, for files without a '# space:' line");
  e->add_option("--mode", ev.mode, "3d-inverse or 4d-matrix")->check(CLI::IsMember({"3d-inverse", "4d-matrix"}));
  e->add_option("--out", ev.out, "Output directory")->required();

  PhantomArgs ph;
  auto* p = app.add_subcommand("phantom", "Write a synthetic breathing-sphere series with ground truth");
  p->add_option("--size", ph.size, "Extents x y z")->expected(3);
  p->add_option("--phases", ph.phases, "Phase count")->check(CLI::Range(2, 64));
  p->add_option("--amplitude", ph.amplitude, "Peak radial surface motion in voxels (default 0.1 radius)");
  p->add_option("--radius", ph.radius, "Sphere radius in voxels (default 0.4 of the smallest extent)");
  p->add_option("--noise", ph.noise, "Per-phase white noise standard deviation");
  p->add_option("--landmarks", ph.landmarks, "Surface landmarks per phase")->check(CLI::NonNegativeNumber);
  p->add_option("--seed", ph.seed, "Texture and noise seed");
  p->add_option("--out", ph.out, "Output directory")->required();

  JacobianArgs jac;
  auto* j = app.add_subcommand("jacobian", "Jacobian determinant volume and folding statistics of a field");
  j->add_option("--field", jac.field, "Displacement field file")->required();
  j->add_option("--spacing", jac.spacing, "Override the file's voxel spacing (x y z)")->expected(3);
  j->add_option("--out", jac.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& help) {
    return app.exit(help);
  } catch (const CLI::CallForAllHelp& help) {
    return app.exit(help);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kInvalidArgs;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  if (r->parsed()) {
    reg.command_line = command_line;
    return guarded([&] { return cmd_register(reg); });
  }
  if (e->parsed()) {
    ev.command_line = command_line;
    return guarded([&] { return cmd_evaluate(ev); });
  }
  if (p->parsed()) {
    ph.command_line = command_line;
    return guarded([&] { return cmd_phantom(ph); });
  }
  jac.command_line = command_line;
  return guarded([&] { return cmd_jacobian(jac); });
}
