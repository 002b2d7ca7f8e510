#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace pulsereg::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kInvalidArgs = 2, kIoError = 3, kDiverged = 4 };

struct RegisterArgs {
  std::vector<std::string> phases;  // files, or one .txt list
  std::optional<int> patch;         // {48, 64, 80, 96}; default 80
  std::optional<int> levels;        // {1, 2, 3}; default 3
  std::optional<std::string> mask;      // none | auto | <path>
  std::optional<std::string> resample;  // none | <mm>
  std::optional<std::uint64_t> seed;
  std::filesystem::path out;
  bool deterministic = false;
  std::optional<int> threads;
  std::optional<std::filesystem::path> config;
  std::optional<int> max_iterations;
  std::optional<double> learning_rate, alpha, lambda0, lambda1, eps;
  std::optional<std::string> precision;  // float | double
  std::vector<std::string> command_line;
};

struct EvaluateArgs {
  std::filesystem::path fields;
  std::vector<std::string> landmarks;  // per phase; "-" = not annotated
  std::vector<std::string> masks;      // per phase; "-" = not annotated
  std::string landmark_space;          // "" = from the files
  std::string mode = "4d-matrix";
  std::filesystem::path out;
  std::vector<std::string> command_line;
};

struct PhantomArgs {
  std::vector<int> size{64, 64, 64};
  int phases = 4;
  std::optional<double> amplitude;     // voxels
  double relative_amplitude = 0.1;     // of the radius, used when amplitude is unset
  std::optional<double> radius;
  double noise = 0.0;
  int landmarks = 60;
  std::uint64_t seed = 0;
  std::filesystem::path out;
  std::vector<std::string> command_line;
};

struct JacobianArgs {
  std::filesystem::path field;
  std::vector<double> spacing;         // empty = from the file
  std::filesystem::path out;
  std::vector<std::string> command_line;
};

int cmd_register(const RegisterArgs& args);
int cmd_evaluate(const EvaluateArgs& args);
int cmd_phantom(const PhantomArgs& args);
int cmd_jacobian(const JacobianArgs& args);

/// Runs `body`, mapping library exceptions to the exit-code contract.
int guarded(const std::function<int()>& body);

}  // namespace pulsereg::cli
