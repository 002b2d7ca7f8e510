#pragma once

// Flat `key = value` configuration files. '#' starts a comment; blank lines
// are ignored. Keys are validated against a typed schema; unknown keys and
// values of the wrong type are rejected with the line number.
//
// Recognized keys (all optional):
//   patch, levels, window, max_iterations, threads, base_channels,
//   encoder_convs, decoder_convs                         integers
//   eps, learning_rate, lambda0, lambda1, alpha,
//   coarse_alpha                                         reals
//   seed                                                 unsigned integer
//   precision                                            float | double
//   mask                                                 none | auto | <path>
//   resample                                             none | <mm>

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "pulsereg/pipeline.hpp"

namespace pulsereg {

struct ConfigEntry {
  std::string value;
  int line = 0;
};
using ConfigMap = std::map<std::string, ConfigEntry>;

ConfigMap parse_config(const std::string& text, const std::string& origin = "<config>");
ConfigMap read_config(const std::filesystem::path& path);

struct RunSettings {
  PipelineConfig pipeline;
  std::string precision = "float";
  std::string mask = "none";
  std::optional<double> resample_mm;
};

/// Applies every entry to `settings`, validating types and ranges.
void apply_config(const ConfigMap& config, RunSettings& settings, const std::string& origin = "<config>");

}  // namespace pulsereg
