#include "pulsereg/config_file.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace pulsereg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename V>
V parse_number(const ConfigEntry& e, const std::string& key, const std::string& origin) {
  V v{};
  const auto& s = e.value;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size())
    throw InvalidArgument(origin + ":" + std::to_string(e.line) + ": '" + key + "' expects a number, got '" + s + "'");
  return v;
}

}  // namespace

ConfigMap parse_config(const std::string& text, const std::string& origin) {
  ConfigMap out;
  std::istringstream is(text);
  std::string line;
  for (int n = 1; std::getline(is, line); ++n) {
    const auto hash = line.find('#');
    const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw InvalidArgument(origin + ":" + std::to_string(n) + ": expected 'key = value'");
    const std::string key = trim(body.substr(0, eq)), value = trim(body.substr(eq + 1));
    if (key.empty() || value.empty()) throw InvalidArgument(origin + ":" + std::to_string(n) + ": empty key or value");
    if (out.count(key)) throw InvalidArgument(origin + ":" + std::to_string(n) + ": duplicate key '" + key + "'");
    out[key] = {value, n};
  }
  return out;
}

ConfigMap read_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path.string());
}

void apply_config(const ConfigMap& config, RunSettings& s, const std::string& origin) {
  auto& p = s.pipeline;
  using Setter = std::function<void(const ConfigEntry&, const std::string&)>;
  const auto integer = [&](int& target) -> Setter {
    return [&](const ConfigEntry& e, const std::string& k) { target = parse_number<int>(e, k, origin); };
  };
  const auto real = [&](double& target) -> Setter {
    return [&](const ConfigEntry& e, const std::string& k) { target = parse_number<double>(e, k, origin); };
  };
  const std::map<std::string, Setter> schema{
      {"patch", integer(p.patch)},
      {"levels", integer(p.levels)},
      {"window", integer(p.window)},
      {"max_iterations", integer(p.max_iterations)},
      {"threads", integer(p.threads)},
      {"base_channels", integer(p.network.base_channels)},
      {"encoder_convs", integer(p.network.convs_per_encoder_block)},
      {"decoder_convs", integer(p.network.convs_per_decoder_block)},
      {"eps", real(p.eps)},
      {"learning_rate", real(p.adam.learning_rate)},
      {"lambda0", real(p.weights.lambda0)},
      {"lambda1", real(p.weights.lambda1)},
      {"alpha", real(p.weights.alpha)},
      {"coarse_alpha", real(p.coarse_alpha)},
      {"seed", [&](const ConfigEntry& e, const std::string& k) { p.seed = parse_number<std::uint64_t>(e, k, origin); }},
      {"precision",
       [&](const ConfigEntry& e, const std::string& k) {
         if (e.value != "float" && e.value != "double")
           throw InvalidArgument(origin + ":" + std::to_string(e.line) + ": '" + k + "' must be float or double");
         s.precision = e.value;
       }},
      {"mask", [&](const ConfigEntry& e, const std::string&) { s.mask = e.value; }},
      {"resample",
       [&](const ConfigEntry& e, const std::string& k) {
         if (e.value == "none") s.resample_mm.reset();
         else s.resample_mm = parse_number<double>(e, k, origin);
       }},
  };
  for (const auto& [key, entry] : config) {
    const auto it = schema.find(key);
    if (it == schema.end())
      throw InvalidArgument(origin + ":" + std::to_string(entry.line) + ": unknown key '" + key + "'");
    it->second(entry, key);
  }
  p.validate();
  p.network.validate();
}

}  // namespace pulsereg
