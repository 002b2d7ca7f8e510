#include "pulsereg/unet.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>

#include "pulsereg/ops.hpp"
#include "pulsereg/random.hpp"

namespace pulsereg {

int UNetConfig::channels_at(int level) const {
  int c = base_channels;
  for (int l = 0; l < level; ++l) c *= channel_growth;
  return c;
}

void UNetConfig::validate() const {
  if (in_channels < 1) throw InvalidArgument("UNetConfig: in_channels must be >= 1");
  if (levels < 1 || levels > 6) throw InvalidArgument("UNetConfig: levels must be in [1, 6]");
  if (convs_per_encoder_block < 1) throw InvalidArgument("UNetConfig: convs_per_encoder_block must be >= 1");
  if (convs_per_decoder_block < 1) throw InvalidArgument("UNetConfig: convs_per_decoder_block must be >= 1");
  if (base_channels < 1) throw InvalidArgument("UNetConfig: base_channels must be >= 1");
  if (channel_growth < 1) throw InvalidArgument("UNetConfig: channel_growth must be >= 1");
}

namespace {

template <typename T>
ConvLayer<T> make_layer(Rng& rng, std::int64_t a, std::int64_t b, std::int64_t k, std::int64_t fan_in,
                        std::int64_t bias_len, bool zero) {
  Array<T> w(Shape{a, b, k, k, k});
  if (!zero) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : w.values) v = static_cast<T>(rng.uniform(-bound, bound));
  }
  return {Tensor<T>(std::move(w), true), Tensor<T>(Array<T>(Shape{bias_len}), true)};
}

}  // namespace

template <typename T>
std::vector<Tensor<T>> UNetParams<T>::tensors() const {
  std::vector<Tensor<T>> out;
  const auto push = [&out](const ConvLayer<T>& l) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  };
  for (const auto& block : encoder)
    for (const auto& l : block) push(l);
  for (const auto& l : up) push(l);
  for (const auto& block : decoder)
    for (const auto& l : block) push(l);
  return out;
}

template <typename T>
std::int64_t UNetParams<T>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& t : tensors()) n += t.numel();
  return n;
}

template <typename T>
UNetParams<T> init_params(const UNetConfig& config, std::uint64_t seed) {
  config.validate();
  UNetParams<T> p;
  p.config = config;
  p.seed = seed;
  Rng rng(seed);
  const std::int64_t k = 3;
  for (int l = 0; l < config.levels; ++l) {
    std::vector<ConvLayer<T>> block;
    std::int64_t cin = l == 0 ? config.in_channels : config.channels_at(l - 1);
    const std::int64_t c = config.channels_at(l);
    for (int i = 0; i < config.convs_per_encoder_block; ++i) {
      block.push_back(make_layer<T>(rng, c, cin, k, cin * k * k * k, c, false));
      cin = c;
    }
    p.encoder.push_back(std::move(block));
  }
  for (int l = 0; l + 1 < config.levels; ++l) {
    const std::int64_t cin = config.channels_at(l + 1), cout = config.channels_at(l);
    p.up.push_back(make_layer<T>(rng, cin, cout, 2, cin, cout, false));
  }
  const int decoder_blocks = std::max(config.levels - 1, 1);
  for (int l = 0; l < decoder_blocks; ++l) {
    std::vector<ConvLayer<T>> block;
    const std::int64_t c = config.channels_at(l);
    for (int i = 0; i < config.convs_per_decoder_block; ++i) {
      const bool field = l == 0 && i + 1 == config.convs_per_decoder_block;
      const std::int64_t cout = field ? config.out_channels() : c;
      block.push_back(make_layer<T>(rng, cout, c, k, c * k * k * k, cout, field));
    }
    p.decoder.push_back(std::move(block));
  }
  return p;
}

template <typename T>
void register_parameters(Graph<T>& g, const UNetParams<T>& params) {
  for (auto& t : params.tensors()) g.register_parameter(t);
}

template <typename T>
Tensor<T> forward(Graph<T>& g, const UNetParams<T>& params, const Tensor<T>& patch_stack) {
  const auto& cfg = params.config;
  const auto& s = patch_stack.shape();
  if (s.size() != 4) throw InvalidArgument("forward: patch stack must be N x D x H x W, got " + to_string(s));
  if (s[0] != cfg.in_channels)
    throw InvalidArgument("forward: axis channel has " + std::to_string(s[0]) + " phases, network expects " +
                          std::to_string(cfg.in_channels));
  const int div = cfg.size_divisor();
  for (std::size_t a = 1; a < 4; ++a)
    if (s[a] % div != 0)
      throw InvalidArgument("forward: axis " + std::string(image_axis_name(a)) + " extent " + std::to_string(s[a]) +
                            " is not divisible by " + std::to_string(div) + "; pad the patch");

  const auto conv = [&g](const Tensor<T>& x, const ConvLayer<T>& l) { return conv3(g, x, l.weight, l.bias, 1, 1); };

  Tensor<T> x = patch_stack;
  std::vector<Tensor<T>> skips;
  for (int l = 0; l < cfg.levels; ++l) {
    if (l > 0) x = avgpool3(g, x);
    for (const auto& layer : params.encoder[l]) x = relu(g, conv(x, layer));
    if (l + 1 < cfg.levels) skips.push_back(x);
  }
  const auto decode = [&](int l) {
    const auto& block = params.decoder[l];
    for (std::size_t i = 0; i < block.size(); ++i) {
      x = conv(x, block[i]);
      const bool field = l == 0 && i + 1 == block.size();
      if (!field) x = relu(g, x);
    }
  };
  for (int l = cfg.levels - 2; l >= 0; --l) {
    x = tconv3(g, x, params.up[l].weight, params.up[l].bias, 2);
    x = add(g, x, skips[l]);
    decode(l);
  }
  if (cfg.levels == 1) decode(0);
  return x;
}

int receptive_field(std::span<const LayerSpec> chain) {
  double extent = 1.0;
  double jump = 1.0;
  for (const auto& l : chain) {
    switch (l.kind) {
      case LayerSpec::Kind::Conv:
      case LayerSpec::Kind::Pool:
        extent += (l.kernel - 1) * jump;
        jump *= l.stride;
        break;
      case LayerSpec::Kind::TransposedConv:
        jump /= l.stride;
        break;
    }
  }
  return static_cast<int>(std::lround(extent));
}

std::vector<LayerSpec> deepest_path(const UNetConfig& config) {
  config.validate();
  using K = LayerSpec::Kind;
  std::vector<LayerSpec> chain;
  for (int l = 0; l < config.levels; ++l) {
    if (l > 0) chain.push_back({K::Pool, 2, 2});
    for (int i = 0; i < config.convs_per_encoder_block; ++i) chain.push_back({K::Conv, 3, 1});
  }
  for (int l = config.levels - 2; l >= 0; --l) {
    chain.push_back({K::TransposedConv, 2, 2});
    for (int i = 0; i < config.convs_per_decoder_block; ++i) chain.push_back({K::Conv, 3, 1});
  }
  if (config.levels == 1)
    for (int i = 0; i < config.convs_per_decoder_block; ++i) chain.push_back({K::Conv, 3, 1});
  return chain;
}

int receptive_field(const UNetConfig& config) { return receptive_field(deepest_path(config)); }

namespace {

constexpr char kMagic[8] = {'P', 'R', 'G', 'C', 'K', 'P', 'T', '1'};

template <typename U>
void write_le(std::ostream& os, U value) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(std::begin(bytes), std::end(bytes));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw IoError("checkpoint: truncated file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(std::begin(bytes), std::end(bytes));
  U value;
  std::memcpy(&value, bytes, sizeof(U));
  return value;
}

nlohmann::json config_json(const UNetConfig& c) {
  return {{"in_channels", c.in_channels},
          {"levels", c.levels},
          {"convs_per_encoder_block", c.convs_per_encoder_block},
          {"convs_per_decoder_block", c.convs_per_decoder_block},
          {"base_channels", c.base_channels},
          {"channel_growth", c.channel_growth}};
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const UNetParams<T>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open " + path.string() + " for writing");
  nlohmann::json header;
  header["config"] = config_json(params.config);
  header["seed"] = params.seed;
  auto shapes = nlohmann::json::array();
  const auto tensors = params.tensors();
  for (const auto& t : tensors) shapes.push_back(t.shape());
  header["shapes"] = shapes;
  const std::string text = header.dump();
  os.write(kMagic, sizeof(kMagic));
  write_le<std::uint32_t>(os, sizeof(T));
  write_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors)
    for (const T v : t.value().values) write_le<T>(os, v);
  if (!os) throw IoError("checkpoint: write failed for " + path.string());
}

template <typename T>
UNetParams<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("checkpoint: bad magic in " + path.string());
  const auto width = read_le<std::uint32_t>(is);
  if (width != sizeof(T))
    throw IoError("checkpoint: stored scalar width " + std::to_string(width) + " does not match requested " +
                  std::to_string(sizeof(T)));
  const auto len = read_le<std::uint64_t>(is);
  if (len > (1u << 24)) throw IoError("checkpoint: implausible header length");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw IoError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: malformed header: ") + e.what());
  }
  UNetConfig cfg;
  const auto& c = header.at("config");
  cfg.in_channels = c.at("in_channels");
  cfg.levels = c.at("levels");
  cfg.convs_per_encoder_block = c.at("convs_per_encoder_block");
  cfg.convs_per_decoder_block = c.at("convs_per_decoder_block");
  cfg.base_channels = c.at("base_channels");
  cfg.channel_growth = c.at("channel_growth");
  auto params = init_params<T>(cfg, header.at("seed").get<std::uint64_t>());
  auto tensors = params.tensors();
  const auto& shapes = header.at("shapes");
  if (shapes.size() != tensors.size()) throw IoError("checkpoint: tensor count does not match config");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (shapes[i].get<Shape>() != tensors[i].shape())
      throw IoError("checkpoint: tensor " + std::to_string(i) + " shape does not match config");
    for (auto& v : tensors[i].mutable_value().values) v = read_le<T>(is);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw IoError("checkpoint: trailing bytes after weights");
  return params;
}

#define PULSEREG_INSTANTIATE_UNET(T)                                                      \
  template struct UNetParams<T>;                                                          \
  template UNetParams<T> init_params<T>(const UNetConfig&, std::uint64_t);                \
  template void register_parameters<T>(Graph<T>&, const UNetParams<T>&);                  \
  template Tensor<T> forward<T>(Graph<T>&, const UNetParams<T>&, const Tensor<T>&);       \
  template void save_checkpoint<T>(const std::filesystem::path&, const UNetParams<T>&);   \
  template UNetParams<T> load_checkpoint<T>(const std::filesystem::path&);

PULSEREG_INSTANTIATE_UNET(float)
PULSEREG_INSTANTIATE_UNET(double)

}  // namespace pulsereg
