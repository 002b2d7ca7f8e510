#pragma once

// U-Net field regressor: N phase channels in, 3N displacement channels out.
//
// Channel layout of the output is phase-major, component-minor: channel
// 3 * n + c holds component c (0 = x, 1 = y, 2 = z) of the field for phase n.
//
// Topology for `levels` resolution levels:
//   encoder level l : convs_per_encoder_block x (conv3 k3 s1 p1 + relu)
//   between levels  : avgpool3 (2x2x2, stride 2)
//   decoder level l : tconv3 (k2 s2) from level l+1, summed with the encoder
//                     skip of level l, then convs_per_decoder_block conv3
//                     layers (relu after each, except the very last conv of
//                     level 0, which is linear and produces the 3N field
//                     channels).

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pulsereg/graph.hpp"

namespace pulsereg {

struct UNetConfig {
  int in_channels = 2;
  int levels = 3;
  int convs_per_encoder_block = 2;
  int convs_per_decoder_block = 2;
  int base_channels = 16;
  int channel_growth = 2;

  [[nodiscard]] int out_channels() const { return 3 * in_channels; }
  [[nodiscard]] int channels_at(int level) const;
  /// Spatial extents fed to forward() must be divisible by this.
  [[nodiscard]] int size_divisor() const { return 1 << (levels - 1); }
  void validate() const;
  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

template <typename T>
struct ConvLayer {
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
struct UNetParams {
  UNetConfig config;
  std::uint64_t seed = 0;
  std::vector<std::vector<ConvLayer<T>>> encoder;  // [level][conv]
  std::vector<ConvLayer<T>> up;                    // up[l]: level l+1 -> level l
  std::vector<std::vector<ConvLayer<T>>> decoder;  // [level][conv]

  /// Every weight and bias in a fixed order (encoder, up, decoder).
  [[nodiscard]] std::vector<Tensor<T>> tensors() const;
  [[nodiscard]] std::int64_t parameter_count() const;
  [[nodiscard]] ConvLayer<T>& field_layer() { return decoder.front().back(); }
};

/// He-uniform initialization of hidden layers (bound sqrt(6 / fan_in)), zero
/// biases, and an all-zero field-producing layer, so the initial transform is
/// the identity.
template <typename T>
UNetParams<T> init_params(const UNetConfig& config, std::uint64_t seed);

/// Registers every parameter with the graph.
template <typename T>
void register_parameters(Graph<T>& g, const UNetParams<T>& params);

/// N x D x H x W -> 3N x D x H x W. Extents must be divisible by size_divisor().
template <typename T>
Tensor<T> forward(Graph<T>& g, const UNetParams<T>& params, const Tensor<T>& patch_stack);

struct LayerSpec {
  enum class Kind { Conv, Pool, TransposedConv };
  Kind kind;
  int kernel;
  int stride;
};

/// Receptive-field edge length of a sequential layer chain via the jump/extent
/// recurrence: conv and pool grow the extent by (k - 1) * jump and multiply
/// the jump by the stride; a non-overlapping transposed conv divides the jump
/// by its stride without growing the extent.
int receptive_field(std::span<const LayerSpec> chain);

/// The deepest path through the U-Net (encoder down to the bottleneck and back).
std::vector<LayerSpec> deepest_path(const UNetConfig& config);
int receptive_field(const UNetConfig& config);

// Checkpoint layout: 8 magic bytes "PRGCKPT1", u32 scalar width in bytes,
// u64 header length, JSON header (config, seed, tensor shapes), then each
// tensor's values as little-endian IEEE floats in tensors() order.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const UNetParams<T>& params);
template <typename T>
UNetParams<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace pulsereg
