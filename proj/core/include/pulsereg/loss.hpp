#pragma once

// Patch loss: dissimilarity + lambda0 * smoothness + lambda1 * cyclic.
//
// Every term is scaled into [0, 1]. The scale of the two field terms is set
// by a displacement cap s_max (voxels): displacement vectors are assumed to
// satisfy |u| <= s_max, which bounds
//   smoothness  by 4 s_max^2 (both the gradient and the seam part), and
//   cyclic      by (N s_max)^2.
// Fields are passed as one 3N x D x H x W stack (phase-major, x/y/z minor).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "pulsereg/array.hpp"
#include "pulsereg/geometry.hpp"
#include "pulsereg/graph.hpp"

namespace pulsereg {

using Mask = Array<std::uint8_t>;  // 1 x D x H x W, nonzero = foreground

struct LossWeights {
  double lambda0 = 1e-3;  // smoothness
  double lambda1 = 1e-2;  // cyclic
  double alpha = 0.1;     // seam part of smoothness
  double displacement_cap = 40.0;

  void validate() const;
};

inline constexpr double kNccEpsilon = 1e-8;
inline constexpr int kSeamBand = 3;

struct NccValue {
  double value = 0.0;
  bool degenerate = false;  // one input had (near) zero variance; value is 0
};

/// Pearson correlation over the voxels where `mask` is nonzero (all voxels
/// when mask is null).
template <typename T>
NccValue ncc(const Array<T>& a, const Array<T>& b, const Mask* mask = nullptr);

template <typename T>
struct NccTensor {
  Tensor<T> value;
  bool degenerate = false;
};

template <typename T>
NccTensor<T> ncc(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b, const Mask* mask = nullptr);

/// Frozen displacement of already-finished neighbors below the patch along
/// x, y and z. `band[axis]`, when present, is 3N x D x H x W with the extent
/// along `axis` equal to the number of layers; layer k holds the neighbor's
/// values at distance k + 1 from the patch's first layer.
template <typename T>
struct SeamContext {
  std::optional<Array<T>> band[3];
  Extent3 valid;  // unpadded patch extent; seams only count voxels inside it

  [[nodiscard]] bool empty() const { return !band[0] && !band[1] && !band[2]; }
};

/// Mean over transitions of (1 - ncc(I_n, I_{n+1} warped by u_n)) / 2.
/// `images` is N x D x H x W.
template <typename T>
NccTensor<T> dissimilarity(Graph<T>& g, const Array<T>& images, const Tensor<T>& fields, const Mask* mask);

/// Mean over voxels, phases and components of the squared forward
/// differences summed over the three axes (replicate boundary).
template <typename T>
double gradient_energy(const Array<T>& fields);

/// Mean of |u(x) - v(y)|^2 / d over all seam pairs; 0 when there are none.
template <typename T>
double seam_energy(const Array<T>& fields, const SeamContext<T>& seams);

/// (gradient_energy + alpha * seam_energy) / (4 s_max^2 (1 + alpha)).
template <typename T>
Tensor<T> smoothness(Graph<T>& g, const Tensor<T>& fields, const SeamContext<T>& seams, double alpha, double s_max);

/// Closure defect sum_n u_n(p_n) with positions p_n walked from phase 0;
/// returns mean |s|^2 / (N s_max)^2. Positions carry no gradient.
template <typename T>
Tensor<T> cyclic(Graph<T>& g, const Tensor<T>& fields, double s_max);

/// The cyclic value with positions held fixed at `positions` (as produced by
/// trajectory_positions). Matches cyclic() when the positions came from the
/// same fields; differentiating it numerically reproduces cyclic()'s gradient.
template <typename T>
double cyclic_at_positions(const Array<T>& fields, std::span<const Array<double>> positions, double s_max);

template <typename T>
struct LossTerms {
  Tensor<T> total;
  double dissimilarity = 0, smoothness = 0, cyclic = 0;
  bool degenerate = false;
};

template <typename T>
LossTerms<T> total_loss(Graph<T>& g, const Array<T>& images, const Tensor<T>& fields, const Mask* mask,
                        const SeamContext<T>& seams, const LossWeights& weights);

struct LossRecord {
  int iteration = 0;
  double dissimilarity = 0, smoothness = 0, cyclic = 0, total = 0;
};

void write_loss_csv(const std::filesystem::path& path, std::span<const LossRecord> trace);

}  // namespace pulsereg
