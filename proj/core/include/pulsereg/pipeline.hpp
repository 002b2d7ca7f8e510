#pragma once

// Preprocessing and the coarse-to-fine, patch-wise one-shot optimization.
//
// Level factors run 2^(levels-1), ..., 2, 1. At each level the volume is cut
// into non-overlapping patches scanned in (z, y, x) order. Every patch gets a
// freshly initialized network that predicts a residual on top of the field
// accumulated from coarser levels; the residual is optimized until the loss
// settles or the iteration cap is hit. Finished patches freeze their border
// band, which later neighbors see through the seam term.

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pulsereg/adam.hpp"
#include "pulsereg/loss.hpp"
#include "pulsereg/unet.hpp"
#include "pulsereg/volume.hpp"
#include "pulsereg/warp.hpp"

namespace pulsereg {

enum class MaskMode { None, File, Auto };

struct PreprocessOptions {
  MaskMode mask_mode = MaskMode::None;
  std::optional<Mask> mask;              // used with MaskMode::File
  std::optional<double> isotropic_mm;    // resample to this voxel size
};

/// Foreground = everything except the largest 6-connected component of
/// exactly-zero voxels, per phase; the returned mask is the union over phases.
Mask auto_foreground(const Array<float>& images);

/// Resamples images trilinearly (mask by nearest neighbor) to isotropic voxels
/// of `mm`, covering the same physical extent.
Volume4D resample_isotropic(const Volume4D& v, double mm);

/// Standardizes foreground intensities of the whole 4-D set to zero mean and
/// unit standard deviation; background becomes 0.
Volume4D preprocess(const Volume4D& raw, const PreprocessOptions& options);

/// Pads every spatial extent up to a multiple of `multiple` by edge replication.
template <typename T>
Array<T> pad_replicate(const Array<T>& a, std::int64_t multiple);
template <typename T>
Array<T> crop(const Array<T>& a, Extent3 extent);

/// 2x2x2 block means (images) and block means halved (fields, voxel units).
template <typename T>
Array<T> downsample_image(const Array<T>& a);
template <typename T>
Array<T> downsample_field(const Array<T>& a);
/// Any voxel set in the 2x2x2 block.
Mask downsample_mask(const Mask& m);
/// Trilinear interpolation to twice the extent (fine voxel j sits at coarse
/// coordinate (j - 0.5) / 2), values doubled.
template <typename T>
Array<T> upsample_field(const Array<T>& a);

/// Maps fields computed on `from` onto `to` (same physical extent): values are
/// sampled trilinearly and rescaled by from.spacing / to.spacing per axis.
template <typename T>
Array<T> resample_field(const Array<T>& field, const Grid& from, const Grid& to);

/// True iff history holds more than `window` entries and the last one differs
/// from the mean of the `window` before it by less than eps.
bool converged(const std::vector<double>& history, double eps, int window);

struct PipelineConfig {
  int patch = 80;
  int levels = 3;
  double eps = 1e-5;
  int window = 10;
  int max_iterations = 3000;
  AdamConfig adam;
  LossWeights weights;       // alpha applies to all levels but the coarsest
  double coarse_alpha = 0.0;
  UNetConfig network;        // in_channels is set from the phase count
  std::uint64_t seed = 0;
  int threads = 1;
  bool keep_traces = true;

  void validate() const;
  [[nodiscard]] std::vector<int> factors() const;
};

struct PatchReport {
  int level = 0;  // 0 = coarsest
  int factor = 1;
  int index = 0;
  Extent3 origin, extent;  // in level voxels; extent excludes padding
  int iterations = 0;
  bool converged = false, capped = false, skipped = false, diverged = false;
  std::string note;
  LossRecord first, last;
  double seconds = 0;
  std::vector<LossRecord> trace;
};

struct LevelReport {
  int factor = 1;
  Extent3 dims;
  Extent3 patch_edge;
  double alpha = 0;
  double displacement_cap = 0;
  std::vector<PatchReport> patches;
  double seconds = 0;
};

template <typename T>
struct RegistrationResult {
  FieldSet<T> fields;                 // on the (preprocessed) input grid, voxel units
  std::vector<Array<T>> residuals;    // per level, 3N stack on the padded level grid
  std::vector<LevelReport> levels;
  PipelineConfig config;
  double seconds = 0;
  bool diverged = false;

  /// Field in mm: each component multiplied by the grid spacing on its axis.
  [[nodiscard]] Array<T> field_mm(int phase) const;
};

/// Called after each finished patch (from the worker that ran it).
using PatchCallback = std::function<void(const PatchReport&)>;

template <typename T>
RegistrationResult<T> register_volumes(const Volume4D& volumes, const PipelineConfig& config,
                                       const PatchCallback& on_patch = {});

/// Re-adds per-level residuals through the upsampling chain and crops to
/// `extent`; equals result.fields for a finished run.
template <typename T>
Array<T> accumulate_residuals(const std::vector<Array<T>>& residuals, Extent3 extent);

}  // namespace pulsereg
