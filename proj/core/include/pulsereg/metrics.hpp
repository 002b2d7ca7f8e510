#pragma once

// Registration quality: landmark distances, overlap and surface distances,
// Jacobian determinants, and the 3-D round-trip and 4-D N x N protocols.
//
// Landmarks travel forward along the fields (p -> p + u_n(p)). Masks are
// transported by pulling phase-i labels back through the composition that
// leads from the target phase around to phase i, then thresholding the
// trilinear value at 0.5.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pulsereg/array.hpp"
#include "pulsereg/geometry.hpp"
#include "pulsereg/loss.hpp"
#include "pulsereg/warp.hpp"

namespace pulsereg {

struct Stats {
  double mean = 0, std = 0, max = 0;
  std::size_t count = 0;
};

/// Mean, population standard deviation and maximum.
Stats summarize(std::span<const double> values);

std::vector<double> landmark_distances(std::span<const Vec3> a, std::span<const Vec3> b);
Stats tre(std::span<const Vec3> a, std::span<const Vec3> b);

struct DiceValue {
  double value = 1.0;
  bool both_empty = false;
};
DiceValue dice(const Mask& a, const Mask& b);

/// Foreground voxels with at least one 6-neighbor outside the mask or the volume.
Mask border_voxels(const Mask& m);

/// Exact Euclidean distance (mm) from every voxel to the nearest nonzero
/// voxel of `seeds`; +inf everywhere when there are none.
Array<double> distance_transform(const Mask& seeds, Vec3 spacing);

struct SurfaceDistance {
  double hausdorff = 0;
  double assd = 0;
};
/// HD and ASSD between the 6-connected borders of two non-empty masks. ASSD
/// is the mean of the two directed mean distances.
SurfaceDistance surface_distance(const Mask& a, const Mask& b, Vec3 spacing);

/// det(I + grad u) for a voxel-unit field: central differences where both
/// neighbors exist, one-sided otherwise. Returns 1 x D x H x W.
template <typename T>
Array<double> jacobian_determinant(const Array<T>& field);

struct JacobianStats {
  Stats interior;               // voxels with both neighbors on every axis
  double fof_percent = 0;       // interior voxels with det <= 0
  std::int64_t folded = 0;
  Stats border;                 // one-sided differences, reported apart
  double border_fof_percent = 0;
};
/// Statistics of a determinant volume from jacobian_determinant.
JacobianStats jacobian_summary(const Array<double>& det);
template <typename T>
JacobianStats jacobian_stats(const Array<T>& field);

/// Phase-i mask carried to the grid of phase j (j may equal i: one full cycle).
template <typename T>
Mask transport_mask(const FieldSet<T>& fields, const Mask& mask, int i, int j);

/// Phase-i landmarks (mm) carried forward phase by phase until phase j
/// (j == i means one full cycle).
template <typename T>
std::vector<Vec3> transport_landmarks(const FieldSet<T>& fields, std::span<const Vec3> points, int i, int j);

struct PhaseAnnotations {
  std::vector<std::optional<std::vector<Vec3>>> landmarks;  // per phase, mm
  std::vector<std::optional<Mask>> masks;                   // per phase
};

struct MaskScores {
  double dice = 0, hausdorff = 0, assd = 0;
};

struct MatrixEntry {
  int source = 0, target = 0, offset = 0;
  std::optional<Stats> tre, tre_before;
  std::optional<MaskScores> masks, masks_before;
};

struct CurvePoint {
  int offset = 0;
  std::size_t entries = 0;
  double mean = 0, std = 0;
  double mean_before = 0, std_before = 0;
};

struct Eval4D {
  int phases = 0;
  std::vector<MatrixEntry> entries;
  std::vector<CurvePoint> landmark_curve;  // pooled landmark errors per offset
  std::vector<CurvePoint> dice_curve;      // dice per offset
};

/// For each annotated phase i and offset k = 1..N, transports i's annotations
/// to j = i + k (mod N) and scores them against j's annotations where present.
/// Offset N is the full cycle back to i.
template <typename T>
Eval4D eval4d(const FieldSet<T>& fields, const PhaseAnnotations& annotations);

struct RoundTrip {
  int start = 0;
  std::optional<Stats> tre;
  std::optional<MaskScores> masks;
};

struct InverseConsistency {
  std::vector<RoundTrip> directions;  // start at phase 0, then phase 1
  std::optional<double> mean_tre, mean_dice;
  std::vector<std::string> notices;
};

/// N = 2 only: phase 0 -> 1 -> 0 and phase 1 -> 0 -> 1 round trips.
template <typename T>
InverseConsistency inverse_consistency_3d(const FieldSet<T>& fields, const PhaseAnnotations& annotations);

}  // namespace pulsereg
