#pragma once

// Trilinear warping, field composition and landmark transport.
//
// A displacement field is a 3 x D x H x W array in voxel units of its own
// grid; channel 0 is the x component, 1 is y, 2 is z. Field u_n lives on the
// grid of phase n and maps a point x of phase n to x + u_n(x) in phase n + 1
// (indices modulo N). Sampling positions outside the grid clamp to the border
// voxel.

#include <span>
#include <vector>

#include "pulsereg/array.hpp"
#include "pulsereg/geometry.hpp"
#include "pulsereg/graph.hpp"

namespace pulsereg {

template <typename T>
struct FieldSet {
  std::vector<Array<T>> fields;  // u_0 .. u_{N-1}, each 3 x D x H x W
  Grid grid;

  [[nodiscard]] int phases() const { return static_cast<int>(fields.size()); }
  /// Throws unless N >= 2 and every field is 3 x D x H x W of one shape.
  void validate() const;
};

/// Splits a 3N x D x H x W stack (phase-major) into N fields.
template <typename T>
FieldSet<T> split_field_stack(const Array<T>& stack, const Grid& grid);
template <typename T>
Array<T> join_field_stack(const FieldSet<T>& fields);

/// Trilinear sample of channel `channel` at voxel position (x, y, z), clamped.
template <typename T>
double sample_clamped(const Array<T>& volume, std::int64_t channel, double x, double y, double z);
template <typename T>
Vec3 sample_vector(const Array<T>& field, Vec3 voxel);

/// out(x) = image(x + u(x)). `image` is C x D x H x W; every channel is warped.
template <typename T>
Array<T> warp_volume(const Array<T>& image, const Array<T>& field);

/// Differentiable form for a 1 x D x H x W image; gradients flow to both the
/// image and the field.
template <typename T>
Tensor<T> warp_volume(Graph<T>& g, const Tensor<T>& image, const Tensor<T>& field);

/// Positions p_0 .. p_N (voxel units, 3 x D x H x W each, x/y/z channels)
/// with p_0 the identity grid and p_{k+1} = p_k + u_{start+k}(p_k). The
/// positions carry no gradient; p_N - p_0 is the trajectory closure defect.
template <typename T>
std::vector<Array<double>> trajectory_positions(std::span<const Array<T>> fields, int start);
template <typename T>
std::vector<Array<double>> trajectory_positions(const FieldSet<T>& fields, int start);

/// Field v with x + v(x) = endpoint of walking u_i, u_{i+1}, ... until phase j.
/// Indices wrap modulo N; i == j is rejected (see closure_defect).
template <typename T>
Array<T> compose(const FieldSet<T>& fields, int i, int j);

/// Composition over one full period starting at `start`.
template <typename T>
Array<T> closure_defect(const FieldSet<T>& fields, int start);

struct WarpedPoints {
  std::vector<Vec3> points;         // mm
  std::vector<bool> out_of_bounds;  // input point was outside the grid
};

/// Transports mm points one phase forward: p + u(p), with u converted to mm.
template <typename T>
WarpedPoints warp_points(std::span<const Vec3> points_mm, const Array<T>& field, const Grid& grid);

}  // namespace pulsereg
