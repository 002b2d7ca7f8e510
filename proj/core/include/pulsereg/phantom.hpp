#pragma once

// Synthetic periodic phantom: a textured sphere that breathes radially.
//
// Phase n applies the radial map
//   phi_n(q) = c + (q - c) * (1 + A_n * w(|q - c|)),   A_n = a * sin(2 pi n / N)
// to a reference image (phase 0 is the reference, A_0 = 0; for N = 2 the
// second phase uses A_1 = a, the exhale/inhale pair), with a = amplitude
// / radius, w = 1 inside the radius and w = (radius / rho)^3 outside. The
// radial profile rho * (1 + A w(rho)) is strictly increasing for |A| < 1/2,
// so every phase map is invertible and fold free. The ground-truth field of
// transition n is u_n(x) = phi_{n+1}(phi_n^{-1}(x)) - x on the phase-n grid.

#include <cstdint>
#include <optional>
#include <vector>

#include "pulsereg/array.hpp"
#include "pulsereg/geometry.hpp"
#include "pulsereg/loss.hpp"
#include "pulsereg/volume.hpp"
#include "pulsereg/warp.hpp"

namespace pulsereg {

struct PhantomSpec {
  Extent3 size{64, 64, 64};
  int phases = 4;
  double amplitude = 2.6;               // peak radial surface motion, voxels
  std::uint64_t seed = 0;
  std::optional<Vec3> center;           // voxels; default: grid center
  std::optional<double> radius;         // voxels; default: 0.4 * smallest extent
  double noise = 0.0;                   // std of per-phase white noise
  double contrast = 1.0;                // sphere intensity step over the texture
  double texture_sigma = 2.0;           // Gaussian filter of the texture noise, voxels
  int landmarks = 60;

  void validate() const;
  [[nodiscard]] Vec3 resolved_center() const;
  [[nodiscard]] double resolved_radius() const;
};

/// Closed-form motion model of a phantom.
class PhantomMotion {
 public:
  PhantomMotion(Vec3 center, double radius, double relative_amplitude, int phases);

  [[nodiscard]] double scale(int phase) const;  // A_n
  /// phi_n(q): reference point q to its phase-n position.
  [[nodiscard]] Vec3 forward(int phase, Vec3 q) const;
  /// phi_n^{-1}(x).
  [[nodiscard]] Vec3 inverse(int phase, Vec3 x) const;
  /// u_n(x) = phi_{n+1}(phi_n^{-1}(x)) - x.
  [[nodiscard]] Vec3 displacement(int phase, Vec3 x) const;

  [[nodiscard]] Vec3 center() const { return center_; }
  [[nodiscard]] double radius() const { return radius_; }
  [[nodiscard]] int phases() const { return phases_; }

 private:
  Vec3 center_;
  double radius_, amplitude_;
  int phases_;
};

struct Phantom {
  Volume4D volumes;
  std::vector<std::vector<Vec3>> landmarks;  // per phase, mm (spacing 1, origin 0)
  std::vector<Mask> masks;                   // per phase: the sphere
  FieldSet<double> truth;                    // voxel units
  PhantomMotion motion;
};

Phantom generate_phantom(const PhantomSpec& spec);

}  // namespace pulsereg
