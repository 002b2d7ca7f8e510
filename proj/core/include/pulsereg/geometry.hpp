#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace pulsereg {

/// Three-vector in (x, y, z) order.
struct Vec3 {
  double x = 0, y = 0, z = 0;

  double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }

  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
  friend bool operator==(const Vec3&, const Vec3&) = default;

  [[nodiscard]] double norm() const { return std::sqrt(x * x + y * y + z * z); }
};

/// Voxel extents in (x, y, z) order.
struct Extent3 {
  std::int64_t x = 0, y = 0, z = 0;

  [[nodiscard]] std::int64_t count() const { return x * y * z; }
  std::int64_t operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  std::int64_t& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  friend bool operator==(const Extent3&, const Extent3&) = default;
};

/// Physical placement of a voxel grid. Voxel index i maps to origin + i * spacing (mm).
struct Grid {
  Extent3 dims;
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};

  [[nodiscard]] Vec3 to_mm(Vec3 voxel) const {
    return {origin.x + voxel.x * spacing.x, origin.y + voxel.y * spacing.y, origin.z + voxel.z * spacing.z};
  }
  [[nodiscard]] Vec3 to_voxel(Vec3 mm) const {
    return {(mm.x - origin.x) / spacing.x, (mm.y - origin.y) / spacing.y, (mm.z - origin.z) / spacing.z};
  }
  [[nodiscard]] bool contains_voxel(Vec3 v) const {
    return v.x >= 0 && v.y >= 0 && v.z >= 0 && v.x <= static_cast<double>(dims.x - 1) &&
           v.y <= static_cast<double>(dims.y - 1) && v.z <= static_cast<double>(dims.z - 1);
  }
  friend bool operator==(const Grid&, const Grid&) = default;
};

}  // namespace pulsereg
