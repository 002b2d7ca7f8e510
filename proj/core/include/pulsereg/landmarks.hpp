#pragma once

// Landmark files: one point per line as three numbers separated by
// whitespace and/or commas. Lines starting with '#' are comments, except the
// directives
//   # space: voxel | mm     coordinate space (overrides the caller's tag)
//   # base: 0 | 1           index base of voxel coordinates (default 0)
// Voxel coordinates are converted to mm with the volume grid
// (origin + index * spacing).

#include <filesystem>
#include <optional>
#include <vector>

#include "pulsereg/geometry.hpp"

namespace pulsereg {

enum class CoordinateSpace { Voxel, Millimeter };

struct LandmarkSet {
  std::vector<Vec3> points;  // mm
  CoordinateSpace source_space = CoordinateSpace::Millimeter;
};

/// Reads a landmark file. A coordinate space must come from either the file
/// directive or `space`; having neither is an error.
LandmarkSet read_landmarks(const std::filesystem::path& path, std::optional<CoordinateSpace> space, const Grid& grid);

/// Writes mm coordinates with a `# space: mm` directive.
void write_landmarks(const std::filesystem::path& path, const std::vector<Vec3>& points_mm);

}  // namespace pulsereg
