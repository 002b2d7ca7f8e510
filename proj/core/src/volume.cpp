#include "pulsereg/volume.hpp"

#include <cmath>

namespace pulsereg {

void Volume4D::validate() const {
  if (images.rank() != 4) throw InvalidArgument("Volume4D: images must be N x D x H x W, got " + to_string(images.shape));
  if (phases() < 2) throw InvalidArgument("Volume4D: need at least 2 phases, got " + std::to_string(phases()));
  const Extent3 e{images.dim(3), images.dim(2), images.dim(1)};
  if (!(grid.dims == e)) throw InvalidArgument("Volume4D: grid extents do not match the image array");
  if (!(grid.spacing.x > 0 && grid.spacing.y > 0 && grid.spacing.z > 0))
    throw InvalidArgument("Volume4D: spacing must be positive");
  for (const float v : images.values)
    if (!std::isfinite(v)) throw InvalidArgument("Volume4D: non-finite intensity");
  if (mask && mask->shape != Shape{1, e.z, e.y, e.x})
    throw InvalidArgument("Volume4D: mask shape " + to_string(mask->shape) + " does not match the images");
}

Volume4D stack_phases(const std::vector<Array<float>>& phases, const Grid& grid) {
  if (phases.empty()) throw InvalidArgument("stack_phases: no phases");
  const Shape expect{1, grid.dims.z, grid.dims.y, grid.dims.x};
  Volume4D v;
  v.grid = grid;
  v.images = Array<float>(Shape{static_cast<std::int64_t>(phases.size()), grid.dims.z, grid.dims.y, grid.dims.x});
  auto it = v.images.values.begin();
  for (std::size_t n = 0; n < phases.size(); ++n) {
    if (numel(phases[n].shape) != numel(expect))
      throw InvalidArgument("stack_phases: phase " + std::to_string(n) + " has shape " + to_string(phases[n].shape) +
                            ", expected " + to_string(expect));
    it = std::copy(phases[n].values.begin(), phases[n].values.end(), it);
  }
  return v;
}

}  // namespace pulsereg
