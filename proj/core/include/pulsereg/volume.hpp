#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pulsereg/array.hpp"
#include "pulsereg/geometry.hpp"
#include "pulsereg/loss.hpp"

namespace pulsereg {

/// N scalar phase images on one grid, stored as N x D x H x W.
struct Volume4D {
  Array<float> images;
  Grid grid;
  std::optional<Mask> mask;          // 1 x D x H x W
  std::vector<std::string> sources;  // where each phase came from, if anywhere

  [[nodiscard]] int phases() const { return images.rank() == 4 ? static_cast<int>(images.dim(0)) : 0; }
  /// Throws unless N >= 2, the grid matches the arrays and all values are finite.
  void validate() const;
};

/// Stacks equally shaped 1 x D x H x W (or D x H x W) phase images.
Volume4D stack_phases(const std::vector<Array<float>>& phases, const Grid& grid);

}  // namespace pulsereg
