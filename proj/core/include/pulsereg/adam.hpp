#pragma once

#include <span>
#include <vector>

#include "pulsereg/graph.hpp"

namespace pulsereg {

struct AdamConfig {
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment estimates for one parameter list.
template <typename T>
struct AdamState {
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  long step = 0;
};

/// One bias-corrected Adam update using the gradients stored on `params`.
/// The state is sized on first use; later calls must pass the same layout.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, const AdamConfig& config);

extern template void adam_step<float>(std::span<Tensor<float>>, AdamState<float>&, const AdamConfig&);
extern template void adam_step<double>(std::span<Tensor<double>>, AdamState<double>&, const AdamConfig&);

}  // namespace pulsereg
