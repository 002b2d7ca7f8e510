#include "pulsereg/adam.hpp"

#include <cmath>
#include <string>

namespace pulsereg {

template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, const AdamConfig& config) {
  if (state.step == 0 && state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(static_cast<std::size_t>(p.numel()), T{});
      state.second_moment.emplace_back(static_cast<std::size_t>(p.numel()), T{});
    }
  }
  if (state.first_moment.size() != params.size())
    throw InvalidArgument("adam_step: state tracks " + std::to_string(state.first_moment.size()) +
                          " parameters, got " + std::to_string(params.size()));
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(config.beta1), b2 = static_cast<T>(config.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (static_cast<std::int64_t>(m.size()) != p.numel())
      throw InvalidArgument("adam_step: state for parameter " + std::to_string(i) + " has " +
                            std::to_string(m.size()) + " entries, parameter has " + std::to_string(p.numel()));
    if (!p.has_grad()) continue;
    const auto& grad = p.grad();
    auto& w = p.mutable_value().values;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const T gj = grad[j];
      m[j] = b1 * m[j] + (T{1} - b1) * gj;
      v[j] = b2 * v[j] + (T{1} - b2) * gj * gj;
      const double mhat = static_cast<double>(m[j]) / c1;
      const double vhat = static_cast<double>(v[j]) / c2;
      w[j] = static_cast<T>(static_cast<double>(w[j]) - config.learning_rate * mhat / (std::sqrt(vhat) + config.epsilon));
    }
  }
}

template void adam_step<float>(std::span<Tensor<float>>, AdamState<float>&, const AdamConfig&);
template void adam_step<double>(std::span<Tensor<double>>, AdamState<double>&, const AdamConfig&);

}  // namespace pulsereg
