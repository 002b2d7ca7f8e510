#include "pulsereg/graph.hpp"

#include <algorithm>

namespace pulsereg {

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw InvalidArgument("Tensor::item: tensor of shape " + to_string(shape()) + " is not a scalar");
  return node_->value.values[0];
}

template <typename T>
std::vector<T>& Tensor<T>::grad_buffer() const {
  if (node_->grad.size() != node_->value.values.size()) node_->grad.assign(node_->value.values.size(), T{});
  return node_->grad;
}

template <typename T>
void Graph<T>::register_parameter(Tensor<T> param) {
  if (!param.defined() || !param.requires_grad())
    throw InvalidArgument("Graph::register_parameter: parameter must be a defined tensor that requires grad");
  for (const auto& p : params_)
    if (p.same_as(param)) throw InvalidArgument("Graph::register_parameter: parameter registered twice");
  param.grad_buffer();
  params_.push_back(std::move(param));
}

template <typename T>
void Graph<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw InvalidArgument("Graph::backward: loss must be a scalar, got shape " +
                          (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  if (!loss.requires_grad()) throw InvalidArgument("Graph::backward: loss does not depend on any parameter");

  for (auto& e : tape_) {
    auto& g = e.output.grad_buffer();
    std::fill(g.begin(), g.end(), T{});
  }
  Tensor<T> seed = loss;
  seed.grad_buffer()[0] += T{1};
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) it->backward();
}

template <typename T>
void Graph<T>::zero_parameter_grads() {
  for (auto& p : params_) p.zero_grad();
}

template class Tensor<float>;
template class Tensor<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace pulsereg
