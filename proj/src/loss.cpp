#include "dgl/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace dgl {

template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t B = logits.shape().batch;
  const std::size_t C = logits.shape().per_sample();
  if (labels.size() != B)
    throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                                std::to_string(B));
  LossResult<T> r;
  r.grad = Tensor<T>(logits.shape());
  T total = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= C)
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(C) +
                              ")");
    const T* z = logits.data() + b * C;
    T* g = r.grad.data() + b * C;
    const T zmax = *std::max_element(z, z + C);
    T sum = 0;
    for (std::size_t c = 0; c < C; ++c) sum += std::exp(z[c] - zmax);
    const T log_sum = std::log(sum) + zmax;
    total += log_sum - z[y];
    std::size_t arg = 0;
    for (std::size_t c = 0; c < C; ++c) {
      g[c] = std::exp(z[c] - log_sum) / static_cast<T>(B);
      if (z[c] > z[arg]) arg = c;
    }
    g[y] -= T{1} / static_cast<T>(B);
    if (arg == static_cast<std::size_t>(y)) ++r.correct;
  }
  r.loss = total / static_cast<T>(B);
  return r;
}

template <typename T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t B = logits.shape().batch;
  const std::size_t C = logits.shape().per_sample();
  std::size_t correct = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const T* z = logits.data() + b * C;
    const auto arg = static_cast<int>(std::max_element(z, z + C) - z);
    if (arg == labels[b]) ++correct;
  }
  return correct;
}

template LossResult<float> cross_entropy<float>(const Tensor<float>&, std::span<const int>);
template LossResult<double> cross_entropy<double>(const Tensor<double>&, std::span<const int>);
template std::size_t count_correct<float>(const Tensor<float>&, std::span<const int>);
template std::size_t count_correct<double>(const Tensor<double>&, std::span<const int>);

}  // namespace dgl
