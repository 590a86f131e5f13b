#pragma once

// Forward and backward kernels for every operator the autoencoders use.
// Image tensors are NCHW; dense tensors are [batch, features].

#include <cstdint>
#include <span>
#include <vector>

#include "asd/tensor.hpp"

namespace asd {

enum class Mode { train, inference };

inline constexpr double kBatchNormMomentum = 0.99;
inline constexpr double kBatchNormEps = 1e-3;

template <typename T>
struct Conv2dGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

// 3x3 cross-correlation, stride 1, zero padding 1. weight is
// [C_out, C_in, 3, 3], bias [C_out].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& saved_input, const Tensor<T>& weight);

// Batch normalization over every axis except 1 (channels / features).
template <typename T>
struct BatchNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double momentum = kBatchNormMomentum;
  double eps = kBatchNormEps;

  static BatchNormParams identity(std::size_t channels);
};

template <typename T>
struct BatchNormCache {
  Mode mode = Mode::train;
  Tensor<T> x_hat;
  std::vector<double> inv_std;
};

template <typename T>
struct BatchNormGrads {
  Tensor<T> input;
  Tensor<T> gamma;
  Tensor<T> beta;
};

// Train mode normalizes with batch statistics and folds them into the
// running estimates; inference mode uses the running estimates only.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, BatchNormParams<T>& params, Mode mode, BatchNormCache<T>* cache = nullptr);

template <typename T>
BatchNormGrads<T> batchnorm_backward(const Tensor<T>& grad_out, const BatchNormCache<T>& cache,
                                     const BatchNormParams<T>& params);

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

// Subgradient at exactly 0 is 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& saved_input);

template <typename T>
struct PoolResult {
  Tensor<T> output;
  // flat input index of the selected cell for every output cell
  std::vector<std::uint32_t> argmax;
};

// Non-overlapping 2x2 max; ties go to the first cell in row-major scan order.
template <typename T>
PoolResult<T> maxpool2x2(const Tensor<T>& input);

template <typename T>
Tensor<T> maxpool2x2_backward(const Tensor<T>& grad_out, std::span<const std::uint32_t> argmax,
                              const Shape& input_shape);

// Nearest-neighbour 2x upsampling.
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& input);

template <typename T>
Tensor<T> upsample2x_backward(const Tensor<T>& grad_out);

template <typename T>
struct DenseGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

// out = input * weight + bias, weight is [D_in, D_out].
template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& grad_out, const Tensor<T>& saved_input, const Tensor<T>& weight);

template <typename T>
struct LossResult {
  double value = 0.0;
  Tensor<T> grad;
};

template <typename T>
LossResult<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target);

// Row-wise softmax with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
LossResult<T> softmax_cce_loss(const Tensor<T>& logits, std::span<const int> labels);

}  // namespace asd
