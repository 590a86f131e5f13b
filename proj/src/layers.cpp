#include "asd/layers.hpp"

#include <cmath>

namespace asd {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d:
      return "conv2d";
    case LayerKind::batchnorm:
      return "batchnorm";
    case LayerKind::relu:
      return "relu";
    case LayerKind::maxpool2x2:
      return "maxpool2x2";
    case LayerKind::upsample2x:
      return "upsample2x";
    case LayerKind::flatten:
      return "flatten";
    case LayerKind::reshape:
      return "reshape";
    case LayerKind::dense:
      return "dense";
  }
  return "unknown";
}

namespace {

template <typename T>
void glorot_uniform(Tensor<T>& w, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : w.values()) v = static_cast<T>(rng.uniform(-limit, limit));
}

template <typename T>
void assign_grad(Tensor<T>& param, const Tensor<T>& grad) {
  param.ensure_grad();
  std::copy(grad.values().begin(), grad.values().end(), param.grad().begin());
}

}  // namespace

// --- conv2d

template <typename T>
Conv2dLayer<T>::Conv2dLayer(std::string name, std::size_t in_channels, std::size_t out_channels)
    : Layer<T>(std::move(name)), weight_({out_channels, in_channels, 3, 3}), bias_({out_channels}) {}

template <typename T>
void Conv2dLayer<T>::initialize(Rng& rng) {
  const std::size_t c_out = weight_.dim(0), c_in = weight_.dim(1);
  glorot_uniform(weight_, c_in * 9, c_out * 9, rng);
  std::fill(bias_.values().begin(), bias_.values().end(), T{0});
}

template <typename T>
Tensor<T> Conv2dLayer<T>::forward(const Tensor<T>& input, Mode /*mode*/) {
  saved_input_ = input;
  return conv2d(input, weight_, bias_);
}

template <typename T>
Tensor<T> Conv2dLayer<T>::backward(const Tensor<T>& grad_out) {
  auto g = conv2d_backward(grad_out, saved_input_, weight_);
  assign_grad(weight_, g.weight);
  assign_grad(bias_, g.bias);
  return std::move(g.input);
}

template <typename T>
Shape Conv2dLayer<T>::output_shape(const Shape& in) const {
  if (in.size() != 3 || in[0] != weight_.dim(1)) {
    throw ShapeError(this->name() + ": expected [" + std::to_string(weight_.dim(1)) + ",H,W] input, got " +
                     shape_string(in));
  }
  return {weight_.dim(0), in[1], in[2]};
}

template <typename T>
void Conv2dLayer<T>::collect_params(std::vector<ParamRef<T>>& out) {
  out.push_back({this->name() + ".weight", &weight_});
  out.push_back({this->name() + ".bias", &bias_});
}

template <typename T>
std::unique_ptr<Layer<T>> Conv2dLayer<T>::clone() const {
  auto copy = std::make_unique<Conv2dLayer<T>>(this->name(), weight_.dim(1), weight_.dim(0));
  copy->weight_ = weight_;
  copy->bias_ = bias_;
  return copy;
}

// --- batchnorm

template <typename T>
BatchNormLayer<T>::BatchNormLayer(std::string name, std::size_t channels)
    : Layer<T>(std::move(name)), params_(BatchNormParams<T>::identity(channels)) {}

template <typename T>
Tensor<T> BatchNormLayer<T>::forward(const Tensor<T>& input, Mode mode) {
  return batchnorm(input, params_, mode, &cache_);
}

template <typename T>
Tensor<T> BatchNormLayer<T>::backward(const Tensor<T>& grad_out) {
  auto g = batchnorm_backward(grad_out, cache_, params_);
  assign_grad(params_.gamma, g.gamma);
  assign_grad(params_.beta, g.beta);
  return std::move(g.input);
}

template <typename T>
void BatchNormLayer<T>::collect_params(std::vector<ParamRef<T>>& out) {
  out.push_back({this->name() + ".gamma", &params_.gamma});
  out.push_back({this->name() + ".beta", &params_.beta});
}

template <typename T>
void BatchNormLayer<T>::collect_buffers(std::vector<ParamRef<T>>& out) {
  out.push_back({this->name() + ".running_mean", &params_.running_mean});
  out.push_back({this->name() + ".running_var", &params_.running_var});
}

template <typename T>
std::unique_ptr<Layer<T>> BatchNormLayer<T>::clone() const {
  auto copy = std::make_unique<BatchNormLayer<T>>(this->name(), params_.gamma.size());
  copy->params_ = params_;
  return copy;
}

// --- relu

template <typename T>
Tensor<T> ReluLayer<T>::forward(const Tensor<T>& input, Mode /*mode*/) {
  saved_input_ = input;
  return relu(input);
}

template <typename T>
Tensor<T> ReluLayer<T>::backward(const Tensor<T>& grad_out) {
  return relu_backward(grad_out, saved_input_);
}

template <typename T>
void ReluLayer<T>::hash_activation_pattern(Fnv1a& h) const {
  std::uint8_t byte = 0;
  std::size_t bit = 0;
  for (T v : saved_input_.values()) {
    byte = static_cast<std::uint8_t>(byte | ((v > T{0} ? 1U : 0U) << bit));
    if (++bit == 8) {
      h.update(std::as_bytes(std::span(&byte, 1)));
      byte = 0;
      bit = 0;
    }
  }
  h.update(std::as_bytes(std::span(&byte, 1)));
}

template <typename T>
std::unique_ptr<Layer<T>> ReluLayer<T>::clone() const {
  return std::make_unique<ReluLayer<T>>(this->name());
}

// --- maxpool

template <typename T>
Tensor<T> MaxPoolLayer<T>::forward(const Tensor<T>& input, Mode /*mode*/) {
  input_shape_ = input.shape();
  auto r = maxpool2x2(input);
  argmax_ = std::move(r.argmax);
  return std::move(r.output);
}

template <typename T>
Tensor<T> MaxPoolLayer<T>::backward(const Tensor<T>& grad_out) {
  return maxpool2x2_backward(grad_out, argmax_, input_shape_);
}

template <typename T>
Shape MaxPoolLayer<T>::output_shape(const Shape& in) const {
  if (in.size() != 3 || in[1] % 2 != 0 || in[2] % 2 != 0) {
    throw ShapeError(this->name() + ": needs [C,H,W] with even H and W, got " + shape_string(in));
  }
  return {in[0], in[1] / 2, in[2] / 2};
}

template <typename T>
void MaxPoolLayer<T>::hash_activation_pattern(Fnv1a& h) const {
  h.update(std::as_bytes(std::span(argmax_)));
}

template <typename T>
std::unique_ptr<Layer<T>> MaxPoolLayer<T>::clone() const {
  return std::make_unique<MaxPoolLayer<T>>(this->name());
}

// --- upsample

template <typename T>
Tensor<T> UpsampleLayer<T>::forward(const Tensor<T>& input, Mode /*mode*/) {
  return upsample2x(input);
}

template <typename T>
Tensor<T> UpsampleLayer<T>::backward(const Tensor<T>& grad_out) {
  return upsample2x_backward(grad_out);
}

template <typename T>
Shape UpsampleLayer<T>::output_shape(const Shape& in) const {
  if (in.size() != 3) throw ShapeError(this->name() + ": needs [C,H,W], got " + shape_string(in));
  return {in[0], 2 * in[1], 2 * in[2]};
}

template <typename T>
std::unique_ptr<Layer<T>> UpsampleLayer<T>::clone() const {
  return std::make_unique<UpsampleLayer<T>>(this->name());
}

// --- flatten / reshape

template <typename T>
Tensor<T> FlattenLayer<T>::forward(const Tensor<T>& input, Mode /*mode*/) {
  input_shape_ = input.shape();
  Tensor<T> out = input;
  out.reshape({input.dim(0), input.size() / std::max<std::size_t>(input.dim(0), 1)});
  return out;
}

template <typename T>
Tensor<T> FlattenLayer<T>::backward(const Tensor<T>& grad_out) {
  Tensor<T> g = grad_out;
  g.reshape(input_shape_);
  return g;
}

template <typename T>
std::unique_ptr<Layer<T>> FlattenLayer<T>::clone() const {
  return std::make_unique<FlattenLayer<T>>(this->name());
}

template <typename T>
Tensor<T> ReshapeLayer<T>::forward(const Tensor<T>& input, Mode /*mode*/) {
  input_shape_ = input.shape();
  Shape full{input.dim(0)};
  full.insert(full.end(), target_.begin(), target_.end());
  Tensor<T> out = input;
  out.reshape(std::move(full));
  return out;
}

template <typename T>
Tensor<T> ReshapeLayer<T>::backward(const Tensor<T>& grad_out) {
  Tensor<T> g = grad_out;
  g.reshape(input_shape_);
  return g;
}

template <typename T>
Shape ReshapeLayer<T>::output_shape(const Shape& in) const {
  if (shape_size(in) != shape_size(target_)) {
    throw ShapeError(this->name() + ": cannot reshape " + shape_string(in) + " to " + shape_string(target_));
  }
  return target_;
}

template <typename T>
std::unique_ptr<Layer<T>> ReshapeLayer<T>::clone() const {
  return std::make_unique<ReshapeLayer<T>>(this->name(), target_);
}

// --- dense

template <typename T>
DenseLayer<T>::DenseLayer(std::string name, std::size_t in_features, std::size_t out_features)
    : Layer<T>(std::move(name)), weight_({in_features, out_features}), bias_({out_features}) {}

template <typename T>
void DenseLayer<T>::initialize(Rng& rng) {
  glorot_uniform(weight_, weight_.dim(0), weight_.dim(1), rng);
  std::fill(bias_.values().begin(), bias_.values().end(), T{0});
}

template <typename T>
Tensor<T> DenseLayer<T>::forward(const Tensor<T>& input, Mode /*mode*/) {
  saved_input_ = input;
  return dense(input, weight_, bias_);
}

template <typename T>
Tensor<T> DenseLayer<T>::backward(const Tensor<T>& grad_out) {
  auto g = dense_backward(grad_out, saved_input_, weight_);
  assign_grad(weight_, g.weight);
  assign_grad(bias_, g.bias);
  return std::move(g.input);
}

template <typename T>
Shape DenseLayer<T>::output_shape(const Shape& in) const {
  if (in.size() != 1 || in[0] != weight_.dim(0)) {
    throw ShapeError(this->name() + ": expected [" + std::to_string(weight_.dim(0)) + "] input, got " +
                     shape_string(in));
  }
  return {weight_.dim(1)};
}

template <typename T>
void DenseLayer<T>::collect_params(std::vector<ParamRef<T>>& out) {
  out.push_back({this->name() + ".weight", &weight_});
  out.push_back({this->name() + ".bias", &bias_});
}

template <typename T>
std::unique_ptr<Layer<T>> DenseLayer<T>::clone() const {
  auto copy = std::make_unique<DenseLayer<T>>(this->name(), weight_.dim(0), weight_.dim(1));
  copy->weight_ = weight_;
  copy->bias_ = bias_;
  return copy;
}

// --- sequential

template <typename T>
Sequential<T>::Sequential(const Sequential& other) {
  layers_.reserve(other.layers_.size());
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

template <typename T>
Sequential<T>& Sequential<T>::operator=(const Sequential& other) {
  if (this != &other) {
    Sequential copy(other);
    layers_ = std::move(copy.layers_);
  }
  return *this;
}

template <typename T>
Tensor<T> Sequential<T>::forward(const Tensor<T>& input, Mode mode) {
  if (layers_.empty()) return input;
  Tensor<T> x = layers_.front()->forward(input, mode);
  for (std::size_t i = 1; i < layers_.size(); ++i) x = layers_[i]->forward(x, mode);
  return x;
}

template <typename T>
Tensor<T> Sequential<T>::backward(const Tensor<T>& grad_out) {
  if (layers_.empty()) return grad_out;
  Tensor<T> g = layers_.back()->backward(grad_out);
  for (std::size_t i = layers_.size() - 1; i-- > 0;) g = layers_[i]->backward(g);
  return g;
}

template <typename T>
Shape Sequential<T>::output_shape(Shape input_shape) const {
  for (const auto& l : layers_) input_shape = l->output_shape(input_shape);
  return input_shape;
}

template <typename T>
std::vector<ParamRef<T>> Sequential<T>::params() {
  std::vector<ParamRef<T>> out;
  for (auto& l : layers_) l->collect_params(out);
  return out;
}

template <typename T>
std::vector<ParamRef<T>> Sequential<T>::buffers() {
  std::vector<ParamRef<T>> out;
  for (auto& l : layers_) l->collect_buffers(out);
  return out;
}

template <typename T>
void Sequential<T>::hash_activation_pattern(Fnv1a& h) const {
  for (const auto& l : layers_) l->hash_activation_pattern(h);
}

template <typename T>
void Sequential<T>::release_cache() {
  for (auto& l : layers_) l->release_cache();
}

#define ASD_INSTANTIATE_LAYERS(T)    \
  template class Conv2dLayer<T>;     \
  template class BatchNormLayer<T>;  \
  template class ReluLayer<T>;       \
  template class MaxPoolLayer<T>;    \
  template class UpsampleLayer<T>;   \
  template class FlattenLayer<T>;    \
  template class ReshapeLayer<T>;    \
  template class DenseLayer<T>;      \
  template class Sequential<T>;

ASD_INSTANTIATE_LAYERS(float)
ASD_INSTANTIATE_LAYERS(double)

#undef ASD_INSTANTIATE_LAYERS

}  // namespace asd
