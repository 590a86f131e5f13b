#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "asd/hash.hpp"
#include "asd/ops.hpp"
#include "asd/rng.hpp"
#include "asd/tensor.hpp"

namespace asd {

enum class LayerKind { conv2d, batchnorm, relu, maxpool2x2, upsample2x, flatten, reshape, dense };

std::string_view to_string(LayerKind kind);

// Named handle on a tensor owned by a layer. Trainable parameters carry a
// gradient slot; buffers (BN running statistics) do not.
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor = nullptr;
};

// Each layer caches what its backward pass needs during forward. Backward
// must follow the matching forward and writes parameter gradients
// (overwriting, not accumulating).
template <typename T>
class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;

  const std::string& name() const noexcept { return name_; }
  virtual LayerKind kind() const noexcept = 0;

  virtual Tensor<T> forward(const Tensor<T>& input, Mode mode) = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;

  // Per-sample output shape (batch axis excluded).
  virtual Shape output_shape(const Shape& input_shape) const = 0;

  virtual void collect_params(std::vector<ParamRef<T>>& /*out*/) {}
  virtual void collect_buffers(std::vector<ParamRef<T>>& /*out*/) {}

  // Folds the discrete choices of the last forward pass (ReLU masks, pooling
  // winners) into h. Finite-difference probes use it to detect kinks.
  virtual void hash_activation_pattern(Fnv1a& /*h*/) const {}

  virtual void release_cache() {}
  virtual std::unique_ptr<Layer<T>> clone() const = 0;

  // Units of a conv/dense layer (0 for parameter-free layers).
  virtual std::size_t units() const noexcept { return 0; }

 private:
  std::string name_;
};

template <typename T>
class Conv2dLayer final : public Layer<T> {
 public:
  Conv2dLayer(std::string name, std::size_t in_channels, std::size_t out_channels);

  LayerKind kind() const noexcept override { return LayerKind::conv2d; }
  Tensor<T> forward(const Tensor<T>& input, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  Shape output_shape(const Shape& in) const override;
  void collect_params(std::vector<ParamRef<T>>& out) override;
  void release_cache() override { saved_input_ = Tensor<T>(); }
  std::unique_ptr<Layer<T>> clone() const override;
  std::size_t units() const noexcept override { return weight_.dim(0); }

  // Glorot-uniform weights, zero bias.
  void initialize(Rng& rng);

  Tensor<T>& weight() noexcept { return weight_; }
  Tensor<T>& bias() noexcept { return bias_; }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
  Tensor<T> saved_input_;
};

template <typename T>
class BatchNormLayer final : public Layer<T> {
 public:
  BatchNormLayer(std::string name, std::size_t channels);

  LayerKind kind() const noexcept override { return LayerKind::batchnorm; }
  Tensor<T> forward(const Tensor<T>& input, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  Shape output_shape(const Shape& in) const override { return in; }
  void collect_params(std::vector<ParamRef<T>>& out) override;
  void collect_buffers(std::vector<ParamRef<T>>& out) override;
  void release_cache() override { cache_ = BatchNormCache<T>(); }
  std::unique_ptr<Layer<T>> clone() const override;

  BatchNormParams<T>& params() noexcept { return params_; }

 private:
  BatchNormParams<T> params_;
  BatchNormCache<T> cache_;
};

template <typename T>
class ReluLayer final : public Layer<T> {
 public:
  using Layer<T>::Layer;

  LayerKind kind() const noexcept override { return LayerKind::relu; }
  Tensor<T> forward(const Tensor<T>& input, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  Shape output_shape(const Shape& in) const override { return in; }
  void hash_activation_pattern(Fnv1a& h) const override;
  void release_cache() override { saved_input_ = Tensor<T>(); }
  std::unique_ptr<Layer<T>> clone() const override;

 private:
  Tensor<T> saved_input_;
};

template <typename T>
class MaxPoolLayer final : public Layer<T> {
 public:
  using Layer<T>::Layer;

  LayerKind kind() const noexcept override { return LayerKind::maxpool2x2; }
  Tensor<T> forward(const Tensor<T>& input, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  Shape output_shape(const Shape& in) const override;
  void hash_activation_pattern(Fnv1a& h) const override;
  void release_cache() override { argmax_.clear(); }
  std::unique_ptr<Layer<T>> clone() const override;

 private:
  Shape input_shape_;
  std::vector<std::uint32_t> argmax_;
};

template <typename T>
class UpsampleLayer final : public Layer<T> {
 public:
  using Layer<T>::Layer;

  LayerKind kind() const noexcept override { return LayerKind::upsample2x; }
  Tensor<T> forward(const Tensor<T>& input, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  Shape output_shape(const Shape& in) const override;
  std::unique_ptr<Layer<T>> clone() const override;
};

// [B, ...] -> [B, prod(...)]
template <typename T>
class FlattenLayer final : public Layer<T> {
 public:
  using Layer<T>::Layer;

  LayerKind kind() const noexcept override { return LayerKind::flatten; }
  Tensor<T> forward(const Tensor<T>& input, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  Shape output_shape(const Shape& in) const override { return {shape_size(in)}; }
  std::unique_ptr<Layer<T>> clone() const override;

 private:
  Shape input_shape_;
};

// [B, prod(target)] -> [B, target...]
template <typename T>
class ReshapeLayer final : public Layer<T> {
 public:
  ReshapeLayer(std::string name, Shape target) : Layer<T>(std::move(name)), target_(std::move(target)) {}

  LayerKind kind() const noexcept override { return LayerKind::reshape; }
  Tensor<T> forward(const Tensor<T>& input, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  Shape output_shape(const Shape& in) const override;
  std::unique_ptr<Layer<T>> clone() const override;

  const Shape& target() const noexcept { return target_; }

 private:
  Shape target_;
  Shape input_shape_;
};

template <typename T>
class DenseLayer final : public Layer<T> {
 public:
  DenseLayer(std::string name, std::size_t in_features, std::size_t out_features);

  LayerKind kind() const noexcept override { return LayerKind::dense; }
  Tensor<T> forward(const Tensor<T>& input, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  Shape output_shape(const Shape& in) const override;
  void collect_params(std::vector<ParamRef<T>>& out) override;
  void release_cache() override { saved_input_ = Tensor<T>(); }
  std::unique_ptr<Layer<T>> clone() const override;
  std::size_t units() const noexcept override { return weight_.dim(1); }

  void initialize(Rng& rng);

  Tensor<T>& weight() noexcept { return weight_; }
  Tensor<T>& bias() noexcept { return bias_; }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
  Tensor<T> saved_input_;
};

template <typename T>
class Sequential {
 public:
  Sequential() = default;
  Sequential(const Sequential& other);
  Sequential& operator=(const Sequential& other);
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  Tensor<T> forward(const Tensor<T>& input, Mode mode);
  Tensor<T> backward(const Tensor<T>& grad_out);

  Shape output_shape(Shape input_shape) const;
  std::vector<ParamRef<T>> params();
  std::vector<ParamRef<T>> buffers();
  void hash_activation_pattern(Fnv1a& h) const;
  void release_cache();

  std::size_t size() const noexcept { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_.at(i); }
  const Layer<T>& layer(std::size_t i) const { return *layers_.at(i); }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

}  // namespace asd
