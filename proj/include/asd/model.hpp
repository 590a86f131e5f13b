#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "asd/frontend.hpp"
#include "asd/layers.hpp"

namespace asd {

enum class ModelFamily { unsupervised, semisupervised, baseline_dense };

std::string_view to_string(ModelFamily family);
ModelFamily parse_model_family(std::string_view text);

// Convolutional autoencoder geometry. Inputs are [1, n_bins, frames] images.
struct AEConfig {
  std::size_t n_bins = 64;
  std::size_t frames = 64;
  std::vector<std::size_t> encoder_filters{32, 64, 128};
  std::size_t bottleneck = 128;
  // Semi-supervised only: one class per machine type.
  std::vector<std::string> class_names;
  double alpha = 1.0;
  double beta = 0.0;

  std::size_t n_classes() const noexcept { return class_names.size(); }
};

// Frame-stacked log-Mel dense autoencoder.
struct BaselineConfig {
  std::size_t input_dim = 640;
  std::size_t hidden = 128;
  std::size_t hidden_layers = 4;
  std::size_t bottleneck = 8;
};

struct ModelConfig {
  ModelFamily family = ModelFamily::unsupervised;
  AEConfig ae;
  BaselineConfig baseline;

  // Throws ConfigError naming the first violated constraint.
  void validate() const;
  // Per-sample input shape.
  Shape input_shape() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

// Provenance of a trained model: which features and normalization it expects
// and which run produced it.
struct ModelMetadata {
  std::string config_hash;
  FrontendTag frontend_tag = FrontendTag::gammatone64;
  std::string frontend_hash;
  std::string norm_stats_hash;
  std::string run_config_hash;

  nlohmann::json to_json() const;
  static ModelMetadata from_json(const nlohmann::json& j);
};

template <typename T>
struct ModelOutput {
  Tensor<T> bottleneck;
  Tensor<T> reconstruction;
  // Empty unless the model has a classification head and it was requested.
  Tensor<T> logits;
};

// encoder: input -> bottleneck activation
// decoder: bottleneck -> reconstruction
// classifier (semi-supervised): bottleneck -> logits
template <typename T>
class ModelGraph {
 public:
  ModelConfig config;
  ModelMetadata metadata;
  Sequential<T> encoder;
  Sequential<T> decoder;
  std::optional<Sequential<T>> classifier;

  Shape input_shape() const { return config.input_shape(); }
  bool has_classifier() const noexcept { return classifier.has_value(); }

  ModelOutput<T> forward(const Tensor<T>& input, Mode mode, bool run_classifier = true);
  // Follows forward(). grad_logits may be null (no classification loss).
  // Writes every parameter gradient and returns the input gradient.
  Tensor<T> backward(const Tensor<T>& grad_reconstruction, const Tensor<T>* grad_logits);

  std::vector<ParamRef<T>> params();
  std::vector<ParamRef<T>> buffers();
  std::size_t parameter_count();
  std::size_t buffer_count();
  void hash_activation_pattern(Fnv1a& h) const;
  void release_cache();
};

// Builds and initializes (Glorot-uniform weights, zero biases, identity BN)
// from the "init" substream of seed. The classification head is initialized
// after everything else, so the shared layers of a semi-supervised model
// match the unsupervised model built from the same seed.
template <typename T>
ModelGraph<T> build_model(const ModelConfig& config, std::uint64_t seed);

template <typename T>
ModelGraph<T> build_unsupervised(const AEConfig& config, std::uint64_t seed);
template <typename T>
ModelGraph<T> build_semisupervised(const AEConfig& config, std::uint64_t seed);
template <typename T>
ModelGraph<T> build_baseline_dense(const BaselineConfig& config, std::uint64_t seed);

// Start frames of the fixed-width segments cut from a T-frame spectrogram:
// regular hops, plus one segment anchored at T - frames when the hops leave
// the tail uncovered. A clip shorter than one segment yields {0}.
std::vector<std::size_t> segment_starts(std::size_t n_frames, std::size_t frames_per_segment, std::size_t hop);

// [S, 1, F, frames_per_segment]. Clips shorter than one segment are
// reflection-padded at the end.
template <typename T>
Tensor<T> segment_spectrogram(const Spectrogram& spec, std::size_t frames_per_segment, std::size_t hop);

// Index of a frame position t in a reflection-padded sequence of length n.
std::size_t reflect_index(std::size_t t, std::size_t n);

}  // namespace asd
