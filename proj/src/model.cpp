#include "asd/model.hpp"

#include <algorithm>
#include <cmath>

#include "asd/errors.hpp"
#include "asd/hash.hpp"
#include "asd/rng.hpp"

namespace asd {

std::string_view to_string(ModelFamily family) {
  switch (family) {
    case ModelFamily::unsupervised:
      return "unsupervised";
    case ModelFamily::semisupervised:
      return "semisupervised";
    case ModelFamily::baseline_dense:
      return "baseline-dense";
  }
  return "unknown";
}

ModelFamily parse_model_family(std::string_view text) {
  if (text == "unsupervised") return ModelFamily::unsupervised;
  if (text == "semisupervised" || text == "semi-supervised") return ModelFamily::semisupervised;
  if (text == "baseline-dense" || text == "baseline_dense" || text == "baseline") return ModelFamily::baseline_dense;
  throw ConfigError("unknown model family '" + std::string(text) +
                    "' (expected unsupervised, semisupervised or baseline-dense)");
}

namespace {

constexpr double kLossWeightTolerance = 1e-9;

void validate_ae(const AEConfig& c, ModelFamily family) {
  if (c.encoder_filters.size() != 3) {
    throw ConfigError("encoder_filters must list exactly 3 filter counts, got " +
                      std::to_string(c.encoder_filters.size()));
  }
  for (std::size_t f : c.encoder_filters) {
    if (f == 0) throw ConfigError("encoder filter counts must be positive");
  }
  if (c.n_bins == 0 || c.frames == 0 || c.n_bins % 8 != 0 || c.frames % 8 != 0) {
    throw ConfigError("input " + std::to_string(c.n_bins) + "x" + std::to_string(c.frames) +
                      " must have both dimensions divisible by 8 (three 2x poolings)");
  }
  if (c.bottleneck == 0) throw ConfigError("bottleneck width must be positive");
  if (c.alpha < 0.0 || c.beta < 0.0) throw ConfigError("loss weights alpha and beta must be nonnegative");
  if (std::abs(c.alpha + c.beta - 1.0) > kLossWeightTolerance) {
    throw ConfigError("loss weights must satisfy alpha + beta = 1 (got alpha=" + std::to_string(c.alpha) +
                      ", beta=" + std::to_string(c.beta) + ")");
  }
  if (family == ModelFamily::unsupervised) {
    if (!c.class_names.empty()) throw ConfigError("the unsupervised model takes no classes");
    if (c.beta != 0.0) throw ConfigError("the unsupervised model requires alpha=1, beta=0");
  } else {
    if (c.n_classes() < 2) {
      throw ConfigError("the semi-supervised model needs at least 2 classes, got " +
                        std::to_string(c.n_classes()));
    }
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (family == ModelFamily::baseline_dense) {
    if (baseline.input_dim != 640) {
      throw ConfigError("the dense baseline expects 640-dim inputs (128 Mel bins x 5 frames), got " +
                        std::to_string(baseline.input_dim));
    }
    if (baseline.hidden == 0 || baseline.hidden_layers == 0 || baseline.bottleneck == 0) {
      throw ConfigError("dense baseline widths must be positive");
    }
    return;
  }
  validate_ae(ae, family);
}

Shape ModelConfig::input_shape() const {
  if (family == ModelFamily::baseline_dense) return {baseline.input_dim};
  return {1, ae.n_bins, ae.frames};
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json j;
  j["family"] = std::string(to_string(family));
  if (family == ModelFamily::baseline_dense) {
    j["input_dim"] = baseline.input_dim;
    j["hidden"] = baseline.hidden;
    j["hidden_layers"] = baseline.hidden_layers;
    j["bottleneck"] = baseline.bottleneck;
  } else {
    j["n_bins"] = ae.n_bins;
    j["frames"] = ae.frames;
    j["encoder_filters"] = ae.encoder_filters;
    j["bottleneck"] = ae.bottleneck;
    j["class_names"] = ae.class_names;
    j["alpha"] = ae.alpha;
    j["beta"] = ae.beta;
  }
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.family = parse_model_family(j.at("family").get<std::string>());
    if (c.family == ModelFamily::baseline_dense) {
      c.baseline.input_dim = j.at("input_dim").get<std::size_t>();
      c.baseline.hidden = j.at("hidden").get<std::size_t>();
      c.baseline.hidden_layers = j.at("hidden_layers").get<std::size_t>();
      c.baseline.bottleneck = j.at("bottleneck").get<std::size_t>();
    } else {
      c.ae.n_bins = j.at("n_bins").get<std::size_t>();
      c.ae.frames = j.at("frames").get<std::size_t>();
      c.ae.encoder_filters = j.at("encoder_filters").get<std::vector<std::size_t>>();
      c.ae.bottleneck = j.at("bottleneck").get<std::size_t>();
      c.ae.class_names = j.at("class_names").get<std::vector<std::string>>();
      c.ae.alpha = j.at("alpha").get<double>();
      c.ae.beta = j.at("beta").get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  return c;
}

std::string ModelConfig::hash() const { return to_hex(fnv1a(to_json().dump())); }

nlohmann::json ModelMetadata::to_json() const {
  return {{"config_hash", config_hash},
          {"frontend_tag", std::string(to_string(frontend_tag))},
          {"frontend_hash", frontend_hash},
          {"norm_stats_hash", norm_stats_hash},
          {"run_config_hash", run_config_hash}};
}

ModelMetadata ModelMetadata::from_json(const nlohmann::json& j) {
  ModelMetadata m;
  m.config_hash = j.value("config_hash", "");
  m.frontend_tag = parse_frontend_tag(j.value("frontend_tag", "gammatone64"));
  m.frontend_hash = j.value("frontend_hash", "");
  m.norm_stats_hash = j.value("norm_stats_hash", "");
  m.run_config_hash = j.value("run_config_hash", "");
  return m;
}

// --- graph

template <typename T>
ModelOutput<T> ModelGraph<T>::forward(const Tensor<T>& input, Mode mode, bool run_classifier) {
  ModelOutput<T> out;
  out.bottleneck = encoder.forward(input, mode);
  out.reconstruction = decoder.forward(out.bottleneck, mode);
  if (classifier && run_classifier) out.logits = classifier->forward(out.bottleneck, mode);
  return out;
}

template <typename T>
Tensor<T> ModelGraph<T>::backward(const Tensor<T>& grad_reconstruction, const Tensor<T>* grad_logits) {
  Tensor<T> g = decoder.backward(grad_reconstruction);
  if (classifier) {
    if (grad_logits) {
      const Tensor<T> gc = classifier->backward(*grad_logits);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gc[i];
    } else {
      // Keep the head's gradient slots defined (and zero) so the optimizer
      // sees a consistent parameter set.
      for (auto& p : classifier->params()) p.tensor->zero_grad();
    }
  }
  return encoder.backward(g);
}

template <typename T>
std::vector<ParamRef<T>> ModelGraph<T>::params() {
  auto out = encoder.params();
  auto dec = decoder.params();
  out.insert(out.end(), dec.begin(), dec.end());
  if (classifier) {
    auto cls = classifier->params();
    out.insert(out.end(), cls.begin(), cls.end());
  }
  return out;
}

template <typename T>
std::vector<ParamRef<T>> ModelGraph<T>::buffers() {
  auto out = encoder.buffers();
  auto dec = decoder.buffers();
  out.insert(out.end(), dec.begin(), dec.end());
  if (classifier) {
    auto cls = classifier->buffers();
    out.insert(out.end(), cls.begin(), cls.end());
  }
  return out;
}

template <typename T>
std::size_t ModelGraph<T>::parameter_count() {
  std::size_t n = 0;
  for (auto& p : params()) n += p.tensor->size();
  return n;
}

template <typename T>
std::size_t ModelGraph<T>::buffer_count() {
  std::size_t n = 0;
  for (auto& p : buffers()) n += p.tensor->size();
  return n;
}

template <typename T>
void ModelGraph<T>::hash_activation_pattern(Fnv1a& h) const {
  encoder.hash_activation_pattern(h);
  decoder.hash_activation_pattern(h);
  if (classifier) classifier->hash_activation_pattern(h);
}

template <typename T>
void ModelGraph<T>::release_cache() {
  encoder.release_cache();
  decoder.release_cache();
  if (classifier) classifier->release_cache();
}

// --- builders

namespace {

template <typename T>
void add_conv_block(Sequential<T>& seq, const std::string& prefix, std::size_t in_ch, std::size_t filters,
                    bool encoder) {
  seq.template add<Conv2dLayer<T>>(prefix + ".conv1", in_ch, filters);
  seq.template add<BatchNormLayer<T>>(prefix + ".bn1", filters);
  seq.template add<ReluLayer<T>>(prefix + ".relu1");
  seq.template add<Conv2dLayer<T>>(prefix + ".conv2", filters, filters);
  seq.template add<BatchNormLayer<T>>(prefix + ".bn2", filters);
  seq.template add<ReluLayer<T>>(prefix + ".relu2");
  if (encoder) {
    seq.template add<MaxPoolLayer<T>>(prefix + ".pool");
  } else {
    seq.template add<UpsampleLayer<T>>(prefix + ".up");
  }
}

template <typename T>
void initialize_sequence(Sequential<T>& seq, Rng& rng) {
  for (std::size_t i = 0; i < seq.size(); ++i) {
    Layer<T>& l = seq.layer(i);
    if (auto* conv = dynamic_cast<Conv2dLayer<T>*>(&l)) conv->initialize(rng);
    if (auto* dense = dynamic_cast<DenseLayer<T>*>(&l)) dense->initialize(rng);
  }
}

template <typename T>
void initialize(ModelGraph<T>& model, std::uint64_t seed) {
  Rng rng = Rng::substream(seed, "init");
  initialize_sequence(model.encoder, rng);
  initialize_sequence(model.decoder, rng);
  if (model.classifier) initialize_sequence(*model.classifier, rng);
}

template <typename T>
ModelGraph<T> build_autoencoder(const ModelConfig& config) {
  config.validate();
  const AEConfig& c = config.ae;
  ModelGraph<T> m;
  m.config = config;
  m.metadata.config_hash = config.hash();

  std::size_t channels = 1;
  for (std::size_t b = 0; b < 3; ++b) {
    add_conv_block(m.encoder, "enc" + std::to_string(b + 1), channels, c.encoder_filters[b], true);
    channels = c.encoder_filters[b];
  }
  const Shape encoded{channels, c.n_bins / 8, c.frames / 8};
  const std::size_t flat = shape_size(encoded);
  m.encoder.template add<FlattenLayer<T>>("flatten");
  m.encoder.template add<DenseLayer<T>>("bottleneck", flat, c.bottleneck);

  m.decoder.template add<DenseLayer<T>>("expand", c.bottleneck, flat);
  m.decoder.template add<ReshapeLayer<T>>("reshape", encoded);
  for (std::size_t b = 0; b < 3; ++b) {
    const std::size_t filters = c.encoder_filters[2 - b];
    add_conv_block(m.decoder, "dec" + std::to_string(b + 1), channels, filters, false);
    channels = filters;
  }
  m.decoder.template add<Conv2dLayer<T>>("output", channels, 1);

  if (config.family == ModelFamily::semisupervised) {
    Sequential<T> head;
    head.template add<DenseLayer<T>>("classifier", c.bottleneck, c.n_classes());
    m.classifier = std::move(head);
  }
  return m;
}

template <typename T>
ModelGraph<T> build_dense(const ModelConfig& config) {
  config.validate();
  const BaselineConfig& c = config.baseline;
  ModelGraph<T> m;
  m.config = config;
  m.metadata.config_hash = config.hash();
  m.metadata.frontend_tag = FrontendTag::mel128;

  auto dense_block = [](Sequential<T>& seq, const std::string& prefix, std::size_t in, std::size_t out) {
    seq.template add<DenseLayer<T>>(prefix + ".dense", in, out);
    seq.template add<BatchNormLayer<T>>(prefix + ".bn", out);
    seq.template add<ReluLayer<T>>(prefix + ".relu");
  };
  std::size_t width = c.input_dim;
  for (std::size_t i = 0; i < c.hidden_layers; ++i) {
    dense_block(m.encoder, "enc" + std::to_string(i + 1), width, c.hidden);
    width = c.hidden;
  }
  dense_block(m.encoder, "bottleneck", width, c.bottleneck);
  width = c.bottleneck;
  for (std::size_t i = 0; i < c.hidden_layers; ++i) {
    dense_block(m.decoder, "dec" + std::to_string(i + 1), width, c.hidden);
    width = c.hidden;
  }
  m.decoder.template add<DenseLayer<T>>("output", width, c.input_dim);
  return m;
}

}  // namespace

template <typename T>
ModelGraph<T> build_model(const ModelConfig& config, std::uint64_t seed) {
  ModelGraph<T> m = config.family == ModelFamily::baseline_dense ? build_dense<T>(config) : build_autoencoder<T>(config);
  initialize(m, seed);
  return m;
}

template <typename T>
ModelGraph<T> build_unsupervised(const AEConfig& config, std::uint64_t seed) {
  ModelConfig c;
  c.family = ModelFamily::unsupervised;
  c.ae = config;
  return build_model<T>(c, seed);
}

template <typename T>
ModelGraph<T> build_semisupervised(const AEConfig& config, std::uint64_t seed) {
  ModelConfig c;
  c.family = ModelFamily::semisupervised;
  c.ae = config;
  return build_model<T>(c, seed);
}

template <typename T>
ModelGraph<T> build_baseline_dense(const BaselineConfig& config, std::uint64_t seed) {
  ModelConfig c;
  c.family = ModelFamily::baseline_dense;
  c.baseline = config;
  return build_model<T>(c, seed);
}

// --- segmentation

std::vector<std::size_t> segment_starts(std::size_t n_frames, std::size_t frames_per_segment, std::size_t hop) {
  if (frames_per_segment == 0 || hop == 0) throw ConfigError("segment width and hop must be positive");
  if (n_frames <= frames_per_segment) return {0};
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + frames_per_segment <= n_frames; s += hop) starts.push_back(s);
  if (starts.back() + frames_per_segment < n_frames) starts.push_back(n_frames - frames_per_segment);
  return starts;
}

std::size_t reflect_index(std::size_t t, std::size_t n) {
  if (n <= 1) return 0;
  const std::size_t period = 2 * (n - 1);
  t %= period;
  return t < n ? t : period - t;
}

template <typename T>
Tensor<T> segment_spectrogram(const Spectrogram& spec, std::size_t frames_per_segment, std::size_t hop) {
  if (frames_per_segment % 8 != 0) {
    throw ConfigError("segment width " + std::to_string(frames_per_segment) + " is not divisible by 8");
  }
  if (spec.n_frames == 0) throw ShapeError("cannot segment an empty spectrogram");
  const auto starts = segment_starts(spec.n_frames, frames_per_segment, hop);
  const std::size_t F = spec.n_bins;
  Tensor<T> out({starts.size(), 1, F, frames_per_segment});
  T* dst = out.data();
  for (std::size_t s : starts) {
    for (std::size_t f = 0; f < F; ++f) {
      const double* row = spec.values.data() + f * spec.n_frames;
      for (std::size_t j = 0; j < frames_per_segment; ++j) {
        *dst++ = static_cast<T>(row[reflect_index(s + j, spec.n_frames)]);
      }
    }
  }
  return out;
}

#define ASD_INSTANTIATE_MODEL(T)                                                          \
  template class ModelGraph<T>;                                                           \
  template ModelGraph<T> build_model<T>(const ModelConfig&, std::uint64_t);               \
  template ModelGraph<T> build_unsupervised<T>(const AEConfig&, std::uint64_t);           \
  template ModelGraph<T> build_semisupervised<T>(const AEConfig&, std::uint64_t);         \
  template ModelGraph<T> build_baseline_dense<T>(const BaselineConfig&, std::uint64_t);   \
  template Tensor<T> segment_spectrogram<T>(const Spectrogram&, std::size_t, std::size_t);

ASD_INSTANTIATE_MODEL(float)
ASD_INSTANTIATE_MODEL(double)

#undef ASD_INSTANTIATE_MODEL

}  // namespace asd
