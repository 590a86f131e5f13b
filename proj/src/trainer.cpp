#include "asd/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <type_traits>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "asd/errors.hpp"
#include "asd/rng.hpp"

namespace asd {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (max_epochs == 0) throw ConfigError("max_epochs must be at least 1");
  if (!(lr_initial > 0.0) || !std::isfinite(lr_initial)) throw ConfigError("lr_initial must be positive");
  if (!(lr_factor > 0.0 && lr_factor < 1.0)) throw ConfigError("lr_factor must lie in (0, 1)");
  if (lr_patience >= stop_patience) {
    throw ConfigError("lr_patience (" + std::to_string(lr_patience) + ") must be smaller than stop_patience (" +
                      std::to_string(stop_patience) + ")");
  }
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
  if (min_delta < 0.0) throw ConfigError("min_delta must be nonnegative");
  if (alpha < 0.0 || beta < 0.0) throw ConfigError("loss weights alpha and beta must be nonnegative");
  if (std::abs(alpha + beta - 1.0) > 1e-9) {
    throw ConfigError("loss weights must satisfy alpha + beta = 1 (got alpha=" + std::to_string(alpha) +
                      ", beta=" + std::to_string(beta) + ")");
  }
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0.0)) throw ConfigError("Adam epsilon must be positive");
}

std::string_view to_string(StopReason reason) {
  return reason == StopReason::early_stop ? "early_stop" : "max_epochs";
}

double TrainHistory::best_val_loss() const {
  if (best_epoch == 0) return std::numeric_limits<double>::infinity();
  return epochs.at(best_epoch - 1).val_loss;
}

std::string TrainHistory::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,train_loss,val_loss,mse,cce,lr\n";
  for (const auto& e : epochs) {
    out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.mse << ',' << e.cce << ',' << e.lr << '\n';
  }
  return out.str();
}

void TrainHistory::write_csv(const std::filesystem::path& path) const { write_file_atomic(path, to_csv()); }

// --- schedule

PlateauScheduler::PlateauScheduler(double lr, double factor, std::size_t patience, double min_delta)
    : lr_(lr), factor_(factor), patience_(patience), min_delta_(min_delta),
      best_(std::numeric_limits<double>::infinity()) {}

bool PlateauScheduler::observe(double val_loss) {
  if (val_loss < best_ - min_delta_) {
    best_ = val_loss;
    wait_ = 0;
    return false;
  }
  if (++wait_ >= patience_) {
    lr_ *= factor_;
    wait_ = 0;
    return true;
  }
  return false;
}

EarlyStopper::EarlyStopper(std::size_t patience, double min_delta)
    : patience_(patience), min_delta_(min_delta), best_(std::numeric_limits<double>::infinity()) {}

bool EarlyStopper::observe(double val_loss) {
  if (val_loss < best_ - min_delta_) {
    best_ = val_loss;
    wait_ = 0;
    return false;
  }
  return ++wait_ >= patience_;
}

TrainHistory run_schedule(const TrainConfig& config,
                          const std::function<EpochLosses(std::size_t epoch, double lr)>& epoch_fn,
                          const std::function<void(std::size_t epoch)>& on_best,
                          const std::function<void(const EpochRecord&)>& on_epoch) {
  config.validate();
  PlateauScheduler scheduler(config.lr_initial, config.lr_factor, config.lr_patience, config.min_delta);
  EarlyStopper stopper(config.stop_patience, config.min_delta);
  TrainHistory history;
  double best = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const double lr = scheduler.lr();
    const EpochLosses losses = epoch_fn(epoch, lr);
    if (!std::isfinite(losses.val_loss)) {
      throw TrainingError("validation loss is not finite at epoch " + std::to_string(epoch));
    }
    const EpochRecord record{epoch, losses.train_loss, losses.val_loss, losses.mse, losses.cce, lr};
    history.epochs.push_back(record);
    if (losses.val_loss < best) {
      best = losses.val_loss;
      history.best_epoch = epoch;
      if (on_best) on_best(epoch);
    }
    if (on_epoch) on_epoch(record);
    if (scheduler.observe(losses.val_loss)) history.lr_drop_epochs.push_back(epoch);
    if (stopper.observe(losses.val_loss)) {
      history.stop_reason = StopReason::early_stop;
      return history;
    }
  }
  history.stop_reason = StopReason::max_epochs;
  return history;
}

// --- Adam

namespace {

// Branch-free scan: a value is NaN or infinite exactly when its exponent bits
// are all ones.
template <typename T>
bool all_finite(std::span<const T> values) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits exponent = static_cast<Bits>(sizeof(T) == 4 ? 0x7f800000ull : 0x7ff0000000000000ull);
  Bits any = 0;
  for (T v : values) any |= static_cast<Bits>((std::bit_cast<Bits>(v) & exponent) == exponent);
  return any == 0;
}

}  // namespace

template <typename T>
void Adam<T>::step(const std::vector<ParamRef<T>>& params, double lr) {
  for (const auto& p : params) {
    if (!p.tensor->has_grad()) throw TrainingError("parameter " + p.name + " has no gradient");
    if (!all_finite<T>(p.tensor->grad())) throw TrainingError("non-finite gradient in parameter " + p.name);
  }
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.tensor->size(), 0.0);
      v_.emplace_back(p.tensor->size(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw TrainingError("Adam: parameter set changed between steps");

  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].tensor->values();
    auto grads = params[k].tensor->grad();
    auto& m = m_[k];
    auto& v = v_[k];
    if (m.size() != values.size()) throw TrainingError("Adam: shape of " + params[k].name + " changed");
    T* __restrict__ pv = values.data();
    const T* __restrict__ pg = grads.data();
    double* __restrict__ pm = m.data();
    double* __restrict__ ps = v.data();
    const double eps = config_.eps;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = pg[i];
      pm[i] = b1 * pm[i] + (1.0 - b1) * g;
      ps[i] = b2 * ps[i] + (1.0 - b2) * g * g;
      const double m_hat = pm[i] / bc1;
      const double v_hat = ps[i] / bc2;
      pv[i] = static_cast<T>(pv[i] - lr * m_hat / (std::sqrt(v_hat) + eps));
    }
  }
}

template class Adam<float>;
template class Adam<double>;

// --- data

SplitResult split_train_val(const std::vector<std::string>& groups, double val_fraction, std::uint64_t seed) {
  if (groups.empty()) throw ConfigError("cannot split an empty dataset");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < groups.size(); ++i) members[groups[i]].push_back(i);

  Rng rng = Rng::substream(seed, "split");
  SplitResult out;
  for (auto& [name, idx] : members) {
    const std::size_t n = idx.size();
    if (n < 2) {
      throw ConfigError("machine type '" + name + "' has " + std::to_string(n) +
                        " training clip(s); stratified validation needs at least 2");
    }
    const auto wanted = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
    const std::size_t n_val = std::clamp<std::size_t>(wanted, 1, n - 1);
    rng.shuffle(std::span(idx));
    out.val.insert(out.val.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    out.train.insert(out.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  return out;
}

ClipFeatures to_clip_features(const Spectrogram& spec, int label) {
  ClipFeatures c;
  c.n_bins = spec.n_bins;
  c.n_frames = spec.n_frames;
  c.values = std::make_shared<const std::vector<float>>(spec.values.begin(), spec.values.end());
  c.label = label;
  return c;
}

FeatureDataset FeatureDataset::segments(std::size_t n_bins, std::size_t frames_per_segment, std::size_t hop_frames) {
  if (frames_per_segment == 0 || hop_frames == 0) throw ConfigError("segment width and hop must be positive");
  FeatureDataset d;
  d.layout_ = Layout::segments;
  d.n_bins_ = n_bins;
  d.width_ = frames_per_segment;
  d.hop_ = hop_frames;
  return d;
}

FeatureDataset FeatureDataset::stacked(std::size_t n_bins, std::size_t context) {
  FeatureDataset d;
  d.layout_ = Layout::stacked_frames;
  d.n_bins_ = n_bins;
  d.width_ = 2 * context + 1;
  return d;
}

void FeatureDataset::add_clip(ClipFeatures clip) {
  if (clip.n_bins != n_bins_) {
    throw ShapeError("clip has " + std::to_string(clip.n_bins) + " bins, dataset expects " + std::to_string(n_bins_));
  }
  if (!clip.values || clip.values->size() != clip.n_bins * clip.n_frames || clip.n_frames == 0) {
    throw ShapeError("clip features are empty or inconsistent");
  }
  const auto clip_index = static_cast<std::uint32_t>(clips_.size());
  if (layout_ == Layout::segments) {
    for (std::size_t s : segment_starts(clip.n_frames, width_, hop_)) {
      items_.push_back({clip_index, static_cast<std::uint32_t>(s)});
    }
  } else {
    if (clip.n_frames < width_) {
      throw ClipTooShortError("clip has " + std::to_string(clip.n_frames) + " frames; stacking needs at least " +
                              std::to_string(width_));
    }
    for (std::size_t s = 0; s + width_ <= clip.n_frames; ++s) {
      items_.push_back({clip_index, static_cast<std::uint32_t>(s)});
    }
  }
  clips_.push_back(std::move(clip));
}

Shape FeatureDataset::sample_shape() const {
  if (layout_ == Layout::segments) return {1, n_bins_, width_};
  return {n_bins_ * width_};
}

bool FeatureDataset::labeled() const noexcept {
  if (clips_.empty()) return false;
  return std::all_of(clips_.begin(), clips_.end(), [](const ClipFeatures& c) { return c.label >= 0; });
}

template <typename T>
Tensor<T> FeatureDataset::gather(std::span<const std::size_t> items) const {
  Shape shape{items.size()};
  const Shape sample = sample_shape();
  shape.insert(shape.end(), sample.begin(), sample.end());
  Tensor<T> out(shape);
  T* dst = out.data();
  for (std::size_t i : items) {
    const Item& item = items_.at(i);
    const ClipFeatures& clip = clips_[item.clip];
    const float* src = clip.values->data();
    if (layout_ == Layout::segments) {
      for (std::size_t f = 0; f < n_bins_; ++f) {
        const float* row = src + f * clip.n_frames;
        for (std::size_t j = 0; j < width_; ++j) {
          *dst++ = static_cast<T>(row[reflect_index(item.start + j, clip.n_frames)]);
        }
      }
    } else {
      for (std::size_t j = 0; j < width_; ++j) {
        for (std::size_t f = 0; f < n_bins_; ++f) *dst++ = static_cast<T>(src[f * clip.n_frames + item.start + j]);
      }
    }
  }
  return out;
}

std::vector<int> FeatureDataset::labels(std::span<const std::size_t> items) const {
  std::vector<int> out;
  out.reserve(items.size());
  for (std::size_t i : items) out.push_back(clips_[items_.at(i).clip].label);
  return out;
}

template Tensor<float> FeatureDataset::gather<float>(std::span<const std::size_t>) const;
template Tensor<double> FeatureDataset::gather<double>(std::span<const std::size_t>) const;

std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order, std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const std::size_t end = std::min(order.size(), i + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (batches.size() >= 2 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

// --- training

namespace {

template <typename T>
void check_weights(const ModelGraph<T>& model, const TrainConfig& config) {
  if (!model.has_classifier() && (config.alpha != 1.0 || config.beta != 0.0)) {
    throw ConfigError("a model without a classification head trains with alpha=1, beta=0");
  }
}

}  // namespace

template <typename T>
StepLosses train_step(ModelGraph<T>& model, Adam<T>& adam, const Tensor<T>& batch, std::span<const int> labels,
                      const TrainConfig& config, double lr) {
  check_weights(model, config);
  const bool head = model.has_classifier();
  ModelOutput<T> out = model.forward(batch, Mode::train, head);
  LossResult<T> mse = mse_loss(out.reconstruction, batch);

  StepLosses losses;
  losses.mse = mse.value;
  if (!head) {
    losses.total = mse.value;
    if (!std::isfinite(losses.total)) throw TrainingError("non-finite loss");
    model.backward(mse.grad, nullptr);
  } else {
    LossResult<T> cce = softmax_cce_loss(out.logits, labels);
    losses.cce = cce.value;
    losses.total = config.alpha * mse.value + config.beta * cce.value;
    if (!std::isfinite(losses.total)) throw TrainingError("non-finite loss");
    if (config.alpha != 1.0) {
      for (auto& g : mse.grad.values()) g = static_cast<T>(config.alpha * g);
    }
    for (auto& g : cce.grad.values()) g = static_cast<T>(config.beta * g);
    model.backward(mse.grad, &cce.grad);
  }
  adam.step(model.params(), lr);
  return losses;
}

template <typename T>
StepLosses evaluate_loss(ModelGraph<T>& model, const FeatureDataset& data, const TrainConfig& config) {
  check_weights(model, config);
  const bool head = model.has_classifier();
  const std::size_t n = data.size();
  if (n == 0) throw TrainingError("cannot evaluate on an empty dataset");
  double mse_sum = 0.0, cce_sum = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < n; i += config.batch_size) {
    idx.resize(std::min(config.batch_size, n - i));
    std::iota(idx.begin(), idx.end(), i);
    const Tensor<T> x = data.gather<T>(idx);
    ModelOutput<T> out = model.forward(x, Mode::inference, head);
    mse_sum += mse_loss(out.reconstruction, x).value * static_cast<double>(idx.size());
    if (head) {
      const auto labels = data.labels(idx);
      cce_sum += softmax_cce_loss(out.logits, std::span<const int>(labels)).value * static_cast<double>(idx.size());
    }
  }
  model.release_cache();
  StepLosses out;
  out.mse = mse_sum / static_cast<double>(n);
  out.cce = head ? cce_sum / static_cast<double>(n) : 0.0;
  out.total = head ? config.alpha * out.mse + config.beta * out.cce : out.mse;
  return out;
}

template <typename T>
TrainHistory train(ModelGraph<T>& model, const FeatureDataset& train_set, const FeatureDataset& val_set,
                   const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  check_weights(model, config);
  if (train_set.size() == 0) throw TrainingError("training set is empty");
  if (val_set.size() == 0) throw TrainingError("validation set is empty");
  if (train_set.sample_shape() != model.input_shape() || val_set.sample_shape() != model.input_shape()) {
    throw ShapeError("dataset samples are " + shape_string(train_set.sample_shape()) + ", model expects " +
                     shape_string(model.input_shape()));
  }
  if (model.has_classifier() && (!train_set.labeled() || !val_set.labeled())) {
    throw ConfigError("the semi-supervised model needs a class label on every training clip");
  }

  Adam<T> adam(config.adam);
  Rng shuffle = Rng::substream(config.seed, "shuffle");

  std::vector<ParamRef<T>> state = model.params();
  const auto buffers = model.buffers();
  state.insert(state.end(), buffers.begin(), buffers.end());
  std::vector<std::vector<T>> best;

  auto epoch_fn = [&](std::size_t epoch, double lr) {
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle.shuffle(std::span(order));
    const auto batches = make_batches(std::move(order), config.batch_size);

    double total = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const Tensor<T> x = train_set.gather<T>(batches[b]);
      const auto labels = model.has_classifier() ? train_set.labels(batches[b]) : std::vector<int>{};
      try {
        const StepLosses step = train_step(model, adam, x, std::span<const int>(labels), config, lr);
        total += step.total * static_cast<double>(batches[b].size());
      } catch (const TrainingError& e) {
        throw TrainingError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(b) + ")");
      }
    }
    model.release_cache();
    const StepLosses val = evaluate_loss(model, val_set, config);
    return EpochLosses{total / static_cast<double>(train_set.size()), val.total, val.mse, val.cce};
  };
  auto on_best = [&](std::size_t) {
    best.resize(state.size());
    for (std::size_t i = 0; i < state.size(); ++i) best[i].assign(state[i].tensor->values().begin(), state[i].tensor->values().end());
  };

  TrainHistory history = run_schedule(config, epoch_fn, on_best, hooks.on_epoch);
  if (hooks.on_final) hooks.on_final();
  for (std::size_t i = 0; i < best.size(); ++i) std::copy(best[i].begin(), best[i].end(), state[i].tensor->values().begin());
  return history;
}

#define ASD_INSTANTIATE_TRAINER(T)                                                                             \
  template StepLosses train_step<T>(ModelGraph<T>&, Adam<T>&, const Tensor<T>&, std::span<const int>,         \
                                    const TrainConfig&, double);                                               \
  template StepLosses evaluate_loss<T>(ModelGraph<T>&, const FeatureDataset&, const TrainConfig&);             \
  template TrainHistory train<T>(ModelGraph<T>&, const FeatureDataset&, const FeatureDataset&, const TrainConfig&, \
                                 const TrainHooks&);

ASD_INSTANTIATE_TRAINER(float)
ASD_INSTANTIATE_TRAINER(double)

#undef ASD_INSTANTIATE_TRAINER

}  // namespace asd
