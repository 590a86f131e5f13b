#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "asd/model.hpp"

namespace asd {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t max_epochs = 500;
  double lr_initial = 1e-3;
  double lr_factor = 0.75;
  std::size_t lr_patience = 20;
  std::size_t stop_patience = 50;
  // An epoch counts as an improvement when val_loss < best - min_delta.
  double min_delta = 0.0;
  double val_fraction = 0.10;
  double alpha = 1.0;
  double beta = 0.0;
  std::uint64_t seed = 0;
  AdamConfig adam;

  void validate() const;
};

enum class StopReason { max_epochs, early_stop };

std::string_view to_string(StopReason reason);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double mse = 0.0;  // validation reconstruction component
  double cce = 0.0;  // validation classification component (0 without a head)
  double lr = 0.0;   // rate used during this epoch
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 1-based; 0 when no epoch ran
  StopReason stop_reason = StopReason::max_epochs;
  // Epochs at whose end the learning rate was reduced.
  std::vector<std::size_t> lr_drop_epochs;

  double best_val_loss() const;
  // epoch,train_loss,val_loss,mse,cce,lr
  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;
};

// Reduce-on-plateau: after `patience` consecutive epochs without improvement
// the rate is multiplied by `factor` and the counter restarts.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, std::size_t patience, double min_delta = 0.0);

  double lr() const noexcept { return lr_; }
  // Returns true when this observation triggered a reduction.
  bool observe(double val_loss);

 private:
  double lr_;
  double factor_;
  std::size_t patience_;
  double min_delta_;
  double best_;
  std::size_t wait_ = 0;
};

class EarlyStopper {
 public:
  EarlyStopper(std::size_t patience, double min_delta = 0.0);

  // Returns true when training should stop after this epoch.
  bool observe(double val_loss);

 private:
  std::size_t patience_;
  double min_delta_;
  double best_;
  std::size_t wait_ = 0;
};

struct EpochLosses {
  double train_loss = 0.0;
  double val_loss = 0.0;
  double mse = 0.0;
  double cce = 0.0;
};

// The epoch loop shared by train() and the schedule tests: runs epoch_fn with
// the current rate, records the epoch, applies the scheduler and the early
// stopper, and calls on_best after every strict improvement.
TrainHistory run_schedule(const TrainConfig& config,
                          const std::function<EpochLosses(std::size_t epoch, double lr)>& epoch_fn,
                          const std::function<void(std::size_t epoch)>& on_best = {},
                          const std::function<void(const EpochRecord&)>& on_epoch = {});

// Adam with bias-corrected moments. Moments are kept in double.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  // Applies one update from the gradients stored in each parameter. Throws
  // TrainingError (before touching any parameter) if a gradient is not finite.
  void step(const std::vector<ParamRef<T>>& params, double lr);

  std::uint64_t t() const noexcept { return t_; }

 private:
  AdamConfig config_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

struct SplitResult {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

// Stratified by group label: within every group max(1, round(f * n))
// members (at most n - 1) go to validation, chosen by a seeded shuffle.
// Throws ConfigError if a group has fewer than 2 members.
SplitResult split_train_val(const std::vector<std::string>& groups, double val_fraction, std::uint64_t seed);

// One clip's normalized features, held as float to bound memory.
struct ClipFeatures {
  std::size_t n_bins = 0;
  std::size_t n_frames = 0;
  std::shared_ptr<const std::vector<float>> values;  // F x T row-major
  int label = -1;
};

ClipFeatures to_clip_features(const Spectrogram& spec, int label = -1);

// Training items cut lazily from clip features: fixed-width segments for the
// convolutional models, or 5-frame stacks for the dense baseline.
class FeatureDataset {
 public:
  enum class Layout { segments, stacked_frames };

  static FeatureDataset segments(std::size_t n_bins, std::size_t frames_per_segment, std::size_t hop_frames);
  static FeatureDataset stacked(std::size_t n_bins, std::size_t context = 2);

  void add_clip(ClipFeatures clip);

  Layout layout() const noexcept { return layout_; }
  std::size_t size() const noexcept { return items_.size(); }
  std::size_t clip_count() const noexcept { return clips_.size(); }
  Shape sample_shape() const;
  bool labeled() const noexcept;

  template <typename T>
  Tensor<T> gather(std::span<const std::size_t> items) const;
  std::vector<int> labels(std::span<const std::size_t> items) const;

 private:
  struct Item {
    std::uint32_t clip;
    std::uint32_t start;
  };

  Layout layout_ = Layout::segments;
  std::size_t n_bins_ = 0;
  std::size_t width_ = 0;  // segment frames or stack size
  std::size_t hop_ = 1;
  std::vector<ClipFeatures> clips_;
  std::vector<Item> items_;
};

struct StepLosses {
  double total = 0.0;
  double mse = 0.0;
  double cce = 0.0;
};

// Forward, loss alpha * MSE + beta * CCE, backward, Adam update.
template <typename T>
StepLosses train_step(ModelGraph<T>& model, Adam<T>& adam, const Tensor<T>& batch, std::span<const int> labels,
                      const TrainConfig& config, double lr);

// Inference-mode losses averaged over every item of the dataset.
template <typename T>
StepLosses evaluate_loss(ModelGraph<T>& model, const FeatureDataset& data, const TrainConfig& config);

// Mini-batch index lists for one epoch; a trailing batch of one item is merged
// into the previous batch so batch normalization always sees two samples.
std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order, std::size_t batch_size);

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  // Called with the last-epoch parameters, before the best ones are restored.
  std::function<void()> on_final;
};

// Trains in place and leaves the model holding the parameters (and BN
// statistics) of the best-validation epoch.
template <typename T>
TrainHistory train(ModelGraph<T>& model, const FeatureDataset& train_set, const FeatureDataset& val_set,
                   const TrainConfig& config, const TrainHooks& hooks = {});

}  // namespace asd
