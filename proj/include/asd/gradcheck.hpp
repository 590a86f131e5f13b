#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "asd/layers.hpp"
#include "asd/model.hpp"
#include "asd/tensor.hpp"

namespace asd {

// One block of coordinates to probe: the live values the loss closure reads
// and the analytic gradient computed at the unperturbed point.
struct GradTarget {
  std::string name;
  std::span<double> values;
  std::span<const double> analytic;
};

struct GradCheckOptions {
  double step = 1e-5;
  std::size_t coordinates = 100;
  // Denominator floor for the relative error. Coordinates whose true
  // gradient is ~0 (a conv bias feeding batch normalization, for one) have a
  // numeric estimate that is pure roundoff, around 1e-9 for losses of order
  // 10; below the floor they are judged on absolute error instead.
  double denominator_floor = 1e-4;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  // Probes discarded because a perturbation flipped a ReLU mask or a pooling
  // winner, i.e. the point sits within one step of a kink.
  std::size_t resampled = 0;
  std::string worst;
};

// Central differences on a random subsample of coordinates (every coordinate
// when there are fewer than requested). `pattern` returns a hash of the
// discrete activation choices of the most recent `loss` call; pass an empty
// function for smooth graphs.
GradCheckReport gradient_check(const std::vector<GradTarget>& targets, const std::function<double()>& loss,
                               const std::function<std::uint64_t()>& pattern, const GradCheckOptions& options);

// Checks a whole layer sequence against the scalar loss sum(R * f(x)) for a
// fixed random R, over the input and every trainable parameter.
GradCheckReport check_sequential(Sequential<double>& net, Tensor<double> input, Mode mode,
                                 const GradCheckOptions& options);

// Same for a full model: loss sum(R1 * reconstruction) + sum(R2 * logits).
GradCheckReport check_model(ModelGraph<double>& model, Tensor<double> input, Mode mode,
                            const GradCheckOptions& options);

}  // namespace asd
