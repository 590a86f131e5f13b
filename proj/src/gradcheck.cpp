#include "asd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "asd/rng.hpp"

namespace asd {

namespace {

// Distinct flat indices in [0, total), at most `wanted`, in random order.
std::vector<std::size_t> pick_coordinates(std::size_t total, std::size_t wanted, Rng& rng) {
  std::vector<std::size_t> out;
  if (total <= 4 * wanted) {
    out.resize(total);
    std::iota(out.begin(), out.end(), std::size_t{0});
    rng.shuffle(std::span(out));
    return out;
  }
  std::unordered_set<std::size_t> seen;
  // Oversample so resampled probes can be replaced.
  const std::size_t target = 4 * wanted;
  while (out.size() < target) {
    const std::size_t i = rng.below(total);
    if (seen.insert(i).second) out.push_back(i);
  }
  return out;
}

}  // namespace

GradCheckReport gradient_check(const std::vector<GradTarget>& targets, const std::function<double()>& loss,
                               const std::function<std::uint64_t()>& pattern, const GradCheckOptions& options) {
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& t : targets) {
    if (t.values.size() != t.analytic.size()) throw ShapeError("gradient target " + t.name + " size mismatch");
    offsets.push_back(total);
    total += t.values.size();
  }

  Rng rng(options.seed);
  const auto order = pick_coordinates(total, options.coordinates, rng);

  GradCheckReport report;
  loss();
  const std::uint64_t base_pattern = pattern ? pattern() : 0;

  for (std::size_t flat : order) {
    if (report.checked >= options.coordinates) break;
    const auto it = std::upper_bound(offsets.begin(), offsets.end(), flat);
    const std::size_t ti = static_cast<std::size_t>(it - offsets.begin()) - 1;
    const GradTarget& target = targets[ti];
    const std::size_t local = flat - offsets[ti];

    double& x = target.values[local];
    const double saved = x;
    x = saved + options.step;
    const double f_plus = loss();
    const std::uint64_t p_plus = pattern ? pattern() : 0;
    x = saved - options.step;
    const double f_minus = loss();
    const std::uint64_t p_minus = pattern ? pattern() : 0;
    x = saved;

    if (p_plus != base_pattern || p_minus != base_pattern) {
      ++report.resampled;
      continue;
    }

    const double numeric = (f_plus - f_minus) / (2.0 * options.step);
    const double analytic = target.analytic[local];
    const double denom = std::max({std::abs(numeric), std::abs(analytic), options.denominator_floor});
    const double rel = std::abs(numeric - analytic) / denom;
    if (rel > report.max_rel_error || std::isnan(rel)) {
      report.max_rel_error = std::isnan(rel) ? INFINITY : rel;
      report.worst = target.name + "[" + std::to_string(local) + "] analytic=" + std::to_string(analytic) +
                     " numeric=" + std::to_string(numeric);
    }
    ++report.checked;
  }
  // Leave any caches consistent with the unperturbed point.
  loss();
  return report;
}

GradCheckReport check_sequential(Sequential<double>& net, Tensor<double> input, Mode mode,
                                 const GradCheckOptions& options) {
  Rng rng = Rng::substream(options.seed, "gradcheck-projection");
  Tensor<double> probe = net.forward(input, mode);
  Tensor<double> projection(probe.shape());
  for (auto& v : projection.values()) v = rng.normal();

  // Analytic gradients at the unperturbed point.
  Tensor<double> input_grad = net.backward(projection);
  auto params = net.params();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size() + 1);
  analytic.emplace_back(input_grad.values().begin(), input_grad.values().end());
  for (auto& p : params) analytic.emplace_back(p.tensor->grad().begin(), p.tensor->grad().end());

  std::vector<GradTarget> targets;
  targets.push_back({"input", input.values(), analytic[0]});
  for (std::size_t i = 0; i < params.size(); ++i) {
    targets.push_back({params[i].name, params[i].tensor->values(), analytic[i + 1]});
  }

  auto loss = [&] {
    const Tensor<double> out = net.forward(input, mode);
    double acc = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) acc += out[i] * projection[i];
    return acc;
  };
  auto pattern = [&] {
    Fnv1a h;
    net.hash_activation_pattern(h);
    return h.digest();
  };
  return gradient_check(targets, loss, pattern, options);
}

GradCheckReport check_model(ModelGraph<double>& model, Tensor<double> input, Mode mode,
                            const GradCheckOptions& options) {
  Rng rng = Rng::substream(options.seed, "gradcheck-projection");
  const ModelOutput<double> probe = model.forward(input, mode);
  Tensor<double> r_recon(probe.reconstruction.shape());
  for (auto& v : r_recon.values()) v = rng.normal();
  Tensor<double> r_logits(probe.logits.shape());
  for (auto& v : r_logits.values()) v = rng.normal();

  Tensor<double> input_grad = model.backward(r_recon, model.has_classifier() ? &r_logits : nullptr);
  auto params = model.params();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size() + 1);
  analytic.emplace_back(input_grad.values().begin(), input_grad.values().end());
  for (auto& p : params) analytic.emplace_back(p.tensor->grad().begin(), p.tensor->grad().end());

  std::vector<GradTarget> targets;
  targets.push_back({"input", input.values(), analytic[0]});
  for (std::size_t i = 0; i < params.size(); ++i) {
    targets.push_back({params[i].name, params[i].tensor->values(), analytic[i + 1]});
  }

  auto loss = [&] {
    const ModelOutput<double> out = model.forward(input, mode);
    double acc = 0.0;
    for (std::size_t i = 0; i < out.reconstruction.size(); ++i) acc += out.reconstruction[i] * r_recon[i];
    for (std::size_t i = 0; i < out.logits.size(); ++i) acc += out.logits[i] * r_logits[i];
    return acc;
  };
  auto pattern = [&] {
    Fnv1a h;
    model.hash_activation_pattern(h);
    return h.digest();
  };
  return gradient_check(targets, loss, pattern, options);
}

}  // namespace asd
