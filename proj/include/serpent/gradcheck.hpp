#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "serpent/params.hpp"
#include "serpent/rng.hpp"
#include "serpent/tensor.hpp"

namespace serpent {

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-3;
  /// Entries compared per tensor; 0 checks every element. Sampled entries
  /// are drawn from `seed`, so reports are reproducible.
  std::size_t max_entries_per_tensor = 0;
  std::uint64_t seed = 0;
  /// Relative error is |a - n| / max(|a|, |n|, floor).
  double denominator_floor = 1e-3;
  /// Multiplies analytic gradients before comparison. Only used to verify
  /// the checker itself rejects a corrupted backward pass.
  double analytic_scale = 1.0;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  bool passed = false;
  double max_rel_error = 0;
  std::string worst_tensor;
  std::string failure;
  std::vector<GradCheckEntry> tensors;
};

/// Compares reverse-mode gradients of `loss_fn` against central finite
/// differences for every tensor in `leaves`. All evaluation is in double.
inline GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn, ParamList<double> leaves,
                                  const GradCheckOptions& opts = {}) {
  GradCheckReport report;
  for (auto& leaf : leaves) leaf.tensor.zero_grad();
  Tensor<double> loss = loss_fn();
  loss.backward();

  for (auto& leaf : leaves) {
    GradCheckEntry entry{leaf.name, 0, 0};
    const std::size_t n = leaf.tensor.numel();
    std::vector<double> analytic(n, 0.0);
    if (leaf.tensor.has_grad())
      std::copy(leaf.tensor.grad().begin(), leaf.tensor.grad().end(), analytic.begin());
    for (double& a : analytic) {
      if (!std::isfinite(a)) {
        report.passed = false;
        report.failure = "non-finite analytic gradient in " + leaf.name;
        report.worst_tensor = leaf.name;
        report.max_rel_error = INFINITY;
        return report;
      }
      a *= opts.analytic_scale;
    }

    std::vector<std::size_t> indices(n);
    for (std::size_t i = 0; i < n; ++i) indices[i] = i;
    if (opts.max_entries_per_tensor > 0 && n > opts.max_entries_per_tensor) {
      CounterRng rng(derive_seed(opts.seed, hash_name(leaf.name)));
      for (std::size_t i = 0; i < opts.max_entries_per_tensor; ++i)
        std::swap(indices[i], indices[i + static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n - i - 1)))]);
      indices.resize(opts.max_entries_per_tensor);
    }

    auto values = leaf.tensor.mutable_data();
    for (std::size_t idx : indices) {
      const double saved = values[idx];
      double plus, minus;
      {
        NoGradGuard guard;
        values[idx] = saved + opts.step;
        plus = loss_fn().item();
        values[idx] = saved - opts.step;
        minus = loss_fn().item();
      }
      values[idx] = saved;
      const double numeric = (plus - minus) / (2 * opts.step);
      const double a = analytic[idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.denominator_floor});
      const double rel = std::abs(a - numeric) / denom;
      entry.max_rel_error = std::max(entry.max_rel_error, std::isfinite(rel) ? rel : INFINITY);
      ++entry.checked;
    }
    if (entry.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = entry.max_rel_error;
      report.worst_tensor = leaf.name;
    }
    report.tensors.push_back(entry);
  }
  report.passed = report.max_rel_error <= opts.tolerance;
  if (!report.passed)
    report.failure = "max relative error " + std::to_string(report.max_rel_error) + " in " + report.worst_tensor;
  return report;
}

}  // namespace serpent
