#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "selfdet/tensor.hpp"

namespace selfdet::nn {

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  /// Relative error is |a - n| / max(|a|, |n|, denominator_floor).
  double denominator_floor = 1e-6;
  /// Coordinates whose +-(kink_margin * eps) perturbation changes the branch
  /// signature of any non-smooth op are excluded and counted.
  double kink_margin = 10.0;
  /// Check at most this many coordinates per input (0 = all), chosen by `seed`.
  std::size_t max_coordinates_per_input = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  std::string name;
  bool passed = true;
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t kink_excluded = 0;
  /// Worst coordinate (input index, flat element index) and its values.
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  std::string summary() const;
};

/// Compares analytic gradients of the scalar f() with respect to every leaf
/// in `inputs` against central differences (f(x+eps e) - f(x-eps e)) / 2 eps.
/// Inputs are perturbed in place and restored.
GradCheckReport gradient_check(const std::string& name, const std::function<Tensor()>& f,
                               std::vector<Tensor> inputs, const GradCheckOptions& options = {});

/// Single-input form.
GradCheckReport gradient_check(const std::string& name,
                               const std::function<Tensor(const Tensor&)>& f, Tensor x,
                               const GradCheckOptions& options = {});

}  // namespace selfdet::nn
