#include "selfdet/gradcheck.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "selfdet/random.hpp"

namespace selfdet::nn {

std::string GradCheckReport::summary() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "%-24s %s max_rel=%.3e checked=%zu kink_excluded=%zu worst=(input %zu, index %zu)",
                name.c_str(), passed ? "PASS" : "FAIL", max_relative_error, checked, kink_excluded,
                worst_input, worst_index);
  return buf;
}

namespace {

struct Probe {
  double value;
  std::uint64_t signature;
};

Probe evaluate(const std::function<Tensor()>& f) {
  NoGradGuard no_grad;
  KinkRecording rec;
  const Tensor out = f();
  return {out.item(), rec.signature()};
}

}  // namespace

GradCheckReport gradient_check(const std::string& name, const std::function<Tensor()>& f,
                               std::vector<Tensor> inputs, const GradCheckOptions& options) {
  GradCheckReport report;
  report.name = name;

  for (Tensor& t : inputs) {
    if (!t.is_leaf()) throw std::invalid_argument("gradient_check: inputs must be leaves");
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    const Tensor loss = f();
    if (loss.size() != 1) throw std::invalid_argument("gradient_check: f must be scalar-valued");
    loss.backward();
  }
  std::vector<std::vector<double>> analytic;
  for (const Tensor& t : inputs) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.size(), 0.0);
    }
  }

  const std::uint64_t base_signature = evaluate(f).signature;
  Rng rng(options.seed);
  const double margin = options.kink_margin * options.eps;

  for (std::size_t in = 0; in < inputs.size(); ++in) {
    Tensor& t = inputs[in];
    std::vector<std::size_t> coords;
    if (options.max_coordinates_per_input == 0 || options.max_coordinates_per_input >= t.size()) {
      for (std::size_t i = 0; i < t.size(); ++i) coords.push_back(i);
    } else {
      coords = rng.sample_without_replacement(t.size(), options.max_coordinates_per_input);
    }
    auto values = t.mutable_data();
    for (std::size_t i : coords) {
      const double original = values[i];

      values[i] = original + margin;
      const std::uint64_t sig_hi = evaluate(f).signature;
      values[i] = original - margin;
      const std::uint64_t sig_lo = evaluate(f).signature;
      if (sig_hi != base_signature || sig_lo != base_signature) {
        values[i] = original;
        ++report.kink_excluded;
        continue;
      }

      values[i] = original + options.eps;
      const double f_hi = evaluate(f).value;
      values[i] = original - options.eps;
      const double f_lo = evaluate(f).value;
      values[i] = original;

      const double numeric = (f_hi - f_lo) / (2.0 * options.eps);
      const double a = analytic[in][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.denominator_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.checked;
      if (rel > report.max_relative_error || !std::isfinite(rel)) {
        report.max_relative_error = std::isfinite(rel) ? rel : INFINITY;
        report.worst_input = in;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_relative_error <= options.tolerance;
  return report;
}

GradCheckReport gradient_check(const std::string& name,
                               const std::function<Tensor(const Tensor&)>& f, Tensor x,
                               const GradCheckOptions& options) {
  return gradient_check(name, [&]() { return f(x); }, {x}, options);
}

}  // namespace selfdet::nn
