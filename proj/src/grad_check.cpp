#include "statdistill/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "statdistill/errors.hpp"

namespace sdt {

GradCheckReport grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                           const Tensor<double>& input, double h, double tol) {
  Tensor<double> x = input.detach();
  x.set_requires_grad(true);
  const Tensor<double> loss = f(x);
  backward(loss);
  const std::vector<double> analytic(x.grad().begin(), x.grad().end());

  GradCheckReport report;
  NoGradGuard no_grad;
  auto values = x.mutable_values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double original = values[i];
    values[i] = original + h;
    const double plus = f(x).item();
    values[i] = original - h;
    const double minus = f(x).item();
    values[i] = original;
    const double numeric = (plus - minus) / (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
    if (i == 0 || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_index = i;
      report.analytic_at_worst = analytic[i];
      report.numeric_at_worst = numeric;
    }
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

GradCheckReport grad_check_params(const std::function<Tensor<double>()>& f, std::span<Tensor<double>> params,
                                  double h, double tol) {
  for (auto& p : params) {
    if (!p.requires_grad()) throw UsageError("grad_check_params: every tensor must require grad");
    p.zero_grad();
  }
  backward(f());
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  GradCheckReport report;
  NoGradGuard no_grad;
  std::size_t flat = 0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto values = params[t].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i, ++flat) {
      const double original = values[i];
      values[i] = original + h;
      const double plus = f().item();
      values[i] = original - h;
      const double minus = f().item();
      values[i] = original;
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic[t][i];
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      if (flat == 0 || err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_index = flat;
        report.analytic_at_worst = a;
        report.numeric_at_worst = numeric;
      }
    }
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace sdt
