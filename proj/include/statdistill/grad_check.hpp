#pragma once

#include <cstddef>
#include <functional>
#include <span>

#include "statdistill/tensor.hpp"

namespace sdt {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool passed = true;
};

/// Compares the reverse-mode gradient of a scalar function with central
/// differences. Relative error per entry is |a - n| / max(1e-8, |a| + |n|).
GradCheckReport grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                           const Tensor<double>& input, double h = 1e-5, double tol = 1e-4);

/// Same check over several leaf tensors at once; `f` must read them
/// directly. Entry indices run through the tensors in order.
GradCheckReport grad_check_params(const std::function<Tensor<double>()>& f, std::span<Tensor<double>> params,
                                  double h = 1e-5, double tol = 1e-4);

}  // namespace sdt
