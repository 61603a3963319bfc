#pragma once

#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "statdistill/tensor.hpp"

namespace testutil {

template <typename T = double>
sdt::Tensor<T> random_tensor(sdt::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  const auto v = oracle::random_vec(sdt::shape_numel(shape), seed, lo, hi);
  return sdt::Tensor<T>(std::move(shape), std::vector<T>(v.begin(), v.end()));
}

template <typename T>
std::vector<double> to_vec(const sdt::Tensor<T>& t) {
  const auto v = t.values();
  return {v.begin(), v.end()};
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
bool bitwise_equal(const sdt::Tensor<T>& a, const sdt::Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  const auto x = a.values(), y = b.values();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::memcmp(&x[i], &y[i], sizeof(T)) != 0) return false;
  }
  return true;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("statdistill_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testutil
