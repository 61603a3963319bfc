#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "statdistill/data.hpp"
#include "statdistill/hooks.hpp"
#include "statdistill/models.hpp"
#include "statdistill/stats_transfer.hpp"

namespace sdt {

struct MetricsRecord {
  int epoch = 0;
  double top1 = 0.0;
  double top5 = 0.0;
  double ce_with_labels = 0.0;
  double kl_teacher_student = 0.0;  // KL(p_T || p_S)
  double kl_student_teacher = 0.0;  // KL(p_S || p_T)
  double stats_distance = 0.0;
  double nmi = 0.0;

  /// Range violations; empty when the record is well-formed.
  std::vector<std::string> problems() const;
  bool operator==(const MetricsRecord&) const = default;
};

struct Accuracy {
  double top1 = 0.0;
  double top5 = 0.0;  // top-min(5, K)
};

/// Row-major [N,K] matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  std::span<const double> row(std::size_t i) const { return std::span<const double>(values).subspan(i * cols, cols); }
};

/// Mean over rows of sum_k p(a)_k (ln p(a)_k - ln p(b)_k), softmax at
/// temperature 1.
double kl_divergence(const Matrix& logits_a, const Matrix& logits_b);
inline double kl_teacher_student(const Matrix& teacher, const Matrix& student) { return kl_divergence(teacher, student); }

/// Ties go to the lowest class index.
Accuracy accuracy(const Matrix& logits, std::span<const int> labels);
double ce_with_labels(const Matrix& logits, std::span<const int> labels);

struct KMeansResult {
  std::vector<int> assignment;
  Matrix centers;
  int iterations = 0;
};

/// k-means++ seeding from `seed`, Lloyd iterations until the assignment is
/// a fixpoint or max_iterations. Empty clusters are reseeded with the point
/// farthest from its current center.
KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iterations = 50);

/// I(U;V) / ((H(U) + H(V)) / 2); 1 when both partitions are trivial.
double nmi(std::span<const int> a, std::span<const int> b);

struct EvalOptions {
  std::size_t batch_size = 128;
  HookId position = HookId::conv4;
  std::uint64_t nmi_seed = 0;
};

/// Logits over a dataset, batched, eval mode, no augmentation.
template <typename T>
Matrix predict(WideResNet<T>& model, const DatasetHandle& data, std::size_t batch_size = 128);

/// Global-average-pooled features at `position` [N,C].
template <typename T>
Matrix pooled_features(WideResNet<T>& model, const DatasetHandle& data, HookId position,
                       std::size_t batch_size = 128);

/// Mean over samples of loss_sm_pair at `position`, the adapter (if any)
/// applied to the student feature.
template <typename T>
double stats_distance(WideResNet<T>& teacher, WideResNet<T>& student, const DatasetHandle& data, HookId position,
                      const ChannelAdapter<T>* adapter, std::size_t batch_size = 128);

/// Clusters pooled features into k groups and scores them against labels.
template <typename T>
double nmi_features(WideResNet<T>& model, const DatasetHandle& data, HookId position, int k, std::uint64_t seed,
                    std::size_t batch_size = 128);
double nmi_of_features(const Matrix& features, std::span<const int> labels, int k, std::uint64_t seed);

/// Every MetricsRecord field; the teacher may be null (KL and distance
/// then stay 0).
template <typename T>
MetricsRecord evaluate(WideResNet<T>& student, WideResNet<T>* teacher, const ChannelAdapter<T>* adapter,
                       const DatasetHandle& data, const EvalOptions& options, int epoch);

/// CSV: header "label,f0,...", one row per sample, 9 significant digits.
void write_features_csv(const std::filesystem::path& path, const Matrix& features, std::span<const int> labels);
template <typename T>
void export_features(WideResNet<T>& model, const DatasetHandle& data, HookId position,
                     const std::filesystem::path& path, std::size_t batch_size = 128);

struct FeatureTable {
  std::vector<int> labels;
  Matrix features;
};
FeatureTable read_features_csv(const std::filesystem::path& path);

}  // namespace sdt
