#include "statdistill/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <sstream>

#include "statdistill/errors.hpp"
#include "statdistill/ops.hpp"

namespace sdt {

std::vector<std::string> MetricsRecord::problems() const {
  std::vector<std::string> out;
  if (!(top1 >= 0.0 && top1 <= top5 && top5 <= 1.0)) out.push_back("expected 0 <= top1 <= top5 <= 1");
  if (!(nmi >= 0.0 && nmi <= 1.0)) out.push_back("nmi outside [0,1]");
  if (!(kl_teacher_student >= 0.0)) out.push_back("kl_teacher_student negative");
  if (!(kl_student_teacher >= 0.0)) out.push_back("kl_student_teacher negative");
  if (!(stats_distance >= 0.0)) out.push_back("stats_distance negative");
  if (!(ce_with_labels >= 0.0)) out.push_back("ce_with_labels negative");
  return out;
}

namespace {

void log_softmax_row(std::span<const double> z, std::vector<double>& out) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  const double lse = m + std::log(s);
  out.resize(z.size());
  for (std::size_t k = 0; k < z.size(); ++k) out[k] = z[k] - lse;
}

void check_labels(const Matrix& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows) {
    throw DimensionError("metrics: " + std::to_string(labels.size()) + " labels for " + std::to_string(logits.rows) +
                         " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= logits.cols) throw InputError("metrics: label out of range");
  }
}

double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

template <typename T>
Matrix to_matrix(const Tensor<T>& t) {
  Matrix m{t.dim(0), t.numel() / t.dim(0), {}};
  const auto v = t.values();
  m.values.assign(v.begin(), v.end());
  return m;
}

void append_rows(Matrix& dst, const Matrix& src) {
  if (dst.rows == 0) dst.cols = src.cols;
  dst.rows += src.rows;
  dst.values.insert(dst.values.end(), src.values.begin(), src.values.end());
}

// Restores the training flag and drops captures when evaluation ends.
template <typename T>
class EvalScope {
 public:
  explicit EvalScope(WideResNet<T>& m) : model_(m), was_training_(m.training()) { model_.set_training(false); }
  ~EvalScope() {
    model_.clear_captures();
    if (!model_.frozen()) model_.set_training(was_training_);
  }
  EvalScope(const EvalScope&) = delete;
  EvalScope& operator=(const EvalScope&) = delete;

 private:
  WideResNet<T>& model_;
  bool was_training_;
};

template <typename T>
void require_hook(const WideResNet<T>& model, HookId position, const char* who) {
  if (!model.has_hook(position)) {
    throw UsageError(std::string(who) + ": hook " + to_string(position) + " is not registered on " +
                     model.config().name());
  }
}

}  // namespace

double kl_divergence(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows || a.cols != b.cols) throw DimensionError("kl: logit matrices differ in shape");
  if (a.rows == 0) return 0.0;
  std::vector<double> la, lb;
  double total = 0.0;
  for (std::size_t i = 0; i < a.rows; ++i) {
    log_softmax_row(a.row(i), la);
    log_softmax_row(b.row(i), lb);
    double s = 0.0;
    for (std::size_t k = 0; k < a.cols; ++k) s += std::exp(la[k]) * (la[k] - lb[k]);
    total += std::max(s, 0.0);
  }
  return total / static_cast<double>(a.rows);
}

Accuracy accuracy(const Matrix& logits, std::span<const int> labels) {
  check_labels(logits, labels);
  if (logits.rows == 0) return {};
  const std::size_t k = std::min<std::size_t>(5, logits.cols);
  std::size_t hit1 = 0, hitk = 0;
  for (std::size_t i = 0; i < logits.rows; ++i) {
    const auto z = logits.row(i);
    const auto y = static_cast<std::size_t>(labels[i]);
    std::size_t rank = 0;
    for (std::size_t j = 0; j < z.size(); ++j) {
      if (z[j] > z[y] || (z[j] == z[y] && j < y)) ++rank;
    }
    hit1 += rank < 1;
    hitk += rank < k;
  }
  const double n = static_cast<double>(logits.rows);
  return {static_cast<double>(hit1) / n, static_cast<double>(hitk) / n};
}

double ce_with_labels(const Matrix& logits, std::span<const int> labels) {
  check_labels(logits, labels);
  if (logits.rows == 0) return 0.0;
  std::vector<double> lp;
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows; ++i) {
    log_softmax_row(logits.row(i), lp);
    total -= lp[static_cast<std::size_t>(labels[i])];
  }
  return total / static_cast<double>(logits.rows);
}

KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iterations) {
  if (k < 1) throw UsageError("kmeans: k must be >= 1");
  const std::size_t n = points.rows, d = points.cols, kk = static_cast<std::size_t>(k);
  if (n < kk) throw InputError("kmeans: " + std::to_string(n) + " samples for k = " + std::to_string(k));

  KMeansResult r;
  r.centers = Matrix{kk, d, std::vector<double>(kk * d, 0.0)};
  auto center = [&](std::size_t c) { return std::span<double>(r.centers.values).subspan(c * d, d); };
  auto set_center = [&](std::size_t c, std::size_t i) {
    const auto p = points.row(i);
    std::copy(p.begin(), p.end(), center(c).begin());
  };

  std::mt19937_64 rng(seed);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  set_center(0, static_cast<std::size_t>(unit(rng) * static_cast<double>(n)) % n);
  for (std::size_t c = 1; c < kk; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      best[i] = std::min(best[i], sq_dist(points.row(i), center(c - 1)));
      total += best[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      const double target = unit(rng) * total;
      double acc = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += best[i];
        if (acc > target && best[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<std::size_t>(unit(rng) * static_cast<double>(n)) % n;
    }
    set_center(c, pick);
  }

  r.assignment.assign(n, -1);
  std::vector<double> dist(n);
  std::vector<std::size_t> counts(kk);
  for (int it = 0; it < max_iterations; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int arg = 0;
      double bd = sq_dist(points.row(i), center(0));
      for (std::size_t c = 1; c < kk; ++c) {
        const double dd = sq_dist(points.row(i), center(c));
        if (dd < bd) {
          bd = dd;
          arg = static_cast<int>(c);
        }
      }
      dist[i] = bd;
      if (r.assignment[i] != arg) {
        r.assignment[i] = arg;
        changed = true;
      }
    }
    r.iterations = it + 1;
    if (!changed) break;

    std::fill(r.centers.values.begin(), r.centers.values.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(r.assignment[i]);
      ++counts[c];
      const auto p = points.row(i);
      auto dst = center(c);
      for (std::size_t j = 0; j < d; ++j) dst[j] += p[j];
    }
    for (std::size_t c = 0; c < kk; ++c) {
      if (counts[c] == 0) {
        const auto far = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
        set_center(c, far);
        dist[far] = 0.0;
        continue;
      }
      for (auto& v : center(c)) v /= static_cast<double>(counts[c]);
    }
  }
  return r;
}

double nmi(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw DimensionError("nmi: partitions have different sizes");
  const std::size_t n = a.size();
  if (n == 0) throw InputError("nmi: empty partitions");
  std::map<int, double> pa, pb;
  std::map<std::pair<int, int>, double> joint;
  for (std::size_t i = 0; i < n; ++i) {
    pa[a[i]] += 1.0;
    pb[b[i]] += 1.0;
    joint[{a[i], b[i]}] += 1.0;
  }
  const double N = static_cast<double>(n);
  auto entropy = [N](const std::map<int, double>& counts) {
    double h = 0.0;
    for (const auto& [_, c] : counts) h -= c / N * std::log(c / N);
    return h;
  };
  const double ha = entropy(pa), hb = entropy(pb);
  if (ha + hb <= 0.0) return 1.0;
  double mi = 0.0;
  for (const auto& [key, c] : joint) mi += c / N * std::log(c * N / (pa[key.first] * pb[key.second]));
  return std::clamp(mi / (0.5 * (ha + hb)), 0.0, 1.0);
}

template <typename T>
Matrix predict(WideResNet<T>& model, const DatasetHandle& data, std::size_t batch_size) {
  EvalScope<T> scope(model);
  NoGradGuard no_grad;
  Matrix out;
  std::vector<std::size_t> idx;
  for (auto [lo, hi] : batch_ranges(data.size(), batch_size)) {
    idx.clear();
    for (std::size_t i = lo; i < hi; ++i) idx.push_back(i);
    append_rows(out, to_matrix(model.forward(gather_images<T>(data, idx, -1))));
  }
  return out;
}

template <typename T>
Matrix pooled_features(WideResNet<T>& model, const DatasetHandle& data, HookId position, std::size_t batch_size) {
  require_hook(model, position, "pooled_features");
  EvalScope<T> scope(model);
  NoGradGuard no_grad;
  Matrix out;
  std::vector<std::size_t> idx;
  for (auto [lo, hi] : batch_ranges(data.size(), batch_size)) {
    idx.clear();
    for (std::size_t i = lo; i < hi; ++i) idx.push_back(i);
    model.forward(gather_images<T>(data, idx, -1), true);
    append_rows(out, to_matrix(avg_pool_global(model.captured(position))));
  }
  return out;
}

template <typename T>
double stats_distance(WideResNet<T>& teacher, WideResNet<T>& student, const DatasetHandle& data, HookId position,
                      const ChannelAdapter<T>* adapter, std::size_t batch_size) {
  require_hook(teacher, position, "stats_distance");
  require_hook(student, position, "stats_distance");
  if (data.size() == 0) return 0.0;
  EvalScope<T> ts(teacher);
  EvalScope<T> ss(student);
  NoGradGuard no_grad;
  double total = 0.0;
  std::vector<std::size_t> idx;
  for (auto [lo, hi] : batch_ranges(data.size(), batch_size)) {
    idx.clear();
    for (std::size_t i = lo; i < hi; ++i) idx.push_back(i);
    const Tensor<T> x = gather_images<T>(data, idx, -1);
    teacher.forward(x, true);
    student.forward(x, true);
    const FeaturePair<T> pair{teacher.captured(position), student.captured(position), {position, position, adapter}};
    const auto s = channel_stats(adapt_student(pair));
    const auto t = channel_stats(pair.teacher);
    total += static_cast<double>(loss_sm_pair(t, s).item()) * static_cast<double>(hi - lo);
  }
  return total / static_cast<double>(data.size());
}

double nmi_of_features(const Matrix& features, std::span<const int> labels, int k, std::uint64_t seed) {
  if (k < 2) throw UsageError("nmi: k must be >= 2");
  if (features.rows < static_cast<std::size_t>(k)) {
    throw InputError("nmi: " + std::to_string(features.rows) + " samples for k = " + std::to_string(k));
  }
  const auto clusters = kmeans(features, k, seed);
  return nmi(clusters.assignment, labels);
}

template <typename T>
double nmi_features(WideResNet<T>& model, const DatasetHandle& data, HookId position, int k, std::uint64_t seed,
                    std::size_t batch_size) {
  if (k < 2) throw UsageError("nmi: k must be >= 2");
  if (data.size() < static_cast<std::size_t>(k)) {
    throw InputError("nmi: " + std::to_string(data.size()) + " samples for k = " + std::to_string(k));
  }
  return nmi_of_features(pooled_features(model, data, position, batch_size), data.labels, k, seed);
}

template <typename T>
MetricsRecord evaluate(WideResNet<T>& student, WideResNet<T>* teacher, const ChannelAdapter<T>* adapter,
                       const DatasetHandle& data, const EvalOptions& options, int epoch) {
  MetricsRecord r;
  r.epoch = epoch;
  const Matrix logits = predict(student, data, options.batch_size);
  const Accuracy acc = accuracy(logits, data.labels);
  r.top1 = acc.top1;
  r.top5 = acc.top5;
  r.ce_with_labels = ce_with_labels(logits, data.labels);
  if (teacher) {
    const Matrix t = predict(*teacher, data, options.batch_size);
    r.kl_teacher_student = kl_divergence(t, logits);
    r.kl_student_teacher = kl_divergence(logits, t);
    r.stats_distance = stats_distance(*teacher, student, data, options.position, adapter, options.batch_size);
  }
  r.nmi = nmi_features(student, data, options.position, data.num_classes, options.nmi_seed, options.batch_size);
  return r;
}

void write_features_csv(const std::filesystem::path& path, const Matrix& features, std::span<const int> labels) {
  if (labels.size() != features.rows) throw DimensionError("export: label count differs from feature rows");
  std::ofstream out(path);
  if (!out) throw FileError("cannot write " + path.string());
  out << "label";
  for (std::size_t j = 0; j < features.cols; ++j) out << ",f" << j;
  out << '\n';
  char buf[64];
  for (std::size_t i = 0; i < features.rows; ++i) {
    out << labels[i];
    for (double v : features.row(i)) {
      std::snprintf(buf, sizeof buf, "%.9g", v);
      out << ',' << buf;
    }
    out << '\n';
  }
  if (!out) throw FileError("write failed for " + path.string());
}

template <typename T>
void export_features(WideResNet<T>& model, const DatasetHandle& data, HookId position,
                     const std::filesystem::path& path, std::size_t batch_size) {
  write_features_csv(path, pooled_features(model, data, position, batch_size), data.labels);
}

FeatureTable read_features_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("label", 0) != 0) throw FormatError(path.string() + ": missing header");
  const auto cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  FeatureTable t;
  t.features.cols = cols;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != cols + 1) throw FormatError(path.string() + ": row " + std::to_string(row) + " has wrong width");
    try {
      t.labels.push_back(std::stoi(cells[0]));
      for (std::size_t j = 1; j < cells.size(); ++j) t.features.values.push_back(std::stod(cells[j]));
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": row " + std::to_string(row) + " is not numeric");
    }
    ++row;
  }
  t.features.rows = row;
  return t;
}

#define SDT_INSTANTIATE(T)                                                                                        \
  template Matrix predict(WideResNet<T>&, const DatasetHandle&, std::size_t);                                     \
  template Matrix pooled_features(WideResNet<T>&, const DatasetHandle&, HookId, std::size_t);                     \
  template double stats_distance(WideResNet<T>&, WideResNet<T>&, const DatasetHandle&, HookId,                    \
                                 const ChannelAdapter<T>*, std::size_t);                                          \
  template double nmi_features(WideResNet<T>&, const DatasetHandle&, HookId, int, std::uint64_t, std::size_t);   \
  template MetricsRecord evaluate(WideResNet<T>&, WideResNet<T>*, const ChannelAdapter<T>*, const DatasetHandle&, \
                                  const EvalOptions&, int);                                                       \
  template void export_features(WideResNet<T>&, const DatasetHandle&, HookId, const std::filesystem::path&,       \
                                std::size_t);

SDT_INSTANTIATE(float)
SDT_INSTANTIATE(double)
#undef SDT_INSTANTIATE

}  // namespace sdt
