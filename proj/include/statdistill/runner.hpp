#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "statdistill/metrics.hpp"
#include "statdistill/run_config.hpp"

namespace sdt {

/// Per-epoch line of metrics.jsonl: the evaluation record plus mean
/// training losses.
struct EpochRecord {
  MetricsRecord metrics;
  bool evaluated = false;
  double lr = 0.0;
  StepReport train_mean;
};

std::string to_json_line(const EpochRecord& r);
/// Reads a metrics.jsonl file; throws FormatError naming the bad line.
std::vector<EpochRecord> read_metrics_stream(const std::filesystem::path& path);

struct RunFiles {
  std::filesystem::path dir;
  std::filesystem::path config() const { return dir / "config.json"; }
  std::filesystem::path metrics() const { return dir / "metrics.jsonl"; }
  std::filesystem::path teacher_metrics() const { return dir / "teacher_metrics.jsonl"; }
  std::filesystem::path student() const { return dir / "student.ckpt"; }
  std::filesystem::path state() const { return dir / "state.ckpt"; }
  std::filesystem::path summary() const { return dir / "summary.json"; }
  std::filesystem::path teacher() const { return dir / "teacher.ckpt"; }
};

struct PretrainReport {
  std::filesystem::path checkpoint;
  MetricsRecord final;
  int epochs = 0;
  /// Non-empty when the test accuracy falls below the configured floor.
  std::string warning;
};

struct RunOptions {
  /// Continue from state.ckpt when present.
  bool resume = false;
  /// Stop (with state saved) after this many completed epochs; for tests.
  std::optional<int> stop_after_epoch;
  /// Called after every epoch.
  std::function<void(const EpochRecord&)> on_epoch;
  /// Called after every optimizer step with the step report.
  std::function<void(const StepReport&)> on_step;
};

struct RunReport {
  std::filesystem::path dir;
  std::vector<EpochRecord> epochs;
  MetricsRecord final;
  bool finished = false;
};

/// Supervised teacher training; writes teacher.ckpt (and
/// teacher_metrics.jsonl, config.json) into `out_dir`.
PretrainReport pretrain_teacher(const RunSpec& spec, const std::filesystem::path& out_dir,
                                const RunOptions& options = {});

/// Student training against the checkpointed teacher. Writes config.json,
/// metrics.jsonl, student.ckpt (student + adapters), state.ckpt (adds
/// momentum and epoch counter) and summary.json. Throws FileError when the
/// teacher checkpoint is missing.
RunReport run_distillation(const RunSpec& spec, const std::filesystem::path& out_dir, const RunOptions& options = {});

/// Re-evaluates a finished run directory from its config and checkpoints.
/// Without a student checkpoint the freshly initialised student is scored.
MetricsRecord evaluate_run(const std::filesystem::path& dir, const std::optional<RunSpec>& spec_override = {});

/// Writes pooled features of the run's student (or teacher) to CSV.
void export_run_features(const std::filesystem::path& dir, const std::filesystem::path& csv, bool teacher,
                         std::optional<HookId> position = {});

std::string metrics_to_json(const MetricsRecord& r);
MetricsRecord metrics_from_json(const std::string& text);

}  // namespace sdt
