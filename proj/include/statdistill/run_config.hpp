#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "statdistill/data.hpp"
#include "statdistill/hooks.hpp"
#include "statdistill/models.hpp"
#include "statdistill/trainer.hpp"

namespace sdt {

enum class DataKind { synthetic, cifar };

struct DataSpec {
  DataKind kind = DataKind::synthetic;
  SyntheticSpec synthetic;
  std::string cifar_dir;
  std::vector<int> classes;  // empty: all classes
  int downscale = 2;
  bool augment = true;
  AugmentSpec augment_spec;

  bool operator==(const DataSpec&) const = default;
};

struct EvalSpec {
  HookId position = HookId::conv4;
  int batch_size = 128;
  std::uint64_t nmi_seed = 0;
  int every = 1;  // evaluate every n epochs; the last epoch always

  bool operator==(const EvalSpec&) const = default;
};

/// Everything a run needs; serialized as config.json in the run directory.
struct RunSpec {
  std::string name = "run";
  WrnConfig teacher = teacher_preset(4);
  WrnConfig student = student_preset(4);
  TrainConfig teacher_train;
  TrainConfig train;
  LossConfig loss;
  DataSpec data;
  EvalSpec eval;
  std::string output_dir = "runs/default";
  /// Empty: <output_dir>/teacher.ckpt.
  std::string teacher_checkpoint;
  /// Pretraining reports a warning below this test accuracy.
  double teacher_min_accuracy = 0.95;
  int checkpoint_every = 1;

  /// Every violated field, prefixed by its dotted key.
  std::vector<std::string> problems() const;
  void validate() const;
  std::filesystem::path teacher_path() const;

  bool operator==(const RunSpec&) const = default;
};

/// Default desk-scale run: synthetic 4-class 16x16 data (noise 0.35),
/// teacher WRN-16-2 and student WRN-10-1 (base 8), alpha 1, beta 0.01.
RunSpec default_run_spec();

/// JSON text. Unknown keys and type errors are reported together with the
/// value checks as a single ConfigError.
std::string serialize_run_spec(const RunSpec& spec);
RunSpec parse_run_spec(const std::string& text);
RunSpec load_run_spec(const std::filesystem::path& path);
void save_run_spec(const RunSpec& spec, const std::filesystem::path& path);

/// Applies "dotted.key=value" assignments to the JSON form of a spec. The
/// value is read as JSON when it parses, otherwise as a string.
RunSpec apply_overrides(const RunSpec& spec, const std::vector<std::string>& assignments);

/// Train and test splits described by a DataSpec.
std::pair<DatasetHandle, DatasetHandle> load_datasets(const DataSpec& spec);

}  // namespace sdt
