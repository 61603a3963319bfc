#include "statdistill/runner.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "statdistill/checkpoint.hpp"
#include "statdistill/errors.hpp"

namespace sdt {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

json metrics_json(const MetricsRecord& r) {
  return {{"epoch", r.epoch},
          {"top1", r.top1},
          {"top5", r.top5},
          {"ce_with_labels", r.ce_with_labels},
          {"kl_teacher_student", r.kl_teacher_student},
          {"kl_student_teacher", r.kl_student_teacher},
          {"stats_distance", r.stats_distance},
          {"nmi", r.nmi}};
}

MetricsRecord metrics_from(const json& j) {
  MetricsRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.top1 = j.at("top1").get<double>();
  r.top5 = j.at("top5").get<double>();
  r.ce_with_labels = j.at("ce_with_labels").get<double>();
  r.kl_teacher_student = j.at("kl_teacher_student").get<double>();
  r.kl_student_teacher = j.at("kl_student_teacher").get<double>();
  r.stats_distance = j.at("stats_distance").get<double>();
  r.nmi = j.at("nmi").get<double>();
  return r;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FileError("cannot write " + path.string());
  out << text;
  if (!out) throw FileError("write failed for " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw FileError("cannot create directory " + dir.string() + ": " + ec.message());
}

EvalOptions eval_options(const RunSpec& spec) {
  return {static_cast<std::size_t>(spec.eval.batch_size), spec.eval.position, spec.eval.nmi_seed};
}

std::uint64_t adapter_seed(const RunSpec& spec) { return spec.train.seed * 1000003ull + 17ull; }

std::vector<std::size_t> slice(const std::vector<std::size_t>& order, std::size_t lo, std::size_t hi) {
  return {order.begin() + static_cast<std::ptrdiff_t>(lo), order.begin() + static_cast<std::ptrdiff_t>(hi)};
}

template <typename T>
WideResNet<T> load_teacher(const RunSpec& spec) {
  const fs::path path = spec.teacher_path();
  if (!fs::exists(path)) throw FileError("teacher checkpoint not found: " + path.string());
  WideResNet<T> teacher(spec.teacher, 0);
  teacher.load(path);
  teacher.freeze();
  return teacher;
}

// Persistent state of a distillation run, keyed so that the three parts
// never collide.
constexpr const char* kEpochKey = "meta.epoch";

template <typename T>
void save_state(const fs::path& path, const WideResNet<T>& student, Distiller<T>& d, int epochs_done) {
  auto entries = student.state();
  for (auto& e : d.adapter_state()) entries.push_back(std::move(e));
  for (auto& e : d.optimizer().state()) entries.push_back(std::move(e));
  entries.push_back({kEpochKey, {1}, {static_cast<float>(epochs_done)}});
  write_checkpoint(path, entries);
}

template <typename T>
int load_state(const fs::path& path, WideResNet<T>& student, Distiller<T>& d) {
  const auto entries = read_checkpoint(path);
  std::vector<NamedTensor> model, adapters, momentum;
  int epoch = -1;
  for (const auto& e : entries) {
    if (e.name == kEpochKey) {
      if (e.values.size() != 1) throw FormatError(path.string() + ": malformed epoch counter");
      epoch = static_cast<int>(e.values[0]);
    } else if (e.name.rfind("adapter.", 0) == 0) {
      adapters.push_back(e);
    } else if (e.name.rfind("momentum.", 0) == 0) {
      momentum.push_back(e);
    } else {
      model.push_back(e);
    }
  }
  if (epoch < 0) throw FormatError(path.string() + ": missing epoch counter");
  student.load_state(model);
  d.load_adapter_state(adapters);
  d.optimizer().load_state(momentum);
  return epoch;
}

template <typename T>
void save_student(const fs::path& path, const WideResNet<T>& student, const Distiller<T>& d) {
  auto entries = student.state();
  for (auto& e : d.adapter_state()) entries.push_back(std::move(e));
  write_checkpoint(path, entries);
}

template <typename T>
void load_student(const fs::path& path, WideResNet<T>& student, Distiller<T>& d) {
  const auto entries = read_checkpoint(path);
  std::vector<NamedTensor> model, adapters;
  for (const auto& e : entries) (e.name.rfind("adapter.", 0) == 0 ? adapters : model).push_back(e);
  student.load_state(model);
  d.load_adapter_state(adapters);
}

void check_finite(const StepReport& r, int epoch) {
  if (std::isfinite(r.total)) return;
  std::ostringstream msg;
  msg << "non-finite training loss in epoch " << epoch + 1 << " (ce " << r.l_ce << ", sm " << r.l_sm << ", adain "
      << r.l_adain << ", baseline " << r.l_baseline << "); lower train.lr or the loss weights";
  throw NumericError(msg.str());
}

void accumulate(StepReport& acc, const StepReport& r, double w) {
  acc.l_ce += w * r.l_ce;
  acc.l_sm += w * r.l_sm;
  acc.l_adain += w * r.l_adain;
  acc.l_baseline += w * r.l_baseline;
  acc.total += w * r.total;
}

template <typename T>
PretrainReport pretrain_impl(const RunSpec& spec, const fs::path& out_dir, const RunOptions& options) {
  spec.validate();
  ensure_dir(out_dir);
  RunFiles files{out_dir};
  RunSpec snapshot = spec;
  snapshot.output_dir = out_dir.string();
  save_run_spec(snapshot, files.config());

  const auto [train, test] = load_datasets(spec.data);
  const TrainConfig& tc = spec.teacher_train;
  WideResNet<T> model = build_wrn<T>(spec.teacher, tc.seed);
  model.register_hook(spec.eval.position);
  SgdOptimizer<T> opt(tc.momentum, tc.weight_decay);
  opt.add_all(model.parameters());

  std::ofstream stream(files.teacher_metrics(), std::ios::binary | std::ios::trunc);
  if (!stream) throw FileError("cannot write " + files.teacher_metrics().string());
  const EvalOptions eo = eval_options(spec);
  const auto bs = static_cast<std::size_t>(tc.batch_size);

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    const double lr = tc.lr_at(epoch);
    const auto order = epoch_order(train.size(), tc.seed, epoch);
    EpochRecord rec;
    rec.lr = lr;
    for (auto [lo, hi] : batch_ranges(train.size(), bs)) {
      const auto idx = slice(order, lo, hi);
      const Batch<T> batch{gather_images<T>(train, idx, epoch), gather_labels(train, idx)};
      const double loss = supervised_step(model, opt, batch, lr);
      StepReport r;
      r.l_ce = r.total = loss;
      check_finite(r, epoch);
      accumulate(rec.train_mean, r, static_cast<double>(hi - lo) / static_cast<double>(train.size()));
      if (options.on_step) options.on_step(r);
    }
    const bool last = epoch + 1 == tc.epochs;
    if ((epoch + 1) % spec.eval.every == 0 || last) {
      rec.metrics = evaluate(model, static_cast<WideResNet<T>*>(nullptr), static_cast<const ChannelAdapter<T>*>(nullptr), test, eo, epoch + 1);
      rec.evaluated = true;
    } else {
      rec.metrics.epoch = epoch + 1;
    }
    stream << to_json_line(rec) << '\n' << std::flush;
    if (options.on_epoch) options.on_epoch(rec);
  }

  model.freeze();
  model.save(files.teacher());
  PretrainReport report;
  report.checkpoint = files.teacher();
  report.epochs = tc.epochs;
  report.final = evaluate(model, static_cast<WideResNet<T>*>(nullptr), static_cast<const ChannelAdapter<T>*>(nullptr), test, eo, tc.epochs);
  if (report.final.top1 < spec.teacher_min_accuracy) {
    std::ostringstream w;
    w << "teacher test top-1 " << report.final.top1 << " is below the configured floor " << spec.teacher_min_accuracy;
    report.warning = w.str();
  }
  json summary = {{"name", spec.name},
                  {"role", "teacher"},
                  {"checkpoint", files.teacher().string()},
                  {"epochs", tc.epochs},
                  {"final", metrics_json(report.final)},
                  {"warning", report.warning}};
  write_text(out_dir / "teacher_summary.json", summary.dump(2) + "\n");
  return report;
}

template <typename T>
RunReport distill_impl(const RunSpec& spec, const fs::path& out_dir, const RunOptions& options) {
  spec.validate();
  WideResNet<T> teacher = load_teacher<T>(spec);
  ensure_dir(out_dir);
  RunFiles files{out_dir};
  RunSpec snapshot = spec;
  snapshot.output_dir = out_dir.string();
  if (snapshot.teacher_checkpoint.empty()) snapshot.teacher_checkpoint = fs::absolute(spec.teacher_path()).string();
  save_run_spec(snapshot, files.config());

  const auto [train, test] = load_datasets(spec.data);
  const TrainConfig& tc = spec.train;
  WideResNet<T> student = build_wrn<T>(spec.student, tc.seed);
  const HookId extra[] = {spec.eval.position};
  Distiller<T> d(student, teacher, spec.loss, tc.momentum, tc.weight_decay, adapter_seed(spec), extra);

  RunReport report;
  report.dir = out_dir;
  int start = 0;
  if (options.resume && fs::exists(files.state())) {
    start = load_state(files.state(), student, d);
    if (fs::exists(files.metrics())) {
      for (auto& r : read_metrics_stream(files.metrics())) {
        if (r.metrics.epoch <= start) report.epochs.push_back(r);
      }
    }
  }
  {
    std::ofstream rewrite(files.metrics(), std::ios::binary | std::ios::trunc);
    if (!rewrite) throw FileError("cannot write " + files.metrics().string());
    for (const auto& r : report.epochs) rewrite << to_json_line(r) << '\n';
  }
  std::ofstream stream(files.metrics(), std::ios::binary | std::ios::app);

  const EvalOptions eo = eval_options(spec);
  const auto bs = static_cast<std::size_t>(tc.batch_size);
  const HookId position = spec.eval.position;
  for (int epoch = start; epoch < tc.epochs; ++epoch) {
    const double lr = tc.lr_at(epoch);
    const auto order = epoch_order(train.size(), tc.seed, epoch);
    EpochRecord rec;
    rec.lr = lr;
    for (auto [lo, hi] : batch_ranges(train.size(), bs)) {
      const auto idx = slice(order, lo, hi);
      const Batch<T> batch{gather_images<T>(train, idx, epoch), gather_labels(train, idx)};
      const StepReport r = d.train_step(batch, lr);
      check_finite(r, epoch);
      accumulate(rec.train_mean, r, static_cast<double>(hi - lo) / static_cast<double>(train.size()));
      if (options.on_step) options.on_step(r);
    }
    const bool last = epoch + 1 == tc.epochs;
    if ((epoch + 1) % spec.eval.every == 0 || last) {
      rec.metrics = evaluate(student, &teacher, d.adapter(position), test, eo, epoch + 1);
      rec.evaluated = true;
    } else {
      rec.metrics.epoch = epoch + 1;
    }
    stream << to_json_line(rec) << '\n' << std::flush;
    report.epochs.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);

    if ((epoch + 1) % spec.checkpoint_every == 0 || last) save_state(files.state(), student, d, epoch + 1);
    if (options.stop_after_epoch && epoch + 1 >= *options.stop_after_epoch && !last) {
      save_state(files.state(), student, d, epoch + 1);
      return report;
    }
  }

  save_student(files.student(), student, d);
  if (tc.epochs == 0 || report.epochs.empty()) {
    report.final = evaluate(student, &teacher, d.adapter(position), test, eo, tc.epochs);
  } else {
    report.final = report.epochs.back().metrics;
  }
  report.finished = true;
  json summary = {{"name", spec.name},
                  {"role", "student"},
                  {"teacher_checkpoint", snapshot.teacher_checkpoint},
                  {"epochs", tc.epochs},
                  {"loss", {{"alpha", spec.loss.alpha}, {"beta", spec.loss.beta}, {"baseline", to_string(spec.loss.baseline)}}},
                  {"final", metrics_json(report.final)}};
  write_text(files.summary(), summary.dump(2) + "\n");
  return report;
}

template <typename T>
MetricsRecord evaluate_impl(const RunSpec& spec, const fs::path& dir) {
  WideResNet<T> teacher = load_teacher<T>(spec);
  const auto [train, test] = load_datasets(spec.data);
  WideResNet<T> student = build_wrn<T>(spec.student, spec.train.seed);
  const HookId extra[] = {spec.eval.position};
  Distiller<T> d(student, teacher, spec.loss, spec.train.momentum, spec.train.weight_decay, adapter_seed(spec), extra);
  RunFiles files{dir};
  int epoch = 0;
  if (fs::exists(files.student())) {
    load_student(files.student(), student, d);
    epoch = spec.train.epochs;
  }
  return evaluate(student, &teacher, d.adapter(spec.eval.position), test, eval_options(spec), epoch);
}

template <typename T>
void export_impl(const RunSpec& spec, const fs::path& dir, const fs::path& csv, bool use_teacher, HookId position) {
  const auto [train, test] = load_datasets(spec.data);
  WideResNet<T> teacher = load_teacher<T>(spec);
  teacher.register_hook(position);
  if (use_teacher) {
    export_features(teacher, test, position, csv, static_cast<std::size_t>(spec.eval.batch_size));
    return;
  }
  WideResNet<T> student = build_wrn<T>(spec.student, spec.train.seed);
  const HookId extra[] = {spec.eval.position};
  Distiller<T> d(student, teacher, spec.loss, spec.train.momentum, spec.train.weight_decay, adapter_seed(spec), extra);
  RunFiles files{dir};
  if (fs::exists(files.student())) load_student(files.student(), student, d);
  student.register_hook(position);
  export_features(student, test, position, csv, static_cast<std::size_t>(spec.eval.batch_size));
}

}  // namespace

std::string metrics_to_json(const MetricsRecord& r) { return metrics_json(r).dump(); }
MetricsRecord metrics_from_json(const std::string& text) { return metrics_from(json::parse(text)); }

std::string to_json_line(const EpochRecord& r) {
  json j = metrics_json(r.metrics);
  j["evaluated"] = r.evaluated;
  j["lr"] = r.lr;
  j["train_l_ce"] = r.train_mean.l_ce;
  j["train_l_sm"] = r.train_mean.l_sm;
  j["train_l_adain"] = r.train_mean.l_adain;
  j["train_l_baseline"] = r.train_mean.l_baseline;
  j["train_total"] = r.train_mean.total;
  return j.dump();
}

std::vector<EpochRecord> read_metrics_stream(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open " + path.string());
  std::vector<EpochRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      EpochRecord r;
      r.metrics = metrics_from(j);
      r.evaluated = j.at("evaluated").get<bool>();
      r.lr = j.at("lr").get<double>();
      r.train_mean.l_ce = j.at("train_l_ce").get<double>();
      r.train_mean.l_sm = j.at("train_l_sm").get<double>();
      r.train_mean.l_adain = j.at("train_l_adain").get<double>();
      r.train_mean.l_baseline = j.at("train_l_baseline").get<double>();
      r.train_mean.total = j.at("train_total").get<double>();
      out.push_back(r);
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ": line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

PretrainReport pretrain_teacher(const RunSpec& spec, const fs::path& out_dir, const RunOptions& options) {
  return spec.teacher_train.precision == Precision::high ? pretrain_impl<double>(spec, out_dir, options)
                                                         : pretrain_impl<float>(spec, out_dir, options);
}

RunReport run_distillation(const RunSpec& spec, const fs::path& out_dir, const RunOptions& options) {
  return spec.train.precision == Precision::high ? distill_impl<double>(spec, out_dir, options)
                                                 : distill_impl<float>(spec, out_dir, options);
}

MetricsRecord evaluate_run(const fs::path& dir, const std::optional<RunSpec>& spec_override) {
  const RunSpec spec = spec_override ? *spec_override : load_run_spec(RunFiles{dir}.config());
  return spec.train.precision == Precision::high ? evaluate_impl<double>(spec, dir) : evaluate_impl<float>(spec, dir);
}

void export_run_features(const fs::path& dir, const fs::path& csv, bool teacher, std::optional<HookId> position) {
  const RunSpec spec = load_run_spec(RunFiles{dir}.config());
  const HookId pos = position.value_or(spec.eval.position);
  if (spec.train.precision == Precision::high) {
    export_impl<double>(spec, dir, csv, teacher, pos);
  } else {
    export_impl<float>(spec, dir, csv, teacher, pos);
  }
}

}  // namespace sdt
