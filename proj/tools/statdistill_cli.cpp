// Command-line front end: pretrain, distill, ablate, evaluate, sweep,
// export-features, print-config.

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "statdistill/errors.hpp"
#include "statdistill/kernels.hpp"
#include "statdistill/runner.hpp"

extern char** environ;

namespace fs = std::filesystem;
using sdt::RunSpec;

namespace {

struct CommonArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool out_required = true) {
  cmd->add_option("--config", a.config, "Run config (JSON); defaults are used when omitted");
  auto* out = cmd->add_option("--out", a.out, "Run directory");
  if (out_required) out->required();
  cmd->add_option("--seed", a.seed, "Seed for the schedule this command trains");
  cmd->add_option("--override", a.overrides, "dotted.key=value, repeatable")->take_all();
}

RunSpec resolve(const CommonArgs& a, bool teacher_seed) {
  RunSpec spec = a.config.empty() ? sdt::default_run_spec() : sdt::load_run_spec(a.config);
  std::vector<std::string> overrides = a.overrides;
  if (a.seed) overrides.push_back(std::string(teacher_seed ? "teacher_train" : "train") + ".seed=" + std::to_string(*a.seed));
  spec = sdt::apply_overrides(spec, overrides);
  if (!a.out.empty()) spec.output_dir = a.out;
  return spec;
}

void print_final(const std::string& label, const sdt::MetricsRecord& r) {
  std::printf("%-16s top1=%.4f top5=%.4f ce=%.4f kl_ts=%.5f kl_st=%.5f stats_dist=%.5f nmi=%.4f\n", label.c_str(),
              r.top1, r.top5, r.ce_with_labels, r.kl_teacher_student, r.kl_student_teacher, r.stats_distance, r.nmi);
}

std::string self_exe() {
  std::error_code ec;
  auto p = fs::read_symlink("/proc/self/exe", ec);
  if (ec) throw sdt::FileError("cannot locate own executable: " + ec.message());
  return p.string();
}

// Runs each argument vector as a child process, at most `jobs` at a time.
// Returns the number of failed children.
int run_children(const std::vector<std::vector<std::string>>& commands, int jobs) {
  int failed = 0;
  std::size_t next = 0;
  int running = 0;
  auto reap = [&] {
    int status = 0;
    if (::wait(&status) > 0) {
      --running;
      if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) ++failed;
    }
  };
  while (next < commands.size() || running > 0) {
    if (next < commands.size() && running < jobs) {
      std::vector<char*> argv;
      for (const auto& s : commands[next]) argv.push_back(const_cast<char*>(s.c_str()));
      argv.push_back(nullptr);
      pid_t pid = 0;
      if (posix_spawn(&pid, argv[0], nullptr, nullptr, argv.data(), environ) != 0) {
        ++failed;
      } else {
        ++running;
      }
      ++next;
      continue;
    }
    reap();
  }
  return failed;
}

std::string tag(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

nlohmann::ordered_json read_summary(const fs::path& dir) {
  std::ifstream in(dir / "summary.json");
  if (!in) throw sdt::FileError("missing summary in " + dir.string());
  return nlohmann::ordered_json::parse(in);
}

int cmd_pretrain(const CommonArgs& a) {
  const RunSpec spec = resolve(a, true);
  const auto report = sdt::pretrain_teacher(spec, a.out);
  print_final("teacher", report.final);
  std::printf("checkpoint: %s\n", report.checkpoint.c_str());
  if (!report.warning.empty()) std::fprintf(stderr, "warning: %s\n", report.warning.c_str());
  return 0;
}

int cmd_distill(const CommonArgs& a, bool resume) {
  const RunSpec spec = resolve(a, false);
  sdt::RunOptions opts;
  opts.resume = resume;
  opts.on_epoch = [](const sdt::EpochRecord& r) {
    std::fprintf(stderr, "epoch %d loss %.4f%s\n", r.metrics.epoch, r.train_mean.total,
                 r.evaluated ? (" top1 " + std::to_string(r.metrics.top1)).c_str() : "");
  };
  const auto report = sdt::run_distillation(spec, a.out, opts);
  print_final(spec.name, report.final);
  return 0;
}

int cmd_ablate(const CommonArgs& a, const std::string& grid) {
  const RunSpec base = resolve(a, false);
  struct Variant {
    std::string name;
    RunSpec spec;
  };
  std::vector<Variant> variants;
  const std::string teacher = fs::absolute(base.teacher_path()).string();
  auto make = [&](const std::string& name, auto&& edit) {
    RunSpec s = base;
    s.name = base.name + "/" + name;
    s.teacher_checkpoint = teacher;
    s.output_dir = (fs::path(a.out) / name).string();
    edit(s);
    variants.push_back({name, s});
  };
  const double alpha = base.loss.alpha > 0.0 ? base.loss.alpha : 1.0;
  const double beta = base.loss.beta > 0.0 ? base.loss.beta : 1.0;
  if (grid == "loss") {
    make("sm", [&](RunSpec& s) { s.loss.alpha = alpha, s.loss.beta = 0.0; });
    make("adain", [&](RunSpec& s) { s.loss.alpha = 0.0, s.loss.beta = beta; });
    make("sm_adain", [&](RunSpec& s) { s.loss.alpha = alpha, s.loss.beta = beta; });
  } else if (grid == "positions") {
    using sdt::HookId;
    const std::vector<std::pair<std::string, std::vector<HookId>>> grids = {
        {"conv2", {HookId::conv2}},
        {"conv3", {HookId::conv3}},
        {"conv4", {HookId::conv4}},
        {"conv2+3+4", {HookId::conv2, HookId::conv3, HookId::conv4}}};
    for (const auto& [name, hooks] : grids) {
      make(name, [&](RunSpec& s) {
        s.loss.positions = hooks;
        if (s.loss.alpha == 0.0 && s.loss.beta == 0.0) s.loss.alpha = s.loss.beta = 1.0;
      });
    }
  } else {
    throw sdt::ConfigError("unknown grid '" + grid + "' (expected loss or positions)");
  }

  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  for (const auto& v : variants) {
    const auto report = sdt::run_distillation(v.spec, v.spec.output_dir);
    print_final(v.name, report.final);
    table.push_back({{"variant", v.name},
                     {"dir", v.spec.output_dir},
                     {"final", nlohmann::ordered_json::parse(sdt::metrics_to_json(report.final))}});
  }
  std::ofstream(fs::path(a.out) / ("ablation_" + grid + ".json")) << table.dump(2) << "\n";
  return 0;
}

int cmd_evaluate(const CommonArgs& a) {
  std::optional<RunSpec> spec;
  if (!a.config.empty() || !a.overrides.empty() || a.seed) {
    CommonArgs b = a;
    if (b.config.empty() && fs::exists(sdt::RunFiles{a.out}.config())) b.config = sdt::RunFiles{a.out}.config();
    spec = resolve(b, false);
  }
  const auto record = sdt::evaluate_run(a.out, spec);
  print_final("evaluate", record);
  std::ofstream(fs::path(a.out) / "evaluation.json") << sdt::metrics_to_json(record) << "\n";
  return 0;
}

int cmd_sweep(const CommonArgs& a, const std::vector<double>& values, int jobs) {
  const RunSpec base = resolve(a, false);
  const std::string teacher = fs::absolute(base.teacher_path()).string();
  const std::string exe = self_exe();
  std::vector<std::vector<std::string>> commands;
  std::vector<std::pair<std::string, std::pair<double, double>>> dirs;
  for (double alpha : values) {
    for (double beta : values) {
      RunSpec s = base;
      const std::string name = "alpha_" + tag(alpha) + "_beta_" + tag(beta);
      const fs::path dir = fs::path(a.out) / name;
      fs::create_directories(dir);
      s.name = base.name + "/" + name;
      s.loss.alpha = alpha;
      s.loss.beta = beta;
      s.teacher_checkpoint = teacher;
      s.output_dir = dir.string();
      sdt::save_run_spec(s, dir / "sweep_config.json");
      commands.push_back({exe, "distill", "--config", (dir / "sweep_config.json").string(), "--out", dir.string()});
      dirs.push_back({dir.string(), {alpha, beta}});
    }
  }
  const int failed = run_children(commands, std::max(1, jobs));
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  std::printf("%-8s %-8s %-8s %-12s\n", "alpha", "beta", "top1", "stats_dist");
  for (const auto& [dir, ab] : dirs) {
    if (!fs::exists(fs::path(dir) / "summary.json")) continue;
    const auto s = read_summary(dir);
    table.push_back({{"alpha", ab.first}, {"beta", ab.second}, {"dir", dir}, {"final", s.at("final")}});
    std::printf("%-8g %-8g %-8.4f %-12.5f\n", ab.first, ab.second, s.at("final").at("top1").get<double>(),
                s.at("final").at("stats_distance").get<double>());
  }
  std::ofstream(fs::path(a.out) / "sweep.json") << table.dump(2) << "\n";
  if (failed > 0) {
    std::fprintf(stderr, "%d sweep runs failed\n", failed);
    return 1;
  }
  return 0;
}

int cmd_export(const CommonArgs& a, const std::string& csv, bool teacher, const std::string& position) {
  std::optional<sdt::HookId> hook;
  if (!position.empty()) hook = sdt::parse_hook(position);
  sdt::export_run_features(a.out, csv, teacher, hook);
  std::printf("wrote %s\n", csv.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  sdt::kernels::configure_threads_from_env();
  CLI::App app{"statdistill: feature-statistics knowledge distillation"};
  app.require_subcommand(1);

  CommonArgs pre, dis, abl, eva, swp, exp;
  auto* c_pre = app.add_subcommand("pretrain", "Train the teacher and write teacher.ckpt");
  add_common(c_pre, pre);

  auto* c_dis = app.add_subcommand("distill", "Train a student against the frozen teacher");
  add_common(c_dis, dis);
  bool resume = false;
  c_dis->add_flag("--resume", resume, "Continue from state.ckpt in the run directory");

  auto* c_abl = app.add_subcommand("ablate", "Run the loss grid or the positions grid");
  add_common(c_abl, abl);
  std::string grid = "loss";
  c_abl->add_option("--grid", grid, "loss | positions")->check(CLI::IsMember({"loss", "positions"}));

  auto* c_eva = app.add_subcommand("evaluate", "Re-evaluate a run directory from its config and checkpoints");
  add_common(c_eva, eva);

  auto* c_swp = app.add_subcommand("sweep", "Grid over alpha x beta, one process per run");
  add_common(c_swp, swp);
  std::vector<double> values = {0.1, 1.0, 10.0};
  int jobs = 1;
  c_swp->add_option("--values", values, "Values used for both alpha and beta")->delimiter(',');
  c_swp->add_option("--jobs", jobs, "Concurrent runs");

  auto* c_exp = app.add_subcommand("export-features", "Write pooled test features of a run to CSV");
  add_common(c_exp, exp);
  std::string csv, position;
  bool teacher = false;
  c_exp->add_option("--csv", csv, "Output CSV path")->required();
  c_exp->add_option("--position", position, "conv2 | conv3 | conv4 (default: eval.position)");
  c_exp->add_flag("--teacher", teacher, "Export teacher features instead of the student's");

  auto* c_cfg = app.add_subcommand("print-config", "Print the default run config");

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_pre->parsed()) return cmd_pretrain(pre);
    if (c_dis->parsed()) return cmd_distill(dis, resume);
    if (c_abl->parsed()) return cmd_ablate(abl, grid);
    if (c_eva->parsed()) return cmd_evaluate(eva);
    if (c_swp->parsed()) return cmd_sweep(swp, values, jobs);
    if (c_exp->parsed()) return cmd_export(exp, csv, teacher, position);
    if (c_cfg->parsed()) {
      std::cout << sdt::serialize_run_spec(sdt::default_run_spec());
      return 0;
    }
  } catch (const sdt::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const sdt::FileError& e) {
    std::fprintf(stderr, "file error: %s\n", e.what());
    return 3;
  } catch (const sdt::NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
