#include "statdistill/run_config.hpp"

#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <json.hpp>

#include "statdistill/errors.hpp"

namespace sdt {

using json = nlohmann::ordered_json;

namespace {

std::string data_kind_name(DataKind k) { return k == DataKind::cifar ? "cifar" : "synthetic"; }

DataKind parse_data_kind(const std::string& s) {
  if (s == "synthetic") return DataKind::synthetic;
  if (s == "cifar") return DataKind::cifar;
  throw ConfigError("unknown data kind '" + s + "' (expected synthetic or cifar)");
}

// Walks one JSON object, collecting problems instead of throwing so that a
// bad file reports every field at once.
class Reader {
 public:
  Reader(const json* node, std::string prefix, std::vector<std::string>& problems)
      : node_(node), prefix_(std::move(prefix)), problems_(problems) {
    if (node_ && !node_->is_object()) {
      problems_.push_back(where() + ": expected an object");
      node_ = nullptr;
    }
  }
  Reader(const Reader&) = delete;
  Reader& operator=(const Reader&) = delete;

  ~Reader() {
    if (!node_) return;
    for (auto it = node_->begin(); it != node_->end(); ++it) {
      if (!seen_.count(it.key())) problems_.push_back(path(it.key()) + ": unknown key");
    }
  }

  template <typename V>
  void get(const std::string& key, V& out) {
    const json* v = find(key);
    if (!v) return;
    try {
      out = v->get<V>();
    } catch (const json::exception&) {
      problems_.push_back(path(key) + ": wrong type (" + std::string(v->type_name()) + ")");
    }
  }

  template <typename V, typename Parse>
  void get_enum(const std::string& key, V& out, Parse parse) {
    const json* v = find(key);
    if (!v) return;
    if (!v->is_string()) {
      problems_.push_back(path(key) + ": expected a string");
      return;
    }
    try {
      out = parse(v->get<std::string>());
    } catch (const Error& e) {
      problems_.push_back(path(key) + ": " + e.what());
    }
  }

  void get_hooks(const std::string& key, std::vector<HookId>& out) {
    const json* v = find(key);
    if (!v) return;
    if (!v->is_array()) {
      problems_.push_back(path(key) + ": expected an array of hook names");
      return;
    }
    std::vector<HookId> hooks;
    for (const auto& item : *v) {
      if (!item.is_string()) {
        problems_.push_back(path(key) + ": expected hook names");
        return;
      }
      try {
        hooks.push_back(parse_hook(item.get<std::string>()));
      } catch (const Error& e) {
        problems_.push_back(path(key) + ": " + e.what());
        return;
      }
    }
    out = std::move(hooks);
  }

  const json* child_node(const std::string& key) { return find(key); }
  std::string path(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }
  std::vector<std::string>& problems() { return problems_; }

 private:
  const json* find(const std::string& key) {
    if (!node_) return nullptr;
    seen_.insert(key);
    auto it = node_->find(key);
    return it == node_->end() ? nullptr : &*it;
  }
  std::string where() const { return prefix_.empty() ? "config" : prefix_; }

  const json* node_;
  std::string prefix_;
  std::vector<std::string>& problems_;
  std::set<std::string> seen_;
};

json wrn_json(const WrnConfig& c) {
  return {{"depth", c.depth},
          {"width", c.width},
          {"base_channels", c.base_channels},
          {"num_classes", c.num_classes},
          {"input_size", c.input_size}};
}

void read_wrn(Reader& r, WrnConfig& c) {
  r.get("depth", c.depth);
  r.get("width", c.width);
  r.get("base_channels", c.base_channels);
  r.get("num_classes", c.num_classes);
  r.get("input_size", c.input_size);
}

json train_json(const TrainConfig& t) {
  json ms = json::array();
  for (const auto& [e, f] : t.lr_milestones) ms.push_back({e, f});
  return {{"epochs", t.epochs},   {"batch_size", t.batch_size}, {"lr", t.lr},
          {"lr_milestones", ms},  {"momentum", t.momentum},     {"weight_decay", t.weight_decay},
          {"seed", t.seed},       {"precision", to_string(t.precision)}};
}

void read_train(Reader& r, TrainConfig& t) {
  r.get("epochs", t.epochs);
  r.get("batch_size", t.batch_size);
  r.get("lr", t.lr);
  r.get("lr_milestones", t.lr_milestones);
  r.get("momentum", t.momentum);
  r.get("weight_decay", t.weight_decay);
  r.get("seed", t.seed);
  r.get_enum("precision", t.precision, parse_precision);
}

json loss_json(const LossConfig& l) {
  json pos = json::array();
  for (auto h : l.positions) pos.push_back(to_string(h));
  return {{"alpha", l.alpha},
          {"beta", l.beta},
          {"positions", pos},
          {"baseline", to_string(l.baseline)},
          {"kd_alpha", l.kd_alpha},
          {"kd_temperature", l.kd_temperature},
          {"at_weight", l.at_weight},
          {"adain_on_probs", l.adain_on_probs},
          {"injection", to_string(l.injection)}};
}

void read_loss(Reader& r, LossConfig& l) {
  r.get("alpha", l.alpha);
  r.get("beta", l.beta);
  r.get_hooks("positions", l.positions);
  r.get_enum("baseline", l.baseline, parse_baseline);
  r.get("kd_alpha", l.kd_alpha);
  r.get("kd_temperature", l.kd_temperature);
  r.get("at_weight", l.at_weight);
  r.get("adain_on_probs", l.adain_on_probs);
  r.get_enum("injection", l.injection, parse_injection);
}

json data_json(const DataSpec& d) {
  return {{"kind", data_kind_name(d.kind)},
          {"synthetic",
           {{"num_classes", d.synthetic.num_classes},
            {"n_per_class", d.synthetic.n_per_class},
            {"size", d.synthetic.size},
            {"noise", d.synthetic.noise},
            {"seed", d.synthetic.seed}}},
          {"cifar_dir", d.cifar_dir},
          {"classes", d.classes},
          {"downscale", d.downscale},
          {"augment", d.augment},
          {"augment_spec",
           {{"pad", d.augment_spec.pad},
            {"random_crop", d.augment_spec.random_crop},
            {"horizontal_flip", d.augment_spec.horizontal_flip},
            {"seed", d.augment_spec.seed}}}};
}

void read_data(Reader& r, DataSpec& d) {
  r.get_enum("kind", d.kind, parse_data_kind);
  if (const json* n = r.child_node("synthetic")) {
    Reader s(n, r.path("synthetic"), r.problems());
    s.get("num_classes", d.synthetic.num_classes);
    s.get("n_per_class", d.synthetic.n_per_class);
    s.get("size", d.synthetic.size);
    s.get("noise", d.synthetic.noise);
    s.get("seed", d.synthetic.seed);
  }
  r.get("cifar_dir", d.cifar_dir);
  r.get("classes", d.classes);
  r.get("downscale", d.downscale);
  r.get("augment", d.augment);
  if (const json* n = r.child_node("augment_spec")) {
    Reader a(n, r.path("augment_spec"), r.problems());
    a.get("pad", d.augment_spec.pad);
    a.get("random_crop", d.augment_spec.random_crop);
    a.get("horizontal_flip", d.augment_spec.horizontal_flip);
    a.get("seed", d.augment_spec.seed);
  }
}

json spec_json(const RunSpec& s) {
  return {{"name", s.name},
          {"teacher", wrn_json(s.teacher)},
          {"student", wrn_json(s.student)},
          {"teacher_train", train_json(s.teacher_train)},
          {"train", train_json(s.train)},
          {"loss", loss_json(s.loss)},
          {"data", data_json(s.data)},
          {"eval",
           {{"position", to_string(s.eval.position)},
            {"batch_size", s.eval.batch_size},
            {"nmi_seed", s.eval.nmi_seed},
            {"every", s.eval.every}}},
          {"output_dir", s.output_dir},
          {"teacher_checkpoint", s.teacher_checkpoint},
          {"teacher_min_accuracy", s.teacher_min_accuracy},
          {"checkpoint_every", s.checkpoint_every}};
}

// Reads into `out`, returning structural problems (types, unknown keys).
std::vector<std::string> read_spec(const json& root, RunSpec& out) {
  std::vector<std::string> problems;
  Reader r(&root, "", problems);
  r.get("name", out.name);
  auto section = [&](const char* key, auto&& fn) {
    if (const json* n = r.child_node(key)) {
      Reader c(n, key, problems);
      fn(c);
    }
  };
  section("teacher", [&](Reader& c) { read_wrn(c, out.teacher); });
  section("student", [&](Reader& c) { read_wrn(c, out.student); });
  section("teacher_train", [&](Reader& c) { read_train(c, out.teacher_train); });
  section("train", [&](Reader& c) { read_train(c, out.train); });
  section("loss", [&](Reader& c) { read_loss(c, out.loss); });
  section("data", [&](Reader& c) { read_data(c, out.data); });
  section("eval", [&](Reader& c) {
    c.get_enum("position", out.eval.position, [](const std::string& s) { return parse_hook(s); });
    c.get("batch_size", out.eval.batch_size);
    c.get("nmi_seed", out.eval.nmi_seed);
    c.get("every", out.eval.every);
  });
  r.get("output_dir", out.output_dir);
  r.get("teacher_checkpoint", out.teacher_checkpoint);
  r.get("teacher_min_accuracy", out.teacher_min_accuracy);
  r.get("checkpoint_every", out.checkpoint_every);
  return problems;
}

void add_prefixed(std::vector<std::string>& out, const std::vector<std::string>& in, const std::string& from,
                  const std::string& to) {
  for (auto p : in) {
    if (p.rfind(from, 0) == 0) p = to + p.substr(from.size());
    out.push_back(std::move(p));
  }
}

std::vector<std::string> wrn_problems(const WrnConfig& c, const std::string& key) {
  try {
    c.validate();
  } catch (const ConfigError& e) {
    return {key + ": " + e.what()};
  }
  return {};
}

}  // namespace

RunSpec default_run_spec() {
  RunSpec s;
  s.teacher_train.epochs = 30;
  s.teacher_train.lr_milestones = {{15, 0.2}, {22, 0.2}};
  s.data.synthetic.noise = 0.35;
  // Logit-space L_AdaIN starts near 100 against a confident teacher; this
  // keeps beta * L_AdaIN on the scale of the cross entropy.
  s.loss.beta = 0.01;
  return s;
}

std::vector<std::string> RunSpec::problems() const {
  std::vector<std::string> out;
  if (name.empty()) out.push_back("name must not be empty");
  add_prefixed(out, wrn_problems(teacher, "teacher"), "", "");
  add_prefixed(out, wrn_problems(student, "student"), "", "");
  add_prefixed(out, teacher_train.problems(), "train.", "teacher_train.");
  add_prefixed(out, train.problems(), "", "");
  add_prefixed(out, loss.problems(), "", "");

  if (teacher.num_classes != student.num_classes) out.push_back("student.num_classes must equal teacher.num_classes");
  if (teacher.input_size != student.input_size) out.push_back("student.input_size must equal teacher.input_size");

  int data_classes = 0;
  int data_side = 0;
  if (data.kind == DataKind::synthetic) {
    if (data.synthetic.num_classes < 2) out.push_back("data.synthetic.num_classes must be >= 2");
    if (data.synthetic.n_per_class < 2) out.push_back("data.synthetic.n_per_class must be >= 2");
    if (data.synthetic.size < 8) out.push_back("data.synthetic.size must be >= 8");
    if (!(data.synthetic.noise >= 0.0)) out.push_back("data.synthetic.noise must be >= 0");
    data_classes = data.synthetic.num_classes;
    data_side = data.synthetic.size;
  } else {
    if (data.cifar_dir.empty()) out.push_back("data.cifar_dir must be set for kind = cifar");
    if (data.downscale < 1 || 32 % data.downscale != 0) out.push_back("data.downscale must divide 32");
    data_classes = data.classes.empty() ? 0 : static_cast<int>(data.classes.size());
    data_side = data.downscale >= 1 ? 32 / data.downscale : 0;
  }
  if (data_classes > 0 && teacher.num_classes != data_classes) {
    out.push_back("teacher.num_classes (" + std::to_string(teacher.num_classes) + ") must equal the dataset's " +
                  std::to_string(data_classes) + " classes");
  }
  if (data_side > 0 && teacher.input_size != data_side) {
    out.push_back("teacher.input_size (" + std::to_string(teacher.input_size) + ") must equal the image side " +
                  std::to_string(data_side));
  }
  if (data.augment_spec.pad < 0) out.push_back("data.augment_spec.pad must be >= 0");
  if (eval.batch_size < 1) out.push_back("eval.batch_size must be >= 1");
  if (eval.every < 1) out.push_back("eval.every must be >= 1");
  if (output_dir.empty()) out.push_back("output_dir must not be empty");
  if (!(teacher_min_accuracy >= 0.0 && teacher_min_accuracy <= 1.0)) {
    out.push_back("teacher_min_accuracy must be in [0,1]");
  }
  if (checkpoint_every < 1) out.push_back("checkpoint_every must be >= 1");
  return out;
}

void RunSpec::validate() const {
  const auto p = problems();
  if (p.empty()) return;
  std::string msg = "invalid run config:";
  for (const auto& s : p) msg += "\n  " + s;
  throw ConfigError(msg);
}

std::filesystem::path RunSpec::teacher_path() const {
  if (!teacher_checkpoint.empty()) return teacher_checkpoint;
  return std::filesystem::path(output_dir) / "teacher.ckpt";
}

std::string serialize_run_spec(const RunSpec& spec) { return spec_json(spec).dump(2) + "\n"; }

namespace {
RunSpec parse_json(const json& root) {
  RunSpec spec = default_run_spec();
  auto problems = read_spec(root, spec);
  const auto values = spec.problems();
  problems.insert(problems.end(), values.begin(), values.end());
  if (!problems.empty()) {
    std::string msg = "invalid run config:";
    for (const auto& s : problems) msg += "\n  " + s;
    throw ConfigError(msg);
  }
  return spec;
}
}  // namespace

RunSpec parse_run_spec(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("run config is not valid JSON: ") + e.what());
  }
  return parse_json(root);
}

RunSpec load_run_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_spec(ss.str());
}

void save_run_spec(const RunSpec& spec, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FileError("cannot write config " + path.string());
  out << serialize_run_spec(spec);
  if (!out) throw FileError("write failed for " + path.string());
}

RunSpec apply_overrides(const RunSpec& spec, const std::vector<std::string>& assignments) {
  if (assignments.empty()) return spec;
  json root = spec_json(spec);
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + a + "' is not key=value");
    const std::string key = a.substr(0, eq);
    const std::string text = a.substr(eq + 1);
    json value;
    try {
      value = json::parse(text);
    } catch (const json::parse_error&) {
      value = text;
    }
    json* node = &root;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
      if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
      if (dot == std::string::npos) {
        (*node)[part] = value;
        break;
      }
      node = &(*node)[part];
      start = dot + 1;
    }
  }
  return parse_json(root);
}

std::pair<DatasetHandle, DatasetHandle> load_datasets(const DataSpec& spec) {
  std::pair<DatasetHandle, DatasetHandle> out;
  if (spec.kind == DataKind::synthetic) {
    out = make_synthetic(spec.synthetic);
  } else {
    std::optional<std::vector<int>> subset;
    if (!spec.classes.empty()) subset = spec.classes;
    out.first = load_cifar_binary(spec.cifar_dir, Split::train, subset, spec.downscale);
    out.second = load_cifar_binary(spec.cifar_dir, Split::test, subset, spec.downscale);
  }
  if (spec.augment) {
    out.first.augment = spec.augment_spec;
  } else {
    out.first.augment.reset();
  }
  return out;
}

}  // namespace sdt
