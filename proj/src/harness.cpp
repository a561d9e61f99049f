#include "wdlab/harness.hpp"

#include "wdlab/rng.hpp"
#include "wdlab/tape.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;

namespace wdlab {

std::string default_out_root() {
  if (const char* env = std::getenv("WDLAB_OUT_ROOT"); env && *env) return env;
  return "runs";
}

// ---------------------------------------------------------------------------
// Config file: flat key/value text with one [section] per module.

namespace {

struct IniFile {
  // section -> ordered key/value pairs
  std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> sections;

  const std::vector<std::pair<std::string, std::string>>* find(const std::string& name) const {
    for (const auto& [sec, kvs] : sections)
      if (sec == name) return &kvs;
    return nullptr;
  }
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

IniFile parse_ini(const std::string& text) {
  IniFile ini;
  std::istringstream in(text);
  std::string line;
  std::string current;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw std::runtime_error("config line " + std::to_string(lineno) + ": unterminated section");
      current = trim(t.substr(1, t.size() - 2));
      ini.sections.emplace_back(current, std::vector<std::pair<std::string, std::string>>{});
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config line " + std::to_string(lineno) + ": expected key = value");
    if (current.empty())
      throw std::runtime_error("config line " + std::to_string(lineno) + ": key outside any [section]");
    ini.sections.back().second.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return ini;
}

class SectionReader {
 public:
  SectionReader(const IniFile& ini, std::string name) : name_(std::move(name)) {
    kvs_ = ini.find(name_);
  }

  bool present() const { return kvs_ != nullptr; }

  std::optional<std::string> get(const std::string& key) {
    seen_.push_back(key);
    if (!kvs_) return std::nullopt;
    for (const auto& [k, v] : *kvs_)
      if (k == key) return v;
    return std::nullopt;
  }

  template <class T, class Fn>
  void read(const std::string& key, T& out, Fn convert) {
    if (auto v = get(key)) out = convert(*v);
  }

  void read_string(const std::string& key, std::string& out) {
    read(key, out, [](const std::string& v) { return v; });
  }
  void read_double(const std::string& key, double& out) {
    read(key, out, [this, &key](const std::string& v) { return to_double(key, v); });
  }
  void read_long(const std::string& key, long& out) {
    read(key, out, [this, &key](const std::string& v) { return to_long(key, v); });
  }
  void read_index(const std::string& key, Index& out) {
    read(key, out, [this, &key](const std::string& v) { return static_cast<Index>(to_long(key, v)); });
  }
  void read_int(const std::string& key, int& out) {
    read(key, out, [this, &key](const std::string& v) { return static_cast<int>(to_long(key, v)); });
  }
  void read_u64(const std::string& key, std::uint64_t& out) {
    read(key, out, [this, &key](const std::string& v) { return to_u64(key, v); });
  }
  void read_bool(const std::string& key, bool& out) {
    read(key, out, [this, &key](const std::string& v) { return to_bool(key, v); });
  }

  /// Reject unknown keys so typos fail loudly.
  void finish() const {
    if (!kvs_) return;
    for (const auto& [k, v] : *kvs_) {
      (void)v;
      if (std::find(seen_.begin(), seen_.end(), k) == seen_.end())
        throw std::runtime_error("config [" + name_ + "]: unknown key '" + k + "'");
    }
  }

  double to_double(const std::string& key, const std::string& v) const {
    try {
      std::size_t pos = 0;
      const double d = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw std::runtime_error("config [" + name_ + "] " + key + ": bad number '" + v + "'");
    }
  }
  long to_long(const std::string& key, const std::string& v) const {
    try {
      std::size_t pos = 0;
      const long l = std::stol(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return l;
    } catch (const std::exception&) {
      throw std::runtime_error("config [" + name_ + "] " + key + ": bad integer '" + v + "'");
    }
  }
  std::uint64_t to_u64(const std::string& key, const std::string& v) const {
    try {
      std::size_t pos = 0;
      const unsigned long long u = std::stoull(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return u;
    } catch (const std::exception&) {
      throw std::runtime_error("config [" + name_ + "] " + key + ": bad integer '" + v + "'");
    }
  }
  bool to_bool(const std::string& key, const std::string& v) const {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::runtime_error("config [" + name_ + "] " + key + ": bad bool '" + v + "'");
  }

 private:
  std::string name_;
  const std::vector<std::pair<std::string, std::string>>* kvs_ = nullptr;
  mutable std::vector<std::string> seen_;
};

template <class T, class Fn>
std::vector<T> parse_list(const std::string& v, Fn convert) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const std::string t = trim(item);
    if (!t.empty()) out.push_back(convert(t));
  }
  return out;
}

}  // namespace

RunConfig parse_run_config_text(const std::string& text) {
  const IniFile ini = parse_ini(text);
  RunConfig cfg;
  cfg.source_text = text;

  {
    SectionReader s(ini, "run");
    s.read_string("id", cfg.run_id);
    s.read_u64("seed", cfg.seed);
    s.read_long("epochs", cfg.epochs);
    s.read_index("batch_size", cfg.batch_size);
    s.read_string("out_root", cfg.out_root);
    s.finish();
  }
  {
    SectionReader s(ini, "model");
    if (auto v = s.get("widths")) {
      cfg.model.layer_widths = parse_list<Index>(*v, [&s](const std::string& t) {
        return static_cast<Index>(s.to_long("widths", t));
      });
    }
    s.read_bool("batch_norm", cfg.model.use_batch_norm);
    if (auto v = s.get("init_seed")) {
      cfg.model.init_seed = s.to_u64("init_seed", *v);
      cfg.model_seed_from_run = false;
    }
    s.read_double("bn_eps", cfg.model.bn_eps);
    s.finish();
  }
  bool alpha_given = false;
  {
    SectionReader s(ini, "optimizer");
    std::string kind = "sgd";
    s.read_string("kind", kind);
    alpha_given = s.get("alpha").has_value();
    if (kind == "sgd") {
      cfg.optimizer = OptimizerKind::Sgd;
    } else if (kind == "adam") {
      cfg.optimizer = OptimizerKind::Adam;
    } else {
      throw std::runtime_error("config [optimizer] kind: expected sgd or adam, got '" + kind + "'");
    }
    auto read_unit = [&s](const std::string& key, LrDecayUnit& out) {
      if (auto v = s.get(key)) {
        if (*v == "epoch") out = LrDecayUnit::PerEpoch;
        else if (*v == "step") out = LrDecayUnit::PerStep;
        else throw std::runtime_error("config [optimizer] " + key + ": expected epoch or step");
      }
    };
    if (cfg.optimizer == OptimizerKind::Sgd) {
      s.read_double("alpha", cfg.sgd.alpha);
      s.read_double("momentum", cfg.sgd.momentum);
      s.read_double("lambda", cfg.sgd.lambda);
      s.read_double("lr_decay", cfg.sgd.lr_decay);
      read_unit("lr_decay_unit", cfg.sgd.lr_decay_unit);
    } else {
      s.read_double("alpha", cfg.adam.alpha);
      s.read_double("beta1", cfg.adam.beta1);
      s.read_double("beta2", cfg.adam.beta2);
      s.read_double("eps", cfg.adam.eps);
      s.read_double("lambda", cfg.adam.lambda);
      s.read_double("lr_decay", cfg.adam.lr_decay);
      read_unit("lr_decay_unit", cfg.adam.lr_decay_unit);
      s.read_bool("decay_uses_scheduled_lr", cfg.adam.decay_uses_scheduled_lr);
      if (auto v = s.get("mode")) {
        if (*v == "coupled_l2") cfg.adam.mode = AdamMode::CoupledL2;
        else if (*v == "decoupled") cfg.adam.mode = AdamMode::Decoupled;
        else if (*v == "separated") cfg.adam.mode = AdamMode::Separated;
        else throw std::runtime_error("config [optimizer] mode: unknown '" + *v + "'");
      }
    }
    s.finish();
  }
  {
    SectionReader s(ini, "wd_schedule");
    if (auto v = s.get("policy")) {
      if (*v == "always") cfg.schedule.policy = WdSchedule::Policy::Always;
      else if (*v == "never") cfg.schedule.policy = WdSchedule::Policy::Never;
      else if (*v == "before_epoch") cfg.schedule.policy = WdSchedule::Policy::BeforeEpoch;
      else if (*v == "after_epoch") cfg.schedule.policy = WdSchedule::Policy::AfterEpoch;
      else if (*v == "every_k") cfg.schedule.policy = WdSchedule::Policy::EveryKSteps;
      else throw std::runtime_error("config [wd_schedule] policy: unknown '" + *v + "'");
    }
    s.read_long("epoch", cfg.schedule.cutoff_epoch);
    s.read_long("k", cfg.schedule.k);
    s.read_bool("boost", cfg.schedule.boost);
    s.finish();
    if (cfg.schedule.cutoff_epoch < 0)
      throw std::runtime_error("config [wd_schedule] epoch: must be >= 0");
    if (cfg.schedule.k < 1) throw std::runtime_error("config [wd_schedule] k: must be >= 1");
  }
  {
    SectionReader s(ini, "data");
    if (auto v = s.get("kind")) {
      if (*v == "blobs") cfg.data.kind = DatasetSpec::Kind::Blobs;
      else if (*v == "csv") cfg.data.kind = DatasetSpec::Kind::Csv;
      else if (*v == "idx") cfg.data.kind = DatasetSpec::Kind::Idx;
      else throw std::runtime_error("config [data] kind: unknown '" + *v + "'");
    }
    s.read_int("classes", cfg.data.classes);
    s.read_int("dim", cfg.data.dim);
    s.read_int("per_class_train", cfg.data.per_class_train);
    s.read_int("per_class_test", cfg.data.per_class_test);
    s.read_double("spread", cfg.data.spread);
    s.read_u64("seed", cfg.data.seed);
    s.read_string("path", cfg.data.path);
    s.read_string("test_path", cfg.data.test_path);
    s.read_bool("shuffle_labels", cfg.data.shuffle_train_labels);
    s.read_u64("shuffle_seed", cfg.data.shuffle_seed);
    s.finish();
  }
  {
    SectionReader s(ini, "metrics");
    s.read_long("per_step_every", cfg.cadence.per_step_every);
    s.read_long("test_every_epochs", cfg.cadence.test_every_epochs);
    if (auto v = s.get("quantiles")) {
      cfg.cadence.quantiles = parse_list<double>(*v, [&s](const std::string& t) {
        return s.to_double("quantiles", t);
      });
    }
    s.finish();
  }
  {
    SectionReader s(ini, "sharpness");
    if (auto v = s.get("epochs")) {
      cfg.sharpness.epochs = parse_list<long>(*v, [&s](const std::string& t) {
        return s.to_long("epochs", t);
      });
    }
    s.read_string("surface", cfg.sharpness.surface);
    s.read_double("gamma", cfg.sharpness.perturb.gamma);
    s.read_int("samples", cfg.sharpness.perturb.samples);
    s.read_u64("seed", cfg.sharpness.perturb.seed);
    s.read_double("keskar_epsilon", cfg.sharpness.keskar.epsilon);
    s.read_int("keskar_steps", cfg.sharpness.keskar.ascent_steps);
    s.read_double("keskar_step_size", cfg.sharpness.keskar.ascent_step_size);
    s.read_int("keskar_restarts", cfg.sharpness.keskar.restarts);
    s.read_int("hessian_iters", cfg.sharpness.hessian_iters);
    s.read_double("hessian_tol", cfg.sharpness.hessian_tol);
    s.read_index("eval_batch", cfg.sharpness.eval_batch);
    s.finish();
    if (cfg.sharpness.surface != "train" && cfg.sharpness.surface != "test")
      throw std::runtime_error("config [sharpness] surface: expected train or test");
  }
  {
    SectionReader s(ini, "norm_match");
    s.read_string("reference", cfg.norm_match.reference_run_dir);
    if (auto v = s.get("scope")) {
      if (*v == "all") cfg.norm_match.scope = NormMatchScope::All;
      else if (*v == "non_norm") cfg.norm_match.scope = NormMatchScope::NonNormParams;
      else throw std::runtime_error("config [norm_match] scope: expected all or non_norm");
    }
    s.finish();
  }

  if (cfg.epochs < 0) throw std::runtime_error("config [run] epochs: must be >= 0");
  if (cfg.batch_size < 1) throw std::runtime_error("config [run] batch_size: must be >= 1");

  // Shuffled-label runs default to a 10x lower learning rate; an explicit
  // alpha in the file always wins.
  if (cfg.data.shuffle_train_labels && !alpha_given) {
    cfg.sgd.alpha /= 10.0;
    cfg.adam.alpha /= 10.0;
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config_text(ss.str());
}

std::string serialize_run_config(const RunConfig& cfg) {
  auto num = [](double v) {
    nlohmann::json j = v;
    return j.dump();
  };
  std::ostringstream out;
  out << "[run]\n";
  out << "id = " << cfg.run_id << "\n";
  out << "seed = " << cfg.seed << "\n";
  out << "epochs = " << cfg.epochs << "\n";
  out << "batch_size = " << cfg.batch_size << "\n";
  if (!cfg.out_root.empty()) out << "out_root = " << cfg.out_root << "\n";

  out << "\n[model]\n";
  if (!cfg.model.layer_widths.empty()) {
    out << "widths = ";
    for (std::size_t i = 0; i < cfg.model.layer_widths.size(); ++i)
      out << (i ? "," : "") << cfg.model.layer_widths[i];
    out << "\n";
  }
  out << "batch_norm = " << (cfg.model.use_batch_norm ? "true" : "false") << "\n";
  if (!cfg.model_seed_from_run) out << "init_seed = " << cfg.model.init_seed << "\n";
  out << "bn_eps = " << num(cfg.model.bn_eps) << "\n";

  out << "\n[optimizer]\n";
  auto unit = [](LrDecayUnit u) { return u == LrDecayUnit::PerEpoch ? "epoch" : "step"; };
  if (cfg.optimizer == OptimizerKind::Sgd) {
    out << "kind = sgd\n";
    out << "alpha = " << num(cfg.sgd.alpha) << "\n";
    out << "momentum = " << num(cfg.sgd.momentum) << "\n";
    out << "lambda = " << num(cfg.sgd.lambda) << "\n";
    out << "lr_decay = " << num(cfg.sgd.lr_decay) << "\n";
    out << "lr_decay_unit = " << unit(cfg.sgd.lr_decay_unit) << "\n";
  } else {
    out << "kind = adam\n";
    out << "alpha = " << num(cfg.adam.alpha) << "\n";
    out << "beta1 = " << num(cfg.adam.beta1) << "\n";
    out << "beta2 = " << num(cfg.adam.beta2) << "\n";
    out << "eps = " << num(cfg.adam.eps) << "\n";
    out << "lambda = " << num(cfg.adam.lambda) << "\n";
    const char* mode = cfg.adam.mode == AdamMode::CoupledL2 ? "coupled_l2"
                       : cfg.adam.mode == AdamMode::Decoupled ? "decoupled"
                                                              : "separated";
    out << "mode = " << mode << "\n";
    out << "decay_uses_scheduled_lr = " << (cfg.adam.decay_uses_scheduled_lr ? "true" : "false") << "\n";
    out << "lr_decay = " << num(cfg.adam.lr_decay) << "\n";
    out << "lr_decay_unit = " << unit(cfg.adam.lr_decay_unit) << "\n";
  }

  out << "\n[wd_schedule]\n";
  switch (cfg.schedule.policy) {
    case WdSchedule::Policy::Always: out << "policy = always\n"; break;
    case WdSchedule::Policy::Never: out << "policy = never\n"; break;
    case WdSchedule::Policy::BeforeEpoch:
      out << "policy = before_epoch\nepoch = " << cfg.schedule.cutoff_epoch << "\n";
      break;
    case WdSchedule::Policy::AfterEpoch:
      out << "policy = after_epoch\nepoch = " << cfg.schedule.cutoff_epoch << "\n";
      break;
    case WdSchedule::Policy::EveryKSteps:
      out << "policy = every_k\nk = " << cfg.schedule.k << "\n";
      out << "boost = " << (cfg.schedule.boost ? "true" : "false") << "\n";
      break;
  }

  out << "\n[data]\n";
  switch (cfg.data.kind) {
    case DatasetSpec::Kind::Blobs:
      out << "kind = blobs\n";
      out << "classes = " << cfg.data.classes << "\n";
      out << "dim = " << cfg.data.dim << "\n";
      out << "per_class_train = " << cfg.data.per_class_train << "\n";
      out << "per_class_test = " << cfg.data.per_class_test << "\n";
      out << "spread = " << num(cfg.data.spread) << "\n";
      out << "seed = " << cfg.data.seed << "\n";
      break;
    case DatasetSpec::Kind::Csv:
      out << "kind = csv\npath = " << cfg.data.path << "\n";
      if (!cfg.data.test_path.empty()) out << "test_path = " << cfg.data.test_path << "\n";
      break;
    case DatasetSpec::Kind::Idx:
      out << "kind = idx\npath = " << cfg.data.path << "\n";
      if (!cfg.data.test_path.empty()) out << "test_path = " << cfg.data.test_path << "\n";
      break;
  }
  if (cfg.data.shuffle_train_labels) {
    out << "shuffle_labels = true\n";
    out << "shuffle_seed = " << cfg.data.shuffle_seed << "\n";
  }

  out << "\n[metrics]\n";
  out << "per_step_every = " << cfg.cadence.per_step_every << "\n";
  out << "test_every_epochs = " << cfg.cadence.test_every_epochs << "\n";
  out << "quantiles = ";
  for (std::size_t i = 0; i < cfg.cadence.quantiles.size(); ++i)
    out << (i ? "," : "") << num(cfg.cadence.quantiles[i]);
  out << "\n";

  if (!cfg.sharpness.epochs.empty()) {
    out << "\n[sharpness]\n";
    out << "epochs = ";
    for (std::size_t i = 0; i < cfg.sharpness.epochs.size(); ++i)
      out << (i ? "," : "") << cfg.sharpness.epochs[i];
    out << "\n";
    out << "surface = " << cfg.sharpness.surface << "\n";
    out << "gamma = " << num(cfg.sharpness.perturb.gamma) << "\n";
    out << "samples = " << cfg.sharpness.perturb.samples << "\n";
    out << "seed = " << cfg.sharpness.perturb.seed << "\n";
    out << "keskar_epsilon = " << num(cfg.sharpness.keskar.epsilon) << "\n";
    out << "keskar_steps = " << cfg.sharpness.keskar.ascent_steps << "\n";
    out << "hessian_iters = " << cfg.sharpness.hessian_iters << "\n";
    out << "hessian_tol = " << num(cfg.sharpness.hessian_tol) << "\n";
    out << "eval_batch = " << cfg.sharpness.eval_batch << "\n";
  }
  if (!cfg.norm_match.reference_run_dir.empty()) {
    out << "\n[norm_match]\n";
    out << "reference = " << cfg.norm_match.reference_run_dir << "\n";
    out << "scope = "
        << (cfg.norm_match.scope == NormMatchScope::All ? "all" : "non_norm") << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Data and evaluation.

LoadedData load_dataset(const DatasetSpec& spec) {
  LoadedData out;
  switch (spec.kind) {
    case DatasetSpec::Kind::Blobs:
      out.train = make_blobs(spec.classes, spec.dim, spec.per_class_train,
                             spec.spread, spec.seed);
      if (spec.per_class_test > 0) {
        out.test = make_blobs(spec.classes, spec.dim, spec.per_class_test,
                              spec.spread, mix_seed(spec.seed, 0x7e57));
      }
      break;
    case DatasetSpec::Kind::Csv:
      out.train = load_external(spec.path, ExternalFormat::CsvFeaturesLabel);
      if (!spec.test_path.empty())
        out.test = load_external(spec.test_path, ExternalFormat::CsvFeaturesLabel);
      break;
    case DatasetSpec::Kind::Idx:
      out.train = load_external(spec.path, ExternalFormat::IdxImages);
      if (!spec.test_path.empty())
        out.test = load_external(spec.test_path, ExternalFormat::IdxImages);
      break;
  }
  if (out.test && out.test->num_classes < out.train.num_classes)
    out.test->num_classes = out.train.num_classes;
  if (spec.shuffle_train_labels)
    out.train = shuffle_labels(out.train, spec.shuffle_seed);
  return out;
}

namespace {

long correct_count(const Tensor& logits, const std::vector<int>& labels) {
  long correct = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    Index best = 0;
    for (Index j = 1; j < logits.cols(); ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    if (best == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return correct;
}

std::vector<std::pair<Index, Index>> eval_batch_ranges(Index n, Index batch) {
  std::vector<std::pair<Index, Index>> ranges;
  Index start = 0;
  while (start < n) {
    Index end = std::min(n, start + batch);
    if (n - end == 1) end = n;  // fold a trailing singleton
    ranges.emplace_back(start, end);
    start = end;
  }
  return ranges;
}

// Fixed class-mixing order for batched evaluation. External files may arrive
// sorted by class, and batch statistics over single-class batches are
// meaningless; the constant seed keeps the metric definition deterministic.
std::vector<Index> eval_order(Index n) {
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng(0xe7a1u);
  rng.shuffle(order);
  return order;
}

Tensor gather_rows(const Tensor& x, const std::vector<Index>& order, Index begin,
                   Index end) {
  Tensor out({end - begin, x.cols()});
  for (Index i = begin; i < end; ++i) {
    const Index src = order[static_cast<std::size_t>(i)];
    out.array().segment((i - begin) * x.cols(), x.cols()) =
        x.array().segment(src * x.cols(), x.cols());
  }
  return out;
}

std::vector<int> gather_labels(const std::vector<int>& labels,
                               const std::vector<Index>& order, Index begin,
                               Index end) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(end - begin));
  for (Index i = begin; i < end; ++i)
    out.push_back(labels[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
  return out;
}

}  // namespace

EvalMetrics evaluate(Model& model, const Dataset& data, Index batch_size) {
  EvalMetrics total;
  const Index n = data.size();
  if (n == 0) throw std::invalid_argument("evaluate: empty dataset");
  const std::vector<Index> order = eval_order(n);
  long correct = 0;
  for (const auto& [begin, end] : eval_batch_ranges(n, batch_size)) {
    Tensor xb = gather_rows(data.x, order, begin, end);
    std::vector<int> yb = gather_labels(data.labels, order, begin, end);
    Tape tape;
    const Var logits = mlp_forward(model, tape, xb);
    const auto parts = cross_entropy_split(tape, logits, yb);
    const double w = static_cast<double>(end - begin);
    total.loss += tape.value(parts.loss).value() * w;
    total.loss_pos += tape.value(parts.loss_pos).value() * w;
    total.loss_neg += tape.value(parts.loss_neg).value() * w;
    correct += correct_count(tape.value(logits), yb);
  }
  total.loss /= double(n);
  total.loss_pos /= double(n);
  total.loss_neg /= double(n);
  total.accuracy = static_cast<double>(correct) / double(n);
  return total;
}

// ---------------------------------------------------------------------------
// ModelLossSurface

ModelLossSurface::ModelLossSurface(const Model& model, const Dataset& data,
                                   Index batch_size)
    : model_(model), center_(model.params.flat_values()) {
  if (data.size() == 0) throw std::invalid_argument("ModelLossSurface: empty dataset");
  const std::vector<Index> order = eval_order(data.size());
  for (const auto& [begin, end] : eval_batch_ranges(data.size(), batch_size)) {
    batch_x_.push_back(gather_rows(data.x, order, begin, end));
    batch_labels_.push_back(gather_labels(data.labels, order, begin, end));
  }
  total_ = data.size();
}

Eigen::Index ModelLossSurface::dim() const { return center_.size(); }

Eigen::VectorXd ModelLossSurface::weights() const { return center_; }

double ModelLossSurface::loss(const Eigen::VectorXd& w) const {
  model_.params.set_flat_values(w);
  double total = 0.0;
  for (std::size_t b = 0; b < batch_x_.size(); ++b) {
    Tape tape;
    const auto parts = cross_entropy_split(
        tape, mlp_forward(model_, tape, batch_x_[b]), batch_labels_[b]);
    total += tape.value(parts.loss).value() *
             static_cast<double>(batch_x_[b].rows());
  }
  return total / static_cast<double>(total_);
}

Eigen::VectorXd ModelLossSurface::gradient(const Eigen::VectorXd& w) const {
  model_.params.set_flat_values(w);
  model_.params.zero_grads();
  for (std::size_t b = 0; b < batch_x_.size(); ++b) {
    Tape tape;
    const auto parts = cross_entropy_split(
        tape, mlp_forward(model_, tape, batch_x_[b]), batch_labels_[b]);
    // Per-batch means combine to the dataset mean through a sample-count
    // weight on the scalar loss; gradients accumulate into the ParamSet.
    const Var weighted =
        scale(tape, parts.loss, static_cast<double>(batch_x_[b].rows()) /
                                    static_cast<double>(total_));
    tape.backward(weighted);
  }
  return model_.params.flat_grads();
}

// ---------------------------------------------------------------------------
// train / sweep

namespace {

std::vector<double> load_reference_epoch_norms(const std::string& run_dir) {
  const std::string path = (fs::path(run_dir) / "epoch_norms.csv").string();
  std::ifstream in(path);
  if (!in) throw std::runtime_error("norm_match: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("norm_match: empty " + path);
  std::vector<double> norms;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw std::runtime_error("norm_match: malformed line in " + path);
    norms.push_back(std::stod(line.substr(comma + 1)));
  }
  return norms;
}

nlohmann::json perturbation_json(const PerturbationReport& r) {
  return {{"mean", r.mean},          {"stderr", r.stderr_mean},
          {"base_loss", r.base_loss}, {"delta", r.delta},
          {"samples", r.samples},    {"non_finite", r.non_finite}};
}

void write_sharpness_report(const std::string& path, Model& model,
                            const Dataset& data, const SharpnessEval& cfg) {
  ModelLossSurface surface(model, data, cfg.eval_batch);

  const auto mult = multiplicative_sharpness(surface, cfg.perturb);
  const auto addv = additive_sharpness(surface, cfg.perturb);
  const auto keskar = keskar_sharpness(surface, cfg.keskar);
  const auto eig = hessian_top_eigenvalue(surface, cfg.hessian_iters, cfg.hessian_tol);

  nlohmann::json j;
  j["surface"] = cfg.surface;
  j["config"] = {{"gamma", cfg.perturb.gamma},
                 {"samples", cfg.perturb.samples},
                 {"seed", cfg.perturb.seed},
                 {"keskar_epsilon", cfg.keskar.epsilon},
                 {"keskar_steps", cfg.keskar.ascent_steps},
                 {"keskar_step_size", cfg.keskar.ascent_step_size},
                 {"hessian_iters", cfg.hessian_iters},
                 {"hessian_tol", cfg.hessian_tol},
                 {"eval_batch", cfg.eval_batch}};
  j["multiplicative"] = perturbation_json(mult);
  j["additive"] = perturbation_json(addv);
  j["keskar"] = {{"value", keskar.value},
                 {"restart_spread", keskar.restart_spread},
                 {"restarts", keskar.restarts},
                 {"lower_bound", true}};
  j["hessian_top_eigenvalue"] = {{"value", eig.value},
                                 {"converged", eig.converged},
                                 {"iterations", eig.iterations}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

struct MetricWriter {
  std::ofstream jsonl;
  std::ofstream csv;
  const std::vector<double>* quantiles;

  MetricWriter(const std::string& jsonl_path, const std::string& csv_path,
               const std::vector<double>& qs)
      : jsonl(jsonl_path), csv(csv_path), quantiles(&qs) {
    if (!jsonl || !csv)
      throw std::runtime_error("cannot open metric logs for writing");
    csv << MetricRecord::csv_header(qs) << "\n";
  }

  void write(const MetricRecord& r) {
    jsonl << r.to_json_line() << "\n";
    csv << r.to_csv_row(*quantiles) << "\n";
  }
};

}  // namespace

RunArtifact train(const RunConfig& config_in) {
  RunConfig config = config_in;
  if (config.out_root.empty()) config.out_root = default_out_root();
  if (config.source_text.empty()) config.source_text = serialize_run_config(config);

  RunArtifact art;
  art.run_id = config.run_id;

  const fs::path run_dir = fs::path(config.out_root) / config.run_id;
  fs::create_directories(run_dir);
  art.run_dir = run_dir.string();

  {  // byte-exact config snapshot
    std::ofstream snap(run_dir / "config.ini", std::ios::binary);
    snap << config.source_text;
  }

  LoadedData data = load_dataset(config.data);

  if (config.model.layer_widths.empty())
    config.model.layer_widths = {data.train.dim(), 32, data.train.num_classes};
  if (config.model.layer_widths.front() != data.train.dim())
    throw std::runtime_error("train: model input width " +
                             std::to_string(config.model.layer_widths.front()) +
                             " != data dim " + std::to_string(data.train.dim()));
  if (config.model.layer_widths.back() < data.train.num_classes)
    throw std::runtime_error("train: model output width smaller than class count");
  if (config.model_seed_from_run) config.model.init_seed = config.seed;

  std::vector<double> reference_norms;
  if (!config.norm_match.reference_run_dir.empty()) {
    reference_norms = load_reference_epoch_norms(config.norm_match.reference_run_dir);
    if (static_cast<long>(reference_norms.size()) < config.epochs)
      throw std::runtime_error("norm_match: reference has " +
                               std::to_string(reference_norms.size()) +
                               " epoch norms, need " + std::to_string(config.epochs));
  }

  Model model = build_mlp(config.model);
  const Eigen::VectorXd w0 = model.params.flat_values();
  art.initial_weight_norm = w0.norm();

  SgdState sgd_state;
  AdamState adam_state;

  MetricWriter writer((run_dir / "metrics.jsonl").string(),
                      (run_dir / "metrics.csv").string(), config.cadence.quantiles);
  std::ofstream epoch_norms_csv(run_dir / "epoch_norms.csv");
  epoch_norms_csv << "epoch,norm\n";

  BatchIter batches(data.train, config.batch_size, mix_seed(config.seed, 0xba7c));
  batches.avoid_singleton_final_batch(config.model.use_batch_norm);

  const bool want_adam_quantiles = config.optimizer == OptimizerKind::Adam;

  auto epoch_record = [&](long epoch, long global_step) {
    MetricRecord rec;
    rec.run_id = config.run_id;
    rec.epoch = epoch;
    rec.step = global_step;
    rec.phase = "epoch";
    rec.weight_norm_sq = model.params.flat_values().squaredNorm();
    rec.dist_from_init = dist_from_init(model.params, w0);
    rec.per_layer_norms = per_entry_norms(model.params);

    const EvalMetrics tr = evaluate(model, data.train, config.batch_size);
    rec.train_loss = tr.loss;
    rec.train_acc = tr.accuracy;

    const bool last = epoch + 1 >= config.epochs || config.epochs == 0;
    const bool test_due =
        data.test && (last || (config.cadence.test_every_epochs > 0 &&
                               epoch % config.cadence.test_every_epochs == 0));
    if (test_due) {
      const EvalMetrics te = evaluate(model, *data.test, config.batch_size);
      rec.test_loss = te.loss;
      rec.test_acc = te.accuracy;
      art.final_test_loss = te.loss;
      art.final_test_acc = te.accuracy;
      if (!art.best_test_acc || te.accuracy > *art.best_test_acc)
        art.best_test_acc = te.accuracy;
    }
    if (want_adam_quantiles && adam_state.t >= 1) {
      const auto qs = buffer_ratio_quantiles(adam_state, model.params,
                                             config.cadence.quantiles);
      for (std::size_t i = 0; i < qs.size(); ++i)
        rec.ratio_quantiles.emplace_back(config.cadence.quantiles[i], qs[i]);
    }
    art.final_train_loss = tr.loss;
    art.final_train_acc = tr.accuracy;
    writer.write(rec);
    return rec;
  };

  long global_step = 0;
  bool diverged = false;

  // Initialization-only record, also the whole artifact when epochs == 0.
  epoch_record(-1, 0);

  try {
    for (long epoch = 0; epoch < config.epochs && !diverged; ++epoch) {
      const double alpha =
          config.optimizer == OptimizerKind::Sgd
              ? (config.sgd.lr_decay_unit == LrDecayUnit::PerEpoch
                     ? lr_schedule(config.sgd, epoch)
                     : 0.0)
              : (config.adam.lr_decay_unit == LrDecayUnit::PerEpoch
                     ? lr_schedule(config.adam, epoch)
                     : 0.0);

      batches.start_epoch(epoch);
      Tensor xb;
      std::vector<int> yb;
      while (batches.next(xb, yb)) {
        const double alpha_step =
            config.optimizer == OptimizerKind::Sgd
                ? (config.sgd.lr_decay_unit == LrDecayUnit::PerStep
                       ? lr_schedule(config.sgd.alpha, config.sgd.lr_decay, global_step)
                       : alpha)
                : (config.adam.lr_decay_unit == LrDecayUnit::PerStep
                       ? lr_schedule(config.adam.alpha, config.adam.lr_decay, global_step)
                       : alpha);

        const bool metric_step = config.cadence.per_step_every > 0 &&
                                 global_step % config.cadence.per_step_every == 0;

        Tape tape;
        const Var logits = mlp_forward(model, tape, xb);
        const auto parts = cross_entropy_split(tape, logits, yb);
        const double batch_loss = tape.value(parts.loss).value();
        if (!std::isfinite(batch_loss))
          throw std::runtime_error("train: non-finite loss at step " +
                                   std::to_string(global_step));

        MetricRecord rec;
        double pre_norm_sq = 0.0;
        if (metric_step) {
          model.params.zero_grads();
          tape.backward(parts.loss_pos);
          const Eigen::VectorXd gpos = model.params.flat_grads();
          model.params.zero_grads();
          tape.backward(parts.loss_neg);
          const Eigen::VectorXd gneg = model.params.flat_grads();

          model.params.zero_grads();
          tape.backward(parts.loss);

          rec.run_id = config.run_id;
          rec.epoch = epoch;
          rec.step = global_step;
          rec.phase = "step";
          pre_norm_sq = model.params.flat_values().squaredNorm();
          rec.weight_norm_sq = pre_norm_sq;
          const auto decomp = norm_decomposition(model.params, alpha_step);
          rec.square_term = decomp.square_term;
          rec.cross_term = decomp.cross_term;
          const auto cosines = pos_neg_cosines(model.params, gpos, gneg);
          rec.cos_pos = cosines.cos_pos;
          rec.cos_neg = cosines.cos_neg;
          rec.cos_pos_ascent = -cosines.cos_pos;
          rec.cos_neg_ascent = -cosines.cos_neg;
          rec.grad_norm = model.params.grads_norm();
          rec.dist_from_init = dist_from_init(model.params, w0);
          rec.train_loss = batch_loss;
        } else {
          model.params.zero_grads();
          tape.backward(parts.loss);
        }

        const WdStep wd = wd_step_for(config.schedule, epoch, global_step);
        if (config.optimizer == OptimizerKind::Sgd) {
          sgd_step(model.params, sgd_state, config.sgd, wd, alpha_step);
        } else {
          adam_step(model.params, adam_state, config.adam, wd, alpha_step);
        }

        if (metric_step) {
          rec.realized_norm_change =
              model.params.flat_values().squaredNorm() - pre_norm_sq;
          if (want_adam_quantiles && adam_state.t >= 1) {
            const auto qs = buffer_ratio_quantiles(adam_state, model.params,
                                                   config.cadence.quantiles);
            for (std::size_t i = 0; i < qs.size(); ++i)
              rec.ratio_quantiles.emplace_back(config.cadence.quantiles[i], qs[i]);
          }
          writer.write(rec);
        }
        ++global_step;
      }

      if (!reference_norms.empty()) {
        norm_match_scale(reference_norms[static_cast<std::size_t>(epoch)],
                         model.params, config.norm_match.scope);
      }

      epoch_record(epoch, global_step);
      const double post_norm = model.params.values_norm();
      art.epoch_norms.push_back(post_norm);
      epoch_norms_csv << epoch << "," << nlohmann::json(post_norm).dump() << "\n";

      if (std::find(config.sharpness.epochs.begin(), config.sharpness.epochs.end(),
                    epoch) != config.sharpness.epochs.end()) {
        const Dataset& surface_data =
            (config.sharpness.surface == "test" && data.test) ? *data.test
                                                              : data.train;
        write_sharpness_report(
            (run_dir / ("sharpness_epoch" + std::to_string(epoch) + ".json")).string(),
            model, surface_data, config.sharpness);
      }
      art.epochs_completed = epoch + 1;
    }
  } catch (const std::runtime_error& e) {
    art.failed = true;
    art.error = e.what();
    diverged = true;
  }

  art.final_weight_norm = model.params.values_norm();
  art.metrics_jsonl_path = (run_dir / "metrics.jsonl").string();
  art.metrics_csv_path = (run_dir / "metrics.csv").string();
  art.checkpoint_path = (run_dir / "checkpoint_final.wdck").string();
  save_checkpoint(model, art.checkpoint_path);

  nlohmann::json summary;
  summary["run_id"] = art.run_id;
  summary["failed"] = art.failed;
  if (art.failed) summary["error"] = art.error;
  summary["epochs_completed"] = art.epochs_completed;
  summary["initial_weight_norm"] = art.initial_weight_norm;
  summary["final_weight_norm"] = art.final_weight_norm;
  summary["final_train_loss"] = art.final_train_loss;
  summary["final_train_acc"] = art.final_train_acc;
  if (art.final_test_loss) summary["final_test_loss"] = *art.final_test_loss;
  if (art.final_test_acc) summary["final_test_acc"] = *art.final_test_acc;
  if (art.best_test_acc) summary["best_test_acc"] = *art.best_test_acc;
  summary["epoch_norms"] = art.epoch_norms;
  summary["init"] = "he-normal(sqrt(2/fan_in))";
  summary["init_seed"] = config.model.init_seed;
  summary["optimizer"] = config.optimizer == OptimizerKind::Sgd ? "sgd" : "adam";
  summary["lambda"] = config.optimizer == OptimizerKind::Sgd ? config.sgd.lambda
                                                             : config.adam.lambda;
  std::ofstream sum(run_dir / "summary.json");
  sum << summary.dump(2) << "\n";

  return art;
}

std::vector<RunArtifact> sweep(const std::vector<RunConfig>& configs,
                               int parallelism) {
  if (parallelism < 1) throw std::invalid_argument("sweep: parallelism must be >= 1");
  std::vector<RunArtifact> results(configs.size());
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= configs.size()) return;
      try {
        results[i] = train(configs[i]);
      } catch (const std::exception& e) {
        results[i].run_id = configs[i].run_id;
        results[i].failed = true;
        results[i].error = e.what();
      }
    }
  };

  if (parallelism == 1 || configs.size() <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    const int n = std::min<int>(parallelism, static_cast<int>(configs.size()));
    threads.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  return results;
}

std::string analyze_runs_report(const std::vector<std::string>& run_dirs) {
  if (run_dirs.empty()) throw std::invalid_argument("analyze: no runs matched");
  nlohmann::json report;
  report["runs"] = nlohmann::json::array();
  for (const auto& dir : run_dirs) {
    const std::string path = (fs::path(dir) / "summary.json").string();
    std::ifstream in(path);
    if (!in) throw std::runtime_error("analyze: missing " + path);
    nlohmann::json summary;
    in >> summary;
    summary["run_dir"] = dir;
    report["runs"].push_back(summary);
  }
  return report.dump(2) + "\n";
}

}  // namespace wdlab
