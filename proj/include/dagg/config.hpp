#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "dagg/aggregation.hpp"
#include "dagg/distill.hpp"
#include "dagg/training.hpp"

namespace dagg {

using Json = nlohmann::json;

// Harness-only strategy labels: "student" trains without distillation and
// "single" distills through the first declared path alone.
inline constexpr std::string_view kStudentStrategy = "student";
inline constexpr std::string_view kSingleStrategy = "single";

inline bool is_harness_strategy(std::string_view s) { return s == kStudentStrategy || s == kSingleStrategy; }

struct DatasetSpec {
  std::string kind = "synthetic";  // synthetic | idx | csv
  // synthetic
  std::string generator = "two_spirals";  // two_spirals | gaussian_blobs
  std::size_t n = 1000;
  double noise = 0.1;
  std::uint64_t seed = 0;
  // idx
  std::string images, labels, val_images, val_labels;
  // csv
  std::string path, val_path;
  std::size_t input_dim = 0;
  bool header = false;
  // shared
  std::size_t classes = 2;
  double val_fraction = 0.2;  // used when no separate validation files are given
};

struct ModelSpec {
  std::string kind = "convnet";  // convnet | mlp
  std::size_t width = 1;
  std::vector<std::size_t> hidden{32};
};

struct PretrainSpec {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  OptimizerConfig optimizer;
};

struct TeacherSpec {
  std::optional<std::string> checkpoint;
  ModelSpec model{"convnet", 4, {64}};
  PretrainSpec pretrain;
  std::uint64_t seed = 0;
};

struct RunConfig {
  DatasetSpec dataset;
  TeacherSpec teacher;
  ModelSpec student;
  std::vector<DistillPath> paths;
  std::vector<std::string> strategies{"equal"};
  AggregationConfig aggregation;  // strategy is set per run
  OptimizerConfig optimizer;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "runs";
  std::size_t sim_every = 50;
  std::vector<std::string> warnings;

  // Paths after the optional per-tap expansion.
  std::vector<DistillPath> effective_paths() const {
    return aggregation.layerwise ? expand_layerwise(paths) : paths;
  }
};

struct ParseOptions {
  bool unsafe_alpha = false;
  bool check_files = true;
  bool require_teacher_checkpoint = false;
};

namespace detail {

// Reads a JSON object while tracking which keys were consumed; leftovers are
// reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(ErrorCode::ValidationError, where() + " must be an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const Json& at(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

  template <typename T>
  void read(const std::string& k, T& out) {
    if (!has(k)) return;
    out = convert<T>(j_.at(k), key(k));
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) fail(ErrorCode::ValidationError, "unknown key '" + key(k) + "'");
    }
  }

  template <typename T>
  static T convert(const Json& v, const std::string& name) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) fail(ErrorCode::ValidationError, name + " must be a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) fail(ErrorCode::ValidationError, name + " must be a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) fail(ErrorCode::ValidationError, name + " must be a number");
      return v.get<double>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
        fail(ErrorCode::ValidationError, name + " must be a nonnegative integer");
      }
      return static_cast<T>(v.get<std::uint64_t>());
    } else {
      if (!v.is_array()) fail(ErrorCode::ValidationError, name + " must be an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(convert<typename T::value_type>(v[i], name + "[" + std::to_string(i) + "]"));
      }
      return out;
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline std::string line_col(std::string_view text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

template <typename T>
std::vector<T> one_or_many(const Json& v, const std::string& name) {
  if (v.is_array()) {
    if (v.empty()) fail(ErrorCode::ValidationError, name + " must not be empty");
    return ObjectReader::convert<std::vector<T>>(v, name);
  }
  return {ObjectReader::convert<T>(v, name)};
}

inline void read_optimizer(ObjectReader& r, OptimizerConfig& opt, const std::string& prefix) {
  r.read("lr", opt.lr);
  r.read("momentum", opt.momentum);
  r.read("weight_decay", opt.weight_decay);
  r.read("milestones", opt.milestones);
  r.read("factor", opt.factor);
  r.finish();
  if (!(opt.lr > 0.0)) fail(ErrorCode::ValidationError, prefix + ".lr must be positive");
  if (opt.momentum < 0.0 || opt.momentum >= 1.0) fail(ErrorCode::ValidationError, prefix + ".momentum must be in [0, 1)");
  if (opt.weight_decay < 0.0) fail(ErrorCode::ValidationError, prefix + ".weight_decay must be nonnegative");
  if (!(opt.factor > 0.0)) fail(ErrorCode::ValidationError, prefix + ".factor must be positive");
}

inline ModelSpec read_model(const Json& j, const std::string& name, ModelSpec spec) {
  ObjectReader r(j, name);
  r.read("kind", spec.kind);
  r.read("width", spec.width);
  r.read("hidden", spec.hidden);
  r.finish();
  if (spec.kind != "convnet" && spec.kind != "mlp") {
    fail(ErrorCode::ValidationError, name + ".kind must be 'convnet' or 'mlp'");
  }
  if (spec.kind == "convnet" && spec.width == 0) fail(ErrorCode::ValidationError, name + ".width must be >= 1");
  if (spec.kind == "mlp" && (spec.hidden.empty() || std::count(spec.hidden.begin(), spec.hidden.end(), 0u))) {
    fail(ErrorCode::ValidationError, name + ".hidden must list positive layer sizes");
  }
  return spec;
}

inline std::string_view config_name(PathKind kind) {
  switch (kind) {
    case PathKind::ST: return "st";
    case PathKind::AT: return "at";
    case PathKind::NST: return "nst";
    case PathKind::L2Logit: return "l2_logit";
  }
  return "?";
}

inline std::optional<PathKind> parse_path_kind(const std::string& s) {
  for (auto k : {PathKind::ST, PathKind::AT, PathKind::NST, PathKind::L2Logit}) {
    if (config_name(k) == s) return k;
  }
  return std::nullopt;
}

inline std::vector<std::string> read_taps(const Json& v, const std::string& name) {
  return one_or_many<std::string>(v, name);
}

inline DistillPath read_path(const Json& j, const std::string& name) {
  ObjectReader r(j, name);
  DistillPath p;
  if (!r.has("id")) fail(ErrorCode::ValidationError, name + ".id required");
  p.id = ObjectReader::convert<std::string>(r.at("id"), r.key("id"));
  if (!r.has("kind")) fail(ErrorCode::ValidationError, name + ".kind required");
  const auto kind = parse_path_kind(ObjectReader::convert<std::string>(r.at("kind"), r.key("kind")));
  if (!kind) fail(ErrorCode::ValidationError, name + ".kind must be one of st, at, nst, l2_logit");
  p.kind = *kind;
  if (r.has("student_tap")) p.student_taps = read_taps(r.at("student_tap"), r.key("student_tap"));
  if (r.has("teacher_tap")) {
    p.teacher_taps = read_taps(r.at("teacher_tap"), r.key("teacher_tap"));
  } else {
    p.teacher_taps = p.student_taps;
  }
  if (!p.logit_level() && !r.has("student_tap")) fail(ErrorCode::ValidationError, name + ".student_tap required");
  r.read("temperature", p.temperature);
  r.read("at_squared", p.at_squared);
  r.finish();
  p.validate();
  return p;
}

}  // namespace detail

inline RunConfig parse_config(std::string_view text, const ParseOptions& options = {}) {
  Json doc;
  try {
    doc = Json::parse(text.begin(), text.end());
  } catch (const Json::parse_error& e) {
    const std::size_t at = e.byte > 0 ? e.byte - 1 : 0;
    fail(ErrorCode::ParseError, detail::line_col(text, at) + ": " + e.what());
  }
  RunConfig cfg;
  detail::ObjectReader root(doc, "");

  if (!root.has("dataset")) fail(ErrorCode::ValidationError, "dataset required");
  {
    detail::ObjectReader r(root.at("dataset"), "dataset");
    auto& d = cfg.dataset;
    r.read("kind", d.kind);
    r.read("generator", d.generator);
    r.read("n", d.n);
    r.read("noise", d.noise);
    r.read("seed", d.seed);
    r.read("images", d.images);
    r.read("labels", d.labels);
    r.read("val_images", d.val_images);
    r.read("val_labels", d.val_labels);
    r.read("path", d.path);
    r.read("val_path", d.val_path);
    r.read("input_dim", d.input_dim);
    r.read("header", d.header);
    if (d.kind == "idx") d.classes = 10;
    r.read("classes", d.classes);
    r.read("val_fraction", d.val_fraction);
    r.finish();
    auto require_file = [&](const std::string& value, const std::string& key) {
      if (value.empty()) fail(ErrorCode::ValidationError, "dataset." + key + " required");
      if (options.check_files && !std::filesystem::exists(value)) {
        fail(ErrorCode::ValidationError, "dataset." + key + ": file not found: " + value);
      }
    };
    if (d.kind == "synthetic") {
      if (d.generator != "two_spirals" && d.generator != "gaussian_blobs") {
        fail(ErrorCode::ValidationError, "dataset.generator must be 'two_spirals' or 'gaussian_blobs'");
      }
      if (d.n < 2) fail(ErrorCode::ValidationError, "dataset.n must be >= 2");
      if (d.generator == "two_spirals") d.classes = 2;
    } else if (d.kind == "idx") {
      require_file(d.images, "images");
      require_file(d.labels, "labels");
      if (d.val_images.empty() != d.val_labels.empty()) {
        fail(ErrorCode::ValidationError, "dataset.val_images and dataset.val_labels go together");
      }
      if (!d.val_images.empty()) {
        require_file(d.val_images, "val_images");
        require_file(d.val_labels, "val_labels");
      }
    } else if (d.kind == "csv") {
      require_file(d.path, "path");
      if (!d.val_path.empty()) require_file(d.val_path, "val_path");
      if (d.input_dim == 0) fail(ErrorCode::ValidationError, "dataset.input_dim required");
    } else {
      fail(ErrorCode::ValidationError, "dataset.kind must be 'synthetic', 'idx' or 'csv'");
    }
    if (d.classes < 2) fail(ErrorCode::ValidationError, "dataset.classes must be >= 2");
    if (!(d.val_fraction > 0.0 && d.val_fraction < 1.0)) {
      fail(ErrorCode::ValidationError, "dataset.val_fraction must be in (0, 1)");
    }
  }

  if (root.has("teacher")) {
    detail::ObjectReader r(root.at("teacher"), "teacher");
    auto& t = cfg.teacher;
    if (r.has("checkpoint")) t.checkpoint = detail::ObjectReader::convert<std::string>(r.at("checkpoint"), "teacher.checkpoint");
    if (r.has("model")) t.model = detail::read_model(r.at("model"), "teacher.model", t.model);
    r.read("seed", t.seed);
    if (r.has("pretrain")) {
      detail::ObjectReader p(r.at("pretrain"), "teacher.pretrain");
      p.read("epochs", t.pretrain.epochs);
      p.read("batch_size", t.pretrain.batch_size);
      if (p.has("optimizer")) {
        detail::ObjectReader o(p.at("optimizer"), "teacher.pretrain.optimizer");
        detail::read_optimizer(o, t.pretrain.optimizer, "teacher.pretrain.optimizer");
      }
      p.finish();
      if (t.pretrain.epochs == 0) fail(ErrorCode::ValidationError, "teacher.pretrain.epochs must be >= 1");
      if (t.pretrain.batch_size == 0) fail(ErrorCode::ValidationError, "teacher.pretrain.batch_size must be >= 1");
    }
    r.finish();
    if (t.checkpoint && options.require_teacher_checkpoint && options.check_files &&
        !std::filesystem::exists(*t.checkpoint)) {
      fail(ErrorCode::ValidationError, "teacher.checkpoint: file not found: " + *t.checkpoint);
    }
  }

  if (root.has("student")) cfg.student = detail::read_model(root.at("student"), "student", cfg.student);

  if (root.has("paths")) {
    const Json& arr = root.at("paths");
    if (!arr.is_array()) fail(ErrorCode::ValidationError, "paths must be an array");
    std::set<std::string> ids;
    for (std::size_t i = 0; i < arr.size(); ++i) {
      auto p = detail::read_path(arr[i], "paths[" + std::to_string(i) + "]");
      if (!ids.insert(p.id).second) fail(ErrorCode::ValidationError, "paths: duplicate id '" + p.id + "'");
      cfg.paths.push_back(std::move(p));
    }
  }

  if (root.has("aggregation")) {
    detail::ObjectReader r(root.at("aggregation"), "aggregation");
    auto& a = cfg.aggregation;
    if (r.has("strategy")) cfg.strategies = detail::one_or_many<std::string>(r.at("strategy"), "aggregation.strategy");
    r.read("alpha", a.alpha);
    r.read("fixed_v", a.fixed_v);
    r.read("layerwise", a.layerwise);
    if (r.has("z_lr")) a.z_lr = detail::ObjectReader::convert<double>(r.at("z_lr"), "aggregation.z_lr");
    r.read("moo_every", a.moo_every);
    r.finish();
  }
  for (const auto& s : cfg.strategies) {
    if (!is_harness_strategy(s) && !parse_strategy(s)) {
      fail(ErrorCode::ValidationError, "aggregation.strategy: unknown strategy '" + s +
                                           "' (student, single, equal, fixed, multiobjective, adaptive)");
    }
  }
  {
    const auto& a = cfg.aggregation;
    if (!(a.alpha >= 0.0)) fail(ErrorCode::ValidationError, "aggregation.alpha must be >= 0");
    if (a.alpha > 1.0) {
      if (!options.unsafe_alpha) {
        fail(ErrorCode::ValidationError, "aggregation.alpha must be in [0, 1] (pass --unsafe-alpha to override)");
      }
      cfg.warnings.push_back("aggregation.alpha = " + Json(a.alpha).dump() + " is outside [0, 1]");
    }
    if (a.z_lr && !(*a.z_lr > 0.0)) fail(ErrorCode::ValidationError, "aggregation.z_lr must be positive");
    if (a.moo_every == 0) fail(ErrorCode::ValidationError, "aggregation.moo_every must be >= 1");
    const std::size_t k = cfg.effective_paths().size();
    if (std::count(cfg.strategies.begin(), cfg.strategies.end(), "fixed")) {
      if (a.fixed_v.empty()) fail(ErrorCode::ValidationError, "aggregation.fixed_v required");
      if (a.fixed_v.size() != k) {
        fail(ErrorCode::ValidationError, "aggregation.fixed_v has " + std::to_string(a.fixed_v.size()) +
                                             " entries for " + std::to_string(k) + " paths");
      }
      for (double v : a.fixed_v) {
        if (!(v >= 0.0)) fail(ErrorCode::ValidationError, "aggregation.fixed_v entries must be nonnegative");
      }
    }
    for (const auto& s : cfg.strategies) {
      if (s != kStudentStrategy && k == 0) {
        fail(ErrorCode::ValidationError, "strategy '" + s + "' needs at least one entry in paths");
      }
    }
  }

  if (root.has("optimizer")) {
    detail::ObjectReader r(root.at("optimizer"), "optimizer");
    detail::read_optimizer(r, cfg.optimizer, "optimizer");
  }
  root.read("epochs", cfg.epochs);
  root.read("batch_size", cfg.batch_size);
  if (root.has("seed")) cfg.seeds = detail::one_or_many<std::uint64_t>(root.at("seed"), "seed");
  root.read("output_dir", cfg.output_dir);
  root.read("sim_every", cfg.sim_every);
  root.finish();
  if (cfg.epochs == 0) fail(ErrorCode::ValidationError, "epochs must be >= 1");
  if (cfg.batch_size == 0) fail(ErrorCode::ValidationError, "batch_size must be >= 1");
  return cfg;
}

// Defaults made explicit, for logging next to run outputs.
inline Json to_json(const RunConfig& c) {
  Json paths = Json::array();
  for (const auto& p : c.paths) {
    Json jp{{"id", p.id},
            {"kind", detail::config_name(p.kind)},
            {"student_tap", p.student_taps},
            {"teacher_tap", p.teacher_taps}};
    if (p.kind == PathKind::ST) jp["temperature"] = p.temperature;
    if (p.kind == PathKind::AT) jp["at_squared"] = p.at_squared;
    paths.push_back(jp);
  }
  auto opt = [](const OptimizerConfig& o) {
    return Json{{"lr", o.lr}, {"momentum", o.momentum}, {"weight_decay", o.weight_decay},
                {"milestones", o.milestones}, {"factor", o.factor}};
  };
  auto model = [](const ModelSpec& m) { return Json{{"kind", m.kind}, {"width", m.width}, {"hidden", m.hidden}}; };
  const auto& d = c.dataset;
  Json dataset{{"kind", d.kind}, {"classes", d.classes}, {"val_fraction", d.val_fraction}};
  if (d.kind == "synthetic") {
    dataset.update({{"generator", d.generator}, {"n", d.n}, {"noise", d.noise}, {"seed", d.seed}});
  } else if (d.kind == "idx") {
    dataset.update({{"images", d.images}, {"labels", d.labels}});
    if (!d.val_images.empty()) dataset.update({{"val_images", d.val_images}, {"val_labels", d.val_labels}});
  } else {
    dataset.update({{"path", d.path}, {"input_dim", d.input_dim}, {"header", d.header}});
    if (!d.val_path.empty()) dataset["val_path"] = d.val_path;
  }
  Json teacher{{"model", model(c.teacher.model)},
               {"seed", c.teacher.seed},
               {"pretrain", {{"epochs", c.teacher.pretrain.epochs},
                             {"batch_size", c.teacher.pretrain.batch_size},
                             {"optimizer", opt(c.teacher.pretrain.optimizer)}}}};
  if (c.teacher.checkpoint) teacher["checkpoint"] = *c.teacher.checkpoint;
  Json agg{{"strategy", c.strategies},
           {"alpha", c.aggregation.alpha},
           {"layerwise", c.aggregation.layerwise},
           {"moo_every", c.aggregation.moo_every}};
  if (!c.aggregation.fixed_v.empty()) agg["fixed_v"] = c.aggregation.fixed_v;
  if (c.aggregation.z_lr) agg["z_lr"] = *c.aggregation.z_lr;
  return Json{{"dataset", dataset},       {"teacher", teacher},         {"student", model(c.student)},
              {"paths", paths},           {"aggregation", agg},         {"optimizer", opt(c.optimizer)},
              {"epochs", c.epochs},       {"batch_size", c.batch_size}, {"seed", c.seeds},
              {"output_dir", c.output_dir}, {"sim_every", c.sim_every}};
}

}  // namespace dagg
