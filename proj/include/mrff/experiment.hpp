#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "json.hpp"
#include "mrff/checkpoint.hpp"
#include "mrff/data.hpp"
#include "mrff/errors.hpp"
#include "mrff/federated.hpp"
#include "mrff/model.hpp"

namespace mrff {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;

inline constexpr const char* kConfigSchema = "mrff-config";
inline constexpr const char* kMetricsSchema = "mrff-metrics/1";
inline constexpr const char* kSummarySchema = "mrff-summary";

// Interaction file plus how to read it.
struct FileSource {
  fs::path path;
  Schema schema;
  std::size_t negative_ratio = 0;  // uniform negatives per positive; 0 keeps the log as is
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  ModelConfig model;  // attr_vocab is filled in from the data
  FederationOptions federation;
  std::optional<SyntheticSpec> synthetic;
  std::optional<FileSource> file;
  fs::path output = "out";
  std::size_t checkpoint_every = 0;  // 0: no checkpoints
  bool synthetic_follows_seed = false;
};

// Collects every problem in a config document before failing.
class ConfigDiagnostics {
 public:
  void add(const std::string& field, const std::string& msg) { problems_.push_back(field + ": " + msg); }
  bool empty() const { return problems_.empty(); }
  const std::vector<std::string>& problems() const { return problems_; }

  void throw_if_any() const {
    if (problems_.empty()) return;
    std::string msg = "invalid config";
    for (const auto& p : problems_) msg += "\n  " + p;
    throw ConfigError(msg);
  }

 private:
  std::vector<std::string> problems_;
};

namespace detail {

using nlohmann::json;

// Reads fields from one JSON object, rejecting keys that were never asked for.
class ObjectReader {
 public:
  ObjectReader(const json& obj, std::string prefix, ConfigDiagnostics& diag)
      : obj_(obj), prefix_(std::move(prefix)), diag_(diag) {
    if (!obj_.is_object()) diag_.add(prefix_.empty() ? "<root>" : prefix_, "expected an object");
  }

  ~ObjectReader() = default;
  ObjectReader(const ObjectReader&) = delete;
  ObjectReader& operator=(const ObjectReader&) = delete;

  std::string field(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  const json* find(const std::string& key) {
    known_.push_back(key);
    if (!obj_.is_object()) return nullptr;
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  static bool nonneg_int(const json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  }

  bool has(const std::string& key) {
    return find(key) != nullptr;
  }

  void read(const std::string& key, std::size_t& out) {
    if (const json* v = find(key)) {
      if (nonneg_int(*v)) out = v->get<std::size_t>();
      else diag_.add(field(key), "expected a non-negative integer");
    }
  }

  void read(const std::string& key, std::uint64_t& out, bool required) {
    const json* v = find(key);
    if (!v) {
      if (required) diag_.add(field(key), "required");
      return;
    }
    if (nonneg_int(*v)) out = v->get<std::uint64_t>();
    else diag_.add(field(key), "expected a non-negative integer");
  }

  void read(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (v->is_number()) out = v->get<double>();
      else diag_.add(field(key), "expected a number");
    }
  }

  void read(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (v->is_boolean()) out = v->get<bool>();
      else diag_.add(field(key), "expected true or false");
    }
  }

  void read(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (v->is_string()) out = v->get<std::string>();
      else diag_.add(field(key), "expected a string");
    }
  }

  void read(const std::string& key, std::vector<std::size_t>& out) {
    if (const json* v = find(key)) {
      bool ok = v->is_array();
      if (ok)
        for (const auto& e : *v) ok = ok && nonneg_int(e);
      if (ok) out = v->get<std::vector<std::size_t>>();
      else diag_.add(field(key), "expected an array of non-negative integers");
    }
  }

  void read(const std::string& key, std::vector<double>& out) {
    if (const json* v = find(key)) {
      bool ok = v->is_array();
      if (ok)
        for (const auto& e : *v) ok = ok && e.is_number();
      if (ok) out = v->get<std::vector<double>>();
      else diag_.add(field(key), "expected an array of numbers");
    }
  }

  void read(const std::string& key, std::vector<std::string>& out) {
    if (const json* v = find(key)) {
      bool ok = v->is_array();
      if (ok)
        for (const auto& e : *v) ok = ok && e.is_string();
      if (ok) out = v->get<std::vector<std::string>>();
      else diag_.add(field(key), "expected an array of strings");
    }
  }

  // Call after all reads: every remaining key is unknown.
  void reject_unknown() {
    if (!obj_.is_object()) return;
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (std::find(known_.begin(), known_.end(), it.key()) == known_.end()) diag_.add(field(it.key()), "unknown key");
    }
  }

 private:
  const json& obj_;
  std::string prefix_;
  ConfigDiagnostics& diag_;
  std::vector<std::string> known_;
};

inline void read_model(const json& j, ModelConfig& m, ConfigDiagnostics& diag) {
  ObjectReader r(j, "model", diag);
  r.read("d_model", m.d_model);
  r.read("n_heads", m.n_heads);
  r.read("blocks", m.blocks);
  r.read("groups", m.groups);
  r.read("max_seq_len", m.max_seq_len);
  r.read("ffn_hidden", m.ffn_hidden);
  r.read("gate_hidden", m.gate_hidden);
  r.read("pred_hidden", m.pred_hidden);
  r.read("dropout", m.dropout);
  r.read("group_ffn", m.group_ffn);
  r.read("gate_stop_gradient", m.gate_stop_gradient);
  r.reject_unknown();
}

inline void read_federation(const json& j, FederationOptions& f, ConfigDiagnostics& diag) {
  ObjectReader r(j, "federation", diag);
  r.read("rounds", f.rounds);
  r.read("participation", f.participation);
  r.read("local_epochs", f.train.local_epochs);
  r.read("batch_size", f.train.batch_size);
  r.read("learning_rate", f.train.learning_rate);
  r.read("gate_lr_scale", f.train.gate_lr_scale);
  std::string opt = f.train.optimizer == OptimizerKind::kSgd ? "sgd" : "adam";
  r.read("optimizer", opt);
  if (opt == "sgd") f.train.optimizer = OptimizerKind::kSgd;
  else if (opt == "adam") f.train.optimizer = OptimizerKind::kAdam;
  else diag.add(r.field("optimizer"), "expected \"sgd\" or \"adam\", got \"" + opt + "\"");
  r.read("beta1", f.train.beta1);
  r.read("beta2", f.train.beta2);
  r.read("adam_eps", f.train.adam_eps);
  r.read("alpha", f.train.alpha);
  r.read("noise_strength", f.noise.strength);
  r.read("eval_every", f.eval_every);
  r.read("threads", f.threads);
  r.reject_unknown();
  if (!(f.participation > 0.0 && f.participation <= 1.0)) diag.add("federation.participation", "must be in (0, 1]");
  if (f.train.batch_size < 1) diag.add("federation.batch_size", "must be >= 1");
  if (!(f.train.learning_rate > 0.0)) diag.add("federation.learning_rate", "must be > 0");
  if (!(f.train.gate_lr_scale >= 0.0)) diag.add("federation.gate_lr_scale", "must be >= 0");
  if (!(f.train.alpha >= 0.0)) diag.add("federation.alpha", "must be >= 0");
  if (!(f.noise.strength >= 0.0)) diag.add("federation.noise_strength", "must be >= 0");
  if (f.eval_every < 1) diag.add("federation.eval_every", "must be >= 1");
  if (f.threads < 1) diag.add("federation.threads", "must be >= 1");
}

inline void read_synthetic(const json& j, SyntheticSpec& s, ConfigDiagnostics& diag) {
  ObjectReader r(j, "data.synthetic", diag);
  r.read("n_users", s.n_users);
  r.read("n_items", s.n_items);
  r.read("n_clusters", s.n_clusters);
  r.read("items_per_cluster", s.items_per_cluster);
  r.read("min_len", s.min_len);
  r.read("max_len", s.max_len);
  r.read("click", s.click);
  r.read("own_click", s.own_click);
  r.read("other_click", s.other_click);
  r.read("seed", s.seed, false);
  r.reject_unknown();
  for (const auto& p : s.problems()) diag.add("data.synthetic", p);
}

inline void read_file_source(const json& j, FileSource& src, const fs::path& base, ConfigDiagnostics& diag) {
  ObjectReader r(j, "data", diag);
  std::string path;
  r.read("path", path);
  if (path.empty()) {
    diag.add("data.path", "required when data.synthetic is absent");
  } else {
    src.path = fs::path(path).is_absolute() ? fs::path(path) : base / path;
  }
  if (const json* sj = r.find("schema")) {
    ObjectReader s(*sj, "data.schema", diag);
    s.read("user", src.schema.user);
    s.read("item", src.schema.item);
    s.read("time", src.schema.time);
    s.read("label", src.schema.label);
    s.read("attributes", src.schema.attributes);
    std::string delim;
    s.read("delimiter", delim);
    if (delim == "tab" || delim == "\t") src.schema.delimiter = '\t';
    else if (delim == "comma" || delim == ",") src.schema.delimiter = ',';
    else if (!delim.empty()) diag.add("data.schema.delimiter", "expected \"comma\" or \"tab\"");
    s.reject_unknown();
  }
  r.read("negative_ratio", src.negative_ratio);
  r.reject_unknown();
}

}  // namespace detail

// Parses a config document. `base` resolves relative data paths. Throws
// ConfigError listing every offending field.
inline ExperimentConfig parse_config(const nlohmann::json& doc, const fs::path& base = ".") {
  ExperimentConfig cfg;
  ConfigDiagnostics diag;
  detail::ObjectReader root(doc, "", diag);
  std::string schema;
  root.read("schema", schema);
  if (!schema.empty() && schema != kConfigSchema) diag.add("schema", "expected \"" + std::string(kConfigSchema) + "\"");
  std::size_t version = 1;
  root.read("version", version);
  if (version != 1) diag.add("version", "unsupported version " + std::to_string(version));
  root.read("seed", cfg.seed, true);
  std::string output = cfg.output.string();
  root.read("output", output);
  cfg.output = output;
  root.read("checkpoint_every", cfg.checkpoint_every);
  if (const auto* m = root.find("model")) detail::read_model(*m, cfg.model, diag);
  if (const auto* f = root.find("federation")) detail::read_federation(*f, cfg.federation, diag);
  if (const auto* d = root.find("data")) {
    if (d->is_object() && d->contains("synthetic")) {
      detail::ObjectReader dr(*d, "data", diag);
      SyntheticSpec spec;
      detail::read_synthetic(*dr.find("synthetic"), spec, diag);
      dr.reject_unknown();
      cfg.synthetic = spec;
    } else {
      FileSource src;
      detail::read_file_source(*d, src, base, diag);
      cfg.file = src;
    }
  } else {
    diag.add("data", "required (either {\"synthetic\": {...}} or {\"path\": ...})");
  }
  root.reject_unknown();

  if (cfg.file && !cfg.file->path.empty() && !fs::exists(cfg.file->path)) {
    diag.add("data.path", "file not found: " + cfg.file->path.string());
  }
  cfg.federation.seed = cfg.seed;
  cfg.federation.noise.seed = cfg.seed;
  // Synthetic data follows the run seed unless it names its own.
  if (cfg.synthetic && !doc.at("data").at("synthetic").contains("seed")) {
    cfg.synthetic->seed = cfg.seed;
    cfg.synthetic_follows_seed = true;
  }
  for (const auto& p : cfg.model.problems()) {
    if (p.rfind("attr_vocab", 0) != 0) diag.add("model", p);
  }
  diag.throw_if_any();
  return cfg;
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("config file not found: " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": malformed JSON: " + e.what());
  }
  return parse_config(doc, path.parent_path());
}

// Inverse of parse_config (data paths written as given, absolute if resolved).
inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json model = {{"d_model", c.model.d_model},         {"n_heads", c.model.n_heads},
                          {"blocks", c.model.blocks},           {"groups", c.model.groups},
                          {"max_seq_len", c.model.max_seq_len}, {"ffn_hidden", c.model.ffn_hidden},
                          {"gate_hidden", c.model.gate_hidden}, {"pred_hidden", c.model.pred_hidden},
                          {"dropout", c.model.dropout},         {"group_ffn", c.model.group_ffn},
                          {"gate_stop_gradient", c.model.gate_stop_gradient}};
  const auto& f = c.federation;
  nlohmann::json fed = {{"rounds", f.rounds},
                        {"participation", f.participation},
                        {"local_epochs", f.train.local_epochs},
                        {"batch_size", f.train.batch_size},
                        {"learning_rate", f.train.learning_rate},
                        {"gate_lr_scale", f.train.gate_lr_scale},
                        {"optimizer", f.train.optimizer == OptimizerKind::kSgd ? "sgd" : "adam"},
                        {"beta1", f.train.beta1},
                        {"beta2", f.train.beta2},
                        {"adam_eps", f.train.adam_eps},
                        {"alpha", f.train.alpha},
                        {"noise_strength", f.noise.strength},
                        {"eval_every", f.eval_every},
                        {"threads", f.threads}};
  nlohmann::json data;
  if (c.synthetic) {
    const auto& s = *c.synthetic;
    data["synthetic"] = {{"n_users", s.n_users},       {"n_items", s.n_items},     {"n_clusters", s.n_clusters},
                         {"items_per_cluster", s.items_per_cluster},
                         {"min_len", s.min_len},       {"max_len", s.max_len},     {"click", s.click},
                         {"own_click", s.own_click},   {"other_click", s.other_click},
                         {"seed", s.seed}};
  } else if (c.file) {
    const auto& src = *c.file;
    data["path"] = src.path.string();
    data["schema"] = {{"user", src.schema.user},
                      {"item", src.schema.item},
                      {"time", src.schema.time},
                      {"label", src.schema.label},
                      {"attributes", src.schema.attributes}};
    if (src.schema.delimiter) data["schema"]["delimiter"] = src.schema.delimiter == '\t' ? "tab" : "comma";
    data["negative_ratio"] = src.negative_ratio;
  }
  return {{"schema", kConfigSchema}, {"version", 1},    {"seed", c.seed},
          {"output", c.output.string()}, {"checkpoint_every", c.checkpoint_every},
          {"model", model},          {"federation", fed}, {"data", data}};
}

// Everything a federation needs, derived from the config's data section.
struct PreparedData {
  InteractionLog log;
  SplitSpec split;
  std::vector<UserSequences> sequences;
  ItemCatalog catalog;
  ModelConfig model;  // config model with attr_vocab filled in
};

inline PreparedData prepare_data(const ExperimentConfig& cfg) {
  PreparedData d;
  if (cfg.synthetic) {
    d.log = synthetic_generate(*cfg.synthetic).log;
  } else if (cfg.file) {
    d.log = load_interactions(cfg.file->path, cfg.file->schema);
    if (cfg.file->negative_ratio > 0) add_uniform_negatives(d.log, cfg.file->negative_ratio, cfg.seed);
  } else {
    throw ConfigError("data: no source configured");
  }
  d.split = leave_one_out_split(d.log);
  d.model = cfg.model;
  d.model.attr_vocab = d.log.attr_vocab();
  d.sequences = build_sequences(d.log, d.split, d.model.max_seq_len);
  d.catalog = ItemCatalog::from_log(d.log);
  return d;
}

// ---------------------------------------------------------------------------
// Metrics files

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw LoadError("not a number: \"" + s + "\"");
  return v;
}

struct MetricsRow {
  std::size_t round = 0;
  std::string split;  // "val" or "test"
  double auc = 0.0;
  double logloss = 0.0;
  double balance_loss = 0.0;
  int block = -1;  // -1 for models without groups
  std::vector<double> shares;

  bool operator==(const MetricsRow& o) const {
    auto same = [](double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; };
    if (round != o.round || split != o.split || block != o.block || shares.size() != o.shares.size()) return false;
    if (!same(auc, o.auc) || !same(logloss, o.logloss) || !same(balance_loss, o.balance_loss)) return false;
    for (std::size_t i = 0; i < shares.size(); ++i)
      if (!same(shares[i], o.shares[i])) return false;
    return true;
  }
};

inline std::string metrics_header(std::size_t groups) {
  std::string h = "round,split,auc,logloss,balance_loss,block";
  for (std::size_t i = 0; i < groups; ++i) h += ",group_share_" + std::to_string(i);
  return h;
}

// One row per (round, split, block). Unevaluated rounds carry nan metrics.
inline std::vector<MetricsRow> metrics_rows(const std::vector<RoundReport>& reports, std::size_t blocks,
                                            std::size_t groups) {
  std::vector<MetricsRow> rows;
  for (const auto& r : reports) {
    for (const char* split : {"val", "test"}) {
      const SplitMetrics& m = std::string(split) == "val" ? r.val : r.test;
      const double bal = groups > 0 && blocks > 0 ? r.balance_loss : std::numeric_limits<double>::quiet_NaN();
      if (blocks == 0) {
        rows.push_back({r.round, split, m.auc, m.logloss, bal, -1, {}});
        continue;
      }
      for (std::size_t l = 0; l < blocks; ++l) {
        MetricsRow row{r.round, split, m.auc, m.logloss, bal, static_cast<int>(l), {}};
        for (std::size_t i = 0; i < groups; ++i) {
          row.shares.push_back(r.shares.values.size() == blocks * groups ? r.shares.at(l, i)
                                                                         : std::numeric_limits<double>::quiet_NaN());
        }
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

inline void write_metrics(const fs::path& path, const std::vector<MetricsRow>& rows, std::size_t groups) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw LoadError("cannot write " + path.string());
  out << metrics_header(groups) << '\n';
  for (const auto& r : rows) {
    out << r.round << ',' << r.split << ',' << format_double(r.auc) << ',' << format_double(r.logloss) << ','
        << format_double(r.balance_loss) << ',' << r.block;
    for (double s : r.shares) out << ',' << format_double(s);
    out << '\n';
  }
  if (!out) throw LoadError("failed writing " + path.string());
}

inline std::vector<MetricsRow> read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw LoadError(path.string() + ": empty metrics file");
  const auto header = detail::split_fields(line, ',');
  if (header.size() < 6 || metrics_header(header.size() - 6) != line) {
    throw LoadError(path.string() + ":1: unexpected metrics header");
  }
  const std::size_t groups = header.size() - 6;
  std::vector<MetricsRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = detail::split_fields(line, ',');
    if (f.size() != 6 + groups) throw LoadError(path.string() + ":" + std::to_string(lineno) + ": wrong field count");
    try {
      MetricsRow r;
      r.round = static_cast<std::size_t>(std::stoull(f[0]));
      r.split = f[1];
      r.auc = parse_double(f[2]);
      r.logloss = parse_double(f[3]);
      r.balance_loss = parse_double(f[4]);
      r.block = std::stoi(f[5]);
      for (std::size_t i = 0; i < groups; ++i) r.shares.push_back(parse_double(f[6 + i]));
      rows.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw LoadError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

inline void write_timing(const fs::path& path, const std::vector<RoundReport>& reports) {
  std::ofstream out(path, std::ios::trunc);
  out << "round,wall_seconds\n";
  for (const auto& r : reports) out << r.round << ',' << format_double(r.wall_seconds) << '\n';
}

namespace detail {

inline nlohmann::json metric_json(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace detail

inline nlohmann::json summary_json(const ExperimentConfig& cfg, const ModelConfig& model,
                                   const std::vector<RoundReport>& reports, const std::string& status) {
  nlohmann::json s;
  s["schema"] = kSummarySchema;
  s["version"] = 1;
  s["metrics_schema"] = kMetricsSchema;
  s["status"] = status;
  s["seed"] = cfg.seed;
  s["rounds"] = cfg.federation.rounds;
  s["alpha"] = cfg.federation.train.alpha;
  s["groups"] = model.group_ffn ? model.groups : 0;
  s["noise_strength"] = cfg.federation.noise.strength;
  const auto counts = count_params(model);
  s["parameters"] = {{"private", counts.private_count},
                     {"global", counts.global_count},
                     {"group", counts.group_count},
                     {"total", counts.total()}};
  const RoundReport* last = nullptr;
  for (const auto& r : reports)
    if (r.evaluated) last = &r;
  if (last) {
    s["final"] = {{"round", last->round},
                  {"val", {{"auc", detail::metric_json(last->val.auc)}, {"logloss", detail::metric_json(last->val.logloss)}}},
                  {"test",
                   {{"auc", detail::metric_json(last->test.auc)}, {"logloss", detail::metric_json(last->test.logloss)}}}};
  }
  if (!reports.empty()) {
    const auto& r = reports.back();
    s["final_max_share"] = model.group_ffn ? detail::metric_json(r.shares.max_share()) : nlohmann::json(nullptr);
    s["final_shares"] = r.shares.values;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Commands

struct RunOverrides {
  std::optional<fs::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> resume;  // checkpoint to continue from
  std::optional<std::size_t> checkpoint_every;
};

inline void apply_overrides(ExperimentConfig& cfg, const RunOverrides& o) {
  if (o.out) cfg.output = *o.out;
  if (o.seed) {
    cfg.seed = *o.seed;
    cfg.federation.seed = *o.seed;
    cfg.federation.noise.seed = *o.seed;
    if (cfg.synthetic && cfg.synthetic_follows_seed) cfg.synthetic->seed = *o.seed;
  }
  if (o.checkpoint_every) cfg.checkpoint_every = *o.checkpoint_every;
}

// Runs one experiment into cfg.output: config.json, metrics.csv, timing.csv,
// summary.json (and checkpoint.bin when enabled). Returns an exit code.
inline int run_experiment(const ExperimentConfig& cfg, std::ostream& log, const std::optional<fs::path>& resume = {}) {
  PreparedData data;
  try {
    data = prepare_data(cfg);
    data.model.validate();
  } catch (const ConfigError& e) {
    log << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const LoadError& e) {
    log << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  std::error_code ec;
  fs::create_directories(cfg.output, ec);
  if (ec) {
    log << "error: cannot create output directory " << cfg.output.string() << ": " << ec.message() << '\n';
    return kExitConfig;
  }
  {
    std::ofstream out(cfg.output / "config.json", std::ios::trunc);
    out << config_to_json(cfg).dump(2) << '\n';
  }
  const std::size_t blocks = data.model.group_ffn ? data.model.blocks : 0;
  const std::size_t groups = data.model.group_ffn ? data.model.groups : 0;
  auto write_outputs = [&](const std::vector<RoundReport>& reports, const std::string& status) {
    write_metrics(cfg.output / "metrics.csv", metrics_rows(reports, blocks, groups), groups);
    write_timing(cfg.output / "timing.csv", reports);
    std::ofstream out(cfg.output / "summary.json", std::ios::trunc);
    out << summary_json(cfg, data.model, reports, status).dump(2) << '\n';
  };

  std::optional<Federation<float>> holder;
  try {
    holder.emplace(data.model, data.catalog, data.sequences, cfg.federation);
    if (resume) load_checkpoint(resume->string(), *holder);
  } catch (const ConfigError& e) {
    log << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const LoadError& e) {
    log << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  auto& fed = *holder;
  try {
    fed.run([&](const RoundReport& r) {
      if (r.evaluated) {
        log << "round " << r.round << " val_auc " << format_double(r.val.auc) << " test_auc "
            << format_double(r.test.auc) << '\n';
      }
      if (cfg.checkpoint_every > 0 && r.round > 0 && r.round % cfg.checkpoint_every == 0) {
        save_checkpoint((cfg.output / "checkpoint.bin").string(), fed);
      }
    });
  } catch (const DivergenceError& e) {
    log << "error: " << e.what() << '\n';
    write_outputs(fed.reports(), "diverged");
    return kExitFailure;
  } catch (const Error& e) {
    log << "error: " << e.what() << '\n';
    write_outputs(fed.reports(), "failed");
    return kExitFailure;
  }
  write_outputs(fed.reports(), "ok");
  return kExitOk;
}

inline int cmd_run(const fs::path& config_path, const RunOverrides& overrides, std::ostream& log) {
  ExperimentConfig cfg;
  try {
    cfg = load_config(config_path);
    apply_overrides(cfg, overrides);
  } catch (const ConfigError& e) {
    log << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const LoadError& e) {
    log << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return run_experiment(cfg, log, overrides.resume);
}

enum class SweepAxis { kAlpha, kGroups, kNoise };

inline std::optional<SweepAxis> parse_axis(const std::string& s) {
  if (s == "alpha") return SweepAxis::kAlpha;
  if (s == "groups") return SweepAxis::kGroups;
  if (s == "noise") return SweepAxis::kNoise;
  return std::nullopt;
}

// Cell seed = base seed + stable hash of the value's text form.
inline std::uint64_t sweep_cell_seed(std::uint64_t base, const std::string& value) {
  return base + stable_hash(value);
}

inline int cmd_sweep(const fs::path& config_path, const std::string& axis_name, const std::string& values_csv,
                     const RunOverrides& overrides, std::ostream& log) {
  const auto axis = parse_axis(axis_name);
  if (!axis) {
    log << "error: --axis: expected alpha, groups or noise, got \"" << axis_name << "\"\n";
    return kExitConfig;
  }
  ExperimentConfig base;
  try {
    base = load_config(config_path);
    RunOverrides o = overrides;
    o.resume.reset();
    apply_overrides(base, o);
  } catch (const Error& e) {
    log << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  std::vector<std::string> values;
  for (auto& v : detail::split_fields(values_csv, ',')) {
    v = detail::trim(v);
    if (!v.empty()) values.push_back(v);
  }
  if (values.empty()) {
    log << "error: --values: no values given\n";
    return kExitConfig;
  }
  // Validate every value before running anything.
  std::vector<ExperimentConfig> cells;
  for (const auto& v : values) {
    ExperimentConfig c = base;
    try {
      if (*axis == SweepAxis::kGroups) {
        std::size_t pos = 0;
        const auto g = std::stoull(v, &pos);
        if (pos != v.size() || g < 1) throw std::invalid_argument(v);
        c.model.groups = g;
      } else {
        const double x = parse_double(v);
        if (!(x >= 0.0) || !std::isfinite(x)) throw std::invalid_argument(v);
        if (*axis == SweepAxis::kAlpha) c.federation.train.alpha = x;
        else c.federation.noise.strength = x;
      }
    } catch (const std::exception&) {
      log << "error: --values: invalid " << axis_name << " value \"" << v << "\"\n";
      return kExitConfig;
    }
    const std::uint64_t seed = sweep_cell_seed(base.seed, v);
    c.seed = seed;
    c.federation.seed = seed;
    c.federation.noise.seed = seed;
    if (c.synthetic && c.synthetic_follows_seed) c.synthetic->seed = seed;
    c.output = base.output / (axis_name + "=" + v);
    cells.push_back(std::move(c));
  }

  std::error_code ec;
  fs::create_directories(base.output, ec);
  std::ofstream table(base.output / "sweep_summary.csv", std::ios::trunc);
  table << "axis,value,seed,status,val_auc,val_logloss,test_auc,test_logloss\n";
  bool any_failed = false;
  for (std::size_t k = 0; k < cells.size(); ++k) {
    log << "sweep " << axis_name << "=" << values[k] << '\n';
    fs::remove(cells[k].output / "summary.json", ec);
    const int code = run_experiment(cells[k], log);
    std::string status = code == kExitOk ? "ok" : (code == kExitConfig ? "config_error" : "failed");
    any_failed = any_failed || code != kExitOk;
    double va = NAN, vl = NAN, ta = NAN, tl = NAN;
    std::ifstream in(cells[k].output / "summary.json");
    if (in) {
      try {
        const auto s = nlohmann::json::parse(in);
        auto num = [](const nlohmann::json& j) { return j.is_number() ? j.get<double>() : NAN; };
        if (s.contains("final")) {
          va = num(s["final"]["val"]["auc"]);
          vl = num(s["final"]["val"]["logloss"]);
          ta = num(s["final"]["test"]["auc"]);
          tl = num(s["final"]["test"]["logloss"]);
        }
      } catch (const std::exception&) {
      }
    }
    table << axis_name << ',' << values[k] << ',' << cells[k].seed << ',' << status << ',' << format_double(va) << ','
          << format_double(vl) << ',' << format_double(ta) << ',' << format_double(tl) << '\n';
  }
  return any_failed ? kExitFailure : kExitOk;
}

}  // namespace mrff
