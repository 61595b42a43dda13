#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "mrff/errors.hpp"
#include "mrff/model.hpp"
#include "mrff/rng.hpp"

namespace mrff {

// Bijection between raw string ids and contiguous integers, in first-seen order.
class IdMap {
 public:
  std::int64_t encode(const std::string& raw) {
    auto [it, inserted] = index_.emplace(raw, static_cast<std::int64_t>(names_.size()));
    if (inserted) names_.push_back(raw);
    return it->second;
  }

  std::optional<std::int64_t> find(const std::string& raw) const {
    auto it = index_.find(raw);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& decode(std::int64_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= names_.size()) {
      throw IndexError("id " + std::to_string(id) + " not in map of size " + std::to_string(names_.size()));
    }
    return names_[static_cast<std::size_t>(id)];
  }

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& raw_ids() const { return names_; }

 private:
  std::unordered_map<std::string, std::int64_t> index_;
  std::vector<std::string> names_;
};

struct Interaction {
  std::int64_t user = 0;
  std::int64_t item = 0;
  std::int64_t time = 0;
  int label = 0;
  std::size_t line = 0;  // 1-based source line, 0 for generated records
};

struct InteractionLog {
  std::vector<Interaction> records;
  IdMap users;
  IdMap items;
  std::vector<std::string> attr_names;          // extra item attributes
  std::vector<IdMap> attr_maps;                 // one per extra attribute
  std::vector<std::vector<std::int64_t>> item_attrs;  // [item][k]

  // Attribute ids of an item: {item id, extra attribute ids...}.
  std::vector<std::int64_t> item_features(std::int64_t item) const {
    std::vector<std::int64_t> f{item};
    const auto& extra = item_attrs.at(static_cast<std::size_t>(item));
    f.insert(f.end(), extra.begin(), extra.end());
    return f;
  }

  std::vector<std::size_t> attr_vocab() const {
    std::vector<std::size_t> v{std::max<std::size_t>(items.size(), 1)};
    for (const auto& m : attr_maps) v.push_back(std::max<std::size_t>(m.size(), 1));
    return v;
  }
};

struct Schema {
  std::string user = "user_id";
  std::string item = "item_id";
  std::string time = "timestamp";
  std::string label = "label";
  std::vector<std::string> attributes;
  char delimiter = 0;  // 0: detect from the header (tab if present, else comma)
};

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == delim) {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \r\n");
  return s.substr(b, e - b + 1);
}

inline std::optional<std::int64_t> parse_int(const std::string& s) {
  std::int64_t v = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || s.empty()) return std::nullopt;
  return v;
}

}  // namespace detail

// Reads a delimited log with a header row. Ids are remapped to contiguous
// integers in order of first appearance; duplicate rows stay distinct events.
inline InteractionLog load_interactions(const std::filesystem::path& path, const Schema& schema) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  std::string header;
  if (!std::getline(in, header)) throw LoadError(path.string() + ":1: missing header row");
  const char delim = schema.delimiter ? schema.delimiter : (header.find('\t') != std::string::npos ? '\t' : ',');
  auto columns = detail::split_fields(header, delim);
  for (auto& c : columns) c = detail::trim(c);
  auto column = [&](const std::string& name) -> std::size_t {
    auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw LoadError(path.string() + ":1: missing column '" + name + "'");
    return static_cast<std::size_t>(it - columns.begin());
  };
  const std::size_t cu = column(schema.user), ci = column(schema.item), ct = column(schema.time),
                    cl = column(schema.label);
  std::vector<std::size_t> ca;
  for (const auto& a : schema.attributes) ca.push_back(column(a));

  InteractionLog log;
  log.attr_names = schema.attributes;
  log.attr_maps.resize(schema.attributes.size());
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    auto fields = detail::split_fields(line, delim);
    auto where = [&] { return path.string() + ":" + std::to_string(lineno) + ": "; };
    if (fields.size() != columns.size()) {
      throw LoadError(where() + "expected " + std::to_string(columns.size()) + " fields, found " +
                      std::to_string(fields.size()));
    }
    for (auto& f : fields) f = detail::trim(f);
    const auto time = detail::parse_int(fields[ct]);
    if (!time) throw LoadError(where() + "unparsable timestamp '" + fields[ct] + "'");
    const auto label = detail::parse_int(fields[cl]);
    if (!label || (*label != 0 && *label != 1)) throw LoadError(where() + "label must be 0 or 1, got '" + fields[cl] + "'");
    if (fields[cu].empty() || fields[ci].empty()) throw LoadError(where() + "empty user or item id");

    Interaction r;
    r.user = log.users.encode(fields[cu]);
    r.item = log.items.encode(fields[ci]);
    r.time = *time;
    r.label = static_cast<int>(*label);
    r.line = lineno;
    std::vector<std::int64_t> attrs;
    for (std::size_t k = 0; k < ca.size(); ++k) attrs.push_back(log.attr_maps[k].encode(fields[ca[k]]));
    const auto idx = static_cast<std::size_t>(r.item);
    if (idx == log.item_attrs.size()) {
      log.item_attrs.push_back(std::move(attrs));
    } else if (log.item_attrs[idx] != attrs) {
      throw LoadError(where() + "item '" + fields[ci] + "' has attributes that differ from its first occurrence");
    }
    log.records.push_back(r);
  }
  return log;
}

// Persists the id remapping tables as `index,raw_id` CSV files.
inline void write_id_maps(const InteractionLog& log, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto dump = [&](const IdMap& m, const std::string& file) {
    std::ofstream out(dir / file);
    out << "index,raw_id\n";
    for (std::size_t i = 0; i < m.size(); ++i) out << i << ',' << m.raw_ids()[i] << '\n';
  };
  dump(log.users, "user_ids.csv");
  dump(log.items, "item_ids.csv");
  for (std::size_t k = 0; k < log.attr_maps.size(); ++k) dump(log.attr_maps[k], "attr_" + log.attr_names[k] + "_ids.csv");
}

// Adds `ratio` uniformly drawn non-clicked impressions per positive, stamped
// with the positive's timestamp. For logs without explicit negatives.
inline void add_uniform_negatives(InteractionLog& log, std::size_t ratio, std::uint64_t seed) {
  const std::size_t n_items = log.items.size();
  if (ratio == 0 || n_items < 2) return;
  Rng rng = Rng::derive(seed, {0x4e4547ULL});
  const std::size_t original = log.records.size();
  for (std::size_t r = 0; r < original; ++r) {
    const Interaction pos = log.records[r];
    if (pos.label != 1) continue;
    for (std::size_t k = 0; k < ratio; ++k) {
      auto item = static_cast<std::int64_t>(rng.index(n_items - 1));
      if (item >= pos.item) ++item;
      log.records.push_back({pos.user, item, pos.time, 0, 0});
    }
  }
}

// ---------------------------------------------------------------------------
// Leave-one-out split

struct UserSplit {
  std::int64_t user = 0;
  std::vector<std::size_t> train;  // record indices, chronological
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
  bool train_only = false;  // fewer than 3 positives
};

struct SplitSpec {
  std::vector<UserSplit> users;  // indexed by user id
};

// Chronological record order of each user: (time, item id, source order).
inline std::vector<std::vector<std::size_t>> user_timelines(const InteractionLog& log) {
  std::vector<std::vector<std::size_t>> per_user(log.users.size());
  for (std::size_t r = 0; r < log.records.size(); ++r)
    per_user[static_cast<std::size_t>(log.records[r].user)].push_back(r);
  for (auto& idx : per_user) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      const auto& x = log.records[a];
      const auto& y = log.records[b];
      if (x.time != y.time) return x.time < y.time;
      return x.item < y.item;
    });
  }
  return per_user;
}

// Test holds the last positive and every impression after the second-to-last
// positive; validation holds the second-to-last positive and the impressions
// between it and the third-to-last; the rest is train.
inline SplitSpec leave_one_out_split(const InteractionLog& log) {
  SplitSpec spec;
  const auto timelines = user_timelines(log);
  spec.users.resize(timelines.size());
  for (std::size_t u = 0; u < timelines.size(); ++u) {
    auto& s = spec.users[u];
    s.user = static_cast<std::int64_t>(u);
    const auto& tl = timelines[u];
    std::vector<std::size_t> pos_at;  // positions within tl of positives
    for (std::size_t k = 0; k < tl.size(); ++k)
      if (log.records[tl[k]].label == 1) pos_at.push_back(k);
    if (pos_at.size() < 3) {
      s.train_only = true;
      s.train = tl;
      continue;
    }
    const std::size_t val_start = pos_at[pos_at.size() - 3] + 1;
    const std::size_t test_start = pos_at[pos_at.size() - 2] + 1;
    for (std::size_t k = 0; k < tl.size(); ++k) {
      if (k < val_start) s.train.push_back(tl[k]);
      else if (k < test_start) s.val.push_back(tl[k]);
      else s.test.push_back(tl[k]);
    }
  }
  return spec;
}

inline void write_split_manifest(const InteractionLog& log, const SplitSpec& split, const std::filesystem::path& path) {
  nlohmann::json users = nlohmann::json::array();
  for (const auto& s : split.users) {
    users.push_back({{"user", log.users.decode(s.user)},
                     {"train_only", s.train_only},
                     {"train_count", s.train.size()},
                     {"val", s.val},
                     {"test", s.test}});
  }
  nlohmann::json doc = {{"schema", "mrff-split"}, {"version", 1}, {"users", users}};
  std::ofstream out(path);
  out << doc.dump(1) << '\n';
}

// ---------------------------------------------------------------------------
// Sequences

inline constexpr std::int64_t kPadItem = -1;

// One labeled impression with its left-padded click history.
struct Sample {
  std::int64_t user = 0;
  std::vector<std::int64_t> history;  // length max_len; kPadItem marks padding
  std::vector<std::uint8_t> mask;     // 1 where history holds an item
  std::int64_t candidate = 0;
  int label = 0;
  std::int64_t time = 0;
  std::size_t record = 0;

  bool has_history() const { return std::find(mask.begin(), mask.end(), 1) != mask.end(); }
};

struct UserSequences {
  std::int64_t user = 0;
  bool train_only = false;
  std::vector<Sample> train, val, test;
};

// History of an impression = the user's clicks strictly earlier in time,
// most recent max_len of them, left-padded.
inline std::vector<UserSequences> build_sequences(const InteractionLog& log, const SplitSpec& split, std::size_t max_len) {
  if (max_len == 0) throw ContractError("build_sequences: max_len must be >= 1");
  const auto timelines = user_timelines(log);
  std::vector<UserSequences> out(split.users.size());
  for (std::size_t u = 0; u < split.users.size(); ++u) {
    const auto& tl = timelines[u];
    auto& us = out[u];
    us.user = static_cast<std::int64_t>(u);
    us.train_only = split.users[u].train_only;
    auto make = [&](std::size_t record) {
      const auto& r = log.records[record];
      std::vector<std::int64_t> clicks;
      for (std::size_t idx : tl) {
        const auto& h = log.records[idx];
        if (h.time >= r.time) break;
        if (h.label == 1) clicks.push_back(h.item);
      }
      Sample s;
      s.user = r.user;
      s.candidate = r.item;
      s.label = r.label;
      s.time = r.time;
      s.record = record;
      s.history.assign(max_len, kPadItem);
      s.mask.assign(max_len, 0);
      const std::size_t n = std::min(max_len, clicks.size());
      for (std::size_t k = 0; k < n; ++k) {
        s.history[max_len - n + k] = clicks[clicks.size() - n + k];
        s.mask[max_len - n + k] = 1;
      }
      return s;
    };
    for (std::size_t r : split.users[u].train) us.train.push_back(make(r));
    for (std::size_t r : split.users[u].val) us.val.push_back(make(r));
    for (std::size_t r : split.users[u].test) us.test.push_back(make(r));
  }
  return out;
}

// Item attribute table used to turn samples into model inputs.
struct ItemCatalog {
  std::vector<std::size_t> attr_vocab;
  std::vector<std::vector<std::int64_t>> features;  // [item] -> {item, attrs...}

  static ItemCatalog from_log(const InteractionLog& log) {
    ItemCatalog c;
    c.attr_vocab = log.attr_vocab();
    for (std::size_t i = 0; i < log.items.size(); ++i) c.features.push_back(log.item_features(static_cast<std::int64_t>(i)));
    return c;
  }

  std::size_t n_attrs() const { return attr_vocab.size(); }
};

// Padded positions keep their slot (id 0, valid 0) so position ids stay
// right-aligned: the most recent click always sits at position max_len - 1.
inline SequenceInput to_sequence_input(const Sample& s, const ItemCatalog& catalog) {
  SequenceInput in;
  const std::size_t T = s.history.size();
  in.attr_ids.assign(catalog.n_attrs(), std::vector<std::int64_t>(T, 0));
  in.positions.resize(T);
  in.valid = s.mask;
  for (std::size_t t = 0; t < T; ++t) {
    in.positions[t] = static_cast<std::int64_t>(t);
    if (!s.mask[t]) continue;
    const auto& f = catalog.features.at(static_cast<std::size_t>(s.history[t]));
    for (std::size_t m = 0; m < f.size(); ++m) in.attr_ids[m][t] = f[m];
  }
  return in;
}

// ---------------------------------------------------------------------------
// Synthetic data with planted user clusters

struct SyntheticSpec {
  std::size_t n_users = 200;
  std::size_t n_items = 80;
  std::size_t n_clusters = 4;
  std::size_t items_per_cluster = 20;
  std::size_t min_len = 20;  // impressions per user, uniform in [min_len, max_len]
  std::size_t max_len = 40;
  // Row-major [n_clusters x item clusters]; empty means own/other defaults.
  std::vector<double> click;
  double own_click = 0.9;
  double other_click = 0.1;
  std::uint64_t seed = 1;

  std::size_t item_clusters() const { return items_per_cluster ? n_items / items_per_cluster : 0; }

  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (n_users < 1) out.push_back("n_users: must be >= 1");
    if (n_clusters < 1) out.push_back("n_clusters: must be >= 1");
    if (n_clusters > n_users) out.push_back("n_clusters: cannot exceed n_users");
    if (items_per_cluster < 1 || n_items < items_per_cluster || n_items % items_per_cluster != 0)
      out.push_back("items_per_cluster: must divide n_items");
    if (min_len < 1 || max_len < min_len) out.push_back("min_len/max_len: need 1 <= min_len <= max_len");
    if (!click.empty() && click.size() != n_clusters * item_clusters())
      out.push_back("click: expected n_clusters * (n_items / items_per_cluster) entries");
    for (double p : click)
      if (!(p >= 0.0 && p <= 1.0)) out.push_back("click: probabilities must lie in [0, 1]");
    if (!(own_click >= 0.0 && own_click <= 1.0) || !(other_click >= 0.0 && other_click <= 1.0))
      out.push_back("own_click/other_click: must lie in [0, 1]");
    return out;
  }

  double click_prob(std::size_t user_cluster, std::size_t item_cluster) const {
    if (!click.empty()) return click[user_cluster * item_clusters() + item_cluster];
    return user_cluster % item_clusters() == item_cluster ? own_click : other_click;
  }
};

struct SyntheticLog {
  InteractionLog log;
  std::vector<int> user_cluster;  // hidden; diagnostics only
  std::vector<int> item_cluster;
};

// Users are assigned to clusters round-robin; each impression shows a
// uniformly drawn item, clicked with probability click[user cluster][item cluster].
// Items carry their cluster as a "category" attribute.
inline SyntheticLog synthetic_generate(const SyntheticSpec& spec) {
  const auto issues = spec.problems();
  if (!issues.empty()) throw ConfigError("invalid synthetic spec: " + issues.front());
  SyntheticLog out;
  auto& log = out.log;
  log.attr_names = {"category"};
  log.attr_maps.resize(1);
  const std::size_t n_item_clusters = spec.item_clusters();
  for (std::size_t k = 0; k < n_item_clusters; ++k) log.attr_maps[0].encode("c" + std::to_string(k));
  for (std::size_t i = 0; i < spec.n_items; ++i) {
    log.items.encode("i" + std::to_string(i));
    const auto c = static_cast<int>(i / spec.items_per_cluster);
    out.item_cluster.push_back(c);
    log.item_attrs.push_back({c});
  }
  for (std::size_t u = 0; u < spec.n_users; ++u) {
    log.users.encode("u" + std::to_string(u));
    out.user_cluster.push_back(static_cast<int>(u % spec.n_clusters));
    Rng rng = Rng::derive(spec.seed, {0x53594eULL, u});
    const std::size_t len = spec.min_len + static_cast<std::size_t>(rng.index(spec.max_len - spec.min_len + 1));
    for (std::size_t t = 0; t < len; ++t) {
      const auto item = static_cast<std::int64_t>(rng.index(spec.n_items));
      const double p = spec.click_prob(u % spec.n_clusters, static_cast<std::size_t>(out.item_cluster[item]));
      log.records.push_back({static_cast<std::int64_t>(u), item, static_cast<std::int64_t>(t + 1),
                             rng.bernoulli(p) ? 1 : 0, 0});
    }
  }
  return out;
}

}  // namespace mrff
