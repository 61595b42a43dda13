#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "mrff/data.hpp"
#include "mrff/errors.hpp"
#include "mrff/losses.hpp"
#include "mrff/metrics.hpp"
#include "mrff/model.hpp"
#include "mrff/optim.hpp"
#include "mrff/parameters.hpp"
#include "mrff/rng.hpp"

namespace mrff {

// Stream ids for Rng::derive, one per independent random purpose.
namespace streams {
inline constexpr std::uint64_t kTrain = 0x7472616e;
inline constexpr std::uint64_t kNoise = 0x6e6f6973;
inline constexpr std::uint64_t kSample = 0x73616d70;
}  // namespace streams

enum class OptimizerKind { kSgd, kAdam };

struct TrainHyper {
  std::size_t local_epochs = 1;
  std::size_t batch_size = 4;
  double learning_rate = 0.3;
  // Multiplies the learning rate of the gate parameters. Their only gradient is
  // the balance loss, whose population statistic reaches clients one round
  // late; a full-rate step makes the whole population flip groups together.
  double gate_lr_scale = 0.1;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double alpha = 0.1;  // balance-loss coefficient
  std::set<std::string> frozen;
};

template <typename Real>
struct OptimizerState {
  std::map<std::string, AdamMoments<Real>> moments;
};

template <typename Real>
struct ClientState {
  std::int64_t id = 0;
  std::vector<Sample> train;  // impressions with a non-empty history
  std::vector<Sample> val;
  std::vector<Sample> test;
  ParameterSet<Real> private_params;
  OptimizerState<Real> optimizer;
  std::vector<int> last_assignment;
};

struct NoiseConfig {
  double strength = 0.0;  // Laplace scale
  std::uint64_t seed = 0;
};

struct NoiseRecord {
  double strength = 0.0;
  std::uint64_t seed = 0;
  std::size_t draws = 0;
};

struct UploadPayload {
  std::int64_t client = 0;
  std::size_t samples = 0;
  std::map<std::string, std::vector<double>> deltas;
  std::vector<int> assignment;                 // per block, from the final local batch
  std::set<std::pair<int, int>> routed_groups;  // (block, group) with uploaded deltas
  double rec_loss = 0.0;
  double balance_loss = 0.0;
  std::optional<NoiseRecord> noise;
};

struct SkipRecord {
  std::int64_t client = 0;
  std::string reason;
};

using ClientResult = std::variant<UploadPayload, SkipRecord>;

// ---------------------------------------------------------------------------
// Partitioning

inline std::map<std::string, PartitionTag> partition_params(const ModelConfig& cfg) {
  std::map<std::string, PartitionTag> out;
  for (const auto& spec : parameter_layout(cfg)) out.emplace(spec.name, spec.tag);
  return out;
}

inline PartitionTag partition_of(const ModelConfig& cfg, const std::string& name) {
  const auto all = partition_params(cfg);
  auto it = all.find(name);
  if (it == all.end()) throw ContractError("unknown parameter name: " + name);
  return it->second;
}

// Names in the payload that belong to the PRIVATE partition (must be none).
inline std::vector<std::string> private_leaks(const UploadPayload& payload, const ModelConfig& cfg) {
  std::vector<std::string> leaks;
  const auto tags = partition_params(cfg);
  for (const auto& [name, delta] : payload.deltas) {
    auto it = tags.find(name);
    if (it == tags.end() || it->second.kind == Partition::kPrivate) leaks.push_back(name);
  }
  return leaks;
}

// ---------------------------------------------------------------------------
// Local training

struct LocalTrainStats {
  std::vector<int> assignment;
  std::set<std::pair<int, int>> routed_groups;
  double rec_loss = 0.0;
  double balance_loss = 0.0;
  std::size_t steps = 0;
};

namespace detail {

template <typename Real>
std::vector<std::vector<double>> mean_gate_probs(const ModelConfig& cfg, const ModelView<Real>& view,
                                                 const ItemCatalog& catalog, const std::vector<Sample>& samples) {
  NoGradGuard no_grad;
  std::vector<std::vector<double>> acc(cfg.blocks, std::vector<double>(cfg.groups, 0.0));
  std::size_t n = 0;
  for (const auto& s : samples) {
    if (!s.has_history()) continue;
    const auto out = forward(cfg, view, to_sequence_input(s, catalog), catalog.features.at(s.candidate), ForwardMode{});
    for (std::size_t l = 0; l < out.gates.size(); ++l)
      for (std::size_t i = 0; i < cfg.groups; ++i) acc[l][i] += out.gates[l].probs[i];
    ++n;
  }
  if (n > 0)
    for (auto& row : acc)
      for (auto& v : row) v /= static_cast<double>(n);
  return acc;
}

inline std::vector<int> argmax_rows(const std::vector<std::vector<double>>& rows) {
  std::vector<int> out;
  for (const auto& r : rows) out.push_back(argmax_lowest(r));
  return out;
}

}  // namespace detail

// Assignment per block: argmax of the gate probabilities averaged over samples.
template <typename Real>
std::vector<int> probe_assignment(const ModelConfig& cfg, const ModelView<Real>& view, const ItemCatalog& catalog,
                                  const std::vector<Sample>& samples) {
  if (!cfg.group_ffn) return {};
  return detail::argmax_rows(detail::mean_gate_probs(cfg, view, catalog, samples));
}

// Runs `hyper.local_epochs` epochs of minibatch training on `params` in place,
// minimizing mean BCE + alpha * mean balance loss. The per-block assignment is
// the argmax of the gate probabilities averaged over the final batch.
template <typename Real>
LocalTrainStats local_train(const ModelConfig& cfg, const ItemCatalog& catalog, ParameterSet<Real>& params,
                            const std::vector<Sample>& samples, const GroupProportions& f, const TrainHyper& hyper,
                            Rng& rng, OptimizerState<Real>& opt, std::int64_t round = 0, std::int64_t client = 0) {
  LocalTrainStats stats;
  const auto view = ModelView<Real>::bind(cfg, params);
  if (samples.empty() || hyper.local_epochs == 0) {
    stats.assignment = probe_assignment(cfg, view, catalog, samples);
    return stats;
  }
  for (const auto& name : hyper.frozen)
    if (params.contains(name)) params.set_trainable(name, false);

  const std::size_t batch = std::max<std::size_t>(1, hyper.batch_size);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const AdamHyper adam{hyper.learning_rate, hyper.beta1, hyper.beta2, hyper.adam_eps};

  for (std::size_t epoch = 0; epoch < hyper.local_epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      params.zero_grad();
      std::vector<Tensor<Real>> rec, bal;
      std::vector<std::vector<double>> mean_p(cfg.group_ffn ? cfg.blocks : 0, std::vector<double>(cfg.groups, 0.0));
      for (std::size_t k = start; k < end; ++k) {
        const Sample& s = samples[order[k]];
        const auto out = forward(cfg, view, to_sequence_input(s, catalog), catalog.features.at(s.candidate),
                                 ForwardMode{true, &rng});
        rec.push_back(bce_with_logits(out.logit, s.label));
        if (cfg.group_ffn) {
          bal.push_back(balance_loss(out.gate_probs, f));
          for (std::size_t l = 0; l < out.gates.size(); ++l) {
            stats.routed_groups.emplace(static_cast<int>(l), out.gates[l].group);
            for (std::size_t i = 0; i < cfg.groups; ++i) mean_p[l][i] += out.gates[l].probs[i];
          }
        }
      }
      const auto loss = local_loss(rec, bal, hyper.alpha);
      if (!std::isfinite(static_cast<double>(loss.item()))) {
        throw DivergenceError("non-finite local loss at round " + std::to_string(round) + ", client " +
                                  std::to_string(client),
                              round, client);
      }
      backward(loss);
      for (const auto& [name, entry] : params) {
        if (!entry.trainable || !entry.tensor.touched()) continue;
        Tensor<Real> t = entry.tensor;
        const double lr = hyper.learning_rate * (names::is_gate(name) ? hyper.gate_lr_scale : 1.0);
        if (hyper.optimizer == OptimizerKind::kSgd) {
          sgd_step<Real>(t.data(), t.grad(), lr);
        } else {
          AdamHyper h = adam;
          h.lr = lr;
          adam_step<Real>(t.data(), t.grad(), opt.moments[name], h);
        }
      }
      ++stats.steps;
      double r = 0, b = 0;
      for (const auto& t : rec) r += static_cast<double>(t.item());
      for (const auto& t : bal) b += static_cast<double>(t.item());
      const double n = static_cast<double>(end - start);
      stats.rec_loss = r / n;
      stats.balance_loss = cfg.group_ffn ? b / n : 0.0;
      for (auto& row : mean_p)
        for (auto& v : row) v /= n;
      stats.assignment = detail::argmax_rows(mean_p);
    }
  }
  return stats;
}

// One client's contribution to a round: adopt the broadcast shared
// parameters, train locally, return deltas for GLOBAL names and for the group
// FFNs the client was routed to. PRIVATE parameters are updated in place.
template <typename Real>
ClientResult client_round(const ModelConfig& cfg, const ItemCatalog& catalog, ClientState<Real>& client,
                          const ParameterSet<Real>& snapshot, const GroupProportions& f, const TrainHyper& hyper,
                          std::uint64_t seed, std::int64_t round) {
  if (client.train.empty()) return SkipRecord{client.id, "empty local dataset"};
  ParameterSet<Real> working = snapshot.deep_copy();
  working.merge_shared(client.private_params);
  Rng rng = Rng::derive(seed, {streams::kTrain, static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(client.id)});
  LocalTrainStats stats;
  try {
    stats = local_train(cfg, catalog, working, client.train, f, hyper, rng, client.optimizer, round, client.id);
  } catch (const NumericError& e) {
    throw DivergenceError(std::string(e.what()) + " at round " + std::to_string(round) + ", client " +
                              std::to_string(client.id),
                          round, client.id);
  }

  UploadPayload p;
  p.client = client.id;
  p.samples = client.train.size();
  p.assignment = stats.assignment;
  p.routed_groups = stats.routed_groups;
  p.rec_loss = stats.rec_loss;
  p.balance_loss = stats.balance_loss;
  for (const auto& [name, entry] : snapshot) {
    if (entry.tag.kind == Partition::kPrivate) continue;
    if (entry.tag.kind == Partition::kGroup && !p.routed_groups.count({entry.tag.block, entry.tag.group})) continue;
    const auto before = entry.tensor.data();
    const auto after = working.at(name).data();
    std::vector<double> d(before.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<double>(after[i]) - static_cast<double>(before[i]);
    p.deltas.emplace(name, std::move(d));
  }
  client.last_assignment = stats.assignment;
  return p;
}

// Adds independent zero-mean Laplace(strength) noise to every delta entry.
// Strength 0 returns the payload untouched.
inline UploadPayload add_dp_noise(UploadPayload payload, const NoiseConfig& noise, std::int64_t round) {
  if (noise.strength < 0.0) throw ContractError("noise strength must be >= 0");
  if (noise.strength == 0.0) return payload;
  Rng rng = Rng::derive(noise.seed, {streams::kNoise, static_cast<std::uint64_t>(round),
                                     static_cast<std::uint64_t>(payload.client)});
  std::size_t draws = 0;
  for (auto& [name, delta] : payload.deltas) {
    for (auto& v : delta) v += rng.laplace(noise.strength);
    draws += delta.size();
  }
  payload.noise = NoiseRecord{noise.strength, noise.seed, draws};
  return payload;
}

// ---------------------------------------------------------------------------
// Aggregation

struct AggregationRecord {
  bool skipped = false;
  std::vector<std::pair<std::int64_t, double>> weights;  // (client, alpha_u) in client order
  double weight_sum() const {
    double s = 0;
    for (const auto& [c, w] : weights) s += w;
    return s;
  }
};

namespace detail {

inline std::vector<const UploadPayload*> sorted_by_client(const std::vector<UploadPayload>& payloads) {
  std::vector<const UploadPayload*> out;
  for (const auto& p : payloads) out.push_back(&p);
  std::sort(out.begin(), out.end(), [](const auto* a, const auto* b) { return a->client < b->client; });
  return out;
}

// param += sum_u alpha_u * delta_u with alpha_u = n_u / sum n, reduced in client order.
template <typename Real>
AggregationRecord apply_weighted(const std::vector<const UploadPayload*>& members,
                                 const std::vector<std::string>& names, const ParameterSet<Real>& params) {
  AggregationRecord rec;
  if (members.empty()) {
    rec.skipped = true;
    return rec;
  }
  double total = 0.0;
  for (const auto* p : members) total += static_cast<double>(p->samples);
  if (total <= 0.0) throw ContractError("aggregation over payloads with zero samples");
  for (const auto* p : members) rec.weights.emplace_back(p->client, static_cast<double>(p->samples) / total);
  for (const auto& name : names) {
    Tensor<Real> t = params.at(name);
    auto values = t.data();
    std::vector<double> acc(values.size(), 0.0);
    for (std::size_t k = 0; k < members.size(); ++k) {
      auto it = members[k]->deltas.find(name);
      if (it == members[k]->deltas.end()) {
        throw ContractError("payload of client " + std::to_string(members[k]->client) + " lacks " + name);
      }
      if (it->second.size() != values.size()) throw DimensionError("delta size mismatch for " + name);
      const double w = rec.weights[k].second;
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * it->second[i];
    }
    for (std::size_t i = 0; i < values.size(); ++i)
      values[i] = static_cast<Real>(static_cast<double>(values[i]) + acc[i]);
  }
  return rec;
}

}  // namespace detail

// Sample-count weighted average of GLOBAL deltas over all payloads.
template <typename Real>
AggregationRecord aggregate_global(const std::vector<UploadPayload>& payloads, ParameterSet<Real>& shared) {
  return detail::apply_weighted(detail::sorted_by_client(payloads), shared.names(Partition::kGlobal), shared);
}

// For each (block, group): weighted average over exactly the payloads that
// carry that group's deltas. Groups nobody was routed to stay unchanged.
template <typename Real>
std::map<std::pair<int, int>, AggregationRecord> aggregate_group(const std::vector<UploadPayload>& payloads,
                                                                 ParameterSet<Real>& shared) {
  std::map<std::pair<int, int>, std::vector<std::string>> group_names;
  for (const auto& [name, entry] : shared)
    if (entry.tag.kind == Partition::kGroup) group_names[{entry.tag.block, entry.tag.group}].push_back(name);
  const auto sorted = detail::sorted_by_client(payloads);
  std::map<std::pair<int, int>, AggregationRecord> out;
  for (const auto& [key, names] : group_names) {
    std::vector<const UploadPayload*> members;
    for (const auto* p : sorted) {
      if (p->routed_groups.count(key)) members.push_back(p);
    }
    out.emplace(key, detail::apply_weighted(members, names, shared));
  }
  return out;
}

inline GroupProportions compute_group_proportions(const std::vector<UploadPayload>& payloads, std::size_t blocks,
                                                  std::size_t groups) {
  GroupProportions f{blocks, groups, std::vector<double>(blocks * groups, 0.0)};
  if (payloads.empty()) return GroupProportions::uniform(blocks, groups);
  for (const auto& p : payloads) {
    if (p.assignment.size() != blocks) {
      throw DimensionError("payload of client " + std::to_string(p.client) + " carries " +
                           std::to_string(p.assignment.size()) + " assignments, expected " + std::to_string(blocks));
    }
    for (std::size_t l = 0; l < blocks; ++l) {
      const int g = p.assignment[l];
      if (g < 0 || static_cast<std::size_t>(g) >= groups) throw ContractError("assignment outside group range");
      f.at(l, static_cast<std::size_t>(g)) += 1.0;
    }
  }
  for (auto& v : f.values) v /= static_cast<double>(payloads.size());
  return f;
}

// ---------------------------------------------------------------------------
// Orchestration

struct FederationOptions {
  std::size_t rounds = 500;
  double participation = 1.0;
  TrainHyper train;
  NoiseConfig noise;
  bool noise_stage = true;  // false removes the noise step entirely
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;
  std::size_t threads = 1;
};

struct SplitMetrics {
  double auc = std::numeric_limits<double>::quiet_NaN();
  double logloss = std::numeric_limits<double>::quiet_NaN();
  std::size_t impressions = 0;
};

struct RoundReport {
  std::size_t round = 0;
  bool evaluated = false;
  SplitMetrics val;
  SplitMetrics test;
  double rec_loss = std::numeric_limits<double>::quiet_NaN();
  double balance_loss = std::numeric_limits<double>::quiet_NaN();
  GroupProportions shares;  // per-block group shares this round
  std::size_t participants = 0;
  std::size_t skipped = 0;
  double noise_strength = 0.0;
  double wall_seconds = 0.0;
};

template <typename Real>
struct ServerState {
  ParameterSet<Real> shared;  // GLOBAL and GROUP parameters
  GroupProportions f;         // broadcast with the next round
  std::size_t round = 0;
  AggregationRecord last_global;
  std::map<std::pair<int, int>, AggregationRecord> last_group;
};

// Splits per-user sequences into federated clients. Training impressions
// without any prior click cannot be scored and are dropped.
template <typename Real>
std::vector<ClientState<Real>> make_clients(const ModelConfig& cfg, const std::vector<UserSequences>& data,
                                            std::uint64_t seed) {
  std::vector<ClientState<Real>> clients;
  clients.reserve(data.size());
  for (const auto& us : data) {
    ClientState<Real> c;
    c.id = us.user;
    for (const auto& s : us.train)
      if (s.has_history()) c.train.push_back(s);
    if (!us.train_only) {
      c.val = us.val;
      c.test = us.test;
    }
    c.private_params = init_parameters<Real>(cfg, seed, static_cast<std::uint64_t>(c.id) + 1,
                                             [](const PartitionTag& t) { return t.kind == Partition::kPrivate; });
    clients.push_back(std::move(c));
  }
  return clients;
}

template <typename Real>
class Federation {
 public:
  using PayloadObserver = std::function<void(std::size_t round, const UploadPayload&)>;

  Federation(ModelConfig cfg, ItemCatalog catalog, const std::vector<UserSequences>& data, FederationOptions options)
      : cfg_(std::move(cfg)), catalog_(std::move(catalog)), options_(std::move(options)) {
    cfg_.validate();
    if (cfg_.attr_vocab != catalog_.attr_vocab) throw ConfigError("model attr_vocab does not match the item catalog");
    if (!(options_.participation > 0.0 && options_.participation <= 1.0))
      throw ConfigError("participation: must be in (0, 1]");
    server_.shared = init_parameters<Real>(cfg_, options_.seed, 0,
                                           [](const PartitionTag& t) { return t.kind != Partition::kPrivate; });
    server_.f = GroupProportions::uniform(cfg_.group_ffn ? cfg_.blocks : 0, cfg_.groups);
    clients_ = make_clients<Real>(cfg_, data, options_.seed);
  }

  const ModelConfig& config() const { return cfg_; }
  const ItemCatalog& catalog() const { return catalog_; }
  const FederationOptions& options() const { return options_; }
  ServerState<Real>& server() { return server_; }
  const ServerState<Real>& server() const { return server_; }
  std::vector<ClientState<Real>>& clients() { return clients_; }
  const std::vector<ClientState<Real>>& clients() const { return clients_; }
  const std::vector<RoundReport>& reports() const { return reports_; }
  std::vector<RoundReport>& reports() { return reports_; }
  void set_payload_observer(PayloadObserver obs) { observer_ = std::move(obs); }

  bool finished() const { return server_.round >= options_.rounds && !reports_.empty(); }

  // Full parameter view of one client: server parameters plus its private ones.
  ParameterSet<Real> client_view(const ClientState<Real>& c) const {
    ParameterSet<Real> p = server_.shared.select([](const std::string&, const PartitionTag&) { return true; });
    p.merge_shared(c.private_params);
    return p;
  }

  // Row for the untrained model (round 0).
  RoundReport initial_report() {
    const auto t0 = std::chrono::steady_clock::now();
    RoundReport r;
    r.round = 0;
    r.noise_strength = options_.noise.strength;
    if (cfg_.group_ffn) {
      r.shares = GroupProportions{cfg_.blocks, cfg_.groups, std::vector<double>(cfg_.blocks * cfg_.groups, 0.0)};
      double bal = 0.0;
      std::size_t n = 0;
      for (auto& c : clients_) {
        if (c.train.empty()) continue;
        const auto view = ModelView<Real>::bind(cfg_, client_view(c));
        const auto probs = detail::mean_gate_probs(cfg_, view, catalog_, c.train);
        c.last_assignment = detail::argmax_rows(probs);
        for (std::size_t l = 0; l < cfg_.blocks; ++l) {
          r.shares.at(l, static_cast<std::size_t>(c.last_assignment[l])) += 1.0;
          for (std::size_t i = 0; i < cfg_.groups; ++i) bal += server_.f.at(l, i) * probs[l][i];
        }
        ++n;
      }
      if (n > 0) {
        for (auto& v : r.shares.values) v /= static_cast<double>(n);
        r.balance_loss = static_cast<double>(cfg_.groups) * bal / static_cast<double>(n);
      } else {
        r.shares = GroupProportions::uniform(cfg_.blocks, cfg_.groups);
      }
    }
    evaluate_into(r);
    r.wall_seconds = seconds_since(t0);
    return r;
  }

  std::vector<std::int64_t> sample_participants(std::size_t round) const {
    std::vector<std::size_t> idx(clients_.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (options_.participation < 1.0 && !idx.empty()) {
      const auto k = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::ceil(options_.participation * static_cast<double>(idx.size()))));
      Rng rng = Rng::derive(options_.seed, {streams::kSample, round});
      rng.shuffle(std::span<std::size_t>(idx));
      idx.resize(std::min(k, idx.size()));
      std::sort(idx.begin(), idx.end());
    }
    return {idx.begin(), idx.end()};
  }

  // Executes one communication round and returns its report.
  RoundReport step() {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t round = server_.round + 1;
    const auto chosen = sample_participants(round);
    std::vector<std::optional<ClientResult>> results(chosen.size());
    std::vector<std::exception_ptr> errors(chosen.size());
    const GroupProportions f = server_.f;

    auto work = [&](std::size_t k) {
      try {
        results[k] = client_round(cfg_, catalog_, clients_[static_cast<std::size_t>(chosen[k])], server_.shared, f,
                                  options_.train, options_.seed, static_cast<std::int64_t>(round));
      } catch (...) {
        errors[k] = std::current_exception();
      }
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min(options_.threads, chosen.size()));
    if (workers == 1) {
      for (std::size_t k = 0; k < chosen.size(); ++k) work(k);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          for (std::size_t k = w; k < chosen.size(); k += workers) work(k);
        });
      }
      for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);

    RoundReport r;
    r.round = round;
    r.noise_strength = options_.noise.strength;
    std::vector<UploadPayload> payloads;
    for (auto& res : results) {
      if (auto* p = std::get_if<UploadPayload>(&*res)) {
        payloads.push_back(options_.noise_stage ? add_dp_noise(std::move(*p), options_.noise,
                                                               static_cast<std::int64_t>(round))
                                                : std::move(*p));
      } else {
        ++r.skipped;
      }
    }
    for (const auto& p : payloads) {
      const auto leaks = private_leaks(p, cfg_);
      if (!leaks.empty()) {
        throw ContractError("client " + std::to_string(p.client) + " uploaded private parameter " + leaks.front());
      }
      if (observer_) observer_(round, p);
    }
    r.participants = payloads.size();
    server_.last_global = aggregate_global(payloads, server_.shared);
    server_.last_group = aggregate_group(payloads, server_.shared);
    if (cfg_.group_ffn && !payloads.empty()) server_.f = compute_group_proportions(payloads, cfg_.blocks, cfg_.groups);
    server_.round = round;

    if (!payloads.empty()) {
      double rec = 0, bal = 0;
      for (const auto& p : payloads) {
        rec += p.rec_loss;
        bal += p.balance_loss;
      }
      r.rec_loss = rec / static_cast<double>(payloads.size());
      r.balance_loss = cfg_.group_ffn ? bal / static_cast<double>(payloads.size()) : 0.0;
    }
    r.shares = server_.f;
    if (round % std::max<std::size_t>(1, options_.eval_every) == 0 || round == options_.rounds) evaluate_into(r);
    r.wall_seconds = seconds_since(t0);
    return r;
  }

  // Runs the remaining rounds, appending reports (round 0 first).
  const std::vector<RoundReport>& run(const std::function<void(const RoundReport&)>& on_round = {}) {
    if (reports_.empty()) {
      reports_.push_back(initial_report());
      if (on_round) on_round(reports_.back());
    }
    while (server_.round < options_.rounds) {
      reports_.push_back(step());
      if (on_round) on_round(reports_.back());
    }
    return reports_;
  }

  // Pooled AUC/LogLoss over every client's val and test impressions.
  std::pair<SplitMetrics, SplitMetrics> evaluate() const {
    NoGradGuard no_grad;
    std::vector<EvalRecord> val, test;
    for (const auto& c : clients_) {
      if (c.val.empty() && c.test.empty()) continue;
      const auto view = ModelView<Real>::bind(cfg_, client_view(c));
      auto score = [&](const std::vector<Sample>& samples, std::vector<EvalRecord>& out) {
        for (const auto& s : samples) {
          if (!s.has_history()) continue;
          const auto fwd = forward(cfg_, view, to_sequence_input(s, catalog_), catalog_.features.at(s.candidate),
                                   ForwardMode{});
          const double logit = static_cast<double>(fwd.logit.item());
          if (!std::isfinite(logit)) {
            throw DivergenceError("non-finite prediction at round " + std::to_string(server_.round) + ", client " +
                                      std::to_string(c.id),
                                  static_cast<long long>(server_.round), c.id);
          }
          out.push_back({sigmoid_value(logit), s.label});
        }
      };
      score(c.val, val);
      score(c.test, test);
    }
    return {summarize(val), summarize(test)};
  }

 private:
  static SplitMetrics summarize(const std::vector<EvalRecord>& records) {
    SplitMetrics m;
    m.impressions = records.size();
    if (records.empty()) return m;
    m.logloss = logloss(records);
    try {
      m.auc = auc(records);
    } catch (const UndefinedMetricError&) {
    }
    return m;
  }

  void evaluate_into(RoundReport& r) const {
    auto [val, test] = evaluate();
    r.val = val;
    r.test = test;
    r.evaluated = true;
  }

  static double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  ModelConfig cfg_;
  ItemCatalog catalog_;
  FederationOptions options_;
  ServerState<Real> server_;
  std::vector<ClientState<Real>> clients_;
  std::vector<RoundReport> reports_;
  PayloadObserver observer_;
};

template <typename Real = float>
std::vector<RoundReport> run_federation(const ModelConfig& cfg, const ItemCatalog& catalog,
                                        const std::vector<UserSequences>& data, const FederationOptions& options) {
  Federation<Real> fed(cfg, catalog, data, options);
  return fed.run();
}

}  // namespace mrff
