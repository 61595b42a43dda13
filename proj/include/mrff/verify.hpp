#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mrff/data.hpp"
#include "mrff/federated.hpp"
#include "mrff/grad_check.hpp"
#include "mrff/losses.hpp"
#include "mrff/model.hpp"
#include "mrff/ops.hpp"

// Self-check suite behind `mrff verify`: gradients of every op and of the
// full model, balance-loss identities, aggregation identities and the
// privacy partition. Each property prints one PASS/FAIL line.
namespace mrff {

inline constexpr double kGradTolerance = 1e-4;

struct VerifyOutcome {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace verify_detail {

using T = Tensor<double>;

inline T random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return T::from(std::move(shape), std::move(v), true);
}

// Values bounded away from zero so relu's kink is never straddled.
inline T away_from_zero(Rng& rng, Shape shape) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
  return T::from(std::move(shape), std::move(v), true);
}

// Weighted sum with fixed random weights turns any output into a scalar.
inline T project(const T& y, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(y.numel());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return sum(mul(y, T::from(y.shape(), std::move(w))));
}

inline VerifyOutcome grad_outcome(const std::string& name, const std::function<T()>& f, const std::vector<T>& params) {
  const auto r = grad_check(f, params, 1e-5);
  std::ostringstream os;
  os << "max rel error " << std::scientific << std::setprecision(2) << r.max_rel_error << " over " << r.coordinates
     << " coordinates";
  return {name, r.max_rel_error < kGradTolerance, os.str()};
}

}  // namespace verify_detail

inline std::vector<VerifyOutcome> verify_gradients() {
  using namespace verify_detail;
  std::vector<VerifyOutcome> out;
  Rng rng(20240611);
  {
    auto a = random_tensor(rng, {3, 4});
    auto b = random_tensor(rng, {4, 2});
    out.push_back(grad_outcome("grad matmul", [=] { return project(matmul(a, b), 1); }, {a, b}));
  }
  {
    auto a = random_tensor(rng, {3, 4});
    auto b = random_tensor(rng, {3, 4});
    auto row = random_tensor(rng, {1, 4});
    out.push_back(grad_outcome("grad add", [=] { return project(add(add(a, b), row), 2); }, {a, b, row}));
    out.push_back(grad_outcome("grad mul", [=] { return project(mul(mul(a, b), row), 3); }, {a, b, row}));
    out.push_back(grad_outcome("grad scale", [=] { return project(scale(a, 1.7), 4); }, {a}));
    out.push_back(grad_outcome("grad sum/mean", [=] { return add(sum(mul(a, b)), mean(a)); }, {a, b}));
  }
  {
    auto a = random_tensor(rng, {2, 3});
    auto b = random_tensor(rng, {2, 2});
    auto c = random_tensor(rng, {1, 3});
    out.push_back(grad_outcome("grad concat", [=] {
      return add(project(concat<double>({a, b}, 1), 5), project(concat<double>({a, c}, 0), 6));
    }, {a, b, c}));
    out.push_back(grad_outcome("grad slice", [=] { return add(project(slice(a, 1, 1, 3), 7), project(slice(a, 0, 1, 2), 8)); }, {a}));
    out.push_back(grad_outcome("grad transpose", [=] { return project(transpose(a), 9); }, {a}));
  }
  {
    auto a = away_from_zero(rng, {3, 4});
    out.push_back(grad_outcome("grad relu", [=] { return project(relu(a), 10); }, {a}));
    out.push_back(grad_outcome("grad sigmoid", [=] { return project(sigmoid(a), 11); }, {a}));
    out.push_back(grad_outcome("grad softmax", [=] { return add(project(softmax(a, 1), 12), project(softmax(a, 0), 13)); }, {a}));
    const std::vector<std::uint8_t> keep{1, 0, 1, 1, 1, 1, 0, 0, 0, 0, 0, 1};
    out.push_back(grad_outcome("grad masked_softmax", [=] {
      return project(masked_softmax(a, std::span<const std::uint8_t>(keep)), 14);
    }, {a}));
  }
  {
    auto x = random_tensor(rng, {3, 5});
    auto g = random_tensor(rng, {1, 5}, 0.5, 1.5);
    auto b = random_tensor(rng, {1, 5});
    out.push_back(grad_outcome("grad layer_norm", [=] { return project(layer_norm(x, g, b), 15); }, {x, g, b}));
  }
  {
    auto table = random_tensor(rng, {5, 3});
    const std::vector<std::int64_t> ids{4, 0, 4, 2};
    out.push_back(grad_outcome("grad embedding_lookup", [=] {
      return project(embedding_lookup(table, std::span<const std::int64_t>(ids)), 16);
    }, {table}));
  }
  {
    auto x = random_tensor(rng, {4, 3});
    const std::vector<std::uint8_t> mask{0, 1, 1, 1};
    out.push_back(grad_outcome("grad mean_pool", [=] { return project(mean_pool(x, std::span<const std::uint8_t>(mask)), 17); }, {x}));
  }
  {
    auto x = random_tensor(rng, {3, 4});
    out.push_back(grad_outcome("grad dropout", [=] {
      Rng r(99);
      return project(dropout(x, 0.3, &r, true), 18);
    }, {x}));
  }
  {
    auto z = random_tensor(rng, {1, 1}, -2.0, 2.0);
    out.push_back(grad_outcome("grad bce_with_logits", [=] { return add(bce_with_logits(z, 1), bce_with_logits(z, 0)); }, {z}));
  }
  {
    // Full model: L=2, N=4, three-item history, loss = BCE + alpha * balance.
    ModelConfig cfg;
    cfg.d_model = 4;
    cfg.attr_vocab = {6, 3};
    cfg.n_heads = 2;
    cfg.blocks = 2;
    cfg.groups = 4;
    cfg.max_seq_len = 5;
    cfg.ffn_hidden = 6;
    cfg.gate_hidden = 5;
    cfg.pred_hidden = {6};
    auto params = init_all_parameters<double>(cfg, 7);
    const auto view = ModelView<double>::bind(cfg, params);
    SequenceInput seq;
    seq.attr_ids = {{0, 0, 1, 4, 2}, {0, 0, 0, 2, 1}};
    seq.positions = {0, 1, 2, 3, 4};
    seq.valid = {0, 0, 1, 1, 1};
    const std::vector<std::int64_t> candidate{5, 2};
    GroupProportions f{2, 4, {0.1, 0.2, 0.3, 0.4, 0.4, 0.3, 0.2, 0.1}};
    std::vector<T> leaves;
    for (const auto& [name, e] : params) leaves.push_back(e.tensor);
    // Exact gradients of the full local loss need the gate inputs attached.
    ModelConfig attached = cfg;
    attached.gate_stop_gradient = false;
    out.push_back(grad_outcome("grad full model", [=] {
      const auto o = forward(attached, view, seq, candidate, ForwardMode{});
      return local_loss<double>({bce_with_logits(o.logit, 1)}, {balance_loss(o.gate_probs, f)}, 0.1);
    }, leaves));
    out.push_back(grad_outcome("grad full model, detached gate, recommendation loss", [=] {
      const auto o = forward(cfg, view, seq, candidate, ForwardMode{});
      return bce_with_logits(o.logit, 0);
    }, leaves));
  }
  return out;
}

inline std::vector<VerifyOutcome> verify_balance_identities() {
  std::vector<VerifyOutcome> out;
  double worst = 0.0;
  for (std::size_t n = 1; n <= 8; ++n) {
    for (std::size_t l = 1; l <= 4; ++l) {
      std::vector<Tensor<double>> probs;
      for (std::size_t b = 0; b < l; ++b)
        probs.push_back(Tensor<double>::filled({1, n}, 1.0 / static_cast<double>(n)));
      const double v = balance_loss(probs, GroupProportions::uniform(l, n)).item();
      worst = std::max(worst, std::fabs(v - static_cast<double>(l)));
    }
  }
  std::ostringstream os;
  os << "max |loss - L| = " << std::scientific << std::setprecision(2) << worst;
  out.push_back({"balance uniform identity", worst <= 1e-10, os.str()});

  // N=3: over a simplex grid the minimum sits on the vertex of the smallest f.
  const GroupProportions f{1, 3, {0.5, 0.2, 0.3}};
  double best = 1e300;
  std::vector<double> best_p;
  const int steps = 20;
  for (int i = 0; i <= steps; ++i) {
    for (int j = 0; i + j <= steps; ++j) {
      std::vector<double> p{i / double(steps), j / double(steps), (steps - i - j) / double(steps)};
      const double v = balance_loss<double>({Tensor<double>::from({1, 3}, p)}, f).item();
      if (v < best - 1e-15) {
        best = v;
        best_p = p;
      }
    }
  }
  const bool vertex = best_p == std::vector<double>{0.0, 1.0, 0.0};
  out.push_back({"balance minimizer at argmin f", vertex, "minimum " + std::to_string(best)});
  return out;
}

inline std::vector<VerifyOutcome> verify_aggregation() {
  std::vector<VerifyOutcome> out;
  auto make_set = [] {
    ParameterSet<double> s;
    s.insert("g", Tensor<double>::from({1, 1}, {0.0}), PartitionTag::global_tag());
    s.insert("q0", Tensor<double>::from({1, 1}, {5.0}), PartitionTag::group_tag(0, 0));
    s.insert("q1", Tensor<double>::from({1, 1}, {7.0}), PartitionTag::group_tag(0, 1));
    return s;
  };
  auto payload = [](std::int64_t id, std::size_t n, double d, int group) {
    UploadPayload p;
    p.client = id;
    p.samples = n;
    p.deltas["g"] = {d};
    p.deltas["q" + std::to_string(group)] = {d};
    p.assignment = {group};
    p.routed_groups = {{0, group}};
    return p;
  };
  {
    auto s = make_set();
    const auto rec = aggregate_global<double>({payload(1, 2, 3.0, 0), payload(2, 1, -3.0, 0)}, s);
    const bool ok = s.at("g").item() == 1.0 && std::fabs(rec.weight_sum() - 1.0) <= 1e-9;
    out.push_back({"aggregation weighted mean", ok, "result " + std::to_string(s.at("g").item())});
  }
  {
    std::vector<UploadPayload> ps{payload(3, 5, 0.1, 0), payload(1, 2, 0.7, 1), payload(2, 9, -0.3, 0),
                                  payload(4, 1, 1e-3, 1)};
    auto a = make_set();
    aggregate_global(ps, a);
    aggregate_group(ps, a);
    std::reverse(ps.begin(), ps.end());
    std::swap(ps[0], ps[2]);
    auto b = make_set();
    aggregate_global(ps, b);
    aggregate_group(ps, b);
    bool same = true;
    for (const char* n : {"g", "q0", "q1"}) same = same && a.at(n).item() == b.at(n).item();
    out.push_back({"aggregation permutation invariance", same, ""});
  }
  {
    auto s = make_set();
    aggregate_group<double>({payload(1, 3, 2.0, 0)}, s);
    const bool ok = s.at("q1").item() == 7.0 && s.at("q0").item() == 7.0;
    out.push_back({"aggregation stale group unchanged", ok, ""});
  }
  {
    std::vector<UploadPayload> ps{payload(1, 4, 1.0, 0), payload(2, 1, 2.0, 1), payload(3, 2, -1.0, 0)};
    auto s = make_set();
    aggregate_group(ps, s);
    // Group 0 must equal a global aggregation over its own members only.
    ParameterSet<double> oracle;
    oracle.insert("g", Tensor<double>::from({1, 1}, {5.0}), PartitionTag::global_tag());
    aggregate_global<double>({ps[0], ps[2]}, oracle);
    const bool ok = s.at("q0").item() == oracle.at("g").item() && s.at("q1").item() == 9.0;
    out.push_back({"aggregation subset oracle", ok, ""});
  }
  return out;
}

inline std::vector<VerifyOutcome> verify_privacy(std::size_t rounds = 3) {
  SyntheticSpec spec;
  spec.n_users = 12;
  spec.n_items = 16;
  spec.items_per_cluster = 4;
  spec.min_len = 8;
  spec.max_len = 12;
  spec.seed = 5;
  const auto synth = synthetic_generate(spec);
  const auto split = leave_one_out_split(synth.log);
  ModelConfig cfg;
  cfg.attr_vocab = synth.log.attr_vocab();
  const auto data = build_sequences(synth.log, split, cfg.max_seq_len);
  FederationOptions opt;
  opt.rounds = rounds;
  opt.seed = 5;
  opt.eval_every = rounds;
  opt.noise.strength = 0.1;
  Federation<float> fed(cfg, ItemCatalog::from_log(synth.log), data, opt);
  std::size_t payloads = 0, violations = 0;
  fed.set_payload_observer([&](std::size_t, const UploadPayload& p) {
    ++payloads;
    violations += private_leaks(p, cfg).size();
  });
  std::string detail;
  try {
    fed.run();
  } catch (const ContractError& e) {
    detail = e.what();
    ++violations;
  }
  return {{"privacy partition", violations == 0 && payloads > 0,
           std::to_string(payloads) + " payloads, " + std::to_string(violations) + " violations" +
               (detail.empty() ? "" : ": " + detail)}};
}

// Runs every check, printing one line per property. Returns the number of failures.
inline std::size_t run_verify(std::ostream& os) {
  std::vector<VerifyOutcome> all;
  for (auto&& group : {verify_gradients(), verify_balance_identities(), verify_aggregation(), verify_privacy()})
    all.insert(all.end(), group.begin(), group.end());
  std::size_t failures = 0;
  for (const auto& o : all) {
    os << (o.passed ? "PASS " : "FAIL ") << o.name;
    if (!o.detail.empty()) os << " (" << o.detail << ")";
    os << '\n';
    failures += o.passed ? 0 : 1;
  }
  os << (failures == 0 ? "all " + std::to_string(all.size()) + " checks passed"
                       : std::to_string(failures) + " of " + std::to_string(all.size()) + " checks failed")
     << '\n';
  return failures;
}

inline std::optional<OpKind> parse_op_kind(const std::string& s) {
  static const std::vector<std::pair<std::string, OpKind>> table{
      {"matmul", OpKind::kMatmul},       {"add", OpKind::kAdd},
      {"mul", OpKind::kMul},             {"scale", OpKind::kScale},
      {"sum", OpKind::kSum},             {"concat", OpKind::kConcat},
      {"slice", OpKind::kSlice},         {"transpose", OpKind::kTranspose},
      {"relu", OpKind::kRelu},           {"sigmoid", OpKind::kSigmoid},
      {"softmax", OpKind::kSoftmax},     {"masked_softmax", OpKind::kMaskedSoftmax},
      {"layer_norm", OpKind::kLayerNorm}, {"embedding", OpKind::kEmbedding},
      {"mean_pool", OpKind::kMeanPool},  {"dropout", OpKind::kDropout},
      {"bce", OpKind::kBce}};
  for (const auto& [name, op] : table)
    if (name == s) return op;
  return std::nullopt;
}

}  // namespace mrff
