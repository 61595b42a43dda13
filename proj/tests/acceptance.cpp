// Acceptance run: one PASS/FAIL line per property, nonzero exit if any fails.
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mrff/experiment.hpp"
#include "mrff/verify.hpp"
#include "support.hpp"

using namespace mrff;
namespace fs = std::filesystem;

namespace {

struct Line {
  int id;
  std::string name;
  bool passed;
  std::string detail;
};

std::vector<Line> lines;

void report(int id, const std::string& name, bool passed, const std::string& detail) {
  lines.push_back({id, name, passed, detail});
  std::printf("%s [%d] %s: %s\n", passed ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

std::string join(const std::vector<double>& v, const char* f = "%.4f") {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : " ") + fmt(f, x);
  return s;
}

void gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto outcomes = verify_gradients();
  const double secs = seconds_since(t0);
  std::size_t failed = 0;
  std::string worst;
  for (const auto& o : outcomes) {
    if (!o.passed) {
      ++failed;
      worst += " [" + o.name + ": " + o.detail + "]";
    }
  }
  report(1, "finite-difference gradient suite", failed == 0 && secs < 120.0,
         std::to_string(outcomes.size() - failed) + "/" + std::to_string(outcomes.size()) + " checks below 1e-4 in " +
             fmt("%.1fs", secs) + worst);
}

void balance_identity() {
  double worst = 0;
  for (std::size_t n = 1; n <= 8; ++n) {
    for (std::size_t l = 1; l <= 4; ++l) {
      std::vector<Tensor<double>> p(l, Tensor<double>::filled({1, n}, 1.0 / static_cast<double>(n)));
      worst = std::max(worst, std::fabs(balance_loss(p, GroupProportions::uniform(l, n)).item() - double(l)));
    }
  }
  report(2, "balance loss under uniform routing equals L", worst <= 1e-10, "max deviation " + fmt("%.2e", worst));
}

struct RunResult {
  double max_share = 0;
  double test_auc = 0;
};

RunResult synthetic_run(std::uint64_t seed, double alpha, bool group_ffn) {
  auto cfg = load_config(fs::path(MRFF_CONFIG_DIR) / "synthetic.json");
  RunOverrides o;
  o.seed = seed;
  apply_overrides(cfg, o);
  cfg.federation.train.alpha = alpha;
  cfg.model.group_ffn = group_ffn;
  auto data = prepare_data(cfg);
  Federation<float> fed(data.model, data.catalog, data.sequences, cfg.federation);
  const auto& reports = fed.run();
  return {reports.back().shares.max_share(), reports.back().test.auc};
}

void routing_and_ablation() {
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<double> share_bal, share_free, auc_mrff, auc_abl;
  const auto t0 = std::chrono::steady_clock::now();
  for (auto s : seeds) {
    const auto r = synthetic_run(s, 0.1, true);
    share_bal.push_back(r.max_share);
    auc_mrff.push_back(r.test_auc);
  }
  for (auto s : seeds) share_free.push_back(synthetic_run(s, 0.0, true).max_share);
  const double secs = seconds_since(t0);
  const double mb = median(share_bal), mf = median(share_free);
  report(3, "balanced routing (alpha 0.1) median max group share <= 0.40",
         mb <= 0.40 && secs <= 600.0, fmt("median %.3f", mb) + " over {" + join(share_bal, "%.3f") + "}");
  report(3, "unbalanced routing (alpha 0) median max group share >= 0.50", mf >= 0.50 && secs <= 600.0,
         fmt("median %.3f", mf) + " over {" + join(share_free, "%.3f") + "}, 10 runs in " + fmt("%.0fs", secs));

  for (auto s : seeds) auc_abl.push_back(synthetic_run(s, 0.1, false).test_auc);
  std::vector<double> gaps;
  for (std::size_t k = 0; k < seeds.size(); ++k) gaps.push_back(auc_mrff[k] - auc_abl[k]);
  const double g = median(gaps);
  report(4, "group FFN beats ablation by >= 0.005 test AUC", g >= 0.005,
         fmt("median paired gain %.4f", g) + " {" + join(gaps) + "}; MRFF {" + join(auc_mrff) + "} ablation {" +
             join(auc_abl) + "}");
}

FederationOptions small_options(std::size_t rounds, std::uint64_t seed) {
  FederationOptions o;
  o.rounds = rounds;
  o.seed = seed;
  o.noise.seed = seed;
  o.eval_every = 1000;
  return o;
}

void federation_identities() {
  using mrff::testing::tiny_world;
  using mrff::testing::values_of;
  {
    auto w = tiny_world(4);
    std::vector<UserSequences> one{w.data[1]};
    const std::uint64_t seed = 21;
    const std::size_t rounds = 5;
    Federation<float> fed(w.model, w.catalog, one, small_options(rounds, seed));
    fed.run();
    auto params = init_parameters<float>(w.model, seed, 0, [](const PartitionTag& t) { return t.kind != Partition::kPrivate; });
    params.merge_shared(init_parameters<float>(w.model, seed, static_cast<std::uint64_t>(one[0].user) + 1,
                                               [](const PartitionTag& t) { return t.kind == Partition::kPrivate; }));
    std::vector<Sample> train;
    for (const auto& s : one[0].train)
      if (s.has_history()) train.push_back(s);
    auto f = GroupProportions::uniform(w.model.blocks, w.model.groups);
    OptimizerState<float> opt;
    for (std::size_t r = 1; r <= rounds; ++r) {
      Rng rng = Rng::derive(seed, {streams::kTrain, r, static_cast<std::uint64_t>(one[0].user)});
      const auto stats = local_train(w.model, w.catalog, params, train, f, fed.options().train, rng, opt);
      f.values.assign(f.values.size(), 0.0);
      for (std::size_t l = 0; l < w.model.blocks; ++l) f.at(l, static_cast<std::size_t>(stats.assignment[l])) = 1.0;
    }
    const auto view = fed.client_view(fed.clients()[0]);
    std::size_t differing = 0;
    for (const auto& [name, e] : params) {
      const auto a = e.tensor.data();
      const auto b = view.at(name).data();
      if (!std::equal(a.begin(), a.end(), b.begin())) ++differing;
    }
    report(5, "single client with full participation equals standalone training", differing == 0,
           std::to_string(params.size() - differing) + "/" + std::to_string(params.size()) + " tensors bit-identical");
  }
  {
    auto w = tiny_world(12);
    auto with = small_options(4, 8);
    auto without = with;
    without.noise_stage = false;
    Federation<float> a(w.model, w.catalog, w.data, with), b(w.model, w.catalog, w.data, without);
    a.run();
    b.run();
    const bool same = values_of(a.server().shared) == values_of(b.server().shared) && a.server().f == b.server().f;
    report(5, "noise strength 0 equals the noiseless path", same, same ? "bit-identical" : "differs");
  }
  {
    auto w = tiny_world(12);
    Federation<double> fed(w.model, w.catalog, w.data, small_options(1, 3));
    std::vector<UploadPayload> payloads;
    for (auto& c : fed.clients()) {
      auto r = client_round(w.model, w.catalog, c, fed.server().shared, fed.server().f, fed.options().train, 3, 1);
      if (auto* p = std::get_if<UploadPayload>(&r)) payloads.push_back(*p);
    }
    auto reference = fed.server().shared.deep_copy();
    aggregate_global(payloads, reference);
    aggregate_group(payloads, reference);
    const auto ref = values_of(reference);
    Rng rng(12);
    int mismatches = 0;
    for (int trial = 0; trial < 10; ++trial) {
      auto q = payloads;
      rng.shuffle(std::span<UploadPayload>(q));
      auto s = fed.server().shared.deep_copy();
      aggregate_global(q, s);
      aggregate_group(q, s);
      mismatches += values_of(s) == ref ? 0 : 1;
    }
    report(5, "aggregation invariant under payload permutation", mismatches == 0,
           std::to_string(10 - mismatches) + "/10 shuffles bit-identical over " + std::to_string(payloads.size()) +
               " payloads");
  }
}

void privacy() {
  auto w = mrff::testing::tiny_world(10);
  auto opt = small_options(50, 6);
  opt.noise.strength = 0.01;
  Federation<float> fed(w.model, w.catalog, w.data, opt);
  std::map<std::size_t, std::size_t> leaks_per_round, payloads_per_round;
  fed.set_payload_observer([&](std::size_t round, const UploadPayload& p) {
    ++payloads_per_round[round];
    for (const auto& [name, d] : p.deltas) {
      const bool priv = name == "user.embedding" || name.find(".ffn_user.") != std::string::npos;
      leaks_per_round[round] += priv ? 1 : 0;
    }
  });
  fed.run();
  std::size_t bad_rounds = 0, payloads = 0;
  for (std::size_t r = 1; r <= 50; ++r) {
    payloads += payloads_per_round[r];
    if (leaks_per_round[r] != 0 || payloads_per_round[r] == 0) ++bad_rounds;
  }
  report(6, "no PRIVATE parameter in any payload over 50 rounds", bad_rounds == 0,
         std::to_string(payloads) + " payloads checked, " + std::to_string(bad_rounds) + " rounds with leaks");
}

void noise_moments() {
  UploadPayload p;
  p.deltas["x"] = std::vector<double>(1000000, 0.0);
  const auto q = add_dp_noise(p, NoiseConfig{0.3, 2024}, 1);
  const auto& v = q.deltas.at("x");
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double var = 0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  const double target = 2 * 0.3 * 0.3;
  report(7, "Laplace noise moments at strength 0.3", std::fabs(mean) <= 0.002 && std::fabs(var / target - 1) <= 0.05,
         fmt("mean %.5f", mean) + fmt(", variance %.5f", var) + fmt(" (target %.3f)", target));
}

std::size_t closed_form_total(const ModelConfig& c) {
  const std::size_t D = c.d_model * c.attr_vocab.size(), H = c.ffn_hidden, G = c.gate_hidden, N = c.groups;
  std::size_t n = D + c.max_seq_len * D;
  for (auto v : c.attr_vocab) n += v * c.d_model;
  const std::size_t ffn = 2 * D * H + H + D;
  n += c.blocks * (4 * D * D + 4 * D + 4 * D + ffn);
  if (c.group_ffn) n += c.blocks * (N * ffn + 2 * D * G + G + G * N + N);
  std::size_t in = 3 * D;
  for (auto h : c.pred_hidden) {
    n += in * h + h;
    in = h;
  }
  return n + in + 1;
}

void parameter_count() {
  Rng rng(77);
  int matches = 0;
  for (int k = 0; k < 10; ++k) {
    ModelConfig c;
    c.d_model = 4 * (1 + rng.index(4));
    c.attr_vocab = {2 + rng.index(100), 1 + rng.index(10)};
    c.n_heads = 4;
    c.blocks = 1 + rng.index(3);
    c.groups = 1 + rng.index(6);
    c.max_seq_len = 1 + rng.index(20);
    c.ffn_hidden = 1 + rng.index(40);
    c.gate_hidden = 1 + rng.index(20);
    c.pred_hidden = {1 + rng.index(30), 1 + rng.index(10)};
    c.group_ffn = k != 7;
    const auto counted = count_params(c).total();
    const auto instantiated = init_all_parameters<float>(c, 1).scalar_count();
    matches += counted == closed_form_total(c) && counted == instantiated ? 1 : 0;
  }
  report(8, "count_params matches closed form on 10 random configs", matches == 10, std::to_string(matches) + "/10");
  const auto cfg = load_config(fs::path(MRFF_CONFIG_DIR) / "sixty_k.json");
  const auto data = prepare_data(cfg);
  const auto counts = count_params(data.model);
  report(8, "configs/sixty_k.json has 50k-70k parameters", counts.total() >= 50000 && counts.total() <= 70000,
         "total " + std::to_string(counts.total()) + " (private " + std::to_string(counts.private_count) + ", global " +
             std::to_string(counts.global_count) + ", group " + std::to_string(counts.group_count) + ")");
}

void determinism() {
  mrff::testing::TempDir dir("accept");
  auto cfg = load_config(fs::path(MRFF_CONFIG_DIR) / "synthetic.json");
  cfg.federation.rounds = 5;
  cfg.federation.eval_every = 1;
  cfg.synthetic->n_users = 40;
  std::ostringstream log;
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  cfg.output = dir.path() / "a";
  const int ca = run_experiment(cfg, log);
  cfg.output = dir.path() / "b";
  const int cb = run_experiment(cfg, log);
  const auto a = slurp(dir.path() / "a" / "metrics.csv");
  const auto b = slurp(dir.path() / "b" / "metrics.csv");
  report(9, "identical config and seed give byte-identical metrics", ca == 0 && cb == 0 && !a.empty() && a == b,
         std::to_string(a.size()) + " bytes, " + (a == b ? "identical" : "different"));
}

}  // namespace

int main() {
  gradient_suite();
  balance_identity();
  federation_identities();
  privacy();
  noise_moments();
  parameter_count();
  determinism();
  routing_and_ablation();
  std::size_t failed = 0;
  for (const auto& l : lines) failed += l.passed ? 0 : 1;
  std::printf("%zu of %zu acceptance checks passed\n", lines.size() - failed, lines.size());
  return failed == 0 ? 0 : 1;
}
