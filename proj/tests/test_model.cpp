#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "mrff/federated.hpp"
#include "mrff/grad_check.hpp"
#include "mrff/losses.hpp"
#include "mrff/model.hpp"

using namespace mrff;
using T = Tensor<double>;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.d_model = 4;
  cfg.attr_vocab = {7, 3};
  cfg.n_heads = 2;
  cfg.blocks = 2;
  cfg.groups = 3;
  cfg.max_seq_len = 5;
  cfg.ffn_hidden = 6;
  cfg.gate_hidden = 5;
  cfg.pred_hidden = {6, 4};
  return cfg;
}

SequenceInput three_clicks() {
  SequenceInput seq;
  seq.attr_ids = {{0, 0, 1, 4, 2}, {0, 0, 0, 2, 1}};
  seq.positions = {0, 1, 2, 3, 4};
  seq.valid = {0, 0, 1, 1, 1};
  return seq;
}

// Closed form written out per term, independent of the library's formula.
std::size_t expected_total(const ModelConfig& c) {
  const std::size_t D = c.d_model * c.attr_vocab.size();
  std::size_t n = D;  // user row
  for (auto v : c.attr_vocab) n += v * c.d_model;
  n += c.max_seq_len * D;
  for (std::size_t l = 0; l < c.blocks; ++l) {
    n += 4 * (D * D + D) + 2 * D;                  // q k v o, attention norm
    n += 2 * D;                                    // ffn norm
    const std::size_t ffn = D * c.ffn_hidden + c.ffn_hidden + c.ffn_hidden * D + D;
    n += ffn;                                      // user ffn
    if (c.group_ffn) {
      n += c.groups * ffn;
      n += 2 * D * c.gate_hidden + c.gate_hidden + c.gate_hidden * c.groups + c.groups;
    }
  }
  std::size_t in = 3 * D;
  for (auto h : c.pred_hidden) {
    n += in * h + h;
    in = h;
  }
  return n + in + 1;
}

}  // namespace

TEST(ParamCount, MatchesInstantiatedTensorsPerPartition) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    ModelConfig c;
    c.d_model = 2 * (1 + rng.index(4));
    c.attr_vocab = {1 + rng.index(20), 1 + rng.index(5)};
    c.n_heads = 2;
    c.blocks = 1 + rng.index(3);
    c.groups = 1 + rng.index(5);
    c.max_seq_len = 1 + rng.index(9);
    c.ffn_hidden = 1 + rng.index(12);
    c.gate_hidden = 1 + rng.index(6);
    c.pred_hidden = {1 + rng.index(8)};
    c.group_ffn = trial % 4 != 3;
    const auto counts = count_params(c);
    const auto params = init_all_parameters<double>(c, 1);
    std::size_t priv = 0, glob = 0, grp = 0;
    for (const auto& [name, e] : params) {
      (e.tag.kind == Partition::kPrivate ? priv : e.tag.kind == Partition::kGroup ? grp : glob) += e.tensor.numel();
    }
    EXPECT_EQ(counts.private_count, priv);
    EXPECT_EQ(counts.global_count, glob);
    EXPECT_EQ(counts.group_count, grp);
    EXPECT_EQ(counts.total(), expected_total(c));
  }
}

TEST(Partition, PrivateGroupGlobalNames) {
  const auto cfg = small_config();
  const auto params = init_all_parameters<double>(cfg, 1);
  std::set<std::string> priv;
  for (const auto& n : params.names(Partition::kPrivate)) priv.insert(n);
  std::set<std::string> expected{"user.embedding"};
  for (int l = 0; l < 2; ++l)
    for (const char* p : {"w1", "b1", "w2", "b2"}) expected.insert("block" + std::to_string(l) + ".ffn_user." + p);
  EXPECT_EQ(priv, expected);
  for (const auto& n : params.names(Partition::kGroup)) {
    const auto& tag = params.tag(n);
    const std::string prefix = "block" + std::to_string(tag.block) + ".ffn_group" + std::to_string(tag.group) + ".";
    EXPECT_EQ(n.rfind(prefix, 0), 0u) << n;
  }
  EXPECT_EQ(params.names(Partition::kGroup).size(), 2u * 3u * 4u);
  EXPECT_EQ(params.tag("block1.gate.w1").kind, Partition::kGlobal);
}

TEST(Init, DeterministicPerSeedAndOwner) {
  const auto cfg = small_config();
  const auto a = init_all_parameters<double>(cfg, 9, 1);
  const auto b = init_all_parameters<double>(cfg, 9, 1);
  const auto c = init_all_parameters<double>(cfg, 9, 2);
  const auto va = a.at("user.embedding").data(), vb = b.at("user.embedding").data(), vc = c.at("user.embedding").data();
  EXPECT_TRUE(std::equal(va.begin(), va.end(), vb.begin()));
  EXPECT_FALSE(std::equal(va.begin(), va.end(), vc.begin()));
}

TEST(ModelConfig, InvalidHeadsReported) {
  auto cfg = small_config();
  cfg.n_heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Attention, EarlierRowsIgnoreLaterInputs) {
  const auto cfg = small_config();
  const auto params = init_all_parameters<double>(cfg, 2);
  const auto view = ModelView<double>::bind(cfg, params);
  Rng rng(4);
  std::vector<double> v(4 * cfg.width());
  for (auto& x : v) x = rng.uniform(-1, 1);
  const std::vector<std::uint8_t> valid(4, 1);
  const auto y1 = attention_block(cfg, view.blocks[0], T::from({4, cfg.width()}, v), valid, ForwardMode{});
  for (std::size_t i = 3 * cfg.width(); i < v.size(); ++i) v[i] += 5.0;
  const auto y2 = attention_block(cfg, view.blocks[0], T::from({4, cfg.width()}, v), valid, ForwardMode{});
  for (std::size_t i = 0; i < 3 * cfg.width(); ++i) EXPECT_DOUBLE_EQ(y1.data()[i], y2.data()[i]);
  bool last_changed = false;
  for (std::size_t i = 3 * cfg.width(); i < v.size(); ++i) last_changed |= y1.data()[i] != y2.data()[i];
  EXPECT_TRUE(last_changed);
}

TEST(Forward, PaddingContentIsIgnored) {
  const auto cfg = small_config();
  const auto params = init_all_parameters<double>(cfg, 2);
  const auto view = ModelView<double>::bind(cfg, params);
  auto seq = three_clicks();
  const auto a = forward(cfg, view, seq, {5, 2}, ForwardMode{}).logit.item();
  seq.attr_ids[0][0] = 6;
  seq.attr_ids[1][1] = 2;
  const auto b = forward(cfg, view, seq, {5, 2}, ForwardMode{}).logit.item();
  EXPECT_EQ(a, b);
}

TEST(Forward, EmptyHistoryRejected) {
  const auto cfg = small_config();
  const auto params = init_all_parameters<double>(cfg, 2);
  const auto view = ModelView<double>::bind(cfg, params);
  auto seq = three_clicks();
  seq.valid.assign(5, 0);
  EXPECT_THROW(forward(cfg, view, seq, {5, 2}, ForwardMode{}), DegenerateInputError);
}

TEST(Gate, TiesGoToLowestIndex) {
  EXPECT_EQ(argmax_lowest({0.25, 0.25, 0.25, 0.25}), 0);
  EXPECT_EQ(argmax_lowest({0.1, 0.45, 0.45}), 1);
}

TEST(Gate, ZeroWeightsGiveUniformProbabilities) {
  const auto cfg = small_config();
  auto params = init_all_parameters<double>(cfg, 2);
  for (const auto& [name, e] : params) {
    if (!names::is_gate(name)) continue;
    auto t = e.tensor;
    std::fill(t.data().begin(), t.data().end(), 0.0);
  }
  const auto view = ModelView<double>::bind(cfg, params);
  const auto out = forward(cfg, view, three_clicks(), {5, 2}, ForwardMode{});
  for (const auto& g : out.gates) {
    EXPECT_EQ(g.group, 0);
    for (double p : g.probs) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
  }
}

TEST(Gate, DetachedInputsStopBalanceGradient) {
  const auto cfg = small_config();
  auto params = init_all_parameters<double>(cfg, 2);
  const auto view = ModelView<double>::bind(cfg, params);
  const auto out = forward(cfg, view, three_clicks(), {5, 2}, ForwardMode{});
  params.zero_grad();
  backward(balance_loss(out.gate_probs, GroupProportions::uniform(2, 3)));
  for (const auto& [name, e] : params) {
    if (names::is_gate(name)) continue;
    for (double g : e.tensor.grad()) EXPECT_EQ(g, 0.0) << name;
  }
}

TEST(Ablation, NoGateNoGroupParameters) {
  auto cfg = small_config();
  cfg.group_ffn = false;
  const auto params = init_all_parameters<double>(cfg, 2);
  EXPECT_TRUE(params.names(Partition::kGroup).empty());
  for (const auto& [name, e] : params) EXPECT_FALSE(names::is_gate(name)) << name;
  const auto view = ModelView<double>::bind(cfg, params);
  const auto out = forward(cfg, view, three_clicks(), {5, 2}, ForwardMode{});
  EXPECT_TRUE(out.gate_probs.empty());
}

TEST(GroupIsolation, FrozenGateTrainsOnlySelectedGroup) {
  auto cfg = small_config();
  auto params = init_all_parameters<double>(cfg, 2);
  ItemCatalog catalog;
  catalog.attr_vocab = cfg.attr_vocab;
  for (std::int64_t i = 0; i < 7; ++i) catalog.features.push_back({i, i % 3});
  Sample s;
  s.history = {kPadItem, kPadItem, 1, 4, 2};
  s.mask = {0, 0, 1, 1, 1};
  s.candidate = 5;
  s.label = 1;
  const auto view = ModelView<double>::bind(cfg, params);
  const auto routed =
      forward(cfg, view, to_sequence_input(s, catalog), catalog.features[5], ForwardMode{}).gates;
  TrainHyper hyper;
  hyper.alpha = 0.0;
  for (const auto& [name, e] : params)
    if (names::is_gate(name)) hyper.frozen.insert(name);
  const auto before = params.deep_copy();
  Rng rng(1);
  OptimizerState<double> opt;
  const auto stats = local_train(cfg, catalog, params, {s}, GroupProportions::uniform(2, 3), hyper, rng, opt);
  ASSERT_EQ(stats.assignment.size(), 2u);
  for (std::size_t l = 0; l < 2; ++l) EXPECT_EQ(stats.assignment[l], routed[l].group);
  for (const auto& [name, e] : params) {
    const auto a = before.at(name).data();
    const auto b = e.tensor.data();
    const bool changed = !std::equal(a.begin(), a.end(), b.begin());
    if (names::is_gate(name)) {
      EXPECT_FALSE(changed) << name;
    } else if (e.tag.kind == Partition::kGroup) {
      const bool selected = e.tag.group == routed[static_cast<std::size_t>(e.tag.block)].group;
      if (!selected) EXPECT_FALSE(changed) << name;
      if (selected && name.find(".w") != std::string::npos) EXPECT_TRUE(changed) << name;
    }
  }
}

TEST(Gradients, FullModelBothGateModes) {
  auto cfg = small_config();
  const auto params = init_all_parameters<double>(cfg, 7);
  const auto view = ModelView<double>::bind(cfg, params);
  std::vector<T> leaves;
  for (const auto& [name, e] : params) leaves.push_back(e.tensor);
  const auto seq = three_clicks();
  const GroupProportions f{2, 3, {0.2, 0.3, 0.5, 0.6, 0.1, 0.3}};
  auto attached = cfg;
  attached.gate_stop_gradient = false;
  const auto r1 = grad_check([=] {
    const auto o = forward(attached, view, seq, {5, 2}, ForwardMode{});
    return local_loss<double>({bce_with_logits(o.logit, 1)}, {balance_loss(o.gate_probs, f)}, 0.5);
  }, leaves);
  EXPECT_LT(r1.max_rel_error, 1e-4);
  const auto r2 = grad_check([=] {
    const auto o = forward(cfg, view, seq, {5, 2}, ForwardMode{});
    return bce_with_logits(o.logit, 0);
  }, leaves);
  EXPECT_LT(r2.max_rel_error, 1e-4);
}
