#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mrff/errors.hpp"
#include "mrff/ops.hpp"
#include "mrff/parameters.hpp"
#include "mrff/rng.hpp"
#include "mrff/tensor.hpp"

namespace mrff {

// Architecture hyperparameters. attr_vocab[0] is the item-id vocabulary;
// further entries are per-attribute vocabularies (category, author, ...).
struct ModelConfig {
  std::size_t d_model = 8;
  std::vector<std::size_t> attr_vocab{1};
  std::size_t n_heads = 2;
  std::size_t blocks = 2;
  std::size_t groups = 4;
  std::size_t max_seq_len = 8;
  std::size_t ffn_hidden = 16;
  std::size_t gate_hidden = 16;
  std::vector<std::size_t> pred_hidden{16};
  double dropout = 0.0;
  // false removes the gating networks and group FFNs (ablation).
  bool group_ffn = true;
  // Detach the gate inputs so the balance loss trains only the gate.
  bool gate_stop_gradient = true;

  std::size_t n_attrs() const { return attr_vocab.size(); }
  std::size_t width() const { return n_attrs() * d_model; }

  // Returns the list of violated invariants; empty means valid.
  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (d_model < 1) out.push_back("d_model: must be >= 1");
    if (attr_vocab.empty()) out.push_back("attr_vocab: at least the item-id attribute is required");
    for (std::size_t m = 0; m < attr_vocab.size(); ++m)
      if (attr_vocab[m] < 1) out.push_back("attr_vocab[" + std::to_string(m) + "]: must be >= 1");
    if (n_heads < 1) out.push_back("n_heads: must be >= 1");
    else if (width() % n_heads != 0) out.push_back("n_heads: must divide d_model * n_attrs");
    if (blocks < 1) out.push_back("blocks: must be >= 1");
    if (groups < 1) out.push_back("groups: must be >= 1");
    if (max_seq_len < 1) out.push_back("max_seq_len: must be >= 1");
    if (ffn_hidden < 1) out.push_back("ffn_hidden: must be >= 1");
    if (gate_hidden < 1) out.push_back("gate_hidden: must be >= 1");
    for (std::size_t k = 0; k < pred_hidden.size(); ++k)
      if (pred_hidden[k] < 1) out.push_back("pred_hidden[" + std::to_string(k) + "]: must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) out.push_back("dropout: must be in [0, 1)");
    return out;
  }

  void validate() const {
    const auto issues = problems();
    if (issues.empty()) return;
    std::string msg = "invalid model config:";
    for (const auto& s : issues) msg += "\n  " + s;
    throw ConfigError(msg);
  }
};

// Parameter naming scheme. Blocks and groups are zero-based.
namespace names {
inline std::string user_embedding() { return "user.embedding"; }
inline std::string attr_embedding(std::size_t m) { return "item.attr" + std::to_string(m) + ".embedding"; }
inline std::string position_embedding() { return "position.embedding"; }
inline std::string block(std::size_t l) { return "block" + std::to_string(l) + "."; }
inline std::string attn(std::size_t l, const char* p) { return block(l) + "attn." + p; }
inline std::string attn_norm(std::size_t l, const char* p) { return block(l) + "attn_norm." + p; }
inline std::string gate(std::size_t l, const char* p) { return block(l) + "gate." + p; }
inline bool is_gate(const std::string& name) { return name.find(".gate.") != std::string::npos; }
inline std::string ffn_user(std::size_t l, const char* p) { return block(l) + "ffn_user." + p; }
inline std::string ffn_group(std::size_t l, std::size_t g, const char* p) {
  return block(l) + "ffn_group" + std::to_string(g) + "." + p;
}
inline std::string ffn_norm(std::size_t l, const char* p) { return block(l) + "ffn_norm." + p; }
inline std::string head_weight(std::size_t k) { return "head.w" + std::to_string(k); }
inline std::string head_bias(std::size_t k) { return "head.b" + std::to_string(k); }
}  // namespace names

enum class InitKind { kEmbedding, kXavier, kZeros, kOnes };

struct ParamSpec {
  std::string name;
  Shape shape;
  PartitionTag tag;
  InitKind init;
};

// Every parameter of the model with its shape, partition and initializer.
inline std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t D = cfg.width(), H = cfg.ffn_hidden, N = cfg.groups;
  std::vector<ParamSpec> out;
  const auto G = PartitionTag::global_tag();
  out.push_back({names::user_embedding(), {1, D}, PartitionTag::private_tag(), InitKind::kEmbedding});
  for (std::size_t m = 0; m < cfg.n_attrs(); ++m)
    out.push_back({names::attr_embedding(m), {cfg.attr_vocab[m], cfg.d_model}, G, InitKind::kEmbedding});
  out.push_back({names::position_embedding(), {cfg.max_seq_len, D}, G, InitKind::kEmbedding});
  auto add_ffn = [&](auto name_of, PartitionTag tag) {
    out.push_back({name_of("w1"), {D, H}, tag, InitKind::kXavier});
    out.push_back({name_of("b1"), {1, H}, tag, InitKind::kZeros});
    out.push_back({name_of("w2"), {H, D}, tag, InitKind::kXavier});
    out.push_back({name_of("b2"), {1, D}, tag, InitKind::kZeros});
  };
  for (std::size_t l = 0; l < cfg.blocks; ++l) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) out.push_back({names::attn(l, w), {D, D}, G, InitKind::kXavier});
    for (const char* b : {"bq", "bk", "bv", "bo"}) out.push_back({names::attn(l, b), {1, D}, G, InitKind::kZeros});
    out.push_back({names::attn_norm(l, "gain"), {1, D}, G, InitKind::kOnes});
    out.push_back({names::attn_norm(l, "bias"), {1, D}, G, InitKind::kZeros});
    if (cfg.group_ffn) {
      out.push_back({names::gate(l, "w1"), {2 * D, cfg.gate_hidden}, G, InitKind::kXavier});
      out.push_back({names::gate(l, "b1"), {1, cfg.gate_hidden}, G, InitKind::kZeros});
      out.push_back({names::gate(l, "w2"), {cfg.gate_hidden, N}, G, InitKind::kXavier});
      out.push_back({names::gate(l, "b2"), {1, N}, G, InitKind::kZeros});
    }
    add_ffn([&](const char* p) { return names::ffn_user(l, p); }, PartitionTag::private_tag());
    if (cfg.group_ffn) {
      for (std::size_t g = 0; g < N; ++g) {
        add_ffn([&](const char* p) { return names::ffn_group(l, g, p); },
                PartitionTag::group_tag(static_cast<int>(l), static_cast<int>(g)));
      }
    }
    out.push_back({names::ffn_norm(l, "gain"), {1, D}, G, InitKind::kOnes});
    out.push_back({names::ffn_norm(l, "bias"), {1, D}, G, InitKind::kZeros});
  }
  std::size_t in = 3 * D;
  for (std::size_t k = 0; k <= cfg.pred_hidden.size(); ++k) {
    const std::size_t outw = k < cfg.pred_hidden.size() ? cfg.pred_hidden[k] : 1;
    out.push_back({names::head_weight(k), {in, outw}, G, InitKind::kXavier});
    out.push_back({names::head_bias(k), {1, outw}, G, InitKind::kZeros});
    in = outw;
  }
  return out;
}

struct ParamCounts {
  std::size_t private_count = 0;
  std::size_t global_count = 0;
  std::size_t group_count = 0;
  std::size_t total() const { return private_count + global_count + group_count; }
};

// Closed form (D = n_attrs * d_model, H = ffn_hidden, Hg = gate_hidden):
//   ffn     = 2*D*H + H + D
//   PRIVATE = D + L*ffn                         (user row + user FFN per block)
//   GROUP   = L*N*ffn                           (0 without group FFNs)
//   GLOBAL  = sum_m V_m*d_model + S*D
//           + L*(4*D*D + 4*D + 4*D + gate)      (attention, two layer norms)
//           + sum_k (in_k*out_k + out_k)        (head dims 3D, pred_hidden..., 1)
//   gate    = 2*D*Hg + Hg + Hg*N + N            (0 without group FFNs)
inline ParamCounts count_params(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t D = cfg.width(), H = cfg.ffn_hidden, Hg = cfg.gate_hidden;
  const std::size_t L = cfg.blocks, N = cfg.groups;
  const std::size_t ffn = 2 * D * H + H + D;
  const std::size_t gate = cfg.group_ffn ? 2 * D * Hg + Hg + Hg * N + N : 0;
  ParamCounts c;
  c.private_count = D + L * ffn;
  c.group_count = cfg.group_ffn ? L * N * ffn : 0;
  std::size_t global = cfg.max_seq_len * D;
  for (std::size_t v : cfg.attr_vocab) global += v * cfg.d_model;
  global += L * (4 * D * D + 4 * D + 4 * D + gate);
  std::size_t in = 3 * D;
  for (std::size_t k = 0; k <= cfg.pred_hidden.size(); ++k) {
    const std::size_t outw = k < cfg.pred_hidden.size() ? cfg.pred_hidden[k] : 1;
    global += in * outw + outw;
    in = outw;
  }
  c.global_count = global;
  return c;
}

inline std::uint64_t stable_hash(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename Real>
Tensor<Real> init_parameter(const ParamSpec& spec, Rng& rng) {
  std::vector<Real> data(shape_numel(spec.shape));
  switch (spec.init) {
    case InitKind::kEmbedding:
      for (auto& v : data) v = static_cast<Real>(rng.normal(0.0, 0.1));
      break;
    case InitKind::kXavier: {
      const double bound = std::sqrt(6.0 / static_cast<double>(spec.shape[0] + spec.shape[1]));
      for (auto& v : data) v = static_cast<Real>(rng.uniform(-bound, bound));
      break;
    }
    case InitKind::kZeros:
      break;
    case InitKind::kOnes:
      std::fill(data.begin(), data.end(), Real(1));
      break;
  }
  return Tensor<Real>::from(spec.shape, std::move(data), true);
}

// Initializes the parameters whose partition passes `keep`. Each tensor draws
// from its own stream keyed by (seed, name, owner) so adding or removing other
// parameters never changes it; `owner` distinguishes clients' private copies.
template <typename Real>
ParameterSet<Real> init_parameters(const ModelConfig& cfg, std::uint64_t seed, std::uint64_t owner,
                                   const std::function<bool(const PartitionTag&)>& keep) {
  ParameterSet<Real> params;
  for (const auto& spec : parameter_layout(cfg)) {
    if (!keep(spec.tag)) continue;
    Rng rng = Rng::derive(seed, {stable_hash(spec.name), owner});
    params.insert(spec.name, init_parameter<Real>(spec, rng), spec.tag);
  }
  return params;
}

template <typename Real>
ParameterSet<Real> init_all_parameters(const ModelConfig& cfg, std::uint64_t seed, std::uint64_t owner = 0) {
  return init_parameters<Real>(cfg, seed, owner, [](const PartitionTag&) { return true; });
}

// ---------------------------------------------------------------------------
// Forward pass

struct GateDecision {
  std::vector<double> probs;
  int group = 0;
};

// Argmax with ties broken toward the lowest index.
inline int argmax_lowest(const std::vector<double>& v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

template <typename Real>
struct FfnWeights {
  Tensor<Real> w1, b1, w2, b2;
};

template <typename Real>
struct BlockWeights {
  Tensor<Real> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<Real> attn_gain, attn_bias;
  Tensor<Real> gate_w1, gate_b1, gate_w2, gate_b2;
  FfnWeights<Real> user_ffn;
  std::vector<FfnWeights<Real>> group_ffn;
  Tensor<Real> ffn_gain, ffn_bias;
};

// Parameter handles resolved once from a ParameterSet, so the hot path does
// no name lookups.
template <typename Real>
struct ModelView {
  std::vector<Tensor<Real>> attr_tables;
  Tensor<Real> position;
  Tensor<Real> user;
  std::vector<BlockWeights<Real>> blocks;
  std::vector<Tensor<Real>> head_w, head_b;

  static ModelView bind(const ModelConfig& cfg, const ParameterSet<Real>& p) {
    ModelView v;
    for (std::size_t m = 0; m < cfg.n_attrs(); ++m) v.attr_tables.push_back(p.at(names::attr_embedding(m)));
    v.position = p.at(names::position_embedding());
    v.user = p.at(names::user_embedding());
    auto ffn = [&](auto name_of) {
      return FfnWeights<Real>{p.at(name_of("w1")), p.at(name_of("b1")), p.at(name_of("w2")), p.at(name_of("b2"))};
    };
    for (std::size_t l = 0; l < cfg.blocks; ++l) {
      BlockWeights<Real> b;
      b.wq = p.at(names::attn(l, "wq"));
      b.bq = p.at(names::attn(l, "bq"));
      b.wk = p.at(names::attn(l, "wk"));
      b.bk = p.at(names::attn(l, "bk"));
      b.wv = p.at(names::attn(l, "wv"));
      b.bv = p.at(names::attn(l, "bv"));
      b.wo = p.at(names::attn(l, "wo"));
      b.bo = p.at(names::attn(l, "bo"));
      b.attn_gain = p.at(names::attn_norm(l, "gain"));
      b.attn_bias = p.at(names::attn_norm(l, "bias"));
      if (cfg.group_ffn) {
        b.gate_w1 = p.at(names::gate(l, "w1"));
        b.gate_b1 = p.at(names::gate(l, "b1"));
        b.gate_w2 = p.at(names::gate(l, "w2"));
        b.gate_b2 = p.at(names::gate(l, "b2"));
        for (std::size_t g = 0; g < cfg.groups; ++g)
          b.group_ffn.push_back(ffn([&](const char* s) { return names::ffn_group(l, g, s); }));
      }
      b.user_ffn = ffn([&](const char* s) { return names::ffn_user(l, s); });
      b.ffn_gain = p.at(names::ffn_norm(l, "gain"));
      b.ffn_bias = p.at(names::ffn_norm(l, "bias"));
      v.blocks.push_back(std::move(b));
    }
    for (std::size_t k = 0; k <= cfg.pred_hidden.size(); ++k) {
      v.head_w.push_back(p.at(names::head_weight(k)));
      v.head_b.push_back(p.at(names::head_bias(k)));
    }
    return v;
  }
};

// A (possibly left-padded) interaction history. attr_ids[m][t] is attribute m
// of the item at position t; positions[t] indexes the positional table.
struct SequenceInput {
  std::vector<std::vector<std::int64_t>> attr_ids;
  std::vector<std::int64_t> positions;
  std::vector<std::uint8_t> valid;

  std::size_t length() const { return positions.size(); }
};

struct ForwardMode {
  bool training = false;
  Rng* rng = nullptr;
};

template <typename Real>
Tensor<Real> embed_sequence(const ModelConfig& cfg, const ModelView<Real>& w, const SequenceInput& seq) {
  const std::size_t T = seq.length();
  if (T > cfg.max_seq_len) {
    throw ContractError("sequence of length " + std::to_string(T) + " exceeds max_seq_len " +
                        std::to_string(cfg.max_seq_len) + "; truncate before embedding");
  }
  if (seq.attr_ids.size() != cfg.n_attrs()) {
    throw DimensionError("sequence carries " + std::to_string(seq.attr_ids.size()) +
                         " attributes, model expects " + std::to_string(cfg.n_attrs()));
  }
  std::vector<Tensor<Real>> parts;
  parts.reserve(cfg.n_attrs());
  for (std::size_t m = 0; m < cfg.n_attrs(); ++m) {
    if (seq.attr_ids[m].size() != T) throw DimensionError("attribute id list length differs from sequence length");
    parts.push_back(embedding_lookup(w.attr_tables[m], std::span<const std::int64_t>(seq.attr_ids[m])));
  }
  Tensor<Real> x = parts.size() == 1 ? parts.front() : concat(parts, 1);
  return add(x, embedding_lookup(w.position, std::span<const std::int64_t>(seq.positions)));
}

template <typename Real>
Tensor<Real> embed_item(const ModelConfig& cfg, const ModelView<Real>& w, const std::vector<std::int64_t>& attrs) {
  if (attrs.size() != cfg.n_attrs()) {
    throw DimensionError("item carries " + std::to_string(attrs.size()) + " attributes, model expects " +
                         std::to_string(cfg.n_attrs()));
  }
  std::vector<Tensor<Real>> parts;
  for (std::size_t m = 0; m < cfg.n_attrs(); ++m)
    parts.push_back(embedding_lookup(w.attr_tables[m], std::span<const std::int64_t>(&attrs[m], 1)));
  return parts.size() == 1 ? parts.front() : concat(parts, 1);
}

// Multi-head causal self-attention with key padding mask, residual and
// post-norm. Query rows at padded positions produce bias-only attention.
template <typename Real>
Tensor<Real> attention_block(const ModelConfig& cfg, const BlockWeights<Real>& b, const Tensor<Real>& x,
                             std::span<const std::uint8_t> valid, const ForwardMode& mode) {
  const std::size_t T = x.dim(0), D = x.dim(1);
  if (D != cfg.width() || valid.size() != T) {
    throw DimensionError("attention_block: input " + shape_str(x.shape()) + " with mask of length " +
                         std::to_string(valid.size()));
  }
  std::vector<std::uint8_t> keep(T * T, 0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t s = 0; s <= t; ++s) keep[t * T + s] = valid[s];

  const auto q = add(matmul(x, b.wq), b.bq);
  const auto k = add(matmul(x, b.wk), b.bk);
  const auto v = add(matmul(x, b.wv), b.bv);
  const std::size_t dh = D / cfg.n_heads;
  const Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(dh));
  std::vector<Tensor<Real>> heads;
  heads.reserve(cfg.n_heads);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const auto qh = cfg.n_heads == 1 ? q : slice(q, 1, h * dh, (h + 1) * dh);
    const auto kh = cfg.n_heads == 1 ? k : slice(k, 1, h * dh, (h + 1) * dh);
    const auto vh = cfg.n_heads == 1 ? v : slice(v, 1, h * dh, (h + 1) * dh);
    const auto scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    heads.push_back(matmul(masked_softmax(scores, std::span<const std::uint8_t>(keep)), vh));
  }
  const auto attn = heads.size() == 1 ? heads.front() : concat(heads, 1);
  auto o = add(matmul(attn, b.wo), b.bo);
  o = dropout(o, cfg.dropout, mode.rng, mode.training);
  return layer_norm(add(x, o), b.attn_gain, b.attn_bias);
}

template <typename Real>
struct GateOutput {
  Tensor<Real> probs;  // [1, N], differentiable
  GateDecision decision;
};

// Masked mean-pool of the attention output, concatenated with the user
// embedding, through a 2-layer MLP and softmax. With gate_stop_gradient the
// inputs are detached: the balance loss, the gate's only training signal,
// then moves the router and not the shared representation it reads.
template <typename Real>
GateOutput<Real> group_gate(const ModelConfig& cfg, const BlockWeights<Real>& b, const Tensor<Real>& attn_out,
                            std::span<const std::uint8_t> valid, const Tensor<Real>& user_emb) {
  if (!cfg.group_ffn) throw ContractError("group_gate on a model without group FFNs");
  const bool stop = cfg.gate_stop_gradient;
  const auto pooled = mean_pool(stop ? attn_out.detach() : attn_out, valid);
  const auto input = concat<Real>({pooled, stop ? user_emb.detach() : user_emb}, 1);
  const auto hidden = relu(add(matmul(input, b.gate_w1), b.gate_b1));
  const auto logits = add(matmul(hidden, b.gate_w2), b.gate_b2);
  GateOutput<Real> out;
  out.probs = softmax(logits, 1);
  out.decision.probs.assign(out.probs.data().begin(), out.probs.data().end());
  out.decision.group = argmax_lowest(out.decision.probs);
  return out;
}

template <typename Real>
Tensor<Real> feed_forward(const Tensor<Real>& x, const FfnWeights<Real>& f) {
  return add(matmul(relu(add(matmul(x, f.w1), f.b1)), f.w2), f.b2);
}

// LayerNorm(attn_out + FFN_u(attn_out) + FFN_g(attn_out)) with the hard-selected
// group FFN. Without group FFNs the group term is absent.
template <typename Real>
Tensor<Real> dual_ffn_block(const ModelConfig& cfg, const BlockWeights<Real>& b, const Tensor<Real>& attn_out,
                            int group, const ForwardMode& mode) {
  Tensor<Real> inner = feed_forward(attn_out, b.user_ffn);
  if (cfg.group_ffn) {
    if (group < 0 || static_cast<std::size_t>(group) >= b.group_ffn.size()) {
      throw ContractError("group index " + std::to_string(group) + " outside [0, " +
                          std::to_string(b.group_ffn.size()) + ")");
    }
    inner = add(inner, feed_forward(attn_out, b.group_ffn[static_cast<std::size_t>(group)]));
  }
  inner = dropout(inner, cfg.dropout, mode.rng, mode.training);
  return layer_norm(add(attn_out, inner), b.ffn_gain, b.ffn_bias);
}

template <typename Real>
struct ForwardOutput {
  Tensor<Real> logit;                    // [1, 1], pre-sigmoid
  std::vector<Tensor<Real>> gate_probs;  // per block, [1, N]
  std::vector<GateDecision> gates;       // per block
};

// Scores one candidate for one user history. Padded positions are dropped up
// front; the causal mask then covers the remaining (position-preserving) rows.
template <typename Real>
ForwardOutput<Real> forward(const ModelConfig& cfg, const ModelView<Real>& w, const SequenceInput& seq,
                            const std::vector<std::int64_t>& candidate, const ForwardMode& mode) {
  SequenceInput live;
  live.attr_ids.resize(seq.attr_ids.size());
  for (std::size_t t = 0; t < seq.length(); ++t) {
    if (seq.valid.empty() || seq.valid[t]) {
      for (std::size_t m = 0; m < seq.attr_ids.size(); ++m) live.attr_ids[m].push_back(seq.attr_ids[m][t]);
      live.positions.push_back(seq.positions[t]);
    }
  }
  if (live.positions.empty()) throw DegenerateInputError("forward: sequence has no valid positions");
  live.valid.assign(live.positions.size(), 1);
  const std::span<const std::uint8_t> valid(live.valid);

  ForwardOutput<Real> out;
  Tensor<Real> x = dropout(embed_sequence(cfg, w, live), cfg.dropout, mode.rng, mode.training);
  for (std::size_t l = 0; l < cfg.blocks; ++l) {
    const auto& b = w.blocks[l];
    const auto a = attention_block(cfg, b, x, valid, mode);
    int group = 0;
    if (cfg.group_ffn) {
      auto gate = group_gate(cfg, b, a, valid, w.user);
      group = gate.decision.group;
      out.gate_probs.push_back(std::move(gate.probs));
      out.gates.push_back(std::move(gate.decision));
    }
    x = dual_ffn_block(cfg, b, a, group, mode);
  }
  const std::size_t T = x.dim(0);
  const auto last = slice(x, 0, T - 1, T);
  Tensor<Real> z = concat<Real>({last, w.user, embed_item(cfg, w, candidate)}, 1);
  for (std::size_t k = 0; k < w.head_w.size(); ++k) {
    z = add(matmul(z, w.head_w[k]), w.head_b[k]);
    if (k + 1 < w.head_w.size()) z = relu(z);
  }
  out.logit = z;
  return out;
}

}  // namespace mrff
