#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "blockrank/common.hpp"
#include "blockrank/layout.hpp"

namespace blockrank {

enum class AttentionMode { blockwise, dense_causal };

std::string to_string(AttentionMode mode);
AttentionMode attention_mode_from_string(std::string_view s);

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 2;
  int d_model = 64;
  int vocab_size = 0;
  int mlp_hidden = 128;
  double rotary_base = 10000.0;
  int max_position = 16384;
  double norm_eps = 1e-6;
  AttentionMode attention_mode = AttentionMode::blockwise;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Row-vector convention: y = x * W, W is (in, out). Gains are 1 x d.
template <typename T>
struct LayerParams {
  Mat<T> attn_norm, wq, wk, wv, wo;
  Mat<T> mlp_norm, w_gate, w_up, w_down;
};

template <typename T>
struct Parameters {
  Mat<T> tok_emb;  // vocab x d
  std::vector<LayerParams<T>> layers;
  Mat<T> final_norm;
  Mat<T> lm_head;  // d x vocab, untied

  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  Parameters zeros_like() const {
    Parameters out = *this;
    out.for_each([](const std::string&, Mat<T>& m) { m.setZero(); });
    return out;
  }

  template <typename U>
  Parameters<U> cast() const {
    Parameters<U> out;
    out.tok_emb = tok_emb.template cast<U>();
    for (const auto& l : layers) {
      out.layers.push_back({l.attn_norm.template cast<U>(), l.wq.template cast<U>(), l.wk.template cast<U>(),
                            l.wv.template cast<U>(), l.wo.template cast<U>(), l.mlp_norm.template cast<U>(),
                            l.w_gate.template cast<U>(), l.w_up.template cast<U>(), l.w_down.template cast<U>()});
    }
    out.final_norm = final_norm.template cast<U>();
    out.lm_head = lm_head.template cast<U>();
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Mat<T>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    f(std::string("tok_emb"), self.tok_emb);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      const std::string p = "layers." + std::to_string(i) + ".";
      f(p + "attn_norm", l.attn_norm);
      f(p + "wq", l.wq);
      f(p + "wk", l.wk);
      f(p + "wv", l.wv);
      f(p + "wo", l.wo);
      f(p + "mlp_norm", l.mlp_norm);
      f(p + "w_gate", l.w_gate);
      f(p + "w_up", l.w_up);
      f(p + "w_down", l.w_down);
    }
    f(std::string("final_norm"), self.final_norm);
    f(std::string("lm_head"), self.lm_head);
  }
};

// Deterministic per seed. Projections ~ N(0, 1/fan_in), embeddings ~ N(0, 1),
// normalization gains exactly 1. Values are drawn in double, so the float and
// double parameter sets agree up to rounding.
template <typename T>
Parameters<T> init_parameters(const ModelConfig& cfg, std::uint64_t seed);

// One rectangle of attention scores: rows [row_begin, row_begin+rows) against
// the concatenation of `keys`. Keys are additionally restricted to valid
// tokens at or before the row (global causality).
struct KeySpan {
  int begin;
  int len;
};

struct ScoreBlock {
  int row_begin;
  int rows;
  std::vector<KeySpan> keys;
  int key_count() const;
};

// Blockwise: one block per chunk (instruction: itself; document k: itself then
// the instruction; query: itself, the instruction, then every document).
// Dense causal: a single block covering the whole sequence.
std::vector<ScoreBlock> attention_plan(const ChunkLayout& layout, AttentionMode mode);

// Counts computed score entries, per layer and head.
struct AttentionCounter {
  std::int64_t scored_pairs = 0;
  std::int64_t head_layer_calls = 0;
};

// Multi-head attention over post-rotary q, k and values v (all tokens x d).
// Probabilities per (block, head) are appended to `probs` when given.
template <typename T>
Mat<T> block_attention_layer(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, const ChunkLayout& layout,
                             int n_heads, AttentionMode mode = AttentionMode::blockwise,
                             AttentionCounter* counter = nullptr, std::vector<Mat<T>>* probs = nullptr);

// Additive mask (0 permitted, -1e9 blocked) that spells out the blockwise
// scopes over the full concatenated sequence.
template <typename T>
Mat<T> blockwise_attention_mask(const ChunkLayout& layout);

// Reference implementation: dense attention with the explicit blockwise mask.
// Test-only; quadratic in sequence length.
template <typename T>
Mat<T> dense_masked_attention_oracle(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, const ChunkLayout& layout,
                                     int n_heads);

template <typename T>
struct QKCache {
  Mat<T> q;  // post-rotary, tokens x d
  Mat<T> k;
};

struct TraceOptions {
  // Number of blocks to run; the model depth when unset.
  std::optional<int> stop_layer;
  bool retain_hidden = false;
  // Head-averaged attention maps (tokens x tokens) per executed layer.
  bool retain_attention = false;
  // Layers whose post-rotary Q/K are kept. Layer == stop_layer is allowed: only
  // its normalization and Q/K projections are evaluated.
  std::vector<int> cache_qk_layers;
  bool cache_qk_all = false;
  AttentionCounter* counter = nullptr;
};

template <typename T>
struct ForwardTrace {
  int layers_executed = 0;
  std::vector<Mat<T>> hidden;  // hidden[l] is the input to block l
  std::map<int, QKCache<T>> qk;
  std::vector<Mat<T>> attention;
  std::optional<Mat<T>> logits;  // query-chunk rows x vocab, full depth only
};

template <typename T>
struct LayerTape {
  bool full = true;
  Mat<T> x, a, q, k, v, attn, h1, b, gate, up, act;
  std::vector<T> inv_rms_a, inv_rms_b;
  std::vector<Mat<T>> probs;
};

// Activations retained for backward.
template <typename T>
struct ForwardTape {
  std::vector<LayerTape<T>> layers;
  std::vector<ScoreBlock> plan;
  Mat<T> cos, sin;  // tokens x head_dim/2
  Mat<T> x_final, f_query;
  std::vector<T> inv_rms_f;
};

template <typename T>
ForwardTrace<T> forward(const Parameters<T>& params, const ChunkLayout& layout, const ModelConfig& cfg,
                        const TraceOptions& opts = {}, ForwardTape<T>* tape = nullptr);

// Accumulates parameter gradients into `grads`. `d_logits` matches the logits
// of the trace (query chunk rows x vocab) or is null; `d_qk` injects gradients
// w.r.t. post-rotary Q/K at given layers.
template <typename T>
void backward(const Parameters<T>& params, const ChunkLayout& layout, const ModelConfig& cfg,
              const ForwardTape<T>& tape, const Mat<T>* d_logits, const std::map<int, QKCache<T>>& d_qk,
              Parameters<T>& grads);

}  // namespace blockrank
