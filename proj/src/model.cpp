#include "blockrank/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>

namespace blockrank {

std::string to_string(AttentionMode mode) {
  return mode == AttentionMode::blockwise ? "blockwise" : "dense_causal";
}

AttentionMode attention_mode_from_string(std::string_view s) {
  if (s == "blockwise") return AttentionMode::blockwise;
  if (s == "dense_causal" || s == "dense") return AttentionMode::dense_causal;
  throw ConfigError("unknown attention mode '" + std::string(s) + "' (expected blockwise or dense_causal)");
}

void ModelConfig::validate() const {
  if (n_layers < 1) throw ConfigError("model.n_layers must be >= 1");
  if (n_heads < 1) throw ConfigError("model.n_heads must be >= 1");
  if (d_model < 2 || d_model % n_heads != 0) throw ConfigError("model.d_model must be divisible by model.n_heads");
  if (head_dim() % 2 != 0) throw ConfigError("model.d_model / model.n_heads must be even for rotary embeddings");
  if (vocab_size < 1) throw ConfigError("model.vocab_size must be >= 1");
  if (mlp_hidden < 1) throw ConfigError("model.mlp_hidden must be >= 1");
  if (!(rotary_base > 1.0)) throw ConfigError("model.rotary_base must be > 1");
  if (max_position < 1) throw ConfigError("model.max_position must be >= 1");
  if (!(norm_eps > 0.0)) throw ConfigError("model.norm_eps must be > 0");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_layers", n_layers},         {"n_heads", n_heads},
          {"d_model", d_model},           {"vocab_size", vocab_size},
          {"mlp_hidden", mlp_hidden},     {"rotary_base", rotary_base},
          {"max_position", max_position}, {"norm_eps", norm_eps},
          {"attention_mode", to_string(attention_mode)}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_model = j.value("d_model", c.d_model);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
  c.rotary_base = j.value("rotary_base", c.rotary_base);
  c.max_position = j.value("max_position", c.max_position);
  c.norm_eps = j.value("norm_eps", c.norm_eps);
  c.attention_mode = attention_mode_from_string(j.value("attention_mode", std::string("blockwise")));
  return c;
}

template <typename T>
Parameters<T> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const int d = cfg.d_model;
  const int m = cfg.mlp_hidden;
  const int V = cfg.vocab_size;
  Parameters<double> p;
  p.tok_emb.resize(V, d);
  p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& l : p.layers) {
    l.attn_norm.setOnes(1, d);
    l.wq.resize(d, d);
    l.wk.resize(d, d);
    l.wv.resize(d, d);
    l.wo.resize(d, d);
    l.mlp_norm.setOnes(1, d);
    l.w_gate.resize(d, m);
    l.w_up.resize(d, m);
    l.w_down.resize(m, d);
  }
  p.final_norm.setOnes(1, d);
  p.lm_head.resize(d, V);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  p.for_each([&](const std::string& name, Mat<double>& w) {
    if (name.ends_with("norm")) return;
    const double scale = name == "tok_emb" ? 1.0 : 1.0 / std::sqrt(static_cast<double>(w.rows()));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = normal(rng) * scale;
  });
  if constexpr (std::is_same_v<T, double>) {
    return p;
  } else {
    return p.template cast<T>();
  }
}

int ScoreBlock::key_count() const {
  int n = 0;
  for (const auto& s : keys) n += s.len;
  return n;
}

std::vector<ScoreBlock> attention_plan(const ChunkLayout& layout, AttentionMode mode) {
  const int L = layout.chunk_len;
  std::vector<ScoreBlock> plan;
  if (mode == AttentionMode::dense_causal) {
    plan.push_back({0, layout.total_tokens(), {{0, layout.total_tokens()}}});
    return plan;
  }
  const KeySpan inst{0, L};
  for (int c = 0; c < layout.n_chunks(); ++c) {
    ScoreBlock b{c * L, L, {{c * L, L}}};
    switch (layout.chunks[static_cast<std::size_t>(c)].role) {
      case ChunkRole::instruction:
        break;
      case ChunkRole::document:
        b.keys.push_back(inst);
        break;
      case ChunkRole::query:
        b.keys.push_back(inst);
        for (int k = 1; k <= layout.n_docs(); ++k) b.keys.push_back({k * L, L});
        break;
    }
    plan.push_back(std::move(b));
  }
  return plan;
}

namespace {

template <typename T>
void rms_forward(const Mat<T>& x, const Mat<T>& gain, double eps, Mat<T>& y, std::vector<T>& inv_rms) {
  const auto n = x.rows();
  const auto d = static_cast<T>(x.cols());
  y.resize(n, x.cols());
  inv_rms.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const T r = T(1) / std::sqrt(x.row(i).squaredNorm() / d + static_cast<T>(eps));
    inv_rms[static_cast<std::size_t>(i)] = r;
    y.row(i) = x.row(i).cwiseProduct(gain) * r;
  }
}

// dx += d(rmsnorm)/dx^T dy ; dgain += sum_rows dy * x * r
template <typename T>
void rms_backward(const Mat<T>& x, const Mat<T>& gain, const std::vector<T>& inv_rms, const Mat<T>& dy,
                  Mat<T>& dx, Mat<T>& dgain) {
  const auto d = static_cast<T>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const T r = inv_rms[static_cast<std::size_t>(i)];
    const RowVec<T> gdy = dy.row(i).cwiseProduct(gain);
    const T dot = gdy.dot(x.row(i));
    dx.row(i) += gdy * r - x.row(i) * (r * r * r * dot / d);
    dgain += dy.row(i).cwiseProduct(x.row(i)) * r;
  }
}

// Same-shaped per-chunk products keep every chunk's rows on an identical code
// path, so a document's activations do not depend on its slot.
template <typename T>
void chunked_matmul(const Mat<T>& in, const Mat<T>& w, Mat<T>& out, int chunk_len) {
  out.resize(in.rows(), w.cols());
  for (Eigen::Index r = 0; r < in.rows(); r += chunk_len) out.middleRows(r, chunk_len).noalias() = in.middleRows(r, chunk_len) * w;
}

template <typename T>
void rope_tables(const std::vector<int>& positions, int head_dim, double base, Mat<T>& cos, Mat<T>& sin) {
  const int half = head_dim / 2;
  const auto n = static_cast<Eigen::Index>(positions.size());
  cos.resize(n, half);
  sin.resize(n, half);
  for (int j = 0; j < half; ++j) {
    const double inv_freq = std::pow(base, -2.0 * j / head_dim);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double angle = positions[static_cast<std::size_t>(i)] * inv_freq;
      cos(i, j) = static_cast<T>(std::cos(angle));
      sin(i, j) = static_cast<T>(std::sin(angle));
    }
  }
}

// Rotates pairs (j, j + head_dim/2) within every head; inverse rotates back.
template <typename T>
void apply_rope(Mat<T>& x, const Mat<T>& cos, const Mat<T>& sin, int n_heads, bool inverse) {
  const auto half = cos.cols();
  const auto hd = 2 * half;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (int h = 0; h < n_heads; ++h) {
      T* row = x.row(i).data() + h * hd;
      for (Eigen::Index j = 0; j < half; ++j) {
        const T c = cos(i, j);
        const T s = inverse ? -sin(i, j) : sin(i, j);
        const T a = row[j];
        const T b = row[j + half];
        row[j] = a * c - b * s;
        row[j + half] = a * s + b * c;
      }
    }
  }
}

template <typename T>
void gather_keys(const Mat<T>& src, const ScoreBlock& blk, Eigen::Index col, Eigen::Index width, Mat<T>& out) {
  out.resize(blk.key_count(), width);
  Eigen::Index off = 0;
  for (const auto& s : blk.keys) {
    out.middleRows(off, s.len) = src.block(s.begin, col, s.len, width);
    off += s.len;
  }
}

template <typename T>
void scatter_add_keys(const Mat<T>& grad, const ScoreBlock& blk, Eigen::Index col, Mat<T>& dst) {
  Eigen::Index off = 0;
  for (const auto& s : blk.keys) {
    dst.block(s.begin, col, s.len, grad.cols()) += grad.middleRows(off, s.len);
    off += s.len;
  }
}

std::vector<int> key_columns(const ScoreBlock& blk) {
  std::vector<int> cols;
  cols.reserve(static_cast<std::size_t>(blk.key_count()));
  for (const auto& s : blk.keys)
    for (int j = 0; j < s.len; ++j) cols.push_back(s.begin + j);
  return cols;
}

// In-place masked softmax over each row of `s`; blocked entries become exact zeros.
template <typename T>
void masked_softmax(Mat<T>& s, const ScoreBlock& blk, const std::vector<int>& cols,
                    const std::vector<std::uint8_t>& valid) {
  const auto ctx = static_cast<Eigen::Index>(cols.size());
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const int i = blk.row_begin + static_cast<int>(r);
    T* row = s.row(r).data();
    T mx = -std::numeric_limits<T>::infinity();
    for (Eigen::Index c = 0; c < ctx; ++c) {
      const int j = cols[static_cast<std::size_t>(c)];
      if (valid[static_cast<std::size_t>(j)] && j <= i) mx = std::max(mx, row[c]);
    }
    if (mx == -std::numeric_limits<T>::infinity()) {
      std::fill(row, row + ctx, T(0));
      continue;
    }
    T sum = 0;
    for (Eigen::Index c = 0; c < ctx; ++c) {
      const int j = cols[static_cast<std::size_t>(c)];
      if (valid[static_cast<std::size_t>(j)] && j <= i) {
        row[c] = std::exp(row[c] - mx);
        sum += row[c];
      } else {
        row[c] = 0;
      }
    }
    const T inv = T(1) / sum;
    for (Eigen::Index c = 0; c < ctx; ++c) row[c] *= inv;
  }
}

template <typename T>
Mat<T> attention_with_plan(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, const ChunkLayout& layout,
                           const std::vector<ScoreBlock>& plan, int n_heads, AttentionCounter* counter,
                           std::vector<Mat<T>>* probs) {
  const auto d = q.cols();
  const int hd = static_cast<int>(d) / n_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  Mat<T> out(q.rows(), d);
  Mat<T> kc, vc;
  for (const auto& blk : plan) {
    const auto cols = key_columns(blk);
    for (int h = 0; h < n_heads; ++h) {
      gather_keys(k, blk, h * hd, hd, kc);
      gather_keys(v, blk, h * hd, hd, vc);
      Mat<T> s = (q.block(blk.row_begin, h * hd, blk.rows, hd) * kc.transpose()) * scale;
      if (counter) counter->scored_pairs += static_cast<std::int64_t>(s.size());
      masked_softmax(s, blk, cols, layout.valid);
      out.block(blk.row_begin, h * hd, blk.rows, hd).noalias() = s * vc;
      if (probs) probs->push_back(std::move(s));
    }
  }
  if (counter) counter->head_layer_calls += n_heads;
  return out;
}

template <typename T>
void attention_backward(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, const std::vector<ScoreBlock>& plan,
                        const std::vector<Mat<T>>& probs, int n_heads, const Mat<T>& d_out, Mat<T>& dq, Mat<T>& dk,
                        Mat<T>& dv) {
  const int hd = static_cast<int>(q.cols()) / n_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  Mat<T> kc, vc;
  std::size_t p = 0;
  for (const auto& blk : plan) {
    for (int h = 0; h < n_heads; ++h, ++p) {
      const Mat<T>& P = probs[p];
      gather_keys(k, blk, h * hd, hd, kc);
      gather_keys(v, blk, h * hd, hd, vc);
      const auto dO = d_out.block(blk.row_begin, h * hd, blk.rows, hd);
      Mat<T> dP = dO * vc.transpose();
      Mat<T> dvc = P.transpose() * dO;
      for (Eigen::Index r = 0; r < dP.rows(); ++r) {
        const T dot = P.row(r).dot(dP.row(r));
        dP.row(r) = P.row(r).cwiseProduct(dP.row(r).array().matrix() - RowVec<T>::Constant(dP.cols(), dot));
      }
      dq.block(blk.row_begin, h * hd, blk.rows, hd).noalias() += (dP * kc) * scale;
      Mat<T> dkc = (dP.transpose() * q.block(blk.row_begin, h * hd, blk.rows, hd)) * scale;
      scatter_add_keys(dkc, blk, h * hd, dk);
      scatter_add_keys(dvc, blk, h * hd, dv);
    }
  }
}

template <typename T>
T silu(T z) {
  return z / (T(1) + std::exp(-z));
}

}  // namespace

template <typename T>
Mat<T> block_attention_layer(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, const ChunkLayout& layout,
                             int n_heads, AttentionMode mode, AttentionCounter* counter, std::vector<Mat<T>>* probs) {
  if (q.rows() != layout.total_tokens() || k.rows() != q.rows() || v.rows() != q.rows())
    throw Error("block_attention_layer: inputs do not match the layout");
  if (q.cols() % n_heads != 0) throw Error("block_attention_layer: width not divisible by head count");
  return attention_with_plan(q, k, v, layout, attention_plan(layout, mode), n_heads, counter, probs);
}

template <typename T>
Mat<T> blockwise_attention_mask(const ChunkLayout& layout) {
  const int S = layout.total_tokens();
  const int L = layout.chunk_len;
  Mat<T> mask = Mat<T>::Constant(S, S, static_cast<T>(-1e9));
  auto role_of = [&](int t) { return layout.chunks[static_cast<std::size_t>(t / L)].role; };
  for (int i = 0; i < S; ++i) {
    const int ci = i / L;
    for (int j = 0; j < S; ++j) {
      if (!layout.valid[static_cast<std::size_t>(j)]) continue;
      const int cj = j / L;
      bool ok = false;
      switch (role_of(i)) {
        case ChunkRole::instruction:
          ok = cj == ci && j <= i;
          break;
        case ChunkRole::document:
          ok = role_of(j) == ChunkRole::instruction || (cj == ci && j <= i);
          break;
        case ChunkRole::query:
          ok = role_of(j) != ChunkRole::query || j <= i;
          break;
      }
      if (ok) mask(i, j) = 0;
    }
  }
  return mask;
}

template <typename T>
Mat<T> dense_masked_attention_oracle(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, const ChunkLayout& layout,
                                     int n_heads) {
  const auto mask = blockwise_attention_mask<T>(layout);
  const int hd = static_cast<int>(q.cols()) / n_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  Mat<T> out(q.rows(), q.cols());
  for (int h = 0; h < n_heads; ++h) {
    Mat<T> s = (q.middleCols(h * hd, hd) * k.middleCols(h * hd, hd).transpose()) * scale + mask;
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      const T mx = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - mx).exp().matrix();
      s.row(r) /= s.row(r).sum();
    }
    out.middleCols(h * hd, hd) = s * v.middleCols(h * hd, hd);
  }
  return out;
}

template <typename T>
ForwardTrace<T> forward(const Parameters<T>& params, const ChunkLayout& layout, const ModelConfig& cfg,
                        const TraceOptions& opts, ForwardTape<T>* tape) {
  cfg.validate();
  if (layout.position_ids.size() != layout.tokens.size())
    throw Error("forward: layout has no position ids (assign_positions not run)");
  if (static_cast<int>(params.layers.size()) != cfg.n_layers || params.tok_emb.rows() != cfg.vocab_size ||
      params.tok_emb.cols() != cfg.d_model)
    throw Error("forward: parameters do not match the model config");
  const int n_run = opts.stop_layer.value_or(cfg.n_layers);
  if (n_run < 0 || n_run > cfg.n_layers)
    throw Error("forward: stop_layer " + std::to_string(n_run) + " outside [0, " + std::to_string(cfg.n_layers) + "]");

  const auto positions =
      cfg.attention_mode == AttentionMode::blockwise ? layout.position_ids : sequential_positions(layout);
  const int max_pos = *std::max_element(positions.begin(), positions.end());
  if (max_pos >= cfg.max_position)
    throw Error("forward: position id " + std::to_string(max_pos) + " overflows max_position " +
                std::to_string(cfg.max_position));
  for (int t : layout.tokens)
    if (t < 0 || t >= cfg.vocab_size) throw Error("forward: token id " + std::to_string(t) + " outside vocabulary");

  const int L = layout.chunk_len;
  const int S = layout.total_tokens();
  const int H = cfg.n_heads;
  const auto plan = attention_plan(layout, cfg.attention_mode);
  Mat<T> cos, sin;
  rope_tables(positions, cfg.head_dim(), cfg.rotary_base, cos, sin);

  std::set<int> qk_layers(opts.cache_qk_layers.begin(), opts.cache_qk_layers.end());
  if (opts.cache_qk_all)
    for (int l = 0; l <= std::min(n_run, cfg.n_layers - 1); ++l) qk_layers.insert(l);
  for (int l : qk_layers)
    if (l < 0 || l > n_run || l >= cfg.n_layers)
      throw Error("forward: cannot cache Q/K at layer " + std::to_string(l) + " with stop_layer " +
                  std::to_string(n_run));

  ForwardTrace<T> trace;
  if (tape) {
    tape->layers.clear();
    tape->plan = plan;
    tape->cos = cos;
    tape->sin = sin;
  }

  Mat<T> x(S, cfg.d_model);
  for (int i = 0; i < S; ++i) x.row(i) = params.tok_emb.row(layout.tokens[static_cast<std::size_t>(i)]);

  const bool want_probs = tape != nullptr || opts.retain_attention;
  for (int l = 0; l < n_run; ++l) {
    const auto& lp = params.layers[static_cast<std::size_t>(l)];
    LayerTape<T> lt;
    if (opts.retain_hidden) trace.hidden.push_back(x);
    rms_forward(x, lp.attn_norm, cfg.norm_eps, lt.a, lt.inv_rms_a);
    chunked_matmul(lt.a, lp.wq, lt.q, L);
    chunked_matmul(lt.a, lp.wk, lt.k, L);
    chunked_matmul(lt.a, lp.wv, lt.v, L);
    apply_rope(lt.q, cos, sin, H, false);
    apply_rope(lt.k, cos, sin, H, false);
    if (qk_layers.count(l)) trace.qk[l] = {lt.q, lt.k};

    lt.attn = attention_with_plan(lt.q, lt.k, lt.v, layout, plan, H, opts.counter, want_probs ? &lt.probs : nullptr);
    if (opts.retain_attention) {
      Mat<T> avg = Mat<T>::Zero(S, S);
      std::size_t p = 0;
      for (const auto& blk : plan) {
        const auto cols = key_columns(blk);
        for (int h = 0; h < H; ++h, ++p) {
          const auto& P = lt.probs[p];
          for (int r = 0; r < blk.rows; ++r)
            for (std::size_t c = 0; c < cols.size(); ++c)
              avg(blk.row_begin + r, cols[c]) += P(r, static_cast<Eigen::Index>(c)) / static_cast<T>(H);
        }
      }
      trace.attention.push_back(std::move(avg));
    }

    Mat<T> proj;
    chunked_matmul(lt.attn, lp.wo, proj, L);
    lt.h1 = x + proj;
    rms_forward(lt.h1, lp.mlp_norm, cfg.norm_eps, lt.b, lt.inv_rms_b);
    chunked_matmul(lt.b, lp.w_gate, lt.gate, L);
    chunked_matmul(lt.b, lp.w_up, lt.up, L);
    lt.act.resize(lt.gate.rows(), lt.gate.cols());
    for (Eigen::Index i = 0; i < lt.gate.size(); ++i) lt.act.data()[i] = silu(lt.gate.data()[i]) * lt.up.data()[i];
    chunked_matmul(lt.act, lp.w_down, proj, L);
    if (tape) {
      lt.x = x;
      x = lt.h1 + proj;
      tape->layers.push_back(std::move(lt));
    } else {
      x = lt.h1 + proj;
    }
  }

  if (n_run < cfg.n_layers && qk_layers.count(n_run)) {
    const auto& lp = params.layers[static_cast<std::size_t>(n_run)];
    LayerTape<T> lt;
    lt.full = false;
    rms_forward(x, lp.attn_norm, cfg.norm_eps, lt.a, lt.inv_rms_a);
    chunked_matmul(lt.a, lp.wq, lt.q, L);
    chunked_matmul(lt.a, lp.wk, lt.k, L);
    apply_rope(lt.q, cos, sin, H, false);
    apply_rope(lt.k, cos, sin, H, false);
    trace.qk[n_run] = {lt.q, lt.k};
    if (tape) {
      lt.x = x;
      tape->layers.push_back(std::move(lt));
    }
  }
  if (opts.retain_hidden) trace.hidden.push_back(x);
  trace.layers_executed = n_run;

  if (n_run == cfg.n_layers) {
    const Mat<T> xq = x.middleRows(layout.query_begin(), L);
    Mat<T> f;
    std::vector<T> inv_rms;
    rms_forward(xq, params.final_norm, cfg.norm_eps, f, inv_rms);
    trace.logits = f * params.lm_head;
    if (tape) {
      tape->x_final = x;
      tape->f_query = std::move(f);
      tape->inv_rms_f = std::move(inv_rms);
    }
  }
  return trace;
}

template <typename T>
void backward(const Parameters<T>& params, const ChunkLayout& layout, const ModelConfig& cfg,
              const ForwardTape<T>& tape, const Mat<T>* d_logits, const std::map<int, QKCache<T>>& d_qk,
              Parameters<T>& grads) {
  const int S = layout.total_tokens();
  const int L = layout.chunk_len;
  const int H = cfg.n_heads;
  Mat<T> dx = Mat<T>::Zero(S, cfg.d_model);
  bool active = false;

  if (d_logits) {
    if (tape.f_query.size() == 0) throw Error("backward: logits gradient given but the forward pass was partial");
    grads.lm_head.noalias() += tape.f_query.transpose() * *d_logits;
    const Mat<T> df = *d_logits * params.lm_head.transpose();
    const Mat<T> xq = tape.x_final.middleRows(layout.query_begin(), L);
    Mat<T> dxq = Mat<T>::Zero(L, cfg.d_model);
    rms_backward(xq, params.final_norm, tape.inv_rms_f, df, dxq, grads.final_norm);
    dx.middleRows(layout.query_begin(), L) += dxq;
    active = true;
  }

  for (int l = static_cast<int>(tape.layers.size()) - 1; l >= 0; --l) {
    const auto& lt = tape.layers[static_cast<std::size_t>(l)];
    const auto& lp = params.layers[static_cast<std::size_t>(l)];
    auto& lg = grads.layers[static_cast<std::size_t>(l)];
    const auto inj = d_qk.find(l);
    if (!active && inj == d_qk.end()) continue;

    Mat<T> dq = Mat<T>::Zero(S, cfg.d_model);
    Mat<T> dk = Mat<T>::Zero(S, cfg.d_model);
    Mat<T> dv;
    const bool through_block = lt.full && active;
    if (through_block) {
      // MLP
      const Mat<T> d_act = dx * lp.w_down.transpose();
      lg.w_down.noalias() += lt.act.transpose() * dx;
      Mat<T> d_gate(lt.gate.rows(), lt.gate.cols());
      Mat<T> d_up(lt.up.rows(), lt.up.cols());
      for (Eigen::Index i = 0; i < lt.gate.size(); ++i) {
        const T z = lt.gate.data()[i];
        const T sig = T(1) / (T(1) + std::exp(-z));
        d_gate.data()[i] = d_act.data()[i] * lt.up.data()[i] * sig * (T(1) + z * (T(1) - sig));
        d_up.data()[i] = d_act.data()[i] * z * sig;
      }
      const Mat<T> db = d_gate * lp.w_gate.transpose() + d_up * lp.w_up.transpose();
      lg.w_gate.noalias() += lt.b.transpose() * d_gate;
      lg.w_up.noalias() += lt.b.transpose() * d_up;
      Mat<T> dh1 = dx;
      rms_backward(lt.h1, lp.mlp_norm, lt.inv_rms_b, db, dh1, lg.mlp_norm);

      // attention output projection and the attention itself
      const Mat<T> d_attn = dh1 * lp.wo.transpose();
      lg.wo.noalias() += lt.attn.transpose() * dh1;
      dv = Mat<T>::Zero(S, cfg.d_model);
      attention_backward(lt.q, lt.k, lt.v, tape.plan, lt.probs, H, d_attn, dq, dk, dv);
      dx = std::move(dh1);
    }
    if (inj != d_qk.end()) {
      dq += inj->second.q;
      dk += inj->second.k;
    }
    apply_rope(dq, tape.cos, tape.sin, H, true);
    apply_rope(dk, tape.cos, tape.sin, H, true);
    Mat<T> da = dq * lp.wq.transpose() + dk * lp.wk.transpose();
    lg.wq.noalias() += lt.a.transpose() * dq;
    lg.wk.noalias() += lt.a.transpose() * dk;
    if (through_block) {
      da.noalias() += dv * lp.wv.transpose();
      lg.wv.noalias() += lt.a.transpose() * dv;
    }
    rms_backward(lt.x, lp.attn_norm, lt.inv_rms_a, da, dx, lg.attn_norm);
    active = true;
  }

  if (!active) return;
  for (int i = 0; i < S; ++i) grads.tok_emb.row(layout.tokens[static_cast<std::size_t>(i)]) += dx.row(i);
}

#define BLOCKRANK_INSTANTIATE(T)                                                                                   \
  template Parameters<T> init_parameters<T>(const ModelConfig&, std::uint64_t);                                   \
  template Mat<T> block_attention_layer<T>(const Mat<T>&, const Mat<T>&, const Mat<T>&, const ChunkLayout&, int,  \
                                           AttentionMode, AttentionCounter*, std::vector<Mat<T>>*);                \
  template Mat<T> blockwise_attention_mask<T>(const ChunkLayout&);                                                 \
  template Mat<T> dense_masked_attention_oracle<T>(const Mat<T>&, const Mat<T>&, const Mat<T>&, const ChunkLayout&, \
                                                   int);                                                           \
  template ForwardTrace<T> forward<T>(const Parameters<T>&, const ChunkLayout&, const ModelConfig&,               \
                                      const TraceOptions&, ForwardTape<T>*);                                       \
  template void backward<T>(const Parameters<T>&, const ChunkLayout&, const ModelConfig&, const ForwardTape<T>&,  \
                            const Mat<T>*, const std::map<int, QKCache<T>>&, Parameters<T>&);

BLOCKRANK_INSTANTIATE(float)
BLOCKRANK_INSTANTIATE(double)

#undef BLOCKRANK_INSTANTIATE

}  // namespace blockrank
