#include "blockrank/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace blockrank {

std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::ntp_only: return "ntp_only";
    case LossMode::aux_only: return "aux_only";
    case LossMode::ntp_plus_aux: return "ntp_plus_aux";
  }
  return "?";
}

LossMode loss_mode_from_string(std::string_view s) {
  if (s == "ntp_only") return LossMode::ntp_only;
  if (s == "aux_only") return LossMode::aux_only;
  if (s == "ntp_plus_aux") return LossMode::ntp_plus_aux;
  throw ConfigError("unknown loss_mode '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
  if (!(lr_peak >= 0)) throw ConfigError("train.lr_peak must be >= 0");
  if (total_steps < 1) throw ConfigError("train.total_steps must be >= 1");
  if (warmup_steps < 0 || warmup_steps > total_steps)
    throw ConfigError("train.warmup_steps must lie in [0, total_steps]");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(lambda >= 0)) throw ConfigError("train.lambda must be >= 0");
  if (!(tau > 0)) throw ConfigError("train.tau must be > 0");
  if (!(grad_clip_norm > 0)) throw ConfigError("train.grad_clip_norm must be > 0");
  if (eval_every < 0) throw ConfigError("train.eval_every must be >= 0");
  if (n_docs < 0) throw ConfigError("train.n_docs must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train.beta1/beta2 must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("train.adam_eps must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be >= 0");
}

void TrainConfig::validate(const ModelConfig& model) const {
  validate();
  if (l_star < 0 || l_star >= model.n_layers)
    throw ConfigError("train.l_star must lie in [0, " + std::to_string(model.n_layers - 1) + "]");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr_peak", lr_peak},
          {"warmup_steps", warmup_steps},
          {"total_steps", total_steps},
          {"batch_size", batch_size},
          {"lambda", lambda},
          {"tau", tau},
          {"l_star", l_star},
          {"seed", seed},
          {"grad_clip_norm", grad_clip_norm},
          {"loss_mode", to_string(loss_mode)},
          {"aggregation", to_string(aggregation)},
          {"eval_every", eval_every},
          {"n_docs", n_docs},
          {"beta1", beta1},
          {"beta2", beta2},
          {"adam_eps", adam_eps},
          {"weight_decay", weight_decay}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr_peak = j.value("lr_peak", c.lr_peak);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lambda = j.value("lambda", c.lambda);
  c.tau = j.value("tau", c.tau);
  c.l_star = j.value("l_star", c.l_star);
  c.seed = j.value("seed", c.seed);
  c.grad_clip_norm = j.value("grad_clip_norm", c.grad_clip_norm);
  if (j.contains("loss_mode")) c.loss_mode = loss_mode_from_string(j.at("loss_mode").get<std::string>());
  if (j.contains("aggregation")) c.aggregation = signal_aggregation_from_string(j.at("aggregation").get<std::string>());
  c.eval_every = j.value("eval_every", c.eval_every);
  c.n_docs = j.value("n_docs", c.n_docs);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.validate();
  return c;
}

double lr_schedule(int step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_steps)
    throw Error("lr_schedule: step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.total_steps) + "]");
  if (step < cfg.warmup_steps) return cfg.lr_peak * step / cfg.warmup_steps;
  const int decay = cfg.total_steps - cfg.warmup_steps;
  if (decay == 0) return cfg.lr_peak;
  const double progress = static_cast<double>(step - cfg.warmup_steps) / decay;
  return cfg.lr_peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

PreparedExample prepare_example(const RetrievalExample& example, const PromptBuilder& builder, int n_docs,
                                std::uint64_t shuffle_seed, bool with_answer) {
  const int n = n_docs > 0 ? n_docs : static_cast<int>(example.candidates.size());
  const auto listed = build_candidate_list(example, n, shuffle_seed);
  PreparedExample p;
  p.layout = builder.build(listed, with_answer);
  p.positive = listed.positive_indices.front();
  p.other_positives.assign(listed.positive_indices.begin() + 1, listed.positive_indices.end());
  return p;
}

template <typename T>
LossBreakdown example_loss(const Parameters<T>& params, const ModelConfig& model, const PreparedExample& ex,
                           const TrainConfig& cfg, Parameters<T>* grads, double grad_scale) {
  const double lambda = cfg.lambda_effective();
  const double ntp_w = cfg.ntp_weight();
  ForwardTape<T> tape;
  TraceOptions opts;
  opts.cache_qk_layers = {cfg.l_star};
  const auto trace = forward(params, ex.layout, model, opts, grads ? &tape : nullptr);
  const auto rows = answer_prediction_rows(ex.layout);
  const auto targets = answer_tokens(ex.layout);
  const double ntp = ntp_loss(*trace.logits, rows, targets);

  const auto& qk = trace.qk.at(cfg.l_star);
  const auto scores = attention_mass_scores(qk, ex.layout, model.n_heads, cfg.l_star, cfg.aggregation);
  const double aux = infonce_aux_loss(scores.scores, ex.positive, cfg.tau, ex.other_positives);
  const auto loss = total_loss(ntp, aux, lambda, cfg.tau, ntp_w);

  if (grads && std::isfinite(loss.total)) {
    Mat<T> d_logits;
    const Mat<T>* d_logits_ptr = nullptr;
    if (ntp_w > 0) {
      d_logits = ntp_loss_grad(*trace.logits, rows, targets) * static_cast<T>(ntp_w * grad_scale);
      d_logits_ptr = &d_logits;
    }
    std::map<int, QKCache<T>> d_qk;
    if (lambda > 0) {
      auto ds = infonce_aux_loss_grad(scores.scores, ex.positive, cfg.tau, ex.other_positives);
      for (auto& g : ds) g *= lambda * grad_scale;
      d_qk[cfg.l_star] = attention_mass_scores_backward(qk, ex.layout, model.n_heads, cfg.aggregation, ds);
    }
    backward(params, ex.layout, model, tape, d_logits_ptr, d_qk, *grads);
  }
  return loss;
}

template <typename T>
LossBreakdown batch_loss(const Parameters<T>& params, const ModelConfig& model,
                         std::span<const PreparedExample> batch, const TrainConfig& cfg, Parameters<T>* grads) {
  if (batch.empty()) throw Error("batch_loss: empty batch");
  const double scale = 1.0 / static_cast<double>(batch.size());
  double ntp = 0, aux = 0;
  for (const auto& ex : batch) {
    const auto l = example_loss(params, model, ex, cfg, grads, scale);
    ntp += l.ntp;
    aux += l.aux;
  }
  return total_loss(ntp * scale, aux * scale, cfg.lambda_effective(), cfg.tau, cfg.ntp_weight());
}

template <typename T>
double global_norm(const Parameters<T>& p) {
  double s = 0;
  p.for_each([&](const std::string&, const Mat<T>& m) { s += m.template cast<double>().squaredNorm(); });
  return std::sqrt(s);
}

double clip_global_norm(Parameters<float>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const auto scale = static_cast<float>(max_norm / norm);
    grads.for_each([&](const std::string&, Mat<float>& m) { m *= scale; });
  }
  return norm;
}

void adam_update(Parameters<float>& params, OptimizerState& opt, const Parameters<float>& grads, double lr,
                 const TrainConfig& cfg) {
  const int t = opt.step + 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  std::vector<Mat<float>*> p, m, v;
  std::vector<const Mat<float>*> g;
  params.for_each([&](const std::string&, Mat<float>& x) { p.push_back(&x); });
  opt.m.for_each([&](const std::string&, Mat<float>& x) { m.push_back(&x); });
  opt.v.for_each([&](const std::string&, Mat<float>& x) { v.push_back(&x); });
  grads.for_each([&](const std::string&, const Mat<float>& x) { g.push_back(&x); });
  const auto b1 = static_cast<float>(cfg.beta1);
  const auto b2 = static_cast<float>(cfg.beta2);
  for (std::size_t i = 0; i < p.size(); ++i) {
    float* pp = p[i]->data();
    float* mm = m[i]->data();
    float* vv = v[i]->data();
    const float* gg = g[i]->data();
    for (Eigen::Index k = 0; k < p[i]->size(); ++k) {
      mm[k] = b1 * mm[k] + (1 - b1) * gg[k];
      vv[k] = b2 * vv[k] + (1 - b2) * gg[k] * gg[k];
      const double mhat = mm[k] / bc1;
      const double vhat = vv[k] / bc2;
      const double upd = mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * pp[k];
      pp[k] = static_cast<float>(pp[k] - lr * upd);
    }
  }
  opt.step = t;
}

TrainState make_train_state(Parameters<float> params) {
  TrainState s{std::move(params), {}};
  s.optimizer.m = s.params.zeros_like();
  s.optimizer.v = s.params.zeros_like();
  s.optimizer.step = 0;
  return s;
}

nlohmann::json StepLog::to_json() const {
  return {{"step", step}, {"lr", lr}, {"ntp", loss.ntp}, {"aux", loss.aux}, {"total", loss.total},
          {"grad_norm", grad_norm}};
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a combined word
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<std::size_t> batch_indices(std::uint64_t seed, int step, int batch_size, std::size_t dataset_size) {
  if (dataset_size == 0) throw Error("batch_indices: empty dataset");
  std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(step)));
  std::uniform_int_distribution<std::size_t> pick(0, dataset_size - 1);
  std::vector<std::size_t> out(static_cast<std::size_t>(batch_size));
  for (auto& i : out) i = pick(rng);
  return out;
}

std::vector<StepLog> train(TrainState& state, std::span<const RetrievalExample> dataset, const ModelConfig& model,
                           const PromptBuilder& builder, const TrainConfig& cfg, int until_step,
                           const StepCallback& on_step) {
  cfg.validate(model);
  if (dataset.empty()) throw Error("train: dataset is empty");
  const int stop = until_step < 0 ? cfg.total_steps : std::min(until_step, cfg.total_steps);
  std::vector<StepLog> log;
  Parameters<float> grads = state.params.zeros_like();
  std::vector<PreparedExample> batch;
  while (state.optimizer.step < stop) {
    const int step = state.optimizer.step;
    const auto idx = batch_indices(cfg.seed, step, cfg.batch_size, dataset.size());
    batch.clear();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto shuffle = mix_seed(mix_seed(cfg.seed ^ 0x5eedULL, static_cast<std::uint64_t>(step)), b);
      batch.push_back(prepare_example(dataset[idx[b]], builder, cfg.n_docs, shuffle));
    }

    grads.for_each([](const std::string&, Mat<float>& m) { m.setZero(); });
    const auto loss = batch_loss(state.params, model, std::span<const PreparedExample>(batch), cfg, &grads);
    if (!std::isfinite(loss.total)) {
      nlohmann::json dump = {{"step", step}, {"loss", loss.to_json()}, {"examples", nlohmann::json::array()}};
      for (auto i : idx) dump["examples"].push_back(example_to_json(dataset[i]));
      throw NonFiniteLossError("train: non-finite loss at step " + std::to_string(step), std::move(dump));
    }
    StepLog entry;
    entry.grad_norm = clip_global_norm(grads, cfg.grad_clip_norm);
    entry.lr = lr_schedule(step + 1, cfg);
    adam_update(state.params, state.optimizer, grads, entry.lr, cfg);
    entry.step = state.optimizer.step;
    entry.loss = loss;
    log.push_back(entry);
    if (on_step) on_step(entry, state);
  }
  return log;
}

GradCheckReport finite_difference_grad_check(const Parameters<double>& params, const ModelConfig& model,
                                             std::span<const PreparedExample> batch, const TrainConfig& cfg,
                                             double eps, int n_probes, std::uint64_t seed, ProbeScope scope,
                                             double floor) {
  cfg.validate(model);
  Parameters<double> grads = params.zeros_like();
  batch_loss(params, model, batch, cfg, &grads);

  Parameters<double> work = params;
  struct Slot {
    std::string name;
    Mat<double>* value;
    const Mat<double>* grad;
  };
  std::vector<Slot> slots;
  std::vector<const Mat<double>*> grad_list;
  grads.for_each([&](const std::string&, const Mat<double>& g) { grad_list.push_back(&g); });
  std::size_t gi = 0;
  work.for_each([&](const std::string& name, Mat<double>& m) {
    const Mat<double>* g = grad_list[gi++];
    if (scope == ProbeScope::above_l_star) {
      // Everything downstream of the scored Q/K: later layers, the rest of
      // layer l*, the final norm and the head.
      if (name == "tok_emb") return;
      if (name.rfind("layers.", 0) == 0) {
        const auto dot = name.find('.', 7);
        const int layer = std::stoi(name.substr(7, dot - 7));
        const auto leaf = name.substr(dot + 1);
        if (layer < cfg.l_star) return;
        if (layer == cfg.l_star && (leaf == "attn_norm" || leaf == "wq" || leaf == "wk")) return;
      }
    }
    slots.push_back({name, &m, g});
  });
  if (slots.empty()) throw Error("finite_difference_grad_check: no parameters in scope");

  // Pick tensors in proportion to their size so every scalar is equally likely.
  std::vector<double> weights;
  for (const auto& s : slots) weights.push_back(static_cast<double>(s.value->size()));
  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> pick_tensor(weights.begin(), weights.end());

  GradCheckReport report;
  for (int p = 0; p < n_probes; ++p) {
    auto& slot = slots[pick_tensor(rng)];
    std::uniform_int_distribution<Eigen::Index> pick_elem(0, slot.value->size() - 1);
    const Eigen::Index k = pick_elem(rng);
    double& x = slot.value->data()[k];
    const double orig = x;
    x = orig + eps;
    const double up = batch_loss(work, model, batch, cfg).total;
    x = orig - eps;
    const double down = batch_loss(work, model, batch, cfg).total;
    x = orig;

    GradProbe probe;
    probe.tensor = slot.name;
    probe.index = k;
    probe.analytic = slot.grad->data()[k];
    probe.numeric = (up - down) / (2 * eps);
    const double denom = std::max({std::abs(probe.analytic), std::abs(probe.numeric), floor});
    probe.rel_error = std::abs(probe.analytic - probe.numeric) / denom;
    report.max_rel_error = std::max(report.max_rel_error, probe.rel_error);
    report.probes.push_back(std::move(probe));
  }
  return report;
}

template LossBreakdown example_loss<float>(const Parameters<float>&, const ModelConfig&, const PreparedExample&,
                                           const TrainConfig&, Parameters<float>*, double);
template LossBreakdown example_loss<double>(const Parameters<double>&, const ModelConfig&, const PreparedExample&,
                                            const TrainConfig&, Parameters<double>*, double);
template LossBreakdown batch_loss<float>(const Parameters<float>&, const ModelConfig&, std::span<const PreparedExample>,
                                         const TrainConfig&, Parameters<float>*);
template LossBreakdown batch_loss<double>(const Parameters<double>&, const ModelConfig&,
                                          std::span<const PreparedExample>, const TrainConfig&, Parameters<double>*);
template double global_norm<float>(const Parameters<float>&);
template double global_norm<double>(const Parameters<double>&);

}  // namespace blockrank
