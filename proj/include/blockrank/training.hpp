#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "blockrank/checkpoint.hpp"
#include "blockrank/corpus.hpp"
#include "blockrank/model.hpp"
#include "blockrank/objective.hpp"
#include "blockrank/prompt.hpp"

namespace blockrank {

enum class LossMode { ntp_only, aux_only, ntp_plus_aux };

std::string to_string(LossMode m);
LossMode loss_mode_from_string(std::string_view s);

struct TrainConfig {
  double lr_peak = 3e-4;
  int warmup_steps = 100;
  int total_steps = 1000;
  int batch_size = 16;
  double lambda = kDefaultLambda;
  double tau = kDefaultTau;
  int l_star = 1;  // layer index (0-based) whose Q/K feed the auxiliary loss
  std::uint64_t seed = 0;
  double grad_clip_norm = 1.0;
  LossMode loss_mode = LossMode::ntp_plus_aux;
  SignalAggregation aggregation = SignalAggregation::sum;
  int eval_every = 0;  // 0 disables periodic checkpoints
  int n_docs = 0;      // candidates per training prompt; 0 keeps every candidate
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const;
  void validate(const ModelConfig& model) const;
  // Effective weights after applying loss_mode.
  double lambda_effective() const { return loss_mode == LossMode::ntp_only ? 0.0 : lambda; }
  double ntp_weight() const { return loss_mode == LossMode::aux_only ? 0.0 : 1.0; }

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Linear warmup 0 -> lr_peak, then cosine decay to 0 at total_steps.
double lr_schedule(int step, const TrainConfig& cfg);

// One teacher-forced prompt ready for the loss.
struct PreparedExample {
  ChunkLayout layout;
  int positive = 0;
  std::vector<int> other_positives;
};

PreparedExample prepare_example(const RetrievalExample& example, const PromptBuilder& builder, int n_docs,
                                std::uint64_t shuffle_seed, bool with_answer = true);

// Loss of one example. When `grads` is given, gradients of grad_scale * total
// are accumulated into it.
template <typename T>
LossBreakdown example_loss(const Parameters<T>& params, const ModelConfig& model, const PreparedExample& ex,
                           const TrainConfig& cfg, Parameters<T>* grads = nullptr, double grad_scale = 1.0);

// Mean of example losses over a batch; gradients of the mean when `grads` is given.
template <typename T>
LossBreakdown batch_loss(const Parameters<T>& params, const ModelConfig& model,
                         std::span<const PreparedExample> batch, const TrainConfig& cfg,
                         Parameters<T>* grads = nullptr);

template <typename T>
double global_norm(const Parameters<T>& p);

// Scales `grads` so their global norm is at most max_norm; returns the norm before clipping.
double clip_global_norm(Parameters<float>& grads, double max_norm);

void adam_update(Parameters<float>& params, OptimizerState& opt, const Parameters<float>& grads, double lr,
                 const TrainConfig& cfg);

struct TrainState {
  Parameters<float> params;
  OptimizerState optimizer;
};

TrainState make_train_state(Parameters<float> params);

struct StepLog {
  int step = 0;  // updates completed after this step
  double lr = 0;
  LossBreakdown loss;
  double grad_norm = 0;

  nlohmann::json to_json() const;
};

class NonFiniteLossError : public Error {
 public:
  NonFiniteLossError(const std::string& what, nlohmann::json dump) : Error(what), dump_(std::move(dump)) {}
  const nlohmann::json& dump() const { return dump_; }

 private:
  nlohmann::json dump_;
};

// Indices of the batch drawn for update `step`; a pure function of (seed, step).
std::vector<std::size_t> batch_indices(std::uint64_t seed, int step, int batch_size, std::size_t dataset_size);
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

using StepCallback = std::function<void(const StepLog&, const TrainState&)>;

// Runs updates until state.optimizer.step reaches `until_step` (total_steps
// when negative). Resuming from a saved state continues the same sequence.
std::vector<StepLog> train(TrainState& state, std::span<const RetrievalExample> dataset, const ModelConfig& model,
                           const PromptBuilder& builder, const TrainConfig& cfg, int until_step = -1,
                           const StepCallback& on_step = {});

struct GradProbe {
  std::string tensor;
  Eigen::Index index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradCheckReport {
  std::vector<GradProbe> probes;
  double max_rel_error = 0;
};

// above_l_star: parameters that cannot influence the Q/K of layer l*.
enum class ProbeScope { all, above_l_star };

// Compares analytic gradients of the batch loss with central differences at
// randomly chosen scalars. Relative error is |a-n| / max(|a|, |n|, floor).
GradCheckReport finite_difference_grad_check(const Parameters<double>& params, const ModelConfig& model,
                                             std::span<const PreparedExample> batch, const TrainConfig& cfg,
                                             double eps, int n_probes, std::uint64_t seed,
                                             ProbeScope scope = ProbeScope::all, double floor = 1e-8);

}  // namespace blockrank
