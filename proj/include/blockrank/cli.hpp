#pragma once

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "blockrank/checkpoint.hpp"
#include "blockrank/corpus.hpp"
#include "blockrank/model.hpp"
#include "blockrank/prompt.hpp"
#include "blockrank/training.hpp"

namespace blockrank {

// Bad command line: exit status 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Everything a run needs, addressable by flat dotted keys such as
// "model.n_layers" or "train.lr_peak".
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  TemplateConfig tmpl;
  SyntheticTaskConfig task;
  LayoutConfig layout;
  bool deterministic = true;

  // Nested: {"model": {...}, "train": {...}, "template": {...}, "task": {...},
  // "layout": {...}, "run": {...}}.
  nlohmann::json to_json() const;
  // Accepts the nested form, flat dotted keys, or a mix. Unknown keys are a ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  // Parses `value` according to the type of the existing field.
  void set(std::string_view dotted_key, const std::string& value);
  // model.vocab_size may still be 0 here; it is fixed once data is loaded.
  void validate() const;
};

// Large-model reference hyperparameters (7B-class shape, long chunks).
RunConfig paper_scale_profile();

// A training run directory: config.json, vocab.json and model.ckpt.
struct LoadedRun {
  RunConfig cfg;
  Checkpoint ck;
  Vocabulary vocab;
};

LoadedRun load_run(const std::filesystem::path& dir);

// Prompt builder whose id width fits `n_docs` candidates.
PromptBuilder builder_for(const Vocabulary& vocab, TemplateConfig tmpl, const LayoutConfig& layout, int n_docs);

// `args` excludes the program name. Returns 0 on success, 1 on configuration
// or runtime failure, 2 on usage errors.
int run_command(std::span<const std::string> args, std::ostream& out, std::ostream& err);

}  // namespace blockrank
