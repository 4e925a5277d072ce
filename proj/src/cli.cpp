#include "blockrank/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "blockrank/checkpoint.hpp"
#include "blockrank/evaluation.hpp"
#include "blockrank/inference.hpp"

namespace fs = std::filesystem;

namespace blockrank {

namespace {

std::pair<std::string, std::string> split_key(std::string_view key) {
  const auto dot = key.find('.');
  if (dot == std::string_view::npos || dot == 0 || dot + 1 == key.size())
    return {std::string(key), std::string()};
  return {std::string(key.substr(0, dot)), std::string(key.substr(dot + 1))};
}

nlohmann::json parse_like(const nlohmann::json& existing, const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    switch (existing.type()) {
      case nlohmann::json::value_t::boolean:
        if (value == "true" || value == "1") return true;
        if (value == "false" || value == "0") return false;
        break;
      case nlohmann::json::value_t::number_integer: {
        const long long v = std::stoll(value, &used);
        if (used == value.size()) return v;
        break;
      }
      case nlohmann::json::value_t::number_unsigned: {
        if (!value.empty() && value[0] == '-') break;
        const unsigned long long v = std::stoull(value, &used);
        if (used == value.size()) return v;
        break;
      }
      case nlohmann::json::value_t::number_float: {
        const double v = std::stod(value, &used);
        if (used == value.size()) return v;
        break;
      }
      default: return value;
    }
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": cannot parse '" + value + "' as " + existing.type_name());
}

// Writes a command-line value into the nested config, typed like the existing field.
void set_in_json(nlohmann::json& j, std::string_view dotted_key, const std::string& value) {
  const auto [section, field] = split_key(dotted_key);
  if (field.empty() || !j.contains(section) || !j[section].contains(field))
    throw UsageError("unknown option --" + std::string(dotted_key));
  j[section][field] = parse_like(j[section][field], std::string(dotted_key), value);
}

nlohmann::json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error("cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& p, const nlohmann::json& j) {
  std::ofstream out(p);
  if (!out) throw Error("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

void write_text_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw Error("cannot write " + p.string());
  out << text;
}

std::string file_digest(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot open " + p.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex({reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()});
}

// Common to every subcommand.
struct CommonOpts {
  std::string config_path;
  std::string out;
  std::string profile;
  bool force = false;
  bool deterministic = false;
};

void add_common(CLI::App* sub, CommonOpts& o) {
  sub->add_option("--config", o.config_path, "JSON config (flat dotted or nested keys)");
  sub->add_option("--out", o.out, "Output directory (default: $BLOCKRANK_OUT/<command>-<digest>)");
  sub->add_option("--profile", o.profile, "Base profile: default or paper_scale");
  sub->add_flag("--force", o.force, "Overwrite an existing output directory");
  sub->add_flag("--deterministic", o.deterministic, "Fixed reduction order (always on; recorded in the snapshot)");
  sub->allow_extras();
}

RunConfig resolve_config(const CommonOpts& o, const std::vector<std::string>& extras) {
  RunConfig cfg;
  if (o.profile == "paper_scale") cfg = paper_scale_profile();
  else if (!o.profile.empty() && o.profile != "default") throw UsageError("unknown profile '" + o.profile + "'");
  auto j = cfg.to_json();
  if (!o.config_path.empty()) {
    const auto file = read_json_file(o.config_path);
    if (!file.is_object()) throw ConfigError(o.config_path + ": top level must be an object");
    nlohmann::json flat = nlohmann::json::object();
    for (auto it = file.begin(); it != file.end(); ++it) {
      if (it.value().is_object())
        for (auto f = it.value().begin(); f != it.value().end(); ++f) flat[it.key() + "." + f.key()] = f.value();
      else
        flat[it.key()] = it.value();
    }
    for (auto it = flat.begin(); it != flat.end(); ++it) {
      const auto [section, field] = split_key(it.key());
      if (field.empty() || !j.contains(section) || !j[section].contains(field))
        throw ConfigError(o.config_path + ": unknown key '" + it.key() + "'");
      j[section][field] = it.value();
    }
  }
  // Overrides are merged first and validated together, so their order does not matter.
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0) throw UsageError("unexpected argument '" + a + "'");
    std::string key = a.substr(2), value;
    const auto eq = key.find('=');
    if (eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw UsageError("option --" + key + " needs a value");
      value = extras[++i];
    }
    if (key.find('.') == std::string::npos) throw UsageError("unknown option --" + key);
    set_in_json(j, key, value);
  }
  cfg = RunConfig::from_json(j);
  if (o.deterministic) cfg.deterministic = true;
  return cfg;
}

fs::path resolve_out(const CommonOpts& o, const std::string& command, const nlohmann::json& digest_src) {
  if (!o.out.empty()) return o.out;
  if (const char* root = std::getenv("BLOCKRANK_OUT"); root && *root)
    return fs::path(root) / (command + "-" + config_digest(digest_src));
  throw UsageError("--out is required (or set BLOCKRANK_OUT)");
}

void prepare_out(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw Error(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir)) {
      if (!force) throw Error("output directory " + dir.string() + " is not empty; pass --force to overwrite");
      fs::remove_all(dir);
    }
  }
  fs::create_directories(dir);
}

fs::path data_file(const std::string& p, const char* default_name) {
  fs::path path(p);
  if (fs::is_directory(path)) path /= default_name;
  if (!fs::exists(path)) throw Error("data file " + path.string() + " not found");
  return path;
}

// A finished training run on disk.
int candidates_per_prompt(std::span<const RetrievalExample> data, int n_docs) {
  if (data.empty()) throw Error("dataset is empty");
  return n_docs > 0 ? n_docs : static_cast<int>(data.front().candidates.size());
}

std::vector<RetrievalExample> limited(std::vector<RetrievalExample> v, int limit) {
  if (limit > 0 && static_cast<int>(v.size()) > limit) v.resize(static_cast<std::size_t>(limit));
  return v;
}

// ---- gen-data

struct GenOpts {
  CommonOpts common;
  int n = 1000;
  int n_eval = 0;
  std::optional<int> n_docs;
  std::optional<std::uint64_t> seed;
};

int cmd_gen_data(const GenOpts& o, const std::vector<std::string>& extras, std::ostream& out) {
  auto cfg = resolve_config(o.common, extras);
  if (o.n_docs) cfg.task.n_docs = *o.n_docs;
  if (o.seed) cfg.task.seed = *o.seed;
  cfg.task.validate();
  if (o.n < 1) throw ConfigError("--n must be >= 1");
  if (o.n_eval < 0) throw ConfigError("--n-eval must be >= 0");
  nlohmann::json snapshot = {{"command", "gen-data"}, {"n", o.n}, {"n_eval", o.n_eval}, {"config", cfg.to_json()}};
  const auto dir = resolve_out(o.common, "gen-data", snapshot);
  prepare_out(dir, o.common.force);

  const auto train = generate_synthetic_dataset(cfg.task, o.n);
  write_examples(dir / "data.jsonl", train);
  snapshot["data_sha256"] = file_digest(dir / "data.jsonl");
  if (o.n_eval > 0) {
    SyntheticTaskConfig eval_task = cfg.task;
    eval_task.seed = mix_seed(cfg.task.seed, 1);
    write_examples(dir / "eval.jsonl", generate_synthetic_dataset(eval_task, o.n_eval));
    snapshot["eval_seed"] = eval_task.seed;
    snapshot["eval_sha256"] = file_digest(dir / "eval.jsonl");
  }
  write_json_file(dir / "config.json", snapshot);
  out << dir.string() << '\n';
  return 0;
}

// ---- train

struct TrainOpts {
  CommonOpts common;
  std::string data;
  std::string eval_data;
  int eval_n = 500;
  std::optional<std::uint64_t> init_seed;
  bool dry_run = false;
};

int cmd_train(const TrainOpts& o, const std::vector<std::string>& extras, std::ostream& out, std::ostream& err) {
  auto cfg = resolve_config(o.common, extras);
  cfg.validate();
  if (o.dry_run) {
    out << cfg.to_json().dump(2) << '\n';
    return 0;
  }
  if (o.data.empty()) throw UsageError("train needs --data");
  const auto data_path = data_file(o.data, "data.jsonl");
  const auto train_set = ingest_examples(data_path);
  std::vector<RetrievalExample> eval_set;
  if (!o.eval_data.empty()) eval_set = limited(ingest_examples(data_file(o.eval_data, "eval.jsonl")), o.eval_n);

  const int n_docs = candidates_per_prompt(train_set, cfg.train.n_docs);
  const auto vocab = build_vocab(corpus_texts(train_set), default_reserved_tokens(cfg.tmpl));
  cfg.model.vocab_size = vocab.size();
  cfg.tmpl.id_digits = id_digits_for(n_docs);
  cfg.validate();
  const PromptBuilder builder(vocab, cfg.tmpl, cfg.layout);
  const std::uint64_t init_seed = o.init_seed.value_or(cfg.train.seed);

  nlohmann::json snapshot = {{"command", "train"},
                             {"config", cfg.to_json()},
                             {"data", fs::absolute(data_path).string()},
                             {"data_sha256", file_digest(data_path)},
                             {"init_seed", init_seed}};
  if (!o.eval_data.empty()) snapshot["eval_data"] = fs::absolute(data_file(o.eval_data, "eval.jsonl")).string();
  const auto dir = resolve_out(o.common, "train", snapshot);
  prepare_out(dir, o.common.force);
  write_json_file(dir / "config.json", snapshot);
  write_json_file(dir / "vocab.json", vocab.to_json());

  const auto eval_prepared =
      eval_set.empty() ? std::vector<PreparedExample>{} : prepare_eval_set(eval_set, builder, cfg.train.n_docs, 1);
  auto attention_metrics = [&](const Parameters<float>& params) {
    EvalOptions eo;
    eo.l_star = cfg.train.l_star;
    eo.aggregation = cfg.train.aggregation;
    return evaluate(params, cfg.model, builder, eval_prepared, eo).metrics;
  };

  std::ofstream log(dir / "train_log.jsonl");
  std::ofstream evals;
  if (!eval_prepared.empty() && cfg.train.eval_every > 0) evals.open(dir / "evals.jsonl");
  const int report_every = std::max(1, cfg.train.total_steps / 20);
  auto state = make_train_state(init_parameters<float>(cfg.model, init_seed));
  try {
    train(state, train_set, cfg.model, builder, cfg.train, -1, [&](const StepLog& s, const TrainState& st) {
      log << s.to_json().dump() << '\n';
      if (s.step % report_every == 0 || s.step == cfg.train.total_steps)
        err << "step " << s.step << " total " << s.loss.total << " ntp " << s.loss.ntp << " aux " << s.loss.aux << '\n';
      if (cfg.train.eval_every > 0 && s.step % cfg.train.eval_every == 0 && s.step < cfg.train.total_steps) {
        CheckpointMeta meta;
        meta.step = s.step;
        meta.config = snapshot;
        if (!eval_prepared.empty()) {
          meta.metrics = attention_metrics(st.params).to_json();
          evals << nlohmann::json{{"step", s.step}, {"attention", meta.metrics}}.dump() << '\n' << std::flush;
        }
        save_checkpoint(dir / ("ckpt_step" + std::to_string(s.step) + ".ckpt"), cfg.model, st.params, &st.optimizer,
                        meta);
      }
    });
  } catch (const NonFiniteLossError& e) {
    write_json_file(dir / "nonfinite_batch.json", e.dump());
    throw;
  }

  CheckpointMeta meta;
  meta.step = state.optimizer.step;
  meta.config = snapshot;
  if (!eval_prepared.empty()) meta.metrics = {{"attention", attention_metrics(state.params).to_json()}};
  meta = save_checkpoint(dir / "model.ckpt", cfg.model, state.params, &state.optimizer, meta);
  write_json_file(dir / "meta.json", meta.to_json());
  out << dir.string() << '\n';
  return 0;
}

// ---- eval

struct EvalOpts {
  CommonOpts common;
  std::string ckpt;
  std::string data;
  std::string method = "attention";
  std::optional<int> l_star;
  int k = 10;
  int beam = 10;
  int limit = 0;
  std::uint64_t seed = 1;
};

int cmd_eval(const EvalOpts& o, const std::vector<std::string>& extras, std::ostream& out) {
  if (o.ckpt.empty()) throw UsageError("eval needs --ckpt");
  if (!extras.empty()) throw UsageError("unexpected argument '" + extras.front() + "'");
  const auto run = load_run(o.ckpt);
  const auto method = inference_method_from_string(o.method);
  const std::string data = o.data.empty() ? read_json_file(fs::path(o.ckpt) / "config.json").value("eval_data", "")
                                          : o.data;
  if (data.empty()) throw UsageError("eval needs --data (the run recorded no eval data)");
  const auto examples = limited(ingest_examples(data_file(data, "eval.jsonl")), o.limit);
  const int n_docs = candidates_per_prompt(examples, run.cfg.train.n_docs);
  const auto builder = builder_for(run.vocab, run.cfg.tmpl, run.cfg.layout, n_docs);
  const auto prepared = prepare_eval_set(examples, builder, run.cfg.train.n_docs, o.seed);

  EvalOptions eo;
  eo.method = method;
  eo.l_star = o.l_star.value_or(run.cfg.train.l_star);
  eo.top_k = o.k;
  eo.beam = o.beam;
  eo.aggregation = run.cfg.train.aggregation;
  const auto res = evaluate(run.ck.params, run.ck.config, builder, prepared, eo);

  nlohmann::json summary = {{"method", to_string(method)},
                            {"l_star", eo.l_star},
                            {"checkpoint_digest", run.ck.meta.content_digest},
                            {"data", data},
                            {"metrics", res.metrics.to_json()},
                            {"median_latency_ms", res.median_latency_ms}};
  const auto digest = config_digest({{"ckpt", run.ck.meta.content_digest}, {"method", o.method}, {"l_star", eo.l_star},
                                     {"data", data}, {"k", o.k}, {"beam", o.beam}, {"limit", o.limit}});
  CommonOpts c = o.common;
  if (c.out.empty()) c.out = (fs::path(o.ckpt) / ("eval-" + to_string(method))).string();
  const auto dir = resolve_out(c, "eval", summary);
  prepare_out(dir, o.common.force);
  write_json_file(dir / ("metrics_" + digest + ".json"), summary);
  std::ofstream preds(dir / ("predictions_" + digest + ".jsonl"));
  for (std::size_t i = 0; i < res.predictions.size(); ++i)
    preds << res.predictions[i].to_json(std::to_string(i)).dump() << '\n';
  out << summary.dump(2) << '\n';
  return 0;
}

// ---- bench

struct BenchOpts {
  CommonOpts common;
  std::string ckpt;
  std::vector<int> n_values{16, 32, 64, 128};
  std::vector<std::string> modes{"blockwise", "dense"};
  std::vector<std::string> methods{"attention", "greedy"};
  int repeats = 5;
  int warmup = 3;
};

int cmd_bench(const BenchOpts& o, const std::vector<std::string>& extras, std::ostream& out) {
  if (o.ckpt.empty()) throw UsageError("bench needs --ckpt");
  if (!extras.empty()) throw UsageError("unexpected argument '" + extras.front() + "'");
  const auto run = load_run(o.ckpt);
  BenchmarkSpec spec;
  spec.n_values = o.n_values;
  for (const auto& m : o.modes) spec.modes.push_back(attention_mode_from_string(m));
  for (const auto& m : o.methods) spec.methods.push_back(inference_method_from_string(m));
  spec.repeats = o.repeats;
  spec.warmup = o.warmup;
  spec.l_star = run.cfg.train.l_star;
  spec.task = run.cfg.task;
  const PromptBuilder builder(run.vocab, run.cfg.tmpl, run.cfg.layout);
  const auto rep = scaling_benchmark(run.ck.params, run.ck.config, builder, spec);

  nlohmann::json summary = rep.to_json();
  summary["checkpoint_digest"] = run.ck.meta.content_digest;
  const auto digest = config_digest({{"ckpt", run.ck.meta.content_digest}, {"N", o.n_values}, {"modes", o.modes},
                                     {"methods", o.methods}, {"repeats", o.repeats}});
  CommonOpts c = o.common;
  if (c.out.empty()) c.out = (fs::path(o.ckpt) / "bench").string();
  const auto dir = resolve_out(c, "bench", summary);
  prepare_out(dir, o.common.force);
  write_text_file(dir / ("latency_" + digest + ".csv"), rep.to_csv());
  write_json_file(dir / ("latency_" + digest + ".json"), summary);
  out << rep.to_csv();
  return 0;
}

// ---- analyze

struct AnalyzeOpts {
  CommonOpts common;
  std::string ckpt;
  std::string data;
  int index = 0;
  std::vector<int> layers;
  int n_layerwise = 200;
  int monte_carlo = 5000;
  std::uint64_t seed = 1;
  bool dump_layout = false;
};

int cmd_analyze(const AnalyzeOpts& o, const std::vector<std::string>& extras, std::ostream& out) {
  if (o.ckpt.empty()) throw UsageError("analyze needs --ckpt");
  if (!extras.empty()) throw UsageError("unexpected argument '" + extras.front() + "'");
  const auto run = load_run(o.ckpt);
  const std::string data = o.data.empty() ? read_json_file(fs::path(o.ckpt) / "config.json").value("eval_data", "")
                                          : o.data;
  if (data.empty()) throw UsageError("analyze needs --data (the run recorded no eval data)");
  const auto examples = limited(ingest_examples(data_file(data, "eval.jsonl")), std::max(o.n_layerwise, o.index + 1));
  if (o.index < 0 || o.index >= static_cast<int>(examples.size())) throw UsageError("--index out of range");
  const int n_docs = candidates_per_prompt(examples, run.cfg.train.n_docs);
  const auto builder = builder_for(run.vocab, run.cfg.tmpl, run.cfg.layout, n_docs);
  const auto prepared = prepare_eval_set(examples, builder, run.cfg.train.n_docs, o.seed);
  const auto& model = run.ck.config;

  const auto digest = config_digest({{"ckpt", run.ck.meta.content_digest}, {"data", data}, {"index", o.index}});
  CommonOpts c = o.common;
  if (c.out.empty()) c.out = (fs::path(o.ckpt) / "analysis").string();
  const auto dir = resolve_out(c, "analyze", {{"digest", digest}});
  prepare_out(dir, o.common.force);

  std::vector<int> layers = o.layers;
  if (layers.empty())
    for (int l = 0; l < model.n_layers; ++l) layers.push_back(l);
  const auto& focus = prepared[static_cast<std::size_t>(o.index)];
  auto heat = export_attention_heatmaps(run.ck.params, focus.layout, model, layers);
  heat.metadata["positive"] = focus.layout.doc_ids[static_cast<std::size_t>(focus.positive)];
  write_heatmaps(heat, dir, digest);
  if (o.dump_layout) write_json_file(dir / ("layout_" + digest + ".json"), layout_to_json(focus.layout));

  const auto curve = layerwise_attention_precision(
      run.ck.params, model,
      std::span<const PreparedExample>(prepared).subspan(0, std::min<std::size_t>(prepared.size(), static_cast<std::size_t>(o.n_layerwise))),
      run.cfg.train.aggregation);
  write_json_file(dir / ("layerwise_" + digest + ".json"), curve.to_json());
  {
    std::ostringstream csv;
    csv << "layer,p_at_1,mrr_at_10\n";
    for (std::size_t l = 0; l < curve.p_at_1.size(); ++l) csv << l << ',' << curve.p_at_1[l] << ',' << curve.mrr_at_10[l] << '\n';
    write_text_file(dir / ("layerwise_" + digest + ".csv"), csv.str());
  }

  nlohmann::json entropy = {{"random", id_digit_entropy(random_id_lists(o.monte_carlo, o.seed)).to_json()}};
  if (n_docs >= 10 && n_docs <= 100) {
    std::vector<std::vector<std::string>> lists;
    const auto tok = builder.decode_tokens();
    for (const auto& ex : prepared)
      lists.push_back(constrained_beam_decode(run.ck.params, ex.layout, model, tok, 10).ranked_ids);
    entropy["model_beam"] = id_digit_entropy(lists).to_json();
  } else {
    entropy["model_beam"] = "skipped: needs 10..100 candidates per prompt";
  }
  write_json_file(dir / ("entropy_" + digest + ".json"), entropy);
  out << nlohmann::json{{"layerwise", curve.to_json()}, {"entropy", entropy}}.dump(2) << '\n';
  return 0;
}

// ---- ablate

struct AblateOpts {
  CommonOpts common;
  std::string data;
  std::string eval_data;
  int eval_n = 500;
  std::vector<std::string> loss_modes{"ntp_only", "ntp_plus_aux"};
  std::vector<std::string> attention_modes{"blockwise"};
  std::vector<std::string> methods{"greedy", "attention"};
  std::vector<std::string> query_in_prefix{"true"};
};

int cmd_ablate(const AblateOpts& o, const std::vector<std::string>& extras, std::ostream& out) {
  auto cfg = resolve_config(o.common, extras);
  cfg.validate();
  if (o.data.empty() || o.eval_data.empty()) throw UsageError("ablate needs --data and --eval-data");
  AblationGrid grid;
  grid.loss_modes.clear();
  grid.attention_modes.clear();
  grid.methods.clear();
  grid.query_in_prefix.clear();
  for (const auto& s : o.loss_modes) grid.loss_modes.push_back(loss_mode_from_string(s));
  for (const auto& s : o.attention_modes) grid.attention_modes.push_back(attention_mode_from_string(s));
  for (const auto& s : o.methods) grid.methods.push_back(inference_method_from_string(s));
  for (const auto& s : o.query_in_prefix) {
    if (s != "true" && s != "false") throw UsageError("--query-in-prefix takes true/false");
    grid.query_in_prefix.push_back(s == "true");
  }

  AblationBase base;
  base.train_set = ingest_examples(data_file(o.data, "data.jsonl"));
  base.eval_set = limited(ingest_examples(data_file(o.eval_data, "eval.jsonl")), o.eval_n);
  const int n_docs = candidates_per_prompt(base.train_set, cfg.train.n_docs);
  cfg.tmpl.id_digits = id_digits_for(n_docs);
  base.model = cfg.model;
  base.train = cfg.train;
  base.tmpl = cfg.tmpl;
  base.layout = cfg.layout;
  base.init_seed = cfg.train.seed;
  base.eval_n_docs = cfg.train.n_docs;

  nlohmann::json snapshot = {{"command", "ablate"},
                             {"config", cfg.to_json()},
                             {"grid", {{"loss_modes", o.loss_modes}, {"attention_modes", o.attention_modes},
                                       {"methods", o.methods}, {"query_in_prefix", o.query_in_prefix}}},
                             {"data_sha256", file_digest(data_file(o.data, "data.jsonl"))},
                             {"eval_sha256", file_digest(data_file(o.eval_data, "eval.jsonl"))},
                             {"eval_n", o.eval_n}};
  const auto digest = config_digest(snapshot);
  const auto dir = resolve_out(o.common, "ablate", snapshot);
  prepare_out(dir, o.common.force);
  write_json_file(dir / "config.json", snapshot);
  const auto rep = run_ablation_grid(grid, base);
  write_text_file(dir / ("ablation_" + digest + ".csv"), rep.to_csv());
  write_json_file(dir / ("ablation_" + digest + ".json"), rep.to_json());
  out << rep.to_csv();
  return 0;
}

}  // namespace

LoadedRun load_run(const std::filesystem::path& dir) {
  if (!fs::is_directory(dir)) throw Error("checkpoint directory " + dir.string() + " not found");
  LoadedRun r{RunConfig::from_json(read_json_file(dir / "config.json").at("config")), load_checkpoint(dir / "model.ckpt"),
              Vocabulary::from_json(read_json_file(dir / "vocab.json"))};
  r.cfg.model = r.ck.config;
  return r;
}

PromptBuilder builder_for(const Vocabulary& vocab, TemplateConfig tmpl, const LayoutConfig& layout, int n_docs) {
  tmpl.id_digits = id_digits_for(n_docs);
  return PromptBuilder(vocab, tmpl, layout);
}

nlohmann::json RunConfig::to_json() const {
  return {{"model", model.to_json()}, {"train", train.to_json()}, {"template", tmpl.to_json()},
          {"task", task.to_json()},   {"layout", layout.to_json()}, {"run", {{"deterministic", deterministic}}}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig defaults;
  nlohmann::json nested = defaults.to_json();
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto [section, field] = split_key(it.key());
    if (field.empty()) {
      if (!nested.contains(section)) throw ConfigError("unknown config section '" + it.key() + "'");
      if (!it.value().is_object()) throw ConfigError("config section '" + it.key() + "' must be an object");
      for (auto f = it.value().begin(); f != it.value().end(); ++f) {
        if (!nested[section].contains(f.key())) throw ConfigError("unknown config key '" + section + "." + f.key() + "'");
        nested[section][f.key()] = f.value();
      }
    } else {
      if (!nested.contains(section) || !nested[section].contains(field))
        throw ConfigError("unknown config key '" + it.key() + "'");
      nested[section][field] = it.value();
    }
  }
  RunConfig c;
  std::string where;
  try {
    where = "model";
    c.model = ModelConfig::from_json(nested.at("model"));
    where = "train";
    c.train = TrainConfig::from_json(nested.at("train"));
    where = "template";
    c.tmpl = TemplateConfig::from_json(nested.at("template"));
    where = "task";
    c.task = SyntheticTaskConfig::from_json(nested.at("task"));
    where = "layout";
    c.layout = LayoutConfig::from_json(nested.at("layout"));
    where = "run";
    c.deterministic = nested.at("run").value("deterministic", true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return c;
}

void RunConfig::set(std::string_view dotted_key, const std::string& value) {
  auto j = to_json();
  set_in_json(j, dotted_key, value);
  *this = from_json(j);
}

void RunConfig::validate() const {
  ModelConfig m = model;
  if (m.vocab_size < 1) m.vocab_size = 1;
  m.validate();
  train.validate(m);
  tmpl.validate();
  task.validate();
  layout.validate();
  if (layout.query_offset + layout.chunk_len > model.max_position)
    throw ConfigError("model.max_position must be at least layout.query_offset + layout.chunk_len (" +
                      std::to_string(layout.query_offset + layout.chunk_len) + ")");
}

RunConfig paper_scale_profile() {
  RunConfig c;
  // 7B-class decoder shape; only the mechanism-level values matter at desk scale.
  c.model.n_layers = 32;
  c.model.n_heads = 32;
  c.model.d_model = 4096;
  c.model.mlp_hidden = 14336;
  c.model.max_position = 32768;
  c.train.lambda = 0.1;
  c.train.tau = 0.05;
  c.train.l_star = 20;
  c.train.lr_peak = 3e-7;
  c.train.batch_size = 32;
  c.train.n_docs = 30;
  c.layout.chunk_len = 160;
  c.layout.query_offset = 8192;
  return c;
}

int run_command(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"blockrank: blockwise in-context ranking toolkit", "blockrank"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  GenOpts gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic ranking dataset");
  add_common(gen_cmd, gen.common);
  gen_cmd->add_option("--n", gen.n, "Training examples");
  gen_cmd->add_option("--n-eval", gen.n_eval, "Held-out examples written to eval.jsonl");
  gen_cmd->add_option("--N", gen.n_docs, "Candidates per example (task.n_docs)");
  gen_cmd->add_option("--seed", gen.seed, "Generator seed (task.seed)");

  TrainOpts tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  add_common(train_cmd, tr.common);
  train_cmd->add_option("--data", tr.data, "Training JSONL file or gen-data directory");
  train_cmd->add_option("--eval-data", tr.eval_data, "Held-out JSONL file or directory");
  train_cmd->add_option("--eval-n", tr.eval_n, "Held-out examples used for periodic evaluation");
  train_cmd->add_option("--init-seed", tr.init_seed, "Parameter init seed (default train.seed)");
  train_cmd->add_flag("--dry-run", tr.dry_run, "Print the merged config and exit");

  EvalOpts ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a trained model");
  add_common(eval_cmd, ev.common);
  eval_cmd->add_option("--ckpt", ev.ckpt, "Training run directory");
  eval_cmd->add_option("--data", ev.data, "Evaluation JSONL (default: the run's eval data)");
  eval_cmd->add_option("--method", ev.method, "attention, greedy or beam");
  eval_cmd->add_option("--l-star", ev.l_star, "Scoring layer for attention inference");
  eval_cmd->add_option("--k", ev.k, "Ranked list length for attention inference");
  eval_cmd->add_option("--beam", ev.beam, "Beam width");
  eval_cmd->add_option("--limit", ev.limit, "Evaluate only the first n examples");
  eval_cmd->add_option("--seed", ev.seed, "Candidate shuffle seed");

  BenchOpts be;
  auto* bench_cmd = app.add_subcommand("bench", "Latency scaling benchmark");
  add_common(bench_cmd, be.common);
  bench_cmd->add_option("--ckpt", be.ckpt, "Training run directory");
  bench_cmd->add_option("--N", be.n_values, "Candidate counts")->delimiter(',');
  bench_cmd->add_option("--modes", be.modes, "Attention modes")->delimiter(',');
  bench_cmd->add_option("--methods", be.methods, "Inference methods")->delimiter(',');
  bench_cmd->add_option("--repeats", be.repeats, "Timed repeats per cell");
  bench_cmd->add_option("--warmup", be.warmup, "Untimed warmup runs per cell");

  AnalyzeOpts an;
  auto* analyze_cmd = app.add_subcommand("analyze", "Attention heatmaps, layerwise probe and id entropy");
  add_common(analyze_cmd, an.common);
  analyze_cmd->add_option("--ckpt", an.ckpt, "Training run directory");
  analyze_cmd->add_option("--data", an.data, "Evaluation JSONL (default: the run's eval data)");
  analyze_cmd->add_option("--index", an.index, "Example used for heatmaps");
  analyze_cmd->add_option("--layers", an.layers, "Layers for heatmaps")->delimiter(',');
  analyze_cmd->add_option("--n-layerwise", an.n_layerwise, "Examples for the layerwise curve");
  analyze_cmd->add_option("--mc", an.monte_carlo, "Random-baseline lists for the entropy table");
  analyze_cmd->add_option("--seed", an.seed, "Shuffle and Monte Carlo seed");
  analyze_cmd->add_flag("--dump-layout", an.dump_layout, "Write the chunk layout of the heatmap example");

  AblateOpts ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate an ablation grid");
  add_common(ablate_cmd, ab.common);
  ablate_cmd->add_option("--data", ab.data, "Training JSONL file or directory");
  ablate_cmd->add_option("--eval-data", ab.eval_data, "Held-out JSONL file or directory");
  ablate_cmd->add_option("--eval-n", ab.eval_n, "Held-out examples per cell");
  ablate_cmd->add_option("--loss-modes", ab.loss_modes, "ntp_only, aux_only, ntp_plus_aux")->delimiter(',');
  ablate_cmd->add_option("--attention-modes", ab.attention_modes, "blockwise, dense")->delimiter(',');
  ablate_cmd->add_option("--methods", ab.methods, "attention, greedy, beam")->delimiter(',');
  ablate_cmd->add_option("--query-in-prefix", ab.query_in_prefix, "true,false")->delimiter(',');

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    const auto extras = sub->remaining();
    if (sub == gen_cmd) return cmd_gen_data(gen, extras, out);
    if (sub == train_cmd) return cmd_train(tr, extras, out, err);
    if (sub == eval_cmd) return cmd_eval(ev, extras, out);
    if (sub == bench_cmd) return cmd_bench(be, extras, out);
    if (sub == analyze_cmd) return cmd_analyze(an, extras, out);
    if (sub == ablate_cmd) return cmd_ablate(ab, extras, out);
    throw UsageError("unknown command");
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace blockrank
