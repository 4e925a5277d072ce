#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <map>
#include <optional>
#include <sstream>

#include "blockrank/cli.hpp"
#include "blockrank/evaluation.hpp"

namespace py = pybind11;
using namespace blockrank;

// Structured values cross the boundary as JSON text; the Python package
// decodes them.
namespace {

RetrievalExample parse_example(const std::string& text) { return example_from_json(nlohmann::json::parse(text)); }

class Ranker {
 public:
  explicit Ranker(const std::string& run_dir) : run_(load_run(run_dir)) {}

  // Candidates are relabeled 0..N-1 in the given order for the prompt, and the
  // ranking is mapped back to the caller's ids.
  std::string rank(const std::string& example_json, const std::string& method, std::optional<int> l_star, int k,
                   int beam) const {
    auto ex = parse_example(example_json);
    const int n = static_cast<int>(ex.candidates.size());
    const auto builder = builder_for(run_.vocab, run_.cfg.tmpl, run_.cfg.layout, n);
    std::map<std::string, std::string> original;
    for (int i = 0; i < n; ++i) {
      auto& c = ex.candidates[static_cast<std::size_t>(i)];
      const auto id = format_doc_id(i, builder.template_config().id_digits);
      original[id] = c.doc_id;
      c.doc_id = id;
    }
    const auto layout = builder.build(ex, false);
    const auto& cfg = run_.ck.config;
    const auto& params = run_.ck.params;
    RankedPrediction r;
    switch (inference_method_from_string(method)) {
      case InferenceMethod::attention:
        r = rank_by_attention(params, layout, cfg, l_star.value_or(run_.cfg.train.l_star), k,
                              run_.cfg.train.aggregation);
        break;
      case InferenceMethod::greedy:
        r = greedy_decode_id(params, layout, cfg, builder.decode_tokens());
        break;
      case InferenceMethod::beam:
        r = constrained_beam_decode(params, layout, cfg, builder.decode_tokens(), beam);
        break;
    }
    for (auto& id : r.ranked_ids) id = original.at(id);
    return r.to_json("").dump();
  }

  std::string layerwise(const std::string& examples_json, std::uint64_t seed) const {
    std::vector<RetrievalExample> examples;
    for (const auto& j : nlohmann::json::parse(examples_json)) examples.push_back(example_from_json(j));
    if (examples.empty()) throw Error("layerwise: no examples");
    const int n = static_cast<int>(examples.front().candidates.size());
    const auto builder = builder_for(run_.vocab, run_.cfg.tmpl, run_.cfg.layout, n);
    const auto prepared = prepare_eval_set(examples, builder, 0, seed);
    return layerwise_attention_precision(run_.ck.params, run_.ck.config, prepared, run_.cfg.train.aggregation)
        .to_json()
        .dump();
  }

  std::string config() const { return run_.cfg.to_json().dump(); }
  int n_layers() const { return run_.ck.config.n_layers; }

 private:
  LoadedRun run_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of the blockrank package";

  // Translators run newest first, so the subclass is registered last.
  py::register_exception<Error>(m, "BlockRankError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_command(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"));

  m.def(
      "generate_synthetic",
      [](const std::string& task_json, int n) {
        const auto task = SyntheticTaskConfig::from_json(nlohmann::json::parse(task_json));
        nlohmann::json out = nlohmann::json::array();
        for (const auto& ex : generate_synthetic_dataset(task, n)) out.push_back(example_to_json(ex));
        return out.dump();
      },
      py::arg("task_json"), py::arg("n"));

  m.def(
      "compute_metrics",
      [](const std::vector<std::vector<std::string>>& rankings, const std::vector<std::vector<std::string>>& positives,
         bool per_query) {
        std::vector<RankedPrediction> preds(rankings.size());
        for (std::size_t i = 0; i < rankings.size(); ++i) preds[i].ranked_ids = rankings[i];
        return compute_metrics(preds, positives).to_json(per_query).dump();
      },
      py::arg("rankings"), py::arg("positives"), py::arg("per_query") = false);

  m.def(
      "analytic_scored_pairs",
      [](int n_docs, int chunk_len, const std::string& mode) {
        return analytic_scored_pairs(n_docs, chunk_len, attention_mode_from_string(mode));
      },
      py::arg("n_docs"), py::arg("chunk_len"), py::arg("mode") = "blockwise");

  m.def(
      "infonce_aux_loss",
      [](const std::vector<double>& scores, int positive, double tau, const std::vector<int>& excluded) {
        return infonce_aux_loss(scores, positive, tau, excluded);
      },
      py::arg("scores"), py::arg("positive"), py::arg("tau") = kDefaultTau, py::arg("excluded") = std::vector<int>{});

  m.def(
      "ntp_loss",
      [](const Mat<double>& logits, const std::vector<int>& rows, const std::vector<int>& targets) {
        return ntp_loss(logits, rows, targets);
      },
      py::arg("logits"), py::arg("rows"), py::arg("targets"));

  m.def(
      "id_digit_entropy",
      [](int n_lists, std::uint64_t seed) { return id_digit_entropy(random_id_lists(n_lists, seed)).to_json().dump(); },
      py::arg("n_lists") = 5000, py::arg("seed") = 0);

  py::class_<Ranker>(m, "Ranker")
      .def(py::init<const std::string&>(), py::arg("run_dir"))
      .def("rank", &Ranker::rank, py::arg("example_json"), py::arg("method") = "attention",
           py::arg("l_star") = py::none(), py::arg("k") = 0, py::arg("beam") = 10,
           py::call_guard<py::gil_scoped_release>())
      .def("layerwise", &Ranker::layerwise, py::arg("examples_json"), py::arg("seed") = 0,
           py::call_guard<py::gil_scoped_release>())
      .def("config", &Ranker::config)
      .def_property_readonly("n_layers", &Ranker::n_layers);
}
