#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "ahbd/ablation.hpp"
#include "ahbd/checkpoint.hpp"
#include "ahbd/classifier.hpp"
#include "ahbd/defense.hpp"
#include "ahbd/detector.hpp"
#include "ahbd/error.hpp"
#include "ahbd/eval.hpp"
#include "ahbd/pipeline.hpp"

namespace py = pybind11;
using namespace ahbd;

namespace {

Tensor to_tensor(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw DimensionError("empty matrix");
  Tensor t({rows.size(), rows[0].size()});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != rows[0].size()) throw DimensionError("ragged matrix");
    for (std::size_t c = 0; c < rows[r].size(); ++c) t.at(r, c) = static_cast<float>(rows[r][c]);
  }
  return t;
}

std::vector<std::vector<double>> to_rows(const Tensor& t) {
  std::vector<std::vector<double>> out(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) out[r][c] = t.at(r, c);
  return out;
}

py::dict stats_dict(const SimilarityStats& s) {
  py::dict d;
  d["pair_count"] = s.pair_count;
  d["above_theta"] = s.above_theta;
  d["proportion"] = s.proportion;
  d["p99"] = s.p99;
  d["theta"] = s.theta;
  d["per_head_max_sim"] = s.per_head_max_sim;
  return d;
}

py::dict eval_dict(const EvalReport& r) {
  py::dict d;
  d["ca"] = r.ca;
  d["asr"] = r.asr;
  d["n_clean"] = r.n_clean;
  d["n_poisoned"] = r.n_poisoned;
  d["mode"] = to_string(r.mode);
  return d;
}

py::dict rounds_dict(const SanitizeReport& r) {
  py::list rounds;
  for (const auto& x : r.rounds) {
    py::dict d;
    d["round"] = x.round;
    d["n_safe"] = x.n_safe;
    d["n_suspicious"] = x.n_suspicious;
    d["n_intermediate"] = x.n_intermediate;
    d["align_loss_first"] = x.align_loss_first;
    d["align_loss_last"] = x.align_loss_last;
    d["proportion_stat"] = x.proportion_stat;
    rounds.append(d);
  }
  py::dict d;
  d["rounds"] = rounds;
  d["stop_reason"] = r.stop_reason;
  d["warnings"] = r.warnings;
  return d;
}

std::vector<Sample> to_samples(const py::list& items) {
  std::vector<Sample> out;
  for (const auto& it : items) {
    auto t = it.cast<py::tuple>();
    out.push_back({t[0].cast<std::vector<int>>(), t[1].cast<int>(), false, TriggerKind::none});
  }
  return out;
}

PipelineConfig config_from(const std::string& json_text, const std::vector<std::string>& overrides) {
  auto doc = to_json(PipelineConfig{});
  if (!json_text.empty()) doc.merge_patch(nlohmann::ordered_json::parse(json_text));
  for (const auto& o : overrides) apply_override(doc, o);
  return pipeline_config_from_json(nlohmann::json::parse(doc.dump()));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Attention-similarity backdoor forensics and head-level sanitization";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<IndexError>(m, "IndexError", base.ptr());
  py::register_exception<LengthError>(m, "LengthError", base.ptr());
  py::register_exception<DegenerateError>(m, "DegenerateError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<DefenseAborted>(m, "DefenseAborted", base.ptr());

  m.attr("DEFAULT_ALPHA") = kDefaultAlpha;
  m.attr("DEFAULT_TAU") = kDefaultTau;
  m.attr("DEFAULT_THETA") = kDefaultTheta;

  m.def("attn_cosine", [](const std::vector<std::vector<double>>& p, const std::vector<std::vector<double>>& q) {
    return attn_cosine(to_tensor(p), to_tensor(q));
  });
  m.def(
      "pair_similarity_stats",
      [](const std::vector<std::vector<std::vector<double>>>& mats, int heads_per_layer, double theta,
         const std::string& scope) {
        if (heads_per_layer < 1) throw ContractError("heads_per_layer must be >= 1");
        std::vector<GenPromptSubmatrix> sub;
        for (std::size_t i = 0; i < mats.size(); ++i) {
          sub.push_back({static_cast<int>(i) / heads_per_layer, static_cast<int>(i) % heads_per_layer,
                         to_tensor(mats[i])});
        }
        return stats_dict(pair_similarity_stats(sub, theta, similarity_scope_from_string(scope)));
      },
      py::arg("matrices"), py::arg("heads_per_layer"), py::arg("theta") = kDefaultTheta, py::arg("scope") = "global");
  m.def("percentile", &percentile, py::arg("values"), py::arg("q"));
  m.def(
      "safety_scores",
      [](const std::vector<double>& g, const std::vector<double>& sim, double alpha) {
        return safety_scores(g, sim, alpha);
      },
      py::arg("g"), py::arg("max_sim"), py::arg("alpha") = kDefaultAlpha);
  m.def(
      "partition_heads",
      [](const std::vector<double>& s, double tau) {
        std::vector<HeadScore> scores(s.size());
        for (std::size_t i = 0; i < s.size(); ++i) {
          scores[i].id = {0, static_cast<int>(i)};
          scores[i].s_safe = s[i];
        }
        const auto p = partition_heads(std::move(scores), tau);
        std::vector<std::string> out;
        for (const auto& x : p.scores) out.push_back(to_string(x.cls));
        return out;
      },
      py::arg("s_safe"), py::arg("tau") = kDefaultTau);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("n_layers", &ModelConfig::n_layers)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("d_head", &ModelConfig::d_head)
      .def_readwrite("d_ff", &ModelConfig::d_ff)
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("max_seq", &ModelConfig::max_seq);

  py::class_<ModelParams>(m, "Model")
      .def_static(
          "init", [](const ModelConfig& c, std::uint64_t seed, double std) { return ModelParams::init(c, {seed, std}); },
          py::arg("config"), py::arg("seed") = 0, py::arg("std") = 0.2)
      .def_static("load", [](const std::filesystem::path& p) { return load_checkpoint(p); })
      .def("save", [](const ModelParams& p, const std::filesystem::path& path) { save_checkpoint(p, path); })
      .def("to_bytes",
           [](const ModelParams& p) {
             std::ostringstream ss;
             save_checkpoint(p, ss);
             return py::bytes(ss.str());
           })
      .def_property_readonly("config", &ModelParams::config)
      .def("parameter_count", &ModelParams::parameter_count)
      .def("predict_next", [](const ModelParams& p, const std::vector<int>& t) { return predict_next(p, t); })
      .def(
          "generate",
          [](const ModelParams& p, const std::vector<int>& prompt, std::size_t max_new) {
            return generate(p, prompt, max_new).tokens;
          },
          py::arg("prompt"), py::arg("max_new") = 1)
      .def(
          "attention",
          [](const ModelParams& p, const std::vector<int>& tokens) {
            const auto g = generate(p, tokens, 0);
            std::vector<std::vector<std::vector<double>>> out;
            for (const auto& r : g.records) out.push_back(to_rows(r.attn));
            return out;
          },
          "Attention matrices of every head, layer-major")
      .def(
          "analyze",
          [](const ModelParams& p, const std::vector<int>& prompt, double theta) {
            AnalysisOptions o;
            o.theta = theta;
            return stats_dict(analyze_input(p, prompt, o).stats);
          },
          py::arg("prompt"), py::arg("theta") = kDefaultTheta)
      .def(
          "gradient_sensitivity",
          [](const ModelParams& p, const std::vector<std::pair<std::vector<int>, int>>& items) {
            std::vector<ScoringSample> s;
            for (const auto& [prompt, target] : items) s.push_back({prompt, target});
            return gradient_sensitivity(p, std::span<const ScoringSample>(s));
          })
      .def(
          "classify_heads",
          [](const ModelParams& p, const std::vector<std::vector<int>>& inputs, double alpha, double tau) {
            const auto part = classify_heads(p, inputs, {alpha, tau, {}});
            py::list out;
            for (const auto& s : part.scores) {
              py::dict d;
              d["layer"] = s.id.layer;
              d["head"] = s.id.head;
              d["g"] = s.g;
              d["max_sim"] = s.max_sim;
              d["s_safe"] = s.s_safe;
              d["class"] = to_string(s.cls);
              out.append(d);
            }
            return out;
          },
          py::arg("inputs"), py::arg("alpha") = kDefaultAlpha, py::arg("tau") = kDefaultTau)
      .def("__eq__", [](const ModelParams& a, const ModelParams& b) { return a == b; });

  py::class_<CalibrationProfile>(m, "Calibration")
      .def_readonly("n_inputs", &CalibrationProfile::n_inputs)
      .def_readonly("proportion_threshold", &CalibrationProfile::proportion_threshold)
      .def_readonly("p99_threshold", &CalibrationProfile::p99_threshold);

  m.def(
      "calibrate",
      [](const ModelParams& p, const std::vector<std::vector<int>>& prompts, double theta) {
        std::vector<SimilarityStats> st;
        AnalysisOptions o;
        o.theta = theta;
        for (const auto& x : prompts) st.push_back(analyze_input(p, x, o).stats);
        return calibrate(st);
      },
      py::arg("model"), py::arg("clean_prompts"), py::arg("theta") = kDefaultTheta);
  m.def(
      "detect",
      [](const ModelParams& p, const std::vector<int>& prompt, const CalibrationProfile& c) {
        AnalysisOptions o;
        o.theta = c.theta;
        o.scope = c.scope;
        const auto d = detect_trigger(analyze_input(p, prompt, o).stats, &c);
        return py::make_tuple(to_string(d.verdict), d.margin);
      },
      py::arg("model"), py::arg("prompt"), py::arg("calibration"));

  py::class_<PipelineConfig>(m, "Config")
      .def(py::init(&config_from), py::arg("json") = "", py::arg("overrides") = std::vector<std::string>{})
      .def("to_json", [](const PipelineConfig& c) { return to_json(c).dump(); })
      .def_readonly("seed", &PipelineConfig::seed)
      .def_readonly("model", &PipelineConfig::model);

  py::class_<Datasets>(m, "Datasets")
      .def(py::init(&build_datasets))
      .def_property_readonly("trigger", [](const Datasets& d) { return d.spec.trigger_tokens; })
      .def_property_readonly("attacker_target", [](const Datasets& d) { return d.spec.attacker_target; })
      .def("prompts", [](const Datasets& d, const std::string& split) {
        const Corpus* c = split == "train"            ? &d.train
                          : split == "poisoned_train" ? &d.poisoned_train
                          : split == "calib"          ? &d.calib
                          : split == "heldout"        ? &d.heldout
                          : split == "defense"        ? &d.defense_clean
                          : split == "test"           ? &d.sets.clean_test
                          : split == "asr_test"       ? &d.sets.poisoned_test
                                                      : nullptr;
        if (!c) throw ContractError("unknown split '" + split + "'");
        std::vector<std::pair<std::vector<int>, int>> out;
        for (const auto& s : *c) out.emplace_back(s.prompt, s.target);
        return out;
      });

  m.def("train_clean", [](const PipelineConfig& c, const Datasets& d) { return train_clean_model(c, d); });
  m.def("implant", [](const PipelineConfig& c, const ModelParams& clean, const Datasets& d) {
    return implant_backdoor(c, clean, d);
  });
  m.def("evaluate", [](const ModelParams& p, const Datasets& d) { return eval_dict(evaluate(p, d.sets)); });
  m.def(
      "sanitize",
      [](const ModelParams& p, const std::vector<std::vector<int>>& suspects, const py::list& clean,
         const PipelineConfig& c) {
        auto model = p;
        const auto samples = to_samples(clean);
        const auto rep = sanitize(model, suspects, samples, c.resolved_defense());
        return py::make_tuple(model, rounds_dict(rep));
      },
      py::arg("model"), py::arg("suspects"), py::arg("clean_samples"), py::arg("config"),
      "Returns (sanitized_model, report); the input model is left untouched");
}
