#include "ahbd/pipeline.hpp"

#include <fstream>
#include <sstream>

#include "ahbd/error.hpp"
#include "ahbd/rng.hpp"

namespace ahbd {

using nlohmann::json;
using nlohmann::ordered_json;

void PipelineConfig::validate() const {
  model.validate();
  if (!(init_std > 0)) throw ContractError("config: model.init_std must be > 0");
  if (corpus.n_train == 0 || corpus.n_test == 0 || corpus.n_defense == 0) {
    throw ContractError("config: corpus sizes must be >= 1");
  }
  if (corpus.n_calib < CalibrationProfile::kMinInputs) {
    throw ContractError("config: corpus.n_calib must be >= " + std::to_string(CalibrationProfile::kMinInputs));
  }
  if (corpus.min_len == 0 || corpus.min_len > corpus.len) throw ContractError("config: need 1 <= min_len <= len");
  if (!(trigger.poison_rate >= 0 && trigger.poison_rate <= 1)) {
    throw ContractError("config: trigger.poison_rate must lie in [0, 1]");
  }
  if (trigger.kind == TriggerKind::none) throw ContractError("config: trigger.kind must name a trigger");
  clean_train.validate();
  implant.validate();
  if (!(detector.theta >= -1 && detector.theta <= 1)) throw ContractError("config: detector.theta must lie in [-1, 1]");
  if (detector.max_new == 0) throw ContractError("config: detector.max_new must be >= 1");
  if (n_suspect == 0) throw ContractError("config: n_suspect must be >= 1");
  resolved_defense().validate();
}

DefenseConfig PipelineConfig::resolved_defense() const {
  DefenseConfig d = defense;
  d.alpha = alpha;
  d.tau = tau;
  d.analysis = detector;
  d.seed = substream_seed(seed, "defense.finetune");
  return d;
}

ordered_json to_json(const PipelineConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["model"] = {{"n_layers", c.model.n_layers}, {"n_heads", c.model.n_heads},       {"d_model", c.model.d_model},
                {"d_head", c.model.d_head},     {"d_ff", c.model.d_ff},             {"vocab_size", c.model.vocab_size},
                {"max_seq", c.model.max_seq},   {"init_std", c.init_std}};
  j["corpus"] = {{"n_train", c.corpus.n_train}, {"n_test", c.corpus.n_test},       {"n_calib", c.corpus.n_calib},
                 {"n_heldout", c.corpus.n_heldout}, {"n_defense", c.corpus.n_defense}, {"len", c.corpus.len},
                 {"min_len", c.corpus.min_len}};
  j["trigger"] = {{"kind", to_string(c.trigger.kind)}, {"poison_rate", c.trigger.poison_rate}};
  auto train_json = [](const TrainConfig& t) {
    return ordered_json{{"epochs", t.epochs}, {"lr", t.lr}, {"batch_size", t.batch_size}};
  };
  j["clean_train"] = train_json(c.clean_train);
  j["implant"] = train_json(c.implant);
  j["detector"] = {{"theta", c.detector.theta}, {"scope", to_string(c.detector.scope)}, {"max_new", c.detector.max_new}};
  j["classifier"] = {{"alpha", c.alpha}, {"tau", c.tau}};
  const auto& d = c.defense;
  j["defense"] = {{"eta_low", d.eta_low},         {"eta_mid", d.eta_mid},       {"eta_high", d.eta_high},
                  {"align_lr", d.align_lr},       {"align_steps", d.align_steps}, {"ft_epochs", d.ft_epochs},
                  {"ft_batch_size", d.ft_batch_size}, {"max_rounds", d.max_rounds}, {"stop_margin", d.stop_margin},
                  {"n_suspect", c.n_suspect}};
  j["output_dir"] = c.output_dir;
  return j;
}

namespace {

template <class T>
void read(const json& obj, const char* key, T& dst) {
  if (obj.contains(key)) dst = obj.at(key).get<T>();
}

void reject_unknown(const json& obj, std::initializer_list<const char*> keys, const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : keys) ok = ok || it.key() == k;
    if (!ok) throw ContractError("config: unknown key '" + where + it.key() + "'");
  }
}

}  // namespace

PipelineConfig pipeline_config_from_json(const json& j) {
  PipelineConfig c;
  try {
    if (!j.is_object()) throw ContractError("config: top level must be an object");
    reject_unknown(j,
                   {"seed", "model", "corpus", "trigger", "clean_train", "implant", "detector", "classifier", "defense",
                    "output_dir"},
                   "");
    read(j, "seed", c.seed);
    read(j, "output_dir", c.output_dir);
    if (j.contains("model")) {
      const auto& m = j.at("model");
      reject_unknown(m, {"n_layers", "n_heads", "d_model", "d_head", "d_ff", "vocab_size", "max_seq", "init_std"},
                     "model.");
      read(m, "n_layers", c.model.n_layers);
      read(m, "n_heads", c.model.n_heads);
      read(m, "d_model", c.model.d_model);
      read(m, "d_head", c.model.d_head);
      read(m, "d_ff", c.model.d_ff);
      read(m, "vocab_size", c.model.vocab_size);
      read(m, "max_seq", c.model.max_seq);
      read(m, "init_std", c.init_std);
    }
    if (j.contains("corpus")) {
      const auto& m = j.at("corpus");
      reject_unknown(m, {"n_train", "n_test", "n_calib", "n_heldout", "n_defense", "len", "min_len"}, "corpus.");
      read(m, "n_train", c.corpus.n_train);
      read(m, "n_test", c.corpus.n_test);
      read(m, "n_calib", c.corpus.n_calib);
      read(m, "n_heldout", c.corpus.n_heldout);
      read(m, "n_defense", c.corpus.n_defense);
      read(m, "len", c.corpus.len);
      read(m, "min_len", c.corpus.min_len);
    }
    if (j.contains("trigger")) {
      const auto& m = j.at("trigger");
      reject_unknown(m, {"kind", "poison_rate"}, "trigger.");
      if (m.contains("kind")) c.trigger.kind = trigger_kind_from_string(m.at("kind").get<std::string>());
      read(m, "poison_rate", c.trigger.poison_rate);
    }
    auto read_train = [](const json& m, TrainConfig& t, const std::string& where) {
      reject_unknown(m, {"epochs", "lr", "batch_size"}, where);
      read(m, "epochs", t.epochs);
      read(m, "lr", t.lr);
      read(m, "batch_size", t.batch_size);
    };
    if (j.contains("clean_train")) read_train(j.at("clean_train"), c.clean_train, "clean_train.");
    if (j.contains("implant")) read_train(j.at("implant"), c.implant, "implant.");
    if (j.contains("detector")) {
      const auto& m = j.at("detector");
      reject_unknown(m, {"theta", "scope", "max_new"}, "detector.");
      read(m, "theta", c.detector.theta);
      if (m.contains("scope")) c.detector.scope = similarity_scope_from_string(m.at("scope").get<std::string>());
      read(m, "max_new", c.detector.max_new);
    }
    if (j.contains("classifier")) {
      const auto& m = j.at("classifier");
      reject_unknown(m, {"alpha", "tau"}, "classifier.");
      read(m, "alpha", c.alpha);
      read(m, "tau", c.tau);
    }
    if (j.contains("defense")) {
      const auto& m = j.at("defense");
      reject_unknown(m,
                     {"eta_low", "eta_mid", "eta_high", "align_lr", "align_steps", "ft_epochs", "ft_batch_size",
                      "max_rounds", "stop_margin", "n_suspect"},
                     "defense.");
      read(m, "eta_low", c.defense.eta_low);
      read(m, "eta_mid", c.defense.eta_mid);
      read(m, "eta_high", c.defense.eta_high);
      read(m, "align_lr", c.defense.align_lr);
      read(m, "align_steps", c.defense.align_steps);
      read(m, "ft_epochs", c.defense.ft_epochs);
      read(m, "ft_batch_size", c.defense.ft_batch_size);
      read(m, "max_rounds", c.defense.max_rounds);
      read(m, "stop_margin", c.defense.stop_margin);
      read(m, "n_suspect", c.n_suspect);
    }
  } catch (const json::exception& e) {
    throw ContractError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

void apply_override(ordered_json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ContractError("override '" + assignment + "' is not of the form path=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  ordered_json* node = &doc;
  std::stringstream ss(path);
  std::string key;
  std::vector<std::string> parts;
  while (std::getline(ss, key, '.')) parts.push_back(key);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i])) {
      throw ContractError("override: unknown config path '" + path + "'");
    }
    node = &(*node)[parts[i]];
  }
  if (node->is_object()) throw ContractError("override: '" + path + "' names a section, not a value");
  ordered_json value = ordered_json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  *node = std::move(value);
}

PipelineConfig load_pipeline_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  ordered_json doc = to_json(PipelineConfig{});
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ContractError("config: cannot open " + path.string());
    ordered_json user = ordered_json::parse(in, nullptr, false);
    if (user.is_discarded()) throw ContractError("config: " + path.string() + " is not valid JSON");
    // Validate the user document on its own so unknown keys are reported.
    pipeline_config_from_json(json::parse(user.dump()));
    doc.merge_patch(user);
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return pipeline_config_from_json(json::parse(doc.dump()));
}

Datasets build_datasets(const PipelineConfig& cfg) {
  cfg.validate();
  Datasets d;
  d.vocab = Vocabulary::for_size(cfg.model.vocab_size);
  const auto& c = cfg.corpus;
  const int T = cfg.model.max_seq;
  auto gen = [&](const char* name, std::size_t n) {
    return gen_clean_corpus(d.vocab, substream_seed(cfg.seed, name), n, c.len, T, c.min_len);
  };
  d.train = gen("corpus.train", c.n_train);
  d.calib = gen("corpus.calib", c.n_calib);
  d.heldout = gen("corpus.heldout", std::max<std::size_t>(c.n_heldout, 1));
  d.defense_clean = gen("corpus.defense", c.n_defense);
  Rng trig(substream_seed(cfg.seed, "trigger"));
  d.spec = TriggerSpec::make(cfg.trigger.kind, d.vocab, trig);
  d.poisoned_train =
      build_poisoned_corpus(d.train, d.spec, cfg.trigger.poison_rate, substream_seed(cfg.seed, "poison"), T);
  d.sets.clean_test = gen("corpus.test", c.n_test);
  d.sets.poisoned_test = build_asr_test(d.sets.clean_test, d.spec, substream_seed(cfg.seed, "asr_test"), T);
  d.sets.attacker_target = d.spec.attacker_target;
  return d;
}

ModelParams init_model(const PipelineConfig& cfg) {
  return ModelParams::init(cfg.model, {substream_seed(cfg.seed, "init"), cfg.init_std});
}

ModelParams train_clean_model(const PipelineConfig& cfg, const Datasets& data, TrainResult* trace) {
  auto params = init_model(cfg);
  TrainConfig t = cfg.clean_train;
  t.seed = substream_seed(cfg.seed, "train.clean");
  auto r = train(params, data.train, t);
  if (trace) *trace = std::move(r);
  return params;
}

ModelParams implant_backdoor(const PipelineConfig& cfg, const ModelParams& clean, const Datasets& data,
                             TrainResult* trace) {
  auto params = clean;
  TrainConfig t = cfg.implant;
  t.seed = substream_seed(cfg.seed, "train.implant");
  auto r = train(params, data.poisoned_train, t);
  if (trace) *trace = std::move(r);
  return params;
}

CalibrationProfile calibrate_model(const ModelParams& params, const Corpus& clean_inputs, const AnalysisOptions& opt) {
  std::vector<SimilarityStats> stats;
  stats.reserve(clean_inputs.size());
  for (const auto& s : clean_inputs) {
    if (s.poisoned) throw ContractError("calibrate: poisoned sample in the clean calibration set");
    stats.push_back(analyze_input(params, s.prompt, opt).stats);
  }
  return calibrate(stats);
}

std::vector<std::vector<int>> pick_suspects(const ModelParams& params, const Datasets& data,
                                            const CalibrationProfile& calib, const PipelineConfig& cfg) {
  const auto& pool = data.sets.poisoned_test;
  std::vector<bool> taken(pool.size(), false);
  std::size_t n = 0;
  for (std::size_t i = 0; i < pool.size() && n < cfg.n_suspect; ++i) {
    const auto st = analyze_input(params, pool[i].prompt, cfg.detector).stats;
    if (detect_trigger(st, &calib).verdict == Verdict::suspect) taken[i] = true, ++n;
  }
  for (std::size_t i = 0; i < pool.size() && n < cfg.n_suspect; ++i)
    if (!taken[i]) taken[i] = true, ++n;
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (taken[i]) out.push_back(pool[i].prompt);
  return out;
}

}  // namespace ahbd
