#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ahbd/ablation.hpp"
#include "ahbd/attack.hpp"
#include "ahbd/checkpoint.hpp"
#include "ahbd/classifier.hpp"
#include "ahbd/defense.hpp"
#include "ahbd/detector.hpp"
#include "ahbd/error.hpp"
#include "ahbd/eval.hpp"
#include "ahbd/pipeline.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace ahbd;

namespace {

struct Globals {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  bool json = false;
};

struct Context {
  PipelineConfig cfg;
  fs::path out;
  bool json = false;
  ordered_json summary = ordered_json::object();

  fs::path file(const std::string& name) const { return out / name; }
};

Context make_context(const Globals& g) {
  auto overrides = g.overrides;
  if (!g.out_dir.empty()) overrides.push_back("output_dir=\"" + g.out_dir + "\"");
  Context ctx;
  ctx.cfg = load_pipeline_config(g.config_path, overrides);
  ctx.out = ctx.cfg.output_dir;
  ctx.json = g.json;
  fs::create_directories(ctx.out);
  std::ofstream(ctx.file("config.resolved.json")) << to_json(ctx.cfg).dump(2) << '\n';
  return ctx;
}

struct OutFile {
  std::ofstream f;
  operator std::ostream&() { return f; }
};

OutFile open_out(const fs::path& p) {
  OutFile o{std::ofstream(p)};
  if (!o.f) throw std::runtime_error("cannot write " + p.string());
  return o;
}

void note(const Context& ctx, const std::string& msg) {
  if (!ctx.json) std::cerr << msg << '\n';
}

void finish(const Context& ctx) {
  if (ctx.json) std::cout << ctx.summary.dump(2) << '\n';
}

ordered_json eval_json(const EvalReport& r) {
  return {{"mode", to_string(r.mode)}, {"ca", r.ca}, {"asr", r.asr}, {"n_clean", r.n_clean},
          {"n_poisoned", r.n_poisoned}};
}

ordered_json rounds_json(const SanitizeReport& r) {
  std::stringstream ss;
  write_rounds_json(r, ss);
  ordered_json j;
  j["rounds"] = ordered_json::parse(ss.str());
  j["stop_reason"] = r.stop_reason;
  j["warnings"] = r.warnings;
  return j;
}

void write_json(const fs::path& p, const ordered_json& j) { open_out(p).f << j.dump(2) << '\n'; }

ModelParams load_model(const std::string& given, const Context& ctx, const char* fallback) {
  return load_checkpoint(given.empty() ? ctx.file(fallback) : fs::path(given));
}

CalibrationProfile load_or_calibrate(const std::string& given, const Context& ctx, const ModelParams& model,
                                     const Datasets& data) {
  const fs::path p = given.empty() ? ctx.file("calibration.json") : fs::path(given);
  if (fs::exists(p)) {
    std::ifstream in(p);
    return read_calibration(in);
  }
  if (!given.empty()) throw ContractError("calibration file " + p.string() + " not found");
  note(ctx, "calibrating on " + std::to_string(data.calib.size()) + " clean inputs");
  auto calib = calibrate_model(model, data.calib, ctx.cfg.detector);
  write_calibration(calib, open_out(ctx.file("calibration.json")));
  return calib;
}

std::vector<int> parse_prompt(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::logic_error&) {
      throw ContractError("prompt: '" + tok + "' is not a token id");
    }
  }
  if (out.empty()) throw ContractError("prompt: empty");
  return out;
}

// Values given as "start:stop:step" (inclusive) or a comma list.
std::vector<std::string> expand_values(const std::string& spec) {
  std::vector<std::string> out;
  if (spec.find(':') != std::string::npos) {
    double a = 0, b = 0, step = 0;
    char c1 = 0, c2 = 0;
    std::stringstream ss(spec);
    if (!(ss >> a >> c1 >> b >> c2 >> step) || c1 != ':' || c2 != ':' || !(step > 0) || b < a) {
      throw ContractError("sweep: bad range '" + spec + "', expected start:stop:step with step > 0");
    }
    const auto n = static_cast<long>(std::floor((b - a) / step + 1e-9));
    for (long i = 0; i <= n; ++i) out.push_back(ordered_json(a + static_cast<double>(i) * step).dump());
  } else {
    std::stringstream ss(spec);
    std::string v;
    while (std::getline(ss, v, ',')) out.push_back(v);
  }
  if (out.empty()) throw ContractError("sweep: no values in '" + spec + "'");
  return out;
}

void cmd_gen_data(Context& ctx) {
  const auto data = build_datasets(ctx.cfg);
  auto dump = [&](const char* name, const Corpus& c) {
    write_corpus(c, open_out(ctx.file(name)));
    ctx.summary[name] = c.size();
  };
  dump("train.jsonl", data.train);
  dump("poisoned_train.jsonl", data.poisoned_train);
  dump("calib.jsonl", data.calib);
  dump("heldout.jsonl", data.heldout);
  dump("defense.jsonl", data.defense_clean);
  dump("test.jsonl", data.sets.clean_test);
  dump("asr_test.jsonl", data.sets.poisoned_test);
  ordered_json trig{{"kind", to_string(data.spec.kind)},
                    {"tokens", data.spec.trigger_tokens},
                    {"position", to_string(data.spec.position)},
                    {"attacker_target", data.spec.attacker_target}};
  write_json(ctx.file("trigger.json"), trig);
  ctx.summary["trigger"] = trig;
  note(ctx, "wrote corpora to " + ctx.out.string());
}

ModelParams do_train_clean(Context& ctx, const Datasets& data) {
  note(ctx, "training clean model");
  TrainResult trace;
  auto model = train_clean_model(ctx.cfg, data, &trace);
  save_checkpoint(model, ctx.file("clean.ckpt"));
  write_loss_trace(trace, ctx.cfg.clean_train, open_out(ctx.file("clean_loss.json")));
  ctx.summary["clean_loss"] = trace.loss_trace;
  return model;
}

ModelParams do_implant(Context& ctx, const Datasets& data, const ModelParams& clean) {
  note(ctx, "implanting backdoor");
  TrainResult trace;
  auto victim = implant_backdoor(ctx.cfg, clean, data, &trace);
  save_checkpoint(victim, ctx.file("victim.ckpt"));
  write_loss_trace(trace, ctx.cfg.implant, open_out(ctx.file("implant_loss.json")));
  ctx.summary["implant_loss"] = trace.loss_trace;
  return victim;
}

struct ModelOpts {
  std::string model;
  std::string calibration;
};

struct DetectOpts {
  std::string prompt;
  std::string split = "poisoned";
  std::size_t index = 0;
};

std::vector<int> select_input(const DetectOpts& o, const Datasets& data) {
  if (!o.prompt.empty()) return parse_prompt(o.prompt);
  const Corpus* pool = nullptr;
  if (o.split == "clean") pool = &data.sets.clean_test;
  else if (o.split == "poisoned") pool = &data.sets.poisoned_test;
  else if (o.split == "heldout") pool = &data.heldout;
  else throw ContractError("detect: split must be clean, poisoned or heldout");
  if (o.index >= pool->size()) throw ContractError("detect: index outside the split");
  return (*pool)[o.index].prompt;
}

void cmd_detect(Context& ctx, const ModelOpts& m, const DetectOpts& d) {
  const auto data = build_datasets(ctx.cfg);
  const auto model = load_model(m.model, ctx, "victim.ckpt");
  const auto calib = load_or_calibrate(m.calibration, ctx, model, data);
  const auto input = select_input(d, data);
  const auto a = analyze_input(model, input, ctx.cfg.detector);
  const auto det = detect_trigger(a.stats, &calib);
  write_pairs_csv(a.stats, open_out(ctx.file("stats.csv")));
  write_stats_json(a.stats, open_out(ctx.file("stats.json")));
  ordered_json j{{"prompt", input},
                 {"generated", std::vector<int>(a.generation.tokens.begin() + static_cast<long>(input.size()),
                                                a.generation.tokens.end())},
                 {"verdict", to_string(det.verdict)},
                 {"margin", det.margin},
                 {"proportion", a.stats.proportion},
                 {"p99", a.stats.p99},
                 {"proportion_threshold", calib.proportion_threshold},
                 {"p99_threshold", calib.p99_threshold}};
  write_json(ctx.file("eval.json"), j);
  ctx.summary = j;
  note(ctx, "verdict: " + to_string(det.verdict));
}

void cmd_calibrate(Context& ctx, const ModelOpts& m) {
  const auto data = build_datasets(ctx.cfg);
  const auto model = load_model(m.model, ctx, "victim.ckpt");
  const auto calib = calibrate_model(model, data.calib, ctx.cfg.detector);
  write_calibration(calib, open_out(ctx.file("calibration.json")));
  ctx.summary = {{"n_inputs", calib.n_inputs},
                 {"proportion_threshold", calib.proportion_threshold},
                 {"p99_threshold", calib.p99_threshold}};
  note(ctx, "wrote calibration.json");
}

std::vector<std::vector<int>> suspects_for(const Context& ctx, const ModelParams& model, const Datasets& data,
                                           const CalibrationProfile& calib, const std::string& prompt) {
  if (!prompt.empty()) return {parse_prompt(prompt)};
  return pick_suspects(model, data, calib, ctx.cfg);
}

void cmd_classify(Context& ctx, const ModelOpts& m, const std::string& prompt) {
  const auto data = build_datasets(ctx.cfg);
  const auto model = load_model(m.model, ctx, "victim.ckpt");
  const auto calib = load_or_calibrate(m.calibration, ctx, model, data);
  const auto suspects = suspects_for(ctx, model, data, calib, prompt);
  const auto part = classify_heads(model, suspects, {ctx.cfg.alpha, ctx.cfg.tau, ctx.cfg.detector});
  write_heads_csv(part, open_out(ctx.file("heads.csv")));
  ctx.summary = {{"n_safe", part.safe.size()},
                 {"n_suspicious", part.suspicious.size()},
                 {"n_intermediate", part.intermediate.size()}};
  note(ctx, "wrote heads.csv");
}

// Runs the defense, writing rounds.json even when it aborts.
ModelParams do_defend(Context& ctx, const ModelParams& victim, const Datasets& data, const CalibrationProfile& calib,
                      const std::vector<std::vector<int>>& suspects) {
  auto model = victim;
  const auto dcfg = ctx.cfg.resolved_defense();
  note(ctx, "sanitizing with " + std::to_string(suspects.size()) + " suspect input(s)");
  try {
    const auto rep = sanitize(model, suspects, data.defense_clean, dcfg, &calib, &data.sets);
    write_json(ctx.file("rounds.json"), rounds_json(rep));
    ctx.summary["defense"] = rounds_json(rep);
  } catch (const DefenseAborted& e) {
    write_json(ctx.file("rounds.json"), rounds_json(e.report()));
    throw;
  }
  const auto part = classify_heads(victim, suspects, {dcfg.alpha, dcfg.tau, dcfg.analysis});
  write_heads_csv(part, open_out(ctx.file("heads.csv")));
  save_checkpoint(model, ctx.file("sanitized.ckpt"));
  return model;
}

void cmd_defend(Context& ctx, const ModelOpts& m, const std::string& prompt) {
  const auto data = build_datasets(ctx.cfg);
  const auto victim = load_model(m.model, ctx, "victim.ckpt");
  const auto calib = load_or_calibrate(m.calibration, ctx, victim, data);
  const auto suspects = suspects_for(ctx, victim, data, calib, prompt);
  const auto before = evaluate(victim, data.sets);
  const auto after_model = do_defend(ctx, victim, data, calib, suspects);
  const auto after = evaluate(after_model, data.sets, AblationMode::all);
  ordered_json j{{"before", eval_json(before)}, {"after", eval_json(after)}};
  write_json(ctx.file("eval.json"), j);
  ctx.summary["eval"] = j;
  note(ctx, "ASR " + std::to_string(before.asr) + " -> " + std::to_string(after.asr) + ", CA " +
                std::to_string(before.ca) + " -> " + std::to_string(after.ca));
}

void cmd_evaluate(Context& ctx, const ModelOpts& m) {
  const auto data = build_datasets(ctx.cfg);
  const auto model = load_model(m.model, ctx, "victim.ckpt");
  std::vector<SampleVerdict> vc, vp;
  EvalReport r;
  r.ca = clean_accuracy(model, data.sets.clean_test, &vc);
  r.asr = attack_success_rate(model, data.sets.poisoned_test, data.sets.attacker_target, &vp);
  r.n_clean = data.sets.clean_test.size();
  r.n_poisoned = data.sets.poisoned_test.size();
  write_eval_report_json(r, open_out(ctx.file("eval.json")));
  write_verdicts_csv(vc, open_out(ctx.file("verdicts_clean.csv")));
  write_verdicts_csv(vp, open_out(ctx.file("verdicts_asr.csv")));
  ctx.summary = eval_json(r);
  note(ctx, "CA " + std::to_string(r.ca) + " ASR " + std::to_string(r.asr));
}

void cmd_ablate(Context& ctx, const ModelOpts& m, const std::vector<std::string>& modes, const std::string& prompt) {
  const auto data = build_datasets(ctx.cfg);
  const auto victim = load_model(m.model, ctx, "victim.ckpt");
  const auto calib = load_or_calibrate(m.calibration, ctx, victim, data);
  const auto suspects = suspects_for(ctx, victim, data, calib, prompt);
  const auto dcfg = ctx.cfg.resolved_defense();
  auto csv = open_out(ctx.file("ablation.csv")).f;
  csv << "mode,ca,asr\n";
  auto j = ordered_json::array();
  for (const auto& name : modes) {
    const auto mode = ablation_mode_from_string(name);
    note(ctx, "ablation mode " + name);
    const auto r = run_ablation(victim, suspects, data.defense_clean, dcfg, mode, data.sets, &calib);
    csv << name << ',' << r.report.ca << ',' << r.report.asr << '\n';
    auto o = eval_json(r.report);
    o["defense"] = rounds_json(r.rounds);
    j.push_back(o);
  }
  write_json(ctx.file("ablation.json"), j);
  ctx.summary["ablation"] = j;
}

struct SweepOpts {
  std::vector<std::string> params;
  std::vector<std::string> values;
};

void cmd_sweep(const Globals& g, Context& ctx, const ModelOpts& m, const SweepOpts& s, const std::string& prompt) {
  if (s.params.size() != s.values.size() || s.params.empty()) {
    throw ContractError("sweep: give one --values per --param");
  }
  std::vector<std::vector<std::string>> axes;
  for (const auto& v : s.values) axes.push_back(expand_values(v));
  const auto data = build_datasets(ctx.cfg);
  const auto victim = load_model(m.model, ctx, "victim.ckpt");
  const auto calib = load_or_calibrate(m.calibration, ctx, victim, data);
  const auto suspects = suspects_for(ctx, victim, data, calib, prompt);

  auto csv = open_out(ctx.file("sweep.csv")).f;
  for (const auto& p : s.params) csv << p << ',';
  csv << "ca,asr,rounds,stop_reason\n";
  auto rows = ordered_json::array();
  std::vector<std::size_t> idx(axes.size(), 0);
  for (;;) {
    auto overrides = g.overrides;
    if (!g.out_dir.empty()) overrides.push_back("output_dir=\"" + g.out_dir + "\"");
    ordered_json row;
    for (std::size_t k = 0; k < axes.size(); ++k) {
      overrides.push_back(s.params[k] + "=" + axes[k][idx[k]]);
      csv << axes[k][idx[k]] << ',';
      row[s.params[k]] = ordered_json::parse(axes[k][idx[k]], nullptr, false);
    }
    const auto cfg = load_pipeline_config(g.config_path, overrides);
    auto model = victim;
    try {
      const auto rep = sanitize(model, suspects, data.defense_clean, cfg.resolved_defense(), &calib);
      const auto e = evaluate(model, data.sets);
      csv << e.ca << ',' << e.asr << ',' << rep.rounds.size() << ',' << rep.stop_reason << '\n';
      row["ca"] = e.ca;
      row["asr"] = e.asr;
      row["stop_reason"] = rep.stop_reason;
    } catch (const DefenseAborted& e) {
      csv << ",," << e.report().rounds.size() << ",aborted\n";
      row["stop_reason"] = "aborted";
    }
    csv.flush();
    rows.push_back(row);
    std::size_t k = 0;
    while (k < idx.size() && ++idx[k] == axes[k].size()) idx[k++] = 0;
    if (k == idx.size()) break;
  }
  ctx.summary["sweep"] = rows;
}

void cmd_pipeline(Context& ctx) {
  const auto data = build_datasets(ctx.cfg);
  const auto clean = do_train_clean(ctx, data);
  const auto victim = do_implant(ctx, data, clean);
  note(ctx, "calibrating");
  const auto calib = calibrate_model(victim, data.calib, ctx.cfg.detector);
  write_calibration(calib, open_out(ctx.file("calibration.json")));
  const auto suspects = pick_suspects(victim, data, calib, ctx.cfg);
  const auto a = analyze_input(victim, suspects.front(), ctx.cfg.detector);
  write_pairs_csv(a.stats, open_out(ctx.file("stats.csv")));
  const auto det = detect_trigger(a.stats, &calib);
  const auto sanitized = do_defend(ctx, victim, data, calib, suspects);
  ordered_json j{{"clean", eval_json(evaluate(clean, data.sets))},
                 {"victim", eval_json(evaluate(victim, data.sets))},
                 {"sanitized", eval_json(evaluate(sanitized, data.sets, AblationMode::all))},
                 {"suspect_verdict", to_string(det.verdict)},
                 {"suspect_margin", det.margin}};
  write_json(ctx.file("eval.json"), j);
  ctx.summary["eval"] = j;
  note(ctx, "victim ASR " + std::to_string(j["victim"]["asr"].get<double>()) + " -> sanitized ASR " +
                std::to_string(j["sanitized"]["asr"].get<double>()));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-similarity backdoor forensics and head-level sanitization"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--set", g.overrides, "Dotted override, e.g. defense.align_lr=0.05")->take_all();
  app.add_option("--out", g.out_dir, "Output directory (overrides output_dir)");
  app.add_flag("--json", g.json, "Print a JSON summary on stdout");

  ModelOpts mo;
  DetectOpts dopt;
  std::string prompt;
  std::vector<std::string> modes{"vanilla", "all", "align_only", "ft_only"};
  SweepOpts so;

  auto add_model = [&](CLI::App* sc) {
    sc->add_option("--model", mo.model, "Checkpoint (default <out>/victim.ckpt)");
    sc->add_option("--calibration", mo.calibration, "Calibration profile (default <out>/calibration.json)");
  };
  auto* gen = app.add_subcommand("gen-data", "Generate clean, poisoned and evaluation corpora");
  auto* tc = app.add_subcommand("train-clean", "Train the clean reference model");
  auto* im = app.add_subcommand("implant", "Fine-tune the clean model on the poisoned corpus");
  std::string clean_ckpt;
  im->add_option("--clean", clean_ckpt, "Clean checkpoint (default <out>/clean.ckpt)");
  auto* cal = app.add_subcommand("calibrate", "Fit detector thresholds on clean generations");
  add_model(cal);
  auto* det = app.add_subcommand("detect", "Score one input against the calibration");
  add_model(det);
  det->add_option("--prompt", dopt.prompt, "Comma-separated token ids");
  det->add_option("--split", dopt.split, "clean, poisoned or heldout")->capture_default_str();
  det->add_option("--index", dopt.index, "Index into the split")->capture_default_str();
  auto* cls = app.add_subcommand("classify-heads", "Score and partition attention heads");
  add_model(cls);
  cls->add_option("--prompt", prompt, "Suspect input (default: detector-flagged test inputs)");
  auto* def = app.add_subcommand("defend", "Sanitize the victim");
  add_model(def);
  def->add_option("--prompt", prompt, "Suspect input (default: detector-flagged test inputs)");
  auto* ev = app.add_subcommand("evaluate", "Clean accuracy and attack success rate");
  add_model(ev);
  auto* ab = app.add_subcommand("ablate", "Compare defense variants");
  add_model(ab);
  ab->add_option("--modes", modes, "Subset of vanilla, all, align_only, ft_only")->delimiter(',');
  ab->add_option("--prompt", prompt, "Suspect input");
  auto* sw = app.add_subcommand("sweep", "Grid over config values, one sanitize per point");
  add_model(sw);
  sw->add_option("--param", so.params, "Config path, e.g. classifier.alpha")->required();
  sw->add_option("--values", so.values, "start:stop:step or a comma list")->required();
  sw->add_option("--prompt", prompt, "Suspect input");
  auto* pl = app.add_subcommand("pipeline", "Train, implant, calibrate, detect, defend, evaluate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    auto ctx = make_context(g);
    if (gen->parsed()) {
      cmd_gen_data(ctx);
    } else if (tc->parsed()) {
      do_train_clean(ctx, build_datasets(ctx.cfg));
    } else if (im->parsed()) {
      const auto clean = load_checkpoint(clean_ckpt.empty() ? ctx.file("clean.ckpt") : fs::path(clean_ckpt));
      do_implant(ctx, build_datasets(ctx.cfg), clean);
    } else if (cal->parsed()) {
      cmd_calibrate(ctx, mo);
    } else if (det->parsed()) {
      cmd_detect(ctx, mo, dopt);
    } else if (cls->parsed()) {
      cmd_classify(ctx, mo, prompt);
    } else if (def->parsed()) {
      cmd_defend(ctx, mo, prompt);
    } else if (ev->parsed()) {
      cmd_evaluate(ctx, mo);
    } else if (ab->parsed()) {
      cmd_ablate(ctx, mo, modes, prompt);
    } else if (sw->parsed()) {
      cmd_sweep(g, ctx, mo, so, prompt);
    } else if (pl->parsed()) {
      cmd_pipeline(ctx);
    }
    finish(ctx);
  } catch (const DefenseAborted& e) {
    std::cerr << "aborted: " << e.what() << '\n';
    return 2;
  } catch (const DegenerateError& e) {
    std::cerr << "aborted: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
