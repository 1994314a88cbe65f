#include "ahbd/eval.hpp"

#include <ostream>

#include "ahbd/error.hpp"
#include "ahbd/rng.hpp"
#include "json.hpp"

namespace ahbd {

double clean_accuracy(const ModelParams& params, std::span<const Sample> clean_test,
                      std::vector<SampleVerdict>* verdicts) {
  if (clean_test.empty()) throw ContractError("clean_accuracy: empty test set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < clean_test.size(); ++i) {
    const auto& s = clean_test[i];
    if (s.poisoned) throw ContractError("clean_accuracy: sample " + std::to_string(i) + " is poisoned");
    const int pred = predict_next(params, s.prompt);
    const bool ok = pred == s.target;
    hits += ok ? 1 : 0;
    if (verdicts) verdicts->push_back({i, pred, s.target, ok});
  }
  return static_cast<double>(hits) / static_cast<double>(clean_test.size());
}

double attack_success_rate(const ModelParams& params, std::span<const Sample> poisoned_test, int attacker_target,
                           std::vector<SampleVerdict>* verdicts) {
  if (poisoned_test.empty()) throw ContractError("attack_success_rate: empty test set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < poisoned_test.size(); ++i) {
    const auto& s = poisoned_test[i];
    if (!s.poisoned) throw ContractError("attack_success_rate: sample " + std::to_string(i) + " is clean");
    const int pred = predict_next(params, s.prompt);
    const bool ok = pred == attacker_target;
    hits += ok ? 1 : 0;
    if (verdicts) verdicts->push_back({i, pred, attacker_target, ok});
  }
  return static_cast<double>(hits) / static_cast<double>(poisoned_test.size());
}

Corpus build_asr_test(const Corpus& clean_test, const TriggerSpec& spec, std::uint64_t seed, int max_seq) {
  Rng rng(seed);
  Corpus out;
  for (const auto& s : clean_test) {
    if (s.poisoned || s.target == spec.attacker_target) continue;
    out.push_back(inject_trigger(s, spec, rng, max_seq));
  }
  if (out.empty()) throw ContractError("build_asr_test: no clean sample with a non-target label");
  return out;
}

std::string to_string(AblationMode m) {
  switch (m) {
    case AblationMode::vanilla: return "vanilla";
    case AblationMode::all: return "all";
    case AblationMode::align_only: return "align_only";
    case AblationMode::ft_only: return "ft_only";
  }
  return "vanilla";
}

AblationMode ablation_mode_from_string(const std::string& s) {
  if (s == "vanilla") return AblationMode::vanilla;
  if (s == "all") return AblationMode::all;
  if (s == "align_only") return AblationMode::align_only;
  if (s == "ft_only") return AblationMode::ft_only;
  throw ContractError("unknown ablation mode '" + s + "'");
}

EvalReport evaluate(const ModelParams& params, const EvalSets& sets, AblationMode mode) {
  EvalReport r;
  r.ca = clean_accuracy(params, sets.clean_test);
  r.asr = attack_success_rate(params, sets.poisoned_test, sets.attacker_target);
  r.n_clean = sets.clean_test.size();
  r.n_poisoned = sets.poisoned_test.size();
  r.mode = mode;
  return r;
}

void write_eval_report_json(const EvalReport& r, std::ostream& out) {
  nlohmann::ordered_json j;
  j["ca"] = r.ca;
  j["asr"] = r.asr;
  j["n_clean"] = r.n_clean;
  j["n_poisoned"] = r.n_poisoned;
  j["mode"] = to_string(r.mode);
  out << j.dump(2) << '\n';
}

void write_verdicts_csv(std::span<const SampleVerdict> verdicts, std::ostream& out) {
  out << "sample_index,predicted,target,correct\n";
  for (const auto& v : verdicts) {
    out << v.index << ',' << v.predicted << ',' << v.target << ',' << (v.correct ? 1 : 0) << '\n';
  }
}

}  // namespace ahbd
