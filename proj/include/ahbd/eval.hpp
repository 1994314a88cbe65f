#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ahbd/corpus.hpp"
#include "ahbd/transformer.hpp"

namespace ahbd {

struct SampleVerdict {
  std::size_t index = 0;
  int predicted = 0;
  int target = 0;
  bool correct = false;
};

// Fraction of unpoisoned samples whose greedy answer equals the target.
double clean_accuracy(const ModelParams& params, std::span<const Sample> clean_test,
                      std::vector<SampleVerdict>* verdicts = nullptr);

// Fraction of poisoned samples whose greedy answer is the attacker target.
// `correct` in the verdicts means "attack succeeded".
double attack_success_rate(const ModelParams& params, std::span<const Sample> poisoned_test, int attacker_target,
                           std::vector<SampleVerdict>* verdicts = nullptr);

// Triggered copies of the clean samples whose gold label differs from the
// attacker target.
Corpus build_asr_test(const Corpus& clean_test, const TriggerSpec& spec, std::uint64_t seed, int max_seq);

enum class AblationMode { vanilla, all, align_only, ft_only };

std::string to_string(AblationMode m);
AblationMode ablation_mode_from_string(const std::string& s);

struct EvalReport {
  double ca = 0;
  double asr = 0;
  std::size_t n_clean = 0;
  std::size_t n_poisoned = 0;
  AblationMode mode = AblationMode::vanilla;
};

// Fixed evaluation splits shared by every model under comparison.
struct EvalSets {
  Corpus clean_test;
  Corpus poisoned_test;
  int attacker_target = 2;
};

EvalReport evaluate(const ModelParams& params, const EvalSets& sets, AblationMode mode = AblationMode::vanilla);

void write_eval_report_json(const EvalReport& r, std::ostream& out);
void write_verdicts_csv(std::span<const SampleVerdict> verdicts, std::ostream& out);

}  // namespace ahbd
