#pragma once

#include <span>
#include <vector>

#include "ahbd/defense.hpp"
#include "ahbd/eval.hpp"

namespace ahbd {

struct AblationResult {
  EvalReport report;
  SanitizeReport rounds;
};

// Sanitizes a copy of the victim under the given mode and evaluates it:
// all = full defense, align_only = no fine-tuning, ft_only = no alignment,
// vanilla = the untouched victim.
AblationResult run_ablation(const ModelParams& victim, std::span<const std::vector<int>> suspect_inputs,
                            std::span<const Sample> clean_samples, const DefenseConfig& cfg, AblationMode mode,
                            const EvalSets& sets, const CalibrationProfile* calib = nullptr);

}  // namespace ahbd
