#include "ahbd/ablation.hpp"

namespace ahbd {

AblationResult run_ablation(const ModelParams& victim, std::span<const std::vector<int>> suspect_inputs,
                            std::span<const Sample> clean_samples, const DefenseConfig& cfg, AblationMode mode,
                            const EvalSets& sets, const CalibrationProfile* calib) {
  AblationResult out;
  ModelParams model = victim;
  if (mode != AblationMode::vanilla) {
    DefenseConfig c = cfg;
    if (mode == AblationMode::align_only) c.ft_epochs = 0;
    if (mode == AblationMode::ft_only) c.align_steps = 0;
    out.rounds = sanitize(model, suspect_inputs, clean_samples, c, calib);
  }
  out.report = evaluate(model, sets, mode);
  return out;
}

}  // namespace ahbd
