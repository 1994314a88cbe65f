#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ahbd/corpus.hpp"
#include "ahbd/transformer.hpp"

namespace ahbd {

// Cross-entropy of the answer token, predicted at the last prompt position.
template <class Real>
BasicVar<Real> answer_loss(const BasicForwardResult<Real>& fwd, std::size_t prompt_len, int target) {
  return ops::cross_entropy(ops::select_row(fwd.logits, prompt_len - 1), target);
}

// Forward + backward on one sample; gradients of (loss_scale * loss) are
// added to the parameters selected by `grads`/`mask`. Returns the unscaled loss.
double accumulate_sample_grad(ModelParams& params, std::span<const int> prompt, int target, GradMode grads,
                              std::span<const std::uint8_t> mask = {}, double loss_scale = 1.0);

// Plain SGD step: each entry holding a gradient moves by its own rate, then
// the gradient is released. Entries without gradient are left untouched, as
// are entries whose rate is exactly zero.
void sgd_apply(ModelParams& params, std::span<const double> lr_per_entry);

struct SgdSchedule {
  int epochs = 1;
  std::size_t batch_size = 16;
  std::uint64_t shuffle_seed = 0;
};

// Minibatch SGD on the answer-position loss with per-entry learning rates.
// Batch gradients are sample means. Returns the mean loss of every epoch.
std::vector<double> run_sgd(ModelParams& params, std::span<const Sample> samples, const SgdSchedule& schedule,
                            std::span<const double> lr_per_entry);

}  // namespace ahbd
