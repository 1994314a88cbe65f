#include "ahbd/training.hpp"

#include <numeric>

#include "ahbd/rng.hpp"

namespace ahbd {

double accumulate_sample_grad(ModelParams& params, std::span<const int> prompt, int target, GradMode grads,
                              std::span<const std::uint8_t> mask, double loss_scale) {
  Tape tape;
  ForwardOptions opt;
  opt.grads = grads;
  if (grads == GradMode::mask) opt.grad_mask.assign(mask.begin(), mask.end());
  auto fwd = forward(tape, params, prompt, opt);
  auto loss = answer_loss(fwd, prompt.size(), target);
  const double value = loss.value().item();
  tape.backward(loss_scale == 1.0 ? loss : ops::scale(loss, loss_scale));
  return value;
}

void sgd_apply(ModelParams& params, std::span<const double> lr_per_entry) {
  if (lr_per_entry.size() != params.size()) throw ContractError("sgd_apply: one learning rate per entry required");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params.tensor(i);
    if (!t.has_grad()) continue;
    if (lr_per_entry[i] == 0.0) {
      t.clear_grad();
      continue;
    }
    apply_gradient(t, lr_per_entry[i]);
  }
}

std::vector<double> run_sgd(ModelParams& params, std::span<const Sample> samples, const SgdSchedule& schedule,
                            std::span<const double> lr_per_entry) {
  if (samples.empty()) throw ContractError("run_sgd: empty sample set");
  if (schedule.batch_size == 0) throw ContractError("run_sgd: batch size must be >= 1");
  if (schedule.epochs < 0) throw ContractError("run_sgd: epochs must be >= 0");
  std::vector<double> trace;
  Rng rng(schedule.shuffle_seed);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  params.clear_grads();
  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (std::size_t start = 0; start < order.size(); start += schedule.batch_size) {
      const std::size_t end = std::min(order.size(), start + schedule.batch_size);
      const double scale = 1.0 / static_cast<double>(end - start);
      for (std::size_t k = start; k < end; ++k) {
        const auto& s = samples[order[k]];
        total += accumulate_sample_grad(params, s.prompt, s.target, GradMode::all, {}, scale);
      }
      sgd_apply(params, lr_per_entry);
    }
    trace.push_back(total / static_cast<double>(samples.size()));
  }
  return trace;
}

}  // namespace ahbd
