#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ahbd/classifier.hpp"
#include "ahbd/corpus.hpp"
#include "ahbd/detector.hpp"
#include "ahbd/eval.hpp"
#include "ahbd/transformer.hpp"

namespace ahbd {

struct DefenseConfig {
  double eta_low = 5e-6;   // suspicious heads
  double eta_mid = 1e-4;   // intermediate heads and non-head parameters
  double eta_high = 2e-4;  // safe heads
  double align_lr = 0.03;
  int align_steps = 20;
  int ft_epochs = 1;
  std::size_t ft_batch_size = 16;
  int max_rounds = 3;
  double alpha = kDefaultAlpha;
  double tau = kDefaultTau;
  double stop_margin = 0.0;
  std::uint64_t seed = 0;  // fine-tuning shuffle
  AnalysisOptions analysis;

  void validate() const;
};

// Elementwise mean of the safe heads' attention matrices.
Tensor safe_reference(std::span<const AttentionRecord> records, std::span<const HeadId> safe);

// Sum over suspicious heads of the squared Frobenius distance to the
// reference. Returns 0 when `suspicious` is empty.
double alignment_loss(std::span<const AttentionRecord> records, const Tensor& reference,
                      std::span<const HeadId> suspicious);

// Differentiable form over live tape records; the reference is a constant.
template <class Real>
BasicVar<Real> alignment_loss(BasicTape<Real>& tape, std::span<const BasicTapeRecord<Real>> records,
                              const BasicTensor<Real>& reference, std::span<const HeadId> suspicious);

template <class Real>
BasicTensor<Real> safe_reference(std::span<const BasicTapeRecord<Real>> records, std::span<const HeadId> safe);

// One gradient step of the alignment loss on input x. Only parameters owned
// by suspicious heads move; everything else is never handed a gradient.
// Returns the loss before the step.
double align_step(ModelParams& params, std::span<const int> x, const HeadPartition& partition, double align_lr);

// Per-entry learning rates for head-wise fine-tuning.
std::vector<double> headwise_rates(const ModelParams& params, const HeadPartition& partition, const DefenseConfig& cfg);

// SGD on clean samples; each head's parameters use the rate of its class,
// parameters outside heads use eta_mid. Returns the per-epoch mean loss.
std::vector<double> headwise_finetune(ModelParams& params, std::span<const Sample> clean_samples,
                                      const HeadPartition& partition, const DefenseConfig& cfg);

struct RoundReport {
  int round = 0;
  std::size_t n_safe = 0;
  std::size_t n_suspicious = 0;
  std::size_t n_intermediate = 0;
  double align_loss_first = 0;
  double align_loss_last = 0;
  double proportion_stat = 0;  // suspect-input proportion after the round
  std::optional<double> asr;
  std::optional<double> ca;
};

struct SanitizeReport {
  std::vector<RoundReport> rounds;
  std::string stop_reason;  // "max_rounds", "below_calibration" or "aborted"
  std::vector<std::string> warnings;
};

// Raised when a round finds no safe head; carries the rounds completed so far.
class DefenseAborted : public Error {
 public:
  DefenseAborted(const std::string& what, SanitizeReport report) : Error(what), report_(std::move(report)) {}
  const SanitizeReport& report() const { return report_; }

 private:
  SanitizeReport report_;
};

// Up to max_rounds of [classify -> align_steps x align_step -> head-wise
// fine-tuning]. With a calibration profile that flags the suspect inputs at
// the start, the loop ends once they fall below the thresholds plus
// stop_margin; unflagged suspects disable the check with a warning.
// `eval`, when given, fills the per-round ASR and CA.
SanitizeReport sanitize(ModelParams& params, std::span<const std::vector<int>> suspect_inputs,
                        std::span<const Sample> clean_samples, const DefenseConfig& cfg,
                        const CalibrationProfile* calib = nullptr, const EvalSets* eval = nullptr);

void write_rounds_json(const SanitizeReport& report, std::ostream& out);

}  // namespace ahbd
