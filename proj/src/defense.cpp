#include "ahbd/defense.hpp"

#include <ostream>

#include "ahbd/error.hpp"
#include "ahbd/training.hpp"
#include "json.hpp"

namespace ahbd {

namespace {

template <class Rec>
std::size_t record_index(std::span<const Rec> records, HeadId id) {
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].layer == id.layer && records[i].head == id.head) return i;
  throw IndexError("no attention record for head L" + std::to_string(id.layer) + "H" + std::to_string(id.head));
}

std::vector<std::uint8_t> suspicious_mask(const ModelParams& params, std::span<const HeadId> suspicious) {
  std::vector<std::uint8_t> mask(params.size(), 0);
  for (const auto& id : suspicious)
    for (auto e : params.head_entries(id.layer, id.head)) mask[e] = 1;
  return mask;
}

}  // namespace

void DefenseConfig::validate() const {
  if (!(eta_low >= 0 && eta_mid >= 0 && eta_high >= 0)) throw ContractError("defense: learning rates must be >= 0");
  if (!(eta_low <= eta_mid && eta_mid <= eta_high)) {
    throw ContractError("defense: require eta_low <= eta_mid <= eta_high");
  }
  if (!(align_lr >= 0)) throw ContractError("defense: align_lr must be >= 0");
  if (align_steps < 0 || ft_epochs < 0 || max_rounds < 0) {
    throw ContractError("defense: align_steps, ft_epochs and max_rounds must be >= 0");
  }
  if (ft_batch_size == 0) throw ContractError("defense: ft_batch_size must be >= 1");
  if (!(alpha >= 0 && alpha <= 1)) throw ContractError("defense: alpha must lie in [0, 1]");
  if (!(tau >= 0 && tau <= 0.5)) throw ContractError("defense: tau must lie in [0, 0.5]");
}

template <class Real>
BasicTensor<Real> safe_reference(std::span<const BasicTapeRecord<Real>> records, std::span<const HeadId> safe) {
  if (safe.empty()) throw ContractError("safe_reference: empty safe set, no reference available");
  BasicTensor<Real> ref;
  for (const auto& id : safe) {
    const auto& a = records[record_index(records, id)].attn.value();
    if (ref.size() == 0) {
      ref = BasicTensor<Real>(a.shape());
    } else if (a.shape() != ref.shape()) {
      throw DimensionError("safe_reference: attention shapes differ across heads");
    }
    for (std::size_t k = 0; k < a.size(); ++k) ref[k] += a[k];
  }
  const Real n = static_cast<Real>(safe.size());
  for (std::size_t k = 0; k < ref.size(); ++k) ref[k] /= n;
  return ref;
}

template Tensor safe_reference(std::span<const BasicTapeRecord<float>>, std::span<const HeadId>);
template BasicTensor<double> safe_reference(std::span<const BasicTapeRecord<double>>, std::span<const HeadId>);

Tensor safe_reference(std::span<const AttentionRecord> records, std::span<const HeadId> safe) {
  if (safe.empty()) throw ContractError("safe_reference: empty safe set, no reference available");
  std::vector<double> acc;
  Shape shape;
  for (const auto& id : safe) {
    const auto& a = records[record_index(records, id)].attn;
    if (acc.empty()) {
      shape = a.shape();
      acc.assign(a.size(), 0.0);
    } else if (a.shape() != shape) {
      throw DimensionError("safe_reference: attention shapes differ across heads");
    }
    for (std::size_t k = 0; k < a.size(); ++k) acc[k] += a[k];
  }
  Tensor ref(shape);
  for (std::size_t k = 0; k < acc.size(); ++k) ref[k] = static_cast<float>(acc[k] / static_cast<double>(safe.size()));
  return ref;
}

double alignment_loss(std::span<const AttentionRecord> records, const Tensor& reference,
                      std::span<const HeadId> suspicious) {
  double loss = 0;
  for (const auto& id : suspicious) {
    const auto& a = records[record_index(records, id)].attn;
    if (a.shape() != reference.shape()) throw DimensionError("alignment_loss: reference shape mismatch");
    for (std::size_t k = 0; k < a.size(); ++k) {
      const double d = static_cast<double>(a[k]) - static_cast<double>(reference[k]);
      loss += d * d;
    }
  }
  return loss;
}

template <class Real>
BasicVar<Real> alignment_loss(BasicTape<Real>& tape, std::span<const BasicTapeRecord<Real>> records,
                              const BasicTensor<Real>& reference, std::span<const HeadId> suspicious) {
  if (suspicious.empty()) return tape.constant(BasicTensor<Real>::scalar(0));
  auto ref = tape.constant(reference);
  std::optional<BasicVar<Real>> loss;
  for (const auto& id : suspicious) {
    auto term = ops::sum_squares(ops::sub(records[record_index(records, id)].attn, ref));
    loss = loss ? ops::add(*loss, term) : term;
  }
  return *loss;
}

template Var alignment_loss(Tape&, std::span<const BasicTapeRecord<float>>, const Tensor&, std::span<const HeadId>);
template BasicVar<double> alignment_loss(BasicTape<double>&, std::span<const BasicTapeRecord<double>>,
                                         const BasicTensor<double>&, std::span<const HeadId>);

double align_step(ModelParams& params, std::span<const int> x, const HeadPartition& partition, double align_lr) {
  if (partition.safe.empty()) throw ContractError("align_step: empty safe set, no reference available");
  if (partition.suspicious.empty()) throw ContractError("align_step: no suspicious head to align");
  Tape tape;
  ForwardOptions opt;
  opt.capture = true;
  opt.grads = GradMode::mask;
  opt.grad_mask = suspicious_mask(params, partition.suspicious);
  auto fwd = forward(tape, params, x, opt);
  const std::span<const BasicTapeRecord<float>> recs(fwd.records);
  const auto ref = safe_reference(recs, std::span<const HeadId>(partition.safe));
  auto loss = alignment_loss(tape, recs, ref, std::span<const HeadId>(partition.suspicious));
  const double value = loss.value().item();
  tape.backward(loss);
  std::vector<double> lr(params.size(), 0.0);
  for (std::size_t i = 0; i < lr.size(); ++i)
    if (opt.grad_mask[i]) lr[i] = align_lr;
  sgd_apply(params, lr);
  return value;
}

std::vector<double> headwise_rates(const ModelParams& params, const HeadPartition& partition,
                                   const DefenseConfig& cfg) {
  std::vector<double> lr(params.size(), cfg.eta_mid);
  for (const auto& s : partition.scores) {
    const double eta = s.cls == HeadClass::safe ? cfg.eta_high
                       : s.cls == HeadClass::suspicious ? cfg.eta_low
                                                        : cfg.eta_mid;
    for (auto e : params.head_entries(s.id.layer, s.id.head)) lr[e] = eta;
  }
  return lr;
}

std::vector<double> headwise_finetune(ModelParams& params, std::span<const Sample> clean_samples,
                                      const HeadPartition& partition, const DefenseConfig& cfg) {
  if (clean_samples.empty()) throw ContractError("headwise_finetune: no clean samples");
  for (const auto& s : clean_samples)
    if (s.poisoned) throw ContractError("headwise_finetune: poisoned sample in the clean set");
  const auto lr = headwise_rates(params, partition, cfg);
  return run_sgd(params, clean_samples, {cfg.ft_epochs, cfg.ft_batch_size, cfg.seed}, lr);
}

SanitizeReport sanitize(ModelParams& params, std::span<const std::vector<int>> suspect_inputs,
                        std::span<const Sample> clean_samples, const DefenseConfig& cfg,
                        const CalibrationProfile* calib, const EvalSets* eval) {
  cfg.validate();
  if (suspect_inputs.empty()) throw ContractError("sanitize: no suspect input");
  if (clean_samples.empty() && cfg.ft_epochs > 0) throw ContractError("sanitize: no clean samples");
  SanitizeReport report;
  report.stop_reason = "max_rounds";
  const ClassifyOptions copt{cfg.alpha, cfg.tau, cfg.analysis};

  auto below_calibration = [&] {
    for (const auto& x : suspect_inputs) {
      const auto d = detect_trigger(analyze_input(params, x, cfg.analysis).stats, calib);
      if (d.proportion_margin > cfg.stop_margin || d.p99_margin > cfg.stop_margin) return false;
    }
    return true;
  };

  const bool stop_check = calib && !below_calibration();
  if (calib && !stop_check) {
    report.warnings.push_back("suspect inputs already below the calibration thresholds; stop check disabled");
  }
  for (int round = 1; round <= cfg.max_rounds; ++round) {
    if (stop_check && below_calibration()) {
      report.stop_reason = "below_calibration";
      break;
    }
    const auto partition = classify_heads(params, suspect_inputs, copt);
    RoundReport r;
    r.round = round;
    r.n_safe = partition.safe.size();
    r.n_suspicious = partition.suspicious.size();
    r.n_intermediate = partition.intermediate.size();
    if (partition.safe.empty()) {
      report.stop_reason = "aborted";
      throw DefenseAborted("sanitize: round " + std::to_string(round) + " found no safe head at tau=" +
                               std::to_string(cfg.tau) + "; defense inapplicable",
                           std::move(report));
    }
    if (partition.suspicious.empty()) {
      report.warnings.push_back("round " + std::to_string(round) + ": no suspicious head, alignment skipped");
    } else {
      for (int step = 0; step < cfg.align_steps; ++step) {
        double loss = 0;
        for (const auto& x : suspect_inputs) loss += align_step(params, x, partition, cfg.align_lr);
        if (step == 0) r.align_loss_first = loss;
        r.align_loss_last = loss;
      }
    }
    if (cfg.ft_epochs > 0) headwise_finetune(params, clean_samples, partition, cfg);
    double prop = 0;
    for (const auto& x : suspect_inputs) prop += analyze_input(params, x, cfg.analysis).stats.proportion;
    r.proportion_stat = prop / static_cast<double>(suspect_inputs.size());
    if (eval) {
      const auto e = evaluate(params, *eval);
      r.asr = e.asr;
      r.ca = e.ca;
    }
    report.rounds.push_back(r);
  }
  return report;
}

void write_rounds_json(const SanitizeReport& report, std::ostream& out) {
  auto j = nlohmann::ordered_json::array();
  for (const auto& r : report.rounds) {
    nlohmann::ordered_json o;
    o["round"] = r.round;
    o["n_safe"] = r.n_safe;
    o["n_suspicious"] = r.n_suspicious;
    o["n_intermediate"] = r.n_intermediate;
    o["align_loss_first"] = r.align_loss_first;
    o["align_loss_last"] = r.align_loss_last;
    o["proportion_stat"] = r.proportion_stat;
    o["asr"] = r.asr ? nlohmann::ordered_json(*r.asr) : nlohmann::ordered_json(nullptr);
    o["ca"] = r.ca ? nlohmann::ordered_json(*r.ca) : nlohmann::ordered_json(nullptr);
    j.push_back(std::move(o));
  }
  out << j.dump(2) << '\n';
}

}  // namespace ahbd
