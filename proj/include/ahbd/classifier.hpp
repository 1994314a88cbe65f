#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ahbd/detector.hpp"
#include "ahbd/transformer.hpp"

namespace ahbd {

inline constexpr double kDefaultAlpha = 0.7;
inline constexpr double kDefaultTau = 0.3;

struct ScoringSample {
  std::vector<int> prompt;
  int target = 0;  // answer token, scored at the last prompt position
};

// Per-head g = mean over samples of |sum_{t,d} H[t,d] * dL/dH[t,d]|, with L
// the answer cross-entropy. Layer-major, one entry per head.
template <class Real>
std::vector<double> gradient_sensitivity(const BasicModelParams<Real>& params, std::span<const ScoringSample> samples);

// s = 1 - (alpha * max_sim + (1 - alpha) * g / max(g)).
std::vector<double> safety_scores(std::span<const double> g, std::span<const double> max_sim, double alpha);

enum class HeadClass { safe, suspicious, intermediate };

std::string to_string(HeadClass c);

struct HeadScore {
  HeadId id;
  double g = 0;
  double max_sim = 0;
  double s_safe = 0;
  HeadClass cls = HeadClass::intermediate;
};

struct HeadPartition {
  std::vector<HeadId> safe;
  std::vector<HeadId> suspicious;
  std::vector<HeadId> intermediate;
  double tau = kDefaultTau;
  double alpha = kDefaultAlpha;
  std::vector<HeadScore> scores;  // layer-major, cls filled in

  HeadClass class_of(HeadId id) const;
};

// suspicious iff s < tau, safe iff s > 1 - tau, intermediate otherwise.
HeadPartition partition_heads(std::vector<HeadScore> scores, double tau);

struct ClassifyOptions {
  double alpha = kDefaultAlpha;
  double tau = kDefaultTau;
  AnalysisOptions analysis;  // within-layer max_sim is taken regardless of scope
};

// Scores heads on the given inputs: max_sim from the gen->prompt analysis,
// g with the model's own greedy answer as target; both averaged over inputs.
HeadPartition classify_heads(const ModelParams& params, std::span<const std::vector<int>> inputs,
                             const ClassifyOptions& opt = {});

void write_heads_csv(const HeadPartition& p, std::ostream& out);

}  // namespace ahbd
