#include "ahbd/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "ahbd/error.hpp"
#include "ahbd/training.hpp"

namespace ahbd {

template <class Real>
std::vector<double> gradient_sensitivity(const BasicModelParams<Real>& params, std::span<const ScoringSample> samples) {
  if (samples.empty()) throw ContractError("gradient_sensitivity: no samples");
  const auto& cfg = params.config();
  std::vector<double> g(static_cast<std::size_t>(cfg.total_heads()), 0.0);
  auto& mp = const_cast<BasicModelParams<Real>&>(params);
  for (const auto& s : samples) {
    if (s.prompt.empty()) throw ContractError("gradient_sensitivity: empty prompt");
    BasicTape<Real> tape;
    ForwardOptions opt;
    opt.watch_head_outputs = true;
    auto fwd = forward(tape, mp, s.prompt, opt);
    tape.backward(answer_loss(fwd, s.prompt.size(), s.target));
    for (std::size_t i = 0; i < fwd.records.size(); ++i) {
      const auto& h = fwd.records[i].head_out.value();
      const auto dh = tape.grad(fwd.records[i].head_out);
      double dot = 0;
      if (!dh.empty())
        for (std::size_t k = 0; k < h.size(); ++k) dot += static_cast<double>(h[k]) * static_cast<double>(dh[k]);
      g[i] += std::abs(dot);
    }
  }
  for (auto& v : g) v /= static_cast<double>(samples.size());
  return g;
}

template std::vector<double> gradient_sensitivity(const BasicModelParams<float>&, std::span<const ScoringSample>);
template std::vector<double> gradient_sensitivity(const BasicModelParams<double>&, std::span<const ScoringSample>);

std::vector<double> safety_scores(std::span<const double> g, std::span<const double> max_sim, double alpha) {
  if (g.size() != max_sim.size()) throw DimensionError("safety_scores: g and max_sim differ in length");
  if (g.empty()) throw ContractError("safety_scores: no heads");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("safety_scores: alpha must lie in [0, 1]");
  double g_max = 0;
  for (double v : g) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ContractError("safety_scores: g must be finite and non-negative");
    g_max = std::max(g_max, v);
  }
  if (g_max == 0.0) throw DegenerateError("safety_scores: no head influences the loss (max g == 0)");
  std::vector<double> s(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) s[i] = 1.0 - (alpha * max_sim[i] + (1.0 - alpha) * (g[i] / g_max));
  return s;
}

std::string to_string(HeadClass c) {
  switch (c) {
    case HeadClass::safe: return "safe";
    case HeadClass::suspicious: return "suspicious";
    case HeadClass::intermediate: return "intermediate";
  }
  return "intermediate";
}

HeadClass HeadPartition::class_of(HeadId id) const {
  for (const auto& s : scores)
    if (s.id == id) return s.cls;
  throw IndexError("HeadPartition: unknown head L" + std::to_string(id.layer) + "H" + std::to_string(id.head));
}

HeadPartition partition_heads(std::vector<HeadScore> scores, double tau) {
  if (!(tau >= 0.0 && tau <= 0.5)) throw ContractError("partition_heads: tau must lie in [0, 0.5]");
  HeadPartition p;
  p.tau = tau;
  for (auto& s : scores) {
    if (s.s_safe < tau) {
      s.cls = HeadClass::suspicious;
      p.suspicious.push_back(s.id);
    } else if (s.s_safe > 1.0 - tau) {
      s.cls = HeadClass::safe;
      p.safe.push_back(s.id);
    } else {
      s.cls = HeadClass::intermediate;
      p.intermediate.push_back(s.id);
    }
  }
  p.scores = std::move(scores);
  if (p.safe.size() + p.suspicious.size() + p.intermediate.size() != p.scores.size()) {
    throw ContractError("partition_heads: partition does not cover every head");
  }
  return p;
}

HeadPartition classify_heads(const ModelParams& params, std::span<const std::vector<int>> inputs,
                             const ClassifyOptions& opt) {
  if (inputs.empty()) throw ContractError("classify_heads: no inputs");
  const auto& cfg = params.config();
  const auto n_heads = static_cast<std::size_t>(cfg.total_heads());
  std::vector<double> max_sim(n_heads, 0.0);
  std::vector<ScoringSample> samples;
  for (const auto& x : inputs) {
    const auto a = analyze_input(params, x, opt.analysis);
    for (std::size_t i = 0; i < n_heads; ++i) max_sim[i] += a.stats.per_head_max_sim[i];
    samples.push_back({x, predict_next(params, x)});
  }
  for (auto& v : max_sim) v /= static_cast<double>(inputs.size());
  const auto g = gradient_sensitivity(params, std::span<const ScoringSample>(samples));
  const auto s = safety_scores(g, max_sim, opt.alpha);
  std::vector<HeadScore> scores(n_heads);
  for (std::size_t i = 0; i < n_heads; ++i) {
    scores[i].id = {static_cast<int>(i) / cfg.n_heads, static_cast<int>(i) % cfg.n_heads};
    scores[i].g = g[i];
    scores[i].max_sim = max_sim[i];
    scores[i].s_safe = s[i];
  }
  auto p = partition_heads(std::move(scores), opt.tau);
  p.alpha = opt.alpha;
  return p;
}

void write_heads_csv(const HeadPartition& p, std::ostream& out) {
  out << "layer,head,g,max_sim,s_safe,class\n";
  char buf[96];
  for (const auto& s : p.scores) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g", s.g, s.max_sim, s.s_safe);
    out << s.id.layer << ',' << s.id.head << ',' << buf << ',' << to_string(s.cls) << '\n';
  }
}

}  // namespace ahbd
