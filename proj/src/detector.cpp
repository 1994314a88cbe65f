#include "ahbd/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>

#include "ahbd/error.hpp"
#include "json.hpp"

namespace ahbd {

GenPromptSubmatrix extract_gen_to_prompt(const AttentionRecord& rec, std::size_t prompt_len, std::size_t gen_len) {
  if (gen_len == 0) throw ContractError("extract_gen_to_prompt: no generated tokens (T_g == 0)");
  if (prompt_len == 0) throw ContractError("extract_gen_to_prompt: empty prompt");
  const auto& a = rec.attn;
  if (a.rank() != 2 || a.rows() != a.cols() || a.rows() != prompt_len + gen_len) {
    throw DimensionError("extract_gen_to_prompt: record of shape " + shape_string(a.shape()) + " does not match T_p=" +
                         std::to_string(prompt_len) + ", T_g=" + std::to_string(gen_len));
  }
  GenPromptSubmatrix out{rec.layer, rec.head, Tensor({gen_len, prompt_len})};
  for (std::size_t i = 0; i < gen_len; ++i)
    for (std::size_t j = 0; j < prompt_len; ++j) out.m.at(i, j) = a.at(prompt_len + i, j);
  return out;
}

std::vector<GenPromptSubmatrix> extract_gen_to_prompt(std::span<const AttentionRecord> records, std::size_t prompt_len,
                                                      std::size_t gen_len) {
  std::vector<GenPromptSubmatrix> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(extract_gen_to_prompt(r, prompt_len, gen_len));
  return out;
}

double attn_cosine(const Tensor& p, const Tensor& q) {
  if (p.shape() != q.shape()) {
    throw DimensionError("attn_cosine: shape mismatch " + shape_string(p.shape()) + " vs " + shape_string(q.shape()));
  }
  double dot = 0, pp = 0, qq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double x = p[i], y = q[i];
    dot += x * y;
    pp += x * x;
    qq += y * y;
  }
  if (pp == 0.0 || qq == 0.0) throw DegenerateError("attn_cosine: similarity undefined for an all-zero matrix");
  return std::clamp(dot / (std::sqrt(pp) * std::sqrt(qq)), -1.0, 1.0);
}

std::string to_string(SimilarityScope scope) {
  return scope == SimilarityScope::global ? "global" : "within_layer";
}

SimilarityScope similarity_scope_from_string(const std::string& s) {
  if (s == "global") return SimilarityScope::global;
  if (s == "within_layer") return SimilarityScope::within_layer;
  throw ContractError("unknown similarity scope '" + s + "'");
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ContractError("percentile: no values");
  if (!(q >= 0.0 && q <= 1.0)) throw ContractError("percentile: q must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

SimilarityStats pair_similarity_stats(std::span<const GenPromptSubmatrix> mats, double theta, SimilarityScope scope) {
  if (mats.size() < 2) throw ContractError("pair_similarity_stats: need at least 2 heads");
  // Group sizes from the layer indices; layers must be contiguous.
  std::vector<std::size_t> layer_start{0};
  for (std::size_t i = 1; i < mats.size(); ++i) {
    if (mats[i].layer != mats[i - 1].layer) {
      if (mats[i].layer < mats[i - 1].layer) throw ContractError("pair_similarity_stats: matrices not layer-major");
      layer_start.push_back(i);
    }
  }
  layer_start.push_back(mats.size());
  for (std::size_t g = 0; g + 1 < layer_start.size(); ++g) {
    if (layer_start[g + 1] - layer_start[g] < 2) {
      throw ContractError("pair_similarity_stats: layer " + std::to_string(mats[layer_start[g]].layer) +
                          " has fewer than 2 heads");
    }
  }
  auto layer_of = [&](std::size_t i) { return mats[i].layer; };

  const std::size_t n = mats.size();
  SimilarityStats stats;
  stats.theta = theta;
  stats.scope = scope;
  stats.per_head_max_sim.assign(n, -1.0);
  std::vector<double> values;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const bool same_layer = layer_of(i) == layer_of(j);
      if (!same_layer && scope == SimilarityScope::within_layer) continue;
      const double c = attn_cosine(mats[i].m, mats[j].m);
      if (same_layer) {
        stats.per_head_max_sim[i] = std::max(stats.per_head_max_sim[i], c);
        stats.per_head_max_sim[j] = std::max(stats.per_head_max_sim[j], c);
      }
      values.push_back(c);
      stats.pairs.push_back({{mats[i].layer, mats[i].head}, {mats[j].layer, mats[j].head}, c});
      if (c > theta) ++stats.above_theta;
    }
  }
  stats.pair_count = values.size();
  stats.proportion = static_cast<double>(stats.above_theta) / static_cast<double>(stats.pair_count);
  stats.p99 = percentile(std::move(values), 0.99);
  return stats;
}

InputAnalysis analyze_input(const ModelParams& params, std::span<const int> prompt, const AnalysisOptions& opt) {
  InputAnalysis a;
  a.generation = generate(params, prompt, opt.max_new);
  a.submatrices = extract_gen_to_prompt(a.generation.records, a.generation.prompt_len, a.generation.generated_len);
  a.stats = pair_similarity_stats(a.submatrices, opt.theta, opt.scope);
  return a;
}

double CalibrationProfile::median_proportion() const { return percentile(clean_proportions, 0.5); }
double CalibrationProfile::median_p99() const { return percentile(clean_p99, 0.5); }

CalibrationProfile calibrate(std::span<const SimilarityStats> clean_stats) {
  if (clean_stats.size() < CalibrationProfile::kMinInputs) {
    throw ContractError("calibrate: need at least " + std::to_string(CalibrationProfile::kMinInputs) +
                        " clean inputs, got " + std::to_string(clean_stats.size()));
  }
  CalibrationProfile c;
  c.n_inputs = clean_stats.size();
  c.theta = clean_stats.front().theta;
  c.scope = clean_stats.front().scope;
  for (const auto& s : clean_stats) {
    if (s.theta != c.theta || s.scope != c.scope) throw ContractError("calibrate: inconsistent theta or scope");
    c.clean_proportions.push_back(s.proportion);
    c.clean_p99.push_back(s.p99);
  }
  c.proportion_threshold = percentile(c.clean_proportions, 0.999);
  c.p99_threshold = *std::max_element(c.clean_p99.begin(), c.clean_p99.end());
  return c;
}

std::string to_string(Verdict v) { return v == Verdict::suspect ? "suspect" : "clean"; }

Detection detect_trigger(const SimilarityStats& stats, const CalibrationProfile* calib) {
  if (calib == nullptr) throw ContractError("detect_trigger: missing calibration profile");
  if (calib->n_inputs < CalibrationProfile::kMinInputs) {
    throw ContractError("detect_trigger: calibration built from fewer than " +
                        std::to_string(CalibrationProfile::kMinInputs) + " clean inputs");
  }
  if (stats.theta != calib->theta || stats.scope != calib->scope) {
    throw ContractError("detect_trigger: statistics and calibration use different theta or scope");
  }
  Detection d;
  d.proportion_margin = stats.proportion - calib->proportion_threshold;
  d.p99_margin = stats.p99 - calib->p99_threshold;
  d.margin = std::max(d.proportion_margin, d.p99_margin);
  d.verdict = (d.proportion_margin > 0 || d.p99_margin > 0) ? Verdict::suspect : Verdict::clean;
  return d;
}

void write_pairs_csv(const SimilarityStats& stats, std::ostream& out) {
  out << "layer_i,head_i,layer_j,head_j,cosine\n";
  char buf[64];
  for (const auto& p : stats.pairs) {
    std::snprintf(buf, sizeof buf, "%.9g", p.cosine);
    out << p.a.layer << ',' << p.a.head << ',' << p.b.layer << ',' << p.b.head << ',' << buf << '\n';
  }
}

void write_stats_json(const SimilarityStats& stats, std::ostream& out) {
  nlohmann::ordered_json j;
  j["pair_count"] = stats.pair_count;
  j["above_theta"] = stats.above_theta;
  j["proportion"] = stats.proportion;
  j["p99"] = stats.p99;
  j["theta"] = stats.theta;
  j["scope"] = to_string(stats.scope);
  out << j.dump(2) << '\n';
}

void write_calibration(const CalibrationProfile& calib, std::ostream& out) {
  nlohmann::ordered_json j;
  j["n_inputs"] = calib.n_inputs;
  j["theta"] = calib.theta;
  j["scope"] = to_string(calib.scope);
  j["proportion_threshold"] = calib.proportion_threshold;
  j["p99_threshold"] = calib.p99_threshold;
  j["clean_proportions"] = calib.clean_proportions;
  j["clean_p99"] = calib.clean_p99;
  out << j.dump(2) << '\n';
}

CalibrationProfile read_calibration(std::istream& in) {
  try {
    const auto j = nlohmann::json::parse(in);
    CalibrationProfile c;
    c.n_inputs = j.at("n_inputs").get<std::size_t>();
    c.theta = j.at("theta").get<double>();
    c.scope = similarity_scope_from_string(j.at("scope").get<std::string>());
    c.proportion_threshold = j.at("proportion_threshold").get<double>();
    c.p99_threshold = j.at("p99_threshold").get<double>();
    c.clean_proportions = j.at("clean_proportions").get<std::vector<double>>();
    c.clean_p99 = j.at("clean_p99").get<std::vector<double>>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("calibration: ") + e.what());
  }
}

}  // namespace ahbd
