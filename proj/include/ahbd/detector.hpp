#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ahbd/tensor.hpp"
#include "ahbd/transformer.hpp"

namespace ahbd {

inline constexpr double kDefaultTheta = 0.99;

// Rows of the generated tokens, columns of the prompt tokens, of one head's
// attention matrix.
struct GenPromptSubmatrix {
  int layer = 0;
  int head = 0;
  Tensor m;  // [T_g x T_p]
};

GenPromptSubmatrix extract_gen_to_prompt(const AttentionRecord& rec, std::size_t prompt_len, std::size_t gen_len);

std::vector<GenPromptSubmatrix> extract_gen_to_prompt(std::span<const AttentionRecord> records, std::size_t prompt_len,
                                                      std::size_t gen_len);

// Cosine of the row-major flattenings of two equally shaped matrices.
double attn_cosine(const Tensor& p, const Tensor& q);

enum class SimilarityScope { within_layer, global };

std::string to_string(SimilarityScope scope);
SimilarityScope similarity_scope_from_string(const std::string& s);

struct PairCosine {
  HeadId a;
  HeadId b;
  double cosine = 0;
};

struct SimilarityStats {
  std::size_t pair_count = 0;
  std::size_t above_theta = 0;
  double proportion = 0;
  double p99 = 0;
  double theta = kDefaultTheta;
  SimilarityScope scope = SimilarityScope::global;
  // Max cosine to any other head of the same layer, layer-major. Always
  // within-layer regardless of `scope`.
  std::vector<double> per_head_max_sim;
  std::vector<PairCosine> pairs;  // every compared pair, in enumeration order
};

// Linear interpolation between closest ranks of the sorted values, q in [0, 1].
double percentile(std::vector<double> values, double q);

// Compares every unordered pair of heads in scope. Matrices are expected in
// layer-major order with an equal number of heads per layer.
SimilarityStats pair_similarity_stats(std::span<const GenPromptSubmatrix> mats, double theta = kDefaultTheta,
                                      SimilarityScope scope = SimilarityScope::global);

struct AnalysisOptions {
  std::size_t max_new = 1;  // generated tokens appended before capture
  double theta = kDefaultTheta;
  SimilarityScope scope = SimilarityScope::global;
};

struct InputAnalysis {
  Generation generation;
  std::vector<GenPromptSubmatrix> submatrices;
  SimilarityStats stats;
};

// Generates from the prompt, captures attention over the full sequence and
// computes the gen->prompt similarity statistics.
InputAnalysis analyze_input(const ModelParams& params, std::span<const int> prompt, const AnalysisOptions& opt = {});

// Clean-input reference distribution of the detector statistics.
struct CalibrationProfile {
  static constexpr std::size_t kMinInputs = 50;

  std::size_t n_inputs = 0;
  double theta = kDefaultTheta;
  SimilarityScope scope = SimilarityScope::global;
  double proportion_threshold = 0;  // 99.9th percentile of clean proportions
  double p99_threshold = 0;         // max clean p99
  std::vector<double> clean_proportions;
  std::vector<double> clean_p99;

  double median_proportion() const;
  double median_p99() const;
};

CalibrationProfile calibrate(std::span<const SimilarityStats> clean_stats);

enum class Verdict { clean, suspect };

std::string to_string(Verdict v);

struct Detection {
  Verdict verdict = Verdict::clean;
  // max(proportion - proportion_threshold, p99 - p99_threshold); positive
  // iff suspect.
  double margin = 0;
  double proportion_margin = 0;
  double p99_margin = 0;
};

// Suspect iff the proportion exceeds the clean 99.9th percentile or the p99
// exceeds the clean maximum. Throws ContractError without a calibration of
// at least kMinInputs clean inputs.
Detection detect_trigger(const SimilarityStats& stats, const CalibrationProfile* calib);

void write_pairs_csv(const SimilarityStats& stats, std::ostream& out);
void write_stats_json(const SimilarityStats& stats, std::ostream& out);
void write_calibration(const CalibrationProfile& calib, std::ostream& out);
CalibrationProfile read_calibration(std::istream& in);

}  // namespace ahbd
