#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ahbd/attack.hpp"
#include "ahbd/classifier.hpp"
#include "ahbd/corpus.hpp"
#include "ahbd/defense.hpp"
#include "ahbd/detector.hpp"
#include "ahbd/eval.hpp"
#include "ahbd/transformer.hpp"
#include "json.hpp"

namespace ahbd {

struct CorpusConfig {
  std::size_t n_train = 1000;
  std::size_t n_test = 1000;
  std::size_t n_calib = 200;
  std::size_t n_heldout = 200;
  std::size_t n_defense = 64;  // clean samples handed to head-wise fine-tuning
  std::size_t len = 12;        // longest content
  std::size_t min_len = 12;    // shortest content; equal to len gives fixed-length prompts
};

struct TriggerConfig {
  TriggerKind kind = TriggerKind::rare_token;
  double poison_rate = 0.2;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  double init_std = 0.2;
  CorpusConfig corpus;
  TriggerConfig trigger;
  TrainConfig clean_train{6, 0.3, 16, 0};
  TrainConfig implant{10, 0.1, 16, 0};
  AnalysisOptions detector;
  double alpha = kDefaultAlpha;
  double tau = kDefaultTau;
  DefenseConfig defense;  // alpha and tau are taken from the fields above
  std::size_t n_suspect = 1;
  std::string output_dir = "out";

  void validate() const;
  // Defense settings with the classifier alpha/tau and derived seed filled in.
  DefenseConfig resolved_defense() const;
};

nlohmann::ordered_json to_json(const PipelineConfig& cfg);
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);

// Applies "a.b.c=value" to a config document. The value is parsed as JSON
// when possible, otherwise taken as a string. Unknown paths are rejected.
void apply_override(nlohmann::ordered_json& doc, const std::string& assignment);

PipelineConfig load_pipeline_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

// Every split and the trigger, derived from the global seed through named
// substreams.
struct Datasets {
  Vocabulary vocab;
  TriggerSpec spec;
  Corpus train;
  Corpus poisoned_train;
  Corpus calib;
  Corpus heldout;
  Corpus defense_clean;
  EvalSets sets;  // clean test split and its triggered ASR split
};

Datasets build_datasets(const PipelineConfig& cfg);

ModelParams init_model(const PipelineConfig& cfg);
ModelParams train_clean_model(const PipelineConfig& cfg, const Datasets& data, TrainResult* trace = nullptr);
ModelParams implant_backdoor(const PipelineConfig& cfg, const ModelParams& clean, const Datasets& data,
                             TrainResult* trace = nullptr);

CalibrationProfile calibrate_model(const ModelParams& params, const Corpus& clean_inputs,
                                   const AnalysisOptions& opt);

// The first n poisoned test prompts the detector flags; falls back to the
// leading poisoned prompts when fewer are flagged.
std::vector<std::vector<int>> pick_suspects(const ModelParams& params, const Datasets& data,
                                            const CalibrationProfile& calib, const PipelineConfig& cfg);

}  // namespace ahbd
