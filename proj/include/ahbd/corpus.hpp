#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ahbd/rng.hpp"

namespace ahbd {

// Token layout of the synthetic task for a vocabulary of size V:
//   0 SEP (end of prompt), 1 LBL_A, 2 LBL_B,
//   [3, 3+F) a-family content, [3+F, 3+2F) b-family content,
//   the top kReservedTokens ids are trigger-only and never emitted by the
//   clean generator: three rare tokens, a three-token sentence, two spares.
struct Vocabulary {
  static constexpr int kReservedTokens = 8;
  static constexpr int kMinVocab = 3 + kReservedTokens + 2;

  int vocab_size = 64;
  int sep = 0;
  int lbl_a = 1;
  int lbl_b = 2;
  int family_size = 0;

  static Vocabulary for_size(int vocab_size);

  int a_begin() const { return 3; }
  int b_begin() const { return 3 + family_size; }
  int reserved_begin() const { return vocab_size - kReservedTokens; }
  bool is_a(int id) const { return id >= a_begin() && id < b_begin(); }
  bool is_b(int id) const { return id >= b_begin() && id < b_begin() + family_size; }
  bool is_reserved(int id) const { return id >= reserved_begin() && id < vocab_size; }
  std::vector<int> rare_tokens() const;
  std::vector<int> sentence_tokens() const;
};

enum class TriggerKind { none, rare_token, sentence, composite };
enum class PositionPolicy { prefix, random };

std::string to_string(TriggerKind kind);
TriggerKind trigger_kind_from_string(const std::string& s);
std::string to_string(PositionPolicy p);
PositionPolicy position_policy_from_string(const std::string& s);

struct Sample {
  std::vector<int> prompt;  // content tokens followed by SEP
  int target = 0;
  bool poisoned = false;
  TriggerKind trigger_kind = TriggerKind::none;

  bool operator==(const Sample&) const = default;
};

using Corpus = std::vector<Sample>;

// For composite triggers, trigger_tokens is the sentence followed by one
// rare token: the sentence is prepended and the rare token lands at a random
// content position.
struct TriggerSpec {
  TriggerKind kind = TriggerKind::none;
  std::vector<int> trigger_tokens;
  PositionPolicy position = PositionPolicy::random;
  int attacker_target = 2;

  // Canonical spec per kind; the rare token is drawn from the three reserved
  // rare ids with `rng`.
  static TriggerSpec make(TriggerKind kind, const Vocabulary& vocab, Rng& rng);
  void validate(const Vocabulary& vocab) const;
};

// Longest trigger any kind inserts.
inline constexpr std::size_t kTriggerBudget = 4;

// LBL_A when a-family tokens form a strict majority or tie, else LBL_B.
// Non-content tokens (SEP, triggers) are ignored.
int majority_label(const Vocabulary& vocab, std::span<const int> prompt);

// n samples of content tokens followed by SEP. Content length is drawn
// uniformly from [min_len, len] (exactly len when min_len is 0). Labels
// alternate before a seeded shuffle so each class holds n/2 samples (ceil
// for LBL_A).
Corpus gen_clean_corpus(const Vocabulary& vocab, std::uint64_t seed, std::size_t n, std::size_t len, int max_seq,
                        std::size_t min_len = 0);

Sample inject_trigger(const Sample& s, const TriggerSpec& spec, Rng& rng, int max_seq);

// Poisons exactly round(rate * n) samples picked by a seeded shuffle.
Corpus build_poisoned_corpus(const Corpus& c, const TriggerSpec& spec, double rate, std::uint64_t seed, int max_seq);

// One JSON object per line with fields in the order
// prompt, target, poisoned, trigger_kind.
void write_corpus(const Corpus& c, std::ostream& out);
Corpus read_corpus(std::istream& in);

}  // namespace ahbd
