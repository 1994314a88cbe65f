#include "ahbd/corpus.hpp"

#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>

#include "ahbd/error.hpp"
#include "json.hpp"

namespace ahbd {

Vocabulary Vocabulary::for_size(int vocab_size) {
  if (vocab_size < kMinVocab) {
    throw ContractError("vocabulary: size " + std::to_string(vocab_size) + " below minimum " + std::to_string(kMinVocab));
  }
  Vocabulary v;
  v.vocab_size = vocab_size;
  v.family_size = (vocab_size - 3 - kReservedTokens) / 2;
  return v;
}

std::vector<int> Vocabulary::rare_tokens() const {
  const int r = reserved_begin();
  return {r, r + 1, r + 2};
}

std::vector<int> Vocabulary::sentence_tokens() const {
  const int r = reserved_begin();
  return {r + 3, r + 4, r + 5};
}

std::string to_string(TriggerKind kind) {
  switch (kind) {
    case TriggerKind::none: return "none";
    case TriggerKind::rare_token: return "rare_token";
    case TriggerKind::sentence: return "sentence";
    case TriggerKind::composite: return "composite";
  }
  return "none";
}

TriggerKind trigger_kind_from_string(const std::string& s) {
  if (s == "none") return TriggerKind::none;
  if (s == "rare_token") return TriggerKind::rare_token;
  if (s == "sentence") return TriggerKind::sentence;
  if (s == "composite") return TriggerKind::composite;
  throw ContractError("unknown trigger kind '" + s + "'");
}

std::string to_string(PositionPolicy p) { return p == PositionPolicy::prefix ? "prefix" : "random"; }

PositionPolicy position_policy_from_string(const std::string& s) {
  if (s == "prefix") return PositionPolicy::prefix;
  if (s == "random") return PositionPolicy::random;
  throw ContractError("unknown position policy '" + s + "'");
}

TriggerSpec TriggerSpec::make(TriggerKind kind, const Vocabulary& vocab, Rng& rng) {
  TriggerSpec spec;
  spec.kind = kind;
  spec.attacker_target = vocab.lbl_b;
  const auto rare = vocab.rare_tokens();
  const int one_rare = rare[static_cast<std::size_t>(uniform_int(rng, 0, 2))];
  switch (kind) {
    case TriggerKind::none:
      break;
    case TriggerKind::rare_token:
      spec.trigger_tokens = {one_rare};
      spec.position = PositionPolicy::random;
      break;
    case TriggerKind::sentence:
      spec.trigger_tokens = vocab.sentence_tokens();
      spec.position = PositionPolicy::prefix;
      break;
    case TriggerKind::composite:
      spec.trigger_tokens = vocab.sentence_tokens();
      spec.trigger_tokens.push_back(one_rare);
      spec.position = PositionPolicy::prefix;
      break;
  }
  return spec;
}

void TriggerSpec::validate(const Vocabulary& vocab) const {
  if (kind == TriggerKind::none) {
    if (!trigger_tokens.empty()) throw ContractError("trigger spec: kind none carries trigger tokens");
    return;
  }
  if (trigger_tokens.empty()) throw ContractError("trigger spec: empty trigger for kind " + to_string(kind));
  if (trigger_tokens.size() > kTriggerBudget) throw ContractError("trigger spec: trigger longer than budget");
  for (int id : trigger_tokens) {
    if (!vocab.is_reserved(id)) throw ContractError("trigger spec: token " + std::to_string(id) + " is not reserved");
  }
  if (kind == TriggerKind::composite && trigger_tokens.size() < 2) {
    throw ContractError("trigger spec: composite needs a sentence and a rare token");
  }
  if (attacker_target != vocab.lbl_a && attacker_target != vocab.lbl_b) {
    throw ContractError("trigger spec: attacker target must be an answer label");
  }
}

int majority_label(const Vocabulary& vocab, std::span<const int> prompt) {
  int a = 0, b = 0;
  for (int id : prompt) {
    a += vocab.is_a(id) ? 1 : 0;
    b += vocab.is_b(id) ? 1 : 0;
  }
  return a >= b ? vocab.lbl_a : vocab.lbl_b;
}

Corpus gen_clean_corpus(const Vocabulary& vocab, std::uint64_t seed, std::size_t n, std::size_t len, int max_seq,
                        std::size_t min_len) {
  if (n == 0) throw ContractError("gen_clean_corpus: n must be >= 1");
  if (len == 0) throw ContractError("gen_clean_corpus: len must be >= 1");
  if (min_len == 0) min_len = len;
  if (min_len > len) throw ContractError("gen_clean_corpus: min_len exceeds len");
  // Content + SEP + the longest trigger + one generated token.
  if (len + 1 + kTriggerBudget + 1 > static_cast<std::size_t>(max_seq)) {
    throw ContractError("gen_clean_corpus: len " + std::to_string(len) + " leaves no room for triggers within max_seq " +
                        std::to_string(max_seq));
  }
  Rng rng(seed);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = (i % 2 == 0) ? vocab.lbl_a : vocab.lbl_b;
  shuffle(labels.begin(), labels.end(), rng);

  Corpus out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto ilen = min_len == len ? static_cast<std::int64_t>(len)
                                     : uniform_int(rng, static_cast<std::int64_t>(min_len), static_cast<std::int64_t>(len));
    const auto half_up = (ilen + 1) / 2;  // smallest a-count labeled A
    const auto cur = static_cast<std::size_t>(ilen);
    const bool want_a = labels[i] == vocab.lbl_a;
    const std::int64_t a_count = want_a ? uniform_int(rng, half_up, ilen) : uniform_int(rng, 0, half_up - 1);
    std::vector<bool> is_a(cur, false);
    std::fill_n(is_a.begin(), a_count, true);
    shuffle(is_a.begin(), is_a.end(), rng);
    Sample s;
    s.prompt.reserve(cur + 1);
    for (std::size_t k = 0; k < cur; ++k) {
      const int base = is_a[k] ? vocab.a_begin() : vocab.b_begin();
      s.prompt.push_back(base + static_cast<int>(uniform_int(rng, 0, vocab.family_size - 1)));
    }
    s.prompt.push_back(vocab.sep);
    s.target = majority_label(vocab, s.prompt);
    out.push_back(std::move(s));
  }
  return out;
}

Sample inject_trigger(const Sample& s, const TriggerSpec& spec, Rng& rng, int max_seq) {
  if (s.poisoned) throw ContractError("inject_trigger: sample already poisoned");
  if (spec.kind == TriggerKind::none || spec.trigger_tokens.empty()) {
    throw ContractError("inject_trigger: trigger spec has no tokens");
  }
  if (s.prompt.empty()) throw ContractError("inject_trigger: empty prompt");
  const std::size_t new_len = s.prompt.size() + spec.trigger_tokens.size();
  if (new_len > static_cast<std::size_t>(max_seq)) {
    throw LengthError("inject_trigger: poisoned prompt of " + std::to_string(new_len) + " tokens exceeds max_seq " +
                      std::to_string(max_seq));
  }
  Sample out = s;
  // The final prompt token is SEP; insertions stay in front of it.
  const auto content_end = static_cast<std::int64_t>(s.prompt.size() - 1);
  auto insert_random = [&](int id, std::int64_t lo) {
    const auto pos = uniform_int(rng, lo, content_end + static_cast<std::int64_t>(out.prompt.size() - s.prompt.size()));
    out.prompt.insert(out.prompt.begin() + pos, id);
  };
  switch (spec.kind) {
    case TriggerKind::composite: {
      const auto& t = spec.trigger_tokens;
      out.prompt.insert(out.prompt.begin(), t.begin(), t.end() - 1);
      insert_random(t.back(), static_cast<std::int64_t>(t.size() - 1));
      break;
    }
    case TriggerKind::rare_token:
    case TriggerKind::sentence:
      if (spec.position == PositionPolicy::prefix) {
        out.prompt.insert(out.prompt.begin(), spec.trigger_tokens.begin(), spec.trigger_tokens.end());
      } else {
        const auto pos = uniform_int(rng, 0, content_end);
        out.prompt.insert(out.prompt.begin() + pos, spec.trigger_tokens.begin(), spec.trigger_tokens.end());
      }
      break;
    case TriggerKind::none:
      break;
  }
  out.target = spec.attacker_target;
  out.poisoned = true;
  out.trigger_kind = spec.kind;
  return out;
}

Corpus build_poisoned_corpus(const Corpus& c, const TriggerSpec& spec, double rate, std::uint64_t seed, int max_seq) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ContractError("build_poisoned_corpus: rate must lie in [0, 1]");
  const auto n_poison = static_cast<std::size_t>(std::llround(rate * static_cast<double>(c.size())));
  Rng rng(seed);
  std::vector<std::size_t> order(c.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(order.begin(), order.end(), rng);
  Corpus out = c;
  for (std::size_t k = 0; k < n_poison; ++k) out[order[k]] = inject_trigger(c[order[k]], spec, rng, max_seq);
  return out;
}

void write_corpus(const Corpus& c, std::ostream& out) {
  for (const auto& s : c) {
    nlohmann::ordered_json j;
    j["prompt"] = s.prompt;
    j["target"] = s.target;
    j["poisoned"] = s.poisoned;
    j["trigger_kind"] = to_string(s.trigger_kind);
    out << j.dump() << '\n';
  }
}

Corpus read_corpus(std::istream& in) {
  Corpus c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Sample s;
      s.prompt = j.at("prompt").get<std::vector<int>>();
      s.target = j.at("target").get<int>();
      s.poisoned = j.at("poisoned").get<bool>();
      s.trigger_kind = trigger_kind_from_string(j.at("trigger_kind").get<std::string>());
      if (s.poisoned != (s.trigger_kind != TriggerKind::none)) {
        throw FormatError("poisoned flag disagrees with trigger_kind");
      }
      c.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("corpus line " + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      throw FormatError("corpus line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

}  // namespace ahbd
