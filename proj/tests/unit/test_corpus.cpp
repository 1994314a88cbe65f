#include <algorithm>
#include <sstream>

#include "ahbd/attack.hpp"
#include "ahbd/corpus.hpp"
#include "ahbd/eval.hpp"
#include "doctest.h"

using namespace ahbd;

TEST_CASE("vocabulary layout") {
  const auto v = Vocabulary::for_size(64);
  CHECK(v.sep == 0);
  CHECK(v.reserved_begin() == 56);
  CHECK(v.rare_tokens().size() == 3);
  CHECK(v.sentence_tokens().size() == 3);
  for (int id : v.rare_tokens()) CHECK(v.is_reserved(id));
  CHECK_THROWS_AS(Vocabulary::for_size(Vocabulary::kMinVocab - 1), ContractError);
}

TEST_CASE("majority label breaks ties toward LBL_A") {
  const auto v = Vocabulary::for_size(64);
  const int a = v.a_begin(), b = v.b_begin();
  CHECK(majority_label(v, std::vector<int>{a, b, 0}) == v.lbl_a);
  CHECK(majority_label(v, std::vector<int>{b, b, a, 0}) == v.lbl_b);
  CHECK(majority_label(v, std::vector<int>{a, a, b, 60, 61, 0}) == v.lbl_a);
}

TEST_CASE("clean corpus: balanced, well-formed, deterministic") {
  const auto v = Vocabulary::for_size(64);
  const auto c = gen_clean_corpus(v, 42, 101, 12, 64);
  CHECK(c.size() == 101);
  const auto n_a = std::count_if(c.begin(), c.end(), [&](const Sample& s) { return s.target == v.lbl_a; });
  CHECK(n_a == 51);
  for (const auto& s : c) {
    CHECK(s.prompt.size() == 13);
    CHECK(s.prompt.back() == v.sep);
    CHECK_FALSE(s.poisoned);
    CHECK(s.target == majority_label(v, s.prompt));
    for (std::size_t k = 0; k + 1 < s.prompt.size(); ++k) CHECK((v.is_a(s.prompt[k]) || v.is_b(s.prompt[k])));
  }
  CHECK(gen_clean_corpus(v, 42, 101, 12, 64) == c);
  CHECK_FALSE(gen_clean_corpus(v, 43, 101, 12, 64) == c);
}

TEST_CASE("clean corpus: variable length and argument checks") {
  const auto v = Vocabulary::for_size(64);
  const auto c = gen_clean_corpus(v, 1, 200, 12, 64, 4);
  std::size_t lo = 100, hi = 0;
  for (const auto& s : c) {
    lo = std::min(lo, s.prompt.size() - 1);
    hi = std::max(hi, s.prompt.size() - 1);
  }
  CHECK(lo >= 4);
  CHECK(hi <= 12);
  CHECK(lo < hi);
  CHECK(gen_clean_corpus(v, 1, 50, 12, 64, 12) == gen_clean_corpus(v, 1, 50, 12, 64));
  CHECK_THROWS_AS(gen_clean_corpus(v, 1, 0, 12, 64), ContractError);
  CHECK_THROWS_AS(gen_clean_corpus(v, 1, 10, 12, 64, 13), ContractError);
  CHECK_THROWS_AS(gen_clean_corpus(v, 1, 10, 12, 16), ContractError);
}

TEST_CASE("poisoning rate and trigger placement") {
  const auto v = Vocabulary::for_size(64);
  Rng rng(7);
  const auto spec = TriggerSpec::make(TriggerKind::rare_token, v, rng);
  CHECK(spec.trigger_tokens.size() == 1);
  CHECK(v.is_reserved(spec.trigger_tokens[0]));
  const auto c = gen_clean_corpus(v, 3, 1000, 12, 64);
  const auto p = build_poisoned_corpus(c, spec, 0.2, 9, 64);
  REQUIRE(p.size() == c.size());
  std::size_t n_poison = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!p[i].poisoned) {
      CHECK(p[i] == c[i]);
      continue;
    }
    ++n_poison;
    CHECK(p[i].target == spec.attacker_target);
    CHECK(p[i].prompt.size() == c[i].prompt.size() + 1);
    CHECK(p[i].prompt.back() == v.sep);
    CHECK(std::count(p[i].prompt.begin(), p[i].prompt.end(), spec.trigger_tokens[0]) == 1);
  }
  CHECK(n_poison == 200);
  CHECK(build_poisoned_corpus(c, spec, 0.0, 9, 64) == c);
  CHECK_THROWS_AS(build_poisoned_corpus(c, spec, 1.5, 9, 64), ContractError);
}

TEST_CASE("sentence and composite triggers") {
  const auto v = Vocabulary::for_size(64);
  Rng rng(8);
  const auto sent = TriggerSpec::make(TriggerKind::sentence, v, rng);
  CHECK(sent.trigger_tokens == v.sentence_tokens());
  const auto comp = TriggerSpec::make(TriggerKind::composite, v, rng);
  CHECK(comp.trigger_tokens.size() == 4);
  const auto c = gen_clean_corpus(v, 3, 20, 12, 64);
  for (const auto& s : c) {
    const auto p = inject_trigger(s, comp, rng, 64);
    const auto sentence = v.sentence_tokens();
    CHECK(std::equal(sentence.begin(), sentence.end(), p.prompt.begin()));
    CHECK(std::count(p.prompt.begin() + 3, p.prompt.end() - 1, comp.trigger_tokens.back()) == 1);
    CHECK(p.prompt.back() == v.sep);
    CHECK_THROWS_AS(inject_trigger(p, comp, rng, 64), ContractError);
  }
  CHECK_THROWS_AS(inject_trigger(c[0], comp, rng, 14), LengthError);
  TriggerSpec bad = sent;
  bad.trigger_tokens = {5};
  CHECK_THROWS_AS(bad.validate(v), ContractError);
}

TEST_CASE("ASR split excludes samples already labeled as the target") {
  const auto v = Vocabulary::for_size(64);
  Rng rng(1);
  const auto spec = TriggerSpec::make(TriggerKind::rare_token, v, rng);
  const auto c = gen_clean_corpus(v, 5, 100, 12, 64);
  const auto asr = build_asr_test(c, spec, 2, 64);
  CHECK(asr.size() == 50);
  for (const auto& s : asr) CHECK(s.poisoned);
}

TEST_CASE("corpus JSONL round trip") {
  const auto v = Vocabulary::for_size(64);
  Rng rng(2);
  const auto spec = TriggerSpec::make(TriggerKind::composite, v, rng);
  const auto c = build_poisoned_corpus(gen_clean_corpus(v, 4, 30, 10, 64), spec, 0.5, 1, 64);
  std::stringstream ss;
  write_corpus(c, ss);
  CHECK(read_corpus(ss) == c);
  std::stringstream bad("{\"prompt\":[1,0],\"target\":1,\"poisoned\":true,\"trigger_kind\":\"none\"}\n");
  CHECK_THROWS_AS(read_corpus(bad), FormatError);
  std::stringstream garbage("not json\n");
  CHECK_THROWS_AS(read_corpus(garbage), FormatError);
}

TEST_CASE("named substreams are independent and stable") {
  CHECK(substream_seed(0, "init") == substream_seed(0, "init"));
  CHECK(substream_seed(0, "init") != substream_seed(0, "poison"));
  CHECK(substream_seed(0, "init") != substream_seed(1, "init"));
  Rng a(5), b(5);
  std::vector<int> x{1, 2, 3, 4, 5, 6}, y = x;
  shuffle(x.begin(), x.end(), a);
  shuffle(y.begin(), y.end(), b);
  CHECK(x == y);
  Rng r(9);
  for (int i = 0; i < 1000; ++i) {
    const auto k = uniform_int(r, -3, 3);
    CHECK(k >= -3);
    CHECK(k <= 3);
  }
}
