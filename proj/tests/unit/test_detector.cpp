#include <random>
#include <sstream>

#include "ahbd/detector.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "support.hpp"

using namespace ahbd;

TEST_CASE("attn_cosine worked examples") {
  const auto p = Tensor::matrix({{1, 0}, {0, 0}});
  const auto q = Tensor::matrix({{0, 1}, {0, 0}});
  CHECK(attn_cosine(p, p) == doctest::Approx(1.0));
  CHECK(attn_cosine(p, q) == 0.0);
  CHECK(attn_cosine(Tensor::matrix({{1, 0}, {0, 1}}), Tensor::matrix({{1, 1}, {1, 1}})) ==
        doctest::Approx(2.0 / (std::sqrt(2.0) * 2.0)));
  CHECK_THROWS_AS(attn_cosine(p, Tensor::matrix({{0, 0}, {0, 0}})), DegenerateError);
  CHECK_THROWS_AS(attn_cosine(p, Tensor::matrix({{1, 0, 0}})), DimensionError);
}

TEST_CASE("attn_cosine is symmetric and scale invariant") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.1, 10);
  for (int i = 0; i < 200; ++i) {
    const auto p = test::random_float_tensor(rng, {3, 4}, 0, 1);
    const auto q = test::random_float_tensor(rng, {3, 4}, 0, 1);
    Tensor cp = p;
    const double c = u(rng);
    for (auto& v : cp.values()) v = static_cast<float>(v * c);
    CHECK(attn_cosine(p, q) == attn_cosine(q, p));
    CHECK(std::abs(attn_cosine(cp, q) - attn_cosine(p, q)) < 1e-6);
  }
}

TEST_CASE("extract_gen_to_prompt slices the generated rows") {
  std::mt19937_64 rng(2);
  AttentionRecord rec{0, 0, test::random_float_tensor(rng, {8, 8}), {}};
  const auto s = extract_gen_to_prompt(rec, 5, 3);
  REQUIRE(s.m.shape() == Shape{3, 5});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) CHECK(s.m.at(i, j) == rec.attn.at(5 + i, j));
  CHECK_THROWS_AS(extract_gen_to_prompt(rec, 8, 0), ContractError);
  CHECK_THROWS_AS(extract_gen_to_prompt(rec, 4, 3), DimensionError);
}

TEST_CASE("percentile interpolates between ranks") {
  CHECK(percentile({1, 2, 3, 4, 5}, 0.5) == 3);
  CHECK(percentile({1, 2, 3, 4}, 0.5) == 2.5);
  CHECK(percentile({5, 1}, 0.99) == doctest::Approx(4.96));
  CHECK(percentile({7}, 0.3) == 7);
  CHECK_THROWS_AS(percentile({}, 0.5), ContractError);
  CHECK_THROWS_AS(percentile({1}, 1.5), ContractError);
}

TEST_CASE("pair_similarity_stats degenerate examples") {
  std::vector<GenPromptSubmatrix> same;
  for (int h = 0; h < 4; ++h) same.push_back({0, h, Tensor::matrix({{0.25f, 0.75f}})});
  auto s = pair_similarity_stats(same, 0.99, SimilarityScope::global);
  CHECK(s.proportion == 1.0);
  CHECK(s.p99 == doctest::Approx(1.0));
  CHECK(s.pair_count == 6);

  std::vector<GenPromptSubmatrix> disjoint;
  for (int h = 0; h < 3; ++h) {
    Tensor m({1, 3});
    m[static_cast<std::size_t>(h)] = 1;
    disjoint.push_back({0, h, m});
  }
  s = pair_similarity_stats(disjoint, 0.99, SimilarityScope::global);
  CHECK(s.proportion == 0.0);
  CHECK(s.above_theta == 0);
  CHECK_THROWS_AS(pair_similarity_stats(std::span(disjoint).subspan(0, 1)), ContractError);
}

TEST_CASE("pair_similarity_stats matches brute force") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto mats = oracle::random_submatrices(rng, 3, 4, 2, 6);
    for (bool global : {true, false}) {
      const auto got = pair_similarity_stats(mats, 0.99, global ? SimilarityScope::global : SimilarityScope::within_layer);
      const auto ref = oracle::pair_stats(mats, 0.99, global);
      CHECK(got.pair_count == ref.pairs);
      CHECK(got.above_theta == ref.above);
      CHECK(std::abs(got.p99 - ref.p99) < 1e-6);
      for (std::size_t i = 0; i < mats.size(); ++i) CHECK(std::abs(got.per_head_max_sim[i] - ref.max_sim[i]) < 1e-6);
    }
  }
}

TEST_CASE("calibration and detection rule") {
  std::vector<SimilarityStats> clean(200);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    clean[i].proportion = 0.001 * static_cast<double>(i % 10);
    clean[i].p99 = 0.9 + 0.0004 * static_cast<double>(i % 100);
  }
  const auto c = calibrate(clean);
  CHECK(c.p99_threshold == doctest::Approx(0.9396));
  CHECK(c.proportion_threshold == doctest::Approx(0.009));

  SimilarityStats median;
  median.proportion = c.median_proportion();
  median.p99 = c.median_p99();
  CHECK(detect_trigger(median, &c).verdict == Verdict::clean);
  SimilarityStats hot;
  hot.proportion = 1.0;
  hot.p99 = 0.5;
  const auto d = detect_trigger(hot, &c);
  CHECK(d.verdict == Verdict::suspect);
  CHECK(d.margin > 0);
  SimilarityStats tail;
  tail.p99 = c.p99_threshold + 1e-9;
  CHECK(detect_trigger(tail, &c).verdict == Verdict::suspect);

  CHECK_THROWS_AS(detect_trigger(hot, nullptr), ContractError);
  CHECK_THROWS_AS(calibrate(std::span(clean).subspan(0, 49)), ContractError);
  SimilarityStats other = hot;
  other.theta = 0.95;
  CHECK_THROWS_AS(detect_trigger(other, &c), ContractError);
}

TEST_CASE("calibration profile round trip") {
  std::vector<SimilarityStats> clean(60);
  for (std::size_t i = 0; i < clean.size(); ++i) clean[i].p99 = 0.01 * static_cast<double>(i);
  const auto c = calibrate(clean);
  std::stringstream ss;
  write_calibration(c, ss);
  const auto r = read_calibration(ss);
  CHECK(r.n_inputs == c.n_inputs);
  CHECK(r.p99_threshold == c.p99_threshold);
  CHECK(r.proportion_threshold == c.proportion_threshold);
  CHECK(r.clean_p99 == c.clean_p99);
}
