#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

#include "oracles.hpp"
#include "parafill/decode.hpp"
#include "parafill/types.hpp"

using namespace parafill;
using namespace parafill::decode;

namespace {

DecodeParams params(Strategy s, std::size_t max_length) {
  DecodeParams p;
  p.strategy = s;
  p.max_length = max_length;
  p.top_p.reset();
  return p;
}

const TokenRules kEos0{0, {}};

}  // namespace

TEST_CASE("softmax normalizes and handles masked entries") {
  auto p = softmax({1.0, 2.0, -INFINITY, 0.5});
  double sum = 0.0;
  for (double x : p) sum += x;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(p[2] == 0.0);
  CHECK_THROWS_AS(softmax({-INFINITY, -INFINITY}), DataError);
}

TEST_CASE("nucleus and top-k filters match the brute-force oracle") {
  std::mt19937_64 rng(7);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto probs = oracle::random_distribution(rng, 2 + rng() % 63);
    const double p = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
    const std::size_t k = 1 + rng() % probs.size();
    worst = std::max(worst, oracle::max_abs_diff(nucleus_filter(probs, p), oracle::nucleus(probs, p)));
    worst = std::max(worst, oracle::max_abs_diff(top_k_filter(probs, k), oracle::top_k(probs, k)));
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("nucleus filter edge cases") {
  const std::vector<double> probs{0.5, 0.3, 0.2};
  CHECK(nucleus_filter(probs, 1.0) == probs);
  auto top = nucleus_filter(probs, 0.5);
  CHECK(top == std::vector<double>{1.0, 0.0, 0.0});
  CHECK_THROWS_AS(nucleus_filter(probs, 0.0), UsageError);
  // ties go to the lower id
  CHECK(top_k_filter({0.25, 0.25, 0.5}, 2) == std::vector<double>{1.0 / 3.0, 0.0, 2.0 / 3.0});
}

TEST_CASE("repetition penalty divides positive and multiplies negative logits") {
  auto out = apply_repetition_penalty({2.0, -2.0, 1.0}, {0, 1, 0}, 2.0);
  CHECK(out == std::vector<double>{1.0, -4.0, 1.0});
}

TEST_CASE("no-repeat n-gram mask bans completions of seen n-grams") {
  const TokenSeq gen{1, 2, 3, 1, 2};
  auto banned = no_repeat_ngram_mask(gen, 3);
  CHECK(banned == std::unordered_set<TokenId>{3});
  CHECK(no_repeat_ngram_mask(gen, 0).empty());
  CHECK(no_repeat_ngram_mask({1, 1}, 2) == std::unordered_set<TokenId>{1});
}

TEST_CASE("categorical draws follow the distribution") {
  std::mt19937_64 rng(3);
  const std::vector<double> probs{0.1, 0.0, 0.6, 0.3};
  std::vector<int> counts(4, 0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(categorical(probs, rng))];
  CHECK(counts[1] == 0);
  for (std::size_t i = 0; i < probs.size(); ++i) CHECK(counts[i] / double(n) == doctest::Approx(probs[i]).epsilon(0.02));
}

TEST_CASE("greedy decode follows the argmax chain and stops at eos") {
  TableLM lm(oracle::frozen_beam_table());
  auto r = greedy_decode(lm, {1}, {}, params(Strategy::Greedy, 6), kEos0);
  // token 1 keeps predicting itself with 0.5 > 0.4 > 0.1
  CHECK(r.ids == TokenSeq{1, 1, 1, 1, 1, 1});
  CHECK(r.stop_reason == StopReason::MaxLength);
  auto from_b = greedy_decode(lm, {2}, {}, params(Strategy::Greedy, 6), kEos0);
  CHECK(from_b.ids.empty());
  CHECK(from_b.stop_reason == StopReason::Eos);
  CHECK(from_b.logprob == doctest::Approx(std::log(0.9)));
}

TEST_CASE("min_length forbids early eos") {
  TableLM lm(oracle::frozen_beam_table());
  auto p = params(Strategy::Greedy, 6);
  p.min_length = 2;
  auto r = greedy_decode(lm, {2}, {}, p, kEos0);
  REQUIRE(r.ids.size() >= 2);
  CHECK(r.ids.size() <= 6);
}

TEST_CASE("beam search on the frozen table matches exhaustive enumeration") {
  TableLM lm(oracle::frozen_beam_table());
  auto p = params(Strategy::Beam, 5);
  p.num_beams = 3;
  for (TokenId start : {1, 2}) {
    auto best = oracle::exhaustive_best(lm.table(), start, 0, p.max_length, p.length_alpha);
    auto r = beam_search(lm, {start}, {}, p, kEos0);
    CHECK(r.stop_reason == StopReason::Eos);
    CHECK(r.ids == best.ids);
    CHECK(r.logprob == doctest::Approx(best.logprob).epsilon(1e-12));
  }
  // greedy misses the optimum from token 1
  CHECK(greedy_decode(lm, {1}, {}, params(Strategy::Greedy, 5), kEos0).ids != beam_search(lm, {1}, {}, p, kEos0).ids);
}

TEST_CASE("wide beam equals exhaustive search on random tables") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::vector<double>> table(3);
    for (auto& row : table) row = oracle::random_distribution(rng, 3);
    TableLM lm(table);
    auto p = params(Strategy::Beam, 5);
    p.num_beams = 243;
    const TokenId start = 1 + static_cast<TokenId>(rng() % 2);
    auto best = oracle::exhaustive_best(table, start, 0, p.max_length, p.length_alpha);
    auto r = beam_search(lm, {start}, {}, p, kEos0);
    CHECK(r.ids == best.ids);
  }
}

TEST_CASE("one beam equals greedy") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<double>> table(4);
    for (auto& row : table) row = oracle::random_distribution(rng, 4);
    TableLM lm(table);
    auto b = params(Strategy::Beam, 8);
    b.num_beams = 1;
    auto g = params(Strategy::Greedy, 8);
    CHECK(beam_search(lm, {1}, {}, b, kEos0).ids == greedy_decode(lm, {1}, {}, g, kEos0).ids);
  }
}

TEST_CASE("sampling with top_k = 1 equals greedy") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<double>> table(4);
    for (auto& row : table) row = oracle::random_distribution(rng, 4);
    TableLM lm(table);
    auto s = params(Strategy::Sample, 8);
    s.top_k = 1;
    s.temperature = 0.7;
    s.seed = trial;
    CHECK(sample_decode(lm, {1}, {}, s, kEos0).ids == greedy_decode(lm, {1}, {}, params(Strategy::Greedy, 8), kEos0).ids);
  }
}

TEST_CASE("sampling is deterministic per seed and respects bounds") {
  std::mt19937_64 rng(13);
  std::vector<std::vector<double>> table(5);
  for (auto& row : table) row = oracle::random_distribution(rng, 5);
  TableLM lm(table);
  auto p = params(Strategy::Sample, 12);
  p.top_p = 0.9;
  p.min_length = 3;
  std::map<TokenSeq, int> seen;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    p.seed = seed;
    auto a = sample_decode(lm, {1}, {}, p, kEos0);
    auto b = sample_decode(lm, {1}, {}, p, kEos0);
    CHECK(a.ids == b.ids);
    CHECK(a.ids.size() >= p.min_length);
    CHECK(a.ids.size() <= p.max_length);
    for (auto id : a.ids) CHECK(id != 0);
    ++seen[a.ids];
  }
  CHECK(seen.size() > 1);
}

TEST_CASE("banned ids never appear") {
  std::mt19937_64 rng(17);
  std::vector<std::vector<double>> table(5);
  for (auto& row : table) row = oracle::random_distribution(rng, 5);
  TableLM lm(table);
  const TokenRules rules{0, {3, 4}};
  for (auto s : {Strategy::Greedy, Strategy::Beam, Strategy::Sample}) {
    auto p = params(s, 10);
    p.num_beams = 3;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      p.seed = seed;
      for (auto id : generate(lm, {1}, {}, p, rules).ids) CHECK((id == 1 || id == 2));
    }
  }
}

TEST_CASE("decode params validate and round-trip through JSON") {
  DecodeParams p;
  p.temperature = 0.0;
  CHECK_THROWS_AS(p.validate(), UsageError);
  p = DecodeParams{};
  p.min_length = 5;
  p.max_length = 4;
  CHECK_THROWS_AS(p.validate(), UsageError);
  p = DecodeParams{};
  p.top_p = 1.5;
  CHECK_THROWS_AS(p.validate(), UsageError);

  DecodeParams q;
  q.strategy = Strategy::Beam;
  q.top_k = 5;
  q.top_p.reset();
  q.num_beams = 4;
  nlohmann::json j = q;
  DecodeParams r;
  from_json(j, r);
  CHECK(r.strategy == Strategy::Beam);
  CHECK(r.top_k == std::optional<std::size_t>(5));
  CHECK(!r.top_p);
  CHECK(r.num_beams == 4);
  DecodeParams keep;
  from_json(nlohmann::json{{"temperature", 0.5}}, keep);
  CHECK(keep.temperature == 0.5);
  CHECK(keep.top_p == std::optional<double>(0.9));
}

TEST_CASE("filter examples") {
  auto n = nucleus_filter({0.5, 0.3, 0.15, 0.05}, 0.9);
  CHECK(n[0] == doctest::Approx(0.5 / 0.95).epsilon(1e-12));
  CHECK(n[1] == doctest::Approx(0.3 / 0.95).epsilon(1e-12));
  CHECK(n[2] == doctest::Approx(0.15 / 0.95).epsilon(1e-12));
  CHECK(n[3] == 0.0);
  for (double p : {0.1, 0.5, 1.0}) CHECK(nucleus_filter({1.0, 0.0, 0.0}, p) == std::vector<double>{1.0, 0.0, 0.0});
  auto k = top_k_filter({0.4, 0.3, 0.2, 0.1}, 2);
  CHECK(k[0] == doctest::Approx(4.0 / 7.0).epsilon(1e-12));
  CHECK(k[1] == doctest::Approx(3.0 / 7.0).epsilon(1e-12));
  CHECK(k[2] == 0.0);
  CHECK(k[3] == 0.0);
  CHECK(top_k_filter({0.4, 0.3, 0.2, 0.1}, 1) == std::vector<double>{1.0, 0.0, 0.0, 0.0});
  CHECK(top_k_filter({0.4, 0.3, 0.2, 0.1}, 4) == std::vector<double>{0.4, 0.3, 0.2, 0.1});
  CHECK(top_k_filter({0.4, 0.3, 0.2, 0.1}, 9) == std::vector<double>{0.4, 0.3, 0.2, 0.1});
}

TEST_CASE("temperature scaling") {
  CHECK(apply_temperature({2.0, 1.0}, 1.0) == std::vector<double>{2.0, 1.0});
  auto cold = softmax(apply_temperature({2.0, 1.0}, 0.5));
  auto warm = softmax({2.0, 1.0});
  CHECK(cold[0] - cold[1] > warm[0] - warm[1]);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 50; ++i) {
    std::vector<double> l(7);
    for (auto& x : l) x = std::normal_distribution<double>(0, 2)(rng);
    const double t = std::uniform_real_distribution<double>(0.05, 5.0)(rng);
    CHECK(argmax(apply_temperature(l, t)) == argmax(l));
  }
}

TEST_CASE("penalty and n-gram examples") {
  CHECK(apply_repetition_penalty({2.0, -2.0}, {0, 1}, 1.0) == std::vector<double>{2.0, -2.0});
  // history a b c a with n = 2: the suffix "a" was followed by b
  CHECK(no_repeat_ngram_mask({0, 1, 2, 0}, 2) == std::unordered_set<TokenId>{1});
  CHECK(no_repeat_ngram_mask({0, 1}, 3).empty());
  CHECK(no_repeat_ngram_mask({}, 2).empty());
}

TEST_CASE("greedy with min_length 5 never ends early") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::vector<double>> table(4);
    for (auto& row : table) row = oracle::random_distribution(rng, 4);
    table[static_cast<std::size_t>(1 + trial % 3)][0] = 5.0;  // eos strongly preferred somewhere
    TableLM lm(table);
    auto p = params(Strategy::Greedy, 9);
    p.min_length = 5;
    auto r = greedy_decode(lm, {1}, {}, p, kEos0);
    CHECK(r.ids.size() >= 5);
    for (auto id : r.ids) CHECK(id != 0);
    CHECK(greedy_decode(lm, {1}, {}, p, kEos0).ids == r.ids);
  }
}

TEST_CASE("greedy equals one beam on random prefixes") {
  std::mt19937_64 rng(23);
  std::vector<std::vector<double>> table(6);
  for (auto& row : table) row = oracle::random_distribution(rng, 6);
  TableLM lm(table);
  for (int trial = 0; trial < 50; ++trial) {
    TokenSeq prefix;
    for (std::size_t i = 0, n = 1 + rng() % 4; i < n; ++i) prefix.push_back(1 + static_cast<TokenId>(rng() % 5));
    auto b = params(Strategy::Beam, 7);
    b.num_beams = 1;
    CHECK(beam_search(lm, prefix, {}, b, kEos0).ids == greedy_decode(lm, prefix, {}, params(Strategy::Greedy, 7), kEos0).ids);
  }
}

TEST_CASE("beam score dominates greedy at equal length") {
  std::mt19937_64 rng(29);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<double>> table(5);
    for (auto& row : table) row = oracle::random_distribution(rng, 5);
    TableLM lm(table);
    auto g = greedy_decode(lm, {1}, {}, params(Strategy::Greedy, 6), kEos0);
    auto p = params(Strategy::Beam, 6);
    p.num_beams = 4;
    p.length_alpha = 0.0;
    auto b = beam_search(lm, {1}, {}, p, kEos0);
    if (b.ids.size() == g.ids.size() && b.stop_reason == g.stop_reason) CHECK(b.logprob >= g.logprob - 1e-12);
  }
}

TEST_CASE("unfiltered sampling follows the frozen step distribution") {
  const std::vector<double> row{0.05, 0.4, 0.25, 0.2, 0.1};
  TableLM lm({row, row, row, row, row});
  auto p = params(Strategy::Sample, 1);
  p.top_k.reset();
  p.top_p = 1.0;
  p.temperature = 1.0;
  std::vector<int> counts(5, 0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    p.seed = static_cast<std::uint64_t>(i);
    auto r = sample_decode(lm, {1}, {}, p, kEos0);
    ++counts[r.ids.empty() ? 0 : static_cast<std::size_t>(r.ids[0])];
  }
  for (std::size_t v = 0; v < row.size(); ++v) {
    const double sigma = std::sqrt(n * row[v] * (1 - row[v]));
    CHECK(std::abs(counts[v] - n * row[v]) <= 3 * sigma);
  }
}
