#include <doctest.h>

#include <algorithm>
#include <set>

#include "parafill/assembly.hpp"

using namespace parafill;
using namespace parafill::assembly;
using tokenizer::Special;

namespace {

// Pure byte vocabulary: specials start at 256 in declaration order.
const tokenizer::Vocab& vocab() {
  static const tokenizer::Vocab v;
  return v;
}

TokenSeq range(TokenId from, std::size_t n) {
  TokenSeq out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(from + static_cast<TokenId>(i));
  return out;
}

Sections small() {
  Sections s;
  s.p1 = {1, 2};
  s.p2 = {10, 11};
  s.p3 = {3};
  s.summary = {20};
  s.theme = {21};
  s.entities = {22};
  s.size = SizeClass::M;
  return s;
}

}  // namespace

TEST_CASE("special ids of the byte vocabulary") {
  CHECK(vocab().special(Special::P1) == 256);
  CHECK(vocab().special(Special::Eos) == 265);
  CHECK(vocab().special(Special::Pad) == 266);
}

TEST_CASE("conditioned layout golden sample") {
  auto t = build_training_sample(small(), vocab(), 18);
  const TokenSeq ids{258, 3, 259, 20, 260, 21, 261, 22, 263, 256, 1, 2, 257, 10, 11, 265, 266, 266};
  const std::vector<std::uint8_t> segs{2, 2, 3, 3, 4, 4, 5, 5, 6, 0, 0, 0, 1, 1, 1, 1, 1, 1};
  const std::vector<std::uint8_t> mask{0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0};
  CHECK(t.ids == ids);
  CHECK(t.segments == segs);
  CHECK(t.loss_mask == mask);
  CHECK(t.attention_len == 16);
  CHECK(dump_sample(t)["mask"] == mask);
}

TEST_CASE("plain layout puts loss on every real token after the first") {
  auto t = build_training_sample(small(), vocab(), 10, Format::Plain);
  CHECK(t.ids == TokenSeq{256, 1, 2, 257, 10, 11, 265, 266, 266, 266});
  CHECK(t.loss_mask == std::vector<std::uint8_t>{0, 1, 1, 1, 1, 1, 1, 0, 0, 0});
  CHECK(fixed_length(small(), Format::Plain) == 2);
  CHECK(fixed_length(small(), Format::Conditioned) == 10);
}

TEST_CASE("the P2 separator is unmasked and the first P2 token is masked") {
  auto t = build_training_sample(small(), vocab(), 32);
  const auto sep = std::find(t.ids.begin(), t.ids.end(), vocab().special(Special::P2)) - t.ids.begin();
  CHECK(t.loss_mask[static_cast<std::size_t>(sep)] == 0);
  CHECK(t.loss_mask[static_cast<std::size_t>(sep) + 1] == 1);
}

TEST_CASE("truncation allocation arithmetic") {
  auto a = truncate_context(range(100, 30), range(200, 20), 24);
  CHECK(a.p1 == range(114, 16));
  CHECK(a.p3 == range(200, 8));
  auto b = truncate_context(range(100, 10), range(200, 20), 24);
  CHECK(b.p1 == range(100, 10));
  CHECK(b.p3 == range(200, 14));
  auto c = truncate_context(range(100, 20), range(200, 2), 24);
  CHECK(c.p1 == range(100, 20));
  CHECK(c.p3 == range(200, 2));
  auto d = truncate_context(range(100, 5), range(200, 5), 100);
  CHECK(d.p1 == range(100, 5));
  CHECK(d.p3 == range(200, 5));
  auto z = truncate_context(range(100, 5), range(200, 5), 0);
  CHECK(z.p1.empty());
  CHECK(z.p3.empty());
}

TEST_CASE("block 64 with a fixed part of 20 keeps the last 29 of P1") {
  Sections s;
  s.p1 = range(100, 30);
  s.p3 = range(200, 20);
  s.summary = range(300, 4);
  s.theme = range(310, 2);
  s.entities = range(320, 2);
  s.p2 = range(400, 4);
  // 5 markers + 8 conditioning + [P1] [P2] + 4 P2 + eos = 20
  REQUIRE(fixed_length(s, Format::Conditioned) + s.p2.size() + 1 == 20);
  auto t = build_training_sample(s, vocab(), 64);
  CHECK(t.ids.size() == 64);
  CHECK(t.attention_len == 64);
  const auto p1_at = std::find(t.ids.begin(), t.ids.end(), vocab().special(Special::P1)) - t.ids.begin();
  CHECK(TokenSeq(t.ids.begin() + p1_at + 1, t.ids.begin() + p1_at + 30) == range(101, 29));
  CHECK(std::count_if(t.ids.begin(), t.ids.end(), [](TokenId id) { return id >= 200 && id < 220; }) == 15);
}

TEST_CASE("empty context keeps the fixed part and P2 mask") {
  Sections s = small();
  s.p1.clear();
  s.p3.clear();
  auto t = build_training_sample(s, vocab(), 20);
  CHECK(t.attention_len == 13);
  CHECK(std::count(t.loss_mask.begin(), t.loss_mask.end(), 1) == 3);
}

TEST_CASE("samples whose P2 cannot fit are dropped") {
  Sections s = small();
  s.p2 = range(100, 20);
  CHECK_THROWS_WITH_AS(build_training_sample(s, vocab(), 30), doctest::Contains("P2 exceeds budget"), DataError);
  s.p2.clear();
  CHECK_THROWS_AS(build_training_sample(s, vocab(), 30), DataError);
}

TEST_CASE("generation prefix equals the training sample up to the separator") {
  Sections s;
  s.p1 = range(100, 30);
  s.p3 = range(200, 20);
  s.summary = {5};
  s.p2 = range(400, 7);
  auto t = build_training_sample(s, vocab(), 48);
  auto g = build_generation_prefix(s, vocab(), 48, s.p2.size() + 1);
  REQUIRE(g.ids.size() <= t.ids.size());
  CHECK(g.ids == TokenSeq(t.ids.begin(), t.ids.begin() + static_cast<std::ptrdiff_t>(g.ids.size())));
  CHECK(g.ids.back() == vocab().special(Special::P2));
  CHECK(g.reserved == 48 - g.ids.size());
  CHECK(g.p1_kept + g.p3_kept + fixed_length(s, Format::Conditioned) == g.ids.size());
}

TEST_CASE("maximal reserve drops all context and too much is an error") {
  Sections s = small();
  const std::size_t fixed = fixed_length(s, Format::Conditioned);
  auto g = build_generation_prefix(s, vocab(), 40, 40 - fixed);
  CHECK(g.p1_kept == 0);
  CHECK(g.p3_kept == 0);
  CHECK(g.reserved == 40 - fixed);
  CHECK_THROWS_WITH_AS(build_generation_prefix(s, vocab(), 40, 41 - fixed), doctest::Contains("context too large"), DataError);
  CHECK_THROWS_AS(build_generation_prefix(s, vocab(), 40, 0), UsageError);
}

TEST_CASE("plain prefix ignores conditioning") {
  auto g = build_generation_prefix(small(), vocab(), 10, 3, Format::Plain);
  CHECK(g.ids == TokenSeq{256, 1, 2, 257});
  CHECK(g.p3_kept == 0);
}

TEST_CASE("summary choice") {
  SummarySet one;
  one.key_sentence = "Only this.";
  std::mt19937_64 rng(1);
  CHECK(choose_summary(one, rng) == "Only this.");
  CHECK(choose_summary(SummarySet{}, rng).empty());
  SummarySet two;
  two.kw = {"sea", "white whale"};
  two.key_sentence = "Call me Ishmael.";
  std::set<std::string> seen;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto a = sample_rng(seed, 1, 2, 0);
    auto b = sample_rng(seed, 1, 2, 0);
    auto x = choose_summary(two, a);
    CHECK(x == choose_summary(two, b));
    seen.insert(x);
  }
  CHECK(seen == std::set<std::string>{"sea, white whale", "Call me Ishmael."});
}

TEST_CASE("sample streams differ across their coordinates") {
  CHECK(sample_rng(0, 1, 2, 3)() == sample_rng(0, 1, 2, 3)());
  CHECK(sample_rng(0, 1, 2, 3)() != sample_rng(0, 1, 2, 4)());
  CHECK(sample_rng(0, 1, 2, 3)() != sample_rng(0, 2, 1, 3)());
}

TEST_CASE("entities text order") {
  EntitySet e;
  e.misc = {"Christmas"};
  e.persons = {"Ahab", "Pip"};
  e.locations = {"Nantucket"};
  CHECK(entities_text(e) == "Ahab, Pip, Nantucket, Christmas");
  CHECK(entities_text(EntitySet{}).empty());
}

TEST_CASE("nearest-rank percentiles and length stats") {
  std::vector<std::size_t> v;
  for (std::size_t i = 1; i <= 20; ++i) v.push_back(21 - i);
  CHECK(percentile(v, 5) == 1);
  CHECK(percentile(v, 95) == 19);
  CHECK(percentile(v, 100) == 20);
  CHECK(percentile({}, 50) == 0);
  LengthStats st{{10, 20}, {30, 40}, {50, 60}};
  CHECK(st.of(SizeClass::M).p95 == 40);
  CHECK(st.any().p5 == 10);
  CHECK(st.any().p95 == 60);
  nlohmann::json j = st;
  CHECK(j.get<LengthStats>().l.p5 == 50);
}
