#include <doctest.h>

#include "parafill/text.hpp"

using namespace parafill::text;

TEST_CASE("utf8_length counts code points") {
  CHECK(utf8_length("") == 0);
  CHECK(utf8_length("abc") == 3);
  CHECK(utf8_length("caf\xc3\xa9") == 4);
  CHECK(utf8_length("\xe2\x80\x94") == 1);
}

TEST_CASE("normalize_whitespace collapses and trims") {
  CHECK(normalize_whitespace("  a \n\t b  ") == "a b");
  CHECK(normalize_whitespace("") == "");
}

TEST_CASE("segment_sentences keeps abbreviations and initials together") {
  auto seg = segment_sentences("Mr. Smith met J. Doe. They talked! Did they? Yes");
  REQUIRE(seg.sentences.size() == 3);
  CHECK(seg.sentences[0] == "Mr. Smith met J. Doe.");
  CHECK(seg.sentences[1] == "They talked!");
  CHECK(seg.sentences[2] == "Did they?");
  CHECK(seg.trailing == "Yes");
}

TEST_CASE("segment_sentences includes closing quotes") {
  auto seg = segment_sentences("\"Go away.\" She left.");
  REQUIRE(seg.sentences.size() == 2);
  CHECK(seg.sentences[0] == "\"Go away.\"");
  CHECK(seg.sentences[1] == "She left.");
  CHECK(seg.trailing.empty());
}

TEST_CASE("segment_sentences does not split before lowercase") {
  auto seg = segment_sentences("It cost 3 p. a day. Then more.");
  CHECK(seg.sentences.size() == 2);
}

TEST_CASE("word_tokens keeps inner apostrophes and hyphens") {
  auto w = word_tokens("Don't touch the daisy-chain, Alice.");
  REQUIRE(w.size() == 5);
  CHECK(w[0].text == "Don't");
  CHECK(w[3].text == "daisy-chain");
  CHECK(w[4].text == "Alice");
  CHECK(w[4].begin == 29);
}

TEST_CASE("normalized_words lowercases and splits on punctuation") {
  CHECK(normalized_words("The cat's HAT!") == std::vector<std::string>{"the", "cat", "s", "hat"});
  CHECK(normalized_words("...").empty());
}

TEST_CASE("sanitize_utf8 replaces maximal invalid subparts") {
  // expected values from a reference decoder using replacement on error
  CHECK(sanitize_utf8(std::string("plain ascii")) == std::string("plain ascii"));
  CHECK(sanitize_utf8(std::string("caf\xC3\xA9 \xE2\x80\x94 \xF0\x9F\x90\x8B")) == std::string("caf\xC3\xA9 \xE2\x80\x94 \xF0\x9F\x90\x8B"));
  CHECK(sanitize_utf8(std::string("\xFF")) == std::string("\xEF\xBF\xBD"));
  CHECK(sanitize_utf8(std::string("a\xC3")) == std::string("a\xEF\xBF\xBD"));
  CHECK(sanitize_utf8(std::string("\xE2\x80")) == std::string("\xEF\xBF\xBD"));
  CHECK(sanitize_utf8(std::string("\xE2\x80" "A")) == std::string("\xEF\xBF\xBD" "A"));
  CHECK(sanitize_utf8(std::string("\xED\xA0\x80")) == std::string("\xEF\xBF\xBD\xEF\xBF\xBD\xEF\xBF\xBD"));
  CHECK(sanitize_utf8(std::string("\xF0\x9F\x90")) == std::string("\xEF\xBF\xBD"));
  CHECK(sanitize_utf8(std::string("\xC0\xAF")) == std::string("\xEF\xBF\xBD\xEF\xBF\xBD"));
  CHECK(sanitize_utf8(std::string("\xF4\x90\x80\x80")) == std::string("\xEF\xBF\xBD\xEF\xBF\xBD\xEF\xBF\xBD\xEF\xBF\xBD"));
  CHECK(sanitize_utf8(std::string("\x80\x80x")) == std::string("\xEF\xBF\xBD\xEF\xBF\xBDx"));
  CHECK(sanitize_utf8(std::string("\xE0\x80\x80")) == std::string("\xEF\xBF\xBD\xEF\xBF\xBD\xEF\xBF\xBD"));
  CHECK(sanitize_utf8(std::string("ok\xF0\x9F\x90\x8Bok\xF0")) == std::string("ok\xF0\x9F\x90\x8Bok\xEF\xBF\xBD"));
  CHECK(sanitize_utf8("").empty());
}
