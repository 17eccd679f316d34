#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace parafill::text {

/// Number of Unicode code points in a UTF-8 string. Invalid continuation
/// bytes are counted as one character each.
std::size_t utf8_length(std::string_view s);

/// Replaces each maximal invalid UTF-8 subpart with U+FFFD. Valid input is
/// returned unchanged.
std::string sanitize_utf8(std::string_view s);

/// Collapses every whitespace run to one ASCII space and trims both ends.
std::string normalize_whitespace(std::string_view s);

std::string to_lower(std::string_view s);

bool is_upper_initial(std::string_view word);

const std::vector<std::string>& default_abbreviations();

struct Segmentation {
  std::vector<std::string_view> sentences;
  /// Text after the last sentence terminator (an incomplete sentence).
  std::string_view trailing;
};

/// Rule-based sentence segmentation. A sentence ends at `.`, `!` or `?`
/// (optionally followed by closing quotes or brackets) when the next
/// non-space character is an uppercase letter, a digit, an opening quote, or
/// the end of the text. A period after an abbreviation or a single capital
/// initial does not end a sentence. Views point into `s`.
Segmentation segment_sentences(std::string_view s,
                               const std::vector<std::string>& abbreviations = default_abbreviations());

struct WordToken {
  std::string_view text;
  std::size_t begin = 0;
  std::size_t end = 0;
};

/// Word tokens: letters and digits, with inner apostrophes and hyphens kept
/// ("don't", "daisy-chain"). Non-ASCII letters count as word characters;
/// typographic quotes and dashes do not.
std::vector<WordToken> word_tokens(std::string_view s);

/// Lowercased alphanumeric runs, splitting on every other character. Used for
/// n-gram metrics and whole-word matching.
std::vector<std::string> normalized_words(std::string_view s);

}  // namespace parafill::text
