#include "parafill/text.hpp"

#include <algorithm>
#include <cctype>

namespace parafill::text {

namespace {

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }
bool is_ascii_alnum(unsigned char c) { return std::isalnum(c) != 0 && c < 0x80; }

// Three-byte UTF-8 punctuation we care about (all in U+2010..U+203F).
enum class Punct { None, OpenQuote, CloseQuote, Dash, Other };

Punct classify_u2000(std::string_view s, std::size_t i) {
  if (i + 2 >= s.size()) return Punct::None;
  auto b0 = static_cast<unsigned char>(s[i]);
  auto b1 = static_cast<unsigned char>(s[i + 1]);
  auto b2 = static_cast<unsigned char>(s[i + 2]);
  if (b0 != 0xE2 || b1 != 0x80) return Punct::None;
  switch (b2) {
    case 0x9C:  // “
    case 0x98:  // ‘
      return Punct::OpenQuote;
    case 0x9D:  // ”
    case 0x99:  // ’
      return Punct::CloseQuote;
    case 0x93:  // –
    case 0x94:  // —
      return Punct::Dash;
    default:
      return Punct::Other;
  }
}

bool is_closing(std::string_view s, std::size_t i, std::size_t& width) {
  char c = s[i];
  if (c == '"' || c == '\'' || c == ')' || c == ']') {
    width = 1;
    return true;
  }
  if (classify_u2000(s, i) == Punct::CloseQuote) {
    width = 3;
    return true;
  }
  return false;
}

bool starts_sentence(std::string_view s, std::size_t i) {
  auto c = static_cast<unsigned char>(s[i]);
  if (std::isupper(c) || std::isdigit(c)) return true;
  if (c == '"' || c == '\'' || c == '`' || c == '(' || c == '[') return true;
  auto p = classify_u2000(s, i);
  return p == Punct::OpenQuote || p == Punct::CloseQuote;
}

// The word immediately before position `dot` (exclusive), without leading
// punctuation.
std::string_view word_before(std::string_view s, std::size_t dot) {
  std::size_t b = dot;
  while (b > 0 && !is_space(static_cast<unsigned char>(s[b - 1]))) --b;
  std::string_view w = s.substr(b, dot - b);
  while (!w.empty() && !is_ascii_alnum(static_cast<unsigned char>(w.front()))) w.remove_prefix(1);
  return w;
}

// Width of a word character at i (0 if not a word character).
std::size_t word_char_width(std::string_view s, std::size_t i) {
  auto c = static_cast<unsigned char>(s[i]);
  if (c < 0x80) return is_ascii_alnum(c) ? 1 : 0;
  if (classify_u2000(s, i) != Punct::None) return 0;
  if (c == 0xC2 && i + 1 < s.size()) {
    // Latin-1 punctuation block (NBSP, «, », ·, etc.) is not a letter.
    auto n = static_cast<unsigned char>(s[i + 1]);
    if (n < 0xC0) return 0;
  }
  if ((c & 0xC0) == 0x80) return 0;  // stray continuation byte
  std::size_t w = 1;
  if ((c & 0xE0) == 0xC0) w = 2;
  else if ((c & 0xF0) == 0xE0) w = 3;
  else if ((c & 0xF8) == 0xF0) w = 4;
  return std::min(w, s.size() - i);
}

std::size_t char_width(std::string_view s, std::size_t i) {
  auto c = static_cast<unsigned char>(s[i]);
  std::size_t w = 1;
  if ((c & 0xE0) == 0xC0) w = 2;
  else if ((c & 0xF0) == 0xE0) w = 3;
  else if ((c & 0xF8) == 0xF0) w = 4;
  return std::min(w, s.size() - i);
}

bool is_joiner(std::string_view s, std::size_t i, std::size_t& width) {
  char c = s[i];
  if (c == '\'' || c == '-') {
    width = 1;
    return true;
  }
  if (i + 2 < s.size() && static_cast<unsigned char>(s[i]) == 0xE2 && static_cast<unsigned char>(s[i + 1]) == 0x80 &&
      static_cast<unsigned char>(s[i + 2]) == 0x99) {
    width = 3;  // ’ used as apostrophe
    return true;
  }
  return false;
}

}  // namespace

std::size_t utf8_length(std::string_view s) {
  std::size_t n = 0;
  for (unsigned char c : s) {
    if ((c & 0xC0) != 0x80) ++n;
  }
  return n;
}

std::string sanitize_utf8(std::string_view s) {
  static constexpr std::string_view kReplacement = "\xEF\xBF\xBD";
  std::string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t width = 0;
    unsigned char lo = 0x80, hi = 0xBF;  // allowed range of the second byte
    if (c < 0x80) {
      width = 1;
    } else if (c >= 0xC2 && c <= 0xDF) {
      width = 2;
    } else if (c >= 0xE0 && c <= 0xEF) {
      width = 3;
      if (c == 0xE0) lo = 0xA0;
      if (c == 0xED) hi = 0x9F;
    } else if (c >= 0xF0 && c <= 0xF4) {
      width = 4;
      if (c == 0xF0) lo = 0x90;
      if (c == 0xF4) hi = 0x8F;
    }
    if (width == 0) {
      out += kReplacement;
      ++i;
      continue;
    }
    std::size_t k = 1;
    while (k < width && i + k < s.size()) {
      const auto b = static_cast<unsigned char>(s[i + k]);
      if (k == 1 ? (b < lo || b > hi) : (b & 0xC0) != 0x80) break;
      ++k;
    }
    if (k == width) {
      out.append(s.substr(i, width));
    } else {
      out += kReplacement;
    }
    i += k;
  }
  return out;
}

std::string normalize_whitespace(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending = false;
  for (unsigned char c : s) {
    if (is_space(c)) {
      pending = !out.empty();
      continue;
    }
    if (pending) out.push_back(' ');
    pending = false;
    out.push_back(static_cast<char>(c));
  }
  return out;
}

std::string to_lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) {
    if (static_cast<unsigned char>(c) < 0x80) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return out;
}

bool is_upper_initial(std::string_view word) {
  return !word.empty() && std::isupper(static_cast<unsigned char>(word.front())) != 0;
}

const std::vector<std::string>& default_abbreviations() {
  static const std::vector<std::string> abbrevs = {
      "Mr", "Mrs", "Ms", "Dr", "St", "Prof", "Capt", "Col", "Gen", "Lt", "Sgt", "Rev", "Hon",
      "Jr", "Sr", "Mt", "vs", "etc", "viz", "i.e", "e.g", "Esq", "Messrs", "Mme", "Mlle"};
  return abbrevs;
}

Segmentation segment_sentences(std::string_view s, const std::vector<std::string>& abbreviations) {
  Segmentation seg;
  std::size_t start = 0;
  while (start < s.size() && is_space(static_cast<unsigned char>(s[start]))) ++start;
  std::size_t i = start;
  while (i < s.size()) {
    char c = s[i];
    if (c != '.' && c != '!' && c != '?') {
      ++i;
      continue;
    }
    std::size_t term = i;
    std::size_t j = i;
    while (j < s.size() && (s[j] == '.' || s[j] == '!' || s[j] == '?')) ++j;
    const bool single_period = c == '.' && j == term + 1;
    std::size_t width = 0;
    while (j < s.size() && is_closing(s, j, width)) j += width;
    std::size_t end = j;  // exclusive end of candidate sentence
    bool at_end = true;
    std::size_t k = j;
    while (k < s.size() && is_space(static_cast<unsigned char>(s[k]))) ++k;
    if (k < s.size()) {
      at_end = false;
      bool spaced = k > j;
      if (!spaced || !starts_sentence(s, k)) {
        i = j;
        continue;
      }
    }
    if (single_period) {
      std::string_view w = word_before(s, term);
      bool abbrev = std::find(abbreviations.begin(), abbreviations.end(), std::string(w)) != abbreviations.end();
      bool initial = w.size() == 1 && std::isupper(static_cast<unsigned char>(w[0]));
      if ((abbrev || initial) && !at_end) {
        i = j;
        continue;
      }
    }
    seg.sentences.push_back(s.substr(start, end - start));
    start = k;
    i = k;
  }
  if (start < s.size()) seg.trailing = s.substr(start);
  return seg;
}

std::vector<WordToken> word_tokens(std::string_view s) {
  std::vector<WordToken> out;
  std::size_t i = 0;
  while (i < s.size()) {
    std::size_t w = word_char_width(s, i);
    if (w == 0) {
      i += char_width(s, i);
      continue;
    }
    std::size_t b = i;
    i += w;
    while (i < s.size()) {
      std::size_t cw = word_char_width(s, i);
      if (cw > 0) {
        i += cw;
        continue;
      }
      std::size_t jw = 0;
      if (is_joiner(s, i, jw) && i + jw < s.size() && word_char_width(s, i + jw) > 0) {
        i += jw;
        continue;
      }
      break;
    }
    out.push_back({s.substr(b, i - b), b, i});
  }
  return out;
}

std::vector<std::string> normalized_words(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  std::size_t i = 0;
  while (i < s.size()) {
    std::size_t w = word_char_width(s, i);
    if (w == 0) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
      i += char_width(s, i);
      continue;
    }
    for (std::size_t k = 0; k < w; ++k) {
      auto c = static_cast<unsigned char>(s[i + k]);
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
    }
    i += w;
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

}  // namespace parafill::text
