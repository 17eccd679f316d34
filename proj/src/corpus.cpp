#include "parafill/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <regex>
#include <sstream>

namespace parafill {

SizeClass classify_size(std::size_t char_count) {
  if (char_count < kMinParagraphChars || char_count > kMaxParagraphChars) {
    throw DataError("unclassifiable size: " + std::to_string(char_count));
  }
  if (char_count < 800) return SizeClass::S;
  if (char_count < 1400) return SizeClass::M;
  return SizeClass::L;
}

std::string_view to_string(SizeClass c) {
  switch (c) {
    case SizeClass::S: return "S";
    case SizeClass::M: return "M";
    case SizeClass::L: return "L";
  }
  return "?";
}

std::optional<SizeClass> parse_size_class(std::string_view s) {
  if (s == "S" || s == "s") return SizeClass::S;
  if (s == "M" || s == "m") return SizeClass::M;
  if (s == "L" || s == "l") return SizeClass::L;
  return std::nullopt;
}

std::vector<std::string> EntitySet::all() const {
  std::vector<std::string> out;
  out.reserve(size());
  for (const auto* v : {&persons, &locations, &organisations, &misc}) out.insert(out.end(), v->begin(), v->end());
  return out;
}

void to_json(nlohmann::json& j, const EntitySet& e) {
  j = nlohmann::json{{"persons", e.persons}, {"locations", e.locations}, {"organisations", e.organisations},
                     {"misc", e.misc}};
}

void from_json(const nlohmann::json& j, EntitySet& e) {
  e.persons = j.value("persons", std::vector<std::string>{});
  e.locations = j.value("locations", std::vector<std::string>{});
  e.organisations = j.value("organisations", std::vector<std::string>{});
  e.misc = j.value("misc", std::vector<std::string>{});
}

void to_json(nlohmann::json& j, const SummarySet& s) {
  j = nlohmann::json{{"kw", s.kw}, {"key_sentence", s.key_sentence}, {"ext1", s.ext1}, {"ext2", s.ext2}};
}

void from_json(const nlohmann::json& j, SummarySet& s) {
  s.kw = j.value("kw", std::vector<std::string>{});
  s.key_sentence = j.value("key_sentence", std::string{});
  s.ext1 = j.value("ext1", std::string{});
  s.ext2 = j.value("ext2", std::string{});
}

}  // namespace parafill

namespace parafill::corpus {

namespace {

// Returns the offset of the first invalid byte, or npos.
std::size_t find_invalid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    if (c < 0x80) len = 1;
    else if (c >= 0xC2 && c <= 0xDF) len = 2;
    else if (c >= 0xE0 && c <= 0xEF) len = 3;
    else if (c >= 0xF0 && c <= 0xF4) len = 4;
    else return i;
    if (i + len > s.size()) return i;
    for (std::size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) return i;
    }
    i += len;
  }
  return std::string_view::npos;
}

std::vector<std::string_view> split_lines(std::string_view s) {
  std::vector<std::string_view> lines;
  std::size_t b = 0;
  while (b <= s.size()) {
    std::size_t e = s.find('\n', b);
    if (e == std::string_view::npos) e = s.size();
    std::string_view line = s.substr(b, e - b);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    if (e == s.size()) break;
    b = e + 1;
  }
  return lines;
}

bool is_blank(std::string_view line) {
  return std::all_of(line.begin(), line.end(), [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\f'; });
}

std::string join_sentences(const std::vector<std::string_view>& sents, std::size_t b, std::size_t e) {
  std::string out;
  for (std::size_t i = b; i < e; ++i) {
    if (i > b) out.push_back(' ');
    out.append(sents[i]);
  }
  return out;
}

// Fewest, most even contiguous pieces whose lengths (sentences joined by one
// space) all lie within [lo, hi]. Returns cut points (piece end indices), or
// an empty vector when no partition exists.
std::vector<std::size_t> balanced_cuts(const std::vector<std::size_t>& lens, std::size_t lo, std::size_t hi) {
  const std::size_t m = lens.size();
  std::vector<std::size_t> prefix(m + 1, 0);
  for (std::size_t i = 0; i < m; ++i) prefix[i + 1] = prefix[i] + lens[i];
  auto piece_len = [&](std::size_t b, std::size_t e) { return prefix[e] - prefix[b] + (e - b - 1); };
  const std::size_t total = piece_len(0, m);
  const double inf = std::numeric_limits<double>::infinity();
  for (std::size_t k = (total + hi - 1) / hi; k <= m; ++k) {
    const double target = static_cast<double>(total - (k - 1)) / static_cast<double>(k);
    // cost[p][i]: best cost covering the first i sentences with p pieces.
    std::vector<std::vector<double>> cost(k + 1, std::vector<double>(m + 1, inf));
    std::vector<std::vector<std::size_t>> from(k + 1, std::vector<std::size_t>(m + 1, 0));
    cost[0][0] = 0.0;
    for (std::size_t p = 1; p <= k; ++p) {
      for (std::size_t i = p; i <= m; ++i) {
        for (std::size_t b = i; b-- > p - 1;) {
          if (cost[p - 1][b] == inf) continue;
          std::size_t len = piece_len(b, i);
          if (len > hi) break;
          if (len < lo) continue;
          double d = static_cast<double>(len) - target;
          double c = cost[p - 1][b] + d * d;
          if (c < cost[p][i]) {
            cost[p][i] = c;
            from[p][i] = b;
          }
        }
      }
    }
    if (cost[k][m] == inf) continue;
    std::vector<std::size_t> cuts(k);
    std::size_t i = m;
    for (std::size_t p = k; p >= 1; --p) {
      cuts[p - 1] = i;
      i = from[p][i];
    }
    return cuts;
  }
  return {};
}

}  // namespace

Book parse_book(std::string_view raw, const RawMetadata& meta, const MarkerConfig& markers) {
  if (raw.empty()) throw DataError("empty book");
  if (auto bad = find_invalid_utf8(raw); bad != std::string_view::npos) {
    throw DataError("undecodable input: invalid UTF-8 at byte " + std::to_string(bad));
  }
  if (meta.language.empty()) throw DataError("missing language tag");
  if (raw.substr(0, 3) == "\xEF\xBB\xBF") raw.remove_prefix(3);

  const std::regex start_re(markers.start_pattern);
  const std::regex end_re(markers.end_pattern);
  auto lines = split_lines(raw);
  std::size_t first = 0;
  std::size_t last = lines.size();
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (std::regex_match(lines[i].begin(), lines[i].end(), start_re)) {
      first = i + 1;
      break;
    }
  }
  for (std::size_t i = first; i < lines.size(); ++i) {
    if (std::regex_match(lines[i].begin(), lines[i].end(), end_re)) {
      last = i;
      break;
    }
  }

  std::string body;
  std::string block;
  auto flush = [&] {
    std::string norm = text::normalize_whitespace(block);
    if (!norm.empty()) {
      if (!body.empty()) body += "\n\n";
      body += norm;
    }
    block.clear();
  };
  for (std::size_t i = first; i < last; ++i) {
    if (is_blank(lines[i])) {
      flush();
    } else {
      block.append(lines[i]);
      block.push_back(' ');
    }
  }
  flush();
  if (body.empty()) throw DataError("empty book");

  Book book;
  book.metadata.author = meta.author;
  book.metadata.title = meta.title;
  book.metadata.language = meta.language;
  book.metadata.theme = meta.subjects;
  book.text = std::move(body);
  return book;
}

GenreMap::GenreMap(std::vector<std::string> genres, std::vector<std::pair<std::string, std::string>> entries)
    : genres_(std::move(genres)), entries_(std::move(entries)) {
  for (const auto& [tag, genre] : entries_) {
    if (std::find(genres_.begin(), genres_.end(), genre) == genres_.end()) {
      throw DataError("genre map: '" + genre + "' (for tag '" + tag + "') is not a canonical genre");
    }
  }
}

GenreMap GenreMap::from_json(const nlohmann::json& j) {
  std::vector<std::pair<std::string, std::string>> entries;
  for (const auto& e : j.at("map")) entries.emplace_back(e.at("tag").get<std::string>(), e.at("genre").get<std::string>());
  return GenreMap(j.at("genres").get<std::vector<std::string>>(), std::move(entries));
}

GenreMap GenreMap::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open genre map " + path.string());
  return from_json(nlohmann::json::parse(in));
}

std::optional<std::string> map_genre(const std::vector<std::string>& subject_tags, const GenreMap& mapping) {
  std::vector<std::vector<std::string>> keys;
  keys.reserve(subject_tags.size());
  for (const auto& tag : subject_tags) {
    std::vector<std::string> forms{text::to_lower(text::normalize_whitespace(tag))};
    std::string_view rest = tag;
    while (!rest.empty()) {
      auto pos = rest.find("--");
      auto part = rest.substr(0, pos);
      forms.push_back(text::to_lower(text::normalize_whitespace(part)));
      if (pos == std::string_view::npos) break;
      rest.remove_prefix(pos + 2);
    }
    keys.push_back(std::move(forms));
  }
  for (const auto& [tag, genre] : mapping.entries()) {
    const std::string want = text::to_lower(text::normalize_whitespace(tag));
    for (const auto& forms : keys) {
      if (std::find(forms.begin(), forms.end(), want) != forms.end()) return genre;
    }
  }
  return std::nullopt;
}

bool is_english(std::string_view language) {
  std::string l = text::to_lower(text::normalize_whitespace(language));
  return l == "en" || l == "eng" || l == "english" || l.rfind("en-", 0) == 0 || l.rfind("en_", 0) == 0;
}

std::vector<Book> filter_books(std::vector<Book> books) {
  std::vector<Book> kept;
  kept.reserve(books.size());
  for (auto& b : books) {
    if (is_english(b.metadata.language) && b.metadata.genre.has_value()) kept.push_back(std::move(b));
  }
  return kept;
}

Paragraph make_paragraph(std::size_t index, std::string text) {
  Paragraph p;
  p.index = index;
  p.char_count = text::utf8_length(text);
  p.size_class = classify_size(p.char_count);
  p.text = std::move(text);
  return p;
}

SplitResult split_paragraphs(std::string_view body, const SplitConfig& config) {
  if (config.min_chars == 0 || config.min_chars > config.max_chars) throw UsageError("split: need 0 < min <= max");
  SplitResult result;
  std::size_t dropped_fragments = 0;
  std::size_t complete = 0;

  std::vector<std::string_view> pending;
  std::vector<std::size_t> pending_lens;
  std::size_t pending_len = 0;  // joined length in characters

  auto emit_group = [&] {
    const std::size_t joined = pending_len;
    if (joined <= config.max_chars) {
      result.paragraphs.push_back(
          make_paragraph(result.paragraphs.size(), join_sentences(pending, 0, pending.size())));
      return;
    }
    auto cuts = balanced_cuts(pending_lens, config.min_chars, config.max_chars);
    if (cuts.empty()) {
      // No even partition: fall back to greedy packing.
      std::size_t b = 0;
      std::size_t len = 0;
      for (std::size_t i = 0; i < pending.size(); ++i) {
        std::size_t add = (i > b ? 1 : 0) + pending_lens[i];
        if (i > b && len + add > config.max_chars) {
          if (len >= config.min_chars) {
            cuts.push_back(i);
          } else {
            result.warnings.push_back("dropped short chunk of " + std::to_string(len) + " chars");
            b = i;
            len = pending_lens[i];
            continue;
          }
          b = i;
          len = pending_lens[i];
        } else {
          len += add;
        }
      }
      std::size_t prev = 0;
      for (std::size_t c : cuts) {
        if (prev != c) {
          auto t = join_sentences(pending, prev, c);
          auto n = text::utf8_length(t);
          if (n >= config.min_chars && n <= config.max_chars)
            result.paragraphs.push_back(make_paragraph(result.paragraphs.size(), std::move(t)));
        }
        prev = c;
      }
      if (prev < pending.size()) {
        auto t = join_sentences(pending, prev, pending.size());
        auto n = text::utf8_length(t);
        if (n >= config.min_chars && n <= config.max_chars)
          result.paragraphs.push_back(make_paragraph(result.paragraphs.size(), std::move(t)));
        else
          result.warnings.push_back("dropped chunk of " + std::to_string(n) + " chars");
      }
      return;
    }
    std::size_t prev = 0;
    for (std::size_t c : cuts) {
      result.paragraphs.push_back(make_paragraph(result.paragraphs.size(), join_sentences(pending, prev, c)));
      prev = c;
    }
  };

  std::size_t pos = 0;
  while (pos <= body.size()) {
    std::size_t e = body.find("\n\n", pos);
    if (e == std::string_view::npos) e = body.size();
    std::string_view block = body.substr(pos, e - pos);
    auto seg = text::segment_sentences(block, config.abbreviations);
    if (!text::normalize_whitespace(seg.trailing).empty()) ++dropped_fragments;
    for (auto s : seg.sentences) {
      ++complete;
      std::size_t n = text::utf8_length(s);
      if (n > config.max_chars) {
        result.warnings.push_back("discarded sentence of " + std::to_string(n) + " chars (over maximum)");
        continue;
      }
      pending_len += (pending.empty() ? 0 : 1) + n;
      pending.push_back(s);
      pending_lens.push_back(n);
    }
    if (!pending.empty() && pending_len >= config.min_chars) {
      emit_group();
      pending.clear();
      pending_lens.clear();
      pending_len = 0;
    }
    if (e == body.size()) break;
    pos = e + 2;
  }

  if (!pending.empty()) {
    std::string tail = join_sentences(pending, 0, pending.size());
    if (!result.paragraphs.empty()) {
      auto& last = result.paragraphs.back();
      std::size_t merged = last.char_count + 1 + pending_len;
      if (merged <= config.max_chars) {
        last = make_paragraph(last.index, last.text + " " + tail);
        tail.clear();
      }
    }
    if (!tail.empty()) result.warnings.push_back("dropped final chunk of " + std::to_string(pending_len) + " chars");
  }
  if (dropped_fragments > 0) {
    result.warnings.push_back("dropped " + std::to_string(dropped_fragments) + " unterminated fragment(s)");
  }
  if (complete == 0) result.warnings.push_back("no complete sentences");
  return result;
}

void to_json(nlohmann::json& j, const Paragraph& p) {
  j = nlohmann::json{{"index", p.index}, {"text", p.text}, {"size", p.char_count},
                     {"size_class", std::string(to_string(p.size_class))}};
  if (p.entities) j["entities"] = *p.entities;
  if (p.summaries) j["summaries"] = *p.summaries;
}

void from_json(const nlohmann::json& j, Paragraph& p) {
  p.index = j.at("index").get<std::size_t>();
  p.text = j.at("text").get<std::string>();
  p.char_count = j.at("size").get<std::size_t>();
  auto cls = parse_size_class(j.at("size_class").get<std::string>());
  if (!cls) throw DataError("bad size_class in paragraph " + std::to_string(p.index));
  p.size_class = *cls;
  p.entities.reset();
  p.summaries.reset();
  if (j.contains("entities")) p.entities = j["entities"].get<EntitySet>();
  if (j.contains("summaries")) p.summaries = j["summaries"].get<SummarySet>();
}

void to_json(nlohmann::json& j, const Book& b) {
  nlohmann::json meta{{"author", b.metadata.author},
                      {"title", b.metadata.title},
                      {"language", b.metadata.language},
                      {"theme", b.metadata.theme},
                      {"genre", b.metadata.genre ? nlohmann::json(*b.metadata.genre) : nlohmann::json(nullptr)}};
  j = nlohmann::json{{"metadata", std::move(meta)}, {"paragraphs", b.paragraphs}};
}

void from_json(const nlohmann::json& j, Book& b) {
  const auto& m = j.at("metadata");
  b.metadata.author = m.value("author", "");
  b.metadata.title = m.value("title", "");
  b.metadata.language = m.value("language", "");
  b.metadata.theme = m.value("theme", std::vector<std::string>{});
  b.metadata.genre.reset();
  if (m.contains("genre") && !m["genre"].is_null()) b.metadata.genre = m["genre"].get<std::string>();
  b.paragraphs = j.at("paragraphs").get<std::vector<Paragraph>>();
  b.text.clear();
}

std::vector<RawMetadata> load_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open metadata sidecar " + path.string());
  auto j = nlohmann::json::parse(in);
  std::vector<RawMetadata> out;
  for (const auto& r : j) {
    RawMetadata m;
    m.path = r.at("path").get<std::string>();
    m.author = r.value("author", "");
    m.title = r.value("title", "");
    m.language = r.value("language", "");
    m.subjects = r.value("subjects", std::vector<std::string>{});
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace parafill::corpus
