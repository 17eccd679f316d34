#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "parafill/text.hpp"
#include "parafill/types.hpp"

namespace parafill::corpus {

/// One record of the metadata sidecar that accompanies the raw text files.
struct RawMetadata {
  std::string path;
  std::string author;
  std::string title;
  std::string language;
  std::vector<std::string> subjects;
};

struct BookMetadata {
  std::string author;
  std::string title;
  std::string language;
  std::vector<std::string> theme;
  std::optional<std::string> genre;
};

struct Paragraph {
  std::size_t index = 0;
  std::string text;
  std::size_t char_count = 0;
  SizeClass size_class = SizeClass::S;
  std::optional<EntitySet> entities;
  std::optional<SummarySet> summaries;
};

struct Book {
  BookMetadata metadata;
  /// Cleaned body: logical paragraphs separated by a blank line.
  std::string text;
  std::vector<Paragraph> paragraphs;
};

/// Line patterns (ECMAScript regex, matched against single lines) delimiting
/// the body of a book. Defaults follow the Project Gutenberg banners.
struct MarkerConfig {
  std::string start_pattern = R"(^\s*\*{3}\s*START OF (THE|THIS) PROJECT GUTENBERG.*$)";
  std::string end_pattern = R"(^\s*(\*{3}\s*END OF (THE|THIS) PROJECT GUTENBERG|End of (the )?Project Gutenberg).*$)";
};

/// Strips boilerplate outside the start/end markers and unwraps hard-wrapped
/// lines into logical paragraphs. The returned book has no paragraphs and no
/// genre yet.
///
/// Throws DataError for invalid UTF-8, a missing language tag, or an empty
/// body ("empty book").
Book parse_book(std::string_view raw, const RawMetadata& meta, const MarkerConfig& markers = {});

/// Ordered tag -> genre table. The first entry whose tag matches one of the
/// subject tags wins.
class GenreMap {
 public:
  GenreMap() = default;
  GenreMap(std::vector<std::string> genres, std::vector<std::pair<std::string, std::string>> entries);

  static GenreMap from_json(const nlohmann::json& j);
  static GenreMap load(const std::filesystem::path& path);

  const std::vector<std::string>& genres() const { return genres_; }
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

 private:
  std::vector<std::string> genres_;
  std::vector<std::pair<std::string, std::string>> entries_;
};

/// A tag matches a table entry case-insensitively, either as a whole or by
/// one of its " -- " separated components ("Whaling -- Fiction").
std::optional<std::string> map_genre(const std::vector<std::string>& subject_tags, const GenreMap& mapping);

bool is_english(std::string_view language);

/// Keeps English books that have a genre.
std::vector<Book> filter_books(std::vector<Book> books);

struct SplitConfig {
  std::size_t min_chars = kMinParagraphChars;
  std::size_t max_chars = kMaxParagraphChars;
  std::vector<std::string> abbreviations = text::default_abbreviations();
};

struct SplitResult {
  std::vector<Paragraph> paragraphs;
  std::vector<std::string> warnings;
};

/// Splits a cleaned body into sentence-aligned paragraphs within
/// [min_chars, max_chars] characters.
///
/// Source paragraphs shorter than `min_chars` are merged forward into the
/// following ones; groups longer than `max_chars` are cut at sentence
/// boundaries into the fewest, most even pieces that fit. Sentences longer
/// than `max_chars` and unterminated fragments (headings) are dropped.
SplitResult split_paragraphs(std::string_view text, const SplitConfig& config = {});

Paragraph make_paragraph(std::size_t index, std::string text);

void to_json(nlohmann::json& j, const Paragraph& p);
void from_json(const nlohmann::json& j, Paragraph& p);
void to_json(nlohmann::json& j, const Book& b);
void from_json(const nlohmann::json& j, Book& b);

std::vector<RawMetadata> load_sidecar(const std::filesystem::path& path);

}  // namespace parafill::corpus

namespace parafill {
void to_json(nlohmann::json& j, const EntitySet& e);
void from_json(const nlohmann::json& j, EntitySet& e);
void to_json(nlohmann::json& j, const SummarySet& s);
void from_json(const nlohmann::json& j, SummarySet& s);
}  // namespace parafill
