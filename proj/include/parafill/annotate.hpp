#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "parafill/corpus.hpp"
#include "parafill/types.hpp"

namespace parafill::annotate {

/// Known names per category. Multi-word names are matched as word sequences.
struct Gazetteer {
  std::vector<std::string> persons;
  std::vector<std::string> locations;
  std::vector<std::string> organisations;
  std::vector<std::string> misc;

  static Gazetteer from_json(const nlohmann::json& j);
  static Gazetteer load(const std::filesystem::path& path);
};

struct NerConfig {
  std::vector<std::string> honorifics = {"Mr", "Mrs", "Ms", "Dr", "Miss", "Sir", "Lady", "Captain", "Capt"};
};

/// Rule-based NER. Candidates are gazetteer matches and runs of capitalized
/// words that do not open a sentence. The gazetteer decides the category;
/// other candidates are persons after an honorific and misc otherwise.
EntitySet extract_entities(std::string_view text, const Gazetteer& gazetteer, const NerConfig& config = {});

/// Undirected co-occurrence graph over candidate words.
struct WordGraph {
  std::vector<std::string> nodes;  // in order of first appearance
  /// weights[i][j]: co-occurrence count; self-loops allowed; symmetric.
  std::vector<std::vector<double>> weights;
};

struct TextRankConfig {
  double damping = 0.85;
  double tolerance = 1e-6;
  int max_iterations = 100;
  std::size_t window = 2;
};

/// True for words kept as graph nodes (nouns/adjectives by a stop-list plus
/// suffix heuristic). Expects a lowercase word.
bool is_candidate(std::string_view word);

/// Lowercase candidate words per sentence, in text order.
std::vector<std::vector<std::string>> candidate_stream(std::string_view text);

WordGraph build_word_graph(std::string_view text, const TextRankConfig& config = {});

/// Damped centrality by power iteration; dangling nodes spread their mass
/// uniformly. Scores are non-negative and sum to 1.
std::vector<double> textrank_scores(const WordGraph& graph, const TextRankConfig& config = {});

struct Keyword {
  std::string text;
  double score = 0.0;
};

/// Up to `n` keywords, best first. Top-scoring words adjacent in the text
/// are merged into phrases scored by their best member.
std::vector<Keyword> textrank_keywords_scored(std::string_view text, std::size_t n, const TextRankConfig& config = {});
std::vector<std::string> textrank_keywords(std::string_view text, std::size_t n, const TextRankConfig& config = {});

/// Sentence with the highest sum of word scores; earliest wins ties.
std::string extract_key_sentence(std::string_view text, const TextRankConfig& config = {});

struct AnnotateConfig {
  std::size_t n_keywords = 10;
  NerConfig ner;
  TextRankConfig textrank;
};

void annotate_paragraph(corpus::Paragraph& p, const Gazetteer& gazetteer, const AnnotateConfig& config = {});
void annotate_book(corpus::Book& book, const Gazetteer& gazetteer, const AnnotateConfig& config = {});

}  // namespace parafill::annotate
