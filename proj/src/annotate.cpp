#include "parafill/annotate.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "parafill/text.hpp"

namespace parafill::annotate {

namespace {

const std::unordered_set<std::string>& stop_words() {
  static const std::unordered_set<std::string> words = {
      "a", "about", "above", "across", "after", "afterwards", "again", "against", "ago", "all", "almost", "alone",
      "along", "already", "also", "although", "always", "am", "among", "amongst", "an", "and", "another", "any",
      "anybody", "anyhow", "anyone", "anything", "anyway", "anywhere", "are", "around", "as", "at", "away", "back",
      "be", "became", "because", "become", "becomes", "been", "before", "beforehand", "behind", "being", "below",
      "beside", "besides", "between", "beyond", "both", "but", "by", "can", "cannot", "could", "did", "do", "does",
      "doing", "done", "down", "during", "each", "either", "else", "elsewhere", "enough", "even", "ever", "every",
      "everybody", "everyone", "everything", "everywhere", "except", "far", "few", "for", "former", "formerly",
      "from", "further", "get", "gets", "getting", "give", "given", "gives", "go", "goes", "going", "gone", "got",
      "had", "has", "have", "having", "he", "hence", "her", "here", "hereafter", "hereby", "herein", "hers",
      "herself", "him", "himself", "his", "how", "however", "i", "if", "in", "indeed", "into", "is", "it", "its",
      "itself", "just", "keep", "kept", "know", "knew", "known", "last", "latter", "least", "less", "let", "like",
      "made", "make", "makes", "many", "may", "me", "meanwhile", "might", "mine", "more", "moreover", "most",
      "mostly", "much", "must", "my", "myself", "near", "nearly", "neither", "never", "nevertheless", "next", "no",
      "nobody", "none", "nor", "not", "nothing", "now", "nowhere", "of", "off", "often", "oh", "on", "once", "one",
      "only", "onto", "or", "other", "others", "otherwise", "our", "ours", "ourselves", "out", "over", "own",
      "perhaps", "quite", "rather", "really", "said", "same", "say", "says", "see", "seem", "seemed", "seeming",
      "seems", "seen", "several", "shall", "she", "should", "since", "so", "some", "somebody", "somehow", "someone",
      "something", "sometime", "sometimes", "somewhat", "somewhere", "still", "such", "take", "taken", "than",
      "that", "the", "thee", "their", "theirs", "them", "themselves", "then", "thence", "there", "thereafter",
      "thereby", "therefore", "therein", "thereupon", "these", "they", "thing", "things", "this", "those", "thou",
      "though", "through", "throughout", "thus", "thy", "till", "to", "together", "too", "toward", "towards",
      "two", "under", "unless", "until", "up", "upon", "us", "very", "via", "was", "way", "we", "well", "went",
      "were", "what", "whatever", "when", "whence", "whenever", "where", "whereas", "whereby", "wherein",
      "whereupon", "wherever", "whether", "which", "while", "whither", "who", "whoever", "whole", "whom", "whose",
      "why", "will", "with", "within", "without", "would", "ye", "yes", "yet", "you", "your", "yours", "yourself",
      "yourselves", "came", "come", "comes", "went", "says", "told", "tell", "think", "thought", "took", "put",
      "asked", "saw", "look", "looked", "looking", "began", "found", "find", "seemed", "felt", "want", "wanted",
      "shan't", "won't", "don't", "can't", "isn't", "wasn't", "didn't", "mr", "mrs", "miss", "sir", "upon", "unto",
      "hath", "doth", "art", "wilt", "shalt", "first", "second", "three", "four", "five", "six", "seven", "eight",
      "nine", "ten", "hundred", "thousand", "great", "little", "good", "new", "old", "long", "right", "left",
      "time", "times", "bit", "lot", "kind", "sort", "certain", "certainly", "said", "replied", "answered", "cried"};
  return words;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

const std::unordered_set<std::string>& suffix_exceptions() {
  static const std::unordered_set<std::string> words = {
      // -ly nouns/adjectives
      "family", "fly", "lily", "july", "belly", "jelly", "holly", "folly", "ally", "reply", "supply", "bully",
      "ugly", "holy", "lonely", "lovely", "jolly", "melancholy", "italy", "sly", "early", "daily", "silly",
      // -ing nouns
      "thing", "king", "ring", "wing", "spring", "string", "evening", "morning", "ceiling", "building", "feeling",
      "meaning", "beginning", "darling", "nothing", "pudding", "shilling", "farthing", "stocking", "wedding",
      "lightning", "sling", "clothing", "painting", "blessing", "ending", "dwelling", "lodging", "being",
      "offering", "ceiling", "sing", "bring", "sting", "swing",
      // -ed nouns/adjectives
      "bed", "red", "seed", "need", "speed", "hundred", "shed", "sled", "deed", "weed", "creed", "breed", "sacred",
      "naked", "wicked", "kindred", "sled", "steed", "reed", "wretched", "rugged", "ragged", "crooked", "learned",
      "beloved", "blessed", "aged"};
  return words;
}

bool is_alpha_word(std::string_view w) {
  for (unsigned char c : w) {
    if (c < 0x80 && !std::isalpha(c) && c != '-') return false;
  }
  return true;
}

// Strips a trailing possessive ('s or ’s). Returns true when stripped.
bool strip_possessive(std::string& w) {
  if (ends_with(w, "'s")) {
    w.resize(w.size() - 2);
    return true;
  }
  if (ends_with(w, "\xE2\x80\x99s")) {
    w.resize(w.size() - 4);
    return true;
  }
  return false;
}

struct Occurrence {
  std::string word;  // lowercase, possessive stripped
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t token = 0;  // index in the paragraph's token list
  bool possessive = false;
};

struct SentenceCandidates {
  std::string_view sentence;
  std::vector<Occurrence> words;
};

std::vector<std::string_view> sentences_with_trailing(std::string_view text) {
  auto seg = text::segment_sentences(text);
  std::vector<std::string_view> out(seg.sentences.begin(), seg.sentences.end());
  if (!text::normalize_whitespace(seg.trailing).empty()) out.push_back(seg.trailing);
  return out;
}

std::vector<SentenceCandidates> analyse(std::string_view text) {
  std::vector<SentenceCandidates> out;
  std::size_t token_base = 0;
  for (auto sent : sentences_with_trailing(text)) {
    SentenceCandidates sc;
    sc.sentence = sent;
    const std::size_t offset = static_cast<std::size_t>(sent.data() - text.data());
    auto tokens = text::word_tokens(sent);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      std::string w = text::to_lower(tokens[i].text);
      bool poss = strip_possessive(w);
      if (!is_candidate(w)) continue;
      sc.words.push_back({std::move(w), offset + tokens[i].begin, offset + tokens[i].end, token_base + i, poss});
    }
    token_base += tokens.size();
    out.push_back(std::move(sc));
  }
  return out;
}

WordGraph graph_from(const std::vector<SentenceCandidates>& sents, std::size_t window) {
  WordGraph g;
  std::unordered_map<std::string, std::size_t> ids;
  for (const auto& s : sents) {
    for (const auto& o : s.words) {
      if (ids.emplace(o.word, g.nodes.size()).second) g.nodes.push_back(o.word);
    }
  }
  g.weights.assign(g.nodes.size(), std::vector<double>(g.nodes.size(), 0.0));
  for (const auto& s : sents) {
    for (std::size_t i = 0; i < s.words.size(); ++i) {
      for (std::size_t k = 1; k < window && i + k < s.words.size(); ++k) {
        std::size_t a = ids[s.words[i].word];
        std::size_t b = ids[s.words[i + k].word];
        g.weights[a][b] += 1.0;
        if (a != b) g.weights[b][a] += 1.0;
      }
    }
  }
  return g;
}

struct NameMatcher {
  struct Entry {
    std::vector<std::string> words;  // lowercase
    int category = 0;
  };
  std::vector<Entry> entries;

  explicit NameMatcher(const Gazetteer& g) {
    const std::vector<std::string>* cats[] = {&g.persons, &g.locations, &g.organisations, &g.misc};
    for (int c = 0; c < 4; ++c) {
      for (const auto& name : *cats[c]) {
        Entry e;
        for (const auto& t : text::word_tokens(name)) e.words.push_back(text::to_lower(t.text));
        if (!e.words.empty()) {
          e.category = c;
          entries.push_back(std::move(e));
        }
      }
    }
    // Longest names first so "New Bedford" wins over "New".
    std::stable_sort(entries.begin(), entries.end(),
                     [](const Entry& a, const Entry& b) { return a.words.size() > b.words.size(); });
  }
};

const std::unordered_set<std::string>& ner_stop_words() {
  static const std::unordered_set<std::string> words = {
      "I", "I'm", "I'll", "I've", "I'd", "I’m", "I’ll", "I’ve", "I’d", "O", "Oh", "Ah", "Aye", "Yes", "No", "Well",
      "The", "A", "An", "And", "But", "Or", "If", "So", "Then", "Now", "What", "Why", "How", "Who", "When", "Where",
      "It", "He", "She", "We", "They", "You", "This", "That", "There", "Here", "My", "Your", "His", "Her", "Our",
      "Their", "Its", "Chapter", "CHAPTER", "Thou", "Thee", "Thy", "Ye", "Yet", "Nay", "Alas", "Come", "Let"};
  return words;
}

bool is_capitalized(std::string_view w) {
  return !w.empty() && std::isupper(static_cast<unsigned char>(w.front())) != 0;
}

bool gap_is_space(std::string_view text, std::size_t a_end, std::size_t b_begin) {
  return b_begin == a_end + 1 && text[a_end] == ' ';
}

// True when the gap before `begin` (back to the previous token or the start
// of the sentence) contains an opening quote or a colon, i.e. the word opens
// quoted speech.
bool opens_speech(std::string_view text, std::size_t prev_end, std::size_t begin) {
  std::string_view gap = text.substr(prev_end, begin - prev_end);
  return gap.find('"') != std::string_view::npos || gap.find('`') != std::string_view::npos ||
         gap.find("\xE2\x80\x9C") != std::string_view::npos || gap.find("\xE2\x80\x98") != std::string_view::npos ||
         gap.find(':') != std::string_view::npos || gap.find('(') != std::string_view::npos ||
         gap.find("\xE2\x80\x94") != std::string_view::npos;
}

std::string strip_possessive_surface(std::string_view s) {
  std::string out(s);
  strip_possessive(out);
  return out;
}

}  // namespace

Gazetteer Gazetteer::from_json(const nlohmann::json& j) {
  Gazetteer g;
  g.persons = j.value("persons", std::vector<std::string>{});
  g.locations = j.value("locations", std::vector<std::string>{});
  g.organisations = j.value("organisations", std::vector<std::string>{});
  g.misc = j.value("misc", std::vector<std::string>{});
  return g;
}

Gazetteer Gazetteer::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open gazetteer " + path.string());
  return from_json(nlohmann::json::parse(in));
}

EntitySet extract_entities(std::string_view text, const Gazetteer& gazetteer, const NerConfig& config) {
  EntitySet result;
  std::vector<std::string>* cats[] = {&result.persons, &result.locations, &result.organisations, &result.misc};
  std::unordered_set<std::string> seen;
  auto add = [&](int category, std::string name) {
    if (name.empty()) return;
    if (seen.insert(text::to_lower(name)).second) cats[category]->push_back(std::move(name));
  };
  auto is_honorific = [&](std::string_view w) {
    return std::find(config.honorifics.begin(), config.honorifics.end(), w) != config.honorifics.end();
  };

  // Tokens with a flag for sentence-initial position.
  struct Tok {
    text::WordToken t;
    bool initial = false;
  };
  std::vector<Tok> toks;
  for (auto sent : sentences_with_trailing(text)) {
    const std::size_t offset = static_cast<std::size_t>(sent.data() - text.data());
    bool first = true;
    for (auto t : text::word_tokens(sent)) {
      t.begin += offset;
      t.end += offset;
      std::size_t prev_end = toks.empty() || first ? offset : toks.back().t.end;
      bool initial = first || opens_speech(text, prev_end, t.begin);
      toks.push_back({t, initial});
      first = false;
    }
  }

  const NameMatcher matcher(gazetteer);
  std::vector<bool> used(toks.size(), false);
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (!is_capitalized(toks[i].t.text)) continue;
    for (const auto& e : matcher.entries) {
      if (i + e.words.size() > toks.size()) continue;
      bool ok = true;
      for (std::size_t k = 0; k < e.words.size() && ok; ++k) {
        std::string w = text::to_lower(toks[i + k].t.text);
        if (k + 1 == e.words.size()) strip_possessive(w);
        ok = w == e.words[k] && (k == 0 || gap_is_space(text, toks[i + k - 1].t.end, toks[i + k].t.begin));
      }
      if (!ok) continue;
      std::size_t last = i + e.words.size() - 1;
      add(e.category, strip_possessive_surface(text.substr(toks[i].t.begin, toks[last].t.end - toks[i].t.begin)));
      for (std::size_t k = i; k <= last; ++k) used[k] = true;
      i = last;
      break;
    }
  }

  const auto& stops = ner_stop_words();
  std::size_t i = 0;
  while (i < toks.size()) {
    if (used[i] || !is_capitalized(toks[i].t.text)) {
      ++i;
      continue;
    }
    std::size_t j = i + 1;
    while (j < toks.size() && !used[j] && is_capitalized(toks[j].t.text) &&
           gap_is_space(text, toks[j - 1].t.end, toks[j].t.begin) && !toks[j].initial) {
      ++j;
    }
    std::size_t b = i;
    std::size_t e = j;  // run is [b, e)
    bool honorific = false;
    if (is_honorific(toks[b].t.text)) {
      honorific = true;
      ++b;
    } else if (b > 0 && is_honorific(toks[b - 1].t.text) && !toks[b].initial) {
      // "Mr. Holmes": the period separates the honorific from the name.
      std::string_view gap = text.substr(toks[b - 1].t.end, toks[b].t.begin - toks[b - 1].t.end);
      honorific = gap == ". " || gap == " ";
    } else if (toks[b].initial) {
      ++b;
    }
    while (b < e && stops.count(std::string(toks[b].t.text))) ++b;
    while (e > b && stops.count(std::string(toks[e - 1].t.text))) --e;
    if (b < e) {
      std::string name = strip_possessive_surface(text.substr(toks[b].t.begin, toks[e - 1].t.end - toks[b].t.begin));
      add(honorific ? 0 : 3, std::move(name));
    }
    i = j;
  }
  return result;
}

bool is_candidate(std::string_view word) {
  if (word.size() < 3 || !is_alpha_word(word)) return false;
  std::string w(word);
  if (stop_words().count(w)) return false;
  if (suffix_exceptions().count(w)) return true;
  if (ends_with(w, "ly") || ends_with(w, "ing") || ends_with(w, "ed")) return false;
  return true;
}

std::vector<std::vector<std::string>> candidate_stream(std::string_view text) {
  std::vector<std::vector<std::string>> out;
  for (auto& s : analyse(text)) {
    std::vector<std::string> words;
    for (auto& o : s.words) words.push_back(std::move(o.word));
    out.push_back(std::move(words));
  }
  return out;
}

WordGraph build_word_graph(std::string_view text, const TextRankConfig& config) {
  return graph_from(analyse(text), config.window);
}

std::vector<double> textrank_scores(const WordGraph& graph, const TextRankConfig& config) {
  const std::size_t n = graph.nodes.size();
  if (n == 0) return {};
  std::vector<double> out_weight(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    out_weight[j] = std::accumulate(graph.weights[j].begin(), graph.weights[j].end(), 0.0);
  }
  const double d = config.damping;
  const double nn = static_cast<double>(n);
  std::vector<double> s(n, 1.0 / nn);
  std::vector<double> next(n);
  for (int it = 0; it < config.max_iterations; ++it) {
    double dangling = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (out_weight[j] == 0.0) dangling += s[j];
    }
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        double w = graph.weights[j][i];
        if (w != 0.0) acc += w / out_weight[j] * s[j];
      }
      next[i] = (1.0 - d) / nn + d * (acc + dangling / nn);
    }
    double delta = 0.0;
    for (std::size_t i = 0; i < n; ++i) delta += std::abs(next[i] - s[i]);
    s.swap(next);
    if (delta < config.tolerance) break;
  }
  const double total = std::accumulate(s.begin(), s.end(), 0.0);
  for (auto& v : s) v /= total;
  return s;
}

std::vector<Keyword> textrank_keywords_scored(std::string_view text, std::size_t n, const TextRankConfig& config) {
  if (n == 0) return {};
  auto sents = analyse(text);
  WordGraph g = graph_from(sents, config.window);
  auto scores = textrank_scores(g, config);
  if (scores.empty()) return {};

  std::vector<std::size_t> order(g.nodes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::unordered_map<std::string, double> top;
  for (std::size_t k = 0; k < std::min(n, order.size()); ++k) top[g.nodes[order[k]]] = scores[order[k]];

  std::vector<Keyword> units;
  std::unordered_set<std::string> seen;
  auto emit = [&](std::string phrase, double score) {
    if (seen.insert(phrase).second) units.push_back({std::move(phrase), score});
  };
  for (const auto& s : sents) {
    std::size_t i = 0;
    while (i < s.words.size()) {
      if (!top.count(s.words[i].word)) {
        ++i;
        continue;
      }
      std::size_t j = i + 1;
      // A repeated word ("storm storm") is emphasis, not a phrase.
      while (j < s.words.size() && top.count(s.words[j].word) && s.words[j].word != s.words[j - 1].word &&
             !s.words[j - 1].possessive &&
             s.words[j].token == s.words[j - 1].token + 1 &&
             gap_is_space(text, s.words[j - 1].end, s.words[j].begin)) {
        ++j;
      }
      std::string phrase;
      double best = 0.0;
      for (std::size_t k = i; k < j; ++k) {
        if (k > i) phrase.push_back(' ');
        phrase += s.words[k].word;
        best = std::max(best, top.at(s.words[k].word));
      }
      emit(std::move(phrase), best);
      i = j;
    }
  }
  std::stable_sort(units.begin(), units.end(), [](const Keyword& a, const Keyword& b) { return a.score > b.score; });
  if (units.size() > n) units.resize(n);
  return units;
}

std::vector<std::string> textrank_keywords(std::string_view text, std::size_t n, const TextRankConfig& config) {
  std::vector<std::string> out;
  for (auto& k : textrank_keywords_scored(text, n, config)) out.push_back(std::move(k.text));
  return out;
}

std::string extract_key_sentence(std::string_view text, const TextRankConfig& config) {
  auto sents = analyse(text);
  if (sents.empty()) return {};
  WordGraph g = graph_from(sents, config.window);
  auto scores = textrank_scores(g, config);
  std::unordered_map<std::string, double> by_word;
  for (std::size_t i = 0; i < g.nodes.size(); ++i) by_word[g.nodes[i]] = scores[i];
  std::size_t best = 0;
  double best_score = -1.0;
  for (std::size_t i = 0; i < sents.size(); ++i) {
    double total = 0.0;
    for (const auto& o : sents[i].words) total += by_word[o.word];
    if (total > best_score) {
      best_score = total;
      best = i;
    }
  }
  return text::normalize_whitespace(sents[best].sentence);
}

void annotate_paragraph(corpus::Paragraph& p, const Gazetteer& gazetteer, const AnnotateConfig& config) {
  p.entities = extract_entities(p.text, gazetteer, config.ner);
  SummarySet s;
  s.kw = textrank_keywords(p.text, config.n_keywords, config.textrank);
  s.key_sentence = extract_key_sentence(p.text, config.textrank);
  p.summaries = std::move(s);
}

void annotate_book(corpus::Book& book, const Gazetteer& gazetteer, const AnnotateConfig& config) {
  for (auto& p : book.paragraphs) annotate_paragraph(p, gazetteer, config);
}

}  // namespace parafill::annotate
