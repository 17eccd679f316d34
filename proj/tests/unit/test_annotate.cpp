#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "parafill/annotate.hpp"
#include "parafill/hash.hpp"

using namespace parafill;
using namespace parafill::annotate;

namespace {

Gazetteer small_gazetteer() {
  Gazetteer g;
  g.persons = {"Ahab", "Red Shirt"};
  g.locations = {"New Bedford", "Nantucket"};
  g.organisations = {"East India Company"};
  g.misc = {"Christmas"};
  return g;
}

bool has(const std::vector<std::string>& v, const std::string& x) { return std::find(v.begin(), v.end(), x) != v.end(); }

const char* kWhale =
    "The whale swam past the old ship. The sailors watched the whale from the deck of the ship. "
    "A great storm rose over the grey sea, and the ship turned toward the harbour. "
    "Later the whale returned, and the captain cursed the whale and the sea.";

}  // namespace

TEST_CASE("gazetteer names take their listed category") {
  auto e = extract_entities("Then Ahab sailed from New Bedford with the East India Company before Christmas.", small_gazetteer());
  CHECK(e.persons == std::vector<std::string>{"Ahab"});
  CHECK(e.locations == std::vector<std::string>{"New Bedford"});
  CHECK(e.organisations == std::vector<std::string>{"East India Company"});
  CHECK(e.misc == std::vector<std::string>{"Christmas"});
}

TEST_CASE("honorifics mark persons and sentence-initial words are not names") {
  auto e = extract_entities("Yesterday we met Mr Hosmer near the quay. Quietly he left for Boston.", small_gazetteer());
  CHECK(has(e.persons, "Hosmer"));
  CHECK(!has(e.persons, "Yesterday"));
  CHECK(!has(e.misc, "Yesterday"));
  CHECK(!has(e.misc, "Quietly"));
  CHECK(has(e.misc, "Boston"));
}

TEST_CASE("gazetteer matches ignore case of the surrounding text but need whole words") {
  auto e = extract_entities("She spoke of Nantucketers, not of the island.", small_gazetteer());
  CHECK(e.locations.empty());
}

TEST_CASE("entities are unique and empty text yields nothing") {
  auto e = extract_entities("Ahab, Ahab! We followed Ahab.", small_gazetteer());
  CHECK(e.persons == std::vector<std::string>{"Ahab"});
  auto none = extract_entities("", small_gazetteer());
  CHECK(none.persons.empty());
  CHECK(none.misc.empty());
}

TEST_CASE("candidate filter drops stop words and verbs by suffix") {
  CHECK(is_candidate("whale"));
  CHECK(is_candidate("stormy"));
  CHECK(!is_candidate("the"));
  CHECK(!is_candidate("and"));
  CHECK(!is_candidate("walked"));
}

TEST_CASE("word graph is symmetric and windowed") {
  auto g = build_word_graph(kWhale);
  REQUIRE(!g.nodes.empty());
  CHECK(g.nodes.front() == "whale");
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    for (std::size_t j = 0; j < g.nodes.size(); ++j) CHECK(g.weights[i][j] == g.weights[j][i]);
  }
  CHECK(std::unique(g.nodes.begin(), g.nodes.end()) == g.nodes.end());
}

TEST_CASE("textrank scores match the linear-system solution") {
  TextRankConfig tight;
  tight.tolerance = 1e-14;
  tight.max_iterations = 10000;
  auto g = build_word_graph(kWhale);
  auto s = textrank_scores(g, tight);
  auto expected = oracle::pagerank_solve(g.weights, tight.damping);
  CHECK(oracle::max_abs_diff(s, expected) < 1e-10);

  // random weighted graphs with isolated nodes
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    WordGraph r;
    const std::size_t n = 2 + rng() % 12;
    r.nodes.resize(n);
    r.weights.assign(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i; j < n; ++j) {
        if (rng() % 3 == 0) r.weights[i][j] = r.weights[j][i] = static_cast<double>(1 + rng() % 4);
      }
    }
    auto got = textrank_scores(r, tight);
    CHECK(oracle::max_abs_diff(got, oracle::pagerank_solve(r.weights, tight.damping)) < 1e-9);
    CHECK(std::accumulate(got.begin(), got.end(), 0.0) == doctest::Approx(1.0));
    for (double x : got) CHECK(x >= 0.0);
  }
  CHECK(textrank_scores(WordGraph{}).empty());
}

TEST_CASE("keywords rank the most connected words first") {
  auto kw = textrank_keywords(kWhale, 3);
  REQUIRE(!kw.empty());
  CHECK(kw.size() <= 3);
  CHECK(kw.front().find("whale") != std::string::npos);
  CHECK(textrank_keywords(kWhale, 0).empty());
  auto scored = textrank_keywords_scored(kWhale, 10);
  for (std::size_t i = 1; i < scored.size(); ++i) CHECK(scored[i - 1].score >= scored[i].score);
}

TEST_CASE("key sentence is one of the sentences") {
  const std::string ks = extract_key_sentence(kWhale);
  CHECK(std::string(kWhale).find(ks) != std::string::npos);
  CHECK(ks.find("whale") != std::string::npos);
  CHECK(extract_key_sentence("").empty());
}

TEST_CASE("annotate fills entities and summaries") {
  corpus::Paragraph p = corpus::make_paragraph(0, std::string(kWhale) + " " + kWhale + " Ahab stood alone.");
  annotate_paragraph(p, small_gazetteer());
  REQUIRE(p.entities);
  REQUIRE(p.summaries);
  CHECK(has(p.entities->persons, "Ahab"));
  CHECK(!p.summaries->kw.empty());
  CHECK(p.summaries->kw.size() <= 10);
  CHECK(!p.summaries->key_sentence.empty());
}

TEST_CASE("bundled gazetteer loads") {
  auto g = Gazetteer::load(std::filesystem::path(PARAFILL_DATA) / "gazetteer.json");
  CHECK(has(g.persons, "Ahab"));
  CHECK(has(g.locations, "Nantucket"));
}

TEST_CASE("rule examples") {
  Gazetteer g;
  g.locations = {"London"};
  auto e = extract_entities("He saw Alice near London.", g);
  CHECK(e.persons.empty());
  CHECK(e.locations == std::vector<std::string>{"London"});
  CHECK(e.misc == std::vector<std::string>{"Alice"});
  auto h = extract_entities("Mr. Holmes arrived.", Gazetteer{});
  CHECK(h.persons == std::vector<std::string>{"Holmes"});
  auto none = extract_entities("the cat sat.", Gazetteer{});
  CHECK(none.all().empty());
}

TEST_CASE("dominant and symmetric graphs") {
  CHECK(textrank_keywords("storm storm storm calm", 1) == std::vector<std::string>{"storm"});
  WordGraph two{{"a", "b"}, {{0.0, 1.0}, {1.0, 0.0}}};
  auto s = textrank_scores(two);
  CHECK(s[0] == doctest::Approx(0.5));
  CHECK(s[1] == doctest::Approx(0.5));
}

TEST_CASE("six-sentence paragraph matches the dense solver") {
  const char* text =
      "The old harbour lay quiet under a grey sky. Fishing boats rested against the harbour wall. "
      "An old sailor mended a torn net on the quay. The grey gulls circled the boats and the net. "
      "Children ran along the wall toward the sailor. Evening fog rolled over the quiet harbour.";
  auto g = build_word_graph(text);
  TextRankConfig tight;
  tight.tolerance = 1e-14;
  tight.max_iterations = 10000;
  CHECK(oracle::max_abs_diff(textrank_scores(g, tight), oracle::pagerank_solve(g.weights, 0.85)) < 1e-10);
  // default stopping rule still lands within its L1 tolerance
  CHECK(oracle::max_abs_diff(textrank_scores(g), oracle::pagerank_solve(g.weights, 0.85)) < 1e-5);
  auto kw = textrank_keywords_scored(text, 3);
  CHECK(kw.size() == 3);
  auto scores = oracle::pagerank_solve(g.weights, 0.85);
  const auto top = std::max_element(scores.begin(), scores.end()) - scores.begin();
  CHECK(kw[0].text.find(g.nodes[static_cast<std::size_t>(top)]) != std::string::npos);
}

TEST_CASE("key sentence cases") {
  CHECK(extract_key_sentence("Only one sentence here.") == "Only one sentence here.");
  const char* text =
      "It rained. The captain, the whale and the harpoon met on the deck of the whaling ship. "
      "Then night fell. The whale swam. The captain slept. A harpoon broke.";
  CHECK(extract_key_sentence(text) == "The captain, the whale and the harpoon met on the deck of the whaling ship.");
  CHECK(extract_key_sentence("It was. And then it is. So it was.") == "It was.");
}

TEST_CASE("annotation golden file") {
  const std::filesystem::path dir = std::filesystem::path(PARAFILL_FIXTURES) / "golden";
  auto in = nlohmann::json::parse(read_file(dir / "annotate_in.json"));
  auto p = in.get<corpus::Paragraph>();
  annotate_paragraph(p, small_gazetteer());
  CHECK(nlohmann::json(p) == nlohmann::json::parse(read_file(dir / "annotate_out.json")));
}

TEST_CASE("annotation with nothing found keeps empty fields and is idempotent") {
  std::string text;
  for (int i = 0; i < 60; ++i) text += "It was so. ";
  text.pop_back();
  corpus::Paragraph p = corpus::make_paragraph(0, text);
  annotate_paragraph(p, Gazetteer{});
  nlohmann::json j = p;
  CHECK(j["entities"]["persons"].empty());
  CHECK(j["summaries"]["kw"].empty());
  CHECK(j["entities"].contains("misc"));
  corpus::Paragraph q = corpus::make_paragraph(0, std::string(kWhale) + " " + kWhale + " Ahab stood alone.");
  annotate_paragraph(q, small_gazetteer());
  nlohmann::json once = q;
  annotate_paragraph(q, small_gazetteer());
  CHECK(nlohmann::json(q) == once);
}
