#include "parafill/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include "parafill/text.hpp"

namespace parafill::metrics {

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(const Tokens& tokens, std::size_t n) {
  NgramCounts out;
  if (n == 0 || tokens.size() < n) return out;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++out[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                   tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return out;
}

std::size_t total(const NgramCounts& c) {
  std::size_t t = 0;
  for (const auto& [_, v] : c) t += v;
  return t;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  return out + "\"";
}

std::string fmt_opt(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream ss;
  ss.precision(10);
  ss << *v;
  return ss.str();
}

}  // namespace

double bleu(const Tokens& candidate, const std::vector<Tokens>& references, std::size_t max_n) {
  if (candidate.empty() || references.empty() || max_n == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    NgramCounts cand = ngrams(candidate, n);
    NgramCounts max_ref;
    for (const auto& ref : references) {
      for (const auto& [g, c] : ngrams(ref, n)) max_ref[g] = std::max(max_ref[g], c);
    }
    std::size_t matched = 0;
    for (const auto& [g, c] : cand) {
      auto it = max_ref.find(g);
      if (it != max_ref.end()) matched += std::min(c, it->second);
    }
    const std::size_t denom = total(cand);
    double p = 0.0;
    if (n == 1) {
      if (matched == 0) return 0.0;
      p = static_cast<double>(matched) / static_cast<double>(denom);
    } else if (matched == 0) {
      p = 1.0 / static_cast<double>(denom + 1);
    } else {
      p = static_cast<double>(matched) / static_cast<double>(denom);
    }
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(candidate.size());
  std::size_t r = references.front().size();
  for (const auto& ref : references) {
    const auto diff = [&](std::size_t len) { return std::abs(static_cast<double>(len) - c); };
    if (diff(ref.size()) < diff(r) || (diff(ref.size()) == diff(r) && ref.size() < r)) r = ref.size();
  }
  const double bp = std::exp(std::min(0.0, 1.0 - static_cast<double>(r) / c));
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

Prf rouge_n(const Tokens& candidate, const Tokens& reference, std::size_t n) {
  NgramCounts cand = ngrams(candidate, n);
  NgramCounts ref = ngrams(reference, n);
  std::size_t overlap = 0;
  for (const auto& [g, c] : cand) {
    auto it = ref.find(g);
    if (it != ref.end()) overlap += std::min(c, it->second);
  }
  Prf out;
  const std::size_t tc = total(cand);
  const std::size_t tr = total(ref);
  out.precision = tc == 0 ? 0.0 : static_cast<double>(overlap) / static_cast<double>(tc);
  out.recall = tr == 0 ? 0.0 : static_cast<double>(overlap) / static_cast<double>(tr);
  out.f1 = out.precision + out.recall == 0.0 ? 0.0
                                             : 2.0 * out.precision * out.recall / (out.precision + out.recall);
  return out;
}

bool contains_phrase(std::string_view text, std::string_view phrase) {
  const Tokens needle = text::normalized_words(phrase);
  if (needle.empty()) return false;
  const Tokens hay = text::normalized_words(text);
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

std::optional<double> coverage(const std::vector<std::string>& names, std::string_view generated) {
  if (names.empty()) return std::nullopt;
  const Tokens hay = text::normalized_words(generated);
  std::size_t found = 0;
  for (const auto& name : names) {
    const Tokens needle = text::normalized_words(name);
    if (!needle.empty() && std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end()) ++found;
  }
  return static_cast<double>(found) / static_cast<double>(names.size());
}

std::optional<double> entities_count(const EntitySet& specified, std::string_view generated) {
  return coverage(specified.all(), generated);
}

std::optional<double> kw_count(const std::vector<std::string>& keywords, std::string_view generated) {
  return coverage(keywords, generated);
}

bool size_conformance(SizeClass requested, std::string_view generated) {
  const std::size_t n = text::utf8_length(generated);
  if (n < kMinParagraphChars || n > kMaxParagraphChars) return false;
  return classify_size(n) == requested;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw UsageError("cosine: size mismatch");
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> pooled_embedding(const model::Transformer<float>& model, const tokenizer::Vocab& vocab,
                                     std::string_view text) {
  std::vector<double> out(static_cast<std::size_t>(model.config().d_model), 0.0);
  const auto ids = vocab.encode(text);
  if (ids.empty()) return out;
  for (auto id : ids) {
    auto row = model.token_embedding(id);
    for (Eigen::Index i = 0; i < row.size(); ++i) out[static_cast<std::size_t>(i)] += row(i);
  }
  for (auto& v : out) v /= static_cast<double>(ids.size());
  return out;
}

double embedding_similarity(const model::Transformer<float>& model, const tokenizer::Vocab& vocab, std::string_view a,
                            std::string_view b) {
  return cosine(pooled_embedding(model, vocab, a), pooled_embedding(model, vocab, b));
}

double perplexity(const model::Transformer<float>& model, const model::Sequence& seq,
                  std::span<const std::uint8_t> mask) {
  auto r = model.loss(seq, mask);
  return std::exp(r.nll / static_cast<double>(r.count));
}

BootstrapCi bootstrap_mean(const std::vector<double>& values, std::size_t resamples, std::uint64_t seed) {
  if (values.empty()) throw DataError("bootstrap over an empty sample");
  BootstrapCi ci;
  ci.n = values.size();
  double sum = 0.0;
  for (double v : values) sum += v;
  ci.mean = sum / static_cast<double>(values.size());
  std::mt19937_64 rng(seed);
  std::vector<double> means(resamples);
  for (std::size_t b = 0; b < resamples; ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) s += values[static_cast<std::size_t>(rng() % values.size())];
    means[b] = s / static_cast<double>(values.size());
  }
  std::sort(means.begin(), means.end());
  auto at = [&](double q) {
    auto idx = static_cast<std::size_t>(std::floor(q * static_cast<double>(resamples - 1)));
    return means[idx];
  };
  ci.lower = at(0.025);
  ci.upper = at(0.975);
  ci.lower_one_sided = at(0.05);
  return ci;
}

Aggregate aggregate(const std::vector<double>& values, std::size_t bins) {
  Aggregate a;
  a.n = values.size();
  if (values.empty() || bins == 0) return a;
  std::vector<double> sorted(values);
  std::sort(sorted.begin(), sorted.end());
  double sum = 0.0;
  for (double v : sorted) sum += v;
  a.mean = sum / static_cast<double>(sorted.size());
  const std::size_t mid = sorted.size() / 2;
  a.median = sorted.size() % 2 == 1 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  const double lo = sorted.front();
  const double hi = sorted.back();
  const double width = hi > lo ? (hi - lo) / static_cast<double>(bins) : 1.0;
  for (std::size_t i = 0; i <= bins; ++i) a.edges.push_back(lo + width * static_cast<double>(i));
  a.counts.assign(bins, 0);
  for (double v : sorted) {
    auto idx = static_cast<std::size_t>((v - lo) / width);
    ++a.counts[std::min(idx, bins - 1)];
  }
  return a;
}

std::vector<double> MetricReport::column(const std::string& name, bool skip_missing) const {
  std::vector<double> out;
  for (const auto& s : per_sample) {
    std::optional<double> v;
    if (name == "perplexity") v = s.perplexity;
    else if (name == "bleu") v = s.bleu;
    else if (name == "rouge1_f") v = s.rouge1_f;
    else if (name == "rouge2_f") v = s.rouge2_f;
    else if (name == "entities_count") v = s.entities_count;
    else if (name == "kw_count") v = s.kw_count;
    else if (name == "size_ok") v = s.size_ok ? 1.0 : 0.0;
    else if (name == "emb_sim") v = s.emb_sim;
    else if (name == "generated_chars") v = static_cast<double>(s.generated_chars);
    else throw UsageError("unknown metric " + name);
    if (v && !std::isnan(*v)) out.push_back(*v);
    else if (!skip_missing) out.push_back(std::nan(""));
  }
  return out;
}

nlohmann::json MetricReport::aggregates() const {
  nlohmann::json j = nlohmann::json::object();
  for (const char* name : {"perplexity", "bleu", "rouge1_f", "rouge2_f", "entities_count", "kw_count", "size_ok",
                           "emb_sim", "generated_chars"}) {
    auto a = aggregate(column(name));
    j[name] = {{"n", a.n}, {"mean", a.mean}, {"median", a.median}, {"edges", a.edges}, {"counts", a.counts}};
  }
  return j;
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : per_sample) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    rows.push_back({{"sample_id", s.sample_id},
                    {"perplexity", s.perplexity},
                    {"bleu", s.bleu},
                    {"rouge1_f", s.rouge1_f},
                    {"rouge2_f", s.rouge2_f},
                    {"entities_count", opt(s.entities_count)},
                    {"kw_count", opt(s.kw_count)},
                    {"size_ok", s.size_ok},
                    {"emb_sim", s.emb_sim},
                    {"generated_chars", s.generated_chars},
                    {"requested_size", s.requested_size},
                    {"stop_reason", s.stop_reason},
                    {"text", s.text}});
  }
  return {{"condition", condition}, {"aggregates", aggregates()}, {"per_sample", rows}};
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
  MetricReport r;
  try {
    r.condition = j.at("condition");
    for (const auto& row : j.at("per_sample")) {
      auto num = [&](const char* key) {
        const auto& v = row.at(key);
        return v.is_null() ? std::nan("") : v.get<double>();
      };
      auto opt = [&](const char* key) {
        const auto& v = row.at(key);
        return v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
      };
      SampleMetrics s;
      s.sample_id = row.at("sample_id").get<std::string>();
      s.perplexity = num("perplexity");
      s.bleu = num("bleu");
      s.rouge1_f = num("rouge1_f");
      s.rouge2_f = num("rouge2_f");
      s.entities_count = opt("entities_count");
      s.kw_count = opt("kw_count");
      s.size_ok = row.at("size_ok").get<bool>();
      s.emb_sim = num("emb_sim");
      s.generated_chars = row.at("generated_chars").get<std::size_t>();
      s.requested_size = row.at("requested_size").get<std::string>();
      s.stop_reason = row.at("stop_reason").get<std::string>();
      s.text = row.at("text").get<std::string>();
      r.per_sample.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed metric report: ") + e.what());
  }
  return r;
}

std::string MetricReport::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "sample_id,perplexity,bleu,rouge1_f,rouge2_f,entities_count,kw_count,size_ok,emb_sim,generated_chars,"
         "requested_size,stop_reason\n";
  for (const auto& s : per_sample) {
    out << csv_escape(s.sample_id) << ',' << s.perplexity << ',' << s.bleu << ',' << s.rouge1_f << ','
        << s.rouge2_f << ',' << fmt_opt(s.entities_count) << ',' << fmt_opt(s.kw_count) << ','
        << (s.size_ok ? 1 : 0) << ',' << s.emb_sim << ',' << s.generated_chars << ',' << s.requested_size << ','
        << s.stop_reason << '\n';
  }
  return out.str();
}

}  // namespace parafill::metrics
