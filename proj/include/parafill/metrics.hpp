#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "parafill/model.hpp"
#include "parafill/tokenizer.hpp"
#include "parafill/types.hpp"

namespace parafill::metrics {

using Tokens = std::vector<std::string>;

/// BLEU with clipped n-gram precisions for n = 1..max_n, +1 smoothing of
/// zero matches for n >= 2, and brevity penalty against the closest
/// reference length. Empty candidate gives 0.
///
/// Worked examples (max_n as given):
///   "the cat sat" vs "the cat sat on the mat", max_n 3: precisions 1, brevity
///   penalty exp(1 - 6/3), score e^-1.
///   "b a" vs "a b", max_n 2: unigrams 2/2, bigrams smoothed to 1/2, score
///   sqrt(1/2).
double bleu(const Tokens& candidate, const std::vector<Tokens>& references, std::size_t max_n = 4);

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Clipped n-gram overlap; f1 is 0 when precision and recall are both 0.
/// Worked example: "a b c" vs "a b d", n 1: precision, recall and f1 are 2/3.
Prf rouge_n(const Tokens& candidate, const Tokens& reference, std::size_t n);

/// True when the words of `phrase` occur contiguously in `text` (whole
/// words, case-insensitive, punctuation ignored).
bool contains_phrase(std::string_view text, std::string_view phrase);

/// Fraction of the given names found in `generated`; none when the list is
/// empty.
std::optional<double> coverage(const std::vector<std::string>& names, std::string_view generated);
std::optional<double> entities_count(const EntitySet& specified, std::string_view generated);
std::optional<double> kw_count(const std::vector<std::string>& keywords, std::string_view generated);

/// Requested class equals the class of the generated character count;
/// counts outside [400, 1700] never conform.
bool size_conformance(SizeClass requested, std::string_view generated);

double cosine(const std::vector<double>& a, const std::vector<double>& b);

/// Mean of the token-embedding rows of `text` under `model`.
std::vector<double> pooled_embedding(const model::Transformer<float>& model, const tokenizer::Vocab& vocab,
                                     std::string_view text);
double embedding_similarity(const model::Transformer<float>& model, const tokenizer::Vocab& vocab,
                            std::string_view a, std::string_view b);

/// exp(mean NLL) over the masked targets (see Transformer::loss_and_grad).
double perplexity(const model::Transformer<float>& model, const model::Sequence& seq,
                  std::span<const std::uint8_t> mask);

struct BootstrapCi {
  double mean = 0.0;
  double lower = 0.0;  // 2.5th percentile of resampled means
  double upper = 0.0;  // 97.5th percentile
  double lower_one_sided = 0.0;  // 5th percentile
  std::size_t n = 0;
};

/// Percentile bootstrap of the mean of paired differences.
BootstrapCi bootstrap_mean(const std::vector<double>& values, std::size_t resamples = 10000, std::uint64_t seed = 0);

struct SampleMetrics {
  std::string sample_id;
  double perplexity = 0.0;
  double bleu = 0.0;
  double rouge1_f = 0.0;
  double rouge2_f = 0.0;
  std::optional<double> entities_count;
  std::optional<double> kw_count;
  bool size_ok = false;
  double emb_sim = 0.0;
  std::size_t generated_chars = 0;
  std::string requested_size;
  std::string stop_reason;
  std::string text;
};

struct Aggregate {
  std::size_t n = 0;
  double mean = 0.0;
  double median = 0.0;
  std::vector<double> edges;             // histogram bin edges (bins + 1)
  std::vector<std::size_t> counts;       // per bin; sums to n
};

/// Mean, median and an equal-width histogram. Values equal to the upper
/// edge fall into the last bin.
Aggregate aggregate(const std::vector<double>& values, std::size_t bins = 10);

struct MetricReport {
  std::vector<SampleMetrics> per_sample;
  nlohmann::json condition;

  /// Metric name -> aggregate; missing and NaN values are skipped.
  nlohmann::json aggregates() const;
  nlohmann::json to_json() const;
  /// Inverse of to_json (aggregates are recomputed); null perplexity reads as
  /// NaN. Throws DataError on a malformed report.
  static MetricReport from_json(const nlohmann::json& j);
  std::string to_csv() const;
  std::vector<double> column(const std::string& name, bool skip_missing = true) const;
};

}  // namespace parafill::metrics
