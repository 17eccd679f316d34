#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "parafill/model.hpp"
#include "parafill/tokenizer.hpp"

namespace parafill::decode {

using tokenizer::TokenId;
using tokenizer::TokenSeq;

/// Next-token distribution of a model after some prefix.
class DecodeState {
 public:
  virtual ~DecodeState() = default;
  virtual const std::vector<double>& logits() const = 0;
  virtual void advance(TokenId id) = 0;
  virtual std::unique_ptr<DecodeState> clone() const = 0;
};

class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual std::unique_ptr<DecodeState> start(const TokenSeq& prefix, const std::vector<std::uint8_t>& segments) const = 0;
};

/// Adapter over a transformer; generated tokens get `generated_segment`.
class TransformerLM : public LanguageModel {
 public:
  explicit TransformerLM(const model::Transformer<float>& model, std::uint8_t generated_segment = 1)
      : model_(model), segment_(generated_segment) {}
  std::size_t vocab_size() const override { return static_cast<std::size_t>(model_.config().vocab_size); }
  std::unique_ptr<DecodeState> start(const TokenSeq& prefix, const std::vector<std::uint8_t>& segments) const override;

 private:
  const model::Transformer<float>& model_;
  std::uint8_t segment_;
};

/// First-order Markov model given by a dense transition table of
/// probabilities: row = previous token, column = next token. The last
/// prefix token selects the first row.
class TableLM : public LanguageModel {
 public:
  explicit TableLM(std::vector<std::vector<double>> table);
  std::size_t vocab_size() const override { return table_.size(); }
  std::unique_ptr<DecodeState> start(const TokenSeq& prefix, const std::vector<std::uint8_t>& segments) const override;
  const std::vector<std::vector<double>>& table() const { return table_; }

 private:
  std::vector<std::vector<double>> table_;
};

enum class Strategy { Greedy, Beam, Sample };

struct DecodeParams {
  Strategy strategy = Strategy::Sample;
  double temperature = 1.0;
  std::optional<std::size_t> top_k;
  std::optional<double> top_p = 0.9;
  std::size_t num_beams = 1;
  double repetition_penalty = 1.0;
  std::size_t no_repeat_ngram_size = 0;  // 0 disables
  std::size_t min_length = 0;
  std::size_t max_length = 256;
  double length_alpha = 0.7;
  std::uint64_t seed = 0;

  /// Throws UsageError on inconsistent values.
  void validate() const;
};

void to_json(nlohmann::json& j, const DecodeParams& p);
/// Missing fields keep the values already in `p`.
void from_json(const nlohmann::json& j, DecodeParams& p);
std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& s);

/// Token-level constraints: `eos` ends the text; `banned` ids never appear.
struct TokenRules {
  std::optional<TokenId> eos;
  std::vector<TokenId> banned;
};

/// Rules for P2 generation: specials other than eos are banned.
TokenRules p2_rules(const tokenizer::Vocab& vocab);

enum class StopReason { Eos, MaxLength };
std::string to_string(StopReason r);

struct GenerationResult {
  TokenSeq ids;  // eos excluded
  std::string text;
  StopReason stop_reason = StopReason::MaxLength;
  double logprob = 0.0;  // sum of processed log-probabilities, eos included
};

std::vector<double> softmax(const std::vector<double>& logits);
std::vector<double> log_softmax(const std::vector<double>& logits);

/// Keeps the shortest prefix of the probability-sorted ids (ties to the lower
/// id) whose mass reaches p, zeroes the rest and renormalizes.
std::vector<double> nucleus_filter(const std::vector<double>& probs, double p);
/// Keeps the k most probable ids (ties to the lower id) and renormalizes.
std::vector<double> top_k_filter(const std::vector<double>& probs, std::size_t k);
std::vector<double> apply_temperature(const std::vector<double>& logits, double temperature);
/// Seen ids: positive logits are divided by the penalty, negative ones
/// multiplied.
std::vector<double> apply_repetition_penalty(const std::vector<double>& logits, const TokenSeq& generated,
                                             double penalty);
/// Ids that would complete an n-gram already present in `generated`.
std::unordered_set<TokenId> no_repeat_ngram_mask(const TokenSeq& generated, std::size_t n);

/// Index of the largest value; ties go to the lower index.
TokenId argmax(const std::vector<double>& values);

/// Draws an index with probability proportional to `probs` using
/// u = (rng() >> 11) * 2^-53.
TokenId categorical(const std::vector<double>& probs, std::mt19937_64& rng);

/// Logits after the hard masks (banned ids, eos before min_length, n-gram
/// repeats) and the repetition penalty, i.e. everything except temperature.
std::vector<double> constrained_logits(const std::vector<double>& raw, const TokenSeq& generated,
                                       const DecodeParams& params, const TokenRules& rules);

GenerationResult greedy_decode(const LanguageModel& lm, const TokenSeq& prefix, const std::vector<std::uint8_t>& segments,
                               const DecodeParams& params, const TokenRules& rules);
GenerationResult beam_search(const LanguageModel& lm, const TokenSeq& prefix, const std::vector<std::uint8_t>& segments,
                             const DecodeParams& params, const TokenRules& rules);
GenerationResult sample_decode(const LanguageModel& lm, const TokenSeq& prefix, const std::vector<std::uint8_t>& segments,
                               const DecodeParams& params, const TokenRules& rules);

/// Dispatches on params.strategy; fills `text` when a vocabulary is given.
GenerationResult generate(const LanguageModel& lm, const TokenSeq& prefix, const std::vector<std::uint8_t>& segments,
                          const DecodeParams& params, const TokenRules& rules, const tokenizer::Vocab* vocab = nullptr);

/// Length-normalized beam score: logprob / length^alpha.
double normalized_score(double logprob, std::size_t length, double alpha);

}  // namespace parafill::decode
