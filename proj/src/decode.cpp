#include "parafill/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "parafill/text.hpp"
#include "parafill/types.hpp"

namespace parafill::decode {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

class TransformerState : public DecodeState {
 public:
  TransformerState(model::Transformer<float>::Session session, std::uint8_t segment)
      : session_(std::move(session)), segment_(segment) {
    refresh();
  }
  const std::vector<double>& logits() const override { return logits_; }
  void advance(TokenId id) override {
    session_.advance(id, segment_);
    refresh();
  }
  std::unique_ptr<DecodeState> clone() const override { return std::make_unique<TransformerState>(*this); }

 private:
  void refresh() { logits_.assign(session_.logits().begin(), session_.logits().end()); }
  model::Transformer<float>::Session session_;
  std::uint8_t segment_;
  std::vector<double> logits_;
};

class TableState : public DecodeState {
 public:
  TableState(const TableLM* lm, TokenId last) : lm_(lm) { set(last); }
  const std::vector<double>& logits() const override { return logits_; }
  void advance(TokenId id) override { set(id); }
  std::unique_ptr<DecodeState> clone() const override { return std::make_unique<TableState>(*this); }

 private:
  void set(TokenId last) {
    const auto& row = lm_->table().at(static_cast<std::size_t>(last));
    logits_.resize(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) logits_[i] = row[i] > 0.0 ? std::log(row[i]) : kNegInf;
  }
  const TableLM* lm_;
  std::vector<double> logits_;
};

// Ids sorted by probability, descending, ties to the lower id.
std::vector<std::size_t> ranked(const std::vector<double>& probs) {
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  return order;
}

std::vector<double> renormalize(std::vector<double> v) {
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  if (total <= 0.0) throw DataError("distribution has no mass");
  for (auto& x : v) x /= total;
  return v;
}

bool all_masked(const std::vector<double>& logits) {
  return std::all_of(logits.begin(), logits.end(), [](double x) { return x == kNegInf; });
}

}  // namespace

std::unique_ptr<DecodeState> TransformerLM::start(const TokenSeq& prefix, const std::vector<std::uint8_t>& segments) const {
  model::Sequence seq{prefix, segments};
  return std::make_unique<TransformerState>(model_.start(seq), segment_);
}

TableLM::TableLM(std::vector<std::vector<double>> table) : table_(std::move(table)) {
  for (const auto& row : table_) {
    if (row.size() != table_.size()) throw UsageError("transition table must be square");
  }
}

std::unique_ptr<DecodeState> TableLM::start(const TokenSeq& prefix, const std::vector<std::uint8_t>&) const {
  if (prefix.empty()) throw UsageError("empty prefix");
  return std::make_unique<TableState>(this, prefix.back());
}

void DecodeParams::validate() const {
  if (!(temperature > 0.0)) throw UsageError("temperature must be positive");
  if (top_p && (*top_p <= 0.0 || *top_p > 1.0)) throw UsageError("top_p must be in (0, 1]");
  if (top_k && *top_k < 1) throw UsageError("top_k must be at least 1");
  if (num_beams < 1) throw UsageError("num_beams must be at least 1");
  if (repetition_penalty < 1.0) throw UsageError("repetition_penalty must be >= 1");
  if (min_length > max_length) throw UsageError("min_length exceeds max_length");
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::Greedy: return "greedy";
    case Strategy::Beam: return "beam";
    case Strategy::Sample: return "sample";
  }
  return "?";
}

Strategy parse_strategy(const std::string& s) {
  if (s == "greedy") return Strategy::Greedy;
  if (s == "beam") return Strategy::Beam;
  if (s == "sample") return Strategy::Sample;
  throw UsageError("unknown strategy '" + s + "'");
}

std::string to_string(StopReason r) { return r == StopReason::Eos ? "eos" : "max_length"; }

void to_json(nlohmann::json& j, const DecodeParams& p) {
  j = nlohmann::json{{"strategy", to_string(p.strategy)},
                     {"temperature", p.temperature},
                     {"top_k", p.top_k ? nlohmann::json(*p.top_k) : nlohmann::json(nullptr)},
                     {"top_p", p.top_p ? nlohmann::json(*p.top_p) : nlohmann::json(nullptr)},
                     {"num_beams", p.num_beams},
                     {"repetition_penalty", p.repetition_penalty},
                     {"no_repeat_ngram_size", p.no_repeat_ngram_size},
                     {"min_length", p.min_length},
                     {"max_length", p.max_length},
                     {"length_alpha", p.length_alpha},
                     {"seed", p.seed}};
}

void from_json(const nlohmann::json& j, DecodeParams& p) {
  if (j.contains("strategy")) p.strategy = parse_strategy(j["strategy"].get<std::string>());
  p.temperature = j.value("temperature", p.temperature);
  if (j.contains("top_k")) {
    if (j["top_k"].is_null()) p.top_k.reset();
    else p.top_k = j["top_k"].get<std::size_t>();
  }
  if (j.contains("top_p")) {
    if (j["top_p"].is_null()) p.top_p.reset();
    else p.top_p = j["top_p"].get<double>();
  }
  p.num_beams = j.value("num_beams", p.num_beams);
  p.repetition_penalty = j.value("repetition_penalty", p.repetition_penalty);
  p.no_repeat_ngram_size = j.value("no_repeat_ngram_size", p.no_repeat_ngram_size);
  p.min_length = j.value("min_length", p.min_length);
  p.max_length = j.value("max_length", p.max_length);
  p.length_alpha = j.value("length_alpha", p.length_alpha);
  p.seed = j.value("seed", p.seed);
}

TokenRules p2_rules(const tokenizer::Vocab& vocab) {
  TokenRules r;
  r.eos = vocab.special(tokenizer::Special::Eos);
  for (int s = 0; s < tokenizer::kNumSpecials; ++s) {
    auto id = vocab.special(static_cast<tokenizer::Special>(s));
    if (id != *r.eos) r.banned.push_back(id);
  }
  return r;
}

std::vector<double> softmax(const std::vector<double>& logits) {
  std::vector<double> out(logits.size(), 0.0);
  const double mx = *std::max_element(logits.begin(), logits.end());
  if (mx == kNegInf) throw DataError("every token is masked");
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = logits[i] == kNegInf ? 0.0 : std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (auto& x : out) x /= sum;
  return out;
}

std::vector<double> log_softmax(const std::vector<double>& logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  if (mx == kNegInf) throw DataError("every token is masked");
  double sum = 0.0;
  for (double x : logits) sum += x == kNegInf ? 0.0 : std::exp(x - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] == kNegInf ? kNegInf : logits[i] - lse;
  return out;
}

std::vector<double> nucleus_filter(const std::vector<double>& probs, double p) {
  if (!(p > 0.0)) throw UsageError("nucleus p must be positive");
  std::vector<double> out(probs.size(), 0.0);
  double cum = 0.0;
  for (std::size_t id : ranked(probs)) {
    out[id] = probs[id];
    cum += probs[id];
    if (cum >= p) break;
  }
  return renormalize(std::move(out));
}

std::vector<double> top_k_filter(const std::vector<double>& probs, std::size_t k) {
  if (k < 1) throw UsageError("top_k must be at least 1");
  if (k >= probs.size()) return probs;
  std::vector<double> out(probs.size(), 0.0);
  auto order = ranked(probs);
  for (std::size_t r = 0; r < k; ++r) out[order[r]] = probs[order[r]];
  return renormalize(std::move(out));
}

std::vector<double> apply_temperature(const std::vector<double>& logits, double temperature) {
  if (!(temperature > 0.0)) throw UsageError("temperature must be positive");
  std::vector<double> out(logits);
  if (temperature == 1.0) return out;
  for (auto& x : out) x /= temperature;
  return out;
}

std::vector<double> apply_repetition_penalty(const std::vector<double>& logits, const TokenSeq& generated,
                                             double penalty) {
  std::vector<double> out(logits);
  if (penalty == 1.0) return out;
  std::vector<bool> seen(logits.size(), false);
  for (TokenId id : generated) {
    auto i = static_cast<std::size_t>(id);
    if (i >= out.size() || seen[i]) continue;
    seen[i] = true;
    out[i] = out[i] > 0.0 ? out[i] / penalty : out[i] * penalty;
  }
  return out;
}

std::unordered_set<TokenId> no_repeat_ngram_mask(const TokenSeq& generated, std::size_t n) {
  std::unordered_set<TokenId> banned;
  if (n == 0 || generated.size() < n) return banned;
  const std::size_t ctx = n - 1;
  const auto suffix_begin = generated.end() - static_cast<std::ptrdiff_t>(ctx);
  for (std::size_t i = 0; i + n <= generated.size(); ++i) {
    if (std::equal(generated.begin() + static_cast<std::ptrdiff_t>(i),
                   generated.begin() + static_cast<std::ptrdiff_t>(i + ctx), suffix_begin)) {
      banned.insert(generated[i + ctx]);
    }
  }
  return banned;
}

TokenId argmax(const std::vector<double>& values) {
  if (values.empty()) throw UsageError("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

TokenId categorical(const std::vector<double>& probs, std::mt19937_64& rng) {
  const double total = std::accumulate(probs.begin(), probs.end(), 0.0);
  if (!(total > 0.0)) throw DataError("distribution has no mass");
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * total;
  double cum = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    cum += probs[i];
    last = i;
    if (u < cum) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(last);
}

std::vector<double> constrained_logits(const std::vector<double>& raw, const TokenSeq& generated,
                                       const DecodeParams& params, const TokenRules& rules) {
  std::vector<double> out = apply_repetition_penalty(raw, generated, params.repetition_penalty);
  for (TokenId id : rules.banned) out.at(static_cast<std::size_t>(id)) = kNegInf;
  if (rules.eos && generated.size() < params.min_length) out.at(static_cast<std::size_t>(*rules.eos)) = kNegInf;
  for (TokenId id : no_repeat_ngram_mask(generated, params.no_repeat_ngram_size)) {
    out.at(static_cast<std::size_t>(id)) = kNegInf;
  }
  return out;
}

double normalized_score(double logprob, std::size_t length, double alpha) {
  return logprob / std::pow(static_cast<double>(std::max<std::size_t>(length, 1)), alpha);
}

GenerationResult greedy_decode(const LanguageModel& lm, const TokenSeq& prefix,
                               const std::vector<std::uint8_t>& segments, const DecodeParams& params,
                               const TokenRules& rules) {
  params.validate();
  GenerationResult res;
  auto state = lm.start(prefix, segments);
  while (res.ids.size() < params.max_length) {
    auto logits = constrained_logits(state->logits(), res.ids, params, rules);
    if (all_masked(logits)) {
      res.stop_reason = StopReason::Eos;
      return res;
    }
    const TokenId next = argmax(logits);
    res.logprob += log_softmax(logits)[static_cast<std::size_t>(next)];
    if (rules.eos && next == *rules.eos) {
      res.stop_reason = StopReason::Eos;
      return res;
    }
    res.ids.push_back(next);
    if (res.ids.size() < params.max_length) state->advance(next);
  }
  res.stop_reason = StopReason::MaxLength;
  return res;
}

GenerationResult beam_search(const LanguageModel& lm, const TokenSeq& prefix, const std::vector<std::uint8_t>& segments,
                             const DecodeParams& params, const TokenRules& rules) {
  params.validate();
  const std::size_t k = params.num_beams;
  struct Beam {
    std::unique_ptr<DecodeState> state;
    TokenSeq ids;
    double logprob = 0.0;
  };
  struct Finished {
    TokenSeq ids;
    double logprob = 0.0;
    double score = 0.0;
  };
  std::vector<Beam> beams;
  beams.push_back({lm.start(prefix, segments), {}, 0.0});
  std::vector<Finished> finished;

  for (std::size_t len = 0; len < params.max_length && !beams.empty() && finished.size() < k; ++len) {
    struct Candidate {
      double score;
      std::size_t beam;
      TokenId token;
    };
    std::vector<Candidate> cands;
    for (std::size_t b = 0; b < beams.size(); ++b) {
      auto logits = constrained_logits(beams[b].state->logits(), beams[b].ids, params, rules);
      if (all_masked(logits)) continue;
      auto lp = log_softmax(logits);
      for (std::size_t t = 0; t < lp.size(); ++t) {
        if (lp[t] != kNegInf) cands.push_back({beams[b].logprob + lp[t], b, static_cast<TokenId>(t)});
      }
    }
    const std::size_t keep = std::min(cands.size(), 2 * k);
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.beam != b.beam) return a.beam < b.beam;
                        return a.token < b.token;
                      });
    std::vector<Beam> next;
    for (std::size_t r = 0; r < keep && next.size() < k; ++r) {
      const auto& c = cands[r];
      const Beam& parent = beams[c.beam];
      if (rules.eos && c.token == *rules.eos) {
        if (r < k) finished.push_back({parent.ids, c.score, normalized_score(c.score, parent.ids.size() + 1, params.length_alpha)});
        continue;
      }
      Beam nb{parent.state->clone(), parent.ids, c.score};
      nb.ids.push_back(c.token);
      if (nb.ids.size() < params.max_length) nb.state->advance(c.token);
      next.push_back(std::move(nb));
    }
    beams = std::move(next);
  }

  GenerationResult res;
  if (!finished.empty()) {
    const Finished* best = &finished.front();
    for (const auto& f : finished) {
      if (f.score > best->score) best = &f;
    }
    res.ids = best->ids;
    res.logprob = best->logprob;
    res.stop_reason = StopReason::Eos;
    return res;
  }
  if (beams.empty()) {
    res.stop_reason = StopReason::Eos;
    return res;
  }
  const Beam* best = &beams.front();
  for (const auto& b : beams) {
    if (normalized_score(b.logprob, b.ids.size(), params.length_alpha) >
        normalized_score(best->logprob, best->ids.size(), params.length_alpha)) {
      best = &b;
    }
  }
  res.ids = best->ids;
  res.logprob = best->logprob;
  res.stop_reason = StopReason::MaxLength;
  return res;
}

GenerationResult sample_decode(const LanguageModel& lm, const TokenSeq& prefix,
                               const std::vector<std::uint8_t>& segments, const DecodeParams& params,
                               const TokenRules& rules) {
  params.validate();
  std::mt19937_64 rng(params.seed);
  GenerationResult res;
  auto state = lm.start(prefix, segments);
  while (res.ids.size() < params.max_length) {
    // Order: temperature, repetition penalty, n-gram mask, top-k, top-p.
    auto logits = apply_temperature(state->logits(), params.temperature);
    logits = constrained_logits(logits, res.ids, params, rules);
    if (all_masked(logits)) {
      res.stop_reason = StopReason::Eos;
      return res;
    }
    auto probs = softmax(logits);
    if (params.top_k) probs = top_k_filter(probs, *params.top_k);
    if (params.top_p) probs = nucleus_filter(probs, *params.top_p);
    const TokenId next = categorical(probs, rng);
    res.logprob += std::log(probs[static_cast<std::size_t>(next)]);
    if (rules.eos && next == *rules.eos) {
      res.stop_reason = StopReason::Eos;
      return res;
    }
    res.ids.push_back(next);
    if (res.ids.size() < params.max_length) state->advance(next);
  }
  res.stop_reason = StopReason::MaxLength;
  return res;
}

GenerationResult generate(const LanguageModel& lm, const TokenSeq& prefix, const std::vector<std::uint8_t>& segments,
                          const DecodeParams& params, const TokenRules& rules, const tokenizer::Vocab* vocab) {
  GenerationResult r;
  switch (params.strategy) {
    case Strategy::Greedy: r = greedy_decode(lm, prefix, segments, params, rules); break;
    case Strategy::Beam: r = beam_search(lm, prefix, segments, params, rules); break;
    case Strategy::Sample: r = sample_decode(lm, prefix, segments, params, rules); break;
  }
  // Sampled byte tokens may end mid code point.
  if (vocab != nullptr) r.text = text::sanitize_utf8(vocab->decode(r.ids, true));
  return r;
}

}  // namespace parafill::decode
