#include "parafill/assembly.hpp"

#include <algorithm>
#include <cmath>

namespace parafill::assembly {

namespace {

using tokenizer::Special;

struct Writer {
  TokenSeq ids;
  std::vector<std::uint8_t> segments;

  void put(TokenId id, Segment s) {
    ids.push_back(id);
    segments.push_back(static_cast<std::uint8_t>(s));
  }
  void put(const TokenSeq& seq, Segment s) {
    for (TokenId id : seq) put(id, s);
  }
};

Special size_token(SizeClass c) {
  switch (c) {
    case SizeClass::S: return Special::S;
    case SizeClass::M: return Special::M;
    case SizeClass::L: return Special::L;
  }
  return Special::S;
}

// Everything up to and including [P2], given already truncated context.
Writer write_prefix(const Sections& s, const TokenSeq& p1, const TokenSeq& p3, const tokenizer::Vocab& v,
                    Format format) {
  Writer w;
  if (format == Format::Conditioned) {
    w.put(v.special(Special::P3), Segment::P3);
    w.put(p3, Segment::P3);
    w.put(v.special(Special::Sum), Segment::Sum);
    w.put(s.summary, Segment::Sum);
    w.put(v.special(Special::Theme), Segment::Theme);
    w.put(s.theme, Segment::Theme);
    w.put(v.special(Special::Ent), Segment::Ent);
    w.put(s.entities, Segment::Ent);
    w.put(v.special(size_token(s.size)), Segment::Size);
  }
  w.put(v.special(Special::P1), Segment::P1);
  w.put(p1, Segment::P1);
  w.put(v.special(Special::P2), Segment::P2);
  return w;
}

}  // namespace

Truncated truncate_context(const TokenSeq& p1, const TokenSeq& p3, std::size_t remaining) {
  const std::size_t b1 = 2 * remaining / 3;
  const std::size_t b3 = remaining - b1;
  std::size_t k1 = std::min(p1.size(), b1);
  std::size_t k3 = std::min(p3.size(), b3);
  const std::size_t spare1 = b1 - k1;
  const std::size_t spare3 = b3 - k3;
  k3 = std::min(p3.size(), k3 + spare1);
  k1 = std::min(p1.size(), k1 + spare3);
  Truncated t;
  t.p1.assign(p1.end() - static_cast<std::ptrdiff_t>(k1), p1.end());
  t.p3.assign(p3.begin(), p3.begin() + static_cast<std::ptrdiff_t>(k3));
  return t;
}

std::size_t fixed_length(const Sections& s, Format format) {
  std::size_t n = 2;  // [P1], [P2]
  if (format == Format::Conditioned) n += 5 + s.summary.size() + s.theme.size() + s.entities.size();
  return n;
}

TrainingSample build_training_sample(const Sections& s, const tokenizer::Vocab& vocab, std::size_t block_size,
                                     Format format) {
  if (s.p2.empty()) throw DataError("sample dropped: empty P2");
  const std::size_t fixed = fixed_length(s, format) + s.p2.size() + 1;
  if (fixed > block_size) throw DataError("sample dropped: P2 exceeds budget");
  Truncated t = format == Format::Conditioned ? truncate_context(s.p1, s.p3, block_size - fixed)
                                              : truncate_context(s.p1, {}, block_size - fixed);
  Writer w = write_prefix(s, t.p1, t.p3, vocab, format);
  TrainingSample out;
  const std::size_t p2_begin = w.ids.size();
  w.put(s.p2, Segment::P2);
  w.put(vocab.special(Special::Eos), Segment::P2);
  out.attention_len = w.ids.size();
  out.loss_mask.assign(block_size, 0);
  // The plain baseline is an ordinary language model: every real token after
  // the first is a target.
  const std::size_t mask_begin = format == Format::Plain ? 1 : p2_begin;
  std::fill(out.loss_mask.begin() + static_cast<std::ptrdiff_t>(mask_begin),
            out.loss_mask.begin() + static_cast<std::ptrdiff_t>(out.attention_len), 1);
  while (w.ids.size() < block_size) w.put(vocab.special(Special::Pad), Segment::P2);
  out.ids = std::move(w.ids);
  out.segments = std::move(w.segments);
  return out;
}

GenerationPrefix build_generation_prefix(const Sections& s, const tokenizer::Vocab& vocab, std::size_t block_size,
                                         std::size_t reserve, Format format) {
  if (reserve < 1) throw UsageError("generation reserve must be at least 1");
  const std::size_t fixed = fixed_length(s, format);
  if (fixed + reserve > block_size) {
    throw DataError("context too large: fixed part " + std::to_string(fixed) + " + reserve " +
                    std::to_string(reserve) + " > block " + std::to_string(block_size));
  }
  const std::size_t remaining = block_size - fixed - reserve;
  Truncated t = format == Format::Conditioned ? truncate_context(s.p1, s.p3, remaining)
                                              : truncate_context(s.p1, {}, remaining);
  Writer w = write_prefix(s, t.p1, t.p3, vocab, format);
  GenerationPrefix out;
  out.reserved = block_size - w.ids.size();
  out.p1_kept = t.p1.size();
  out.p3_kept = t.p3.size();
  out.ids = std::move(w.ids);
  out.segments = std::move(w.segments);
  return out;
}

std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t book, std::uint64_t paragraph, std::uint64_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(book), static_cast<std::uint32_t>(book >> 32),
                    static_cast<std::uint32_t>(paragraph), static_cast<std::uint32_t>(paragraph >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  return std::mt19937_64(seq);
}

std::string choose_summary(const SummarySet& s, std::mt19937_64& rng) {
  std::vector<std::string> slots;
  if (!s.kw.empty()) {
    std::string joined;
    for (std::size_t i = 0; i < s.kw.size(); ++i) {
      if (i > 0) joined += ", ";
      joined += s.kw[i];
    }
    slots.push_back(std::move(joined));
  }
  for (const auto* slot : {&s.key_sentence, &s.ext1, &s.ext2}) {
    if (!slot->empty()) slots.push_back(*slot);
  }
  if (slots.empty()) return {};
  return slots[static_cast<std::size_t>(rng() % slots.size())];
}

std::string entities_text(const EntitySet& e) {
  std::string out;
  for (const auto& name : e.all()) {
    if (!out.empty()) out += ", ";
    out += name;
  }
  return out;
}

nlohmann::json dump_sample(const TrainingSample& s) {
  return nlohmann::json{{"ids", s.ids}, {"segments", s.segments}, {"mask", s.loss_mask}};
}

const LengthStats::Range& LengthStats::of(SizeClass c) const {
  switch (c) {
    case SizeClass::S: return s;
    case SizeClass::M: return m;
    case SizeClass::L: return l;
  }
  return s;
}

void to_json(nlohmann::json& j, const LengthStats& s) {
  auto r = [](const LengthStats::Range& x) { return nlohmann::json{{"p5", x.p5}, {"p95", x.p95}}; };
  j = nlohmann::json{{"S", r(s.s)}, {"M", r(s.m)}, {"L", r(s.l)}};
}

void from_json(const nlohmann::json& j, LengthStats& s) {
  auto r = [](const nlohmann::json& x) { return LengthStats::Range{x.at("p5").get<std::size_t>(), x.at("p95").get<std::size_t>()}; };
  s.s = r(j.at("S"));
  s.m = r(j.at("M"));
  s.l = r(j.at("L"));
}

std::size_t percentile(std::vector<std::size_t> values, double q) {
  if (values.empty()) return 0;
  std::sort(values.begin(), values.end());
  auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(values.size())));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

}  // namespace parafill::assembly
