#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "parafill/tokenizer.hpp"
#include "parafill/types.hpp"

namespace parafill::assembly {

using tokenizer::TokenId;
using tokenizer::TokenSeq;

enum class Segment : std::uint8_t { P1 = 0, P2 = 1, P3 = 2, Sum = 3, Theme = 4, Ent = 5, Size = 6 };
inline constexpr int kNumSegments = 7;

/// Input layout. `Conditioned` is the full control format; `Plain` keeps
/// only "[P1] P1 [P2] P2 <eos>" and is used for the unconditioned baseline,
/// which is trained with loss on every token.
enum class Format { Conditioned, Plain };

struct Sections {
  TokenSeq p1;
  TokenSeq p2;
  TokenSeq p3;
  TokenSeq summary;
  TokenSeq theme;
  TokenSeq entities;
  SizeClass size = SizeClass::S;
};

struct TrainingSample {
  TokenSeq ids;                        // block_size long, right padded
  std::vector<std::uint8_t> segments;  // per position
  std::vector<std::uint8_t> loss_mask; // true on P2 content and the final eos
  std::size_t attention_len = 0;       // non-pad positions
};

struct GenerationPrefix {
  TokenSeq ids;  // ends with [P2]
  std::vector<std::uint8_t> segments;
  std::size_t reserved = 0;  // free positions left for P2
  std::size_t p1_kept = 0;
  std::size_t p3_kept = 0;
};

struct Truncated {
  TokenSeq p1;
  TokenSeq p3;
};

/// P1 keeps its suffix and P3 its prefix. P1 gets floor(2r/3) of the
/// `remaining` positions, P3 the rest; a side that needs less than its share
/// passes the surplus to the other.
Truncated truncate_context(const TokenSeq& p1, const TokenSeq& p3, std::size_t remaining);

/// Number of positions used by everything except P1, P2 and P3 content.
std::size_t fixed_length(const Sections& s, Format format);

/// Throws DataError("sample dropped: P2 exceeds budget") when P2 cannot fit
/// even with empty context.
TrainingSample build_training_sample(const Sections& s, const tokenizer::Vocab& vocab, std::size_t block_size,
                                     Format format = Format::Conditioned);

/// Same layout as the training sample up to and including [P2]. Throws
/// DataError("context too large") when the fixed part plus `reserve` does not
/// fit the block.
GenerationPrefix build_generation_prefix(const Sections& s, const tokenizer::Vocab& vocab, std::size_t block_size,
                                         std::size_t reserve, Format format = Format::Conditioned);

/// Deterministic per-sample stream derived from (seed, book, paragraph, epoch).
std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t book, std::uint64_t paragraph, std::uint64_t epoch);

/// Text of one non-empty summary slot chosen uniformly, or an empty string
/// when every slot is empty. Keyword lists are joined with ", ".
std::string choose_summary(const SummarySet& s, std::mt19937_64& rng);

/// Names joined by ", " in category order persons, locations, organisations,
/// misc.
std::string entities_text(const EntitySet& e);

/// One JSON line {ids, segments, mask} for golden tests and debugging.
nlohmann::json dump_sample(const TrainingSample& s);

/// Per-class P2 token length percentiles measured on the training corpus.
struct LengthStats {
  struct Range {
    std::size_t p5 = 0;
    std::size_t p95 = 0;
  };
  Range s;
  Range m;
  Range l;

  const Range& of(SizeClass c) const;
  /// Bounds that do not depend on the requested class: from the smallest
  /// class's p5 to the largest class's p95.
  Range any() const { return {s.p5, l.p95}; }
};

void to_json(nlohmann::json& j, const LengthStats& s);
void from_json(const nlohmann::json& j, LengthStats& s);

/// Nearest-rank percentile of an unsorted sample (q in [0,100]).
std::size_t percentile(std::vector<std::size_t> values, double q);

}  // namespace parafill::assembly
