#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace parafill::tokenizer {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

enum class Special : int { P1, P2, P3, Sum, Theme, Ent, S, M, L, Eos, Pad };
inline constexpr int kNumSpecials = 11;
inline constexpr std::array<std::string_view, kNumSpecials> kSpecialNames = {
    "[P1]", "[P2]", "[P3]", "[Sum]", "[T]", "[Ent]", "[S]", "[M]", "[L]", "<|endoftext|>", "<pad>"};

/// Splits text into pre-tokenization chunks (GPT-2 style: contractions,
/// optional leading space plus a run of letters, digits or punctuation, and
/// whitespace runs). Merges never cross chunk boundaries. Concatenating the
/// chunks gives back the input.
std::vector<std::string_view> pretokenize(std::string_view text);

/// Byte-level BPE vocabulary. Ids 0..255 are raw bytes, then one id per
/// merge in rank order, then the special tokens at the top of the id space.
class Vocab {
 public:
  Vocab();  // pure byte vocabulary, no merges

  static Vocab from_merges(const std::vector<std::pair<TokenId, TokenId>>& merges);

  std::size_t size() const { return tokens_.size() + kNumSpecials; }
  std::size_t num_merges() const { return merges_.size(); }
  const std::vector<std::pair<TokenId, TokenId>>& merges() const { return merges_; }

  TokenId special(Special s) const { return static_cast<TokenId>(tokens_.size()) + static_cast<int>(s); }
  bool is_special(TokenId id) const { return id >= static_cast<TokenId>(tokens_.size()) && id < static_cast<TokenId>(size()); }

  /// Byte string of a non-special token, or the special's name.
  std::string token_string(TokenId id) const;

  TokenSeq encode(std::string_view text) const;
  std::string decode(const TokenSeq& ids, bool skip_specials = false) const;

  /// Writes `merges.txt` and `vocab.json` into `dir`.
  void save(const std::filesystem::path& dir) const;
  static Vocab load(const std::filesystem::path& dir);

  /// SHA-256 over the serialized merge list; identifies the vocabulary in
  /// checkpoints.
  std::string hash() const;

 private:
  void encode_chunk(std::string_view chunk, TokenSeq& out) const;

  std::vector<std::pair<TokenId, TokenId>> merges_;
  std::vector<std::string> tokens_;  // bytes of each non-special id
  std::unordered_map<std::uint64_t, TokenId> rank_;  // (left,right) -> merged id
};

struct TrainConfig {
  std::size_t target_vocab = 8192;
};

/// Learns merges until the vocabulary (including specials) reaches
/// `target_vocab` or no adjacent pair is left. The most frequent pair wins;
/// ties go to the lexicographically smallest (left bytes, right bytes).
/// Throws DataError on an empty corpus and UsageError when the target is
/// below 256 + specials.
Vocab train_bpe(const std::vector<std::string>& corpus, const TrainConfig& config = {});

/// GPT-2's printable byte <-> code point mapping used in the vocab files.
const std::array<std::string, 256>& byte_to_unicode();

}  // namespace parafill::tokenizer
