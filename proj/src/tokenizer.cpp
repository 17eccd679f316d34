#include "parafill/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <queue>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "parafill/hash.hpp"
#include "parafill/types.hpp"

namespace parafill::tokenizer {

namespace {

enum class CharClass { Space, Letter, Digit, Punct };

std::size_t utf8_width(unsigned char c) {
  if ((c & 0xE0) == 0xC0) return 2;
  if ((c & 0xF0) == 0xE0) return 3;
  if ((c & 0xF8) == 0xF0) return 4;
  return 1;
}

CharClass classify(std::string_view s, std::size_t i, std::size_t& width) {
  auto c = static_cast<unsigned char>(s[i]);
  width = std::min(utf8_width(c), s.size() - i);
  if (c < 0x80) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') return CharClass::Space;
    if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z')) return CharClass::Letter;
    if (c >= '0' && c <= '9') return CharClass::Digit;
    return CharClass::Punct;
  }
  // General punctuation (U+2000..U+206F) and Latin-1 symbols (U+00A0..U+00BF).
  if (c == 0xE2 && width == 3 && (static_cast<unsigned char>(s[i + 1]) & 0xFC) == 0x80) return CharClass::Punct;
  if (c == 0xC2 && width == 2) return CharClass::Punct;
  return CharClass::Letter;
}

std::uint64_t pair_key(TokenId a, TokenId b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}

std::string unicode_to_bytes(std::string_view u, const std::unordered_map<std::string, unsigned char>& inverse) {
  std::string out;
  std::size_t i = 0;
  while (i < u.size()) {
    std::size_t w = std::min(utf8_width(static_cast<unsigned char>(u[i])), u.size() - i);
    auto it = inverse.find(std::string(u.substr(i, w)));
    if (it == inverse.end()) throw DataError("vocab file: unmapped character");
    out.push_back(static_cast<char>(it->second));
    i += w;
  }
  return out;
}

std::string bytes_to_unicode_string(std::string_view bytes) {
  const auto& table = byte_to_unicode();
  std::string out;
  for (unsigned char c : bytes) out += table[c];
  return out;
}

}  // namespace

const std::array<std::string, 256>& byte_to_unicode() {
  static const std::array<std::string, 256> table = [] {
    std::array<std::string, 256> t;
    auto encode_cp = [](unsigned cp) {
      std::string s;
      if (cp < 0x80) {
        s.push_back(static_cast<char>(cp));
      } else {
        s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
      }
      return s;
    };
    unsigned extra = 0;
    for (unsigned b = 0; b < 256; ++b) {
      bool printable = (b >= '!' && b <= '~') || (b >= 0xA1 && b <= 0xAC) || (b >= 0xAE && b <= 0xFF);
      t[b] = encode_cp(printable ? b : 256 + extra++);
    }
    return t;
  }();
  return table;
}

std::vector<std::string_view> pretokenize(std::string_view s) {
  static constexpr std::string_view kContractions[] = {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};
  std::vector<std::string_view> out;
  std::size_t i = 0;
  const std::size_t n = s.size();
  while (i < n) {
    if (s[i] == '\'') {
      bool matched = false;
      for (auto c : kContractions) {
        if (s.substr(i, c.size()) == c) {
          out.push_back(s.substr(i, c.size()));
          i += c.size();
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    std::size_t w = 0;
    CharClass cls = classify(s, i, w);
    std::size_t j = i;
    if (s[i] == ' ' && i + 1 < n) {
      std::size_t w2 = 0;
      CharClass next = classify(s, i + 1, w2);
      if (next != CharClass::Space) {
        cls = next;
        j = i + 1;
      }
    }
    if (cls != CharClass::Space) {
      std::size_t k = j;
      while (k < n) {
        std::size_t cw = 0;
        if (classify(s, k, cw) != cls) break;
        k += cw;
      }
      out.push_back(s.substr(i, k - i));
      i = k;
      continue;
    }
    std::size_t k = i;
    while (k < n) {
      std::size_t cw = 0;
      if (classify(s, k, cw) != CharClass::Space) break;
      k += cw;
    }
    if (k < n && k - i > 1) k -= 1;  // leave the last space to lead the next word
    out.push_back(s.substr(i, k - i));
    i = k;
  }
  return out;
}

Vocab::Vocab() {
  tokens_.reserve(256);
  for (int b = 0; b < 256; ++b) tokens_.emplace_back(1, static_cast<char>(b));
}

Vocab Vocab::from_merges(const std::vector<std::pair<TokenId, TokenId>>& merges) {
  Vocab v;
  for (const auto& [a, b] : merges) {
    const auto next = static_cast<TokenId>(v.tokens_.size());
    if (a < 0 || b < 0 || a >= next || b >= next) throw DataError("merge refers to an unknown token");
    if (!v.rank_.emplace(pair_key(a, b), next).second) throw DataError("duplicate merge");
    v.tokens_.push_back(v.tokens_[static_cast<std::size_t>(a)] + v.tokens_[static_cast<std::size_t>(b)]);
    v.merges_.emplace_back(a, b);
  }
  return v;
}

std::string Vocab::token_string(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= size()) throw DataError("unknown token id " + std::to_string(id));
  if (is_special(id)) return std::string(kSpecialNames[static_cast<std::size_t>(id) - tokens_.size()]);
  return tokens_[static_cast<std::size_t>(id)];
}

void Vocab::encode_chunk(std::string_view chunk, TokenSeq& out) const {
  TokenSeq sym;
  sym.reserve(chunk.size());
  for (unsigned char c : chunk) sym.push_back(static_cast<TokenId>(c));
  while (sym.size() > 1) {
    TokenId best = -1;
    for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
      auto it = rank_.find(pair_key(sym[i], sym[i + 1]));
      if (it != rank_.end() && (best < 0 || it->second < best)) best = it->second;
    }
    if (best < 0) break;
    const auto& [a, b] = merges_[static_cast<std::size_t>(best) - 256];
    std::size_t w = 0;
    for (std::size_t r = 0; r < sym.size(); ++r) {
      if (r + 1 < sym.size() && sym[r] == a && sym[r + 1] == b) {
        sym[w++] = best;
        ++r;
      } else {
        sym[w++] = sym[r];
      }
    }
    sym.resize(w);
  }
  out.insert(out.end(), sym.begin(), sym.end());
}

TokenSeq Vocab::encode(std::string_view text) const {
  TokenSeq out;
  out.reserve(text.size() / 3 + 1);
  for (auto chunk : pretokenize(text)) encode_chunk(chunk, out);
  return out;
}

std::string Vocab::decode(const TokenSeq& ids, bool skip_specials) const {
  std::string out;
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= size()) throw DataError("unknown token id " + std::to_string(id));
    if (is_special(id)) {
      if (!skip_specials) out += kSpecialNames[static_cast<std::size_t>(id) - tokens_.size()];
      continue;
    }
    out += tokens_[static_cast<std::size_t>(id)];
  }
  return out;
}

namespace {

std::string merges_text(const Vocab& v) {
  std::string out = "#version: 0.2\n";
  for (const auto& [a, b] : v.merges()) {
    out += bytes_to_unicode_string(v.token_string(a));
    out.push_back(' ');
    out += bytes_to_unicode_string(v.token_string(b));
    out.push_back('\n');
  }
  return out;
}

}  // namespace

void Vocab::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "merges.txt", merges_text(*this));
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (std::size_t id = 0; id < size(); ++id) {
    const auto tid = static_cast<TokenId>(id);
    j[is_special(tid) ? token_string(tid) : bytes_to_unicode_string(tokens_[id])] = id;
  }
  write_file_atomic(dir / "vocab.json", j.dump(1));
}

Vocab Vocab::load(const std::filesystem::path& dir) {
  std::unordered_map<std::string, unsigned char> inverse;
  const auto& table = byte_to_unicode();
  for (int b = 0; b < 256; ++b) inverse[table[static_cast<std::size_t>(b)]] = static_cast<unsigned char>(b);

  std::istringstream in(read_file(dir / "merges.txt"));
  std::unordered_map<std::string, TokenId> by_bytes;
  for (int b = 0; b < 256; ++b) by_bytes[std::string(1, static_cast<char>(b))] = b;
  std::vector<std::pair<TokenId, TokenId>> merges;
  std::string line;
  TokenId next = 256;
  while (std::getline(in, line)) {
    if (line.empty() || line.rfind("#version", 0) == 0) continue;
    auto sp = line.find(' ');
    if (sp == std::string::npos) throw DataError("merges.txt: malformed line");
    std::string left = unicode_to_bytes(std::string_view(line).substr(0, sp), inverse);
    std::string right = unicode_to_bytes(std::string_view(line).substr(sp + 1), inverse);
    auto l = by_bytes.find(left);
    auto r = by_bytes.find(right);
    if (l == by_bytes.end() || r == by_bytes.end()) throw DataError("merges.txt: merge refers to an unknown token");
    merges.emplace_back(l->second, r->second);
    by_bytes.emplace(left + right, next++);
  }
  Vocab v = from_merges(merges);

  auto j = nlohmann::json::parse(read_file(dir / "vocab.json"));
  if (j.size() != v.size()) throw DataError("vocab.json size does not match merges.txt");
  for (std::size_t id = 0; id < v.size(); ++id) {
    const auto tid = static_cast<TokenId>(id);
    std::string key = v.is_special(tid) ? v.token_string(tid) : bytes_to_unicode_string(v.tokens_[id]);
    auto it = j.find(key);
    if (it == j.end() || it->get<std::size_t>() != id) throw DataError("vocab.json disagrees with merges.txt");
  }
  return v;
}

std::string Vocab::hash() const {
  std::string payload = merges_text(*this);
  for (auto name : kSpecialNames) {
    payload += name;
    payload.push_back('\n');
  }
  return sha256_hex(payload);
}

Vocab train_bpe(const std::vector<std::string>& corpus, const TrainConfig& config) {
  if (config.target_vocab < 256 + kNumSpecials) {
    throw UsageError("target vocab must be at least " + std::to_string(256 + kNumSpecials));
  }
  std::unordered_map<std::string, std::int64_t> word_counts;
  for (const auto& text : corpus) {
    for (auto chunk : pretokenize(text)) ++word_counts[std::string(chunk)];
  }
  if (word_counts.empty()) throw DataError("empty corpus");

  // Sorted for deterministic iteration.
  std::vector<std::pair<std::string, std::int64_t>> sorted(word_counts.begin(), word_counts.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<TokenSeq> words;
  std::vector<std::int64_t> counts;
  for (auto& [w, c] : sorted) {
    TokenSeq s;
    for (unsigned char ch : w) s.push_back(static_cast<TokenId>(ch));
    words.push_back(std::move(s));
    counts.push_back(c);
  }

  std::vector<std::string> strings;
  for (int b = 0; b < 256; ++b) strings.emplace_back(1, static_cast<char>(b));
  std::unordered_set<std::string> specials;
  for (auto name : kSpecialNames) specials.emplace(name);

  std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> where;
  for (std::uint32_t w = 0; w < words.size(); ++w) {
    for (std::size_t i = 0; i + 1 < words[w].size(); ++i) {
      auto k = pair_key(words[w][i], words[w][i + 1]);
      pair_counts[k] += counts[w];
      where[k].push_back(w);
    }
  }

  struct Entry {
    std::int64_t count;
    std::uint64_t key;
  };
  auto worse = [&](const Entry& x, const Entry& y) {
    if (x.count != y.count) return x.count < y.count;
    const auto& xa = strings[x.key >> 32];
    const auto& ya = strings[y.key >> 32];
    if (xa != ya) return xa > ya;
    return strings[x.key & 0xFFFFFFFFu] > strings[y.key & 0xFFFFFFFFu];
  };
  std::priority_queue<Entry, std::vector<Entry>, decltype(worse)> heap(worse);
  for (const auto& [k, c] : pair_counts) heap.push({c, k});

  std::vector<std::pair<TokenId, TokenId>> merges;
  const std::size_t max_merges = config.target_vocab - 256 - kNumSpecials;
  std::vector<std::uint32_t> last_visit(words.size(), UINT32_MAX);
  while (merges.size() < max_merges && !heap.empty()) {
    Entry top = heap.top();
    heap.pop();
    auto it = pair_counts.find(top.key);
    if (it == pair_counts.end() || it->second != top.count || top.count <= 0) continue;
    const auto a = static_cast<TokenId>(top.key >> 32);
    const auto b = static_cast<TokenId>(top.key & 0xFFFFFFFFu);
    std::string merged = strings[static_cast<std::size_t>(a)] + strings[static_cast<std::size_t>(b)];
    if (specials.count(merged)) {
      pair_counts.erase(it);
      continue;
    }
    const auto id = static_cast<TokenId>(strings.size());
    strings.push_back(std::move(merged));
    merges.emplace_back(a, b);

    std::unordered_set<std::uint64_t> touched;
    const auto visit = static_cast<std::uint32_t>(merges.size());
    auto affected = std::move(where[top.key]);
    where.erase(top.key);
    for (std::uint32_t w : affected) {
      if (last_visit[w] == visit) continue;
      last_visit[w] = visit;
      auto& sym = words[w];
      bool has = false;
      for (std::size_t i = 0; i + 1 < sym.size() && !has; ++i) has = sym[i] == a && sym[i + 1] == b;
      if (!has) continue;
      for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
        auto k = pair_key(sym[i], sym[i + 1]);
        pair_counts[k] -= counts[w];
        touched.insert(k);
      }
      std::size_t out = 0;
      for (std::size_t r = 0; r < sym.size(); ++r) {
        if (r + 1 < sym.size() && sym[r] == a && sym[r + 1] == b) {
          sym[out++] = id;
          ++r;
        } else {
          sym[out++] = sym[r];
        }
      }
      sym.resize(out);
      for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
        auto k = pair_key(sym[i], sym[i + 1]);
        pair_counts[k] += counts[w];
        touched.insert(k);
        if (sym[i] == id || sym[i + 1] == id) where[k].push_back(w);
      }
    }
    for (auto k : touched) {
      auto pc = pair_counts.find(k);
      if (pc == pair_counts.end()) continue;
      if (pc->second <= 0) {
        pair_counts.erase(pc);
      } else if (k != top.key) {
        heap.push({pc->second, k});
      }
    }
    pair_counts.erase(top.key);
  }
  return Vocab::from_merges(merges);
}

}  // namespace parafill::tokenizer
