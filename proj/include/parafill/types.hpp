#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace parafill {

/// Bad or unusable input data (maps to CLI exit code 2).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid invocation or parameters (maps to CLI exit code 1).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SizeClass { S, M, L };

inline constexpr std::size_t kMinParagraphChars = 400;
inline constexpr std::size_t kMaxParagraphChars = 1700;

/// Half-open buckets: S = [400, 800), M = [800, 1400), L = [1400, 1700].
/// Throws DataError("unclassifiable size") outside [400, 1700].
SizeClass classify_size(std::size_t char_count);

std::string_view to_string(SizeClass c);
std::optional<SizeClass> parse_size_class(std::string_view s);

struct EntitySet {
  std::vector<std::string> persons;
  std::vector<std::string> locations;
  std::vector<std::string> organisations;
  std::vector<std::string> misc;

  bool empty() const { return persons.empty() && locations.empty() && organisations.empty() && misc.empty(); }
  std::size_t size() const { return persons.size() + locations.size() + organisations.size() + misc.size(); }
  /// All names in category order persons, locations, organisations, misc.
  std::vector<std::string> all() const;
  bool operator==(const EntitySet&) const = default;
};

/// Named summary slots. `ext1`/`ext2` are reserved for additional summarizers
/// and stay empty in this build.
struct SummarySet {
  std::vector<std::string> kw;
  std::string key_sentence;
  std::string ext1;
  std::string ext2;

  bool operator==(const SummarySet&) const = default;
};

}  // namespace parafill
