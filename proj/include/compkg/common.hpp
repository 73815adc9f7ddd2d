#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace compkg {

// Error taxonomy. The CLI maps these onto exit codes:
// UsageError -> 1, DataError (and subclasses) -> 2, BackendError -> 3.

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input line; carries the 1-based line number and source file.
class ParseError : public DataError {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using EntityId = std::string;
using ItemId = std::string;
using UserId = std::string;

/// Calendar day as days since 1970-01-01.
using Day = std::int64_t;

constexpr std::int64_t kSecondsPerDay = 86400;

inline Day day_of(std::int64_t epoch_seconds) {
  // floor division so negative timestamps land on the right day
  return epoch_seconds >= 0 ? epoch_seconds / kSecondsPerDay
                            : -((-epoch_seconds + kSecondsPerDay - 1) / kSecondsPerDay);
}

std::string format_day(Day day);               // "YYYY-MM-DD"
Day parse_day(std::string_view text);          // throws DataError

// Text helpers.
std::vector<std::string> split(std::string_view s, char sep);
std::string_view trim(std::string_view s);
std::string to_lower_ascii(std::string_view s);
double parse_double(std::string_view s, const std::string& what);
std::int64_t parse_int(std::string_view s, const std::string& what);
std::string format_double(double v);           // shortest round-trip form

/// FNV-1a 64-bit.
std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 14695981039346656037ULL);
std::string hex64(std::uint64_t v);

std::string read_file(const std::filesystem::path& path);

/// Writes via a sibling temp file and rename, so readers never see partial content.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

/// Reads non-empty, non-comment lines; `fn(line_number, line)`.
template <typename Fn>
void for_each_record(const std::string& content, Fn&& fn) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= content.size()) {
    std::size_t end = content.find('\n', pos);
    if (end == std::string::npos) end = content.size();
    ++line_no;
    std::string_view line(content.data() + pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!trim(line).empty() && line.front() != '#') fn(line_no, line);
    if (end == content.size()) break;
    pos = end + 1;
  }
}

/// Unbiased integer in [0, bound) from a 64-bit engine; portable across
/// standard libraries, unlike std::uniform_int_distribution.
std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound);
/// Uniform real in [0, 1) using the top 53 bits.
double uniform01(std::mt19937_64& rng);

/// Derives a named sub-seed so independent stages draw independent streams.
std::uint64_t sub_seed(std::uint64_t seed, std::string_view name);

}  // namespace compkg
