#include <doctest.h>

#include <random>
#include <set>

#include "compkg/common.hpp"
#include "support.hpp"

using namespace compkg;

TEST_CASE("day arithmetic") {
  CHECK(parse_day("1970-01-01") == 0);
  CHECK(parse_day("2024-01-01") == 19723);
  CHECK(parse_day("2000-03-01") == 11017);
  CHECK(format_day(19723) == "2024-01-01");
  CHECK(day_of(-1) == -1);
  CHECK(day_of(0) == 0);
  CHECK(day_of(kSecondsPerDay - 1) == 0);
  CHECK_THROWS_AS(parse_day("2024-13-01"), DataError);
  CHECK_THROWS_AS(parse_day("2024-02-30"), DataError);
  CHECK_THROWS_AS(parse_day("yesterday"), DataError);
  for (Day d = -800; d < 40000; d += 37) CHECK(parse_day(format_day(d)) == d);
}

TEST_CASE("text helpers") {
  CHECK(split("a,,b", ',') == std::vector<std::string>{"a", "", "b"});
  CHECK(split("", ',') == std::vector<std::string>{""});
  CHECK(trim("  x y \t") == "x y");
  CHECK(to_lower_ascii("CoLa") == "cola");
  CHECK(parse_int("-42", "n") == -42);
  CHECK_THROWS_AS(parse_int("4x", "n"), DataError);
  CHECK_THROWS_AS(parse_double("nan?", "x"), DataError);
}

TEST_CASE("format_double round-trips") {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 2000; ++k) {
    const double v = (uniform01(rng) - 0.5) * std::pow(10.0, double(int(uniform_below(rng, 30)) - 15));
    CHECK(parse_double(format_double(v), "v") == v);
  }
}

TEST_CASE("fnv1a64 reference vectors") {
  CHECK(hex64(fnv1a64("")) == "cbf29ce484222325");
  CHECK(hex64(fnv1a64("a")) == "af63dc4c8601ec8c");
  CHECK(hex64(fnv1a64("foobar")) == "85944171f73967e8");
}

TEST_CASE("uniform_below stays in range and covers it") {
  std::mt19937_64 rng(11);
  std::vector<int> seen(7, 0);
  for (int k = 0; k < 7000; ++k) {
    const auto v = uniform_below(rng, 7);
    REQUIRE(v < 7);
    ++seen[v];
  }
  // Each bucket expects 1000; 5 sigma is about 150.
  for (int c : seen) CHECK(std::abs(c - 1000) < 150);
  for (int k = 0; k < 1000; ++k) {
    const double u = uniform01(rng);
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("sub_seed separates streams") {
  std::set<std::uint64_t> seeds;
  for (const char* n : {"a", "b", "train", "synth", "rank"}) seeds.insert(sub_seed(1, n));
  CHECK(seeds.size() == 5);
  CHECK(sub_seed(1, "x") == sub_seed(1, "x"));
  CHECK(sub_seed(1, "x") != sub_seed(2, "x"));
}

TEST_CASE("records skip blanks and comments, tolerate CRLF") {
  std::vector<std::pair<std::size_t, std::string>> got;
  for_each_record("a\r\n\n# c\n  \nb", [&](std::size_t l, std::string_view t) { got.emplace_back(l, t); });
  REQUIRE(got.size() == 2);
  CHECK(got[0] == std::pair<std::size_t, std::string>{1, "a"});
  CHECK(got[1] == std::pair<std::size_t, std::string>{5, "b"});
}

TEST_CASE("atomic write replaces content without leftovers") {
  testing::TempDir dir;
  const auto p = dir / "f.txt";
  write_file_atomic(p, "one");
  write_file_atomic(p, "two");
  CHECK(read_file(p) == "two");
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path())) ++files;
  CHECK(files == 1);
  CHECK_THROWS_AS(read_file(dir / "missing"), DataError);
}

TEST_CASE("parse errors carry source and line") {
  try {
    throw ParseError("items.tsv", 7, "bad field");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("items.tsv:7") != std::string::npos);
  }
}
