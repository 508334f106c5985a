#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>

#include "tsode/csvio.hpp"
#include "tsode/faults.hpp"

using namespace tsode;

namespace {
std::string temp_path(const char* stem) {
  return (std::filesystem::temp_directory_path() / stem).string();
}
}  // namespace

TEST_CASE("fmt round-trips doubles exactly") {
  for (double x : {0.0, 1.0, -1.5, 0.1, 1.0 / 3.0, 65.41439979268667, 1e-300, 3.14159e17}) {
    const std::string s = csvio::fmt(x);
    REQUIRE(std::strtod(s.c_str(), nullptr) == x);
  }
}

TEST_CASE("fmt prefers short forms") {
  REQUIRE(csvio::fmt(0.5) == "0.5");
  REQUIRE(csvio::fmt(120.0) == "120");
  REQUIRE(csvio::fmt(-3.0) == "-3");
}

TEST_CASE("csv round trip preserves cells") {
  csvio::Table t;
  t.header = {"name", "value", "note"};
  t.rows.push_back({"a", csvio::fmt(1.25), ""});
  t.rows.push_back({"b", csvio::fmt(-0.1), "x"});
  const std::string path = temp_path("tsode_csvio_rt.csv");
  csvio::write_csv(path, t);
  const csvio::Table back = csvio::read_csv(path);
  REQUIRE(back.header == t.header);
  REQUIRE(back.rows == t.rows);
  REQUIRE(back.col("value") == 1);
  REQUIRE(back.col("missing") == -1);
  std::remove(path.c_str());
}

TEST_CASE("split_line keeps empty fields") {
  const auto f = csvio::split_line("a,,c,");
  REQUIRE(f.size() == 4);
  REQUIRE(f[0] == "a");
  REQUIRE(f[1] == "");
  REQUIRE(f[2] == "c");
  REQUIRE(f[3] == "");
}

TEST_CASE("reading a missing file is a configuration fault") {
  REQUIRE_THROWS_AS(csvio::read_csv("/nonexistent/definitely_missing.csv"), ConfigFault);
  REQUIRE_THROWS_AS(csvio::read_text_file("/nonexistent/definitely_missing.txt"), ConfigFault);
}

TEST_CASE("text files round trip byte for byte") {
  const std::string path = temp_path("tsode_csvio_text.txt");
  const std::string content = "line1\nline2\n\ttab and trailing newline\n";
  csvio::write_text_file(path, content);
  REQUIRE(csvio::read_text_file(path) == content);
  std::remove(path.c_str());
}
