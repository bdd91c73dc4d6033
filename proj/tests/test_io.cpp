#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <limits>

#include "cellscape/error.hpp"
#include "cellscape/io.hpp"

using namespace cellscape;

TEST_CASE("csv splitting trims fields and keeps empties") {
  CHECK(io::split_csv(" a, b ,c") == std::vector<std::string>{"a", "b", "c"});
  CHECK(io::split_csv("a,,b") == std::vector<std::string>{"a", "", "b"});
  CHECK(io::split_ws("  1\t2   3 ") == std::vector<std::string>{"1", "2", "3"});
}

TEST_CASE("number parsing reports row and column") {
  CHECK(io::parse_double("2.5", 1, 1) == 2.5);
  CHECK(io::parse_double("-1e-3", 1, 1) == -1e-3);
  try {
    io::parse_double("abc", 4, 7);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.row() == 4);
    CHECK(e.column() == 7);
  }
  CHECK_THROWS_AS(io::parse_double("nan", 1, 1), ParseError);
  CHECK_THROWS_AS(io::parse_double("1.0x", 1, 1), ParseError);
  CHECK(io::parse_int("42", 1, 1) == 42);
  CHECK_THROWS_AS(io::parse_int("4.2", 1, 1), ParseError);
  double v = 0;
  CHECK(io::try_parse_double("3", v));
  CHECK(v == 3.0);
  CHECK_FALSE(io::try_parse_double("x", v));
}

TEST_CASE("format_double round-trips") {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 12345678.9, 0.0}) {
    const auto s = io::format_double(v);
    CHECK(io::parse_double(s, 1, 1) == v);
  }
}

TEST_CASE("text files round-trip and missing files raise IoError") {
  const auto dir = std::filesystem::temp_directory_path() / "cellscape_io_test" / "nested";
  io::write_text(dir / "f.txt", "a\r\nb\n");
  const auto lines = io::read_lines(dir / "f.txt");
  CHECK(lines == std::vector<std::string>{"a", "b"});
  std::filesystem::remove_all(dir.parent_path());
  CHECK_THROWS_AS(io::read_lines(dir / "missing.txt"), IoError);
}
