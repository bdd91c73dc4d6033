#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace cellscape {

enum class ErrorKind {
  invalid_argument,
  dimension_mismatch,
  duplicate_identifier,
  parse,
  io,
  numerical,
};

/// Base exception for everything the library throws on contract violations.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what) : Error(ErrorKind::invalid_argument, what) {}
};

/// Carries both sides of the mismatch so callers can report them.
class DimensionMismatch : public Error {
 public:
  DimensionMismatch(const std::string& what, std::size_t expected, std::size_t actual)
      : Error(ErrorKind::dimension_mismatch,
              what + " (expected " + std::to_string(expected) + ", got " + std::to_string(actual) + ")"),
        expected_(expected),
        actual_(actual) {}
  std::size_t expected() const noexcept { return expected_; }
  std::size_t actual() const noexcept { return actual_; }

 private:
  std::size_t expected_;
  std::size_t actual_;
};

class DuplicateIdentifier : public Error {
 public:
  DuplicateIdentifier(const std::string& what, std::string id)
      : Error(ErrorKind::duplicate_identifier, what + ": '" + id + "'"), id_(std::move(id)) {}
  const std::string& id() const noexcept { return id_; }

 private:
  std::string id_;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t row, std::size_t column)
      : Error(ErrorKind::parse, what + " at row " + std::to_string(row) + ", column " + std::to_string(column)),
        row_(row),
        column_(column) {}
  std::size_t row() const noexcept { return row_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t row_;
  std::size_t column_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::io, what) {}
};

/// Non-finite values or a diverged optimization.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ErrorKind::numerical, what) {}
};

/// Collects non-fatal conditions (fallbacks, skipped steps). Passing nullptr
/// wherever a WarningLog* is accepted discards them.
class WarningLog {
 public:
  void add(std::string message) { messages_.push_back(std::move(message)); }
  bool empty() const noexcept { return messages_.empty(); }
  std::size_t size() const noexcept { return messages_.size(); }
  const std::vector<std::string>& messages() const noexcept { return messages_; }
  bool contains(const std::string& needle) const {
    for (const auto& m : messages_)
      if (m.find(needle) != std::string::npos) return true;
    return false;
  }

 private:
  std::vector<std::string> messages_;
};

inline void warn(WarningLog* log, std::string message) {
  if (log) log->add(std::move(message));
}

}  // namespace cellscape
