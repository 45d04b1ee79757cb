#pragma once

#include <stdexcept>
#include <string>

namespace mdmt {

// Shape or index disagreement when applying a primitive.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf produced where only finite values are valid.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user input: config keys, dataset contents, CLI arguments.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// File-level failures: missing files, bad magic, checksum mismatch.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mdmt
