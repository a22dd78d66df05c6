#pragma once

#include <stdexcept>
#include <string>

namespace xcoder {

// Caller handed us something malformed (bad shape, bad index, bad argument).
struct InvalidInputError : std::runtime_error {
  explicit InvalidInputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Content-level inconsistency discovered while checking files or configs
// against each other (manifest vs shard, checksum mismatch, d_model drift).
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Unrecognized magic / version / dtype in a binary container.
struct FormatError : ValidationError {
  explicit FormatError(const std::string& msg) : ValidationError(msg) {}
};

// File shorter or longer than its header promises.
struct CorruptionError : ValidationError {
  explicit CorruptionError(const std::string& msg) : ValidationError(msg) {}
};

// OS-level I/O failure (open, read, write).
struct StorageError : std::runtime_error {
  explicit StorageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite ones are required.
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training diverged; carries the step at which the loss went non-finite.
struct TrainingError : NumericalError {
  TrainingError(const std::string& msg, long step)
      : NumericalError(msg + " (step " + std::to_string(step) + ")"), step(step) {}
  long step;
};

}  // namespace xcoder
