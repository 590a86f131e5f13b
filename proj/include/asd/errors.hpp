#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace asd {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Waveform shorter than one analysis window (or too few frames for stacking).
class ClipTooShortError : public Error {
 public:
  using Error::Error;
};

// Tensor geometry does not match what an operator expects.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid numeric parameter or configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or tampered file (WAV, cache, checkpoint, CSV).
class FormatError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

// Manifest problems, reported as a list so every bad line is visible at once.
class IngestError : public Error {
 public:
  explicit IngestError(std::vector<std::string> problems)
      : Error(join(problems)), problems_(std::move(problems)) {}

  const std::vector<std::string>& problems() const noexcept { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& items) {
    std::string out = "manifest ingestion failed:";
    for (const auto& item : items) {
      out += "\n  ";
      out += item;
    }
    return out;
  }

  std::vector<std::string> problems_;
};

}  // namespace asd
