#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace bnfl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incongruent shapes, parameter layouts or caches.
class StructuralError : public Error {
 public:
  using Error::Error;
};

/// A normalizing batch with fewer than two samples.
class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value. `field()` names the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& message, std::optional<std::size_t> line = std::nullopt)
      : Error(format(field, message, line)), field_(std::move(field)), line_(line) {}

  const std::string& field() const noexcept { return field_; }
  std::optional<std::size_t> line() const noexcept { return line_; }

 private:
  static std::string format(const std::string& field, const std::string& message, std::optional<std::size_t> line) {
    std::string out = "config error";
    if (line) out += " at line " + std::to_string(*line);
    if (!field.empty()) out += " [" + field + "]";
    return out + ": " + message;
  }

  std::string field_;
  std::optional<std::size_t> line_;
};

/// Non-finite parameters after a local step.
class DivergenceError : public Error {
 public:
  DivergenceError(std::int64_t step, std::optional<std::size_t> client = std::nullopt,
                  std::optional<std::int64_t> round = std::nullopt)
      : Error(format(step, client, round)), step_(step), client_(client), round_(round) {}

  std::int64_t step() const noexcept { return step_; }
  std::optional<std::size_t> client() const noexcept { return client_; }
  std::optional<std::int64_t> round() const noexcept { return round_; }

 private:
  static std::string format(std::int64_t step, std::optional<std::size_t> client, std::optional<std::int64_t> round) {
    std::string out = "divergence: non-finite parameters after local step " + std::to_string(step);
    if (client) out += " on client " + std::to_string(*client);
    if (round) out += " in round " + std::to_string(*round);
    return out;
  }

  std::int64_t step_;
  std::optional<std::size_t> client_;
  std::optional<std::int64_t> round_;
};

/// Malformed on-disk data. `offset()` is the byte position where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& message, std::uint64_t offset)
      : Error(message + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Oracle gates failed before an experiment. `failed()` lists the checks.
class GateError : public Error {
 public:
  explicit GateError(std::vector<std::string> failed) : Error(format(failed)), failed_(std::move(failed)) {}

  const std::vector<std::string>& failed() const noexcept { return failed_; }

 private:
  static std::string format(const std::vector<std::string>& failed) {
    std::string out = "oracle gates failed:";
    for (const auto& f : failed) out += " " + f;
    return out;
  }

  std::vector<std::string> failed_;
};

}  // namespace bnfl
