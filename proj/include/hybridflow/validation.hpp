#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace hf {

// Raised with the complete list of failures, not just the first one.
class ValidationError : public std::runtime_error {
 public:
  ValidationError(const std::string& context, std::vector<std::string> errors)
      : std::runtime_error(join(context, errors)), errors_(std::move(errors)) {}

  const std::vector<std::string>& errors() const { return errors_; }

 private:
  static std::string join(const std::string& context,
                          const std::vector<std::string>& errors) {
    std::string msg = context + ":";
    for (const auto& e : errors) msg += "\n  - " + e;
    return msg;
  }
  std::vector<std::string> errors_;
};

class SimulationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Collects every failure before throwing.
class Diagnostics {
 public:
  void error(std::string msg) { errors_.push_back(std::move(msg)); }
  bool ok() const { return errors_.empty(); }
  const std::vector<std::string>& errors() const { return errors_; }

  void throw_if_failed(const std::string& context) const {
    if (!ok()) throw ValidationError(context, errors_);
  }

 private:
  std::vector<std::string> errors_;
};

}  // namespace hf
