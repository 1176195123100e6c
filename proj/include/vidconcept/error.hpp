#pragma once

#include <stdexcept>
#include <string>

namespace vidconcept {

// Base of every error raised by the library. Messages are prefixed with the
// module that raised them so the CLI can surface them unchanged.
class Error : public std::runtime_error {
 public:
  Error(const std::string& module, const std::string& what)
      : std::runtime_error(module + ": " + what), module_(module) {}
  const std::string& module() const noexcept { return module_; }

 private:
  std::string module_;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

// Zero-norm vectors or prototypes where a direction is required.
class DegenerateInput : public Error {
 public:
  using Error::Error;
};

class InvalidSplit : public Error {
 public:
  using Error::Error;
};

// Non-finite loss during optimization. `dump_path` points at the diagnostic
// record written before the exception was raised (may be empty).
class TrainingDivergence : public Error {
 public:
  TrainingDivergence(const std::string& what, std::string dump_path)
      : Error("trainer", what), dump_path_(std::move(dump_path)) {}
  const std::string& dump_path() const noexcept { return dump_path_; }

 private:
  std::string dump_path_;
};

class ConfigError : public Error {
 public:
  ConfigError(const std::string& key, const std::string& what)
      : Error("config", key.empty() ? what : key + ": " + what), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace vidconcept
