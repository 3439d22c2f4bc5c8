#pragma once

// Flat `key = value` experiment configuration with dotted namespaces.
// Precedence: command-line overrides > config file > built-in defaults.
// Unknown keys are rejected so typos cannot silently fall back to defaults.
// Every artifact-producing command echoes the fully resolved map.

#include <map>
#include <string>
#include <vector>

#include "pdt/common.hpp"
#include "pdt/train.hpp"

namespace pdt {

struct KeySpec {
  const char* name;
  const char* def;
  const char* help;
};

class RunConfig {
 public:
  static const std::vector<KeySpec>& known_keys();

  // `file` may be empty; overrides are "key=value" strings.
  static RunConfig load(const std::string& file, const std::vector<std::string>& overrides);

  const std::string& str(const std::string& key) const;
  int64_t i64(const std::string& key) const;
  uint64_t u64(const std::string& key) const;
  double f64(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<int64_t> i64_list(const std::string& key) const;
  std::vector<double> f64_list(const std::string& key) const;
  std::vector<std::string> str_list(const std::string& key) const;

  // Sorted `key = value` lines of the resolved configuration.
  std::string echo() const;

  // Assembled module configs.
  TrainConfig train_config(Phase phase) const;
  EvalProtocol eval_protocol() const;
  FormatSpec format_spec() const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace pdt
