#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "traject/evaluation.hpp"
#include "traject/model.hpp"
#include "traject/synthcohort.hpp"
#include "traject/training.hpp"

namespace traject {

// Flat `key=value` configuration. Blank lines and lines starting with '#' are
// ignored; surrounding whitespace is trimmed.
class FlatConfig {
 public:
  static FlatConfig parse(std::istream& in);
  static FlatConfig load(const std::string& path);

  void set(const std::string& key, const std::string& value) { entries_[key] = value; }
  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return entries_; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  int get_int(const std::string& key, int fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<std::uint64_t> get_u64_list(const std::string& key,
                                          const std::vector<std::uint64_t>& fallback) const;

  void write(std::ostream& out) const;  // sorted by key

 private:
  std::map<std::string, std::string> entries_;
};

std::string format_double(double v);  // shortest round-trip representation

// Everything a run needs, with defaults for absent keys.
struct Settings {
  GeneratorConfig synth;
  std::uint64_t synth_seed = 7;
  std::vector<std::uint64_t> synth_seeds{1, 2, 3, 4, 5};
  ModelConfig model;
  TrainConfig train;
  MaskingConfig masking;
  LogregConfig logreg;
  std::size_t folds = 5;
  std::uint64_t cv_seed = 0;
  std::size_t min_count = 1;

  ExperimentConfig experiment(std::size_t threads) const;
};

// Throws ConfigError naming the offending key for unknown keys or bad values.
Settings read_settings(const FlatConfig& flat);
FlatConfig to_flat(const Settings& settings);

ModelConfig read_model_config(const FlatConfig& flat);
void store_model_config(const ModelConfig& cfg, FlatConfig& flat);
void store_generator_config(const GeneratorConfig& cfg, FlatConfig& flat);

}  // namespace traject
