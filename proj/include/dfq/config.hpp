// SPDX-License-Identifier: Apache-2.0
/**
 * @file   config.hpp
 * @brief  Sectioned key/value (INI) configuration for every lab command.
 */
#pragma once

#include <dfq/distill.hpp>
#include <dfq/synthesis.hpp>
#include <dfq/toy_shapes.hpp>

#include <filesystem>
#include <stdexcept>

namespace dfq {

/// Malformed configuration; `key()` is the dotted offending key.
class ConfigError : public std::runtime_error {
public:
  ConfigError(std::string key, const std::string &why)
      : std::runtime_error("config key '" + key + "': " + why),
        key_(std::move(key)) {}
  const std::string &key() const { return key_; }

private:
  std::string key_;
};

struct MotivConfig {
  double fraction = 0.25;  ///< subset size as a fraction of the pool
  std::size_t seeds = 3;
  std::size_t pool = 512;  ///< images synthesized per pool
};

struct SweepConfig {
  std::vector<int> bits{4, 6, 8};
  std::size_t seeds = 3;
};

struct LabConfig {
  std::uint64_t seed = 0;
  ToyShapesConfig data;
  ViTConfig vit;
  OptimizerConfig teacher;
  SynthConfig synth;
  DistillConfig distill;
  CorrStudyConfig corr;
  MotivConfig motiv;
  SweepConfig sweep;
  /// Held-out images reserved for checkpoint selection; the remainder is
  /// only ever used for reported accuracies.
  std::size_t select_images = 0;

  /// Derives every component seed from `seed`.
  void reseed(std::uint64_t s);
};

/// Desk-scale defaults: fast enough for a single CPU core.
LabConfig default_lab_config();

LabConfig parse_config(std::string_view ini, LabConfig base = default_lab_config());
LabConfig load_config(const std::filesystem::path &path,
                      LabConfig base = default_lab_config());
/// Complete effective configuration; parse_config(to_ini(c)) == c.
std::string to_ini(const LabConfig &c);

std::string vit_to_ini(const ViTConfig &c);
ViTConfig vit_from_ini(std::string_view ini);

} // namespace dfq
