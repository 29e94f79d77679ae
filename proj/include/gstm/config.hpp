#pragma once

// Run configuration: a flat key = value file merged with command-line
// overrides, serialized canonically so its hash can be embedded in every
// artifact (checkpoints, reports) and verified on resume.

#include "gstm/eval.hpp"

#include <string>
#include <vector>

namespace gstm::config {

struct RunConfig {
  model::ModelConfig model;
  train::TrainConfig train;
  data::SimConfig sim;
  eval::EvalOptions eval;
  std::uint64_t seed = 0;
  std::string out_dir = ".";

  // Sets one knob by key; unknown keys or unparsable values throw.
  void apply(const std::string& key, const std::string& value);
  // Canonical sorted-key JSON of every knob `apply` understands.
  std::string json() const;
  std::uint64_t hash() const;
};

// key = value per line; '#' starts a comment; blank lines ignored.
RunConfig load_config(const std::string& path);
// Each entry "key=value".
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& kv);
// Published hyperparameters: lr 5e-5, batch 64, clip 1.0.
void apply_paper_hparams(RunConfig& cfg);

}  // namespace gstm::config
