#pragma once

// Multi-task objective assembly, AdamW with decoupled weight decay, cosine
// learning-rate schedule, global-norm clipping, optional spectral
// normalization of head maps, checkpointing and step metrics.

#include "gstm/model.hpp"

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace gstm::train {

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& what)
      : std::runtime_error(what) {}
};

struct LossWeights {
  double loc = 1.0;
  double ot = 0.1;
  double time = 1.0;
  double user = 1.0;
  double nhp = 0.1;
  double ent = 0.01;
  double reg = 0.0;

  void validate() const;
};

// One training example: a non-empty prefix and the next event to predict.
struct Example {
  std::vector<data::CheckInEvent> prefix;
  data::CheckInEvent target;
  int user = -1;
};

struct LossBreakdown {
  std::map<std::string, double> terms;  // unweighted per-term values
  double total = 0.0;
};

// L = loc*CE + ot*L_OT + time*(NLL + CRPS + DSM) + user*(CE_u + supcon)
//   + nhp*L_NHP + ent*L_ent + reg*R. Throws NumericalError naming the first
// term that produces a non-finite value.
ad::Var total_loss(model::Model& m, const std::vector<Example>& batch,
                   const LossWeights& w, const model::AblationFlags& flags,
                   std::uint64_t dsm_seed, LossBreakdown* breakdown = nullptr,
                   int ot_max_iters = 200,
                   Eigen::MatrixXd* betas_out = nullptr);

// Linear warmup (fraction of total) then cosine decay to zero.
double cosine_lr(long step, long total_steps, double base_lr,
                 double warmup_frac = 0.05);

// Top singular value by power iteration.
double spectral_norm_estimate(const Eigen::MatrixXd& W, int power_iters = 3);
// W / sigma(W); a zero matrix is returned unchanged.
Eigen::MatrixXd spectral_norm(const Eigen::MatrixXd& W, int power_iters = 3);

struct OptimConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

class AdamW {
 public:
  AdamW(ad::ParamStore& store, OptimConfig cfg);

  // Clips grads to the global norm, then applies one bias-corrected update
  // with decoupled weight decay on trainable, non-frozen params.
  void step(const std::map<std::string, Eigen::MatrixXd>& grads, double lr);

  long step_count() const { return t_; }
  const OptimConfig& config() const { return cfg_; }
  std::map<std::string, Eigen::MatrixXd>& first_moments() { return m_; }
  std::map<std::string, Eigen::MatrixXd>& second_moments() { return v_; }
  void set_step_count(long t) { t_ = t; }

 private:
  ad::ParamStore* store_;
  OptimConfig cfg_;
  long t_ = 0;
  std::map<std::string, Eigen::MatrixXd> m_, v_;
};

// ---------------------------------------------------------------------------
// Checkpoints: magic "GSTM1", version, config echo + hash, named tensors,
// optimizer state, RNG state; everything little-endian binary.

void save_checkpoint(const std::string& path, const ad::ParamStore& store,
                     const AdamW* optim, const std::string& config_json,
                     std::uint64_t config_hash, std::uint64_t rng_state);
struct CheckpointInfo {
  std::string config_json;
  std::uint64_t config_hash = 0;
  std::uint64_t rng_state = 0;
  bool had_optimizer = false;
};
// Loads tensor values into matching params; unknown or shape-mismatched
// names throw.
CheckpointInfo load_checkpoint(const std::string& path, ad::ParamStore& store,
                               AdamW* optim);

// One JSON-lines metrics record.
std::string metrics_line(long step, double lr, const LossBreakdown& b);

// FNV-1a over a string (config hashing).
std::uint64_t fnv1a(const std::string& s);

// ---------------------------------------------------------------------------
// Batch trainer

struct TrainConfig {
  long steps = 5000;
  int batch = 8;
  int min_prefix = 2;
  int max_prefix = 16;
  LossWeights weights;
  OptimConfig optim;
  double warmup_frac = 0.05;
  std::uint64_t seed = 0;
  model::AblationFlags flags;
  int ot_max_iters = 60;
  std::string metrics_path;  // empty disables the JSONL stream
  int log_every = 50;
};

class Trainer {
 public:
  Trainer(model::Model& m, const data::Dataset& corpus, TrainConfig cfg);

  struct StepResult {
    long step = 0;
    double lr = 0.0;
    LossBreakdown breakdown;
  };
  StepResult step();
  void run(long steps);

  std::vector<Example> sample_batch();
  AdamW& optimizer() { return optim_; }
  std::uint64_t rng_state() const { return draws_; }

 private:
  model::Model* model_;
  const data::Dataset* corpus_;
  TrainConfig cfg_;
  AdamW optim_;
  std::mt19937_64 rng_;
  std::uint64_t draws_ = 0;
  long step_ = 0;
  std::vector<int> eligible_;  // trajectory indices long enough to sample
};

}  // namespace gstm::train
