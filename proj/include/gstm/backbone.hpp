#pragma once

// Decoder-only causal transformer over the interleaved (h_i, p_i, user)
// stream, with per-layer freezing and low-rank adapters on every linear
// projection. Emits per-intention outputs alpha and a pooled beta.

#include "gstm/autodiff.hpp"

namespace gstm::bb {

struct BackboneConfig {
  int layers = 4;
  int heads = 4;
  int d = 64;
  int mlp = 256;
  int frozen_layers = 2;   // bottom L_f layers get frozen base weights
  int lora_rank = 4;       // 0 disables adapters
  double lora_scale = 0.0; // <= 0 means 2/rank
  bool h_before_p = true;  // interleave order

  double scale() const { return lora_scale > 0.0 ? lora_scale : 2.0 / lora_rank; }
  void validate() const;
};

// W + s * A B; A is (in x r), B is (r x out) and starts at zero so the
// effective weight equals the base at initialization.
ad::Var apply_lora(const ad::Var& W, const ad::Var& A, const ad::Var& B,
                   double s);

struct BackboneOutput {
  ad::Var alpha;  // n x d, aligned with the h positions
  ad::Var beta;   // 1 x d, mean over p positions and the user token
};

class Backbone {
 public:
  Backbone(ad::ParamStore& store, const std::string& prefix,
           const BackboneConfig& cfg, std::uint64_t seed);

  // h, p: n x d; user: optional 1 x d token appended last.
  BackboneOutput forward(const ad::Var& h, const ad::Var& p,
                         const ad::Var* user = nullptr) const;

  // The raw stack on an already-built sequence (exposed for tests).
  ad::Var run_stack(const ad::Var& seq) const;

  const BackboneConfig& config() const { return cfg_; }

 private:
  struct Linear {
    ad::Var W, b, A, B;  // A/B empty when adapters are off
  };
  ad::Var linear(const Linear& lin, const ad::Var& x) const;

  struct Layer {
    Linear wq, wk, wv, wo, mlp1, mlp2;
    ad::Var ln1_g, ln1_b, ln2_g, ln2_b;
  };

  BackboneConfig cfg_;
  std::vector<Layer> layers_;
};

Eigen::MatrixXd sinusoidal_posenc(long n, long d);

}  // namespace gstm::bb
