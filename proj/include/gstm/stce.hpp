#pragma once

// Structure-aware attention: pairwise prior affinities from geodesic,
// taxonomy and cell kernels, attention with a log-prior bias on the logits,
// and gated fusion of the per-view outputs.

#include "gstm/autodiff.hpp"
#include "gstm/data.hpp"
#include "gstm/geo.hpp"

namespace gstm::stce {

enum class BiasMode { kLogPrior, kSubtractiveDistance };

struct StceConfig {
  double tau_g_km = 2.0;
  double tau_c = 1.0;
  geo::KernelConfig cell_kernel;
  int cell_resolution = 6;
  double eta_init = 1.0;       // structure strength before softplus
  int sparsify_zeta = 0;       // 0 disables top-zeta row pruning
  BiasMode bias_mode = BiasMode::kLogPrior;
  double gamma_init = 0.1;     // distance bias slope (subtractive mode)
};

// Elementwise log kernel matrices for one event sequence, plus the raw
// pairwise distance matrix used by the subtractive bias mode.
struct LogKernels {
  Eigen::MatrixXd log_geo, log_cat, log_cell;
  Eigen::MatrixXd dist_km;
};

LogKernels log_kernels(const std::vector<data::CheckInEvent>& events,
                       const data::Taxonomy& taxonomy,
                       const geo::HexIndexer& indexer, const StceConfig& cfg);

struct PriorAffinity {
  ad::Var Pi;  // row-stochastic
  ad::Var S;   // (Pi + Pi^T)/2, symmetric, entries > 0
};

// omega_* are 1x1 trainable scalars weighting the log kernels.
PriorAffinity prior_affinity(const LogKernels& k, const ad::Var& omega_g,
                             const ad::Var& omega_c, const ad::Var& omega_h,
                             int sparsify_zeta = 0);

// Causally masked attention with the structural bias on the logits.
// log_prior mode adds eta * log S; subtractive mode subtracts gamma * dist.
// Returns Y = alpha V; alpha_out (optional) receives the attention values.
ad::Var struct_attention(const ad::Var& Q, const ad::Var& K, const ad::Var& V,
                         const ad::Var& S, const ad::Var& eta,
                         Eigen::MatrixXd* alpha_out = nullptr);
ad::Var struct_attention_subtractive(const ad::Var& Q, const ad::Var& K,
                                     const ad::Var& V,
                                     const Eigen::MatrixXd& dist_km,
                                     const ad::Var& gamma,
                                     Eigen::MatrixXd* alpha_out = nullptr);

// gamma_i = softmax(W_g [u_1 || ... || u_V]); s~ = sum_v gamma_v u_v;
// s = LN(x + s~). W_g is (V*d) x V.
ad::Var multi_view_fuse(const std::vector<ad::Var>& u_views, const ad::Var& x,
                        const ad::Var& W_g);

// One attention layer over the five token views sharing a prior S.
class StceLayer {
 public:
  static constexpr int kViews = 5;

  StceLayer(ad::ParamStore& store, const std::string& prefix, int d,
            const StceConfig& cfg, std::uint64_t seed);

  // x: n x d fused base tokens. Returns s: n x d.
  ad::Var forward(const ad::Var& x, const LogKernels& kernels) const;

  PriorAffinity affinity(const LogKernels& kernels) const;
  ad::Var eta() const;  // softplus of the raw parameter

 private:
  StceConfig cfg_;
  int d_;
  ad::Var wq_[kViews], wk_[kViews], wv_[kViews];
  ad::Var w_gate_, eta_raw_, gamma_raw_;
  ad::Var omega_g_, omega_c_, omega_h_;
};

}  // namespace gstm::stce
