#pragma once

// Continuous-time memory: exponential decay between events, gated impulses
// at events, intention tokens, and the point-process auxiliary loss over
// inter-arrival times.

#include "gstm/autodiff.hpp"
#include "gstm/temporal.hpp"

namespace gstm::ctm {

// Elementwise m * exp(-lambda * dt). lambda entries must be positive.
ad::Var decay(const ad::Var& m, double dt_s, const ad::Var& lambda);

// EMA category-preference estimates at two horizons, Laplace-smoothed.
class PreferenceTracker {
 public:
  PreferenceTracker(int n_categories, double momentum_short = 0.9,
                    double momentum_long = 0.999, double smoothing = 1e-3);

  void observe(int category);
  void reset();
  // Smoothed probability vectors; strictly positive, sum to 1.
  Eigen::VectorXd p_short() const;
  Eigen::VectorXd p_long() const;
  // nu = -log p_long(c)
  double surprisal(int category) const;
  double kl_short_long() const;

 private:
  Eigen::VectorXd smoothed(const Eigen::VectorXd& raw) const;
  Eigen::VectorXd short_, long_;
  double ms_, ml_, eps_;
  int n_;
};

// rho = alpha * sigmoid([dt_feat, phi] W_r) + (1-alpha) * sigmoid([nu, kl,
// dev] W_n), componentwise in (0,1)^d. Features are 1 x k Vars so gradient
// can reach upstream encoders (learned time frequencies, the deviation's
// token path).
ad::Var dual_gate(const ad::Var& recency_feat, const ad::Var& novelty_feat,
                  const ad::Var& W_r, const ad::Var& W_n,
                  const ad::Var& alpha_raw);

// m_plus = m_minus + (s B) .* rho; h = LN(s + m_plus).
struct UpdateResult {
  ad::Var m_plus;
  ad::Var h;
};
UpdateResult update(const ad::Var& m_minus, const ad::Var& s_row,
                    const ad::Var& rho, const ad::Var& B);

// Constant-intensity point-process NLL: lambda_i = softplus(h_i w + b),
// L = sum_i lambda_i * dt_{i+1} - log lambda_i.
ad::Var nhp_loss(const ad::Var& H, const std::vector<double>& dt_next,
                 const ad::Var& w, const ad::Var& b);

struct CtmConfig {
  int d = 64;
  double momentum_short = 0.9;
  double momentum_long = 0.999;
  double smoothing = 1e-3;
  // decay operates on dt in hours; second-scale rates underflow at desk
  // horizons
  double dt_unit_s = 3600.0;
};

// Per-trajectory recurrence producing intention tokens from fused tokens.
class CtmCell {
 public:
  CtmCell(ad::ParamStore& store, const std::string& prefix,
          const CtmConfig& cfg, const temporal::FourierBank& bank,
          std::uint64_t seed);

  struct ForwardResult {
    ad::Var h;                       // n x d intention tokens
    std::vector<double> surprisal;   // per event
    std::vector<double> kl;          // per event
  };
  // s: n x d fused tokens; ts: matching timestamps (non-decreasing);
  // categories: per-event ids within [0, n_categories).
  ForwardResult forward(const ad::Var& s, const std::vector<double>& ts,
                        const std::vector<int>& categories,
                        int n_categories) const;

  ad::Var lambda() const;  // softplus of the raw decay parameter
  ad::Var nhp_w() const { return nhp_w_; }
  ad::Var nhp_b() const { return nhp_b_; }
  const CtmConfig& config() const { return cfg_; }

 private:
  CtmConfig cfg_;
  const temporal::FourierBank* bank_;
  ad::Var lambda_raw_, B_, alpha_raw_, w_r_, w_n_, nhp_w_, nhp_b_;
};

}  // namespace gstm::ctm
