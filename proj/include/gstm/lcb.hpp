#pragma once

// Concept bank: per-domain unit-sphere anchors with keys, long-horizon
// queries, temperature softmax selection, spherical barycenters, hypernet
// prompt tokens, and the selection-entropy floor penalty.

#include "gstm/autodiff.hpp"

namespace gstm::lcb {

struct LcbConfig {
  int domains = 3;  // occupation, activity, lifestyle
  int anchors_per_domain = 8;
  int d = 64;
  int hidden = 64;                       // hypernet width
  std::vector<double> temperatures;      // per domain; default 0.5 each
  double entropy_floor = 0.1;            // nats
};

// LN of the causal mean pool over h_1..h_i, rows aligned with h.
ad::Var long_query(const ad::Var& h);

// softmax_k(q k_k^T / tau) per row.
ad::Var select(const ad::Var& q, const ad::Var& keys, double tau);

// Normalized weighted anchor sum per row; throws on a near-zero resultant.
ad::Var barycenter(const ad::Var& weights, const ad::Var& anchors,
                   double tolerance = 1e-8);

// sum over rows of max(0, eps - H(w)), H in nats.
ad::Var entropy_floor(const std::vector<ad::Var>& weight_sets, double eps);

class LifestyleBank {
 public:
  LifestyleBank(ad::ParamStore& store, const std::string& prefix,
                const LcbConfig& cfg, std::uint64_t seed);

  struct ForwardResult {
    ad::Var prompt;                 // n x d, one prompt token per event
    ad::Var query;                  // n x d
    std::vector<ad::Var> weights;   // per domain, n x K
  };
  ForwardResult forward(const ad::Var& h) const;

  // Entropy penalty for one forward pass.
  ad::Var entropy_penalty(const ForwardResult& r) const;

  // Re-normalize anchor rows; call after every optimizer step.
  void retract_anchors();

  const LcbConfig& config() const { return cfg_; }
  ad::Var anchors(int domain) const { return anchors_[domain]; }
  ad::Var keys(int domain) const { return keys_[domain]; }

 private:
  LcbConfig cfg_;
  std::vector<ad::Var> anchors_, keys_;
  std::vector<ad::Var> h1_w_, h1_b_, h2_w_, h2_b_;  // per-domain hypernet
  ad::Var prompt_proj_;
};

}  // namespace gstm::lcb
