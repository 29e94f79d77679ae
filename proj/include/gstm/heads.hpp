#pragma once

// Output heads and their losses: hierarchical cell->POI location decoding
// with an entropic-OT refinement, inter-arrival time modeling (VP-SDE
// diffusion and a log-normal mixture), CRPS calibration, and prototype-based
// user identification with a supervised contrastive term.

#include "gstm/autodiff.hpp"
#include "gstm/geo.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace gstm::heads {

// ---------------------------------------------------------------------------
// Hierarchical location head

class LocationHead {
 public:
  // Assigns each POI to the cell containing its coordinates at `resolution`;
  // only occupied cells get a column in the cell projection.
  LocationHead(ad::ParamStore& store, const std::string& prefix, int d,
               const std::vector<geo::GeoPoint>& poi_coords,
               const geo::HexIndexer& indexer, int resolution,
               std::uint64_t seed);

  struct Dist {
    ad::Var p_cell;       // n x H
    ad::Var p_poi_cond;   // n x P, normalized within each cell block
    ad::Var p_poi;        // n x P, exact marginal
  };
  Dist distribution(const ad::Var& beta) const;

  // Mean over the batch of -log p(poi_target | context).
  ad::Var ce_loss(const Dist& dist, const std::vector<int>& poi_targets) const;

  int n_cells() const { return static_cast<int>(cells_.size()); }
  int n_pois() const { return n_pois_; }
  // Index into cells() of the cell owning this POI.
  int cell_of_poi(int poi) const;
  const std::vector<geo::CellIndex>& cells() const { return cells_; }

 private:
  int d_, n_pois_;
  std::vector<geo::CellIndex> cells_;
  std::vector<int> poi_cell_;          // POI -> cell slot
  Eigen::MatrixXd membership_;         // P x H 0/1
  ad::Var w_cell_, w_poi_;
};

// Geodesic km between cell centers; symmetric with zero diagonal.
Eigen::MatrixXd cell_cost_matrix(const std::vector<geo::CellIndex>& cells,
                                 const geo::HexIndexer& indexer);

// ---------------------------------------------------------------------------
// Entropic optimal transport (log-domain Sinkhorn, unrolled on the tape)

struct SinkhornResult {
  ad::Var loss;   // 1x1: <C, pi> - eps * H(pi)
  ad::Var plan;   // H x H
  int iterations = 0;
  bool converged = false;
  double marginal_err = 0.0;
};

// a: 1 x H predicted histogram (gradient flows through it); b: target
// histogram (constant, may be one-hot); C: symmetric cost with zero diagonal.
SinkhornResult sinkhorn_ot(const ad::Var& a, const Eigen::VectorXd& b,
                           const Eigen::MatrixXd& C, double eps,
                           int max_iters = 200, double tol = 1e-9);

// ---------------------------------------------------------------------------
// VP-SDE diffusion over y = log dt

struct VpSchedule {
  double beta_min = 0.1;
  double beta_max = 20.0;

  double beta(double s) const { return beta_min + s * (beta_max - beta_min); }
  // Closed form of int_0^s beta for the linear schedule.
  double integral(double s) const {
    return beta_min * s + 0.5 * (beta_max - beta_min) * s * s;
  }
};

struct VpKernel {
  double mean_coef;  // mean = y0 * mean_coef
  double variance;
};
VpKernel vp_perturb(double s, const VpSchedule& sched);

class ScoreNet {
 public:
  ScoreNet(ad::ParamStore& store, const std::string& prefix, int ctx_dim,
           int hidden, std::uint64_t seed);

  // Score s_theta(y, s | ctx) = -net(y, s, ctx) / sigma(s); y is n x 1.
  // ctx is a Var so gradients reach whatever produced the conditioning.
  ad::Var score(const ad::Var& y, const Eigen::VectorXd& s, const ad::Var& ctx,
                const VpSchedule& sched) const;
  // Tape-free evaluation for sampling loops.
  Eigen::VectorXd score_values(const Eigen::VectorXd& y,
                               const Eigen::VectorXd& s,
                               const Eigen::MatrixXd& ctx,
                               const VpSchedule& sched) const;
  int ctx_dim() const { return ctx_dim_; }

 private:
  ad::Var raw(const ad::Var& y, const Eigen::VectorXd& s,
              const ad::Var& ctx) const;
  int ctx_dim_;
  ad::Var w1_, b1_, w2_, b2_;
};

using ScoreFn =
    std::function<ad::Var(const ad::Var& y, const Eigen::VectorXd& s)>;

// Denoising score matching against the Gaussian perturbation-kernel score,
// with s and noise fixed by `seed`; s sampled uniformly from [s_min, 1].
ad::Var dsm_loss(const ScoreFn& score_fn, const Eigen::VectorXd& y0,
                 const VpSchedule& sched, double s_min, std::uint64_t seed);
// Deterministic core with caller-chosen s and noise (used by tests).
ad::Var dsm_loss_at(const ScoreFn& score_fn, const Eigen::VectorXd& y0,
                    const Eigen::VectorXd& s, const Eigen::VectorXd& noise,
                    const VpSchedule& sched);

using ScoreValuesFn = std::function<Eigen::VectorXd(const Eigen::VectorXd& y,
                                                    double s)>;

// Euler-Maruyama reverse-time sampling from s=1 to s=s_min; returns y
// samples (log-domain).
Eigen::VectorXd reverse_sample(const ScoreValuesFn& score_fn, int n_samples,
                               int steps, const VpSchedule& sched,
                               std::uint64_t seed, double s_min = 1e-3);

// exp(median(y)); optional log-normal smearing correction exp(var(y)/2).
double predict_from_samples(const Eigen::VectorXd& y_samples,
                            bool bias_correct = false);

// ---------------------------------------------------------------------------
// Log-normal mixture time head

struct MixParams {
  ad::Var log_w;  // n x K, rows log-normalized
  ad::Var mu;     // n x K
  ad::Var sigma;  // n x K, > 0
};

class MixtureTimeHead {
 public:
  MixtureTimeHead(ad::ParamStore& store, const std::string& prefix, int d,
                  int components, std::uint64_t seed);
  MixParams params(const ad::Var& beta) const;
  int components() const { return k_; }

 private:
  int k_;
  ad::Var w_mix_, b_mix_;
};

// Mean NLL of dt (hours, > 0) under the log-normal mixture.
ad::Var mixture_nll(const MixParams& p, const Eigen::VectorXd& dt_hours);
// Closed-form CRPS of the Gaussian mixture over y = log dt (mean over batch).
ad::Var mixture_crps(const MixParams& p, const Eigen::VectorXd& y_true);
// Closed-form median of the mixture over dt, by CDF bisection.
double mixture_median(const Eigen::VectorXd& w, const Eigen::VectorXd& mu,
                      const Eigen::VectorXd& sigma);

// Sample-based CRPS estimator E|X - y| - 0.5 E|X - X'|.
double crps_empirical(const Eigen::VectorXd& samples, double y_true);

// dt in hours floored at one second.
double floor_dt_hours(double dt_hours);

// ---------------------------------------------------------------------------
// Prototype user head

class UserHead {
 public:
  UserHead(ad::ParamStore& store, const std::string& prefix, int n_users,
           int d, double tau_u, double momentum, std::uint64_t seed);

  // Temperature-scaled cosine logits against the (constant) prototypes.
  ad::Var logits(const ad::Var& beta) const;
  ad::Var ce_loss(const ad::Var& logits, const std::vector<int>& users) const;
  // EMA update of the named users' prototypes with pooled betas (rows).
  void update_prototypes(const Eigen::MatrixXd& betas,
                         const std::vector<int>& users);
  const ad::Var& prototypes() const { return protos_; }
  int n_users() const { return n_users_; }

 private:
  int n_users_;
  double tau_u_, momentum_;
  ad::Var protos_;  // stored unnormalized; normalized at read
};

// In-batch supervised contrastive loss over L2-normalized rows of beta.
ad::Var supcon_loss(const ad::Var& beta, const std::vector<int>& labels,
                    double tau_c);

}  // namespace gstm::heads
