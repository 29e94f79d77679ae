#pragma once

// Task inference and evaluation: constrained beam search over cells then
// POIs with a geofence prior, ranking/time metrics, per-task reports,
// reference baselines and the ablation runner. The protocol is
// leave-one-out per trajectory: the last event is the target, the events
// before it are the context.

#include "gstm/model.hpp"
#include "gstm/training.hpp"

#include <map>
#include <string>
#include <vector>

namespace gstm::eval {

struct EvalReport {
  std::string task;  // "lp", "tui" or "itf"
  std::map<std::string, double> metrics;
  long n_examples = 0;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
};

std::string report_json(const EvalReport& r);

// Additive log prior -d/tau from per-cell distances (km); tau <= 0 means no
// geofence and yields all zeros.
Eigen::VectorXd geofence_log_prior(const Eigen::VectorXd& d_km, double tau_km);

// Ranked POI list, best first. Expands the beam_width best cells by
// log p(cell) + prior, then scores their POIs by adding log p(poi | cell).
// With beam_width >= n_cells this equals the exhaustive ranking.
std::vector<int> beam_search_lp(const heads::LocationHead& loc,
                                const Eigen::RowVectorXd& beta, int beam_width,
                                const Eigen::VectorXd& cell_log_prior);

// 1-based rank of target; 0 when absent from the list.
int rank_of(const std::vector<int>& ranked, int target);

// acc@{1,3,5} and mean reciprocal rank (rank 0 contributes nothing).
EvalReport ranking_report(const std::string& task,
                          const std::vector<int>& ranks);
// rmse_h / mae_h over aligned hour-valued predictions.
EvalReport time_report(const std::vector<double>& pred_h,
                       const std::vector<double>& true_h);

struct EvalOptions {
  int beam_width = 1 << 20;  // effectively exhaustive
  double geofence_tau_km = 5.0;
  int min_prefix = 2;
  int max_prefix = 16;
  int tp_samples = 128;  // diffusion head only
  int tp_steps = 100;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  model::AblationFlags flags;
  // identification pooling: "beta" or "alpha_beta_attn"
  std::string tui_pooling = "beta";
};

EvalReport eval_lp(model::Model& m, const data::Dataset& d,
                   const EvalOptions& opt);
// User identification never sees the user token (leakage guard).
EvalReport eval_tui(model::Model& m, const data::Dataset& d,
                    const EvalOptions& opt);
EvalReport eval_itf(model::Model& m, const data::Dataset& d,
                    const EvalOptions& opt);

// Closed-form median of the mixture head's dt distribution (hours).
double predict_time_mixture(model::Model& m, const Eigen::RowVectorXd& beta);
// exp(median) over reverse-SDE samples of y = log dt.
double predict_time_diffusion(model::Model& m, const Eigen::RowVectorXd& beta,
                              int n_samples, int steps, std::uint64_t seed);

// Reference baselines over the same leave-one-out examples.
std::vector<int> frequency_ranking(const std::vector<data::CheckInEvent>& prefix,
                                   int n_pois);
EvalReport lp_frequency_baseline(const data::Dataset& d,
                                 const EvalOptions& opt);
double global_median_dt_hours(const data::Dataset& d);
EvalReport itf_global_median_baseline(const data::Dataset& d,
                                      const EvalOptions& opt);

struct AblationRun {
  model::AblationFlags flags;
  EvalReport lp, tui, itf;
};
// Evaluates every flag combination on the same model; each run's reports
// share a hash derived from the base hash and the flag tag.
std::vector<AblationRun> run_ablation(
    model::Model& m, const data::Dataset& d, const EvalOptions& base,
    const std::vector<model::AblationFlags>& grid);

}  // namespace gstm::eval
