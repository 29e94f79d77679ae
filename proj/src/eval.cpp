#include "gstm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace gstm::eval {

namespace {

struct LooExample {
  std::vector<data::CheckInEvent> prefix;
  data::CheckInEvent target;
  int user = -1;
};

std::vector<LooExample> leave_one_out(const data::Dataset& d,
                                      const EvalOptions& opt) {
  if (opt.min_prefix < 1 || opt.max_prefix < opt.min_prefix) {
    throw std::invalid_argument("eval: bad prefix window");
  }
  std::vector<LooExample> out;
  for (const auto& traj : d.trajectories) {
    long n = static_cast<long>(traj.events.size());
    if (n < opt.min_prefix + 1) continue;
    LooExample ex;
    long start = std::max<long>(0, n - 1 - opt.max_prefix);
    ex.prefix.assign(traj.events.begin() + start, traj.events.end() - 1);
    ex.target = traj.events.back();
    ex.user = traj.user;
    out.push_back(std::move(ex));
  }
  if (out.empty()) throw std::invalid_argument("eval: no usable trajectory");
  return out;
}

std::vector<int> ranked_from_scores(const Eigen::VectorXd& score) {
  std::vector<int> order(score.size());
  for (int i = 0; i < score.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (score(a) != score(b)) return score(a) > score(b);
    return a < b;
  });
  return order;
}

double target_dt_hours(const LooExample& ex) {
  return heads::floor_dt_hours((ex.target.t - ex.prefix.back().t) / 3600.0);
}

Eigen::RowVectorXd pooled_context(model::Model& m, const LooExample& ex,
                                  const EvalOptions& opt) {
  auto fwd = m.forward(ex.prefix, opt.flags, nullptr);
  Eigen::RowVectorXd beta = fwd.beta->value.row(0);
  if (opt.tui_pooling == "alpha_beta_attn") {
    // attention over the token embeddings with the pooled vector as query
    const Eigen::MatrixXd& alpha = fwd.alpha->value;
    Eigen::VectorXd logits =
        alpha * beta.transpose() / std::sqrt(static_cast<double>(alpha.cols()));
    Eigen::ArrayXd w = (logits.array() - logits.maxCoeff()).exp();
    w /= w.sum();
    Eigen::RowVectorXd att = (w.matrix().transpose() * alpha).row(0);
    return 0.5 * (beta + att);
  }
  if (opt.tui_pooling != "beta") {
    throw std::invalid_argument("eval: unknown tui_pooling " + opt.tui_pooling);
  }
  return beta;
}

}  // namespace

std::string report_json(const EvalReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "{\"task\":\"" << r.task << "\",\"n\":" << r.n_examples
     << ",\"config_hash\":" << r.config_hash << ",\"seed\":" << r.seed;
  for (const auto& [name, v] : r.metrics) os << ",\"" << name << "\":" << v;
  os << "}";
  return os.str();
}

Eigen::VectorXd geofence_log_prior(const Eigen::VectorXd& d_km,
                                   double tau_km) {
  if (tau_km <= 0.0 || !std::isfinite(tau_km)) {
    return Eigen::VectorXd::Zero(d_km.size());
  }
  return -d_km / tau_km;
}

std::vector<int> beam_search_lp(const heads::LocationHead& loc,
                                const Eigen::RowVectorXd& beta, int beam_width,
                                const Eigen::VectorXd& cell_log_prior) {
  if (beam_width < 1) throw std::invalid_argument("beam_width must be >= 1");
  int H = loc.n_cells();
  if (cell_log_prior.size() != H) {
    throw std::invalid_argument("cell prior size mismatch");
  }
  auto dist = loc.distribution(ad::constant(Eigen::MatrixXd(beta)));
  Eigen::VectorXd cell_score =
      dist.p_cell->value.row(0).transpose().array().log().matrix() +
      cell_log_prior;
  std::vector<int> cells = ranked_from_scores(cell_score);
  cells.resize(std::min<std::size_t>(cells.size(), beam_width));
  std::vector<char> in_beam(H, 0);
  for (int h : cells) in_beam[h] = 1;

  std::vector<std::pair<double, int>> scored;
  for (int p = 0; p < loc.n_pois(); ++p) {
    int h = loc.cell_of_poi(p);
    if (!in_beam[h]) continue;
    double s = cell_score(h) + std::log(dist.p_poi_cond->value(0, p));
    scored.emplace_back(s, p);
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a,
                                                    const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<int> out;
  out.reserve(scored.size());
  for (const auto& [s, p] : scored) out.push_back(p);
  return out;
}

int rank_of(const std::vector<int>& ranked, int target) {
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (ranked[i] == target) return static_cast<int>(i) + 1;
  }
  return 0;
}

EvalReport ranking_report(const std::string& task,
                          const std::vector<int>& ranks) {
  if (ranks.empty()) throw std::invalid_argument("metrics: empty eval set");
  double n = static_cast<double>(ranks.size());
  double a1 = 0, a3 = 0, a5 = 0, mrr = 0;
  for (int r : ranks) {
    if (r < 0) throw std::invalid_argument("metrics: negative rank");
    if (r >= 1) {
      a1 += r <= 1;
      a3 += r <= 3;
      a5 += r <= 5;
      mrr += 1.0 / r;
    }
  }
  EvalReport rep;
  rep.task = task;
  rep.n_examples = ranks.size();
  rep.metrics = {{"acc@1", a1 / n},
                 {"acc@3", a3 / n},
                 {"acc@5", a5 / n},
                 {"mrr", mrr / n}};
  return rep;
}

EvalReport time_report(const std::vector<double>& pred_h,
                       const std::vector<double>& true_h) {
  if (pred_h.empty() || pred_h.size() != true_h.size()) {
    throw std::invalid_argument("metrics: empty or misaligned eval set");
  }
  double se = 0, ae = 0;
  for (std::size_t i = 0; i < pred_h.size(); ++i) {
    double e = pred_h[i] - true_h[i];
    se += e * e;
    ae += std::abs(e);
  }
  double n = static_cast<double>(pred_h.size());
  EvalReport rep;
  rep.task = "itf";
  rep.n_examples = static_cast<long>(pred_h.size());
  rep.metrics = {{"rmse_h", std::sqrt(se / n)}, {"mae_h", ae / n}};
  return rep;
}

EvalReport eval_lp(model::Model& m, const data::Dataset& d,
                   const EvalOptions& opt) {
  opt.flags.validate();
  std::vector<int> ranks;
  for (const auto& ex : leave_one_out(d, opt)) {
    // next-location prediction is for a known user; only identification
    // strips the token
    auto fwd = m.forward(ex.prefix, opt.flags, &ex.user);
    int last_cell = m.location().cell_of_poi(ex.prefix.back().poi);
    Eigen::VectorXd prior = geofence_log_prior(
        m.cell_cost().col(last_cell), opt.geofence_tau_km);
    auto ranked = beam_search_lp(m.location(), fwd.beta->value.row(0),
                                 opt.beam_width, prior);
    ranks.push_back(rank_of(ranked, ex.target.poi));
  }
  EvalReport rep = ranking_report("lp", ranks);
  rep.config_hash = opt.config_hash;
  rep.seed = opt.seed;
  return rep;
}

EvalReport eval_tui(model::Model& m, const data::Dataset& d,
                    const EvalOptions& opt) {
  opt.flags.validate();
  std::vector<int> ranks;
  for (const auto& ex : leave_one_out(d, opt)) {
    Eigen::RowVectorXd q = pooled_context(m, ex, opt);
    ad::Var logits = m.user_head().logits(ad::constant(Eigen::MatrixXd(q)));
    auto ranked = ranked_from_scores(logits->value.row(0).transpose());
    ranks.push_back(rank_of(ranked, ex.user));
  }
  EvalReport rep = ranking_report("tui", ranks);
  rep.config_hash = opt.config_hash;
  rep.seed = opt.seed;
  return rep;
}

double predict_time_mixture(model::Model& m, const Eigen::RowVectorXd& beta) {
  auto p = m.mixture().params(ad::constant(Eigen::MatrixXd(beta)));
  Eigen::VectorXd w = p.log_w->value.row(0).array().exp().transpose();
  Eigen::VectorXd mu = p.mu->value.row(0).transpose();
  Eigen::VectorXd sg = p.sigma->value.row(0).transpose();
  if (m.config().median_bias_correct) {
    // smearing-corrected point estimate: the mixture mean, which is the
    // L2-optimal forecast the RMSE metric scores
    return (w.array() * (mu.array() + 0.5 * sg.array().square()).exp()).sum();
  }
  return heads::mixture_median(w, mu, sg);
}

double predict_time_diffusion(model::Model& m, const Eigen::RowVectorXd& beta,
                              int n_samples, int steps, std::uint64_t seed) {
  heads::ScoreValuesFn fn = [&](const Eigen::VectorXd& y, double s) {
    Eigen::MatrixXd ctx = beta.replicate(y.size(), 1);
    Eigen::VectorXd sv = Eigen::VectorXd::Constant(y.size(), s);
    return m.score_net().score_values(y, sv, ctx, m.config().vp);
  };
  Eigen::VectorXd y = heads::reverse_sample(fn, n_samples, steps,
                                            m.config().vp, seed,
                                            m.config().s_min);
  return heads::predict_from_samples(y, m.config().median_bias_correct);
}

EvalReport eval_itf(model::Model& m, const data::Dataset& d,
                    const EvalOptions& opt) {
  opt.flags.validate();
  std::vector<double> pred, truth;
  long i = 0;
  for (const auto& ex : leave_one_out(d, opt)) {
    auto fwd = m.forward(ex.prefix, opt.flags, &ex.user);
    Eigen::RowVectorXd beta = fwd.beta->value.row(0);
    double dt;
    if (m.config().time_metric == "diffusion") {
      dt = predict_time_diffusion(m, beta, opt.tp_samples, opt.tp_steps,
                                  opt.seed + static_cast<std::uint64_t>(i));
    } else {
      dt = predict_time_mixture(m, beta);
    }
    pred.push_back(dt);
    truth.push_back(target_dt_hours(ex));
    ++i;
  }
  EvalReport rep = time_report(pred, truth);
  rep.config_hash = opt.config_hash;
  rep.seed = opt.seed;
  return rep;
}

std::vector<int> frequency_ranking(
    const std::vector<data::CheckInEvent>& prefix, int n_pois) {
  Eigen::VectorXd count = Eigen::VectorXd::Zero(n_pois);
  for (const auto& e : prefix) {
    if (e.poi >= 0 && e.poi < n_pois) count(e.poi) += 1.0;
  }
  return ranked_from_scores(count);
}

EvalReport lp_frequency_baseline(const data::Dataset& d,
                                 const EvalOptions& opt) {
  std::vector<int> ranks;
  for (const auto& ex : leave_one_out(d, opt)) {
    auto ranked = frequency_ranking(ex.prefix, d.pois.size());
    ranks.push_back(rank_of(ranked, ex.target.poi));
  }
  EvalReport rep = ranking_report("lp", ranks);
  rep.config_hash = opt.config_hash;
  rep.seed = opt.seed;
  return rep;
}

double global_median_dt_hours(const data::Dataset& d) {
  std::vector<double> gaps;
  for (const auto& traj : d.trajectories) {
    for (std::size_t i = 0; i + 1 < traj.events.size(); ++i) {
      gaps.push_back(heads::floor_dt_hours(
          (traj.events[i + 1].t - traj.events[i].t) / 3600.0));
    }
  }
  if (gaps.empty()) throw std::invalid_argument("no inter-event gaps");
  std::sort(gaps.begin(), gaps.end());
  std::size_t n = gaps.size();
  return n % 2 == 1 ? gaps[n / 2] : 0.5 * (gaps[n / 2 - 1] + gaps[n / 2]);
}

EvalReport itf_global_median_baseline(const data::Dataset& d,
                                      const EvalOptions& opt) {
  double med = global_median_dt_hours(d);
  std::vector<double> pred, truth;
  for (const auto& ex : leave_one_out(d, opt)) {
    pred.push_back(med);
    truth.push_back(target_dt_hours(ex));
  }
  EvalReport rep = time_report(pred, truth);
  rep.config_hash = opt.config_hash;
  rep.seed = opt.seed;
  return rep;
}

std::vector<AblationRun> run_ablation(
    model::Model& m, const data::Dataset& d, const EvalOptions& base,
    const std::vector<model::AblationFlags>& grid) {
  std::vector<AblationRun> out;
  for (const auto& flags : grid) {
    flags.validate();
    EvalOptions opt = base;
    opt.flags = flags;
    opt.config_hash = base.config_hash ^ train::fnv1a(flags.tag());
    AblationRun run;
    run.flags = flags;
    run.lp = eval_lp(m, d, opt);
    run.tui = eval_tui(m, d, opt);
    run.itf = eval_itf(m, d, opt);
    out.push_back(std::move(run));
  }
  return out;
}

}  // namespace gstm::eval
