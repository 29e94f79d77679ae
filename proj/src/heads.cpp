#include "gstm/heads.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>

namespace gstm::heads {

namespace {
constexpr double kSqrt2 = 1.4142135623730951;
constexpr double kInvSqrt2Pi = 0.3989422804014327;
constexpr double kHalfLog2Pi = 0.9189385332046727;
constexpr double kLogFloor = -1e9;

Eigen::MatrixXd gauss_init(long r, long c, double std_dev,
                           std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, std_dev);
  Eigen::MatrixXd m(r, c);
  for (long i = 0; i < r; ++i)
    for (long j = 0; j < c; ++j) m(i, j) = g(rng);
  return m;
}

Eigen::MatrixXd sphere_init(long k, long d, std::uint64_t seed) {
  Eigen::MatrixXd m = gauss_init(k, d, 1.0, seed);
  for (long i = 0; i < k; ++i) m.row(i).normalize();
  return m;
}

Eigen::MatrixXd onehot_rows(const std::vector<int>& idx, long width,
                            const char* what) {
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(idx.size(), width);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= width) {
      throw std::out_of_range(std::string(what) + ": index out of range");
    }
    t(static_cast<long>(i), idx[i]) = 1.0;
  }
  return t;
}
}  // namespace

// ---------------------------------------------------------------------------
// LocationHead

LocationHead::LocationHead(ad::ParamStore& store, const std::string& prefix,
                           int d, const std::vector<geo::GeoPoint>& poi_coords,
                           const geo::HexIndexer& indexer, int resolution,
                           std::uint64_t seed)
    : d_(d), n_pois_(static_cast<int>(poi_coords.size())) {
  if (n_pois_ < 1) throw std::invalid_argument("location head: no POIs");
  std::map<geo::CellIndex, int> slot;
  poi_cell_.reserve(poi_coords.size());
  for (const auto& g : poi_coords) {
    geo::CellIndex c = indexer.cell_of(g, resolution);
    auto it = slot.find(c);
    if (it == slot.end()) {
      it = slot.emplace(c, static_cast<int>(cells_.size())).first;
      cells_.push_back(c);
    }
    poi_cell_.push_back(it->second);
  }
  long H = static_cast<long>(cells_.size());
  membership_ = Eigen::MatrixXd::Zero(n_pois_, H);
  for (int l = 0; l < n_pois_; ++l) membership_(l, poi_cell_[l]) = 1.0;

  double sd = 1.0 / std::sqrt(static_cast<double>(d));
  w_cell_ = store.add(prefix + ".w_cell", gauss_init(d, H, sd, seed + 1));
  w_poi_ = store.add(prefix + ".w_poi", gauss_init(d, n_pois_, sd, seed + 2));
}

int LocationHead::cell_of_poi(int poi) const {
  if (poi < 0 || poi >= n_pois_) {
    throw std::out_of_range("location head: POI id out of range");
  }
  return poi_cell_[poi];
}

LocationHead::Dist LocationHead::distribution(const ad::Var& beta) const {
  if (beta->cols() != d_) throw ad::ShapeError("location head: width mismatch");
  Dist out;
  out.p_cell = ad::softmax_rows(ad::matmul(beta, w_cell_));

  ad::Var logits = ad::matmul(beta, w_poi_);
  // grouped softmax per row: a per-row constant shift cancels within each
  // cell block, so the expression equals the blockwise softmax exactly
  Eigen::MatrixXd neg_max = -logits->value.rowwise().maxCoeff();
  ad::Var expl = ad::vexp(ad::add_colvec(logits, ad::constant(neg_max)));
  ad::Var denom = ad::matmul(expl, ad::constant(membership_));         // n x H
  ad::Var denom_exp =
      ad::matmul(denom, ad::constant(Eigen::MatrixXd(membership_.transpose())));
  out.p_poi_cond = ad::cdiv(expl, denom_exp);

  ad::Var p_cell_exp = ad::matmul(
      out.p_cell, ad::constant(Eigen::MatrixXd(membership_.transpose())));
  out.p_poi = ad::mul(p_cell_exp, out.p_poi_cond);
  return out;
}

ad::Var LocationHead::ce_loss(const Dist& dist,
                              const std::vector<int>& poi_targets) const {
  if (static_cast<long>(poi_targets.size()) != dist.p_poi->rows()) {
    throw ad::ShapeError("location CE: target count mismatch");
  }
  Eigen::MatrixXd t = onehot_rows(poi_targets, n_pois_, "location CE");
  ad::Var picked = ad::sum_rows(ad::mul(dist.p_poi, ad::constant(t)));
  return ad::neg(ad::mean(ad::vlog(picked)));
}

Eigen::MatrixXd cell_cost_matrix(const std::vector<geo::CellIndex>& cells,
                                 const geo::HexIndexer& indexer) {
  long H = static_cast<long>(cells.size());
  Eigen::MatrixXd C = Eigen::MatrixXd::Zero(H, H);
  for (long i = 0; i < H; ++i) {
    geo::GeoPoint gi = indexer.cell_center(cells[i]);
    for (long j = i + 1; j < H; ++j) {
      double d = geo::haversine(gi, indexer.cell_center(cells[j]));
      C(i, j) = d;
      C(j, i) = d;
    }
  }
  return C;
}

// ---------------------------------------------------------------------------
// Sinkhorn

SinkhornResult sinkhorn_ot(const ad::Var& a, const Eigen::VectorXd& b,
                           const Eigen::MatrixXd& C, double eps,
                           int max_iters, double tol) {
  long H = a->cols();
  if (a->rows() != 1) throw ad::ShapeError("sinkhorn: a must be a row");
  if (b.size() != H || C.rows() != H || C.cols() != H) {
    throw ad::ShapeError("sinkhorn: dimension mismatch");
  }
  if (eps <= 0.0) throw ad::DomainError("sinkhorn: eps must be > 0");
  if (max_iters < 1) throw ad::DomainError("sinkhorn: max_iters must be >= 1");
  if (a->value.minCoeff() <= 0.0 ||
      std::abs(a->value.sum() - 1.0) > 1e-6) {
    throw ad::DomainError("sinkhorn: a must be strictly inside the simplex");
  }
  if (b.minCoeff() < 0.0 || std::abs(b.sum() - 1.0) > 1e-6) {
    throw ad::DomainError("sinkhorn: b must lie on the simplex");
  }
  if ((C - C.transpose()).cwiseAbs().maxCoeff() > 1e-9 ||
      C.diagonal().cwiseAbs().maxCoeff() > 0.0) {
    throw ad::DomainError("sinkhorn: C must be symmetric with zero diagonal");
  }

  ad::Var loga = ad::transpose(ad::vlog(a));  // H x 1
  Eigen::MatrixXd logb_row(1, H);
  for (long j = 0; j < H; ++j) {
    logb_row(0, j) = b(j) > 0.0 ? std::log(b(j)) : kLogFloor;
  }
  ad::Var logb = ad::constant(logb_row);
  ad::Var negC = ad::constant(-C);
  ad::Var f = ad::constant(Eigen::MatrixXd::Zero(H, 1));
  ad::Var g = ad::constant(Eigen::MatrixXd::Zero(1, H));
  auto build_logplan = [&]() {
    return ad::scale(ad::add_rowvec(ad::add_colvec(negC, f), g), 1.0 / eps);
  };

  SinkhornResult res;
  ad::Var best_f = f, best_g = g;
  double best_err = std::numeric_limits<double>::infinity();
  for (int it = 1; it <= max_iters; ++it) {
    f = ad::add(f, ad::scale(ad::sub(loga, ad::logsumexp_rows(build_logplan())),
                             eps));
    g = ad::add(
        g, ad::scale(ad::sub(logb, ad::transpose(ad::logsumexp_rows(
                                        ad::transpose(build_logplan())))),
                     eps));
    Eigen::MatrixXd logp =
        ((-C).colwise() + f->value.col(0)).rowwise() + g->value.row(0);
    Eigen::MatrixXd plan = (logp / eps).array().exp();
    double err =
        std::max((plan.rowwise().sum().transpose() - a->value.row(0))
                     .cwiseAbs()
                     .maxCoeff(),
                 (plan.colwise().sum().transpose() - b).cwiseAbs().maxCoeff());
    res.iterations = it;
    if (err < best_err) {
      best_err = err;
      best_f = f;
      best_g = g;
    }
    if (err < tol) {
      res.converged = true;
      break;
    }
  }
  res.marginal_err = best_err;
  if (!res.converged) {
    std::fprintf(stderr,
                 "sinkhorn: no convergence after %d iters "
                 "(marginal err %.3e); using best iterate\n",
                 res.iterations, best_err);
  }
  f = best_f;
  g = best_g;
  ad::Var logplan = build_logplan();
  res.plan = ad::vexp(logplan);
  res.loss = ad::add(ad::sum(ad::mul(res.plan, ad::constant(C))),
                     ad::scale(ad::sum(ad::mul(res.plan, logplan)), eps));
  return res;
}

// ---------------------------------------------------------------------------
// VP-SDE

VpKernel vp_perturb(double s, const VpSchedule& sched) {
  if (!(s >= 0.0 && s <= 1.0)) {
    throw ad::DomainError("vp_perturb: s must be in [0, 1]");
  }
  if (sched.beta_min <= 0.0 || sched.beta_max < sched.beta_min) {
    throw ad::DomainError("vp_perturb: invalid schedule");
  }
  double I = sched.integral(s);
  return {std::exp(-0.5 * I), -std::expm1(-I)};
}

ScoreNet::ScoreNet(ad::ParamStore& store, const std::string& prefix,
                   int ctx_dim, int hidden, std::uint64_t seed)
    : ctx_dim_(ctx_dim) {
  if (ctx_dim < 0 || hidden < 1) {
    throw std::invalid_argument("score net: bad dimensions");
  }
  long in = 2 + ctx_dim;
  w1_ = store.add(prefix + ".w1",
                  gauss_init(in, hidden, 1.0 / std::sqrt(in), seed + 1));
  b1_ = store.add(prefix + ".b1", Eigen::MatrixXd::Zero(1, hidden));
  w2_ = store.add(prefix + ".w2",
                  gauss_init(hidden, 1, 1.0 / std::sqrt(hidden), seed + 2));
  b2_ = store.add(prefix + ".b2", Eigen::MatrixXd::Zero(1, 1));
}

ad::Var ScoreNet::raw(const ad::Var& y, const Eigen::VectorXd& s,
                      const ad::Var& ctx) const {
  long n = y->rows();
  if (y->cols() != 1 || s.size() != n) {
    throw ad::ShapeError("score net: y must be n x 1 with matching s");
  }
  if (ctx->cols() != ctx_dim_ || (ctx_dim_ > 0 && ctx->rows() != n)) {
    throw ad::ShapeError("score net: context shape mismatch");
  }
  std::vector<ad::Var> parts = {y, ad::constant(Eigen::MatrixXd(s))};
  if (ctx_dim_ > 0) parts.push_back(ctx);
  ad::Var in = ad::concat_cols(parts);
  ad::Var hidden = ad::vtanh(ad::add_rowvec(ad::matmul(in, w1_), b1_));
  return ad::add_rowvec(ad::matmul(hidden, w2_), b2_);
}

ad::Var ScoreNet::score(const ad::Var& y, const Eigen::VectorXd& s,
                        const ad::Var& ctx, const VpSchedule& sched) const {
  Eigen::MatrixXd sigma(s.size(), 1);
  for (long i = 0; i < s.size(); ++i) {
    double v = vp_perturb(s(i), sched).variance;
    if (v <= 0.0) throw ad::DomainError("score net: zero perturbation variance");
    sigma(i, 0) = std::sqrt(v);
  }
  return ad::neg(ad::cdiv(raw(y, s, ctx), ad::constant(sigma)));
}

Eigen::VectorXd ScoreNet::score_values(const Eigen::VectorXd& y,
                                       const Eigen::VectorXd& s,
                                       const Eigen::MatrixXd& ctx,
                                       const VpSchedule& sched) const {
  ad::Var out = score(ad::constant(Eigen::MatrixXd(y)), s, ad::constant(ctx),
                      sched);
  return out->value.col(0);
}

ad::Var dsm_loss_at(const ScoreFn& score_fn, const Eigen::VectorXd& y0,
                    const Eigen::VectorXd& s, const Eigen::VectorXd& noise,
                    const VpSchedule& sched) {
  long n = y0.size();
  if (n < 1) throw ad::ShapeError("dsm: empty batch");
  if (s.size() != n || noise.size() != n) {
    throw ad::ShapeError("dsm: batch size mismatch");
  }
  Eigen::MatrixXd ys(n, 1), target(n, 1);
  for (long i = 0; i < n; ++i) {
    VpKernel k = vp_perturb(s(i), sched);
    if (k.variance <= 0.0) {
      throw ad::DomainError("dsm: zero variance; raise s_min");
    }
    double sig = std::sqrt(k.variance);
    ys(i, 0) = y0(i) * k.mean_coef + sig * noise(i);
    target(i, 0) = -noise(i) / sig;
  }
  ad::Var sc = score_fn(ad::constant(ys), s);
  if (sc->rows() != n || sc->cols() != 1) {
    throw ad::ShapeError("dsm: score must be n x 1");
  }
  return ad::mean(ad::square(ad::sub(sc, ad::constant(target))));
}

ad::Var dsm_loss(const ScoreFn& score_fn, const Eigen::VectorXd& y0,
                 const VpSchedule& sched, double s_min, std::uint64_t seed) {
  if (s_min <= 0.0 || s_min >= 1.0) {
    throw ad::DomainError("dsm: s_min must be in (0, 1)");
  }
  long n = y0.size();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> us(s_min, 1.0);
  std::normal_distribution<double> gn(0.0, 1.0);
  Eigen::VectorXd s(n), noise(n);
  for (long i = 0; i < n; ++i) s(i) = us(rng);
  for (long i = 0; i < n; ++i) noise(i) = gn(rng);
  return dsm_loss_at(score_fn, y0, s, noise, sched);
}

Eigen::VectorXd reverse_sample(const ScoreValuesFn& score_fn, int n_samples,
                               int steps, const VpSchedule& sched,
                               std::uint64_t seed, double s_min) {
  if (n_samples < 1 || steps < 1) {
    throw ad::DomainError("reverse_sample: need samples and steps >= 1");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gn(0.0, 1.0);
  Eigen::VectorXd y(n_samples);
  for (int i = 0; i < n_samples; ++i) y(i) = gn(rng);
  double ds = (1.0 - s_min) / steps;
  for (int k = 0; k < steps; ++k) {
    double s = 1.0 - k * ds;
    double beta = sched.beta(s);
    Eigen::VectorXd sc = score_fn(y, s);
    if (sc.size() != n_samples) {
      throw ad::ShapeError("reverse_sample: score size mismatch");
    }
    y += ds * (0.5 * beta * y + beta * sc);
    if (k + 1 < steps) {
      double amp = std::sqrt(beta * ds);
      for (int i = 0; i < n_samples; ++i) y(i) += amp * gn(rng);
    }
  }
  return y;
}

double predict_from_samples(const Eigen::VectorXd& y_samples,
                            bool bias_correct) {
  long n = y_samples.size();
  if (n < 1) throw ad::DomainError("predict: no samples");
  std::vector<double> v(y_samples.data(), y_samples.data() + n);
  std::sort(v.begin(), v.end());
  double med = (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  double corr = 0.0;
  if (bias_correct && n > 1) {
    double m = y_samples.mean();
    corr = 0.5 * (y_samples.array() - m).square().sum() / (n - 1);
  }
  return std::exp(med + corr);
}

// ---------------------------------------------------------------------------
// Mixture time head

MixtureTimeHead::MixtureTimeHead(ad::ParamStore& store,
                                 const std::string& prefix, int d,
                                 int components, std::uint64_t seed)
    : k_(components) {
  if (components < 1) throw std::invalid_argument("mixture: need components");
  double sd = 1.0 / std::sqrt(static_cast<double>(d));
  w_mix_ = store.add(prefix + ".w_mix", gauss_init(d, 3 * k_, sd, seed + 1));
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(1, 3 * k_);
  for (int k = 0; k < k_; ++k) {
    // spread component means for identifiability; softplus bias gives
    // sigma ~= 1 at init
    b(0, k_ + k) = k_ == 1 ? 0.0 : -1.0 + 2.0 * k / (k_ - 1.0);
    b(0, 2 * k_ + k) = 0.5413248546129181;  // softplus^-1(1)
  }
  b_mix_ = store.add(prefix + ".b_mix", b);
}

MixParams MixtureTimeHead::params(const ad::Var& beta) const {
  if (beta->cols() != w_mix_->rows()) {
    throw ad::ShapeError("mixture: width mismatch");
  }
  ad::Var out = ad::add_rowvec(ad::matmul(beta, w_mix_), b_mix_);
  ad::Var wl = ad::slice_cols(out, 0, k_);
  MixParams p;
  p.log_w = ad::sub(wl, ad::matmul(ad::logsumexp_rows(wl),
                                   ad::constant(Eigen::MatrixXd::Ones(1, k_))));
  p.mu = ad::slice_cols(out, k_, k_);
  p.sigma = ad::add_scalar(ad::softplus(ad::slice_cols(out, 2 * k_, k_)), 1e-4);
  return p;
}

ad::Var mixture_nll(const MixParams& p, const Eigen::VectorXd& dt_hours) {
  long n = p.log_w->rows(), k = p.log_w->cols();
  if (dt_hours.size() != n) throw ad::ShapeError("mixture nll: batch mismatch");
  if (dt_hours.minCoeff() <= 0.0) {
    throw ad::DomainError("mixture nll: dt must be > 0");
  }
  Eigen::VectorXd y = dt_hours.array().log();
  Eigen::MatrixXd y_exp = y.replicate(1, k);
  ad::Var z = ad::cdiv(ad::sub(ad::constant(y_exp), p.mu), p.sigma);
  ad::Var terms = ad::sub(ad::sub(p.log_w, ad::vlog(p.sigma)),
                          ad::scale(ad::square(z), 0.5));
  ad::Var logp = ad::add_scalar(
      ad::sub(ad::logsumexp_rows(terms), ad::constant(Eigen::MatrixXd(y))),
      -kHalfLog2Pi);
  return ad::neg(ad::mean(logp));
}

namespace {
// A(m, s) = E|Z - m| for Z ~ N(0, s^2): m(2 Phi(m/s) - 1) + 2 s phi(m/s)
ad::Var crps_a(const ad::Var& m, const ad::Var& s) {
  ad::Var x = ad::cdiv(m, s);
  ad::Var erf_term = ad::verf(ad::scale(x, 1.0 / kSqrt2));
  ad::Var phi = ad::scale(ad::vexp(ad::scale(ad::square(x), -0.5)),
                          kInvSqrt2Pi);
  return ad::add(ad::mul(m, erf_term), ad::scale(ad::mul(s, phi), 2.0));
}
}  // namespace

ad::Var mixture_crps(const MixParams& p, const Eigen::VectorXd& y_true) {
  long n = p.log_w->rows(), k = p.log_w->cols();
  if (y_true.size() != n) throw ad::ShapeError("crps: batch mismatch");
  ad::Var w = ad::vexp(p.log_w);
  Eigen::MatrixXd y_exp = y_true.replicate(1, k);
  ad::Var term1 = ad::sum_rows(
      ad::mul(w, crps_a(ad::sub(ad::constant(y_exp), p.mu), p.sigma)));
  ad::Var term2;
  for (long i = 0; i < k; ++i) {
    ad::Var wi = ad::slice_cols(w, i, 1);
    ad::Var mi = ad::slice_cols(p.mu, i, 1);
    ad::Var si2 = ad::square(ad::slice_cols(p.sigma, i, 1));
    for (long j = 0; j < k; ++j) {
      ad::Var contrib = ad::mul(
          ad::mul(wi, ad::slice_cols(w, j, 1)),
          crps_a(ad::sub(mi, ad::slice_cols(p.mu, j, 1)),
                 ad::vsqrt(ad::add(
                     si2, ad::square(ad::slice_cols(p.sigma, j, 1))))));
      term2 = term2 ? ad::add(term2, contrib) : contrib;
    }
  }
  return ad::mean(ad::sub(term1, ad::scale(term2, 0.5)));
}

double mixture_median(const Eigen::VectorXd& w, const Eigen::VectorXd& mu,
                      const Eigen::VectorXd& sigma) {
  long k = w.size();
  if (mu.size() != k || sigma.size() != k || k < 1) {
    throw ad::ShapeError("mixture median: parameter size mismatch");
  }
  if (sigma.minCoeff() <= 0.0 || w.minCoeff() < 0.0 ||
      std::abs(w.sum() - 1.0) > 1e-6) {
    throw ad::DomainError("mixture median: invalid parameters");
  }
  auto cdf = [&](double y) {
    double c = 0.0;
    for (long i = 0; i < k; ++i) {
      c += w(i) * 0.5 * (1.0 + std::erf((y - mu(i)) / (sigma(i) * kSqrt2)));
    }
    return c;
  };
  double lo = (mu - 10.0 * sigma).minCoeff();
  double hi = (mu + 10.0 * sigma).maxCoeff();
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    (cdf(mid) < 0.5 ? lo : hi) = mid;
  }
  return std::exp(0.5 * (lo + hi));
}

double crps_empirical(const Eigen::VectorXd& samples, double y_true) {
  long n = samples.size();
  if (n < 1) throw ad::DomainError("crps: no samples");
  std::vector<double> v(samples.data(), samples.data() + n);
  std::sort(v.begin(), v.end());
  double t1 = 0.0, pair_sum = 0.0;
  for (long i = 0; i < n; ++i) {
    t1 += std::abs(v[i] - y_true);
    pair_sum += (2.0 * i + 1.0 - n) * v[i];
  }
  return t1 / n - pair_sum / (static_cast<double>(n) * n);
}

double floor_dt_hours(double dt_hours) {
  return std::max(dt_hours, 1.0 / 3600.0);
}

// ---------------------------------------------------------------------------
// User head

UserHead::UserHead(ad::ParamStore& store, const std::string& prefix,
                   int n_users, int d, double tau_u, double momentum,
                   std::uint64_t seed)
    : n_users_(n_users), tau_u_(tau_u), momentum_(momentum) {
  if (n_users < 1) throw std::invalid_argument("user head: no users");
  if (tau_u <= 0.0) throw ad::DomainError("user head: tau must be > 0");
  if (momentum < 0.0 || momentum > 1.0) {
    throw ad::DomainError("user head: momentum must be in [0, 1]");
  }
  // prototypes are EMA-maintained, never gradient-trained
  protos_ = store.add(prefix + ".prototypes", sphere_init(n_users, d, seed),
                      /*trainable=*/false);
}

ad::Var UserHead::logits(const ad::Var& beta) const {
  if (beta->cols() != protos_->cols()) {
    throw ad::ShapeError("user head: width mismatch");
  }
  Eigen::MatrixXd pn = protos_->value;
  for (long i = 0; i < pn.rows(); ++i) {
    double nrm = pn.row(i).norm();
    if (nrm <= 0.0) throw ad::DomainError("user head: zero-norm prototype");
    pn.row(i) /= nrm;
  }
  return ad::scale(ad::matmul(ad::l2_normalize_rows(beta),
                              ad::constant(Eigen::MatrixXd(pn.transpose()))),
                   1.0 / tau_u_);
}

ad::Var UserHead::ce_loss(const ad::Var& logits,
                          const std::vector<int>& users) const {
  if (static_cast<long>(users.size()) != logits->rows()) {
    throw ad::ShapeError("user CE: target count mismatch");
  }
  Eigen::MatrixXd t = onehot_rows(users, n_users_, "user CE");
  ad::Var logp = ad::sub(
      logits, ad::matmul(ad::logsumexp_rows(logits),
                         ad::constant(Eigen::MatrixXd::Ones(1, n_users_))));
  return ad::neg(ad::mean(ad::sum_rows(ad::mul(logp, ad::constant(t)))));
}

void UserHead::update_prototypes(const Eigen::MatrixXd& betas,
                                 const std::vector<int>& users) {
  if (static_cast<long>(users.size()) != betas.rows() ||
      betas.cols() != protos_->cols()) {
    throw ad::ShapeError("prototype update: shape mismatch");
  }
  for (std::size_t i = 0; i < users.size(); ++i) {
    int u = users[i];
    if (u < 0 || u >= n_users_) {
      throw std::out_of_range("prototype update: user out of range");
    }
    protos_->value.row(u) = momentum_ * protos_->value.row(u) +
                            (1.0 - momentum_) * betas.row(i);
  }
}

ad::Var supcon_loss(const ad::Var& beta, const std::vector<int>& labels,
                    double tau_c) {
  if (tau_c <= 0.0) throw ad::DomainError("supcon: tau must be > 0");
  long n = beta->rows();
  if (static_cast<long>(labels.size()) != n) {
    throw ad::ShapeError("supcon: label count mismatch");
  }
  Eigen::MatrixXd pos = Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd valid = Eigen::MatrixXd::Zero(n, 1);
  int n_valid = 0;
  for (long i = 0; i < n; ++i) {
    int cnt = 0;
    for (long j = 0; j < n; ++j) {
      if (j != i && labels[j] == labels[i]) ++cnt;
    }
    if (cnt == 0) continue;
    ++n_valid;
    valid(i, 0) = 1.0;
    for (long j = 0; j < n; ++j) {
      if (j != i && labels[j] == labels[i]) pos(i, j) = 1.0 / cnt;
    }
  }
  if (n_valid == 0) return ad::scalar_const(0.0);

  ad::Var z = ad::l2_normalize_rows(beta);
  ad::Var sim = ad::scale(ad::matmul(z, ad::transpose(z)), 1.0 / tau_c);
  Eigen::MatrixXd diag_mask = Eigen::MatrixXd::Zero(n, n);
  diag_mask.diagonal().setConstant(-1e30);
  ad::Var lse = ad::logsumexp_rows(ad::add(sim, ad::constant(diag_mask)));
  ad::Var total = ad::sub(ad::sum(ad::mul(sim, ad::constant(pos))),
                          ad::sum(ad::mul(lse, ad::constant(valid))));
  return ad::neg(ad::scale(total, 1.0 / n_valid));
}

}  // namespace gstm::heads
