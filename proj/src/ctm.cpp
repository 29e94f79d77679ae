#include "gstm/ctm.hpp"

#include <cmath>
#include <random>

namespace gstm::ctm {

namespace {
Eigen::MatrixXd gauss_init(long r, long c, double std_dev,
                           std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, std_dev);
  Eigen::MatrixXd m(r, c);
  for (long i = 0; i < r; ++i)
    for (long j = 0; j < c; ++j) m(i, j) = g(rng);
  return m;
}
}  // namespace

ad::Var decay(const ad::Var& m, double dt_s, const ad::Var& lambda) {
  if (dt_s < 0.0) throw ad::DomainError("decay: negative time gap");
  if (m->rows() != lambda->rows() || m->cols() != lambda->cols()) {
    throw ad::ShapeError("decay: shape mismatch");
  }
  if (lambda->value.minCoeff() <= 0.0) {
    throw ad::DomainError("decay: rates must be positive");
  }
  return ad::mul(m, ad::vexp(ad::scale(lambda, -dt_s)));
}

PreferenceTracker::PreferenceTracker(int n_categories, double momentum_short,
                                     double momentum_long, double smoothing)
    : ms_(momentum_short), ml_(momentum_long), eps_(smoothing),
      n_(n_categories) {
  if (n_categories < 1) throw std::invalid_argument("no categories");
  if (ms_ <= 0.0 || ms_ >= 1.0 || ml_ <= 0.0 || ml_ >= 1.0) {
    throw std::invalid_argument("momenta must be in (0,1)");
  }
  if (eps_ <= 0.0) throw std::invalid_argument("smoothing must be positive");
  reset();
}

void PreferenceTracker::reset() {
  short_ = Eigen::VectorXd::Constant(n_, 1.0 / n_);
  long_ = Eigen::VectorXd::Constant(n_, 1.0 / n_);
}

void PreferenceTracker::observe(int category) {
  if (category < 0 || category >= n_) {
    throw std::out_of_range("PreferenceTracker: bad category");
  }
  short_ *= ms_;
  long_ *= ml_;
  short_(category) += 1.0 - ms_;
  long_(category) += 1.0 - ml_;
}

Eigen::VectorXd PreferenceTracker::smoothed(const Eigen::VectorXd& raw) const {
  Eigen::VectorXd p = raw.array() + eps_;
  return p / p.sum();
}

Eigen::VectorXd PreferenceTracker::p_short() const { return smoothed(short_); }
Eigen::VectorXd PreferenceTracker::p_long() const { return smoothed(long_); }

double PreferenceTracker::surprisal(int category) const {
  if (category < 0 || category >= n_) {
    throw std::out_of_range("PreferenceTracker: bad category");
  }
  return -std::log(p_long()(category));
}

double PreferenceTracker::kl_short_long() const {
  Eigen::VectorXd ps = p_short(), pl = p_long();
  double kl = 0.0;
  for (int i = 0; i < n_; ++i) kl += ps(i) * std::log(ps(i) / pl(i));
  return std::max(0.0, kl);
}

ad::Var dual_gate(const ad::Var& recency_feat, const ad::Var& novelty_feat,
                  const ad::Var& W_r, const ad::Var& W_n,
                  const ad::Var& alpha_raw) {
  if (W_r->rows() != recency_feat->cols() ||
      W_n->rows() != novelty_feat->cols()) {
    throw ad::ShapeError("dual_gate: feature width mismatch");
  }
  ad::Var r = ad::sigmoid(ad::matmul(recency_feat, W_r));
  ad::Var n = ad::sigmoid(ad::matmul(novelty_feat, W_n));
  ad::Var alpha = ad::sigmoid(alpha_raw);  // 1x1
  long d = r->cols();
  ad::Var av = ad::matmul(alpha, ad::constant(Eigen::MatrixXd::Ones(1, d)));
  ad::Var one_minus = ad::add_scalar(ad::neg(av), 1.0);
  return ad::add(ad::mul(av, r), ad::mul(one_minus, n));
}

UpdateResult update(const ad::Var& m_minus, const ad::Var& s_row,
                    const ad::Var& rho, const ad::Var& B) {
  UpdateResult out;
  ad::Var impulse = ad::mul(ad::matmul(s_row, B), rho);
  out.m_plus = ad::add(m_minus, impulse);
  out.h = ad::layernorm_rows(ad::add(s_row, out.m_plus));
  return out;
}

ad::Var nhp_loss(const ad::Var& H, const std::vector<double>& dt_next,
                 const ad::Var& w, const ad::Var& b) {
  long n = H->rows();
  if (static_cast<long>(dt_next.size()) != n) {
    throw ad::ShapeError("nhp_loss: interval count mismatch");
  }
  Eigen::MatrixXd dts(n, 1);
  for (long i = 0; i < n; ++i) {
    if (dt_next[i] <= 0.0) {
      throw ad::DomainError("nhp_loss: intervals must be positive");
    }
    dts(i, 0) = dt_next[i];
  }
  ad::Var bias = ad::matmul(ad::constant(Eigen::MatrixXd::Ones(n, 1)), b);
  ad::Var lam = ad::softplus(ad::add(ad::matmul(H, w), bias));
  ad::Var terms = ad::sub(ad::mul(lam, ad::constant(dts)), ad::vlog(lam));
  return ad::sum(terms);
}

CtmCell::CtmCell(ad::ParamStore& store, const std::string& prefix,
                 const CtmConfig& cfg, const temporal::FourierBank& bank,
                 std::uint64_t seed)
    : cfg_(cfg), bank_(&bank) {
  int d = cfg.d;
  // softplus(raw) ~= 0.693 at raw = 0.23: decay half-life of about an hour
  lambda_raw_ = store.add(prefix + ".lambda_raw",
                          Eigen::MatrixXd::Constant(1, d, 0.23));
  B_ = store.add(prefix + ".B",
                 gauss_init(d, d, 1.0 / std::sqrt(d), seed + 1));
  alpha_raw_ = store.add(prefix + ".alpha_raw", Eigen::MatrixXd::Zero(1, 1));
  int r_width = 1 + bank.dim();
  w_r_ = store.add(prefix + ".w_r",
                   gauss_init(r_width, d, 1.0 / std::sqrt(r_width), seed + 2));
  w_n_ = store.add(prefix + ".w_n", gauss_init(3, d, 0.5, seed + 3));
  nhp_w_ = store.add(prefix + ".nhp_w",
                     gauss_init(d, 1, 1.0 / std::sqrt(d), seed + 4));
  nhp_b_ = store.add(prefix + ".nhp_b", Eigen::MatrixXd::Zero(1, 1));
}

ad::Var CtmCell::lambda() const { return ad::softplus(lambda_raw_); }

CtmCell::ForwardResult CtmCell::forward(const ad::Var& s,
                                        const std::vector<double>& ts,
                                        const std::vector<int>& categories,
                                        int n_categories) const {
  long n = s->rows();
  if (static_cast<long>(ts.size()) != n ||
      static_cast<long>(categories.size()) != n) {
    throw ad::ShapeError("ctm: sequence length mismatch");
  }
  if (s->cols() != cfg_.d) throw ad::ShapeError("ctm: token width mismatch");
  std::vector<double> gaps = temporal::deltas(ts);

  PreferenceTracker prefs(n_categories, cfg_.momentum_short,
                          cfg_.momentum_long, cfg_.smoothing);
  ad::Var lam = lambda();
  ad::Var m = ad::constant(Eigen::MatrixXd::Zero(1, cfg_.d));
  ad::Var s_bar = ad::constant(Eigen::MatrixXd::Zero(1, cfg_.d));

  ForwardResult out;
  std::vector<ad::Var> hs;
  for (long i = 0; i < n; ++i) {
    double dt_h = gaps[i] / cfg_.dt_unit_s;
    ad::Var m_minus = decay(m, dt_h, lam);

    double nu = prefs.surprisal(categories[i]);
    double kl = prefs.kl_short_long();
    out.surprisal.push_back(nu);
    out.kl.push_back(kl);

    ad::Var s_row = ad::slice_rows(s, i, 1);
    // novelty deviation from the causal running mean of earlier tokens; kept
    // on the tape so its gradient reaches the token encoder
    ad::Var dev;
    if (i == 0) {
      dev = ad::constant(Eigen::MatrixXd::Zero(1, 1));
    } else {
      ad::Var diff = ad::sub(s_row, s_bar);
      dev = ad::vsqrt(ad::add_scalar(ad::sum(ad::square(diff)), 1e-12));
    }
    ad::Var rfeat = ad::concat_cols(
        {ad::constant(Eigen::MatrixXd::Constant(1, 1, std::log1p(dt_h))),
         bank_->encode_batch({ts[i]})});
    Eigen::MatrixXd nk(1, 2);
    nk << nu, kl;
    ad::Var nfeat = ad::concat_cols({ad::constant(nk), dev});
    ad::Var rho = dual_gate(rfeat, nfeat, w_r_, w_n_, alpha_raw_);

    UpdateResult up = update(m_minus, s_row, rho, B_);
    m = up.m_plus;
    hs.push_back(up.h);

    prefs.observe(categories[i]);
    s_bar = ad::scale(ad::add(ad::scale(s_bar, static_cast<double>(i)), s_row),
                      1.0 / static_cast<double>(i + 1));
  }
  out.h = ad::concat_rows(hs);
  return out;
}

}  // namespace gstm::ctm
