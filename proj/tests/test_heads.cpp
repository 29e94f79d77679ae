#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "gstm/heads.hpp"

#include <cmath>
#include <random>

using namespace gstm;
using namespace gstm::heads;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

namespace {
Mat rnd(long r, long c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Mat m(r, c);
  for (long i = 0; i < r; ++i)
    for (long j = 0; j < c; ++j) m(i, j) = g(rng);
  return m;
}

// POIs scattered in two far-apart clusters so they land in distinct cells
std::vector<geo::GeoPoint> two_cluster_pois() {
  return {{40.0, -74.0}, {40.02, -74.01}, {40.01, -73.99},
          {-33.9, 151.2}, {-33.88, 151.21}};
}
}  // namespace

TEST_CASE("location head: partition, normalization, marginal consistency") {
  geo::HexIndexer idx;
  ad::ParamStore store;
  auto pois = two_cluster_pois();
  LocationHead head(store, "loc", 6, pois, idx, 6, 1);
  CHECK(head.n_cells() == 2);
  CHECK(head.cell_of_poi(0) == head.cell_of_poi(1));
  CHECK(head.cell_of_poi(0) != head.cell_of_poi(3));

  long n = 3;
  ad::Var beta = ad::constant(rnd(n, 6, 2));
  auto d = head.distribution(beta);
  for (long i = 0; i < n; ++i) {
    CHECK(std::abs(d.p_poi->value.row(i).sum() - 1.0) < 1e-12);
    CHECK(std::abs(d.p_cell->value.row(i).sum() - 1.0) < 1e-12);
    // POIs of one cell sum to that cell's probability (exact marginal)
    double cell0 = d.p_poi->value(i, 0) + d.p_poi->value(i, 1) +
                   d.p_poi->value(i, 2);
    CHECK(cell0 == doctest::Approx(d.p_cell->value(i, head.cell_of_poi(0)))
                       .epsilon(1e-12));
  }
}

TEST_CASE("location head: degenerate cases and CE values") {
  geo::HexIndexer idx;
  // single POI: p = 1, CE = 0
  {
    ad::ParamStore store;
    LocationHead head(store, "loc", 4, {{10.0, 10.0}}, idx, 6, 3);
    auto d = head.distribution(ad::constant(rnd(2, 4, 4)));
    CHECK(d.p_poi->value.minCoeff() == doctest::Approx(1.0));
    ad::Var ce = head.ce_loss(d, {0, 0});
    CHECK(ce->value(0, 0) == doctest::Approx(0.0).epsilon(1e-12));
  }
  // one POI per cell: p(l) equals p(h) exactly
  {
    ad::ParamStore store;
    LocationHead head(store, "loc", 4, {{10.0, 10.0}, {-40.0, 100.0}}, idx, 6,
                      5);
    auto d = head.distribution(ad::constant(rnd(3, 4, 6)));
    for (long i = 0; i < 3; ++i) {
      for (int l = 0; l < 2; ++l) {
        CHECK(d.p_poi->value(i, l) ==
              doctest::Approx(d.p_cell->value(i, head.cell_of_poi(l)))
                  .epsilon(1e-12));
        CHECK(d.p_poi_cond->value(i, l) == doctest::Approx(1.0));
      }
    }
  }
  ad::ParamStore store;
  CHECK_THROWS(LocationHead(store, "loc", 4, {}, idx, 6, 7));
}

TEST_CASE("location head gradients pass FD") {
  geo::HexIndexer idx;
  ad::ParamStore store;
  auto pois = two_cluster_pois();
  LocationHead head(store, "loc", 5, pois, idx, 6, 8);
  ad::Var beta = store.add("beta", rnd(3, 5, 9));
  std::vector<int> targets = {0, 3, 2};
  auto loss_fn = [&]() {
    return head.ce_loss(head.distribution(beta), targets);
  };
  for (const auto& r : ad::finite_diff_check(loss_fn, store, 1e-6, 1e-4)) {
    INFO(r.param, " err=", r.max_rel_err);
    CHECK(r.pass);
  }
}

TEST_CASE("cell cost matrix: symmetric, zero diagonal, positive off-diag") {
  geo::HexIndexer idx;
  ad::ParamStore store;
  LocationHead head(store, "loc", 4, two_cluster_pois(), idx, 6, 10);
  Mat C = cell_cost_matrix(head.cells(), idx);
  CHECK(C.rows() == head.n_cells());
  CHECK((C - C.transpose()).cwiseAbs().maxCoeff() == 0.0);
  CHECK(C.diagonal().cwiseAbs().maxCoeff() == 0.0);
  CHECK(C(0, 1) > 1000.0);  // other side of the planet
}

TEST_CASE("sinkhorn: forced-plan identity over random problems") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    long H = 2 + static_cast<long>(u(rng) * 6);
    Mat a(1, H);
    for (long i = 0; i < H; ++i) a(0, i) = 0.05 + u(rng);
    a /= a.sum();
    Mat C = Mat::Zero(H, H);
    for (long i = 0; i < H; ++i)
      for (long j = i + 1; j < H; ++j) C(i, j) = C(j, i) = u(rng) * 10.0;
    double eps = 0.05 + u(rng) * 0.5;
    long target = static_cast<long>(u(rng) * H);
    Vec b = Vec::Zero(H);
    b(target) = 1.0;

    auto res = sinkhorn_ot(ad::constant(a), b, C, eps, 500, 1e-9);
    CHECK(res.converged);
    CHECK(res.marginal_err < 1e-6);
    // one-hot b forces pi(h, target) = a_h: loss = sum_h a_h C(h, target)
    // - eps H(a)
    double expect = 0.0;
    for (long h = 0; h < H; ++h) {
      expect += a(0, h) * C(h, target) + eps * a(0, h) * std::log(a(0, h));
    }
    CHECK(res.loss->value(0, 0) == doctest::Approx(expect).epsilon(1e-6));
    // marginals of the returned plan
    CHECK((res.plan->value.rowwise().sum().transpose() - a.row(0).transpose())
              .cwiseAbs()
              .maxCoeff() < 1e-6);
    CHECK((res.plan->value.colwise().sum().transpose() - b)
              .cwiseAbs()
              .maxCoeff() < 1e-6);
  }
}

TEST_CASE("sinkhorn: permutation invariance and near-degenerate a") {
  Mat a(1, 4);
  a << 0.4, 0.3, 0.2, 0.1;
  Mat C = Mat::Zero(4, 4);
  for (long i = 0; i < 4; ++i)
    for (long j = 0; j < 4; ++j) C(i, j) = std::abs(double(i - j));
  Vec b = Vec::Zero(4);
  b(2) = 1.0;
  auto res = sinkhorn_ot(ad::constant(a), b, C, 0.1, 500, 1e-9);

  // reverse the indexing of a, b, C consistently
  Mat ar = a.rowwise().reverse();
  Mat Cr = C.reverse();
  Vec br = b.reverse();
  auto resr = sinkhorn_ot(ad::constant(ar), br, Cr, 0.1, 500, 1e-9);
  CHECK(resr.loss->value(0, 0) ==
        doctest::Approx(res.loss->value(0, 0)).epsilon(1e-9));

  // a concentrated on the target cell: cost ~ 0, entropy ~ 0
  Mat ac(1, 4);
  ac << 1e-7, 1e-7, 1.0 - 3e-7, 1e-7;
  ac /= ac.sum();
  auto resc = sinkhorn_ot(ad::constant(ac), b, C, 0.1, 500, 1e-9);
  CHECK(std::abs(resc.loss->value(0, 0)) < 1e-4);

  CHECK_THROWS_AS(sinkhorn_ot(ad::constant(a), b, C, 0.0), ad::DomainError);
  Mat bad = C;
  bad(0, 0) = 1.0;
  CHECK_THROWS_AS(sinkhorn_ot(ad::constant(a), b, bad, 0.1), ad::DomainError);
}

TEST_CASE("sinkhorn gradient w.r.t. a passes FD") {
  ad::ParamStore store;
  ad::Var logits = store.add("logits", rnd(1, 5, 12));
  Mat C = Mat::Zero(5, 5);
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.5, 5.0);
  for (long i = 0; i < 5; ++i)
    for (long j = i + 1; j < 5; ++j) C(i, j) = C(j, i) = u(rng);
  Vec b = Vec::Zero(5);
  b(3) = 1.0;
  auto loss_fn = [&]() {
    ad::Var a = ad::softmax_rows(logits);
    return sinkhorn_ot(a, b, C, 0.2, 300, 1e-10).loss;
  };
  for (const auto& r : ad::finite_diff_check(loss_fn, store, 1e-6, 1e-4)) {
    INFO(r.param, " err=", r.max_rel_err);
    CHECK(r.pass);
  }
}

TEST_CASE("vp kernel closed form") {
  VpSchedule sched;
  auto k0 = vp_perturb(0.0, sched);
  CHECK(k0.mean_coef == doctest::Approx(1.0));
  CHECK(k0.variance == doctest::Approx(0.0));

  // constant schedule beta = ln 4: at s=1, integral = ln 4
  VpSchedule flat{std::log(4.0), std::log(4.0)};
  auto k1 = vp_perturb(1.0, flat);
  CHECK(k1.mean_coef == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(k1.variance == doctest::Approx(0.75).epsilon(1e-12));

  for (double s : {0.0, 0.1, 0.35, 0.7, 1.0}) {
    auto k = vp_perturb(s, sched);
    CHECK(k.variance >= 0.0);
    CHECK(k.variance < 1.0);
    // variance preservation: mean_coef^2 + variance <= 1
    CHECK(k.mean_coef * k.mean_coef + k.variance <= 1.0 + 1e-12);
  }
  CHECK_THROWS_AS(vp_perturb(1.5, sched), ad::DomainError);
  CHECK_THROWS_AS(vp_perturb(-0.1, sched), ad::DomainError);
}

TEST_CASE("dsm: conditional-score oracle gives zero loss, zero net matches "
          "analytic expectation") {
  VpSchedule sched;
  long n = 64;
  Vec y0 = rnd(n, 1, 14).col(0);
  std::mt19937_64 rng(15);
  std::normal_distribution<double> gn(0.0, 1.0);
  Vec s(n), noise(n);
  std::uniform_real_distribution<double> us(1e-3, 1.0);
  for (long i = 0; i < n; ++i) s(i) = us(rng);
  for (long i = 0; i < n; ++i) noise(i) = gn(rng);

  // oracle: the exact Gaussian perturbation-kernel score for known y0
  ScoreFn oracle = [&](const ad::Var& y, const Vec& sv) {
    Mat sc(y->rows(), 1);
    for (long i = 0; i < y->rows(); ++i) {
      auto k = vp_perturb(sv(i), sched);
      sc(i, 0) = -(y->value(i, 0) - y0(i) * k.mean_coef) / k.variance;
    }
    return ad::constant(sc);
  };
  CHECK(dsm_loss_at(oracle, y0, s, noise, sched)->value(0, 0) ==
        doctest::Approx(0.0).epsilon(1e-10));

  // zero score net at fixed s: E[loss] = mean over batch of noise^2/var
  ScoreFn zero = [&](const ad::Var& y, const Vec&) {
    return ad::constant(Mat::Zero(y->rows(), 1));
  };
  Vec s_fixed = Vec::Constant(n, 0.5);
  double var = vp_perturb(0.5, sched).variance;
  double expect = noise.array().square().mean() / var;
  CHECK(dsm_loss_at(zero, y0, s_fixed, noise, sched)->value(0, 0) ==
        doctest::Approx(expect).epsilon(1e-10));

  // same seed -> identical loss
  ad::ParamStore store;
  ScoreNet net(store, "sn", 0, 8, 16);
  ScoreFn nf = [&](const ad::Var& y, const Vec& sv) {
    return net.score(y, sv, ad::constant(Mat(y->rows(), 0)), sched);
  };
  double l1 = dsm_loss(nf, y0, sched, 1e-3, 99)->value(0, 0);
  double l2 = dsm_loss(nf, y0, sched, 1e-3, 99)->value(0, 0);
  CHECK(l1 == l2);
}

TEST_CASE("score net gradients pass FD at fixed draws") {
  VpSchedule sched;
  ad::ParamStore store;
  ScoreNet net(store, "sn", 2, 6, 17);
  long n = 5;
  Vec y0 = rnd(n, 1, 18).col(0);
  Mat ctx = rnd(n, 2, 19);
  Vec s(n), noise(n);
  std::mt19937_64 rng(20);
  std::uniform_real_distribution<double> us(0.1, 1.0);
  std::normal_distribution<double> gn(0.0, 1.0);
  for (long i = 0; i < n; ++i) s(i) = us(rng);
  for (long i = 0; i < n; ++i) noise(i) = gn(rng);
  ScoreFn nf = [&](const ad::Var& y, const Vec& sv) {
    return net.score(y, sv, ad::constant(ctx), sched);
  };
  auto loss_fn = [&]() { return dsm_loss_at(nf, y0, s, noise, sched); };
  for (const auto& r : ad::finite_diff_check(loss_fn, store, 1e-6, 1e-4)) {
    INFO(r.param, " err=", r.max_rel_err);
    CHECK(r.pass);
  }
}

TEST_CASE("reverse sampling with the analytic Gaussian score recovers the "
          "target") {
  VpSchedule sched;
  double mu_star = 1.5, sig_star = 0.5;
  // data y0 ~ N(mu*, sig*^2): the marginal at time s is Gaussian too
  ScoreValuesFn score = [&](const Vec& y, double s) {
    auto k = vp_perturb(s, sched);
    double m = mu_star * k.mean_coef;
    double v = sig_star * sig_star * k.mean_coef * k.mean_coef + k.variance;
    return Vec(-(y.array() - m) / v);
  };
  Vec samples = reverse_sample(score, 512, 200, sched, 21);
  double mean = samples.mean();
  double sd = std::sqrt((samples.array() - mean).square().mean());
  CHECK(std::abs(mean - mu_star) < 0.1 * sig_star);
  CHECK(std::abs(sd - sig_star) / sig_star < 0.15);

  // determinism and degenerate runs
  Vec again = reverse_sample(score, 512, 200, sched, 21);
  CHECK((samples - again).cwiseAbs().maxCoeff() == 0.0);
  Vec one_step = reverse_sample(score, 16, 1, sched, 22);
  CHECK(one_step.allFinite());

  // point prediction: all samples equal v -> exp(median) = exp(v)
  Vec flat = Vec::Constant(7, 0.3);
  CHECK(predict_from_samples(flat) == doctest::Approx(std::exp(0.3)));
  CHECK(predict_from_samples(flat, true) == doctest::Approx(std::exp(0.3)));
}

TEST_CASE("mixture: standard log-normal NLL and quadrature normalization") {
  // K=1, mu=0, sigma=1 at dt=1: density 1/sqrt(2 pi), NLL ~ 0.9189
  MixParams p;
  p.log_w = ad::constant(Mat::Zero(1, 1));
  p.mu = ad::constant(Mat::Zero(1, 1));
  p.sigma = ad::constant(Mat::Ones(1, 1));
  Vec dt(1);
  dt << 1.0;
  CHECK(mixture_nll(p, dt)->value(0, 0) ==
        doctest::Approx(0.9189385332).epsilon(1e-9));
  Vec bad(1);
  bad << -1.0;
  CHECK_THROWS_AS(mixture_nll(p, bad), ad::DomainError);

  // random valid parameters: density integrates to 1 (substitute y = log t,
  // Simpson over a wide window)
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    long K = 3;
    Mat w(1, K), mu(1, K), sg(1, K);
    for (long k = 0; k < K; ++k) {
      w(0, k) = 0.1 + u(rng);
      mu(0, k) = -2.0 + 4.0 * u(rng);
      sg(0, k) = 0.3 + 1.5 * u(rng);
    }
    w /= w.sum();
    MixParams q;
    q.log_w = ad::constant(Mat(w.array().log()));
    q.mu = ad::constant(mu);
    q.sigma = ad::constant(sg);
    long m = 4000;
    double lo = -25.0, hi = 25.0, h = (hi - lo) / m;
    double integral = 0.0;
    for (long i = 0; i <= m; ++i) {
      double y = lo + i * h;
      Vec t(1);
      t << std::exp(y);
      // integrand p(t) dt = p(e^y) e^y dy = exp(-nll + y)
      double f = std::exp(-mixture_nll(q, t)->value(0, 0) + y);
      double wgt = (i == 0 || i == m) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
      integral += wgt * f;
    }
    integral *= h / 3.0;
    CHECK(integral == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("mixture median matches Monte Carlo; head params shape up") {
  Vec w(2), mu(2), sg(2);
  w << 0.3, 0.7;
  mu << -0.5, 1.0;
  sg << 0.4, 0.8;
  double med = mixture_median(w, mu, sg);
  // MC oracle
  std::mt19937_64 rng(24);
  std::normal_distribution<double> gn(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  long n = 1000000;
  std::vector<double> ys(n);
  for (long i = 0; i < n; ++i) {
    int k = u(rng) < w(0) ? 0 : 1;
    ys[i] = mu(k) + sg(k) * gn(rng);
  }
  std::nth_element(ys.begin(), ys.begin() + n / 2, ys.end());
  double mc = std::exp(ys[n / 2]);
  CHECK(std::abs(med - mc) / mc < 0.01);

  // K=1: median = e^mu exactly
  Vec w1(1), m1(1), s1(1);
  w1 << 1.0;
  m1 << 0.7;
  s1 << 0.5;
  CHECK(mixture_median(w1, m1, s1) == doctest::Approx(std::exp(0.7)));

  ad::ParamStore store;
  MixtureTimeHead head(store, "mix", 6, 3, 25);
  auto p = head.params(ad::constant(rnd(4, 6, 26)));
  for (long i = 0; i < 4; ++i) {
    CHECK(std::abs(p.log_w->value.row(i).array().exp().sum() - 1.0) < 1e-12);
  }
  CHECK(p.sigma->value.minCoeff() > 0.0);
}

TEST_CASE("crps: closed form vs sample estimator, degenerate forecast") {
  Vec w(3), mu(3), sg(3);
  w << 0.2, 0.5, 0.3;
  mu << -1.0, 0.3, 1.5;
  sg << 0.5, 0.7, 0.3;
  MixParams p;
  p.log_w = ad::constant(Mat(w.transpose().array().log()));
  p.mu = ad::constant(Mat(mu.transpose()));
  p.sigma = ad::constant(Mat(sg.transpose()));
  double y_true = 0.4;
  Vec yv(1);
  yv << y_true;
  double closed = mixture_crps(p, yv)->value(0, 0);

  std::mt19937_64 rng(27);
  std::normal_distribution<double> gn(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  long n = 200000;
  Vec samples(n);
  for (long i = 0; i < n; ++i) {
    double r = u(rng);
    int k = r < w(0) ? 0 : (r < w(0) + w(1) ? 1 : 2);
    samples(i) = mu(k) + sg(k) * gn(rng);
  }
  double empirical = crps_empirical(samples, y_true);
  CHECK(closed == doctest::Approx(empirical).epsilon(0.01));

  Vec flat = Vec::Constant(9, 1.7);
  CHECK(crps_empirical(flat, 0.5) == doctest::Approx(1.2).epsilon(1e-12));
}

TEST_CASE("mixture and crps gradients pass FD") {
  ad::ParamStore store;
  MixtureTimeHead head(store, "mix", 5, 3, 28);
  ad::Var beta = store.add("beta", rnd(3, 5, 29));
  Vec dt(3);
  dt << 0.5, 2.0, 12.0;
  Vec y = dt.array().log();
  auto loss_fn = [&]() {
    auto p = head.params(beta);
    return ad::add(mixture_nll(p, dt), mixture_crps(p, y));
  };
  for (const auto& r : ad::finite_diff_check(loss_fn, store, 1e-6, 1e-4)) {
    INFO(r.param, " err=", r.max_rel_err);
    CHECK(r.pass);
  }
}

TEST_CASE("user head: sharp cosine limit, EMA update, CE gradient") {
  ad::ParamStore store;
  int users = 4, d = 6;
  UserHead head(store, "user", users, d, 0.07, 0.95, 30);

  // beta equal to prototype 2 -> cosine 1 vs < 1; tau small -> p ~ 1
  Mat protos = head.prototypes()->value;
  ad::Var beta = ad::constant(Mat(protos.row(2)));
  ad::Var lg = head.logits(beta);
  Mat pm = lg->value;
  Mat soft = (pm.array() - pm.maxCoeff()).exp();
  soft /= soft.sum();
  CHECK(soft(0, 2) > 0.95);

  // momentum 0 replaces the prototype outright
  UserHead fresh(store, "user0", users, d, 0.07, 0.0, 31);
  Mat b = rnd(1, d, 32);
  fresh.update_prototypes(b, {1});
  CHECK((fresh.prototypes()->value.row(1) - b.row(0)).cwiseAbs().maxCoeff() ==
        0.0);

  // prototypes are not gradient-trainable; beta gradient passes FD
  ad::ParamStore fd_store;
  UserHead h2(fd_store, "user", users, d, 0.1, 0.95, 33);
  ad::Var bparam = fd_store.add("beta", rnd(3, d, 34));
  std::vector<int> targets = {0, 2, 1};
  auto loss_fn = [&]() { return h2.ce_loss(h2.logits(bparam), targets); };
  auto reports = ad::finite_diff_check(loss_fn, fd_store, 1e-6, 1e-4);
  bool saw_protos = false;
  for (const auto& r : reports) {
    if (r.param == "user.prototypes") saw_protos = true;
    INFO(r.param, " err=", r.max_rel_err);
    CHECK(r.pass);
  }
  CHECK(!saw_protos);  // non-trainable, excluded from the check
}

TEST_CASE("supcon: clustered embeddings beat shuffled labels; FD") {
  long d = 5;
  Mat z(4, d);
  z.setZero();
  // two tight clusters
  z(0, 0) = 1.0;
  z(1, 0) = 0.98;
  z(1, 1) = 0.2;
  z(2, 2) = 1.0;
  z(3, 2) = 0.97;
  z(3, 3) = 0.25;
  double clustered =
      supcon_loss(ad::constant(z), {0, 0, 1, 1}, 0.1)->value(0, 0);
  double shuffled =
      supcon_loss(ad::constant(z), {0, 1, 0, 1}, 0.1)->value(0, 0);
  CHECK(clustered < shuffled);

  // no positives anywhere -> zero loss
  CHECK(supcon_loss(ad::constant(z), {0, 1, 2, 3}, 0.1)->value(0, 0) == 0.0);

  ad::ParamStore store;
  ad::Var beta = store.add("beta", rnd(5, 4, 35));
  std::vector<int> labels = {0, 1, 0, 1, 0};
  auto loss_fn = [&]() { return supcon_loss(beta, labels, 0.1); };
  for (const auto& r : ad::finite_diff_check(loss_fn, store, 1e-6, 1e-4)) {
    INFO(r.param, " err=", r.max_rel_err);
    CHECK(r.pass);
  }
}

TEST_CASE("dt floor") {
  CHECK(floor_dt_hours(5.0) == 5.0);
  CHECK(floor_dt_hours(0.0) == doctest::Approx(1.0 / 3600.0));
  CHECK(floor_dt_hours(-2.0) == doctest::Approx(1.0 / 3600.0));
}
