#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "gstm/lcb.hpp"

#include <cmath>
#include <random>

using namespace gstm;
using namespace gstm::lcb;
using Mat = Eigen::MatrixXd;

namespace {
Mat rnd(long r, long c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Mat m(r, c);
  for (long i = 0; i < r; ++i)
    for (long j = 0; j < c; ++j) m(i, j) = g(rng);
  return m;
}

// random orthogonal matrix via QR
Mat random_rotation(long d, std::uint64_t seed) {
  Eigen::HouseholderQR<Mat> qr(rnd(d, d, seed));
  Mat q = qr.householderQ();
  return q;
}
}  // namespace

TEST_CASE("long query: first row, constancy, permutation invariance") {
  long n = 5, d = 6;
  Mat hm = rnd(n, d, 1);
  ad::Var q = long_query(ad::constant(hm));
  ad::Var q1 = ad::layernorm_rows(ad::constant(Mat(hm.row(0))));
  CHECK((q->value.row(0) - q1->value.row(0)).cwiseAbs().maxCoeff() < 1e-12);

  // identical tokens: query constant in i
  Mat same = hm.row(2).replicate(n, 1);
  ad::Var qs = long_query(ad::constant(same));
  for (long i = 1; i < n; ++i) {
    CHECK((qs->value.row(i) - qs->value.row(0)).cwiseAbs().maxCoeff() < 1e-12);
  }

  // permuting the prefix leaves the last query unchanged (mean pool)
  Mat perm = hm;
  perm.row(0) = hm.row(3);
  perm.row(3) = hm.row(0);
  ad::Var qp = long_query(ad::constant(perm));
  CHECK((qp->value.row(n - 1) - q->value.row(n - 1)).cwiseAbs().maxCoeff() <
        1e-12);
}

TEST_CASE("select: uniform keys, sharp temperature, shift invariance") {
  long n = 3, d = 8, k = 5;
  Mat qm = rnd(n, d, 2);
  // identical keys -> uniform weights
  Mat keys = rnd(1, d, 3).replicate(k, 1);
  ad::Var w = select(ad::constant(qm), ad::constant(keys), 0.5);
  CHECK((w->value.array() - 1.0 / k).abs().maxCoeff() < 1e-12);

  // tau -> 0+ concentrates on the argmax key
  Mat keys2 = rnd(k, d, 4);
  ad::Var sharp = select(ad::constant(qm), ad::constant(keys2), 1e-4);
  for (long i = 0; i < n; ++i) {
    long arg;
    (qm.row(i) * keys2.transpose()).maxCoeff(&arg);
    CHECK(sharp->value(i, arg) > 0.999);
    CHECK(std::abs(sharp->value.row(i).sum() - 1.0) < 1e-12);
  }

  // adding a constant to all key scores changes nothing: shift keys along a
  // direction orthogonal to nothing -- emulate by adding c to the score via
  // keys + (c / ||q||^2) q is row-dependent, so instead check the softmax
  // property directly on logits
  ad::Var base = select(ad::constant(qm), ad::constant(keys2), 1.0);
  Mat shifted_logits = qm * keys2.transpose();
  shifted_logits.array() += 7.3;
  ad::Var shifted = ad::softmax_rows(ad::constant(shifted_logits));
  CHECK((base->value - shifted->value).cwiseAbs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(select(ad::constant(qm), ad::constant(keys2), 0.0),
                  ad::DomainError);
}

TEST_CASE("barycenter: one-hot, two-anchor closed form, degeneracy") {
  long d = 4;
  Mat anchors = Mat::Zero(2, d);
  anchors(0, 0) = 1.0;  // e1
  anchors(1, 1) = 1.0;  // e2
  Mat w(1, 2);
  w << 1.0, 0.0;
  ad::Var b = barycenter(ad::constant(w), ad::constant(anchors));
  CHECK((b->value.row(0) - anchors.row(0)).cwiseAbs().maxCoeff() < 1e-12);

  w << 0.5, 0.5;
  ad::Var b2 = barycenter(ad::constant(w), ad::constant(anchors));
  CHECK(b2->value(0, 0) == doctest::Approx(1.0 / std::sqrt(2.0)));
  CHECK(b2->value(0, 1) == doctest::Approx(1.0 / std::sqrt(2.0)));
  CHECK(b2->value.row(0).norm() == doctest::Approx(1.0));

  // antipodal anchors with equal weights
  Mat anti = anchors;
  anti.row(1) = -anchors.row(0);
  CHECK_THROWS_AS(barycenter(ad::constant(w), ad::constant(anti)),
                  ad::DomainError);
}

TEST_CASE("barycenter rotation equivariance") {
  long d = 6, k = 4, n = 3;
  Mat anchors = rnd(k, d, 5);
  for (long i = 0; i < k; ++i) anchors.row(i).normalize();
  Mat w = rnd(n, k, 6).array().abs();
  for (long i = 0; i < n; ++i) w.row(i) /= w.row(i).sum();
  Mat R = random_rotation(d, 7);
  ad::Var b = barycenter(ad::constant(w), ad::constant(anchors));
  ad::Var br = barycenter(ad::constant(w), ad::constant(Mat(anchors * R)));
  CHECK((br->value - b->value * R).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("entropy floor cases") {
  // uniform over K: H = ln K -> no penalty for eps <= ln K
  long k = 4;
  ad::Var uni = ad::constant(Mat::Constant(2, k, 1.0 / k));
  CHECK(entropy_floor({uni}, 0.5)->value(0, 0) == doctest::Approx(0.0));
  CHECK(entropy_floor({uni}, 0.0)->value(0, 0) == doctest::Approx(0.0));
  // one-hot (softened to stay in the log domain): H ~ 0 -> penalty ~ eps
  Mat onehot = Mat::Constant(1, k, 1e-12);
  onehot(0, 0) = 1.0 - 3e-12;
  double pen = entropy_floor({ad::constant(onehot)}, 0.5)->value(0, 0);
  CHECK(pen == doctest::Approx(0.5).epsilon(1e-6));
  // two weight sets accumulate
  double both =
      entropy_floor({ad::constant(onehot), uni}, 0.5)->value(0, 0);
  CHECK(both == doctest::Approx(pen));
  CHECK_THROWS_AS(entropy_floor({uni}, -0.1), ad::DomainError);
}

TEST_CASE("bank forward: shapes, invariants, zero hypernet") {
  LcbConfig cfg;
  cfg.d = 8;
  cfg.hidden = 8;
  cfg.anchors_per_domain = 4;
  ad::ParamStore store;
  LifestyleBank bank(store, "lcb", cfg, 11);
  long n = 5;
  ad::Var h = ad::constant(rnd(n, cfg.d, 12));
  auto r = bank.forward(h);
  CHECK(r.prompt->rows() == n);
  CHECK(r.prompt->cols() == cfg.d);
  REQUIRE(r.weights.size() == 3);
  for (const auto& w : r.weights) {
    for (long i = 0; i < n; ++i) {
      CHECK(std::abs(w->value.row(i).sum() - 1.0) < 1e-12);
    }
  }
  // anchors start unit-norm; retraction restores the invariant after a fake
  // gradient step
  for (int dom = 0; dom < 3; ++dom) {
    Mat& a = bank.anchors(dom)->value;
    for (long i = 0; i < a.rows(); ++i) {
      CHECK(a.row(i).norm() == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
  bank.anchors(0)->value *= 3.7;
  bank.retract_anchors();
  for (long i = 0; i < cfg.anchors_per_domain; ++i) {
    CHECK(bank.anchors(0)->value.row(i).norm() ==
          doctest::Approx(1.0).epsilon(1e-9));
  }

  // zeroed hypernet output layer (weights and biases) -> zero prompt
  for (int dom = 0; dom < 3; ++dom) {
    store.at("lcb.dom" + std::to_string(dom) + ".h2_w").var->value.setZero();
    store.at("lcb.dom" + std::to_string(dom) + ".h2_b").var->value.setZero();
  }
  auto r0 = bank.forward(h);
  CHECK(r0.prompt->value.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gradients through the bank pass FD") {
  LcbConfig cfg;
  cfg.d = 6;
  cfg.hidden = 5;
  cfg.anchors_per_domain = 3;
  cfg.domains = 2;
  cfg.temperatures = {0.7, 1.3};
  ad::ParamStore store;
  LifestyleBank bank(store, "lcb", cfg, 20);
  long n = 4;
  ad::Var h = store.add("h", rnd(n, cfg.d, 21));
  Mat R = rnd(n, cfg.d, 22);
  auto loss_fn = [&]() {
    auto r = bank.forward(h);
    return ad::add(ad::sum(ad::mul(r.prompt, ad::constant(R))),
                   ad::scale(bank.entropy_penalty(r), 0.5));
  };
  auto reports = ad::finite_diff_check(loss_fn, store, 1e-6, 1e-4);
  for (const auto& r : reports) {
    INFO(r.param, " err=", r.max_rel_err);
    CHECK(r.pass);
  }
}
