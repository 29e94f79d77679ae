#include "gstm/lcb.hpp"

#include <cmath>
#include <random>

namespace gstm::lcb {

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

Eigen::MatrixXd sphere_init(long k, long d, std::uint64_t seed) {
  Eigen::MatrixXd m = gauss_init(k, d, 1.0, seed);
  for (long i = 0; i < k; ++i) m.row(i).normalize();
  return m;
}
}  // namespace

ad::Var long_query(const ad::Var& h) {
  long n = h->rows();
  if (n < 1) throw ad::ShapeError("long_query: empty sequence");
  Eigen::MatrixXd pool = Eigen::MatrixXd::Zero(n, n);
  for (long i = 0; i < n; ++i)
    for (long j = 0; j <= i; ++j) pool(i, j) = 1.0 / static_cast<double>(i + 1);
  return ad::layernorm_rows(ad::matmul(ad::constant(pool), h));
}

ad::Var select(const ad::Var& q, const ad::Var& keys, double tau) {
  if (tau <= 0.0) throw ad::DomainError("select: temperature must be > 0");
  if (q->cols() != keys->cols()) {
    throw ad::ShapeError("select: query/key width mismatch");
  }
  return ad::softmax_rows(
      ad::scale(ad::matmul(q, ad::transpose(keys)), 1.0 / tau));
}

ad::Var barycenter(const ad::Var& weights, const ad::Var& anchors,
                   double tolerance) {
  if (weights->cols() != anchors->rows()) {
    throw ad::ShapeError("barycenter: weight/anchor count mismatch");
  }
  ad::Var raw = ad::matmul(weights, anchors);
  for (long i = 0; i < raw->rows(); ++i) {
    if (raw->value.row(i).norm() <= tolerance) {
      throw ad::DomainError(
          "barycenter: degenerate resultant (norm <= tolerance) at row " +
          std::to_string(i));
    }
  }
  return ad::l2_normalize_rows(raw);
}

ad::Var entropy_floor(const std::vector<ad::Var>& weight_sets, double eps) {
  if (eps < 0.0) throw ad::DomainError("entropy_floor: eps must be >= 0");
  ad::Var total = ad::scalar_const(0.0);
  for (const auto& w : weight_sets) {
    ad::Var ent = ad::neg(ad::sum_rows(ad::mul(w, ad::vlog(w))));  // n x 1
    total = ad::add(total, ad::sum(ad::relu(ad::add_scalar(ad::neg(ent),
                                                           eps))));
  }
  return total;
}

LifestyleBank::LifestyleBank(ad::ParamStore& store, const std::string& prefix,
                             const LcbConfig& cfg, std::uint64_t seed)
    : cfg_(cfg) {
  if (cfg.anchors_per_domain < 2) {
    throw std::invalid_argument("bank needs at least 2 anchors per domain");
  }
  if (cfg_.temperatures.empty()) {
    cfg_.temperatures.assign(cfg_.domains, 0.5);
  }
  if (static_cast<int>(cfg_.temperatures.size()) != cfg_.domains) {
    throw std::invalid_argument("one temperature per domain required");
  }
  int d = cfg_.d, k = cfg_.anchors_per_domain, hid = cfg_.hidden;
  for (int dom = 0; dom < cfg_.domains; ++dom) {
    std::string base = prefix + ".dom" + std::to_string(dom);
    anchors_.push_back(
        store.add(base + ".anchors", sphere_init(k, d, seed + 10 * dom)));
    keys_.push_back(store.add(
        base + ".keys", gauss_init(k, d, 1.0 / std::sqrt(d), seed + 10 * dom + 1)));
    h1_w_.push_back(store.add(
        base + ".h1_w",
        gauss_init(2 * d, hid, 1.0 / std::sqrt(2.0 * d), seed + 10 * dom + 2)));
    h1_b_.push_back(store.add(base + ".h1_b", Eigen::MatrixXd::Zero(1, hid)));
    h2_w_.push_back(store.add(
        base + ".h2_w",
        gauss_init(hid, d, 1.0 / std::sqrt(hid), seed + 10 * dom + 3)));
    h2_b_.push_back(store.add(base + ".h2_b", Eigen::MatrixXd::Zero(1, d)));
  }
  prompt_proj_ = store.add(
      prefix + ".prompt_proj",
      gauss_init(cfg_.domains * d, d, 1.0 / std::sqrt(cfg_.domains * d),
                 seed + 99));
}

LifestyleBank::ForwardResult LifestyleBank::forward(const ad::Var& h) const {
  if (h->cols() != cfg_.d) throw ad::ShapeError("lcb: token width mismatch");
  ForwardResult out;
  out.query = long_query(h);
  std::vector<ad::Var> prompts;
  for (int dom = 0; dom < cfg_.domains; ++dom) {
    ad::Var w = select(out.query, keys_[dom], cfg_.temperatures[dom]);
    out.weights.push_back(w);
    ad::Var b = barycenter(w, anchors_[dom]);
    ad::Var in = ad::concat_cols({out.query, b});
    ad::Var hidden = ad::vtanh(
        ad::add_rowvec(ad::matmul(in, h1_w_[dom]), h1_b_[dom]));
    prompts.push_back(
        ad::add_rowvec(ad::matmul(hidden, h2_w_[dom]), h2_b_[dom]));
  }
  out.prompt = ad::matmul(ad::concat_cols(prompts), prompt_proj_);
  return out;
}

ad::Var LifestyleBank::entropy_penalty(const ForwardResult& r) const {
  return entropy_floor(r.weights, cfg_.entropy_floor);
}

void LifestyleBank::retract_anchors() {
  for (auto& a : anchors_) {
    for (long i = 0; i < a->rows(); ++i) {
      double nrm = a->value.row(i).norm();
      if (nrm <= 0.0) {
        throw ad::DomainError("retract_anchors: zero-norm anchor");
      }
      a->value.row(i) /= nrm;
    }
  }
}

}  // namespace gstm::lcb
