#include "gstm/stce.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace gstm::stce {

namespace {
constexpr double kMaskValue = -1e30;

Eigen::MatrixXd causal_mask(long n) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
  for (long i = 0; i < n; ++i)
    for (long j = i + 1; j < n; ++j) m(i, j) = kMaskValue;
  return m;
}

Eigen::MatrixXd gauss_init(long r, long c, double std_dev,
                           std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, std_dev);
  Eigen::MatrixXd m(r, c);
  for (long i = 0; i < r; ++i)
    for (long j = 0; j < c; ++j) m(i, j) = g(rng);
  return m;
}

// broadcast a 1x1 Var across the rows of an n x m matrix
ad::Var scalar_broadcast(const ad::Var& m, const ad::Var& s) {
  ad::Var col = ad::matmul(ad::constant(Eigen::MatrixXd::Ones(m->rows(), 1)),
                           s);
  return ad::mul_colvec(m, col);
}
}  // namespace

LogKernels log_kernels(const std::vector<data::CheckInEvent>& events,
                       const data::Taxonomy& taxonomy,
                       const geo::HexIndexer& indexer, const StceConfig& cfg) {
  if (cfg.tau_g_km <= 0.0 || cfg.tau_c <= 0.0) {
    throw std::invalid_argument("log_kernels: bandwidths must be positive");
  }
  if (cfg.cell_kernel.rho_adj <= 0.0 || cfg.cell_kernel.epsilon_floor <= 0.0) {
    throw std::invalid_argument("log_kernels: cell kernel floors must be > 0");
  }
  long n = static_cast<long>(events.size());
  LogKernels out;
  out.log_geo.resize(n, n);
  out.log_cat.resize(n, n);
  out.log_cell.resize(n, n);
  out.dist_km.resize(n, n);
  std::vector<geo::CellIndex> cells;
  for (const auto& e : events)
    cells.push_back(indexer.cell_of(e.g, cfg.cell_resolution));
  for (long i = 0; i < n; ++i) {
    for (long j = i; j < n; ++j) {
      double d = geo::haversine(events[i].g, events[j].g);
      out.dist_km(i, j) = out.dist_km(j, i) = d;
      out.log_geo(i, j) = out.log_geo(j, i) = -d / cfg.tau_g_km;
      double td = taxonomy.tree_distance(events[i].category,
                                         events[j].category);
      out.log_cat(i, j) = out.log_cat(j, i) = -td / cfg.tau_c;
      double ck = geo::cell_kernel(cells[i], cells[j], indexer,
                                   cfg.cell_kernel);
      out.log_cell(i, j) = out.log_cell(j, i) = std::log(ck);
    }
  }
  return out;
}

PriorAffinity prior_affinity(const LogKernels& k, const ad::Var& omega_g,
                             const ad::Var& omega_c, const ad::Var& omega_h,
                             int sparsify_zeta) {
  long n = k.log_geo.rows();
  if (n == 0) throw std::invalid_argument("prior_affinity: empty sequence");
  ad::Var logits = ad::add(
      ad::add(scalar_broadcast(ad::constant(k.log_geo), omega_g),
              scalar_broadcast(ad::constant(k.log_cat), omega_c)),
      scalar_broadcast(ad::constant(k.log_cell), omega_h));
  ad::Var pi;
  if (sparsify_zeta > 0 && sparsify_zeta < n) {
    // keep the top-zeta logits per row, renormalize by re-softmaxing
    Eigen::MatrixXd mask = Eigen::MatrixXd::Zero(n, n);
    for (long i = 0; i < n; ++i) {
      std::vector<long> idx(n);
      for (long j = 0; j < n; ++j) idx[j] = j;
      std::nth_element(idx.begin(), idx.begin() + sparsify_zeta - 1,
                       idx.end(), [&](long a, long b) {
                         return logits->value(i, a) > logits->value(i, b);
                       });
      double cut = logits->value(i, idx[sparsify_zeta - 1]);
      int kept = 0;
      for (long j = 0; j < n; ++j) {
        if (logits->value(i, j) >= cut && kept < sparsify_zeta) {
          ++kept;
        } else {
          mask(i, j) = kMaskValue;
        }
      }
    }
    pi = ad::softmax_rows_masked(logits, mask);
  } else {
    pi = ad::softmax_rows(logits);
  }
  PriorAffinity out;
  out.Pi = pi;
  out.S = ad::scale(ad::add(pi, ad::transpose(pi)), 0.5);
  return out;
}

ad::Var struct_attention(const ad::Var& Q, const ad::Var& K, const ad::Var& V,
                         const ad::Var& S, const ad::Var& eta,
                         Eigen::MatrixXd* alpha_out) {
  long n = Q->rows();
  if (S->rows() != n || S->cols() != n) {
    throw ad::ShapeError("struct_attention: S shape mismatch");
  }
  if (S->value.minCoeff() <= 0.0) {
    throw ad::DomainError("struct_attention: prior has non-positive entries");
  }
  double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(Q->cols()));
  ad::Var logits = ad::scale(ad::matmul(Q, ad::transpose(K)), inv_sqrt_d);
  logits = ad::add(logits, scalar_broadcast(ad::vlog(S), eta));
  ad::Var alpha = ad::softmax_rows_masked(logits, causal_mask(n));
  if (alpha_out) *alpha_out = alpha->value;
  return ad::matmul(alpha, V);
}

ad::Var struct_attention_subtractive(const ad::Var& Q, const ad::Var& K,
                                     const ad::Var& V,
                                     const Eigen::MatrixXd& dist_km,
                                     const ad::Var& gamma,
                                     Eigen::MatrixXd* alpha_out) {
  long n = Q->rows();
  if (dist_km.rows() != n || dist_km.cols() != n) {
    throw ad::ShapeError("struct_attention: distance shape mismatch");
  }
  double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(Q->cols()));
  ad::Var logits = ad::scale(ad::matmul(Q, ad::transpose(K)), inv_sqrt_d);
  logits = ad::sub(logits, scalar_broadcast(ad::constant(dist_km), gamma));
  ad::Var alpha = ad::softmax_rows_masked(logits, causal_mask(n));
  if (alpha_out) *alpha_out = alpha->value;
  return ad::matmul(alpha, V);
}

ad::Var multi_view_fuse(const std::vector<ad::Var>& u_views, const ad::Var& x,
                        const ad::Var& W_g) {
  if (u_views.empty()) throw std::invalid_argument("fuse: no views");
  long n = x->rows(), d = x->cols();
  for (const auto& u : u_views) {
    if (u->rows() != n || u->cols() != d) {
      throw ad::ShapeError("fuse: view width mismatch");
    }
  }
  long v_count = static_cast<long>(u_views.size());
  if (W_g->rows() != v_count * d || W_g->cols() != v_count) {
    throw ad::ShapeError("fuse: gate matrix shape mismatch");
  }
  ad::Var gamma = ad::softmax_rows(ad::matmul(ad::concat_cols(u_views), W_g));
  ad::Var mixed;
  for (long v = 0; v < v_count; ++v) {
    ad::Var part = ad::mul_colvec(u_views[v], ad::slice_cols(gamma, v, 1));
    mixed = v == 0 ? part : ad::add(mixed, part);
  }
  return ad::layernorm_rows(ad::add(x, mixed));
}

StceLayer::StceLayer(ad::ParamStore& store, const std::string& prefix, int d,
                     const StceConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), d_(d) {
  double std_dev = 1.0 / std::sqrt(static_cast<double>(d));
  const char* views[kViews] = {"poi", "cat", "cell", "time", "aux"};
  for (int v = 0; v < kViews; ++v) {
    std::string base = prefix + "." + views[v];
    wq_[v] = store.add(base + ".wq", gauss_init(d, d, std_dev, seed + 3 * v));
    wk_[v] =
        store.add(base + ".wk", gauss_init(d, d, std_dev, seed + 3 * v + 1));
    wv_[v] =
        store.add(base + ".wv", gauss_init(d, d, std_dev, seed + 3 * v + 2));
  }
  w_gate_ = store.add(prefix + ".w_gate",
                      Eigen::MatrixXd::Zero(kViews * d, kViews));
  // softplus(eta_raw) = eta_init
  double raw = std::log(std::expm1(std::max(cfg.eta_init, 1e-6)));
  eta_raw_ = store.add(prefix + ".eta_raw",
                       Eigen::MatrixXd::Constant(1, 1, raw));
  gamma_raw_ = store.add(
      prefix + ".gamma_raw",
      Eigen::MatrixXd::Constant(
          1, 1, std::log(std::expm1(std::max(cfg.gamma_init, 1e-6)))));
  omega_g_ = store.add(prefix + ".omega_g", Eigen::MatrixXd::Ones(1, 1));
  omega_c_ = store.add(prefix + ".omega_c", Eigen::MatrixXd::Ones(1, 1));
  omega_h_ = store.add(prefix + ".omega_h", Eigen::MatrixXd::Ones(1, 1));
}

ad::Var StceLayer::eta() const { return ad::softplus(eta_raw_); }

PriorAffinity StceLayer::affinity(const LogKernels& kernels) const {
  return prior_affinity(kernels, omega_g_, omega_c_, omega_h_,
                        cfg_.sparsify_zeta);
}

ad::Var StceLayer::forward(const ad::Var& x, const LogKernels& kernels) const {
  if (x->cols() != d_) throw ad::ShapeError("stce: token width mismatch");
  PriorAffinity pa = affinity(kernels);
  ad::Var e = eta();
  ad::Var g = ad::softplus(gamma_raw_);
  std::vector<ad::Var> us;
  for (int v = 0; v < kViews; ++v) {
    ad::Var q = ad::matmul(x, wq_[v]);
    ad::Var k = ad::matmul(x, wk_[v]);
    ad::Var val = ad::matmul(x, wv_[v]);
    if (cfg_.bias_mode == BiasMode::kLogPrior) {
      us.push_back(struct_attention(q, k, val, pa.S, e));
    } else {
      us.push_back(
          struct_attention_subtractive(q, k, val, kernels.dist_km, g));
    }
  }
  return multi_view_fuse(us, x, w_gate_);
}

}  // namespace gstm::stce
