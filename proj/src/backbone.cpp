#include "gstm/backbone.hpp"

#include <cmath>
#include <random>

namespace gstm::bb {

namespace {
constexpr double kMaskValue = -1e30;

Eigen::MatrixXd gauss_init(long r, long c, double std_dev,
                           std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, std_dev);
  Eigen::MatrixXd m(r, c);
  for (long i = 0; i < r; ++i)
    for (long j = 0; j < c; ++j) m(i, j) = g(rng);
  return m;
}

Eigen::MatrixXd causal_mask(long n) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
  for (long i = 0; i < n; ++i)
    for (long j = i + 1; j < n; ++j) m(i, j) = kMaskValue;
  return m;
}
}  // namespace

void BackboneConfig::validate() const {
  if (layers < 0 || frozen_layers < 0 || frozen_layers > layers) {
    throw std::invalid_argument("backbone: need 0 <= L_f <= L");
  }
  if (d < 1 || heads < 1 || d % heads != 0) {
    throw std::invalid_argument("backbone: d must be divisible by heads");
  }
  if (lora_rank < 0) throw std::invalid_argument("backbone: negative rank");
  if (lora_rank > 0 && lora_rank > d) {
    throw std::invalid_argument("backbone: rank exceeds width");
  }
}

ad::Var apply_lora(const ad::Var& W, const ad::Var& A, const ad::Var& B,
                   double s) {
  if (!A || !B) throw std::invalid_argument("apply_lora: missing factors");
  if (A->rows() != W->rows() || B->cols() != W->cols() ||
      A->cols() != B->rows()) {
    throw ad::ShapeError("apply_lora: factor shapes incompatible");
  }
  if (A->cols() == 0) throw std::invalid_argument("apply_lora: rank 0");
  return ad::add(W, ad::scale(ad::matmul(A, B), s));
}

Eigen::MatrixXd sinusoidal_posenc(long n, long d) {
  Eigen::MatrixXd pe(n, d);
  for (long pos = 0; pos < n; ++pos) {
    for (long i = 0; i < d; i += 2) {
      double freq = std::pow(10000.0, -static_cast<double>(i) / d);
      pe(pos, i) = std::sin(pos * freq);
      if (i + 1 < d) pe(pos, i + 1) = std::cos(pos * freq);
    }
  }
  return pe;
}

Backbone::Backbone(ad::ParamStore& store, const std::string& prefix,
                   const BackboneConfig& cfg, std::uint64_t seed)
    : cfg_(cfg) {
  cfg.validate();
  int d = cfg.d, r = cfg.lora_rank;
  double sd = 1.0 / std::sqrt(static_cast<double>(d));
  for (int l = 0; l < cfg.layers; ++l) {
    bool frozen = l < cfg.frozen_layers;
    std::string base = prefix + ".l" + std::to_string(l);
    std::uint64_t s = seed + 100 * l;
    auto make_linear = [&](const std::string& name, long in, long out,
                           std::uint64_t sub, bool with_bias = true) {
      Linear lin;
      lin.W = store.add(base + "." + name + ".w",
                        gauss_init(in, out, 1.0 / std::sqrt(in), s + sub),
                        true, frozen);
      if (with_bias) {
        lin.b = store.add(base + "." + name + ".b",
                          Eigen::MatrixXd::Zero(1, out), true, frozen);
      }
      if (r > 0) {
        lin.A = store.add(base + "." + name + ".lora_a",
                          gauss_init(in, r, 1.0 / std::sqrt(in), s + sub + 50));
        lin.B = store.add(base + "." + name + ".lora_b",
                          Eigen::MatrixXd::Zero(r, out));
      }
      return lin;
    };
    Layer layer;
    layer.wq = make_linear("wq", d, d, 1);
    // no key bias: a shared shift on all keys cancels inside the softmax,
    // leaving the parameter with an identically zero gradient
    layer.wk = make_linear("wk", d, d, 2, false);
    layer.wv = make_linear("wv", d, d, 3);
    layer.wo = make_linear("wo", d, d, 4);
    layer.mlp1 = make_linear("mlp1", d, cfg.mlp, 5);
    layer.mlp2 = make_linear("mlp2", cfg.mlp, d, 6);
    layer.ln1_g = store.add(base + ".ln1.g", Eigen::MatrixXd::Ones(1, d),
                            true, frozen);
    layer.ln1_b = store.add(base + ".ln1.b", Eigen::MatrixXd::Zero(1, d),
                            true, frozen);
    layer.ln2_g = store.add(base + ".ln2.g", Eigen::MatrixXd::Ones(1, d),
                            true, frozen);
    layer.ln2_b = store.add(base + ".ln2.b", Eigen::MatrixXd::Zero(1, d),
                            true, frozen);
    layers_.push_back(layer);
    (void)sd;
  }
}

ad::Var Backbone::linear(const Linear& lin, const ad::Var& x) const {
  ad::Var w = lin.A ? apply_lora(lin.W, lin.A, lin.B, cfg_.scale()) : lin.W;
  ad::Var y = ad::matmul(x, w);
  return lin.b ? ad::add_rowvec(y, lin.b) : y;
}

ad::Var Backbone::run_stack(const ad::Var& seq) const {
  long n = seq->rows();
  if (n < 1) throw ad::ShapeError("backbone: empty sequence");
  if (seq->cols() != cfg_.d) throw ad::ShapeError("backbone: width mismatch");
  if (cfg_.layers == 0) return seq;  // identity stack

  ad::Var x = ad::add(seq, ad::constant(sinusoidal_posenc(n, cfg_.d)));
  Eigen::MatrixXd mask = causal_mask(n);
  long dh = cfg_.d / cfg_.heads;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  for (const auto& layer : layers_) {
    ad::Var ln = ad::add_rowvec(
        ad::mul_rowvec(ad::layernorm_rows(x), layer.ln1_g), layer.ln1_b);
    ad::Var q = linear(layer.wq, ln);
    ad::Var k = linear(layer.wk, ln);
    ad::Var v = linear(layer.wv, ln);
    std::vector<ad::Var> heads;
    for (int hd = 0; hd < cfg_.heads; ++hd) {
      ad::Var qh = ad::slice_cols(q, hd * dh, dh);
      ad::Var kh = ad::slice_cols(k, hd * dh, dh);
      ad::Var vh = ad::slice_cols(v, hd * dh, dh);
      ad::Var logits =
          ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
      ad::Var att = ad::softmax_rows_masked(logits, mask);
      heads.push_back(ad::matmul(att, vh));
    }
    x = ad::add(x, linear(layer.wo, ad::concat_cols(heads)));

    ad::Var ln2 = ad::add_rowvec(
        ad::mul_rowvec(ad::layernorm_rows(x), layer.ln2_g), layer.ln2_b);
    ad::Var hidden = ad::relu(linear(layer.mlp1, ln2));
    x = ad::add(x, linear(layer.mlp2, hidden));
  }
  return x;
}

BackboneOutput Backbone::forward(const ad::Var& h, const ad::Var& p,
                                 const ad::Var* user) const {
  long n = h->rows();
  if (p->rows() != n) throw ad::ShapeError("backbone: h/p length mismatch");
  if (h->cols() != cfg_.d || p->cols() != cfg_.d) {
    throw ad::ShapeError("backbone: token width mismatch");
  }
  long total = 2 * n + (user ? 1 : 0);
  // scatter h and p into the interleaved order with 0/1 selection matrices;
  // a couple of matmuls instead of O(n) concat nodes
  Eigen::MatrixXd Eh = Eigen::MatrixXd::Zero(total, n);
  Eigen::MatrixXd Ep = Eigen::MatrixXd::Zero(total, n);
  for (long i = 0; i < n; ++i) {
    long hp = cfg_.h_before_p ? 2 * i : 2 * i + 1;
    long pp = cfg_.h_before_p ? 2 * i + 1 : 2 * i;
    Eh(hp, i) = 1.0;
    Ep(pp, i) = 1.0;
  }
  ad::Var seq = ad::add(ad::matmul(ad::constant(Eh), h),
                        ad::matmul(ad::constant(Ep), p));
  if (user) {
    if ((*user)->rows() != 1 || (*user)->cols() != cfg_.d) {
      throw ad::ShapeError("backbone: user token must be 1 x d");
    }
    Eigen::MatrixXd Eu = Eigen::MatrixXd::Zero(total, 1);
    Eu(total - 1, 0) = 1.0;
    seq = ad::add(seq, ad::matmul(ad::constant(Eu), *user));
  }
  ad::Var final = run_stack(seq);

  Eigen::MatrixXd sel_alpha = Eigen::MatrixXd::Zero(n, total);
  for (long i = 0; i < n; ++i) {
    sel_alpha(i, cfg_.h_before_p ? 2 * i : 2 * i + 1) = 1.0;
  }
  long pooled = n + (user ? 1 : 0);
  Eigen::MatrixXd sel_beta = Eigen::MatrixXd::Zero(1, total);
  for (long i = 0; i < n; ++i) {
    sel_beta(0, cfg_.h_before_p ? 2 * i + 1 : 2 * i) = 1.0 / pooled;
  }
  if (user) sel_beta(0, total - 1) = 1.0 / pooled;

  BackboneOutput out;
  out.alpha = ad::matmul(ad::constant(sel_alpha), final);
  out.beta = ad::matmul(ad::constant(sel_beta), final);
  return out;
}

}  // namespace gstm::bb
