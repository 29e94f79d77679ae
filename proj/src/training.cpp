#include "gstm/training.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace gstm::train {

namespace {
void check_finite(const ad::Var& term, const char* name) {
  if (!std::isfinite(term->value(0, 0))) {
    throw NumericalError(std::string("non-finite loss term: ") + name);
  }
}

double floored_gap_hours(double t_from, double t_to) {
  return heads::floor_dt_hours((t_to - t_from) / 3600.0);
}
}  // namespace

void LossWeights::validate() const {
  for (double v : {loc, ot, time, user, nhp, ent, reg}) {
    if (v < 0.0 || !std::isfinite(v)) {
      throw std::invalid_argument("loss weights must be finite and >= 0");
    }
  }
}

ad::Var total_loss(model::Model& m, const std::vector<Example>& batch,
                   const LossWeights& w, const model::AblationFlags& flags,
                   std::uint64_t dsm_seed, LossBreakdown* breakdown,
                   int ot_max_iters, Eigen::MatrixXd* betas_out) {
  w.validate();
  flags.validate();
  if (batch.empty()) throw std::invalid_argument("total_loss: empty batch");

  long B = static_cast<long>(batch.size());
  std::vector<ad::Var> betas, betas_noid;
  std::vector<int> loc_targets, user_targets;
  Eigen::VectorXd dt_hours(B);
  ad::Var nhp_total, ent_total;
  long nhp_events = 0;

  for (long i = 0; i < B; ++i) {
    const Example& ex = batch[i];
    if (ex.prefix.empty()) {
      throw std::invalid_argument("total_loss: empty prefix");
    }
    // the user token conditions location/time learning; identification is
    // evaluated on stripped sequences, so its own terms see a beta that
    // includes the token the eval will not have — the prototype EMA keeps
    // the two views close
    const int* uid = ex.user >= 0 ? &ex.user : nullptr;
    auto fwd = m.forward(ex.prefix, flags, uid);
    betas.push_back(fwd.beta);
    loc_targets.push_back(ex.target.poi);
    user_targets.push_back(ex.user);
    if (w.user > 0.0) {
      // identification is evaluated on stripped sequences, so its loss
      // terms and the prototype EMA must see token-free contexts
      betas_noid.push_back(m.forward(ex.prefix, flags, nullptr).beta);
    }
    dt_hours(i) = floored_gap_hours(ex.prefix.back().t, ex.target.t);

    if (w.nhp > 0.0 && fwd.ctm_active) {
      long n = static_cast<long>(ex.prefix.size());
      std::vector<double> dt_next(n);
      for (long j = 0; j + 1 < n; ++j) {
        dt_next[j] = floored_gap_hours(ex.prefix[j].t, ex.prefix[j + 1].t);
      }
      dt_next[n - 1] = dt_hours(i);
      ad::Var term =
          ctm::nhp_loss(fwd.h, dt_next, m.ctm_cell().nhp_w(),
                        m.ctm_cell().nhp_b());
      nhp_total = nhp_total ? ad::add(nhp_total, term) : term;
      nhp_events += n;
    }
    if (w.ent > 0.0 && fwd.lifestyle_active) {
      ad::Var pen = m.bank().entropy_penalty(fwd.lifestyle);
      ent_total = ent_total ? ad::add(ent_total, pen) : pen;
    }
  }
  ad::Var beta_all = ad::concat_rows(betas);
  ad::Var beta_noid = betas_noid.empty() ? beta_all : ad::concat_rows(betas_noid);
  if (betas_out) *betas_out = beta_noid->value;
  Eigen::VectorXd y_log = dt_hours.array().log();

  LossBreakdown local;
  ad::Var total;
  auto push = [&](const char* name, const ad::Var& term, double weight) {
    check_finite(term, name);
    local.terms[name] = term->value(0, 0);
    ad::Var scaled = ad::scale(term, weight);
    total = total ? ad::add(total, scaled) : scaled;
  };

  if (w.loc > 0.0 || w.ot > 0.0) {
    auto dist = m.location().distribution(beta_all);
    if (w.loc > 0.0) {
      push("loc", m.location().ce_loss(dist, loc_targets), w.loc);
    }
    if (w.ot > 0.0) {
      ad::Var ot_sum;
      for (long i = 0; i < B; ++i) {
        Eigen::VectorXd b = Eigen::VectorXd::Zero(m.location().n_cells());
        b(m.location().cell_of_poi(batch[i].target.poi)) = 1.0;
        // tight tolerance keeps the unrolled graph length stable under the
        // parameter perturbations of finite-difference checks
        auto res = heads::sinkhorn_ot(ad::slice_rows(dist.p_cell, i, 1), b,
                                      m.cell_cost(), m.config().ot_epsilon,
                                      ot_max_iters, 1e-12);
        ot_sum = ot_sum ? ad::add(ot_sum, res.loss) : res.loss;
      }
      push("ot", ad::scale(ot_sum, 1.0 / B), w.ot);
    }
  }

  if (w.time > 0.0) {
    auto mp = m.mixture().params(beta_all);
    push("time_nll", heads::mixture_nll(mp, dt_hours), w.time);
    push("time_crps", heads::mixture_crps(mp, y_log), w.time);
    heads::ScoreFn score_fn = [&](const ad::Var& y, const Eigen::VectorXd& s) {
      return m.score_net().score(y, s, beta_all, m.config().vp);
    };
    push("time_dsm",
         heads::dsm_loss(score_fn, y_log, m.config().vp, m.config().s_min,
                         dsm_seed),
         w.time);
  }

  if (w.user > 0.0) {
    ad::Var logits = m.user_head().logits(beta_noid);
    push("user_ce", m.user_head().ce_loss(logits, user_targets), w.user);
    push("user_supcon",
         heads::supcon_loss(beta_noid, user_targets, m.config().tau_c),
         w.user);
  }

  if (w.nhp > 0.0 && nhp_total) {
    push("nhp", ad::scale(nhp_total, 1.0 / nhp_events), w.nhp);
  }
  if (w.ent > 0.0 && ent_total) {
    push("ent", ad::scale(ent_total, 1.0 / B), w.ent);
  }

  if (w.reg > 0.0) {
    // spectral penalty on the head linear maps; the singular vectors enter
    // as constants, which matches the exact gradient at convergence
    ad::Var reg;
    for (const char* name : {"loc.w_cell", "loc.w_poi", "mix.w_mix"}) {
      const Eigen::MatrixXd& W = m.store().at(name).var->value;
      Eigen::VectorXd u = Eigen::VectorXd::Ones(W.rows()).normalized();
      Eigen::VectorXd v;
      for (int it = 0; it < 10; ++it) {
        v = (W.transpose() * u).normalized();
        u = (W * v).normalized();
      }
      ad::Var sigma = ad::matmul(
          ad::matmul(ad::constant(Eigen::MatrixXd(u.transpose())),
                     m.store().at(name).var),
          ad::constant(Eigen::MatrixXd(v)));
      ad::Var pen = ad::square(ad::add_scalar(sigma, -1.0));
      reg = reg ? ad::add(reg, pen) : pen;
    }
    push("reg", reg, w.reg);
  }

  if (!total) throw std::invalid_argument("total_loss: all weights zero");
  check_finite(total, "total");
  local.total = total->value(0, 0);
  if (breakdown) *breakdown = local;
  return total;
}

double cosine_lr(long step, long total_steps, double base_lr,
                 double warmup_frac) {
  if (total_steps <= 0) throw std::invalid_argument("cosine_lr: no steps");
  if (step < 0 || step > total_steps) {
    throw std::invalid_argument("cosine_lr: step out of range");
  }
  long warmup = std::lround(warmup_frac * total_steps);
  if (warmup > 0 && step < warmup) {
    return base_lr * static_cast<double>(step) / warmup;
  }
  double progress = total_steps == warmup
                        ? 1.0
                        : static_cast<double>(step - warmup) /
                              static_cast<double>(total_steps - warmup);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

double spectral_norm_estimate(const Eigen::MatrixXd& W, int power_iters) {
  if (power_iters < 1) throw std::invalid_argument("power_iters must be >= 1");
  if (W.size() == 0 || W.cwiseAbs().maxCoeff() == 0.0) return 0.0;
  Eigen::VectorXd u = Eigen::VectorXd::Ones(W.rows()).normalized();
  Eigen::VectorXd v;
  for (int it = 0; it < power_iters; ++it) {
    v = W.transpose() * u;
    double nv = v.norm();
    if (nv == 0.0) return 0.0;
    v /= nv;
    u = W * v;
    double nu = u.norm();
    if (nu == 0.0) return 0.0;
    u /= nu;
  }
  return u.dot(W * v);
}

Eigen::MatrixXd spectral_norm(const Eigen::MatrixXd& W, int power_iters) {
  double sigma = spectral_norm_estimate(W, power_iters);
  if (sigma <= 0.0) return W;
  return W / sigma;
}

// ---------------------------------------------------------------------------

AdamW::AdamW(ad::ParamStore& store, OptimConfig cfg)
    : store_(&store), cfg_(cfg) {
  if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 ||
      cfg_.beta2 >= 1.0 || cfg_.eps <= 0.0) {
    throw std::invalid_argument("adamw: invalid moment configuration");
  }
}

void AdamW::step(const std::map<std::string, Eigen::MatrixXd>& grads,
                 double lr) {
  if (lr <= 0.0) throw std::invalid_argument("adamw: lr must be > 0");
  double sq = 0.0;
  for (const auto& [name, g] : grads) sq += g.squaredNorm();
  double norm = std::sqrt(sq);
  double scale = 1.0;
  if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) {
    scale = cfg_.clip_norm / norm;
  }
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (const auto& [name, g_raw] : grads) {
    ad::Param& p = store_->at(name);
    if (!p.trainable || p.frozen) continue;
    Eigen::MatrixXd g = g_raw * scale;
    auto mi = m_.find(name);
    if (mi == m_.end()) {
      mi = m_.emplace(name, Eigen::MatrixXd::Zero(g.rows(), g.cols())).first;
      v_.emplace(name, Eigen::MatrixXd::Zero(g.rows(), g.cols()));
    }
    Eigen::MatrixXd& mom = mi->second;
    Eigen::MatrixXd& vel = v_.at(name);
    mom = cfg_.beta1 * mom + (1.0 - cfg_.beta1) * g;
    vel = cfg_.beta2 * vel.array().matrix() +
          (1.0 - cfg_.beta2) * g.array().square().matrix();
    Eigen::ArrayXXd update =
        (mom.array() / bc1) / ((vel.array() / bc2).sqrt() + cfg_.eps);
    p.var->value.array() -=
        lr * (update + cfg_.weight_decay * p.var->value.array());
  }
}

// ---------------------------------------------------------------------------
// Checkpoint container

namespace {
constexpr char kMagic[5] = {'G', 'S', 'T', 'M', '1'};
constexpr std::uint32_t kVersion = 1;

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
void write_tensor(std::ostream& os, const Eigen::MatrixXd& m) {
  write_u64(os, static_cast<std::uint64_t>(m.rows()));
  write_u64(os, static_cast<std::uint64_t>(m.cols()));
  os.write(reinterpret_cast<const char*>(m.data()),
           static_cast<std::streamsize>(sizeof(double) * m.size()));
}
std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::string read_string(std::istream& is) {
  std::uint64_t n = read_u64(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  return s;
}
Eigen::MatrixXd read_tensor(std::istream& is) {
  std::uint64_t r = read_u64(is), c = read_u64(is);
  Eigen::MatrixXd m(r, c);
  is.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double) * m.size()));
  return m;
}
}  // namespace

void save_checkpoint(const std::string& path, const ad::ParamStore& store,
                     const AdamW* optim, const std::string& config_json,
                     std::uint64_t config_hash, std::uint64_t rng_state) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
  os.write(kMagic, sizeof(kMagic));
  write_u32(os, kVersion);
  write_u64(os, config_hash);
  write_string(os, config_json);
  write_u64(os, rng_state);
  auto names = store.names();
  write_u64(os, names.size());
  for (const auto& name : names) {
    const ad::Param& p = store.at(name);
    write_string(os, name);
    std::uint32_t flags = (p.trainable ? 1u : 0u) | (p.frozen ? 2u : 0u);
    write_u32(os, flags);
    write_tensor(os, p.var->value);
  }
  if (optim) {
    write_u32(os, 1);
    AdamW& o = const_cast<AdamW&>(*optim);
    write_u64(os, static_cast<std::uint64_t>(o.step_count()));
    write_u64(os, o.first_moments().size());
    for (const auto& [name, mom] : o.first_moments()) {
      write_string(os, name);
      write_tensor(os, mom);
      write_tensor(os, o.second_moments().at(name));
    }
  } else {
    write_u32(os, 0);
  }
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

CheckpointInfo load_checkpoint(const std::string& path, ad::ParamStore& store,
                               AdamW* optim) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint: " + path);
  char magic[5];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path);
  }
  if (read_u32(is) != kVersion) {
    throw std::runtime_error("unsupported checkpoint version");
  }
  CheckpointInfo info;
  info.config_hash = read_u64(is);
  info.config_json = read_string(is);
  info.rng_state = read_u64(is);
  std::uint64_t n = read_u64(is);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = read_string(is);
    read_u32(is);  // flags recorded for inspection; store is authoritative
    Eigen::MatrixXd t = read_tensor(is);
    ad::Param& p = store.at(name);
    if (p.var->rows() != t.rows() || p.var->cols() != t.cols()) {
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    }
    p.var->value = t;
  }
  std::uint32_t has_optim = read_u32(is);
  info.had_optimizer = has_optim != 0;
  if (has_optim) {
    std::uint64_t steps = read_u64(is);
    std::uint64_t k = read_u64(is);
    if (optim) {
      optim->set_step_count(static_cast<long>(steps));
      for (std::uint64_t i = 0; i < k; ++i) {
        std::string name = read_string(is);
        optim->first_moments()[name] = read_tensor(is);
        optim->second_moments()[name] = read_tensor(is);
      }
    } else {
      for (std::uint64_t i = 0; i < k; ++i) {
        read_string(is);
        read_tensor(is);
        read_tensor(is);
      }
    }
  }
  if (!is) throw std::runtime_error("truncated checkpoint: " + path);
  return info;
}

std::string metrics_line(long step, double lr, const LossBreakdown& b) {
  std::ostringstream os;
  os.precision(10);
  os << "{\"step\":" << step << ",\"lr\":" << lr << ",\"total\":" << b.total;
  for (const auto& [name, v] : b.terms) os << ",\"" << name << "\":" << v;
  os << "}";
  return os.str();
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(model::Model& m, const data::Dataset& corpus, TrainConfig cfg)
    : model_(&m), corpus_(&corpus), cfg_(cfg), optim_(m.store(), cfg.optim),
      rng_(cfg.seed) {
  if (cfg_.batch < 1 || cfg_.min_prefix < 1 ||
      cfg_.max_prefix < cfg_.min_prefix) {
    throw std::invalid_argument("trainer: bad batch/window configuration");
  }
  for (std::size_t i = 0; i < corpus.trajectories.size(); ++i) {
    if (static_cast<int>(corpus.trajectories[i].events.size()) >
        cfg_.min_prefix) {
      eligible_.push_back(static_cast<int>(i));
    }
  }
  if (eligible_.empty()) {
    throw std::invalid_argument("trainer: no trajectory long enough");
  }
}

std::vector<Example> Trainer::sample_batch() {
  std::vector<Example> batch;
  std::uniform_int_distribution<std::size_t> pick(0, eligible_.size() - 1);
  for (int b = 0; b < cfg_.batch; ++b) {
    const auto& traj = corpus_->trajectories[eligible_[pick(rng_)]];
    long len = static_cast<long>(traj.events.size());
    std::uniform_int_distribution<long> tpick(cfg_.min_prefix, len - 1);
    long ti = tpick(rng_);
    long start = std::max<long>(0, ti - cfg_.max_prefix);
    Example ex;
    ex.prefix.assign(traj.events.begin() + start, traj.events.begin() + ti);
    ex.target = traj.events[ti];
    ex.user = traj.user;
    batch.push_back(std::move(ex));
    draws_ += 2;
  }
  return batch;
}

Trainer::StepResult Trainer::step() {
  auto batch = sample_batch();
  StepResult res;
  res.step = step_;
  res.lr = cosine_lr(step_, cfg_.steps, cfg_.optim.lr, cfg_.warmup_frac);
  model_->store().zero_grad();
  std::uint64_t dsm_seed =
      cfg_.seed ^ (static_cast<std::uint64_t>(step_) * 0x9E3779B97F4A7C15ull);
  Eigen::MatrixXd betas;
  ad::Var loss =
      total_loss(*model_, batch, cfg_.weights, cfg_.flags, dsm_seed,
                 &res.breakdown, cfg_.ot_max_iters, &betas);
  ad::backward(loss);
  optim_.step(model_->store().gradients(), std::max(res.lr, 1e-12));
  model_->post_step();

  std::vector<int> users;
  for (const auto& ex : batch) users.push_back(ex.user);
  model_->user_head().update_prototypes(betas, users);

  if (!cfg_.metrics_path.empty() &&
      (step_ % cfg_.log_every == 0 || step_ + 1 == cfg_.steps)) {
    std::ofstream os(cfg_.metrics_path, std::ios::app);
    os << metrics_line(step_, res.lr, res.breakdown) << "\n";
  }
  ++step_;
  return res;
}

void Trainer::run(long steps) {
  for (long i = 0; i < steps; ++i) step();
}

}  // namespace gstm::train
