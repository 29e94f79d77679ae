#include "gstm/model.hpp"

#include <cmath>
#include <random>

namespace gstm::model {

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

// daily, weekly, mean-month periods in seconds
const std::vector<double> kFixedPeriods = {86400.0, 604800.0, 2629800.0};
}  // namespace

void AblationFlags::validate() const {
  if (disable_stce && disable_ctm && disable_lcb && disable_backbone) {
    throw std::invalid_argument("ablation: all modules disabled");
  }
}

std::string AblationFlags::tag() const {
  std::string t;
  if (disable_stce) t += "_no_stce";
  if (disable_ctm) t += "_no_ctm";
  if (disable_lcb) t += "_no_lcb";
  if (disable_backbone) t += "_no_backbone";
  return t.empty() ? "full" : t.substr(1);
}

void ModelConfig::apply_width() {
  tokenizer.d_model = d;
  ctm.d = d;
  lcb.d = d;
  backbone.d = d;
}

Model::Model(ModelConfig cfg, const data::Dataset& corpus, std::uint64_t seed)
    : cfg_(std::move(cfg)),
      taxonomy_(corpus.taxonomy),
      n_users_(corpus.users.size()),
      n_pois_(static_cast<int>(corpus.poi_info.size())),
      n_cats_(corpus.taxonomy.size()) {
  cfg_.apply_width();
  cfg_.backbone.validate();
  if (n_users_ < 1 || n_pois_ < 1) {
    throw std::invalid_argument("model: corpus has no users or POIs");
  }

  time_bank_ = std::make_unique<temporal::FourierBank>(
      store_, "time", kFixedPeriods, cfg_.rff, seed + 1);

  tok::CellVocab cell_vocab;
  std::vector<geo::GeoPoint> poi_coords;
  poi_coords.reserve(corpus.poi_info.size());
  for (const auto& info : corpus.poi_info) {
    poi_coords.push_back(info.g);
    cell_vocab.add_or_get(
        indexer_.cell_of(info.g, cfg_.tokenizer.cell_resolution));
  }
  tokenizer_ = std::make_unique<tok::Tokenizer>(
      store_, "tok", cfg_.tokenizer, *time_bank_, indexer_,
      std::move(cell_vocab), n_pois_, n_cats_, seed + 2);

  stce_ = std::make_unique<stce::StceLayer>(store_, "stce", cfg_.d, cfg_.stce,
                                            seed + 3);
  ctm_ = std::make_unique<ctm::CtmCell>(store_, "ctm", cfg_.ctm, *time_bank_,
                                        seed + 4);
  lcb_ = std::make_unique<lcb::LifestyleBank>(store_, "lcb", cfg_.lcb,
                                              seed + 5);
  backbone_ = std::make_unique<bb::Backbone>(store_, "bb", cfg_.backbone,
                                             seed + 6);
  loc_ = std::make_unique<heads::LocationHead>(
      store_, "loc", cfg_.d, poi_coords, indexer_, cfg_.head_resolution,
      seed + 7);
  cell_cost_ = heads::cell_cost_matrix(loc_->cells(), indexer_);
  mix_ = std::make_unique<heads::MixtureTimeHead>(
      store_, "mix", cfg_.d, cfg_.mixture_components, seed + 8);
  score_ = std::make_unique<heads::ScoreNet>(store_, "score", cfg_.d,
                                             cfg_.score_hidden, seed + 9);
  user_ = std::make_unique<heads::UserHead>(store_, "user", n_users_, cfg_.d,
                                            cfg_.tau_u, cfg_.proto_momentum,
                                            seed + 10);

  double sd = 1.0 / std::sqrt(static_cast<double>(cfg_.d));
  user_emb_ = store_.add("model.user_emb",
                         gauss_init(n_users_, cfg_.d, sd, seed + 11));
  bypass_w_ = store_.add("model.bypass.w",
                         gauss_init(cfg_.d, cfg_.d, sd, seed + 12));
  bypass_b_ = store_.add("model.bypass.b",
                         Eigen::MatrixXd::Zero(1, cfg_.d));
}

Model::Forward Model::forward(const std::vector<data::CheckInEvent>& events,
                              const AblationFlags& flags,
                              const int* user) const {
  flags.validate();
  if (events.empty()) throw std::invalid_argument("model: empty prefix");

  data::Trajectory traj;
  traj.user = events.front().user;
  traj.events = events;
  ad::Var x = tokenizer_->embed_stream(tokenizer_->build_stream(traj));

  ad::Var s = x;
  if (!flags.disable_stce) {
    stce::LogKernels kernels =
        stce::log_kernels(events, taxonomy_, indexer_, cfg_.stce);
    s = stce_->forward(x, kernels);
  }

  Forward out;
  out.h = s;
  if (!flags.disable_ctm) {
    std::vector<double> ts;
    std::vector<int> cats;
    for (const auto& e : events) {
      ts.push_back(e.t);
      cats.push_back(e.category);
    }
    out.h = ctm_->forward(s, ts, cats, n_cats_).h;
    out.ctm_active = true;
  }

  ad::Var p;
  if (!flags.disable_lcb) {
    out.lifestyle = lcb_->forward(out.h);
    out.lifestyle_active = true;
    p = out.lifestyle.prompt;
  } else {
    p = ad::constant(
        Eigen::MatrixXd::Zero(out.h->rows(), cfg_.d));
  }

  if (flags.disable_backbone) {
    out.alpha = ad::add_rowvec(ad::matmul(out.h, bypass_w_), bypass_b_);
    out.beta = ad::mean_rows(out.alpha);
    return out;
  }

  if (user) {
    if (*user < 0 || *user >= n_users_) {
      throw std::out_of_range("model: user id out of range");
    }
    ad::Var u = ad::row_select(user_emb_, {*user});
    auto bb_out = backbone_->forward(out.h, p, &u);
    out.alpha = bb_out.alpha;
    out.beta = bb_out.beta;
  } else {
    auto bb_out = backbone_->forward(out.h, p);
    out.alpha = bb_out.alpha;
    out.beta = bb_out.beta;
  }
  return out;
}

}  // namespace gstm::model
