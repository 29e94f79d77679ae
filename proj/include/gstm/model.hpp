#pragma once

// Full-model assembly: tokenizer -> structural attention -> continuous-time
// memory -> concept-bank prompts -> backbone -> heads, with per-module
// ablation switches.

#include "gstm/backbone.hpp"
#include "gstm/ctm.hpp"
#include "gstm/data.hpp"
#include "gstm/heads.hpp"
#include "gstm/lcb.hpp"
#include "gstm/stce.hpp"
#include "gstm/tokenizer.hpp"

#include <memory>

namespace gstm::model {

struct AblationFlags {
  bool disable_stce = false;
  bool disable_ctm = false;
  bool disable_lcb = false;
  bool disable_backbone = false;

  void validate() const;  // all modules off is contradictory
  std::string tag() const;
};

struct ModelConfig {
  int d = 32;   // shared token width
  int rff = 4;  // learned Fourier frequencies in the time encoding

  tok::TokenizerConfig tokenizer;
  stce::StceConfig stce;
  ctm::CtmConfig ctm;
  lcb::LcbConfig lcb;
  bb::BackboneConfig backbone;

  int head_resolution = 6;      // location-head cell partition
  int mixture_components = 3;
  heads::VpSchedule vp;
  int score_hidden = 32;
  double s_min = 1e-3;
  double tau_u = 0.07;
  double proto_momentum = 0.95;
  double tau_c = 0.1;
  double geofence_tau_km = 5.0;
  double ot_epsilon = 0.1;
  std::string time_metric = "mixture";  // or "diffusion"
  bool median_bias_correct = false;

  // Pushes d into every submodule config; call before constructing a Model.
  void apply_width();
};

class Model {
 public:
  Model(ModelConfig cfg, const data::Dataset& corpus, std::uint64_t seed);

  struct Forward {
    ad::Var alpha;  // n x d
    ad::Var beta;   // 1 x d pooled context
    ad::Var h;      // n x d intention tokens
    lcb::LifestyleBank::ForwardResult lifestyle;
    bool lifestyle_active = false;
    bool ctm_active = false;
  };
  // events: a non-empty, time-ordered prefix of one user's trajectory.
  // user == nullptr strips the user token (identification evaluation).
  Forward forward(const std::vector<data::CheckInEvent>& events,
                  const AblationFlags& flags = {},
                  const int* user = nullptr) const;

  ad::ParamStore& store() { return store_; }
  const ad::ParamStore& store() const { return store_; }
  const ModelConfig& config() const { return cfg_; }

  heads::LocationHead& location() { return *loc_; }
  const heads::LocationHead& location() const { return *loc_; }
  heads::MixtureTimeHead& mixture() { return *mix_; }
  heads::ScoreNet& score_net() { return *score_; }
  const heads::ScoreNet& score_net() const { return *score_; }
  heads::UserHead& user_head() { return *user_; }
  ctm::CtmCell& ctm_cell() { return *ctm_; }
  lcb::LifestyleBank& bank() { return *lcb_; }
  const geo::HexIndexer& indexer() const { return indexer_; }
  const Eigen::MatrixXd& cell_cost() const { return cell_cost_; }

  int n_users() const { return n_users_; }
  int n_pois() const { return n_pois_; }
  int n_categories() const { return n_cats_; }

  // Manifold upkeep after an optimizer step.
  void post_step() { lcb_->retract_anchors(); }

 private:
  ModelConfig cfg_;
  data::Taxonomy taxonomy_;
  geo::HexIndexer indexer_;
  int n_users_, n_pois_, n_cats_;
  ad::ParamStore store_;
  std::unique_ptr<temporal::FourierBank> time_bank_;
  std::unique_ptr<tok::Tokenizer> tokenizer_;
  std::unique_ptr<stce::StceLayer> stce_;
  std::unique_ptr<ctm::CtmCell> ctm_;
  std::unique_ptr<lcb::LifestyleBank> lcb_;
  std::unique_ptr<bb::Backbone> backbone_;
  std::unique_ptr<heads::LocationHead> loc_;
  std::unique_ptr<heads::MixtureTimeHead> mix_;
  std::unique_ptr<heads::ScoreNet> score_;
  std::unique_ptr<heads::UserHead> user_;
  ad::Var user_emb_;               // user token table
  ad::Var bypass_w_, bypass_b_;    // no-backbone replacement layer
  Eigen::MatrixXd cell_cost_;
};

}  // namespace gstm::model
