#pragma once

// Typed token stream construction, H0 topological summaries over sliding
// coordinate windows, and projection of concatenated field embeddings into
// per-event base tokens.

#include "gstm/autodiff.hpp"
#include "gstm/data.hpp"
#include "gstm/geo.hpp"
#include "gstm/temporal.hpp"

#include <map>

namespace gstm::tok {

enum class TokenKind { POI, CAT, CELL, TIME, AUX, SEP, EOS };

struct TypedToken {
  TokenKind kind;
  int id = -1;                 // POI/CAT/CELL payload
  double t = 0.0;              // TIME payload
  Eigen::RowVectorXd vec;      // AUX payload (context z ++ tda summary)
};

// H0 death radii = MST edge weights over pairwise haversine distances,
// sorted descending, zero-padded to window_size-1 entries.
Eigen::RowVectorXd tda_h0(const std::vector<geo::GeoPoint>& window,
                          int summary_len);

struct TokenizerConfig {
  int d_type = 8;
  int d_poi = 32;
  int d_cat = 16;
  int d_cell = 16;
  int d_model = 64;
  int tda_window = 5;
  int aux_dim = 0;  // width of the raw context z (events are padded/cut)
  int cell_resolution = 6;
};

// Maps lattice cells seen in the corpus to dense ids; id 0 is the unknown
// cell.
class CellVocab {
 public:
  CellVocab() = default;
  int add_or_get(const geo::CellIndex& c);
  int get(const geo::CellIndex& c) const;  // 0 if unseen
  int size() const { return static_cast<int>(cells_.size()) + 1; }
  const std::vector<geo::CellIndex>& cells() const { return cells_; }

 private:
  std::vector<geo::CellIndex> cells_;
  std::map<geo::CellIndex, int> index_;
};

class Tokenizer {
 public:
  Tokenizer(ad::ParamStore& store, const std::string& prefix,
            const TokenizerConfig& cfg, const temporal::FourierBank& bank,
            const geo::HexIndexer& indexer, CellVocab cell_vocab,
            int n_pois, int n_categories, std::uint64_t seed);

  std::vector<TypedToken> build_stream(const data::Trajectory& traj) const;
  // One fused base token per event: n_events x d_model.
  ad::Var embed_stream(const std::vector<TypedToken>& tokens) const;

  const CellVocab& cell_vocab() const { return cell_vocab_; }
  const TokenizerConfig& config() const { return cfg_; }

 private:
  TokenizerConfig cfg_;
  const temporal::FourierBank* bank_;
  const geo::HexIndexer* indexer_;
  CellVocab cell_vocab_;
  int n_pois_, n_categories_;
  ad::Var poi_table_, cat_table_, cell_table_, projection_;
  ad::Var type_emb_[5];  // POI, CAT, CELL, TIME, AUX
};

}  // namespace gstm::tok
