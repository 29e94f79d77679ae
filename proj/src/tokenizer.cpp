#include "gstm/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace gstm::tok {

Eigen::RowVectorXd tda_h0(const std::vector<geo::GeoPoint>& window,
                          int summary_len) {
  std::size_t n = window.size();
  Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(summary_len);
  if (n < 2) return out;
  // Prim's MST over the complete graph of pairwise haversine distances.
  std::vector<bool> used(n, false);
  std::vector<double> best(n, 1e300);
  used[0] = true;
  for (std::size_t j = 1; j < n; ++j) {
    best[j] = geo::haversine(window[0], window[j]);
  }
  std::vector<double> deaths;
  for (std::size_t it = 1; it < n; ++it) {
    std::size_t pick = 0;
    double bd = 1e300;
    for (std::size_t j = 0; j < n; ++j) {
      if (!used[j] && best[j] < bd) {
        bd = best[j];
        pick = j;
      }
    }
    used[pick] = true;
    deaths.push_back(bd);
    for (std::size_t j = 0; j < n; ++j) {
      if (!used[j]) {
        best[j] = std::min(best[j], geo::haversine(window[pick], window[j]));
      }
    }
  }
  std::sort(deaths.rbegin(), deaths.rend());
  for (int i = 0; i < summary_len && i < static_cast<int>(deaths.size());
       ++i) {
    out(i) = deaths[i];
  }
  return out;
}

int CellVocab::add_or_get(const geo::CellIndex& c) {
  auto it = index_.find(c);
  if (it != index_.end()) return it->second;
  int id = size();  // 0 reserved for unknown
  index_[c] = id;
  cells_.push_back(c);
  return id;
}

int CellVocab::get(const geo::CellIndex& c) const {
  auto it = index_.find(c);
  return it == index_.end() ? 0 : it->second;
}

namespace {
Eigen::MatrixXd gauss_init(long r, long c, double std_dev,
                           std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, std_dev);
  Eigen::MatrixXd m(r, c);
  for (long i = 0; i < r; ++i) {
    for (long j = 0; j < c; ++j) m(i, j) = g(rng);
  }
  return m;
}
}  // namespace

Tokenizer::Tokenizer(ad::ParamStore& store, const std::string& prefix,
                     const TokenizerConfig& cfg,
                     const temporal::FourierBank& bank,
                     const geo::HexIndexer& indexer, CellVocab cell_vocab,
                     int n_pois, int n_categories, std::uint64_t seed)
    : cfg_(cfg),
      bank_(&bank),
      indexer_(&indexer),
      cell_vocab_(std::move(cell_vocab)),
      n_pois_(n_pois),
      n_categories_(n_categories) {
  poi_table_ = store.add(prefix + ".poi_emb",
                         gauss_init(n_pois, cfg.d_poi, 0.1, seed + 1));
  cat_table_ = store.add(prefix + ".cat_emb",
                         gauss_init(n_categories, cfg.d_cat, 0.1, seed + 2));
  cell_table_ =
      store.add(prefix + ".cell_emb",
                gauss_init(cell_vocab_.size(), cfg.d_cell, 0.1, seed + 3));
  int aux_width = cfg.aux_dim + (cfg.tda_window - 1);
  int in_width = 5 * cfg.d_type + cfg.d_poi + cfg.d_cat + cfg.d_cell +
                 bank.dim() + aux_width;
  projection_ = store.add(
      prefix + ".proj",
      gauss_init(in_width, cfg.d_model, 1.0 / std::sqrt(in_width), seed + 4));
  const char* kinds[5] = {"poi", "cat", "cell", "time", "aux"};
  for (int k = 0; k < 5; ++k) {
    type_emb_[k] = store.add(prefix + ".type_" + kinds[k],
                             gauss_init(1, cfg.d_type, 0.1, seed + 10 + k));
  }
}

std::vector<TypedToken> Tokenizer::build_stream(
    const data::Trajectory& traj) const {
  std::vector<TypedToken> out;
  std::vector<geo::GeoPoint> coords;
  for (std::size_t i = 0; i < traj.events.size(); ++i) {
    const auto& e = traj.events[i];
    if (e.poi < 0 || e.poi >= n_pois_) {
      throw std::runtime_error("tokenizer: unknown poi id " +
                               std::to_string(e.poi));
    }
    if (e.category < 0 || e.category >= n_categories_) {
      throw std::runtime_error("tokenizer: unknown category id " +
                               std::to_string(e.category));
    }
    coords.push_back(e.g);
    // sliding window, first events padded by repetition
    std::vector<geo::GeoPoint> window;
    for (int k = cfg_.tda_window - 1; k >= 0; --k) {
      long idx = std::max<long>(0, static_cast<long>(i) - k);
      window.push_back(coords[idx]);
    }
    Eigen::RowVectorXd p = tda_h0(window, cfg_.tda_window - 1);
    Eigen::RowVectorXd aux =
        Eigen::RowVectorXd::Zero(cfg_.aux_dim + p.size());
    for (int k = 0; k < cfg_.aux_dim && k < static_cast<int>(e.aux.size());
         ++k) {
      aux(k) = e.aux[k];
    }
    aux.tail(p.size()) = p;

    TypedToken poi{TokenKind::POI};
    poi.id = e.poi;
    out.push_back(poi);
    TypedToken cat{TokenKind::CAT};
    cat.id = e.category;
    out.push_back(cat);
    TypedToken cell{TokenKind::CELL};
    cell.id = cell_vocab_.get(indexer_->cell_of(e.g, cfg_.cell_resolution));
    out.push_back(cell);
    TypedToken time{TokenKind::TIME};
    time.t = e.t;
    out.push_back(time);
    TypedToken auxt{TokenKind::AUX};
    auxt.vec = aux;
    out.push_back(auxt);
    out.push_back(TypedToken{TokenKind::SEP});
  }
  out.push_back(TypedToken{TokenKind::EOS});
  return out;
}

ad::Var Tokenizer::embed_stream(const std::vector<TypedToken>& tokens) const {
  if (tokens.empty() || tokens.size() % 6 != 1) {
    throw std::runtime_error("embed_stream: malformed token stream");
  }
  long n = static_cast<long>(tokens.size() / 6);
  if (n == 0) throw std::runtime_error("embed_stream: empty stream");
  std::vector<int> poi_ids, cat_ids, cell_ids;
  std::vector<double> ts;
  int aux_width = cfg_.aux_dim + (cfg_.tda_window - 1);
  Eigen::MatrixXd aux(n, aux_width);
  for (long i = 0; i < n; ++i) {
    const TypedToken* e = &tokens[6 * i];
    if (e[0].kind != TokenKind::POI || e[1].kind != TokenKind::CAT ||
        e[2].kind != TokenKind::CELL || e[3].kind != TokenKind::TIME ||
        e[4].kind != TokenKind::AUX || e[5].kind != TokenKind::SEP) {
      throw std::runtime_error("embed_stream: unexpected token order");
    }
    poi_ids.push_back(e[0].id);
    cat_ids.push_back(e[1].id);
    cell_ids.push_back(e[2].id);
    ts.push_back(e[3].t);
    aux.row(i) = e[4].vec;
  }
  if (tokens.back().kind != TokenKind::EOS) {
    throw std::runtime_error("embed_stream: missing EOS");
  }

  ad::Var ones = ad::constant(Eigen::MatrixXd::Ones(n, 1));
  auto typed = [&](int k) { return ad::matmul(ones, type_emb_[k]); };
  std::vector<ad::Var> blocks;
  blocks.push_back(typed(0));
  blocks.push_back(ad::row_select(poi_table_, poi_ids));
  blocks.push_back(typed(1));
  blocks.push_back(ad::row_select(cat_table_, cat_ids));
  blocks.push_back(typed(2));
  blocks.push_back(ad::row_select(cell_table_, cell_ids));
  blocks.push_back(typed(3));
  blocks.push_back(bank_->encode_batch(ts));
  blocks.push_back(typed(4));
  blocks.push_back(ad::constant(aux));
  return ad::matmul(ad::concat_cols(blocks), projection_);
}

}  // namespace gstm::tok
