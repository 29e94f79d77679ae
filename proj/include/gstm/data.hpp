#pragma once

// Check-in ingestion, category taxonomy, filtering, few-shot splitting and
// the marked-TPP simulator used to generate synthetic corpora.

#include "gstm/geo.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace gstm::data {

struct Vocab {
  std::vector<std::string> names;
  std::map<std::string, int> index;

  int add_or_get(const std::string& name);
  int get(const std::string& name) const;  // -1 if absent
  int size() const { return static_cast<int>(names.size()); }
};

struct CheckInEvent {
  int user = -1;
  int poi = -1;
  double t = 0.0;  // epoch seconds
  geo::GeoPoint g;
  int category = -1;
  std::vector<double> aux;
};

struct Trajectory {
  int user = -1;
  std::vector<CheckInEvent> events;  // non-decreasing timestamps
};

class Taxonomy {
 public:
  // Builds from (parent, child) edges; validates a single-rooted tree.
  static Taxonomy from_edges(
      const std::vector<std::pair<std::string, std::string>>& edges);
  static Taxonomy load_tsv(const std::string& path);

  int node(const std::string& name) const;  // throws on unknown
  bool has(const std::string& name) const;
  int size() const { return static_cast<int>(names_.size()); }
  const std::string& name(int id) const { return names_[id]; }
  int parent(int id) const { return parent_[id]; }
  int root() const { return root_; }
  std::vector<int> leaves() const;
  // Edge count of the path between two nodes in the tree.
  int tree_distance(int a, int b) const;

 private:
  std::vector<std::string> names_;
  std::vector<int> parent_;
  std::map<std::string, int> index_;
  int root_ = -1;
  std::vector<int> depth_;
};

double category_kernel(int ci, int cj, double tau_c, const Taxonomy& tax);

struct PoiInfo {
  geo::GeoPoint g;
  int category = -1;
};

struct Dataset {
  Vocab users, pois;
  Taxonomy taxonomy;
  std::vector<Trajectory> trajectories;  // one per user, time-ordered
  std::vector<PoiInfo> poi_info;         // indexed by poi id

  long total_events() const;
  static Dataset from_events(std::vector<CheckInEvent> events, Vocab users,
                             Vocab pois, Taxonomy taxonomy);
};

struct ParseReport {
  std::vector<std::pair<int, std::string>> line_errors;  // (line, message)
  int parsed = 0;
};

// TSV columns: user_id, epoch_s, lat, lon, poi_id, category_path, aux...
// Lines starting with '#' are ignored. Malformed lines are reported and
// skipped; an unreadable file throws.
Dataset parse_checkins(const std::string& path, const Taxonomy& taxonomy,
                       ParseReport* report = nullptr);

struct FilterStats {
  int users = 0;
  int pois = 0;
  long records = 0;
  double avg_seq_len = 0.0;
  int iterations = 0;
};

// Temporal bounding, then POI-frequency and user-count filters iterated to a
// fixed point.
Dataset filter_dataset(const Dataset& d, int n_min, int f_min,
                       double t_start, double t_end,
                       FilterStats* stats = nullptr);

struct SimConfig {
  int n_users = 50;
  int n_pois = 200;
  double base_rate_per_hour = 1.0;  // lambda0
  double spatial_bandwidth_km = 2.0;
  double category_stickiness = 0.5;  // in [0,1)
  double horizon_s = 120.0 * 86400.0;
  std::uint64_t seed = 0;
  // world placement
  double center_lat = 40.0, center_lon = -74.0;
  double region_half_deg = 0.4;
  // baseline lambda0(t): "constant" or "sinusoidal24h"
  std::string baseline = "constant";
  // psi(dt) = 1 + a*exp(-dt/b); a=0 gives the homogeneous default
  double self_excite_a = 0.0;
  double self_excite_b_s = 3600.0;
  // heterogeneity knobs for learnable corpora
  double user_rate_spread = 0.0;    // sigma of log-normal per-user rate
  double home_attraction_km = 0.0;  // 0 disables the home pull

  void validate() const;
};

// Two-level taxonomy fixture used by the simulator: 3 branches x 4 leaves.
Taxonomy simulator_taxonomy();

// Ogata thinning against the factorized intensity; deterministic per seed.
Dataset simulate_mtpp(const SimConfig& config);

// Split by trajectory; |train| = max(1, round(fraction * n)).
void few_shot_split(const Dataset& d, double fraction, std::uint64_t seed,
                    Dataset* train, Dataset* eval);

void write_tsv(const Dataset& d, const std::string& path);
void write_taxonomy_tsv(const Taxonomy& t, const std::string& path);
// Manifest JSON with counts, vocab sizes and time window.
std::string manifest_json(const Dataset& d);

}  // namespace gstm::data
