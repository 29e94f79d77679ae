#include "gstm/data.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace gstm::data {

int Vocab::add_or_get(const std::string& name) {
  auto it = index.find(name);
  if (it != index.end()) return it->second;
  int id = size();
  index[name] = id;
  names.push_back(name);
  return id;
}

int Vocab::get(const std::string& name) const {
  auto it = index.find(name);
  return it == index.end() ? -1 : it->second;
}

Taxonomy Taxonomy::from_edges(
    const std::vector<std::pair<std::string, std::string>>& edges) {
  Taxonomy t;
  auto intern = [&t](const std::string& n) {
    auto it = t.index_.find(n);
    if (it != t.index_.end()) return it->second;
    int id = static_cast<int>(t.names_.size());
    t.index_[n] = id;
    t.names_.push_back(n);
    t.parent_.push_back(-1);
    return id;
  };
  for (const auto& [p, c] : edges) {
    int pi = intern(p), ci = intern(c);
    if (t.parent_[ci] != -1 && t.parent_[ci] != pi) {
      throw std::runtime_error("taxonomy: node with two parents: " + c);
    }
    if (pi == ci) throw std::runtime_error("taxonomy: self loop at " + c);
    t.parent_[ci] = pi;
  }
  int roots = 0;
  for (std::size_t i = 0; i < t.parent_.size(); ++i) {
    if (t.parent_[i] == -1) {
      t.root_ = static_cast<int>(i);
      ++roots;
    }
  }
  if (roots != 1) {
    throw std::runtime_error("taxonomy: expected a single root, found " +
                             std::to_string(roots));
  }
  // depths + cycle check
  t.depth_.assign(t.names_.size(), -1);
  for (int i = 0; i < t.size(); ++i) {
    int steps = 0, cur = i;
    while (cur != -1 && t.depth_[cur] == -1) {
      ++steps;
      cur = t.parent_[cur];
      if (steps > t.size()) throw std::runtime_error("taxonomy: cycle");
    }
    int base = (cur == -1) ? -1 : t.depth_[cur];
    // second pass to fill
    cur = i;
    std::vector<int> chain;
    while (cur != -1 && t.depth_[cur] == -1) {
      chain.push_back(cur);
      cur = t.parent_[cur];
    }
    int d = (cur == -1) ? 0 : t.depth_[cur] + 1;
    (void)base;
    for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
      t.depth_[*it] = d++;
    }
  }
  return t;
}

Taxonomy Taxonomy::load_tsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open taxonomy file: " + path);
  std::vector<std::pair<std::string, std::string>> edges;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw std::runtime_error("taxonomy: malformed line: " + line);
    }
    edges.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  return from_edges(edges);
}

int Taxonomy::node(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw std::runtime_error("taxonomy: unknown node: " + name);
  }
  return it->second;
}

bool Taxonomy::has(const std::string& name) const {
  return index_.count(name) > 0;
}

std::vector<int> Taxonomy::leaves() const {
  std::vector<bool> has_child(names_.size(), false);
  for (int p : parent_) {
    if (p >= 0) has_child[p] = true;
  }
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (!has_child[i]) out.push_back(i);
  }
  return out;
}

int Taxonomy::tree_distance(int a, int b) const {
  if (a < 0 || a >= size() || b < 0 || b >= size()) {
    throw std::runtime_error("taxonomy: node id out of range");
  }
  int da = depth_[a], db = depth_[b], dist = 0;
  while (da > db) {
    a = parent_[a];
    --da;
    ++dist;
  }
  while (db > da) {
    b = parent_[b];
    --db;
    ++dist;
  }
  while (a != b) {
    a = parent_[a];
    b = parent_[b];
    dist += 2;
  }
  return dist;
}

double category_kernel(int ci, int cj, double tau_c, const Taxonomy& tax) {
  if (tau_c <= 0.0) throw std::invalid_argument("tau_c must be positive");
  return std::exp(-static_cast<double>(tax.tree_distance(ci, cj)) / tau_c);
}

long Dataset::total_events() const {
  long n = 0;
  for (const auto& t : trajectories) n += static_cast<long>(t.events.size());
  return n;
}

Dataset Dataset::from_events(std::vector<CheckInEvent> events, Vocab users,
                             Vocab pois, Taxonomy taxonomy) {
  Dataset d;
  d.users = std::move(users);
  d.pois = std::move(pois);
  d.taxonomy = std::move(taxonomy);
  std::stable_sort(events.begin(), events.end(),
                   [](const CheckInEvent& a, const CheckInEvent& b) {
                     if (a.user != b.user) return a.user < b.user;
                     return a.t < b.t;
                   });
  d.poi_info.assign(d.pois.size(), PoiInfo{});
  std::vector<bool> seen(d.pois.size(), false);
  for (const auto& e : events) {
    if (e.poi >= 0 && e.poi < d.pois.size() && !seen[e.poi]) {
      d.poi_info[e.poi] = PoiInfo{e.g, e.category};
      seen[e.poi] = true;
    }
    if (d.trajectories.empty() || d.trajectories.back().user != e.user) {
      d.trajectories.push_back(Trajectory{e.user, {}});
    }
    d.trajectories.back().events.push_back(e);
  }
  return d;
}

Dataset parse_checkins(const std::string& path, const Taxonomy& taxonomy,
                       ParseReport* report) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open check-in file: " + path);
  Vocab users, pois;
  std::vector<CheckInEvent> events;
  ParseReport local;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (cols.size() < 6) {
      local.line_errors.emplace_back(lineno, "expected >= 6 columns");
      continue;
    }
    CheckInEvent e;
    try {
      e.t = std::stod(cols[1]);
      e.g.lat = std::stod(cols[2]);
      e.g.lon = std::stod(cols[3]);
      for (std::size_t i = 6; i < cols.size(); ++i) {
        e.aux.push_back(std::stod(cols[i]));
      }
    } catch (const std::exception&) {
      local.line_errors.emplace_back(lineno, "unparsable number");
      continue;
    }
    if (e.t < 0.0) {
      local.line_errors.emplace_back(lineno, "negative timestamp");
      continue;
    }
    try {
      geo::validate(e.g);
    } catch (const std::exception& ex) {
      local.line_errors.emplace_back(lineno, ex.what());
      continue;
    }
    // category path: slash-separated; the leaf component names the node
    const std::string& cpath = cols[5];
    auto slash = cpath.rfind('/');
    std::string leaf =
        (slash == std::string::npos) ? cpath : cpath.substr(slash + 1);
    if (!taxonomy.has(leaf)) {
      local.line_errors.emplace_back(lineno, "unknown category: " + leaf);
      continue;
    }
    e.category = taxonomy.node(leaf);
    e.user = users.add_or_get(cols[0]);
    e.poi = pois.add_or_get(cols[4]);
    events.push_back(e);
    ++local.parsed;
  }
  if (report) *report = local;
  return Dataset::from_events(std::move(events), std::move(users),
                              std::move(pois), taxonomy);
}

Dataset filter_dataset(const Dataset& d, int n_min, int f_min,
                       double t_start, double t_end, FilterStats* stats) {
  if (n_min < 1 || f_min < 1) {
    throw std::invalid_argument("n_min and f_min must be >= 1");
  }
  std::vector<CheckInEvent> events;
  for (const auto& traj : d.trajectories) {
    for (const auto& e : traj.events) {
      if (e.t >= t_start && e.t <= t_end) events.push_back(e);
    }
  }
  int iterations = 0;
  for (;;) {
    ++iterations;
    std::map<int, long> poi_count, user_count;
    for (const auto& e : events) {
      ++poi_count[e.poi];
      ++user_count[e.user];
    }
    std::vector<CheckInEvent> kept;
    for (const auto& e : events) {
      if (poi_count[e.poi] >= f_min && user_count[e.user] >= n_min) {
        kept.push_back(e);
      }
    }
    bool stable = kept.size() == events.size();
    events = std::move(kept);
    if (stable) break;
  }
  // Re-intern vocabularies over the surviving events.
  Vocab users, pois;
  for (auto& e : events) {
    e.user = users.add_or_get(d.users.names[e.user]);
    e.poi = pois.add_or_get(d.pois.names[e.poi]);
  }
  Dataset out = Dataset::from_events(std::move(events), std::move(users),
                                     std::move(pois), d.taxonomy);
  if (stats) {
    stats->users = out.users.size();
    stats->pois = out.pois.size();
    stats->records = out.total_events();
    stats->avg_seq_len =
        out.trajectories.empty()
            ? 0.0
            : static_cast<double>(stats->records) /
                  static_cast<double>(out.trajectories.size());
    stats->iterations = iterations;
  }
  return out;
}

void SimConfig::validate() const {
  if (n_users < 1 || n_pois < 1) throw std::invalid_argument("empty world");
  if (base_rate_per_hour <= 0.0) {
    throw std::invalid_argument("base rate must be positive");
  }
  if (spatial_bandwidth_km <= 0.0) {
    throw std::invalid_argument("spatial bandwidth must be positive");
  }
  if (category_stickiness < 0.0 || category_stickiness >= 1.0) {
    throw std::invalid_argument("stickiness must be in [0,1)");
  }
  if (horizon_s <= 0.0) throw std::invalid_argument("horizon must be positive");
  if (baseline != "constant" && baseline != "sinusoidal24h") {
    throw std::invalid_argument("unknown baseline: " + baseline);
  }
  if (self_excite_a < 0.0 || self_excite_b_s <= 0.0) {
    throw std::invalid_argument("invalid psi parameters");
  }
}

Taxonomy simulator_taxonomy() {
  std::vector<std::pair<std::string, std::string>> edges;
  const char* branches[3] = {"Food", "Leisure", "Work"};
  for (int b = 0; b < 3; ++b) {
    edges.emplace_back("Root", branches[b]);
    for (int l = 0; l < 4; ++l) {
      edges.emplace_back(branches[b],
                         std::string(branches[b]) + "_" + std::to_string(l));
    }
  }
  return Taxonomy::from_edges(edges);
}

Dataset simulate_mtpp(const SimConfig& config) {
  config.validate();
  Taxonomy tax = simulator_taxonomy();
  std::vector<int> leaves = tax.leaves();

  std::mt19937_64 world_rng(config.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // POIs uniform in the region, categories round-robin over leaves.
  std::vector<PoiInfo> pois(config.n_pois);
  for (int p = 0; p < config.n_pois; ++p) {
    pois[p].g.lat = config.center_lat +
                    (2.0 * unit(world_rng) - 1.0) * config.region_half_deg;
    pois[p].g.lon = config.center_lon +
                    (2.0 * unit(world_rng) - 1.0) * config.region_half_deg;
    pois[p].category = leaves[p % leaves.size()];
  }
  // per-category POI lists
  std::map<int, std::vector<int>> by_cat;
  for (int p = 0; p < config.n_pois; ++p) by_cat[pois[p].category].push_back(p);

  double lambda0 = config.base_rate_per_hour / 3600.0;  // per second
  double baseline_max = (config.baseline == "sinusoidal24h") ? 1.5 : 1.0;

  std::vector<CheckInEvent> events;
  for (int u = 0; u < config.n_users; ++u) {
    std::mt19937_64 rng(config.seed * 0x9E3779B97F4A7C15ULL + 1 +
                        static_cast<std::uint64_t>(u));
    std::normal_distribution<double> gauss(0.0, 1.0);
    double user_rate = lambda0;
    if (config.user_rate_spread > 0.0) {
      double z = gauss(rng);
      user_rate *= std::exp(config.user_rate_spread * z -
                            0.5 * config.user_rate_spread *
                                config.user_rate_spread);
    }
    int home_poi = static_cast<int>(unit(rng) * config.n_pois);
    home_poi = std::min(home_poi, config.n_pois - 1);
    geo::GeoPoint home = pois[home_poi].g;

    double envelope = user_rate * baseline_max * (1.0 + config.self_excite_a);
    double t = 0.0, t_last = -1.0;
    int prev_cat = -1, prev_poi = -1;
    while (true) {
      double e = -std::log(std::max(unit(rng), 1e-300)) / envelope;
      t += e;
      if (t > config.horizon_s) break;
      double baseline = 1.0;
      if (config.baseline == "sinusoidal24h") {
        baseline = 1.0 + 0.5 * std::sin(2.0 * M_PI * t / 86400.0);
      }
      double psi = 1.0;
      if (config.self_excite_a > 0.0 && t_last >= 0.0) {
        psi = 1.0 + config.self_excite_a *
                        std::exp(-(t - t_last) / config.self_excite_b_s);
      }
      double intensity = user_rate * baseline * psi;
      if (intensity > envelope * (1.0 + 1e-12)) {
        throw std::logic_error("thinning envelope violated");
      }
      if (unit(rng) * envelope > intensity) continue;  // rejected

      // category: sticky transition
      int cat;
      if (prev_cat >= 0 && unit(rng) < config.category_stickiness) {
        cat = prev_cat;
      } else {
        cat = leaves[std::min<std::size_t>(
            static_cast<std::size_t>(unit(rng) * leaves.size()),
            leaves.size() - 1)];
      }
      // POI within category, kernel around previous location (+ home pull)
      const std::vector<int>& cands = by_cat[cat];
      std::vector<double> w(cands.size(), 1.0);
      for (std::size_t i = 0; i < cands.size(); ++i) {
        const geo::GeoPoint& pg = pois[cands[i]].g;
        if (prev_poi >= 0) {
          w[i] *= std::exp(-geo::haversine(pg, pois[prev_poi].g) /
                           config.spatial_bandwidth_km);
        }
        if (config.home_attraction_km > 0.0) {
          w[i] *= std::exp(-geo::haversine(pg, home) /
                           config.home_attraction_km);
        }
      }
      double wsum = std::accumulate(w.begin(), w.end(), 0.0);
      double pick = unit(rng) * wsum;
      std::size_t idx = 0;
      for (; idx + 1 < w.size(); ++idx) {
        if (pick < w[idx]) break;
        pick -= w[idx];
      }
      int poi = cands[idx];

      CheckInEvent ev;
      ev.user = u;
      ev.poi = poi;
      ev.t = t;
      ev.g = pois[poi].g;
      ev.category = cat;
      events.push_back(ev);
      t_last = t;
      prev_cat = cat;
      prev_poi = poi;
    }
  }

  Vocab users, pvocab;
  for (int u = 0; u < config.n_users; ++u) {
    users.add_or_get("u" + std::to_string(u));
  }
  for (int p = 0; p < config.n_pois; ++p) {
    pvocab.add_or_get("p" + std::to_string(p));
  }
  Dataset d = Dataset::from_events(std::move(events), std::move(users),
                                   std::move(pvocab), tax);
  // keep full POI metadata even for unvisited POIs
  d.poi_info = pois;
  return d;
}

void few_shot_split(const Dataset& d, double fraction, std::uint64_t seed,
                    Dataset* train, Dataset* eval) {
  if (fraction <= 0.0 || fraction > 1.0) {
    throw std::invalid_argument("fraction must be in (0,1]");
  }
  std::size_t n = d.trajectories.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::size_t k = static_cast<std::size_t>(
      std::lround(fraction * static_cast<double>(n)));
  k = std::max<std::size_t>(1, std::min(k, n));
  auto build = [&d](const std::vector<std::size_t>& which) {
    Dataset out;
    out.users = d.users;
    out.pois = d.pois;
    out.taxonomy = d.taxonomy;
    out.poi_info = d.poi_info;
    std::vector<std::size_t> sorted = which;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i : sorted) out.trajectories.push_back(d.trajectories[i]);
    return out;
  };
  std::vector<std::size_t> tr(idx.begin(), idx.begin() + k);
  std::vector<std::size_t> ev(idx.begin() + k, idx.end());
  if (train) *train = build(tr);
  if (eval) *eval = build(ev);
}

void write_tsv(const Dataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write: " + path);
  out << "# user_id\tepoch_s\tlat\tlon\tpoi_id\tcategory_path\n";
  out.precision(10);
  for (const auto& traj : d.trajectories) {
    for (const auto& e : traj.events) {
      // category path root/.../leaf
      std::vector<std::string> chain;
      int c = e.category;
      while (c != -1) {
        chain.push_back(d.taxonomy.name(c));
        c = d.taxonomy.parent(c);
      }
      std::string cpath;
      for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
        if (!cpath.empty()) cpath += "/";
        cpath += *it;
      }
      out << d.users.names[e.user] << '\t' << e.t << '\t' << e.g.lat << '\t'
          << e.g.lon << '\t' << d.pois.names[e.poi] << '\t' << cpath;
      for (double a : e.aux) out << '\t' << a;
      out << '\n';
    }
  }
}

void write_taxonomy_tsv(const Taxonomy& t, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write: " + path);
  for (int i = 0; i < t.size(); ++i) {
    if (t.parent(i) != -1) {
      out << t.name(t.parent(i)) << '\t' << t.name(i) << '\n';
    }
  }
}

std::string manifest_json(const Dataset& d) {
  nlohmann::json j;
  j["users"] = d.users.size();
  j["pois"] = d.pois.size();
  j["records"] = d.total_events();
  j["categories"] = d.taxonomy.size();
  double t_min = 0.0, t_max = 0.0;
  bool first = true;
  long n = 0;
  for (const auto& traj : d.trajectories) {
    for (const auto& e : traj.events) {
      if (first) {
        t_min = t_max = e.t;
        first = false;
      }
      t_min = std::min(t_min, e.t);
      t_max = std::max(t_max, e.t);
      ++n;
    }
  }
  j["window"] = {t_min, t_max};
  j["avg_seq_len"] = d.trajectories.empty()
                         ? 0.0
                         : static_cast<double>(n) /
                               static_cast<double>(d.trajectories.size());
  return j.dump(2);
}

}  // namespace gstm::data
