#include "gstm/geo.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace gstm::geo {

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr double kDeg2Rad = kPi / 180.0;
constexpr double kSqrt3 = 1.7320508075688772;

// Projection: x east, y north, km.
void project(const GeoPoint& g, double& x, double& y) {
  x = g.lon * kDeg2Rad * kEarthRadiusKm;
  y = g.lat * kDeg2Rad * kEarthRadiusKm;
}

GeoPoint unproject(double x, double y) {
  GeoPoint g;
  g.lon = x / kEarthRadiusKm / kDeg2Rad;
  g.lat = y / kEarthRadiusKm / kDeg2Rad;
  return g;
}

bool on_strip(const GeoPoint& g) {
  return g.lat >= -90.0 && g.lat <= 90.0 && g.lon > -180.0 && g.lon <= 180.0;
}

// floor division for possibly negative even numerators
long half(long v) {
  // v is even by construction
  return v / 2;
}
}  // namespace

void validate(const GeoPoint& p) {
  if (!(p.lat >= -90.0 && p.lat <= 90.0)) {
    throw std::invalid_argument("latitude out of range: " +
                                std::to_string(p.lat));
  }
  if (!(p.lon > -180.0 && p.lon <= 180.0)) {
    throw std::invalid_argument("longitude out of range: " +
                                std::to_string(p.lon));
  }
}

double haversine(const GeoPoint& a, const GeoPoint& b) {
  // Longitude is periodic in the formula, so cell centers that fall just
  // past the +-180 seam of the projection strip are fine here.
  double la1 = a.lat * kDeg2Rad, la2 = b.lat * kDeg2Rad;
  double dla = (b.lat - a.lat) * kDeg2Rad;
  double dlo = (b.lon - a.lon) * kDeg2Rad;
  double h = std::sin(dla / 2) * std::sin(dla / 2) +
             std::cos(la1) * std::cos(la2) * std::sin(dlo / 2) *
                 std::sin(dlo / 2);
  h = std::min(1.0, std::max(0.0, h));
  return 2.0 * kEarthRadiusKm * std::asin(std::sqrt(h));
}

HexIndexer::HexIndexer(int max_resolution)
    : max_resolution_(max_resolution), spacing0_km_(2048.0) {
  if (max_resolution < 0 || max_resolution > 20) {
    throw std::invalid_argument("max_resolution out of range");
  }
}

double HexIndexer::spacing(int r) const {
  return spacing0_km_ / static_cast<double>(1L << r);
}

double HexIndexer::edge_length_km(int resolution) const {
  return spacing(resolution) / kSqrt3;
}

void HexIndexer::axial_round(double qf, double sf, long& q, long& s) const {
  // cube rounding: x=q, z=s, y=-q-s
  double x = qf, z = sf, y = -qf - sf;
  double rx = std::round(x), ry = std::round(y), rz = std::round(z);
  double dx = std::abs(rx - x), dy = std::abs(ry - y), dz = std::abs(rz - z);
  if (dx > dy && dx > dz) {
    rx = -ry - rz;
  } else if (dy > dz) {
    ry = -rx - rz;
  } else {
    rz = -rx - ry;
  }
  q = static_cast<long>(rx);
  s = static_cast<long>(rz);
}

void HexIndexer::parent_axial(long q, long s, long& pq, long& ps) {
  long qm = ((q % 2) + 2) % 2;
  long sm = ((s % 2) + 2) % 2;
  if (qm == 0 && sm == 0) {
    pq = half(q);
    ps = half(s);
  } else if (qm == 1 && sm == 0) {
    pq = half(q - 1);
    ps = half(s);
  } else if (qm == 0 && sm == 1) {
    pq = half(q);
    ps = half(s - 1);
  } else {
    pq = half(q - 1);
    ps = half(s + 1);
  }
}

CellIndex HexIndexer::cell_of(const GeoPoint& g, int resolution) const {
  // Accept longitudes slightly outside the strip so that centers of seam
  // cells round-trip; there is no wraparound at the antimeridian.
  if (!(g.lat >= -90.0 && g.lat <= 90.0) || !std::isfinite(g.lon)) {
    throw std::invalid_argument("cell_of: bad coordinate");
  }
  if (resolution < 0 || resolution > max_resolution_) {
    throw std::invalid_argument("resolution out of range: " +
                                std::to_string(resolution));
  }
  double x, y;
  project(g, x, y);
  // nearest lattice point at the finest level, then walk up
  double sp = spacing(max_resolution_);
  // center(q,s) = (sp*(q + s/2), sp*sqrt(3)/2*s)
  double sf = y / (sp * kSqrt3 / 2.0);
  double qf = x / sp - sf / 2.0;
  long q, s;
  axial_round(qf, sf, q, s);
  for (int r = max_resolution_; r > resolution; --r) {
    long pq, ps;
    parent_axial(q, s, pq, ps);
    q = pq;
    s = ps;
  }
  CellIndex c;
  c.resolution = resolution;
  c.q = q;
  c.s = s;
  return c;
}

GeoPoint HexIndexer::cell_center(const CellIndex& c) const {
  double sp = spacing(c.resolution);
  double x = sp * (static_cast<double>(c.q) + static_cast<double>(c.s) / 2.0);
  double y = sp * kSqrt3 / 2.0 * static_cast<double>(c.s);
  return unproject(x, y);
}

CellIndex HexIndexer::parent(const CellIndex& c) const {
  if (c.resolution <= 0) {
    throw std::invalid_argument("parent: cell already at resolution 0");
  }
  // The cell lattice point at resolution r sits at axial (2q, 2s) one level
  // down; the canonical parent is computed on that finer grid.
  CellIndex p;
  p.resolution = c.resolution - 1;
  parent_axial(c.q, c.s, p.q, p.s);
  return p;
}

std::vector<CellIndex> HexIndexer::cell_neighbors(const CellIndex& c) const {
  static const long dq[6] = {1, -1, 0, 0, 1, -1};
  static const long ds[6] = {0, 0, 1, -1, -1, 1};
  std::vector<CellIndex> out;
  for (int k = 0; k < 6; ++k) {
    CellIndex n;
    n.resolution = c.resolution;
    n.q = c.q + dq[k];
    n.s = c.s + ds[k];
    if (on_strip(cell_center(n))) out.push_back(n);
  }
  return out;
}

double geo_kernel(const GeoPoint& a, const GeoPoint& b, double tau_g_km) {
  if (tau_g_km <= 0.0) throw std::invalid_argument("tau_g must be positive");
  return std::exp(-haversine(a, b) / tau_g_km);
}

double cell_kernel(const CellIndex& a, const CellIndex& b,
                   const HexIndexer& indexer, const KernelConfig& cfg) {
  if (a == b) return 1.0;
  for (const auto& n : indexer.cell_neighbors(a)) {
    if (n == b) return cfg.rho_adj;
  }
  return cfg.epsilon_floor;
}

std::vector<double> geofence_prior(const std::vector<CellIndex>& cells,
                                   const CellIndex& current, double tau_km,
                                   const HexIndexer& indexer) {
  if (cells.empty()) {
    throw std::invalid_argument("geofence_prior: empty cell set");
  }
  if (tau_km <= 0.0) throw std::invalid_argument("tau must be positive");
  GeoPoint cur = indexer.cell_center(current);
  std::vector<double> logits(cells.size());
  double mx = -1e300;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    logits[i] = -haversine(indexer.cell_center(cells[i]), cur) / tau_km;
    mx = std::max(mx, logits[i]);
  }
  double z = 0.0;
  for (double& l : logits) {
    l = std::exp(l - mx);
    z += l;
  }
  for (double& l : logits) l /= z;
  return logits;
}

}  // namespace gstm::geo
