#pragma once

// Spherical geometry and the hierarchical hexagonal cell indexer.
//
// The indexer lays a hexagonal lattice over an equirectangular projection of
// the sphere. Lattice spacing halves per resolution level, and the cell at a
// coarse level is defined as the union of the fine cells whose ancestor it
// is, so parent containment is exact by construction. Distortion near the
// poles is accepted at desk scale.

#include <stdexcept>
#include <vector>

namespace gstm::geo {

inline constexpr double kEarthRadiusKm = 6371.0;

struct GeoPoint {
  double lat = 0.0;  // degrees, [-90, 90]
  double lon = 0.0;  // degrees, (-180, 180]
};

void validate(const GeoPoint& p);

// Great-circle distance in km.
double haversine(const GeoPoint& a, const GeoPoint& b);

struct CellIndex {
  int resolution = 0;
  long q = 0;  // axial coordinates on the hex lattice at this resolution
  long s = 0;

  bool operator==(const CellIndex& o) const {
    return resolution == o.resolution && q == o.q && s == o.s;
  }
  bool operator<(const CellIndex& o) const {
    if (resolution != o.resolution) return resolution < o.resolution;
    if (q != o.q) return q < o.q;
    return s < o.s;
  }
};

class HexIndexer {
 public:
  explicit HexIndexer(int max_resolution = 12);

  int max_resolution() const { return max_resolution_; }

  CellIndex cell_of(const GeoPoint& g, int resolution) const;
  GeoPoint cell_center(const CellIndex& c) const;
  // Up to 6 lattice neighbors; neighbors falling off the projection strip
  // are dropped.
  std::vector<CellIndex> cell_neighbors(const CellIndex& c) const;
  // Canonical parent of a cell one level up.
  CellIndex parent(const CellIndex& c) const;
  // Nominal hexagon edge length at a resolution, km in projection space.
  double edge_length_km(int resolution) const;

 private:
  int max_resolution_;
  double spacing0_km_;  // center-to-center distance at resolution 0

  double spacing(int r) const;
  void axial_round(double qf, double sf, long& q, long& s) const;
  static void parent_axial(long q, long s, long& pq, long& ps);
};

struct KernelConfig {
  double tau_g_km = 1.0;       // geodesic kernel bandwidth
  double tau_c = 1.0;          // taxonomy kernel bandwidth
  double rho_adj = 0.5;        // cell kernel value for adjacent cells
  double epsilon_floor = 1e-4; // cell kernel value otherwise
};

double geo_kernel(const GeoPoint& a, const GeoPoint& b, double tau_g_km);
double cell_kernel(const CellIndex& a, const CellIndex& b,
                   const HexIndexer& indexer, const KernelConfig& cfg);

// Normalized distribution over `cells` decaying with geodesic distance from
// the current cell's center.
std::vector<double> geofence_prior(const std::vector<CellIndex>& cells,
                                   const CellIndex& current, double tau_km,
                                   const HexIndexer& indexer);

}  // namespace gstm::geo
