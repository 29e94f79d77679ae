#pragma once

// Multi-periodic Fourier time encoding and inter-event gaps.

#include "gstm/autodiff.hpp"

#include <vector>

namespace gstm::temporal {

struct OrderingError : std::runtime_error {
  explicit OrderingError(const std::string& what)
      : std::runtime_error(what) {}
};

// Fixed daily/weekly/monthly periods plus learned random Fourier
// frequencies. Output dimension is 2*(K + R).
class FourierBank {
 public:
  // Registers the learned frequencies as param "<prefix>.rff" in the store.
  FourierBank(ad::ParamStore& store, const std::string& prefix,
              std::vector<double> fixed_periods_s, int rff_count,
              std::uint64_t seed);

  int dim() const;
  // Plain (non-differentiable) encoding of one timestamp.
  Eigen::RowVectorXd encode(double t_s) const;
  // Differentiable encoding of a batch of timestamps (n x dim); gradient
  // flows into the learned frequencies.
  ad::Var encode_batch(const std::vector<double>& ts) const;

  const std::vector<double>& fixed_periods() const { return periods_; }

 private:
  std::vector<double> periods_;
  ad::Var freqs_;  // 1 x R, rad/s
};

// Inter-event gaps; the first gap is defined as 0.
std::vector<double> deltas(const std::vector<double>& timestamps);

}  // namespace gstm::temporal
