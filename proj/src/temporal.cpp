#include "gstm/temporal.hpp"

#include <cmath>
#include <random>

namespace gstm::temporal {

namespace {
constexpr double kTwoPi = 2.0 * 3.14159265358979323846;
}

FourierBank::FourierBank(ad::ParamStore& store, const std::string& prefix,
                         std::vector<double> fixed_periods_s, int rff_count,
                         std::uint64_t seed)
    : periods_(std::move(fixed_periods_s)) {
  for (double p : periods_) {
    if (p <= 0.0) throw std::invalid_argument("period must be positive");
  }
  if (rff_count < 0) throw std::invalid_argument("rff_count < 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, kTwoPi / (30.0 * 86400.0));
  Eigen::MatrixXd init(1, rff_count);
  for (int j = 0; j < rff_count; ++j) init(0, j) = gauss(rng);
  freqs_ = store.add(prefix + ".rff", init);
}

int FourierBank::dim() const {
  return 2 * (static_cast<int>(periods_.size()) +
              static_cast<int>(freqs_->cols()));
}

Eigen::RowVectorXd FourierBank::encode(double t_s) const {
  if (t_s < 0.0) throw std::invalid_argument("t must be >= 0");
  Eigen::RowVectorXd out(dim());
  int at = 0;
  for (double p : periods_) {
    out(at++) = std::sin(kTwoPi * t_s / p);
    out(at++) = std::cos(kTwoPi * t_s / p);
  }
  for (long j = 0; j < freqs_->cols(); ++j) {
    double w = freqs_->value(0, j);
    out(at++) = std::sin(w * t_s);
    out(at++) = std::cos(w * t_s);
  }
  return out;
}

ad::Var FourierBank::encode_batch(const std::vector<double>& ts) const {
  long n = static_cast<long>(ts.size());
  int k = static_cast<int>(periods_.size());
  Eigen::MatrixXd fixed(n, 2 * k);
  Eigen::MatrixXd tcol(n, 1);
  for (long i = 0; i < n; ++i) {
    if (ts[i] < 0.0) throw std::invalid_argument("t must be >= 0");
    tcol(i, 0) = ts[i];
    for (int j = 0; j < k; ++j) {
      fixed(i, 2 * j) = std::sin(kTwoPi * ts[i] / periods_[j]);
      fixed(i, 2 * j + 1) = std::cos(kTwoPi * ts[i] / periods_[j]);
    }
  }
  ad::Var phase = ad::matmul(ad::constant(tcol), freqs_);  // n x R
  ad::Var sins = ad::vsin(phase);
  ad::Var coss = ad::vcos(phase);
  // interleave learned sin/cos columns
  std::vector<ad::Var> cols;
  cols.push_back(ad::constant(fixed));
  for (long j = 0; j < freqs_->cols(); ++j) {
    cols.push_back(ad::slice_cols(sins, j, 1));
    cols.push_back(ad::slice_cols(coss, j, 1));
  }
  return ad::concat_cols(cols);
}

std::vector<double> deltas(const std::vector<double>& timestamps) {
  std::vector<double> out(timestamps.size(), 0.0);
  for (std::size_t i = 1; i < timestamps.size(); ++i) {
    if (timestamps[i] < timestamps[i - 1]) {
      throw OrderingError("decreasing timestamp at index " +
                          std::to_string(i));
    }
    out[i] = timestamps[i] - timestamps[i - 1];
  }
  return out;
}

}  // namespace gstm::temporal
