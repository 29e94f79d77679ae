#pragma once

// Reverse-mode autodiff on dense Eigen matrices. A Var is a node in a
// dynamically built tape; creation order is a topological order, so the
// backward pass walks ids in reverse. Everything is double precision.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace gstm::ad {

using Mat = Eigen::MatrixXd;

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};
struct DomainError : std::runtime_error {
  explicit DomainError(const std::string& what) : std::runtime_error(what) {}
};

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Mat value;
  Mat grad;  // allocated lazily by accumulate()
  bool requires_grad = false;
  bool has_grad = false;
  std::uint64_t id = 0;
  std::vector<Var> parents;
  std::function<void(Node&)> backprop;  // pull this->grad into parents

  void accumulate(const Mat& g);
  long rows() const { return value.rows(); }
  long cols() const { return value.cols(); }
  double scalar() const;
};

// Leaf constructors. Values with NaN/Inf are rejected.
Var constant(Mat v);
Var leaf(Mat v, bool requires_grad = true);
Var scalar_const(double v);

// Elementwise / broadcasting arithmetic.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var neg(const Var& a);
Var mul(const Var& a, const Var& b);
Var cdiv(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var add_rowvec(const Var& m, const Var& v);   // v is 1 x cols
Var add_colvec(const Var& m, const Var& v);   // v is rows x 1
Var mul_colvec(const Var& m, const Var& v);   // scale row i by v(i)
Var mul_rowvec(const Var& m, const Var& v);

// Linear algebra.
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

// Nonlinearities.
Var vexp(const Var& a);
Var vlog(const Var& a);            // domain error on non-positive input
Var vsqrt(const Var& a);
Var square(const Var& a);
Var vabs(const Var& a);
Var vtanh(const Var& a);
Var verf(const Var& a);
Var vsin(const Var& a);
Var vcos(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
Var relu(const Var& a);

// Reductions.
Var sum(const Var& a);             // 1x1
Var mean(const Var& a);            // 1x1
Var sum_rows(const Var& a);        // n x 1 (sum over columns of each row)
Var sum_cols(const Var& a);        // 1 x m
Var mean_rows(const Var& a);       // 1 x m (mean over rows)

// Softmax family (row-wise).
Var softmax_rows(const Var& a);
Var softmax_rows_masked(const Var& a, const Mat& additive_mask);
Var logsumexp_rows(const Var& a);  // n x 1
// Softmax over groups of entries of a column vector; entries with the same
// group id are normalized together.
Var group_softmax(const Var& a, const std::vector<int>& groups);

// Normalizations.
Var layernorm_rows(const Var& a, double eps = 1e-5);
Var l2_normalize_rows(const Var& a);  // domain error on zero-norm row

// Structure.
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& a, long start, long count);
Var slice_cols(const Var& a, long start, long count);
Var row_select(const Var& a, const std::vector<int>& idx);  // gather rows

// Backward pass. loss must be 1x1; gradients accumulate into every
// requires_grad node reachable from it (reverse creation order).
void backward(const Var& loss);

// ---------------------------------------------------------------------------
// Parameters

struct Param {
  std::string name;
  Var var;
  bool trainable = true;
  bool frozen = false;
};

class ParamStore {
 public:
  // Registers a parameter; duplicate names are an error.
  Var add(const std::string& name, Mat init, bool trainable = true,
          bool frozen = false);
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  bool has(const std::string& name) const { return params_.count(name) > 0; }
  std::vector<std::string> names() const;  // sorted
  std::map<std::string, Param>& all() { return params_; }
  const std::map<std::string, Param>& all() const { return params_; }
  void zero_grad();
  // Gradients of trainable, non-frozen params that received one.
  std::map<std::string, Mat> gradients() const;
  std::size_t count() const { return params_.size(); }

 private:
  std::map<std::string, Param> params_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct FdReport {
  std::string param;
  double max_rel_err = 0.0;
  bool frozen = false;
  bool pass = true;
};

// loss_fn must rebuild the loss graph from current parameter values and be
// deterministic; central differences with the given step.
std::vector<FdReport> finite_diff_check(
    const std::function<Var()>& loss_fn, ParamStore& store,
    double step = 1e-5, double tolerance = 1e-4);

bool all_pass(const std::vector<FdReport>& reports);

}  // namespace gstm::ad
