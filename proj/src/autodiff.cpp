#include "gstm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace gstm::ad {

namespace {

thread_local std::uint64_t g_next_id = 1;

std::string shape_str(const Mat& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void check_finite(const Mat& v, const char* where) {
  if (!v.allFinite()) {
    throw DomainError(std::string(where) + ": non-finite values");
  }
}

Var make_node(Mat value, std::vector<Var> parents,
              std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->id = g_next_id++;
  for (const auto& p : parents) {
    if (p->requires_grad) n->requires_grad = true;
  }
  n->parents = std::move(parents);
  if (n->requires_grad) n->backprop = std::move(backprop);
  return n;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->rows() != b->rows() || a->cols() != b->cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a->value) + " vs " + shape_str(b->value));
  }
}

}  // namespace

void Node::accumulate(const Mat& g) {
  if (!has_grad) {
    grad = g;
    has_grad = true;
  } else {
    grad += g;
  }
}

double Node::scalar() const {
  if (rows() != 1 || cols() != 1) {
    throw ShapeError("scalar(): node is " + shape_str(value));
  }
  return value(0, 0);
}

Var constant(Mat v) {
  check_finite(v, "constant");
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->id = g_next_id++;
  return n;
}

Var leaf(Mat v, bool requires_grad) {
  check_finite(v, "leaf");
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->id = g_next_id++;
  n->requires_grad = requires_grad;
  return n;
}

Var scalar_const(double v) { return constant(Mat::Constant(1, 1, v)); }

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return make_node(a->value + b->value, {a, b}, [](Node& n) {
    n.parents[0]->accumulate(n.grad);
    n.parents[1]->accumulate(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return make_node(a->value - b->value, {a, b}, [](Node& n) {
    n.parents[0]->accumulate(n.grad);
    n.parents[1]->accumulate(-n.grad);
  });
}

Var neg(const Var& a) {
  return make_node(-a->value, {a},
                   [](Node& n) { n.parents[0]->accumulate(-n.grad); });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return make_node(a->value.cwiseProduct(b->value), {a, b}, [](Node& n) {
    n.parents[0]->accumulate(n.grad.cwiseProduct(n.parents[1]->value));
    n.parents[1]->accumulate(n.grad.cwiseProduct(n.parents[0]->value));
  });
}

Var cdiv(const Var& a, const Var& b) {
  require_same_shape(a, b, "cdiv");
  if ((b->value.array() == 0.0).any()) throw DomainError("cdiv: zero divisor");
  return make_node(a->value.cwiseQuotient(b->value), {a, b}, [](Node& n) {
    const Mat& bv = n.parents[1]->value;
    n.parents[0]->accumulate(n.grad.cwiseQuotient(bv));
    n.parents[1]->accumulate(
        -n.grad.cwiseProduct(n.value).cwiseQuotient(bv));
  });
}

Var scale(const Var& a, double s) {
  return make_node(a->value * s, {a},
                   [s](Node& n) { n.parents[0]->accumulate(n.grad * s); });
}

Var add_scalar(const Var& a, double s) {
  return make_node(a->value.array() + s, {a},
                   [](Node& n) { n.parents[0]->accumulate(n.grad); });
}

Var add_rowvec(const Var& m, const Var& v) {
  if (v->rows() != 1 || v->cols() != m->cols()) {
    throw ShapeError("add_rowvec: " + shape_str(m->value) + " vs " +
                     shape_str(v->value));
  }
  Mat out = m->value.rowwise() + v->value.row(0);
  return make_node(std::move(out), {m, v}, [](Node& n) {
    n.parents[0]->accumulate(n.grad);
    n.parents[1]->accumulate(n.grad.colwise().sum());
  });
}

Var add_colvec(const Var& m, const Var& v) {
  if (v->cols() != 1 || v->rows() != m->rows()) {
    throw ShapeError("add_colvec: " + shape_str(m->value) + " vs " +
                     shape_str(v->value));
  }
  Mat out = m->value.colwise() + v->value.col(0);
  return make_node(std::move(out), {m, v}, [](Node& n) {
    n.parents[0]->accumulate(n.grad);
    n.parents[1]->accumulate(n.grad.rowwise().sum());
  });
}

Var mul_colvec(const Var& m, const Var& v) {
  if (v->cols() != 1 || v->rows() != m->rows()) {
    throw ShapeError("mul_colvec: " + shape_str(m->value) + " vs " +
                     shape_str(v->value));
  }
  Mat out = m->value.array().colwise() * v->value.col(0).array();
  return make_node(std::move(out), {m, v}, [](Node& n) {
    const Mat& mv = n.parents[0]->value;
    const Mat& vv = n.parents[1]->value;
    n.parents[0]->accumulate(n.grad.array().colwise() * vv.col(0).array());
    n.parents[1]->accumulate(
        n.grad.cwiseProduct(mv).rowwise().sum());
  });
}

Var mul_rowvec(const Var& m, const Var& v) {
  if (v->rows() != 1 || v->cols() != m->cols()) {
    throw ShapeError("mul_rowvec: " + shape_str(m->value) + " vs " +
                     shape_str(v->value));
  }
  Mat out = m->value.array().rowwise() * v->value.row(0).array();
  return make_node(std::move(out), {m, v}, [](Node& n) {
    const Mat& mv = n.parents[0]->value;
    const Mat& vv = n.parents[1]->value;
    n.parents[0]->accumulate(n.grad.array().rowwise() * vv.row(0).array());
    n.parents[1]->accumulate(n.grad.cwiseProduct(mv).colwise().sum());
  });
}

Var matmul(const Var& a, const Var& b) {
  if (a->cols() != b->rows()) {
    throw ShapeError("matmul: shape mismatch " + shape_str(a->value) +
                     " vs " + shape_str(b->value));
  }
  return make_node(a->value * b->value, {a, b}, [](Node& n) {
    n.parents[0]->accumulate(n.grad * n.parents[1]->value.transpose());
    n.parents[1]->accumulate(n.parents[0]->value.transpose() * n.grad);
  });
}

Var transpose(const Var& a) {
  return make_node(a->value.transpose(), {a}, [](Node& n) {
    n.parents[0]->accumulate(n.grad.transpose());
  });
}

Var vexp(const Var& a) {
  return make_node(a->value.array().exp(), {a}, [](Node& n) {
    n.parents[0]->accumulate(n.grad.cwiseProduct(n.value));
  });
}

Var vlog(const Var& a) {
  if ((a->value.array() <= 0.0).any()) {
    throw DomainError("log: non-positive input");
  }
  return make_node(a->value.array().log(), {a}, [](Node& n) {
    n.parents[0]->accumulate(n.grad.cwiseQuotient(n.parents[0]->value));
  });
}

Var vsqrt(const Var& a) {
  if ((a->value.array() < 0.0).any()) {
    throw DomainError("sqrt: negative input");
  }
  return make_node(a->value.array().sqrt(), {a}, [](Node& n) {
    n.parents[0]->accumulate(
        (n.grad.array() * 0.5 / n.value.array().max(1e-300)).matrix());
  });
}

Var square(const Var& a) {
  return make_node(a->value.array().square(), {a}, [](Node& n) {
    n.parents[0]->accumulate(
        (n.grad.array() * 2.0 * n.parents[0]->value.array()).matrix());
  });
}

Var vabs(const Var& a) {
  return make_node(a->value.array().abs(), {a}, [](Node& n) {
    n.parents[0]->accumulate(
        n.grad.cwiseProduct(n.parents[0]->value.array().sign().matrix()));
  });
}

Var vtanh(const Var& a) {
  return make_node(a->value.array().tanh(), {a}, [](Node& n) {
    n.parents[0]->accumulate(
        (n.grad.array() * (1.0 - n.value.array().square())).matrix());
  });
}

Var verf(const Var& a) {
  Mat out = a->value.unaryExpr([](double x) { return std::erf(x); });
  return make_node(std::move(out), {a}, [](Node& n) {
    constexpr double two_over_sqrt_pi = 1.1283791670955126;
    n.parents[0]->accumulate(
        (n.grad.array() * two_over_sqrt_pi *
         (-n.parents[0]->value.array().square()).exp())
            .matrix());
  });
}

Var vsin(const Var& a) {
  return make_node(a->value.array().sin(), {a}, [](Node& n) {
    n.parents[0]->accumulate(
        n.grad.cwiseProduct(n.parents[0]->value.array().cos().matrix()));
  });
}

Var vcos(const Var& a) {
  return make_node(a->value.array().cos(), {a}, [](Node& n) {
    n.parents[0]->accumulate(
        -n.grad.cwiseProduct(n.parents[0]->value.array().sin().matrix()));
  });
}

Var sigmoid(const Var& a) {
  Mat out = (1.0 / (1.0 + (-a->value.array()).exp()));
  return make_node(std::move(out), {a}, [](Node& n) {
    n.parents[0]->accumulate(
        (n.grad.array() * n.value.array() * (1.0 - n.value.array())).matrix());
  });
}

Var softplus(const Var& a) {
  Mat out = a->value.unaryExpr([](double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
  });
  return make_node(std::move(out), {a}, [](Node& n) {
    Mat sig = 1.0 / (1.0 + (-n.parents[0]->value.array()).exp());
    n.parents[0]->accumulate(n.grad.cwiseProduct(sig));
  });
}

Var relu(const Var& a) {
  return make_node(a->value.cwiseMax(0.0), {a}, [](Node& n) {
    Mat mask = (n.parents[0]->value.array() > 0.0).cast<double>();
    n.parents[0]->accumulate(n.grad.cwiseProduct(mask));
  });
}

Var sum(const Var& a) {
  return make_node(Mat::Constant(1, 1, a->value.sum()), {a}, [](Node& n) {
    n.parents[0]->accumulate(Mat::Constant(n.parents[0]->rows(),
                                           n.parents[0]->cols(),
                                           n.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  double c = static_cast<double>(a->value.size());
  return make_node(Mat::Constant(1, 1, a->value.mean()), {a}, [c](Node& n) {
    n.parents[0]->accumulate(Mat::Constant(n.parents[0]->rows(),
                                           n.parents[0]->cols(),
                                           n.grad(0, 0) / c));
  });
}

Var sum_rows(const Var& a) {
  return make_node(a->value.rowwise().sum(), {a}, [](Node& n) {
    n.parents[0]->accumulate(
        n.grad.col(0).replicate(1, n.parents[0]->cols()));
  });
}

Var sum_cols(const Var& a) {
  return make_node(a->value.colwise().sum(), {a}, [](Node& n) {
    n.parents[0]->accumulate(
        n.grad.row(0).replicate(n.parents[0]->rows(), 1));
  });
}

Var mean_rows(const Var& a) {
  double c = static_cast<double>(a->rows());
  return make_node(a->value.colwise().mean(), {a}, [c](Node& n) {
    n.parents[0]->accumulate(
        Mat((n.grad.row(0) / c).replicate(n.parents[0]->rows(), 1)));
  });
}

namespace {
Var softmax_rows_impl(const Var& a, const Mat* mask) {
  Mat logits = a->value;
  if (mask) {
    if (mask->rows() != logits.rows() || mask->cols() != logits.cols()) {
      throw ShapeError("softmax mask: shape mismatch");
    }
    logits += *mask;
  }
  Mat out(logits.rows(), logits.cols());
  for (long i = 0; i < logits.rows(); ++i) {
    double m = logits.row(i).maxCoeff();
    Eigen::ArrayXd e = (logits.row(i).array() - m).exp();
    out.row(i) = (e / e.sum()).matrix();
  }
  return make_node(std::move(out), {a}, [](Node& n) {
    Mat dx(n.rows(), n.cols());
    for (long i = 0; i < n.rows(); ++i) {
      double dot = n.grad.row(i).dot(n.value.row(i));
      dx.row(i) =
          (n.value.row(i).array() * (n.grad.row(i).array() - dot)).matrix();
    }
    n.parents[0]->accumulate(dx);
  });
}
}  // namespace

Var softmax_rows(const Var& a) { return softmax_rows_impl(a, nullptr); }

Var softmax_rows_masked(const Var& a, const Mat& additive_mask) {
  return softmax_rows_impl(a, &additive_mask);
}

Var logsumexp_rows(const Var& a) {
  Mat out(a->rows(), 1);
  for (long i = 0; i < a->rows(); ++i) {
    double m = a->value.row(i).maxCoeff();
    out(i, 0) = m + std::log((a->value.row(i).array() - m).exp().sum());
  }
  return make_node(std::move(out), {a}, [](Node& n) {
    Mat dx(n.parents[0]->rows(), n.parents[0]->cols());
    for (long i = 0; i < dx.rows(); ++i) {
      Eigen::ArrayXd sm =
          (n.parents[0]->value.row(i).array() - n.value(i, 0)).exp();
      dx.row(i) = (sm * n.grad(i, 0)).matrix();
    }
    n.parents[0]->accumulate(dx);
  });
}

Var group_softmax(const Var& a, const std::vector<int>& groups) {
  if (a->cols() != 1 || static_cast<std::size_t>(a->rows()) != groups.size()) {
    throw ShapeError("group_softmax: expects column vector matching groups");
  }
  int ng = 0;
  for (int g : groups) ng = std::max(ng, g + 1);
  std::vector<double> gmax(ng, -1e300), gsum(ng, 0.0);
  for (std::size_t i = 0; i < groups.size(); ++i) {
    gmax[groups[i]] = std::max(gmax[groups[i]], a->value(i, 0));
  }
  Mat e(a->rows(), 1);
  for (std::size_t i = 0; i < groups.size(); ++i) {
    e(i, 0) = std::exp(a->value(i, 0) - gmax[groups[i]]);
    gsum[groups[i]] += e(i, 0);
  }
  Mat out(a->rows(), 1);
  for (std::size_t i = 0; i < groups.size(); ++i) {
    out(i, 0) = e(i, 0) / gsum[groups[i]];
  }
  auto groups_copy = groups;
  return make_node(std::move(out), {a}, [groups_copy, ng](Node& n) {
    std::vector<double> gdot(ng, 0.0);
    for (std::size_t i = 0; i < groups_copy.size(); ++i) {
      gdot[groups_copy[i]] += n.grad(i, 0) * n.value(i, 0);
    }
    Mat dx(n.rows(), 1);
    for (std::size_t i = 0; i < groups_copy.size(); ++i) {
      dx(i, 0) = n.value(i, 0) * (n.grad(i, 0) - gdot[groups_copy[i]]);
    }
    n.parents[0]->accumulate(dx);
  });
}

Var layernorm_rows(const Var& a, double eps) {
  long r = a->rows(), c = a->cols();
  Mat out(r, c);
  Eigen::VectorXd inv_std(r);
  for (long i = 0; i < r; ++i) {
    double mu = a->value.row(i).mean();
    double var = (a->value.row(i).array() - mu).square().mean();
    double s = std::sqrt(var + eps);
    inv_std(i) = 1.0 / s;
    out.row(i) = ((a->value.row(i).array() - mu) / s).matrix();
  }
  return make_node(std::move(out), {a}, [inv_std](Node& n) {
    long c = n.cols();
    Mat dx(n.rows(), c);
    for (long i = 0; i < n.rows(); ++i) {
      double gmean = n.grad.row(i).mean();
      double gydot = n.grad.row(i).dot(n.value.row(i)) / c;
      dx.row(i) = inv_std(i) *
                  (n.grad.row(i).array() - gmean -
                   n.value.row(i).array() * gydot)
                      .matrix();
    }
    n.parents[0]->accumulate(dx);
  });
}

Var l2_normalize_rows(const Var& a) {
  long r = a->rows();
  Eigen::VectorXd norms(r);
  for (long i = 0; i < r; ++i) {
    norms(i) = a->value.row(i).norm();
    if (norms(i) == 0.0) {
      throw DomainError("l2_normalize: zero-norm row " + std::to_string(i));
    }
  }
  Mat out = a->value.array().colwise() / norms.array();
  return make_node(std::move(out), {a}, [norms](Node& n) {
    Mat dx(n.rows(), n.cols());
    for (long i = 0; i < n.rows(); ++i) {
      double dot = n.grad.row(i).dot(n.value.row(i));
      dx.row(i) =
          (n.grad.row(i) - dot * n.value.row(i)) / norms(i);
    }
    n.parents[0]->accumulate(dx);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty");
  long cols = parts[0]->cols(), rows = 0;
  for (const auto& p : parts) {
    if (p->cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p->rows();
  }
  Mat out(rows, cols);
  long at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p->rows()) = p->value;
    at += p->rows();
  }
  return make_node(std::move(out), parts, [](Node& n) {
    long at = 0;
    for (auto& p : n.parents) {
      p->accumulate(n.grad.middleRows(at, p->rows()));
      at += p->rows();
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty");
  long rows = parts[0]->rows(), cols = 0;
  for (const auto& p : parts) {
    if (p->rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p->cols();
  }
  Mat out(rows, cols);
  long at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p->cols()) = p->value;
    at += p->cols();
  }
  return make_node(std::move(out), parts, [](Node& n) {
    long at = 0;
    for (auto& p : n.parents) {
      p->accumulate(n.grad.middleCols(at, p->cols()));
      at += p->cols();
    }
  });
}

Var slice_rows(const Var& a, long start, long count) {
  if (start < 0 || count < 0 || start + count > a->rows()) {
    throw ShapeError("slice_rows: out of range");
  }
  return make_node(a->value.middleRows(start, count), {a},
                   [start, count](Node& n) {
                     Mat dx = Mat::Zero(n.parents[0]->rows(),
                                        n.parents[0]->cols());
                     dx.middleRows(start, count) = n.grad;
                     n.parents[0]->accumulate(dx);
                   });
}

Var slice_cols(const Var& a, long start, long count) {
  if (start < 0 || count < 0 || start + count > a->cols()) {
    throw ShapeError("slice_cols: out of range");
  }
  return make_node(a->value.middleCols(start, count), {a},
                   [start, count](Node& n) {
                     Mat dx = Mat::Zero(n.parents[0]->rows(),
                                        n.parents[0]->cols());
                     dx.middleCols(start, count) = n.grad;
                     n.parents[0]->accumulate(dx);
                   });
}

Var row_select(const Var& a, const std::vector<int>& idx) {
  Mat out(static_cast<long>(idx.size()), a->cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a->rows()) {
      throw ShapeError("row_select: index " + std::to_string(idx[i]) +
                       " out of range");
    }
    out.row(static_cast<long>(i)) = a->value.row(idx[i]);
  }
  auto idx_copy = idx;
  return make_node(std::move(out), {a}, [idx_copy](Node& n) {
    Mat dx = Mat::Zero(n.parents[0]->rows(), n.parents[0]->cols());
    for (std::size_t i = 0; i < idx_copy.size(); ++i) {
      dx.row(idx_copy[i]) += n.grad.row(static_cast<long>(i));
    }
    n.parents[0]->accumulate(dx);
  });
}

void backward(const Var& loss) {
  if (loss->rows() != 1 || loss->cols() != 1) {
    throw ShapeError("backward: loss must be scalar, got " +
                     shape_str(loss->value));
  }
  // Collect reachable nodes; creation ids give a stable topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Var> stack{loss};
  std::vector<Var> keep_alive;
  while (!stack.empty()) {
    Var v = stack.back();
    stack.pop_back();
    if (!seen.insert(v.get()).second) continue;
    keep_alive.push_back(v);
    order.push_back(v.get());
    for (const auto& p : v->parents) stack.push_back(p);
  }
  std::sort(order.begin(), order.end(),
            [](Node* a, Node* b) { return a->id > b->id; });
  loss->accumulate(Mat::Constant(1, 1, 1.0));
  for (Node* n : order) {
    if (n->backprop && n->has_grad && n->requires_grad) {
      n->backprop(*n);
    }
  }
}

// ---------------------------------------------------------------------------

Var ParamStore::add(const std::string& name, Mat init, bool trainable,
                    bool frozen) {
  if (params_.count(name)) {
    throw std::runtime_error("duplicate param name: " + name);
  }
  Param p;
  p.name = name;
  p.var = leaf(std::move(init), trainable && !frozen);
  p.trainable = trainable;
  p.frozen = frozen;
  params_[name] = p;
  return params_[name].var;
}

Param& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::runtime_error("no param: " + name);
  return it->second;
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::runtime_error("no param: " + name);
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : params_) out.push_back(k);
  return out;
}

void ParamStore::zero_grad() {
  for (auto& [k, p] : params_) {
    p.var->has_grad = false;
    p.var->grad.resize(0, 0);
  }
}

std::map<std::string, Mat> ParamStore::gradients() const {
  std::map<std::string, Mat> out;
  for (const auto& [k, p] : params_) {
    if (p.trainable && !p.frozen && p.var->has_grad) out[k] = p.var->grad;
  }
  return out;
}

std::vector<FdReport> finite_diff_check(
    const std::function<Var()>& loss_fn, ParamStore& store, double step,
    double tolerance) {
  if (step <= 0.0) throw std::invalid_argument("finite_diff_check: step <= 0");
  store.zero_grad();
  Var loss = loss_fn();
  double base = loss->scalar();
  {
    Var again = loss_fn();
    if (again->scalar() != base) {
      throw std::runtime_error(
          "finite_diff_check: loss_fn is not deterministic");
    }
  }
  backward(loss);
  std::map<std::string, Mat> analytic;
  for (const auto& [k, p] : store.all()) {
    if (p.var->has_grad) analytic[k] = p.var->grad;
  }

  std::vector<FdReport> reports;
  for (auto& [name, p] : store.all()) {
    FdReport rep;
    rep.param = name;
    if (p.frozen) {
      rep.frozen = true;
      reports.push_back(rep);
      continue;
    }
    if (!p.trainable) continue;
    Mat& v = p.var->value;
    Mat fd(v.rows(), v.cols());
    for (long i = 0; i < v.rows(); ++i) {
      for (long j = 0; j < v.cols(); ++j) {
        double orig = v(i, j);
        v(i, j) = orig + step;
        double lp = loss_fn()->scalar();
        v(i, j) = orig - step;
        double lm = loss_fn()->scalar();
        v(i, j) = orig;
        fd(i, j) = (lp - lm) / (2.0 * step);
      }
    }
    Mat ga = analytic.count(name) ? analytic[name]
                                  : Mat::Zero(v.rows(), v.cols());
    double num = (ga - fd).cwiseAbs().maxCoeff();
    double den = fd.cwiseAbs().maxCoeff() + 1e-12;
    rep.max_rel_err = num / den;
    rep.pass = rep.max_rel_err <= tolerance;
    reports.push_back(rep);
  }
  return reports;
}

bool all_pass(const std::vector<FdReport>& reports) {
  for (const auto& r : reports) {
    if (!r.frozen && !r.pass) return false;
  }
  return true;
}

}  // namespace gstm::ad
