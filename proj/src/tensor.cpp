#include "stimseg/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace stimseg {

namespace {

thread_local bool g_grad_enabled = true;

void require(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(what);
}

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Index rows, Index cols, bool requires_grad) {
  return Tensor(Matrix::Zero(rows, cols), requires_grad);
}

Tensor Tensor::scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return Tensor(std::move(m));
}

const Matrix& Tensor::value() const { return node_->value; }
Matrix& Tensor::mutable_value() { return node_->value; }

double Tensor::item() const {
  require(rows() == 1 && cols() == 1, "item() on a non-scalar tensor");
  return node_->value(0, 0);
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }

const Matrix& Tensor::grad() const { return node_->grad; }
bool Tensor::has_grad() const { return node_->grad.size() != 0; }
void Tensor::zero_grad() { node_->grad.resize(0, 0); }

void Tensor::backward() const {
  require(rows() == 1 && cols() == 1, "backward() needs a scalar");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
  // Interior gradients are scratch; leaves keep theirs.
  for (Node* n : order) {
    if (n->backward_fn) n->grad.resize(0, 0);
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_op(Matrix value, std::vector<Tensor> parents, std::function<void(Node&)> backward) {
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  Tensor out(std::move(value));
  if (needs) {
    out.node_->requires_grad = true;
    out.node_->parents.reserve(parents.size());
    for (auto& p : parents) out.node_->parents.push_back(p.shared_node());
    out.node_->backward_fn = std::move(backward);
  }
  return out;
}

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  Matrix out = a.value() * b.value();
  return make_op(std::move(out), {a, b}, [](Node& n) {
    Node& a = n.parent(0);
    Node& b = n.parent(1);
    if (a.requires_grad) a.accumulate_expr(n.grad * b.value.transpose());
    if (b.requires_grad) b.accumulate_expr(a.value.transpose() * n.grad);
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.cols(), "matmul_nt: inner dimension mismatch");
  Matrix out = a.value() * b.value().transpose();
  return make_op(std::move(out), {a, b}, [](Node& n) {
    Node& a = n.parent(0);
    Node& b = n.parent(1);
    if (a.requires_grad) a.accumulate_expr(n.grad * b.value);
    if (b.requires_grad) b.accumulate_expr(n.grad.transpose() * a.value);
  });
}

Tensor transpose(const Tensor& a) {
  Matrix out = a.value().transpose();
  return make_op(std::move(out), {a}, [](Node& n) {
    n.parent(0).accumulate_expr(n.grad.transpose());
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  Matrix out = a.value() + b.value();
  return make_op(std::move(out), {a, b}, [](Node& n) {
    if (n.parent(0).requires_grad) n.parent(0).accumulate(n.grad);
    if (n.parent(1).requires_grad) n.parent(1).accumulate(n.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  Matrix out = a.value() - b.value();
  return make_op(std::move(out), {a, b}, [](Node& n) {
    if (n.parent(0).requires_grad) n.parent(0).accumulate(n.grad);
    if (n.parent(1).requires_grad) n.parent(1).accumulate_expr(-n.grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  Matrix out = a.value().cwiseProduct(b.value());
  return make_op(std::move(out), {a, b}, [](Node& n) {
    Node& a = n.parent(0);
    Node& b = n.parent(1);
    if (a.requires_grad) a.accumulate_expr(n.grad.cwiseProduct(b.value));
    if (b.requires_grad) b.accumulate_expr(n.grad.cwiseProduct(a.value));
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: row shape mismatch");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return make_op(std::move(out), {a, row}, [](Node& n) {
    if (n.parent(0).requires_grad) n.parent(0).accumulate(n.grad);
    if (n.parent(1).requires_grad) n.parent(1).accumulate_expr(n.grad.colwise().sum());
  });
}

Tensor add_const(const Tensor& a, const Matrix& c) {
  require(a.rows() == c.rows() && a.cols() == c.cols(), "add_const: shape mismatch");
  Matrix out = a.value() + c;
  return make_op(std::move(out), {a}, [](Node& n) { n.parent(0).accumulate(n.grad); });
}

Tensor scale(const Tensor& a, double s) {
  Matrix out = a.value() * s;
  return make_op(std::move(out), {a}, [s](Node& n) { n.parent(0).accumulate_expr(n.grad * s); });
}

Tensor relu(const Tensor& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return make_op(std::move(out), {a}, [](Node& n) {
    Node& a = n.parent(0);
    a.accumulate_expr(n.grad.cwiseProduct((a.value.array() > 0.0).cast<double>().matrix()));
  });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  Matrix out = a.value().unaryExpr(
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); });
  return make_op(std::move(out), {a}, [](Node& n) {
    Node& a = n.parent(0);
    Matrix d = a.value.unaryExpr([](double x) {
      return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
    });
    a.accumulate_expr(n.grad.cwiseProduct(d));
  });
}

Tensor sigmoid(const Tensor& a) {
  Matrix out = a.value().unaryExpr([](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  Matrix y = out;
  return make_op(std::move(out), {a}, [y = std::move(y)](Node& n) {
    n.parent(0).accumulate_expr(
        n.grad.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const Index d = x.cols();
  require(gamma.rows() == 1 && gamma.cols() == d && beta.rows() == 1 && beta.cols() == d,
          "layer_norm: affine shape mismatch");
  const Matrix& xv = x.value();
  Matrix xhat(xv.rows(), d);
  Eigen::VectorXd inv_std(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  return make_op(std::move(out), {x, gamma, beta},
                 [xhat = std::move(xhat), inv_std = std::move(inv_std), d](Node& n) {
                   Node& x = n.parent(0);
                   Node& gamma = n.parent(1);
                   Node& beta = n.parent(2);
                   if (gamma.requires_grad)
                     gamma.accumulate_expr(n.grad.cwiseProduct(xhat).colwise().sum());
                   if (beta.requires_grad) beta.accumulate_expr(n.grad.colwise().sum());
                   if (x.requires_grad) {
                     Matrix gx(n.grad.rows(), d);
                     for (Index r = 0; r < n.grad.rows(); ++r) {
                       Eigen::RowVectorXd gh =
                           n.grad.row(r).cwiseProduct(gamma.value.row(0));
                       const double mean_gh = gh.mean();
                       const double mean_ghx = gh.cwiseProduct(xhat.row(r)).mean();
                       gx.row(r) = inv_std(r) *
                                   (gh.array() - mean_gh - xhat.row(r).array() * mean_ghx).matrix();
                     }
                     x.accumulate(gx);
                   }
                 });
}

Tensor softmax_rows(const Tensor& a) {
  const Matrix& v = a.value();
  Matrix out(v.rows(), v.cols());
  for (Index r = 0; r < v.rows(); ++r) {
    const double mx = v.row(r).maxCoeff();
    out.row(r) = (v.row(r).array() - mx).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  Matrix y = out;
  return make_op(std::move(out), {a}, [y = std::move(y)](Node& n) {
    Matrix g = n.grad.cwiseProduct(y);
    Eigen::VectorXd dots = g.rowwise().sum();
    g -= (y.array().colwise() * dots.array()).matrix();
    n.parent(0).accumulate(g);
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const Index cols = parts[0].cols();
  Index rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return make_op(std::move(out), std::vector<Tensor>(parts.begin(), parts.end()),
                 [offsets = std::move(offsets)](Node& n) {
                   for (std::size_t i = 0; i < n.parents.size(); ++i) {
                     Node& p = n.parent(i);
                     if (p.requires_grad)
                       p.accumulate_expr(n.grad.middleRows(offsets[i], p.value.rows()));
                   }
                 });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const Index rows = parts[0].rows();
  Index cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return make_op(std::move(out), std::vector<Tensor>(parts.begin(), parts.end()),
                 [offsets = std::move(offsets)](Node& n) {
                   for (std::size_t i = 0; i < n.parents.size(); ++i) {
                     Node& p = n.parent(i);
                     if (p.requires_grad)
                       p.accumulate_expr(n.grad.middleCols(offsets[i], p.value.cols()));
                   }
                 });
}

Tensor slice_rows(const Tensor& a, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows: out of range");
  Matrix out = a.value().middleRows(start, count);
  return make_op(std::move(out), {a}, [start, count](Node& n) {
    Node& a = n.parent(0);
    Matrix g = Matrix::Zero(a.value.rows(), a.value.cols());
    g.middleRows(start, count) = n.grad;
    a.accumulate(g);
  });
}

Tensor slice_cols(const Tensor& a, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols: out of range");
  Matrix out = a.value().middleCols(start, count);
  return make_op(std::move(out), {a}, [start, count](Node& n) {
    Node& a = n.parent(0);
    Matrix g = Matrix::Zero(a.value.rows(), a.value.cols());
    g.middleCols(start, count) = n.grad;
    a.accumulate(g);
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> ids) {
  const Index n_rows = table.rows();
  Matrix out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= n_rows) {
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) +
                              " outside table of " + std::to_string(n_rows) + " rows");
    }
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  std::vector<std::int64_t> idx(ids.begin(), ids.end());
  return make_op(std::move(out), {table}, [idx = std::move(idx)](Node& n) {
    Node& t = n.parent(0);
    Matrix g = Matrix::Zero(t.value.rows(), t.value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += n.grad.row(static_cast<Index>(i));
    t.accumulate(g);
  });
}

Tensor reshape(const Tensor& a, Index rows, Index cols) {
  require(rows * cols == a.rows() * a.cols(), "reshape: element count mismatch");
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  const Index r0 = a.rows();
  const Index c0 = a.cols();
  return make_op(std::move(out), {a}, [r0, c0](Node& n) {
    n.parent(0).accumulate(Eigen::Map<const Matrix>(n.grad.data(), r0, c0));
  });
}

Tensor pixel_shuffle2(const Tensor& a, Index grid, Index channels) {
  require(a.rows() == grid * grid && a.cols() == 4 * channels, "pixel_shuffle2: shape mismatch");
  const Index out_grid = 2 * grid;
  Matrix out(out_grid * out_grid, channels);
  const Matrix& v = a.value();
  for (Index i = 0; i < grid; ++i) {
    for (Index j = 0; j < grid; ++j) {
      const Index src = i * grid + j;
      for (Index ky = 0; ky < 2; ++ky) {
        for (Index kx = 0; kx < 2; ++kx) {
          const Index dst = (2 * i + ky) * out_grid + (2 * j + kx);
          out.row(dst) = v.row(src).segment((ky * 2 + kx) * channels, channels);
        }
      }
    }
  }
  return make_op(std::move(out), {a}, [grid, channels, out_grid](Node& n) {
    Matrix g(grid * grid, 4 * channels);
    for (Index i = 0; i < grid; ++i) {
      for (Index j = 0; j < grid; ++j) {
        const Index src = i * grid + j;
        for (Index ky = 0; ky < 2; ++ky) {
          for (Index kx = 0; kx < 2; ++kx) {
            const Index dst = (2 * i + ky) * out_grid + (2 * j + kx);
            g.row(src).segment((ky * 2 + kx) * channels, channels) = n.grad.row(dst);
          }
        }
      }
    }
    n.parent(0).accumulate(g);
  });
}

Tensor sum(const Tensor& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make_op(std::move(out), {a}, [](Node& n) {
    Node& a = n.parent(0);
    a.accumulate(Matrix::Constant(a.value.rows(), a.value.cols(), n.grad(0, 0)));
  });
}

Tensor mean(const Tensor& a) {
  const double count = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / count);
}

}  // namespace ops
}  // namespace stimseg
