#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace stimseg {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Node;

// A dense 2-D value with an optional reverse-mode gradient. Copies share the
// same node, so a Tensor held by a module and by a parameter registry refer
// to one buffer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false);

  static Tensor zeros(Index rows, Index cols, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix& value() const;
  Matrix& mutable_value();
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  // Gradient buffer; zero-sized until something flows into it.
  const Matrix& grad() const;
  bool has_grad() const;
  void zero_grad();

  // Seeds d(this)/d(this) = 1 and propagates to every leaf. Only valid on a
  // 1x1 tensor. Leaf gradients accumulate across calls.
  void backward() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared_node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;

  friend Tensor make_op(Matrix value, std::vector<Tensor> parents,
                        std::function<void(Node&)> backward);
};

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  // Accumulates into grad, allocating it on first use.
  void accumulate(const Matrix& g);
  template <typename Expr>
  void accumulate_expr(const Expr& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
  Node& parent(std::size_t i) { return *parents[i]; }
};

// Builds a result node. When grad mode is off, or no parent needs a
// gradient, the result is a constant with no history.
Tensor make_op(Matrix value, std::vector<Tensor> parents, std::function<void(Node&)> backward);

bool grad_enabled();

// Disables graph construction in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// Adds a 1 x cols row to every row of a.
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor add_const(const Tensor& a, const Matrix& c);
Tensor scale(const Tensor& a, double s);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// Row-wise layer normalization with affine gain/shift (both 1 x cols).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor softmax_rows(const Tensor& a);

Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, Index start, Index count);
Tensor slice_cols(const Tensor& a, Index start, Index count);
Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> ids);
// Row-major reinterpretation with the same element count.
Tensor reshape(const Tensor& a, Index rows, Index cols);

// Stride-2, kernel-2 transposed-convolution scatter. `a` holds a grid x grid
// map of tokens (row-major) with 4 * channels columns ordered
// (ky, kx, channel); the result is the (2 grid)^2 x channels map.
Tensor pixel_shuffle2(const Tensor& a, Index grid, Index channels);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

}  // namespace ops
}  // namespace stimseg
