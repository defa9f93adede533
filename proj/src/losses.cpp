#include "stimseg/losses.hpp"

#include <cmath>
#include <iostream>
#include <stdexcept>

namespace stimseg {

namespace {

void check_shape(const Tensor& logits, const Matrix& target, const char* what) {
  if (logits.rows() != target.rows() || logits.cols() != target.cols()) {
    throw std::invalid_argument(std::string(what) + ": prediction " +
                                std::to_string(logits.rows()) + "x" +
                                std::to_string(logits.cols()) + " vs target " +
                                std::to_string(target.rows()) + "x" +
                                std::to_string(target.cols()));
  }
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(sigmoid(x)) without overflow.
double log_sigmoid(double x) {
  if (x >= 0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

}  // namespace

double dice_from_probs(const Matrix& probs, const Matrix& target, double eps) {
  const double inter = probs.cwiseProduct(target).sum();
  return 1.0 - (2.0 * inter + eps) / (probs.sum() + target.sum() + eps);
}

Tensor dice_loss(const Tensor& logits, const Matrix& target, double eps) {
  check_shape(logits, target, "dice_loss");
  Matrix p = logits.value().unaryExpr(&stable_sigmoid);
  const double num = 2.0 * p.cwiseProduct(target).sum() + eps;
  const double den = p.sum() + target.sum() + eps;
  Matrix out(1, 1);
  out(0, 0) = 1.0 - num / den;
  return make_op(std::move(out), {logits},
                 [p = std::move(p), target, num, den](Node& n) {
                   // dL/dp = -(2 g den - num) / den^2
                   Matrix dp = ((2.0 * den) * target.array() - num).matrix() * (-1.0 / (den * den));
                   Matrix dx = dp.cwiseProduct(p.cwiseProduct((1.0 - p.array()).matrix()));
                   n.parent(0).accumulate_expr(dx * n.grad(0, 0));
                 });
}

Tensor focal_loss(const Tensor& logits, const Matrix& target, const FocalParams& fp) {
  check_shape(logits, target, "focal_loss");
  const Matrix& x = logits.value();
  const double count = static_cast<double>(x.size());
  Matrix dx(x.rows(), x.cols());
  double total = 0.0;
  for (Index i = 0; i < x.size(); ++i) {
    const bool pos = target.data()[i] > 0.5;
    const double z = pos ? x.data()[i] : -x.data()[i];
    const double alpha = pos ? fp.alpha_pos : fp.alpha_neg;
    const double pt = stable_sigmoid(z);
    const double lpt = log_sigmoid(z);
    // 1 - sigmoid(z) = sigmoid(-z), accurate when z is large.
    const double q = stable_sigmoid(-z);
    const double w = fp.gamma == 0.0 ? 1.0 : std::pow(q, fp.gamma);
    total += -alpha * w * lpt;
    const double dz = alpha * w * (fp.gamma * pt * lpt - q);
    dx.data()[i] = (pos ? dz : -dz) / count;
  }
  Matrix out(1, 1);
  out(0, 0) = total / count;
  return make_op(std::move(out), {logits}, [dx = std::move(dx)](Node& n) {
    n.parent(0).accumulate_expr(dx * n.grad(0, 0));
  });
}

Tensor lang_loss(const Tensor& logits, std::span<const std::int64_t> gold, std::int64_t pad_id) {
  if (gold.size() < 1) throw std::invalid_argument("lang_loss: empty gold sequence");
  const Index targets = static_cast<Index>(gold.size()) - 1;
  if (logits.rows() < targets) {
    throw std::invalid_argument("lang_loss: logits cover " + std::to_string(logits.rows()) +
                                " positions, need " + std::to_string(targets));
  }
  const Matrix& v = logits.value();
  const Index vocab = v.cols();
  Matrix grad = Matrix::Zero(v.rows(), vocab);
  double total = 0.0;
  int count = 0;
  for (Index i = 0; i < targets; ++i) {
    const std::int64_t t = gold[static_cast<std::size_t>(i) + 1];
    if (t == pad_id) continue;
    if (t < 0 || t >= vocab) throw std::out_of_range("lang_loss: target id outside vocabulary");
    const double mx = v.row(i).maxCoeff();
    Eigen::RowVectorXd e = (v.row(i).array() - mx).exp();
    const double z = e.sum();
    total += -(v(i, t) - mx - std::log(z));
    grad.row(i) = e / z;
    grad(i, t) -= 1.0;
    ++count;
  }
  Matrix out(1, 1);
  if (count == 0) {
    std::cerr << "warning: lang_loss called with only PAD targets; returning 0\n";
    out(0, 0) = 0.0;
    return make_op(std::move(out), {logits}, [](Node&) {});
  }
  out(0, 0) = total / count;
  grad /= static_cast<double>(count);
  return make_op(std::move(out), {logits}, [grad = std::move(grad)](Node& n) {
    n.parent(0).accumulate_expr(grad * n.grad(0, 0));
  });
}

Matrix downsample_mask(const BinaryMask& mask, int resolution) {
  if (resolution <= 0 || mask.height % resolution != 0 || mask.width % resolution != 0) {
    throw std::invalid_argument("mask " + std::to_string(mask.height) + "x" +
                                std::to_string(mask.width) + " is not a multiple of " +
                                std::to_string(resolution));
  }
  const int fy = mask.height / resolution;
  const int fx = mask.width / resolution;
  Matrix out(resolution, resolution);
  for (int r = 0; r < resolution; ++r) {
    for (int c = 0; c < resolution; ++c) {
      int on = 0;
      for (int y = 0; y < fy; ++y)
        for (int x = 0; x < fx; ++x) on += mask.at(r * fy + y, c * fx + x);
      out(r, c) = 2 * on > fy * fx ? 1.0 : 0.0;
    }
  }
  return out;
}

}  // namespace stimseg
