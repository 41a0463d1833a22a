// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mnlm/random.hpp"

namespace mnlm::ag {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
  std::ostringstream os;
  os << '(' << r << 'x' << c << ')';
  return os.str();
}

template <typename T>
struct Node {
  Matrix<T> value;
  Matrix<T> grad;
  bool requires_grad = false;
  // Set when grad holds data accumulated since the last zero_grad().
  bool has_grad = false;

  void accumulate(const Matrix<T>& g) {
    if (!has_grad) {
      grad = g;
      has_grad = true;
    } else {
      grad += g;
    }
  }
  Matrix<T>& grad_buffer() {
    if (!has_grad) {
      grad.setZero(value.rows(), value.cols());
      has_grad = true;
    }
    return grad;
  }
};

}  // namespace detail

// Handle to a dense matrix that may participate in reverse-mode differentiation.
// Copies share the underlying storage; parameters are long-lived tensors, while
// intermediate results live only as long as the tape that produced them.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Matrix<T> value) { return Tensor(std::move(value), false); }
  static Tensor parameter(Matrix<T> value) { return Tensor(std::move(value), true); }
  static Tensor zeros(Eigen::Index rows, Eigen::Index cols, bool requires_grad = false) {
    return Tensor(Matrix<T>::Zero(rows, cols), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  Eigen::Index size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  const Matrix<T>& value() const { return node_->value; }
  Matrix<T>& mutable_value() { return node_->value; }
  T item() const { return node_->value(0, 0); }

  bool has_grad() const { return node_->has_grad; }
  // Gradient from the last backward pass; zeros if this tensor did not participate.
  Matrix<T> grad() const {
    if (node_->has_grad) return node_->grad;
    return Matrix<T>::Zero(rows(), cols());
  }
  Matrix<T>& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() {
    node_->has_grad = false;
    node_->grad.resize(0, 0);
  }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  detail::Node<T>& node() const { return *node_; }

 private:
  Tensor(Matrix<T> value, bool requires_grad) : node_(std::make_shared<detail::Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  std::shared_ptr<detail::Node<T>> node_;

  template <typename U>
  friend class Tape;
};

// Records differentiable operations in execution order. Each recorded entry
// owns a closure that propagates the output gradient to its inputs; backward()
// replays them in reverse, which is a valid topological order by construction.
template <typename T>
class Tape {
 public:
  using Mat = Matrix<T>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return entries_.size(); }

  // --- linear algebra ---

  // a·b, or a·bᵀ when transpose_b is set.
  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
    const auto inner_b = transpose_b ? b.cols() : b.rows();
    if (a.cols() != inner_b) mismatch("matmul", a, b);
    Mat out = transpose_b ? Mat(a.value() * b.value().transpose()) : Mat(a.value() * b.value());
    return record(std::move(out), {a, b}, [a, b, transpose_b](const Mat& g) mutable {
      if (a.requires_grad()) {
        if (transpose_b)
          a.node().accumulate(g * b.value());
        else
          a.node().accumulate(g * b.value().transpose());
      }
      if (b.requires_grad()) {
        if (transpose_b)
          b.node().accumulate(g.transpose() * a.value());
        else
          b.node().accumulate(a.value().transpose() * g);
      }
    });
  }

  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) mismatch("add", a, b);
    return record(a.value() + b.value(), {a, b}, [a, b](const Mat& g) mutable {
      if (a.requires_grad()) a.node().accumulate(g);
      if (b.requires_grad()) b.node().accumulate(g);
    });
  }

  // x (n×c) + bias (1×c) broadcast over rows.
  Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& bias) {
    if (bias.rows() != 1 || bias.cols() != x.cols()) mismatch("add_row", x, bias);
    Mat out = x.value().rowwise() + bias.value().row(0);
    return record(std::move(out), {x, bias}, [x, bias](const Mat& g) mutable {
      if (x.requires_grad()) x.node().accumulate(g);
      if (bias.requires_grad()) bias.node().accumulate(g.colwise().sum());
    });
  }

  Tensor<T> scale(const Tensor<T>& x, T factor) {
    return record(x.value() * factor, {x}, [x, factor](const Mat& g) mutable {
      x.node().accumulate(g * factor);
    });
  }

  // 1×1 sum of all elements.
  Tensor<T> sum(const Tensor<T>& x) {
    Mat out(1, 1);
    out(0, 0) = x.value().sum();
    return record(std::move(out), {x}, [x](const Mat& g) mutable {
      x.node().accumulate(Mat::Constant(x.rows(), x.cols(), g(0, 0)));
    });
  }

  // --- elementwise ---

  Tensor<T> sigmoid(const Tensor<T>& x) {
    Mat out = x.value().unaryExpr([](T v) { return sigmoid_scalar(v); });
    Mat saved = out;
    return record(std::move(out), {x}, [x, y = std::move(saved)](const Mat& g) mutable {
      x.node().accumulate((g.array() * y.array() * (T(1) - y.array())).matrix());
    });
  }

  Tensor<T> tanh(const Tensor<T>& x) {
    Mat out = x.value().array().tanh().matrix();
    Mat saved = out;
    return record(std::move(out), {x}, [x, y = std::move(saved)](const Mat& g) mutable {
      x.node().accumulate((g.array() * (T(1) - y.array().square())).matrix());
    });
  }

  Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) mismatch("mul", a, b);
    return record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](const Mat& g) mutable {
      if (a.requires_grad()) a.node().accumulate(g.cwiseProduct(b.value()));
      if (b.requires_grad()) b.node().accumulate(g.cwiseProduct(a.value()));
    });
  }

  // --- structural ---

  // Stacks a on top of b (row concatenation); column counts must agree.
  Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.cols() != b.cols()) mismatch("concat_rows", a, b);
    Mat out(a.rows() + b.rows(), a.cols());
    out.topRows(a.rows()) = a.value();
    out.bottomRows(b.rows()) = b.value();
    const auto split = a.rows();
    return record(std::move(out), {a, b}, [a, b, split](const Mat& g) mutable {
      if (a.requires_grad()) a.node().accumulate(g.topRows(split));
      if (b.requires_grad()) b.node().accumulate(g.bottomRows(g.rows() - split));
    });
  }

  // Row concatenation of any number of blocks.
  Tensor<T> stack_rows(std::span<const Tensor<T>> parts) {
    if (parts.empty()) throw ShapeError("stack_rows: no inputs");
    Eigen::Index total = 0;
    bool needs = false;
    for (const auto& p : parts) {
      if (p.cols() != parts[0].cols()) mismatch("stack_rows", parts[0], p);
      total += p.rows();
      needs = needs || p.requires_grad();
    }
    Mat out(total, parts[0].cols());
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      out.middleRows(at, p.rows()) = p.value();
      at += p.rows();
    }
    if (!needs) return Tensor<T>(std::move(out), false);
    std::vector<Tensor<T>> inputs(parts.begin(), parts.end());
    Tensor<T> y(std::move(out), true);
    entries_.push_back({y.node_, [inputs = std::move(inputs)](const Mat& g) mutable {
                          Eigen::Index at = 0;
                          for (auto& p : inputs) {
                            if (p.requires_grad()) p.node().accumulate(g.middleRows(at, p.rows()));
                            at += p.rows();
                          }
                        }});
    return y;
  }

  // Columns [begin, begin + count).
  Tensor<T> slice_cols(const Tensor<T>& x, Eigen::Index begin, Eigen::Index count) {
    if (begin < 0 || count < 0 || begin + count > x.cols()) {
      throw ShapeError("slice_cols: columns [" + std::to_string(begin) + ", " +
                       std::to_string(begin + count) + ") out of range for " +
                       detail::shape_str(x.rows(), x.cols()));
    }
    return record(x.value().middleCols(begin, count), {x}, [x, begin, count](const Mat& g) mutable {
      x.node().grad_buffer().middleCols(begin, count) += g;
    });
  }

  // Gathers table rows; out.row(i) = table.row(ids[i]).
  Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::int32_t> ids) {
    Mat out(static_cast<Eigen::Index>(ids.size()), table.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= table.rows()) {
        throw ShapeError("gather_rows: id " + std::to_string(ids[i]) + " out of range for " +
                         detail::shape_str(table.rows(), table.cols()));
      }
      out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
    }
    std::vector<std::int32_t> idx(ids.begin(), ids.end());
    return record(std::move(out), {table}, [table, idx = std::move(idx)](const Mat& g) mutable {
      auto& dst = table.node().grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i) dst.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    });
  }

  // n copies of a single-row tensor.
  Tensor<T> repeat_row(const Tensor<T>& row, Eigen::Index n) {
    if (row.rows() != 1) mismatch("repeat_row", row, row);
    return record(row.value().replicate(n, 1), {row}, [row](const Mat& g) mutable {
      row.node().accumulate(g.colwise().sum());
    });
  }

  // Inverted dropout: survivors scaled by 1/(1-p). Identity when !train or p == 0.
  Tensor<T> dropout(const Tensor<T>& x, T p, bool train, Rng& rng) {
    if (!train || p == T(0)) return x;
    if (!(p > T(0) && p < T(1))) throw std::invalid_argument("dropout: rate must lie in [0, 1)");
    const T keep_scale = T(1) / (T(1) - p);
    Mat mask(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < mask.size(); ++i)
      mask.data()[i] = rng.uniform01() >= static_cast<double>(p) ? keep_scale : T(0);
    Mat out = x.value().cwiseProduct(mask);
    return record(std::move(out), {x}, [x, mask = std::move(mask)](const Mat& g) mutable {
      x.node().accumulate(g.cwiseProduct(mask));
    });
  }

  // Sum over rows with mask[i] set of -log softmax(logits.row(i))[targets[i]],
  // returned as 1×1. Rows with mask[i] unset contribute neither loss nor gradient.
  Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                                  std::span<const std::uint8_t> mask) {
    const auto n = logits.rows();
    if (static_cast<Eigen::Index>(targets.size()) != n || static_cast<Eigen::Index>(mask.size()) != n) {
      throw ShapeError("softmax_cross_entropy: logits " + detail::shape_str(logits.rows(), logits.cols()) +
                       " with " + std::to_string(targets.size()) + " targets and " +
                       std::to_string(mask.size()) + " mask entries");
    }
    Mat probs = Mat::Zero(n, logits.cols());
    T loss = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!mask[i]) continue;
      const auto t = targets[i];
      if (t < 0 || t >= logits.cols()) {
        throw ShapeError("softmax_cross_entropy: target " + std::to_string(t) + " out of range for " +
                         std::to_string(logits.cols()) + " classes");
      }
      const auto row = logits.value().row(i);
      const T m = row.maxCoeff();
      auto p = probs.row(i);
      p = (row.array() - m).exp().matrix();
      const T z = p.sum();
      p /= z;
      loss += std::log(z) + m - row(t);
    }
    Mat out(1, 1);
    out(0, 0) = loss;
    std::vector<std::int32_t> tgt(targets.begin(), targets.end());
    std::vector<std::uint8_t> msk(mask.begin(), mask.end());
    return record(std::move(out), {logits},
                  [logits, probs = std::move(probs), tgt = std::move(tgt), msk = std::move(msk)](const Mat& g) mutable {
                    Mat d = probs;
                    for (std::size_t i = 0; i < tgt.size(); ++i)
                      if (msk[i]) d(static_cast<Eigen::Index>(i), tgt[i]) -= T(1);
                    logits.node().accumulate(d * g(0, 0));
                  });
  }

  // Propagates d(loss)/d(·) into every requires_grad tensor reachable from loss.
  // Gradients accumulate on top of whatever the leaves already hold.
  void backward(const Tensor<T>& loss) {
    if (loss.rows() != 1 || loss.cols() != 1) {
      throw ShapeError("backward: loss must be 1x1, got " + detail::shape_str(loss.rows(), loss.cols()));
    }
    if (!loss.requires_grad()) return;
    loss.node().accumulate(Mat::Ones(1, 1));
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      auto& out = *it->output;
      if (!out.has_grad) continue;
      it->backward(out.grad);
      // Intermediate gradients are no longer needed once propagated.
      out.grad.resize(0, 0);
      out.has_grad = false;
    }
    entries_.clear();
  }

  static T sigmoid_scalar(T v) {
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
  }

 private:
  using Backward = std::function<void(const Mat&)>;

  struct Entry {
    std::shared_ptr<detail::Node<T>> output;
    Backward backward;
  };

  Tensor<T> record(Mat value, std::initializer_list<Tensor<T>> inputs, Backward fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    Tensor<T> out(std::move(value), needs);
    if (needs) entries_.push_back({out.node_, std::move(fn)});
    return out;
  }

  [[noreturn]] static void mismatch(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + detail::shape_str(a.rows(), a.cols()) +
                     " and " + detail::shape_str(b.rows(), b.cols()));
  }

  std::vector<Entry> entries_;
};

// --- optimizer primitives ---

template <typename T>
struct ClipResult {
  T norm = 0;   // joint L2 norm before clipping
  T scale = 1;  // factor applied to every gradient
};

// Rescales all gradients jointly so that their combined L2 norm is at most max_norm.
template <typename T>
ClipResult<T> clip_global_norm(std::span<Matrix<T>* const> grads, T max_norm) {
  if (!(max_norm > T(0))) throw std::invalid_argument("clip_global_norm: max_norm must be positive");
  double sq = 0;
  for (const auto* g : grads) sq += g->template cast<double>().squaredNorm();
  ClipResult<T> r;
  r.norm = static_cast<T>(std::sqrt(sq));
  if (r.norm > max_norm) {
    r.scale = max_norm / r.norm;
    for (auto* g : grads) *g *= r.scale;
  }
  return r;
}

// Same, over the gradients currently held by params.
template <typename T>
ClipResult<T> clip_global_norm(std::span<Tensor<T>> params, T max_norm) {
  std::vector<Matrix<T>*> grads;
  for (auto& p : params)
    if (p.has_grad()) grads.push_back(&p.mutable_grad());
  return clip_global_norm<T>(std::span<Matrix<T>* const>(grads), max_norm);
}

// Plain SGD, p <- p - lr * g in place. No momentum, no weight decay.
template <typename T>
void sgd_step(Matrix<T>& param, const Matrix<T>& grad, T lr) {
  if (grad.rows() != param.rows() || grad.cols() != param.cols()) {
    throw ShapeError("sgd_step: gradient " + detail::shape_str(grad.rows(), grad.cols()) + " vs parameter " +
                     detail::shape_str(param.rows(), param.cols()));
  }
  param -= lr * grad;
}

// Tensors that did not take part in the last backward pass are left untouched.
template <typename T>
void sgd_step(std::span<Tensor<T>> params, T lr) {
  for (auto& p : params)
    if (p.has_grad()) sgd_step<T>(p.mutable_value(), p.node().grad, lr);
}

template <typename T>
void zero_grad(std::span<Tensor<T>> params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace mnlm::ag
