#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "trm/errors.hpp"

namespace trm {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
using GradMap = std::unordered_map<const void*, Mat<S>>;

// Eager reverse-mode tape over dense matrices. Values are computed at node
// creation; backward() walks nodes in reverse order and pushes leaf gradients
// into a caller-owned GradMap. With gradients disabled the tape degenerates to
// plain eager evaluation (no backward metadata, no attention probabilities).
template <class S>
class Tape {
 public:
  using Ref = int;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) { nodes_.reserve(64); }

  bool grad_enabled() const { return grad_enabled_; }

  // Parameter leaf. The matrix is referenced, not copied; `trainable` marks
  // whether gradients should flow into it. Repeated calls with the same
  // pointer return the same node.
  Ref leaf(const Mat<S>* param, bool trainable) {
    auto it = leaf_cache_.find(param);
    if (it != leaf_cache_.end()) return it->second;
    Node node;
    node.op = Op::Leaf;
    node.param = param;
    node.needs_grad = grad_enabled_ && trainable;
    const Ref ref = push(std::move(node));
    leaf_cache_.emplace(param, ref);
    return ref;
  }

  Ref constant(Mat<S> value) {
    Node node;
    node.op = Op::Constant;
    node.value = std::move(value);
    node.needs_grad = false;
    return push(std::move(node));
  }

  const Mat<S>& value(Ref ref) const {
    const Node& node = nodes_[ref];
    return node.param != nullptr ? *node.param : node.value;
  }

  Ref add(Ref a, Ref b) {
    Node node = make(Op::Add, a, b);
    node.value = value(a) + value(b);
    return push(std::move(node));
  }

  Ref add3(Ref a, Ref b, Ref c) {
    Node node = make(Op::Add3, a, b, c);
    node.value = value(a) + value(b) + value(c);
    return push(std::move(node));
  }

  // out = a + alpha * b
  Ref axpy(Ref a, Ref b, S alpha) {
    Node node = make(Op::Axpy, a, b);
    node.scalar = alpha;
    node.value = value(a) + alpha * value(b);
    return push(std::move(node));
  }

  // Broadcast a 1xD row over every row of x.
  Ref add_row(Ref x, Ref row) {
    Node node = make(Op::AddRow, x, row);
    node.value = value(x).rowwise() + value(row).row(0);
    return push(std::move(node));
  }

  Ref matmul(Ref a, Ref b) {
    Node node = make(Op::MatMul, a, b);
    node.value.noalias() = value(a) * value(b);
    return push(std::move(node));
  }

  // out = a * b^T
  Ref matmul_nt(Ref a, Ref b) {
    Node node = make(Op::MatMulNT, a, b);
    node.value.noalias() = value(a) * value(b).transpose();
    return push(std::move(node));
  }

  // Row gather; used for token/task embedding lookups.
  Ref gather_rows(Ref table, std::vector<int> rows) {
    Node node = make(Op::GatherRows, table);
    const Mat<S>& src = value(table);
    node.value.resize(static_cast<Eigen::Index>(rows.size()), src.cols());
    for (size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] < 0 || rows[i] >= src.rows()) {
        raise(ErrorCode::IndexOutOfRange,
              "row " + std::to_string(rows[i]) + " outside table of " + std::to_string(src.rows()));
      }
      node.value.row(static_cast<Eigen::Index>(i)) = src.row(rows[i]);
    }
    node.indices = std::move(rows);
    return push(std::move(node));
  }

  // Root-mean-square normalization per row with a per-dimension gain (1xD).
  Ref rmsnorm(Ref x, Ref gain) {
    Node node = make(Op::RmsNorm, x, gain);
    const Mat<S>& xv = value(x);
    const Mat<S>& gv = value(gain);
    const Eigen::Index dim = xv.cols();
    Mat<S> inv(xv.rows(), 1);
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
      const S mean_sq = xv.row(r).squaredNorm() / static_cast<S>(dim);
      inv(r, 0) = S(1) / std::sqrt(mean_sq + kNormEps);
    }
    node.value = (xv.array().colwise() * inv.col(0).array()).rowwise() * gv.row(0).array();
    if (node.needs_grad) node.aux = std::move(inv);
    return push(std::move(node));
  }

  Ref silu(Ref x) {
    Node node = make(Op::Silu, x);
    const Mat<S>& xv = value(x);
    node.value = xv.array() * sigmoid(xv.array());
    return push(std::move(node));
  }

  // Multi-head scaled-dot-product attention over q, k, v of shape n x D.
  // Head h reads column block [h*hd, (h+1)*hd).
  Ref attention(Ref q, Ref k, Ref v, int n_heads) {
    Node node = make(Op::Attention, q, k, v);
    node.heads = n_heads;
    const Mat<S>& qv = value(q);
    const Mat<S>& kv = value(k);
    const Mat<S>& vv = value(v);
    const Eigen::Index n = qv.rows();
    const Eigen::Index head_dim = qv.cols() / n_heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(head_dim));

    node.value.resize(n, qv.cols());
    Mat<S> probs;
    if (node.needs_grad) probs.resize(static_cast<Eigen::Index>(n_heads) * n, n);
    Mat<S> scores(n, n);
    for (int h = 0; h < n_heads; ++h) {
      const auto qh = qv.middleCols(h * head_dim, head_dim);
      const auto kh = kv.middleCols(h * head_dim, head_dim);
      const auto vh = vv.middleCols(h * head_dim, head_dim);
      scores.noalias() = qh * kh.transpose();
      scores *= scale;
      softmax_rows_inplace(scores);
      node.value.middleCols(h * head_dim, head_dim).noalias() = scores * vh;
      if (node.needs_grad) probs.middleRows(static_cast<Eigen::Index>(h) * n, n) = scores;
    }
    if (node.needs_grad) node.aux = std::move(probs);
    return push(std::move(node));
  }

  // Column mean: n x D -> 1 x D.
  Ref mean_rows(Ref x) {
    Node node = make(Op::MeanRows, x);
    node.value = value(x).colwise().mean();
    return push(std::move(node));
  }

  // Mean cross-entropy of row-wise softmax against integer targets; 1x1.
  Ref softmax_cross_entropy(Ref logits, std::vector<int> targets) {
    Node node = make(Op::SoftmaxCE, logits);
    Mat<S> probs = value(logits);
    softmax_rows_inplace(probs);
    S total = S(0);
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
      total -= std::log(std::max(probs(r, targets[static_cast<size_t>(r)]), kLogFloor));
    }
    node.value = Mat<S>::Constant(1, 1, total / static_cast<S>(probs.rows()));
    node.indices = std::move(targets);
    if (node.needs_grad) node.aux = std::move(probs);
    return push(std::move(node));
  }

  // Binary cross-entropy with logits for a 1x1 input; numerically stable.
  Ref bce_with_logit(Ref logit, S target) {
    Node node = make(Op::BceLogit, logit);
    const S x = value(logit)(0, 0);
    const S loss = std::max(x, S(0)) - x * target + std::log1p(std::exp(-std::abs(x)));
    node.value = Mat<S>::Constant(1, 1, loss);
    node.scalar = target;
    return push(std::move(node));
  }

  // Backpropagates seed * d(root)/d(leaf) into sink[param] for every
  // trainable leaf. The root must be 1x1.
  void backward(Ref root, S seed, GradMap<S>& sink) {
    if (!grad_enabled_) raise(ErrorCode::ConfigError, "backward on a gradient-disabled tape");
    std::vector<Mat<S>> grads(nodes_.size());
    grads[static_cast<size_t>(root)] = Mat<S>::Constant(1, 1, seed);
    for (int i = root; i >= 0; --i) {
      Node& node = nodes_[static_cast<size_t>(i)];
      Mat<S>& grad = grads[static_cast<size_t>(i)];
      if (!node.needs_grad || grad.size() == 0) continue;
      apply_backward(node, grad, grads);
      if (node.op == Op::Leaf) {
        auto [it, inserted] = sink.try_emplace(node.param);
        if (inserted) it->second = std::move(grad);
        else it->second += grad;
      }
      grad.resize(0, 0);
      node.aux.resize(0, 0);
    }
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  enum class Op : uint8_t {
    Leaf,
    Constant,
    Add,
    Add3,
    Axpy,
    AddRow,
    MatMul,
    MatMulNT,
    GatherRows,
    RmsNorm,
    Silu,
    Attention,
    MeanRows,
    SoftmaxCE,
    BceLogit,
  };

  struct Node {
    Op op = Op::Constant;
    bool needs_grad = false;
    int heads = 0;
    std::array<int, 3> parents = {-1, -1, -1};
    const Mat<S>* param = nullptr;
    Mat<S> value;
    Mat<S> aux;
    std::vector<int> indices;
    S scalar = S(0);
  };

  static constexpr S kNormEps = S(1e-5);
  static constexpr S kLogFloor = std::numeric_limits<S>::min();

  Node make(Op op, Ref a, Ref b = -1, Ref c = -1) {
    Node node;
    node.op = op;
    node.parents = {a, b, c};
    node.needs_grad = grad_enabled_ && (parent_needs(a) || parent_needs(b) || parent_needs(c));
    return node;
  }

  bool parent_needs(Ref ref) const { return ref >= 0 && nodes_[static_cast<size_t>(ref)].needs_grad; }

  Ref push(Node node) {
    nodes_.push_back(std::move(node));
    return static_cast<Ref>(nodes_.size() - 1);
  }

  static auto sigmoid(const auto& array) { return S(1) / (S(1) + (-array).exp()); }

  static void softmax_rows_inplace(Mat<S>& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      auto row = m.row(r).array();
      row -= row.maxCoeff();
      row = row.exp();
      row /= row.sum();
    }
  }

  void accumulate(std::vector<Mat<S>>& grads, Ref ref, const Mat<S>& delta) {
    if (ref < 0) return;
    const Node& target = nodes_[static_cast<size_t>(ref)];
    if (!target.needs_grad) return;
    Mat<S>& slot = grads[static_cast<size_t>(ref)];
    if (slot.size() == 0) slot = delta;
    else slot += delta;
  }

  void apply_backward(Node& node, const Mat<S>& grad, std::vector<Mat<S>>& grads) {
    const auto [pa, pb, pc] = node.parents;
    switch (node.op) {
      case Op::Leaf:
      case Op::Constant:
        break;
      case Op::Add:
        accumulate(grads, pa, grad);
        accumulate(grads, pb, grad);
        break;
      case Op::Add3:
        accumulate(grads, pa, grad);
        accumulate(grads, pb, grad);
        accumulate(grads, pc, grad);
        break;
      case Op::Axpy:
        accumulate(grads, pa, grad);
        accumulate(grads, pb, node.scalar * grad);
        break;
      case Op::AddRow:
        accumulate(grads, pa, grad);
        accumulate(grads, pb, grad.colwise().sum());
        break;
      case Op::MatMul:
        if (parent_needs(pa)) accumulate(grads, pa, grad * value(pb).transpose());
        if (parent_needs(pb)) accumulate(grads, pb, value(pa).transpose() * grad);
        break;
      case Op::MatMulNT:
        if (parent_needs(pa)) accumulate(grads, pa, grad * value(pb));
        if (parent_needs(pb)) accumulate(grads, pb, grad.transpose() * value(pa));
        break;
      case Op::GatherRows: {
        if (!parent_needs(pa)) break;
        const Mat<S>& table = value(pa);
        Mat<S> delta = Mat<S>::Zero(table.rows(), table.cols());
        for (size_t i = 0; i < node.indices.size(); ++i) {
          delta.row(node.indices[i]) += grad.row(static_cast<Eigen::Index>(i));
        }
        accumulate(grads, pa, delta);
        break;
      }
      case Op::RmsNorm: {
        const Mat<S>& xv = value(pa);
        const Mat<S>& gv = value(pb);
        const Mat<S>& inv = node.aux;
        const Eigen::Index dim = xv.cols();
        if (parent_needs(pb)) {
          Mat<S> normed = xv.array().colwise() * inv.col(0).array();
          accumulate(grads, pb, (grad.array() * normed.array()).colwise().sum().matrix());
        }
        if (parent_needs(pa)) {
          Mat<S> scaled = grad.array().rowwise() * gv.row(0).array();  // dL/d(normed)
          Mat<S> dx(xv.rows(), xv.cols());
          for (Eigen::Index r = 0; r < xv.rows(); ++r) {
            const S inv_r = inv(r, 0);
            const S dot = scaled.row(r).dot(xv.row(r));
            dx.row(r) = inv_r * scaled.row(r) -
                        (inv_r * inv_r * inv_r * dot / static_cast<S>(dim)) * xv.row(r);
          }
          accumulate(grads, pa, dx);
        }
        break;
      }
      case Op::Silu: {
        const Mat<S>& xv = value(pa);
        auto sig = sigmoid(xv.array());
        Mat<S> dx = grad.array() * (sig + xv.array() * sig * (S(1) - sig));
        accumulate(grads, pa, dx);
        break;
      }
      case Op::Attention: {
        const Mat<S>& qv = value(pa);
        const Mat<S>& kv = value(pb);
        const Mat<S>& vv = value(pc);
        const Eigen::Index n = qv.rows();
        const int heads = node.heads;
        const Eigen::Index head_dim = qv.cols() / heads;
        const S scale = S(1) / std::sqrt(static_cast<S>(head_dim));
        Mat<S> dq = Mat<S>::Zero(n, qv.cols());
        Mat<S> dk = Mat<S>::Zero(n, qv.cols());
        Mat<S> dv = Mat<S>::Zero(n, qv.cols());
        for (int h = 0; h < heads; ++h) {
          const auto probs = node.aux.middleRows(static_cast<Eigen::Index>(h) * n, n);
          const auto gh = grad.middleCols(h * head_dim, head_dim);
          const auto qh = qv.middleCols(h * head_dim, head_dim);
          const auto kh = kv.middleCols(h * head_dim, head_dim);
          const auto vh = vv.middleCols(h * head_dim, head_dim);
          dv.middleCols(h * head_dim, head_dim).noalias() = probs.transpose() * gh;
          Mat<S> dprobs = gh * vh.transpose();
          const Mat<S> row_dots = (dprobs.array() * probs.array()).rowwise().sum();
          Mat<S> dscores =
              probs.array() * (dprobs.array().colwise() - row_dots.col(0).array());
          dscores *= scale;
          dq.middleCols(h * head_dim, head_dim).noalias() = dscores * kh;
          dk.middleCols(h * head_dim, head_dim).noalias() = dscores.transpose() * qh;
        }
        accumulate(grads, pa, dq);
        accumulate(grads, pb, dk);
        accumulate(grads, pc, dv);
        break;
      }
      case Op::MeanRows: {
        if (!parent_needs(pa)) break;
        const Mat<S>& xv = value(pa);
        const S inv_n = S(1) / static_cast<S>(xv.rows());
        Mat<S> dx = (inv_n * grad).replicate(xv.rows(), 1);
        accumulate(grads, pa, dx);
        break;
      }
      case Op::SoftmaxCE: {
        if (!parent_needs(pa)) break;
        Mat<S> dlogits = node.aux;  // softmax probabilities
        const S scale = grad(0, 0) / static_cast<S>(dlogits.rows());
        for (Eigen::Index r = 0; r < dlogits.rows(); ++r) {
          dlogits(r, node.indices[static_cast<size_t>(r)]) -= S(1);
        }
        dlogits *= scale;
        accumulate(grads, pa, dlogits);
        break;
      }
      case Op::BceLogit: {
        if (!parent_needs(pa)) break;
        const S x = value(pa)(0, 0);
        const S sig = S(1) / (S(1) + std::exp(-x));
        accumulate(grads, pa, Mat<S>::Constant(1, 1, grad(0, 0) * (sig - node.scalar)));
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Mat<S>*, Ref> leaf_cache_;
  bool grad_enabled_;
};

template <class S>
bool all_finite(const Mat<S>& m) {
  return m.allFinite();
}

}  // namespace trm
