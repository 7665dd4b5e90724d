#pragma once

// Matrix-valued reverse-mode differentiation.
//
// A Value is a shared handle to a Node holding a dense row-major matrix, an
// optional gradient of the same shape, and the closure that pushes the node's
// gradient into its parents. Nodes that do not depend on any parameter are
// constants: they keep no parents and record no closure.

#include <functional>
#include <memory>
#include <vector>

#include "morphflow/types.hpp"

namespace morphflow::nn {

using Matrix = FeatureMatrix;

struct Node {
  Matrix data;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  /// Gradient buffer, zero-initialized on first use.
  Matrix& grad_ref() {
    if (grad.rows() != data.rows() || grad.cols() != data.cols()) grad = Matrix::Zero(data.rows(), data.cols());
    return grad;
  }
  bool has_grad() const { return grad.size() == data.size() && grad.size() > 0; }
};

class Value {
 public:
  Value() = default;
  explicit Value(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Value constant(Matrix m);
  static Value parameter(Matrix m);

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix& data() const { return node_->data; }
  Matrix& mutable_data() { return node_->data; }
  /// Zero matrix when nothing has been accumulated yet.
  Matrix grad() const;
  Matrix& grad_ref() { return node_->grad_ref(); }
  void zero_grad() { node_->grad.resize(0, 0); }

  Eigen::Index rows() const { return node_->data.rows(); }
  Eigen::Index cols() const { return node_->data.cols(); }
  double item() const;
  bool requires_grad() const { return node_->requires_grad; }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Builds an op node. `backward` is dropped when no parent needs a gradient.
Value make_op(Matrix data, std::vector<Value> parents, std::function<void(Node&)> backward);

/// Reverse sweep from a 1x1 root. Leaf gradients accumulate across calls until
/// zeroed; interior gradients are reset at the start of each sweep.
void backward(const Value& root, double seed = 1.0);

// Dense algebra.
Value matmul(const Value& a, const Value& b);
/// a * b^T
Value matmul_nt(const Value& a, const Value& b);
Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
/// x + b with b (1 x c) broadcast over rows.
Value add_row(const Value& x, const Value& b);
/// Row i of x scaled by w(i, 0).
Value mul_col(const Value& x, const Value& w);
Value scale(const Value& x, double s);
/// a * x + b elementwise.
Value affine(const Value& x, double a, double b);

inline Value operator+(const Value& a, const Value& b) { return add(a, b); }
inline Value operator-(const Value& a, const Value& b) { return sub(a, b); }

// Pointwise nonlinearities.
Value leaky_relu(const Value& x, double slope = 0.01);
Value sigmoid(const Value& x);
Value tanh(const Value& x);

/// Row-wise softmax with max subtraction.
Value softmax_rows(const Value& x);

// Shape manipulation.
Value concat_cols(const std::vector<Value>& parts);
Value concat_rows(const std::vector<Value>& parts);
Value slice_cols(const Value& x, Eigen::Index start, Eigen::Index count);
Value slice_rows(const Value& x, Eigen::Index start, Eigen::Index count);
/// out.row(i) = x.row(indices[i]); gradient scatter-adds.
Value gather_rows(const Value& x, const IndexList& indices);

// Reductions.
/// Column-wise max over each group of rows (ties to the earliest row).
Value group_max(const Value& x, const std::vector<IndexList>& groups);
/// Column-wise max over consecutive row blocks of size k.
Value segment_max(const Value& x, std::size_t k);
/// Sum over consecutive row blocks of size k.
Value segment_sum(const Value& x, std::size_t k);
Value sum_all(const Value& x);
Value mean_all(const Value& x);

/// Per-column z-score over rows: (x - mean) / sqrt(var + eps).
Value standardize_cols(const Value& x, double eps = 1e-8);

/// Per-row z-score over columns (layer norm without affine).
Value layer_norm_rows(const Value& x, double eps = 1e-5);

}  // namespace morphflow::nn
