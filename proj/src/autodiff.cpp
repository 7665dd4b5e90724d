#include "morphflow/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_set>

#include "morphflow/error.hpp"

namespace morphflow::nn {

namespace {

void require_same_shape(const Value& a, const Value& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": " + std::to_string(a.rows()) + "x" +
                                              std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                              std::to_string(b.cols()));
  }
}

}  // namespace

Value Value::constant(Matrix m) {
  auto n = std::make_shared<Node>();
  n->data = std::move(m);
  return Value(std::move(n));
}

Value Value::parameter(Matrix m) {
  auto n = std::make_shared<Node>();
  n->data = std::move(m);
  n->requires_grad = true;
  return Value(std::move(n));
}

Matrix Value::grad() const {
  if (node_->has_grad()) return node_->grad;
  return Matrix::Zero(rows(), cols());
}

double Value::item() const {
  if (rows() != 1 || cols() != 1) throw Error(ErrorCode::NonScalarOutput, "item() on a non-scalar value");
  return node_->data(0, 0);
}

Value make_op(Matrix data, std::vector<Value> parents, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->data = std::move(data);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p.requires_grad();
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.ptr());
    n->backward = std::move(backward);
  }
  return Value(std::move(n));
}

void backward(const Value& root, double seed) {
  if (root.rows() != 1 || root.cols() != 1) throw Error(ErrorCode::NonScalarOutput, "backward needs a 1x1 root");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are per sweep; only leaves accumulate across calls.
  for (Node* node : order) {
    if (node->backward) node->grad.resize(0, 0);
  }
  root.node()->grad_ref()(0, 0) += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && node->has_grad()) node->backward(*node);
  }
}

Value matmul(const Value& a, const Value& b) {
  if (a.cols() != b.rows()) throw Error(ErrorCode::ShapeMismatch, "matmul inner dimensions differ");
  Matrix out = a.data() * b.data();
  Node* pa = a.node();
  Node* pb = b.node();
  return make_op(std::move(out), {a, b}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->grad_ref().noalias() += self.grad * pb->data.transpose();
    if (pb->requires_grad) pb->grad_ref().noalias() += pa->data.transpose() * self.grad;
  });
}

Value matmul_nt(const Value& a, const Value& b) {
  if (a.cols() != b.cols()) throw Error(ErrorCode::ShapeMismatch, "matmul_nt inner dimensions differ");
  Matrix out = a.data() * b.data().transpose();
  Node* pa = a.node();
  Node* pb = b.node();
  return make_op(std::move(out), {a, b}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->grad_ref().noalias() += self.grad * pb->data;
    if (pb->requires_grad) pb->grad_ref().noalias() += self.grad.transpose() * pa->data;
  });
}

Value add(const Value& a, const Value& b) {
  require_same_shape(a, b, "add");
  Node* pa = a.node();
  Node* pb = b.node();
  return make_op(a.data() + b.data(), {a, b}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->grad_ref() += self.grad;
    if (pb->requires_grad) pb->grad_ref() += self.grad;
  });
}

Value sub(const Value& a, const Value& b) {
  require_same_shape(a, b, "sub");
  Node* pa = a.node();
  Node* pb = b.node();
  return make_op(a.data() - b.data(), {a, b}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->grad_ref() += self.grad;
    if (pb->requires_grad) pb->grad_ref() -= self.grad;
  });
}

Value mul(const Value& a, const Value& b) {
  require_same_shape(a, b, "mul");
  Node* pa = a.node();
  Node* pb = b.node();
  return make_op(a.data().cwiseProduct(b.data()), {a, b}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->grad_ref() += self.grad.cwiseProduct(pb->data);
    if (pb->requires_grad) pb->grad_ref() += self.grad.cwiseProduct(pa->data);
  });
}

Value add_row(const Value& x, const Value& b) {
  if (b.rows() != 1 || b.cols() != x.cols()) throw Error(ErrorCode::ShapeMismatch, "add_row expects a 1 x c bias");
  Matrix out = x.data();
  out.rowwise() += b.data().row(0);
  Node* px = x.node();
  Node* pb = b.node();
  return make_op(std::move(out), {x, b}, [px, pb](Node& self) {
    if (px->requires_grad) px->grad_ref() += self.grad;
    if (pb->requires_grad) pb->grad_ref() += self.grad.colwise().sum();
  });
}

Value mul_col(const Value& x, const Value& w) {
  if (w.cols() != 1 || w.rows() != x.rows()) throw Error(ErrorCode::ShapeMismatch, "mul_col expects an n x 1 weight");
  Matrix out = x.data().array().colwise() * w.data().col(0).array();
  Node* px = x.node();
  Node* pw = w.node();
  return make_op(std::move(out), {x, w}, [px, pw](Node& self) {
    if (px->requires_grad) px->grad_ref().array() += self.grad.array().colwise() * pw->data.col(0).array();
    if (pw->requires_grad) pw->grad_ref().col(0) += self.grad.cwiseProduct(px->data).rowwise().sum();
  });
}

Value scale(const Value& x, double s) { return affine(x, s, 0.0); }

Value affine(const Value& x, double a, double b) {
  Matrix out = (a * x.data().array() + b).matrix();
  Node* px = x.node();
  return make_op(std::move(out), {x}, [px, a](Node& self) { px->grad_ref() += a * self.grad; });
}

Value leaky_relu(const Value& x, double slope) {
  Matrix out = x.data().unaryExpr([slope](double v) { return v > 0.0 ? v : slope * v; });
  Node* px = x.node();
  return make_op(std::move(out), {x}, [px, slope](Node& self) {
    px->grad_ref().array() +=
        self.grad.array() * px->data.array().unaryExpr([slope](double v) { return v > 0.0 ? 1.0 : slope; });
  });
}

Value sigmoid(const Value& x) {
  Matrix out = x.data().unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  Node* px = x.node();
  return make_op(std::move(out), {x}, [px](Node& self) {
    px->grad_ref().array() += self.grad.array() * self.data.array() * (1.0 - self.data.array());
  });
}

Value tanh(const Value& x) {
  Matrix out = x.data().array().tanh().matrix();
  Node* px = x.node();
  return make_op(std::move(out), {x}, [px](Node& self) {
    px->grad_ref().array() += self.grad.array() * (1.0 - self.data.array().square());
  });
}

Value softmax_rows(const Value& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.data().row(r).maxCoeff();
    out.row(r) = (x.data().row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  Node* px = x.node();
  return make_op(std::move(out), {x}, [px](Node& self) {
    // dx = y * (g - <g, y>) per row
    const Eigen::VectorXd dots = self.grad.cwiseProduct(self.data).rowwise().sum();
    px->grad_ref().array() += self.data.array() * (self.grad.colwise() - dots).array();
  });
}

Value concat_cols(const std::vector<Value>& parts) {
  if (parts.empty()) throw Error(ErrorCode::ShapeMismatch, "concat_cols of nothing");
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts[0].rows()) throw Error(ErrorCode::ShapeMismatch, "concat_cols row counts differ");
    cols += p.cols();
  }
  Matrix out(parts[0].rows(), cols);
  std::vector<Node*> nodes;
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.data();
    c += p.cols();
    nodes.push_back(p.node());
  }
  return make_op(std::move(out), parts, [nodes](Node& self) {
    Eigen::Index c0 = 0;
    for (Node* n : nodes) {
      if (n->requires_grad) n->grad_ref() += self.grad.middleCols(c0, n->data.cols());
      c0 += n->data.cols();
    }
  });
}

Value concat_rows(const std::vector<Value>& parts) {
  if (parts.empty()) throw Error(ErrorCode::ShapeMismatch, "concat_rows of nothing");
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != parts[0].cols()) throw Error(ErrorCode::ShapeMismatch, "concat_rows column counts differ");
    rows += p.rows();
  }
  Matrix out(rows, parts[0].cols());
  std::vector<Node*> nodes;
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.data();
    r += p.rows();
    nodes.push_back(p.node());
  }
  return make_op(std::move(out), parts, [nodes](Node& self) {
    Eigen::Index r0 = 0;
    for (Node* n : nodes) {
      if (n->requires_grad) n->grad_ref() += self.grad.middleRows(r0, n->data.rows());
      r0 += n->data.rows();
    }
  });
}

Value slice_cols(const Value& x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > x.cols()) throw Error(ErrorCode::ShapeMismatch, "slice_cols out of range");
  Node* px = x.node();
  return make_op(x.data().middleCols(start, count), {x},
                 [px, start, count](Node& self) { px->grad_ref().middleCols(start, count) += self.grad; });
}

Value slice_rows(const Value& x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > x.rows()) throw Error(ErrorCode::ShapeMismatch, "slice_rows out of range");
  Node* px = x.node();
  return make_op(x.data().middleRows(start, count), {x},
                 [px, start, count](Node& self) { px->grad_ref().middleRows(start, count) += self.grad; });
}

Value gather_rows(const Value& x, const IndexList& indices) {
  Matrix out(static_cast<Eigen::Index>(indices.size()), x.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= static_cast<std::size_t>(x.rows())) throw Error(ErrorCode::ShapeMismatch, "gather index out of range");
    out.row(i) = x.data().row(indices[i]);
  }
  Node* px = x.node();
  return make_op(std::move(out), {x}, [px, indices](Node& self) {
    Matrix& g = px->grad_ref();
    for (std::size_t i = 0; i < indices.size(); ++i) g.row(indices[i]) += self.grad.row(i);
  });
}

Value group_max(const Value& x, const std::vector<IndexList>& groups) {
  const Eigen::Index c = x.cols();
  Matrix out(static_cast<Eigen::Index>(groups.size()), c);
  std::vector<Index> argmax(groups.size() * c);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) throw Error(ErrorCode::ShapeMismatch, "group_max over an empty group");
    for (Eigen::Index j = 0; j < c; ++j) {
      Index best = groups[g][0];
      for (Index r : groups[g]) {
        if (x.data()(r, j) > x.data()(best, j)) best = r;
      }
      out(g, j) = x.data()(best, j);
      argmax[g * c + j] = best;
    }
  }
  Node* px = x.node();
  return make_op(std::move(out), {x}, [px, argmax, c](Node& self) {
    Matrix& gx = px->grad_ref();
    for (Eigen::Index g = 0; g < self.grad.rows(); ++g)
      for (Eigen::Index j = 0; j < c; ++j) gx(argmax[g * c + j], j) += self.grad(g, j);
  });
}

Value segment_max(const Value& x, std::size_t k) {
  if (k == 0 || x.rows() % static_cast<Eigen::Index>(k) != 0) {
    throw Error(ErrorCode::ShapeMismatch, "segment_max: rows not divisible by k");
  }
  const Eigen::Index groups = x.rows() / static_cast<Eigen::Index>(k);
  const Eigen::Index c = x.cols();
  Matrix out(groups, c);
  std::vector<Index> argmax(groups * c);
  for (Eigen::Index g = 0; g < groups; ++g) {
    const Eigen::Index base = g * static_cast<Eigen::Index>(k);
    for (Eigen::Index j = 0; j < c; ++j) {
      Eigen::Index best = base;
      for (Eigen::Index r = base + 1; r < base + static_cast<Eigen::Index>(k); ++r) {
        if (x.data()(r, j) > x.data()(best, j)) best = r;
      }
      out(g, j) = x.data()(best, j);
      argmax[g * c + j] = static_cast<Index>(best);
    }
  }
  Node* px = x.node();
  return make_op(std::move(out), {x}, [px, argmax, c](Node& self) {
    Matrix& gx = px->grad_ref();
    for (Eigen::Index g = 0; g < self.grad.rows(); ++g)
      for (Eigen::Index j = 0; j < c; ++j) gx(argmax[g * c + j], j) += self.grad(g, j);
  });
}

Value segment_sum(const Value& x, std::size_t k) {
  if (k == 0 || x.rows() % static_cast<Eigen::Index>(k) != 0) {
    throw Error(ErrorCode::ShapeMismatch, "segment_sum: rows not divisible by k");
  }
  const Eigen::Index groups = x.rows() / static_cast<Eigen::Index>(k);
  const auto kk = static_cast<Eigen::Index>(k);
  Matrix out = Matrix::Zero(groups, x.cols());
  for (Eigen::Index g = 0; g < groups; ++g) out.row(g) = x.data().middleRows(g * kk, kk).colwise().sum();
  Node* px = x.node();
  return make_op(std::move(out), {x}, [px, kk](Node& self) {
    Matrix& gx = px->grad_ref();
    for (Eigen::Index g = 0; g < self.grad.rows(); ++g) gx.middleRows(g * kk, kk).rowwise() += self.grad.row(g);
  });
}

Value sum_all(const Value& x) {
  Matrix out(1, 1);
  out(0, 0) = x.data().sum();
  Node* px = x.node();
  return make_op(std::move(out), {x}, [px](Node& self) { px->grad_ref().array() += self.grad(0, 0); });
}

Value mean_all(const Value& x) {
  const double n = static_cast<double>(x.data().size());
  if (n == 0) throw Error(ErrorCode::ShapeMismatch, "mean of an empty value");
  return scale(sum_all(x), 1.0 / n);
}

Value standardize_cols(const Value& x, double eps) {
  const double n = static_cast<double>(x.rows());
  if (x.rows() == 0) throw Error(ErrorCode::ShapeMismatch, "standardize of an empty value");
  const Eigen::RowVectorXd mean = x.data().colwise().mean();
  Matrix centered = x.data().rowwise() - mean;
  const Eigen::RowVectorXd inv_std =
      ((centered.array().square().colwise().sum() / n) + eps).sqrt().inverse().matrix();
  Matrix out = centered.array().rowwise() * inv_std.array();
  Node* px = x.node();
  return make_op(std::move(out), {x}, [px, inv_std, n](Node& self) {
    const Eigen::RowVectorXd g_mean = self.grad.colwise().mean();
    const Eigen::RowVectorXd gy_mean = self.grad.cwiseProduct(self.data).colwise().sum() / n;
    Matrix t = self.grad.rowwise() - g_mean;
    t -= (self.data.array().rowwise() * gy_mean.array()).matrix();
    px->grad_ref() += (t.array().rowwise() * inv_std.array()).matrix();
  });
}

Value layer_norm_rows(const Value& x, double eps) {
  const double c = static_cast<double>(x.cols());
  if (x.cols() == 0) throw Error(ErrorCode::ShapeMismatch, "layer norm of an empty row");
  const Eigen::VectorXd mean = x.data().rowwise().mean();
  Matrix centered = x.data().colwise() - mean;
  const Eigen::VectorXd inv_std = ((centered.array().square().rowwise().sum() / c) + eps).sqrt().inverse().matrix();
  Matrix out = centered.array().colwise() * inv_std.array();
  Node* px = x.node();
  return make_op(std::move(out), {x}, [px, inv_std, c](Node& self) {
    const Eigen::VectorXd g_mean = self.grad.rowwise().mean();
    const Eigen::VectorXd gy_mean = self.grad.cwiseProduct(self.data).rowwise().sum() / c;
    Matrix t = self.grad.colwise() - g_mean;
    t -= (self.data.array().colwise() * gy_mean.array()).matrix();
    px->grad_ref() += (t.array().colwise() * inv_std.array()).matrix();
  });
}

}  // namespace morphflow::nn
