#include "morphflow/nn.hpp"

#include <algorithm>
#include <cmath>

#include "morphflow/error.hpp"

namespace morphflow::nn {

Value ParamSet::add(const std::string& name, Eigen::Index rows, Eigen::Index cols, Init init) {
  if (index_.count(name)) throw Error(ErrorCode::InvalidArgument, "duplicate parameter name '" + name + "'");
  Matrix m = Matrix::Zero(rows, cols);
  if (init == Init::xavier_uniform) {
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng_.uniform(-bound, bound);
  }
  Value v = Value::parameter(std::move(m));
  index_[name] = entries_.size();
  entries_.emplace_back(name, v);
  return v;
}

const Value& ParamSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorCode::InvalidArgument, "unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : entries_) n += static_cast<std::size_t>(v.data().size());
  return n;
}

void ParamSet::zero_grad() {
  for (auto& [name, v] : entries_) {
    if (v.node()->has_grad()) v.grad_ref().setZero();
  }
}

void ParamSet::zero_fill(const std::string& prefix) {
  for (auto& [name, v] : entries_) {
    if (name.rfind(prefix, 0) == 0) v.mutable_data().setZero();
  }
}

Linear Linear::create(ParamSet& params, const std::string& name, Eigen::Index in, Eigen::Index out, Init init,
                      bool with_bias) {
  Linear l;
  l.weight = params.add(name + ".weight", in, out, init);
  if (with_bias) l.bias = params.add(name + ".bias", 1, out, Init::zeros);
  return l;
}

Value linear(const Value& x, const Value& weight, const Value& bias) {
  if (x.cols() != weight.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "linear: input has " + std::to_string(x.cols()) + " channels, weight expects " +
                                              std::to_string(weight.rows()));
  }
  Value y = matmul(x, weight);
  return bias.defined() ? add_row(y, bias) : y;
}

Value Linear::operator()(const Value& x) const { return linear(x, weight, bias); }

Mlp Mlp::create(ParamSet& params, const std::string& name, Eigen::Index in, const std::vector<Eigen::Index>& widths,
                bool zero_last) {
  if (widths.empty()) throw Error(ErrorCode::InvalidArgument, "mlp needs at least one width");
  Mlp net;
  Eigen::Index prev = in;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const bool last = i + 1 == widths.size();
    net.layers.push_back(Linear::create(params, name + "." + std::to_string(i), prev, widths[i],
                                        last && zero_last ? Init::zeros : Init::xavier_uniform));
    prev = widths[i];
  }
  return net;
}

Value mlp(const Value& x, const Mlp& net) {
  if (net.layers.empty()) throw Error(ErrorCode::InvalidArgument, "mlp needs at least one layer");
  Value h = x;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    h = net.layers[i](h);
    if (i + 1 < net.layers.size()) h = leaky_relu(h);
  }
  return h;
}

Value Mlp::operator()(const Value& x) const { return mlp(x, *this); }

GruCell GruCell::create(ParamSet& params, const std::string& name, Eigen::Index width) {
  GruCell g;
  g.input_update = Linear::create(params, name + ".w_z", width, width);
  g.input_reset = Linear::create(params, name + ".w_r", width, width);
  g.input_candidate = Linear::create(params, name + ".w_h", width, width);
  g.hidden_update = Linear::create(params, name + ".u_z", width, width, Init::xavier_uniform, false);
  g.hidden_reset = Linear::create(params, name + ".u_r", width, width, Init::xavier_uniform, false);
  g.hidden_candidate = Linear::create(params, name + ".u_h", width, width, Init::xavier_uniform, false);
  return g;
}

Value gru_cell(const Value& input, const Value& hidden, const GruCell& cell) {
  if (input.rows() != hidden.rows() || input.cols() != hidden.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "gru_cell: input and hidden shapes differ");
  }
  const Value z = sigmoid(cell.input_update(input) + cell.hidden_update(hidden));
  const Value r = sigmoid(cell.input_reset(input) + cell.hidden_reset(hidden));
  const Value candidate = tanh(cell.input_candidate(input) + cell.hidden_candidate(mul(r, hidden)));
  return mul(affine(z, -1.0, 1.0), hidden) + mul(z, candidate);
}

Matrix gaussian_noise(Eigen::Index rows, Eigen::Index channels, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(rows, channels);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

Value append_noise(const Value& x, Eigen::Index channels, std::uint64_t seed) {
  if (channels < 0) throw Error(ErrorCode::InvalidArgument, "negative noise channels");
  if (channels == 0) return x;
  return concat_cols({x, Value::constant(gaussian_noise(x.rows(), channels, seed))});
}

void Adam::step(ParamSet& params, double lr) {
  const auto& entries = params.entries();
  if (m_.size() != entries.size()) {
    m_.clear();
    v_.clear();
    for (const auto& [name, p] : entries) {
      m_.push_back(Matrix::Zero(p.rows(), p.cols()));
      v_.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Value p = entries[i].second;
    if (!p.node()->has_grad()) continue;
    const Matrix& g = p.node()->grad;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseAbs2();
    p.mutable_data().array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.eps);
  }
}

GradCheckResult grad_check(const std::function<Value()>& build, const std::vector<std::pair<std::string, Value>>& leaves,
                           double h, std::size_t max_entries_per_param, double refine_above) {
  for (const auto& [name, v] : leaves) {
    if (v.node()->has_grad()) Value(v).grad_ref().setZero();
  }
  const Value root = build();
  if (root.rows() != 1 || root.cols() != 1) throw Error(ErrorCode::NonScalarOutput, "grad_check needs a scalar graph");
  backward(root);

  GradCheckResult result;
  for (const auto& [name, leaf] : leaves) {
    Value v = leaf;
    const Matrix analytic = v.grad();
    const Eigen::Index total = v.data().size();
    Eigen::Index stride = 1;
    if (max_entries_per_param > 0 && static_cast<std::size_t>(total) > max_entries_per_param) {
      stride = total / static_cast<Eigen::Index>(max_entries_per_param);
    }
    for (Eigen::Index e = 0; e < total; e += stride) {
      double& slot = v.mutable_data().data()[e];
      const double original = slot;
      const double a = analytic.data()[e];
      double best = std::numeric_limits<double>::infinity();
      const double steps[] = {h, h / 10.0, h / 100.0, h * 10.0};
      for (int attempt = 0; attempt < 4; ++attempt) {
        const double step = steps[attempt];
        slot = original + step;
        const double plus = build().item();
        slot = original - step;
        const double minus = build().item();
        slot = original;
        const double f = (plus - minus) / (2.0 * step);
        const double err = std::abs(a - f) / std::max(1e-8, std::abs(a) + std::abs(f));
        best = std::min(best, err);
        if (best <= refine_above) break;
        if (attempt == 0) ++result.refined;
      }
      ++result.entries_checked;
      if (best > result.max_rel_error) {
        result.max_rel_error = best;
        result.worst_param = name;
        result.worst_entry = e;
      }
    }
  }
  return result;
}

GradCheckResult grad_check(const std::function<Value()>& build, ParamSet& params, double h,
                           std::size_t max_entries_per_param, double refine_above) {
  return grad_check(build, params.entries(), h, max_entries_per_param, refine_above);
}

}  // namespace morphflow::nn
