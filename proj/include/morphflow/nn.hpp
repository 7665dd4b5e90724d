#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "morphflow/autodiff.hpp"
#include "morphflow/rng.hpp"

namespace morphflow::nn {

enum class Init { zeros, xavier_uniform };

/// Owns every learnable tensor, keyed by a unique name, in registration order.
class ParamSet {
 public:
  explicit ParamSet(std::uint64_t seed = 0) : rng_(seed) {}

  Value add(const std::string& name, Eigen::Index rows, Eigen::Index cols, Init init);
  const Value& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const std::vector<std::pair<std::string, Value>>& entries() const { return entries_; }
  std::size_t scalar_count() const;
  void zero_grad();

  /// Sets every parameter whose name starts with `prefix` to zero.
  void zero_fill(const std::string& prefix);

 private:
  Rng rng_;
  std::vector<std::pair<std::string, Value>> entries_;
  std::map<std::string, std::size_t> index_;
};

struct Linear {
  Value weight;  ///< in x out
  Value bias;    ///< 1 x out

  static Linear create(ParamSet& params, const std::string& name, Eigen::Index in, Eigen::Index out,
                       Init init = Init::xavier_uniform, bool with_bias = true);
  Value operator()(const Value& x) const;
  Eigen::Index in_features() const { return weight.rows(); }
  Eigen::Index out_features() const { return weight.cols(); }
};

/// Linear layers with leaky-ReLU between them; the last layer stays linear.
struct Mlp {
  std::vector<Linear> layers;

  /// widths = {w1, ..., wL}: in -> w1 -> ... -> wL.
  static Mlp create(ParamSet& params, const std::string& name, Eigen::Index in, const std::vector<Eigen::Index>& widths,
                    bool zero_last = false);
  Value operator()(const Value& x) const;
  Eigen::Index out_features() const { return layers.back().out_features(); }
};

Value linear(const Value& x, const Value& weight, const Value& bias);
Value mlp(const Value& x, const Mlp& net);

struct GruCell {
  Linear input_update, input_reset, input_candidate;  // W_z, W_r, W_h (with biases)
  Linear hidden_update, hidden_reset, hidden_candidate;  // U_z, U_r, U_h (no bias)

  static GruCell create(ParamSet& params, const std::string& name, Eigen::Index width);
};

/// z = s(W_z in + U_z h), r = s(W_r in + U_r h), c = tanh(W_h in + U_h (r*h)),
/// out = (1 - z) * h + z * c.
Value gru_cell(const Value& input, const Value& hidden, const GruCell& cell);

/// n x channels of i.i.d. standard normal draws from `seed`.
Matrix gaussian_noise(Eigen::Index rows, Eigen::Index channels, std::uint64_t seed);

/// [x, noise] with the noise held constant under differentiation.
Value append_noise(const Value& x, Eigen::Index channels, std::uint64_t seed);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
  /// One update with learning rate `lr` from the accumulated gradients.
  void step(ParamSet& params, double lr);
  std::size_t steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::vector<Matrix> m_, v_;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  Eigen::Index worst_entry = -1;
  std::size_t entries_checked = 0;
  std::size_t refined = 0;  ///< entries re-probed with other steps
};

/// Compares reverse-mode gradients with central differences for parameter entries.
///
/// `build` must return a 1x1 graph deterministically from the current parameter
/// values. Relative error is |a - f| / max(1e-8, |a| + |f|). An entry whose error
/// at step h exceeds `refine_above` is re-probed at h/10, h/100 and 10h and keeps
/// the smallest error: smaller steps resolve kinks straddled by h, the larger one
/// lifts tiny gradients above rounding noise.
/// `max_entries_per_param` = 0 checks every entry.
GradCheckResult grad_check(const std::function<Value()>& build, ParamSet& params, double h = 1e-4,
                           std::size_t max_entries_per_param = 0, double refine_above = 1e-6);

/// Same check against explicit leaf values instead of a ParamSet.
GradCheckResult grad_check(const std::function<Value()>& build, const std::vector<std::pair<std::string, Value>>& leaves,
                           double h = 1e-4, std::size_t max_entries_per_param = 0, double refine_above = 1e-6);

}  // namespace morphflow::nn
