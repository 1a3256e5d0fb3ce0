#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

namespace opfsense {

/// Fully connected network: rectifier hidden layers, tanh output.
struct MlpModel {
  std::vector<int> dims;  ///< [inputs, hidden..., outputs]
  std::vector<Eigen::MatrixXd> W;
  std::vector<Eigen::VectorXd> b;
  bool tanh_output = true;   ///< identity output when false (tests)
  Eigen::VectorXd in_scale;  ///< inputs are multiplied entrywise before the first layer
  Eigen::VectorXd out_lo, out_hi;  ///< box mapped onto [-1, 1]

  int num_layers() const { return static_cast<int>(W.size()); }
  int num_inputs() const { return dims.front(); }
  int num_outputs() const { return dims.back(); }
  int num_weights() const;
};

enum class WeightInit {
  he_uniform,      ///< U(±√(6/fan_in))
  glorot_uniform,  ///< U(±√(6/(fan_in + fan_out)))
};
WeightInit parse_weight_init(std::string_view s);

/// Seeded uniform weights, zero biases; unit input scale and [-1, 1] output box.
MlpModel make_mlp(const std::vector<int>& dims, std::uint64_t seed, WeightInit init = WeightInit::he_uniform);

/// Scaled output ŷ.
Eigen::VectorXd forward(const MlpModel& model, const Eigen::VectorXd& theta);
/// ∂ŷ/∂θ; a rectifier is active iff its pre-activation is positive.
Eigen::MatrixXd input_jacobian(const MlpModel& model, const Eigen::VectorXd& theta);

Eigen::VectorXd scale_output(const MlpModel& model, const Eigen::VectorXd& y);
Eigen::MatrixXd scale_jacobian(const MlpModel& model, const Eigen::MatrixXd& j);
/// Maps ŷ back to physical units, kept strictly inside the output box.
Eigen::VectorXd unscale_output(const MlpModel& model, const Eigen::VectorXd& yhat);

/// One training example in scaled output space.
struct Example {
  Eigen::VectorXd theta;
  Eigen::VectorXd y;
  std::optional<Eigen::MatrixXd> J;
};

/// Gradients laid out like the model.
struct Gradients {
  std::vector<Eigen::MatrixXd> W;
  std::vector<Eigen::VectorXd> b;
};

struct LossParts {
  double value = 0.0;     ///< Σ‖ŷ − y‖²
  double jacobian = 0.0;  ///< Σ‖Ĵ − J‖²_F
  double total(double rho) const { return value + rho * jacobian; }
};

/// Σ_s ‖ŷ−y_s‖² + ρ Σ_s ‖Ĵ−J_s‖²_F over the listed examples, with exact weight gradients
/// (rectifier masks held fixed).
LossParts loss_and_grads(const MlpModel& model, const std::vector<const Example*>& batch, double rho,
                         Gradients* grads);
LossParts loss_and_grads(const MlpModel& model, const std::vector<Example>& batch, double rho,
                         Gradients* grads);

/// `sum`: Σ‖ŷ − y‖² + ρ Σ‖Ĵ − J‖²_F.
/// `mean`: both terms averaged over their entries, i.e. ‖ŷ − y‖²/u_out + ρ‖Ĵ − J‖²_F/(u_out·u_in) per sample.
enum class LossNorm { sum, mean };
LossNorm parse_loss_norm(std::string_view s);

struct TrainConfig {
  double rho = 20.0;
  LossNorm norm = LossNorm::sum;
  double lr0 = 5e-4;
  double decay = 0.85;
  int decay_every = 250;
  int epochs = 2000;
  int batch_size = 100;  ///< full batch when the set is no larger than this
  std::uint64_t seed = 1;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-7;
};

struct TrainHistory {
  std::vector<double> loss;        ///< per epoch, total loss per example, in the configured norm
  std::vector<double> value_loss;  ///< per epoch, value term per example, in the configured norm
};

/// Adam with bias correction and step decay; throws std::runtime_error on a non-finite loss.
TrainHistory train(MlpModel& model, const std::vector<Example>& data, const TrainConfig& cfg);

nlohmann::json mlp_to_json(const MlpModel& model);
MlpModel mlp_from_json(const nlohmann::json& j);

}  // namespace opfsense
