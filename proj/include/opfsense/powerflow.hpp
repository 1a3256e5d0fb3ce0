#pragma once

#include <optional>
#include <vector>

#include <Eigen/Core>

#include "opfsense/network.hpp"
#include "opfsense/qcqp.hpp"

namespace opfsense {

enum class PfBusType { slack, pv, pq };

/// Targets per bus position. `p`, `q` are net injections (generation minus demand).
struct PfSpec {
  std::vector<PfBusType> type;
  Eigen::VectorXd p, q, vm;
};

struct PfOptions {
  double tol = 1e-9;
  int max_iter = 30;
  std::optional<Eigen::VectorXcd> warm_start;
};

struct PfSolution {
  bool converged = false;
  Eigen::VectorXcd v;
  int iterations = 0;
  double max_mismatch = 0.0;
  std::vector<double> mismatch_history;  ///< ‖F‖∞ before each Newton step and at exit
};

/// Polar Newton–Raphson; reactive limits are not enforced.
PfSolution solve_pf(const Network& net, const PfSpec& spec, const PfOptions& opts = {});

/// Cartesian [Re V; Im V].
Eigen::VectorXd to_cartesian(const Eigen::VectorXcd& v);
Eigen::VectorXcd to_complex(const Eigen::VectorXd& v);

/// Complex injections Vᵢ·conj((Y V)ᵢ).
Eigen::VectorXcd injections(const Network& net, const Eigen::VectorXcd& v);

/// Full network state recovered from generator setpoints.
struct RecoveredState {
  PfSolution pf;
  Eigen::VectorXd v;   ///< 2Nb Cartesian voltages
  Eigen::VectorXd xg;  ///< [p_g; q_g] implied by the solved state
};

/// `prediction` is [p_g of non-reference generators; |v| of all generators], generator order.
RecoveredState state_from_prediction(const Network& net, const QcqpModel& model,
                                     const Eigen::VectorXd& theta,
                                     const Eigen::VectorXd& prediction,
                                     const PfOptions& opts = {});

/// Generator outputs [p_g; q_g] implied by voltages v under loads θ.
Eigen::VectorXd generator_outputs(const QcqpModel& model, const Eigen::VectorXd& v,
                                  const Eigen::VectorXd& theta);

}  // namespace opfsense
