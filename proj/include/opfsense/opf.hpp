#pragma once

#include <optional>
#include <string_view>

#include <Eigen/Core>

#include "opfsense/qcqp.hpp"

namespace opfsense {

struct SolverOptions {
  double tol_kkt = 1e-8;
  double sigma = 0.2;             ///< barrier reduction: γ = σ sᵀμ / m
  double step_fraction = 0.995;   ///< fraction-to-boundary
  double ipm_tol = 1e-9;          ///< scaled IPM stopping test before the active-set refinement
  int max_iter = 200;
  double delta_init = 1e-8;       ///< first Hessian shift tried by the inertia correction
  bool polish = true;             ///< active-set Newton refinement of the IPM point
  std::optional<Eigen::VectorXd> warm_start;  ///< 2Nb voltages
  bool verbose = false;
};

enum class OpfStatus { optimal, infeasible, max_iter };
std::string_view to_string(OpfStatus s);

struct KktResiduals {
  double stationarity = 0.0;
  double feasibility = 0.0;
  double complementarity = 0.0;
  double max() const;
};

struct OpfSolution {
  OpfStatus status = OpfStatus::max_iter;
  Eigen::VectorXd v;       ///< 2Nb
  Eigen::VectorXd xg;      ///< [p_g; q_g]
  Eigen::VectorXd lambda;  ///< one per equality row
  Eigen::VectorXd mu;      ///< one per inequality row
  double objective = 0.0;
  KktResiduals kkt;
  int iterations = 0;
  bool polished = false;
};

/// Local optimum of the parametric QCQP by a primal-dual interior-point method.
OpfSolution solve_opf(const QcqpModel& model, const Eigen::VectorXd& theta,
                      const SolverOptions& opts = {});

/// (‖∇ℒ‖∞, ‖h‖∞ + ‖max(g,0)‖∞, ‖μ ⊙ g‖∞); rows with infinite limits are skipped.
KktResiduals kkt_residuals(const QcqpModel& model, const Eigen::VectorXd& v,
                           const Eigen::VectorXd& xg, const Eigen::VectorXd& lambda,
                           const Eigen::VectorXd& mu, const Eigen::VectorXd& theta);

/// Σλ_ℓL_ℓ + Σμ_mM_m (dense).
Eigen::MatrixXd lagrangian_matrix(const QcqpModel& model, const Eigen::VectorXd& lambda,
                                  const Eigen::VectorXd& mu);

/// Adds a·M into the dense matrix H.
void add_scaled(Eigen::MatrixXd& h, const SpMat& m, double a);

}  // namespace opfsense
