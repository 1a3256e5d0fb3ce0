#pragma once

#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "opfsense/opf.hpp"
#include "opfsense/qcqp.hpp"

namespace opfsense {

/// How generator limits are posed when differentiating.
enum class GenLimitForm {
  quadratic,  ///< limits on vᵀMv + demand, as in the model
  box,        ///< limits directly on the entries of x_g
};
/// How voltage limits are posed.
enum class VoltageLimitForm { squared, magnitude };
/// How the angle reference is posed.
enum class ReferenceForm {
  linear,     ///< Im V_ref = 0
  angle,      ///< atan2(Im V_ref, Re V_ref) = 0
  quadratic,  ///< (Im V_ref)² = 0
};

GenLimitForm parse_gen_limit_form(std::string_view s);
VoltageLimitForm parse_voltage_limit_form(std::string_view s);
ReferenceForm parse_reference_form(std::string_view s);

struct SensitivityOptions {
  GenLimitForm gen_limits = GenLimitForm::quadratic;
  VoltageLimitForm voltage_limits = VoltageLimitForm::squared;
  ReferenceForm reference = ReferenceForm::linear;
  double tau_mu_rel = 1e-6;   ///< τ_μ = tau_mu_rel · max(1, ‖μ‖∞)
  double tau_g_rel = 1e-6;    ///< τ_g = tau_g_rel · max(1, |f_m|)
  double tau_res_rel = 1e-6;  ///< rejection when ‖SΓ − U‖_F > tau_res_rel · ‖U‖_F
  double rank_tol = 1e-10;    ///< relative singular-value cutoff
  bool keep_inactive = false; ///< keep inactive rows (dμ = 0 is then solved for, not imposed)
};

enum class ConstraintClass { inactive, strongly_active, degenerate };

/// c1: μ < τ_μ and g < −τ_g; c2: μ ≥ τ_μ and |g| ≤ τ_g; c3 otherwise.
std::vector<ConstraintClass> classify_constraints(const Eigen::VectorXd& g, const Eigen::VectorXd& mu,
                                                  const Eigen::VectorXd& tau_g, double tau_mu);

struct Classification {
  std::vector<ConstraintClass> classes;
  std::vector<int> active;      ///< c2 rows
  std::vector<int> degenerate;  ///< c3 rows
  Eigen::VectorXd g;
  double tau_mu = 0.0;
};

/// Classification of every inequality of the solved instance; infinite limits are inactive.
Classification classify(const QcqpModel& model, const OpfSolution& sol, const Eigen::VectorXd& theta,
                        const SensitivityOptions& opts = {});

/// Duals expressed for the chosen constraint forms.
struct VariantDuals {
  Eigen::VectorXd lambda, mu, g;
};
VariantDuals convert_duals(const QcqpModel& model, const OpfSolution& sol, const Eigen::VectorXd& theta,
                           const SensitivityOptions& opts);

/// ∇ of inequality m over x = [v; x_g] under the chosen forms.
Eigen::VectorXd inequality_gradient(const QcqpModel& model, int m, const Eigen::VectorXd& v,
                                    GenLimitForm gen, VoltageLimitForm volt);
/// ∇ of the reference equality over x = [v; x_g].
Eigen::VectorXd reference_gradient(const QcqpModel& model, const Eigen::VectorXd& v, ReferenceForm form);

/// S·[dv; dx_g; dλ; dμ_kept] = U·dθ.
struct KktDiffSystem {
  Eigen::MatrixXd S, U;
  std::vector<int> rows;  ///< inequality rows kept in the system
  int n_primal = 0, n_eq = 0;
  bool degenerate = false;
  std::vector<int> degenerate_set;
};

KktDiffSystem assemble_system(const QcqpModel& model, const OpfSolution& sol, const Eigen::VectorXd& theta,
                              const Classification& cls, const SensitivityOptions& opts = {});

struct SensitivityRecord {
  bool ok = false;              ///< false when degenerate or rejected
  bool degenerate = false;
  bool rejected = false;        ///< residual above threshold
  bool rank_deficient = false;
  bool dual_caveat = false;     ///< dual sensitivities not unique (S singular)
  Eigen::MatrixXd J_full;       ///< ∂[v; x_g]/∂θ
  Eigen::MatrixXd dlambda, dmu; ///< dual sensitivities (dmu over `rows`)
  std::vector<int> rows;
  double residual = 0.0;
  double sigma_min = 0.0, sigma_max = 0.0;
  Eigen::MatrixXd null_basis;   ///< columns spanning null(S) when rank deficient
};

SensitivityRecord solve_sensitivities(const KktDiffSystem& sys, const SensitivityOptions& opts = {});

/// classify → assemble → solve.
SensitivityRecord compute_sensitivities(const QcqpModel& model, const OpfSolution& sol,
                                        const Eigen::VectorXd& theta, const SensitivityOptions& opts = {});

/// ∂|v_n|/∂θ = (vʳ ∂vʳ + vⁱ ∂vⁱ)/|v_n| for each bus position listed.
Eigen::MatrixXd vmag_chain_rule(const Eigen::VectorXd& v, const Eigen::MatrixXd& jv,
                                const std::vector<int>& buses);

/// [p_g of non-reference generators; |v| of generator buses].
Eigen::VectorXd reduced_output(const QcqpModel& model, const Eigen::VectorXd& v, const Eigen::VectorXd& xg);
/// Jacobian of `reduced_output` from J_full.
Eigen::MatrixXd output_jacobian(const QcqpModel& model, const Eigen::VectorXd& v, const Eigen::MatrixXd& j_full);
/// Names for the entries of `reduced_output`, e.g. "pg5", "vm1".
std::vector<std::string> output_names(const QcqpModel& model, const Network& net);

}  // namespace opfsense
