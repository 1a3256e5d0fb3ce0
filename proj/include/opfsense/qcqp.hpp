#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "opfsense/network.hpp"

namespace opfsense {

using SpMat = Eigen::SparseMatrix<double>;

/// Which current a line limit constrains.
enum class FlowEnds {
  series,     ///< current through the series impedance, one limit per line
  both_ends,  ///< sending- and receiving-end currents including charging, two per line
};

FlowEnds parse_flow_ends(std::string_view s);

/// Real symmetric 2Nb x 2Nb matrices acting on v = [Re V; Im V].
struct QuadForms {
  int nb = 0;
  FlowEnds ends = FlowEnds::series;
  std::vector<SpMat> mp, mq, mv;
  std::vector<SpMat> mi;          ///< one per line (series) or two per line (from, to)
  std::vector<int> mi_branch;     ///< line index of each entry of `mi`
  std::vector<int> mi_end;        ///< 0 = from/series, 1 = to
  SpMat mref;
};

QuadForms build_quadforms(const Network& net, FlowEnds ends = FlowEnds::series);

/// Dense real form of a Hermitian matrix: [[Re, -Im], [Im, Re]].
Eigen::MatrixXd real_form(const Eigen::MatrixXcd& h);

/// One load quantity exposed as a parameter.
struct ParamEntry {
  int bus = 0;  ///< bus id
  bool reactive = false;
};

/// Parameters are every non-generator bus: active demands in bus order, then reactive.
std::vector<ParamEntry> default_params(const Network& net);

/// Parses "p2,p4,q3" style lists (quantity letter + bus id).
std::vector<ParamEntry> parse_params(std::string_view text);
std::string param_name(const ParamEntry& p);

/// A signed canonical vector: value `sign` at `index`, or empty when index < 0.
struct SignedIndex {
  int index = -1;
  double sign = 0.0;
};

enum class EqKind { p_balance, q_balance, reference };
enum class IneqKind { pg_upper, pg_lower, qg_upper, qg_lower, v_upper, v_lower, flow };

std::string_view to_string(EqKind k);
std::string_view to_string(IneqKind k);

/// vᵀ L v = aᵀ x_g + bᵀ θ + c
struct EqualityRow {
  SpMat L;
  SignedIndex a;
  SignedIndex b;
  double c = 0.0;  ///< fixed demand not exposed as a parameter
  EqKind kind = EqKind::p_balance;
  int element = 0;  ///< bus position
};

/// vᵀ M v <= dᵀ θ + f; rows with infinite f are never binding.
struct InequalityRow {
  SpMat M;
  SignedIndex d;
  double f = 0.0;
  IneqKind kind = IneqKind::pg_upper;
  int element = 0;  ///< generator index, bus position, or entry of QuadForms::mi
  int branch = -1;
  int end = 0;
};

struct QcqpModel {
  int nb = 0;
  int ng = 0;
  int slack = 0;                ///< bus position of the angle reference
  std::vector<int> gen_bus;     ///< bus position of each generator
  std::vector<int> bus_gen;     ///< generator at each bus position, or -1
  Eigen::VectorXd a0;           ///< cost over x_g = [p_g; q_g]
  std::vector<EqualityRow> eq;  ///< p rows for all buses, q rows for all buses, reference row
  std::vector<InequalityRow> ineq;
  std::vector<ParamEntry> params;
  Eigen::VectorXd nominal_theta;
  FlowEnds flow_ends = FlowEnds::series;

  int nv() const { return 2 * nb; }
  int nx() const { return 2 * ng; }
  int num_eq() const { return static_cast<int>(eq.size()); }
  int num_ineq() const { return static_cast<int>(ineq.size()); }
  int num_params() const { return static_cast<int>(params.size()); }

  Eigen::MatrixXd A() const;  ///< L x 2Ng
  Eigen::MatrixXd B() const;  ///< L x dim θ
  Eigen::MatrixXd D() const;  ///< M x dim θ, row m is d_mᵀ
  Eigen::VectorXd f() const;
  std::string ineq_label(int m) const;
};

/// Throws ValidationError when the reference bus hosts no generator.
QcqpModel assemble_qcqp(const Network& net, const QuadForms& forms,
                        const std::vector<ParamEntry>& params);
QcqpModel assemble_qcqp(const Network& net, FlowEnds ends = FlowEnds::series);

struct ConstraintValues {
  Eigen::VectorXd h;  ///< vᵀLv − aᵀx_g − bᵀθ − c
  Eigen::VectorXd g;  ///< vᵀMv − dᵀθ − f
};

ConstraintValues eval_constraints(const QcqpModel& model, const Eigen::VectorXd& v,
                                  const Eigen::VectorXd& xg, const Eigen::VectorXd& theta);

/// Load injections bᵀθ + c of the balance rows: active for all buses, then reactive.
Eigen::VectorXd load_injection(const QcqpModel& model, const Eigen::VectorXd& theta);

/// Text dump, one constraint per record, for cross-checking against other tools.
std::string dump_model(const QcqpModel& model);

/// Flat voltage [1…1, 0…0].
Eigen::VectorXd flat_voltage(int nb);

}  // namespace opfsense
