#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <cstdio>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "opfsense/network.hpp"
#include "opfsense/opf.hpp"
#include "opfsense/powerflow.hpp"
#include "opfsense/qcqp.hpp"
#include "opfsense/sensitivity.hpp"

namespace testing {

using namespace opfsense;

inline std::string data_file(const std::string& name) { return std::string(OPFSENSE_DATA_DIR) + "/" + name; }

inline Network case39() {
  ParseOptions po;
  po.gen_bus_loads = GenBusLoads::drop;
  po.uniform_cost = 10.0;
  return load_case_file(data_file("case39.m"), po);
}
inline Network toy() { return load_case_file(data_file("case5_toy.m")); }
inline Network twogen() { return load_case_file(data_file("case3_twogen.m")); }

inline QcqpModel toy_model(const Network& net) {
  return assemble_qcqp(net, build_quadforms(net), parse_params("p2,p4"));
}

/// Power-flow targets from the case dispatch and voltage setpoints.
inline PfSpec case_pf_spec(const Network& net) {
  const int nb = net.num_buses();
  PfSpec spec;
  spec.type.assign(nb, PfBusType::pq);
  spec.p = Eigen::VectorXd::Zero(nb);
  spec.q = Eigen::VectorXd::Zero(nb);
  spec.vm = Eigen::VectorXd::Ones(nb);
  for (int n = 0; n < nb; ++n) {
    spec.p(n) = -net.buses[n].pd;
    spec.q(n) = -net.buses[n].qd;
  }
  for (const auto& g : net.generators) {
    int n = net.bus_index(g.bus);
    spec.type[n] = n == net.slack_index() ? PfBusType::slack : PfBusType::pv;
    spec.p(n) += g.pg0;
    spec.vm(n) = g.vg0;
  }
  return spec;
}

inline Eigen::VectorXd stack(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  Eigen::VectorXd out(a.size() + b.size());
  out << a, b;
  return out;
}

/// Central differences of the primal solution [v; x_g], one column per parameter.
/// Returns false when a perturbed solve fails.
inline bool fd_primal(const QcqpModel& model, const Eigen::VectorXd& theta, const OpfSolution& base,
                      double eps, double tol, Eigen::MatrixXd& out) {
  SolverOptions so;
  so.tol_kkt = tol;
  so.warm_start = base.v;
  out.resize(model.nv() + model.nx(), model.num_params());
  for (int p = 0; p < model.num_params(); ++p) {
    Eigen::VectorXd tp = theta, tm = theta;
    tp(p) += eps;
    tm(p) -= eps;
    OpfSolution sp = solve_opf(model, tp, so), sm = solve_opf(model, tm, so);
    if (sp.status != OpfStatus::optimal || sm.status != OpfStatus::optimal) return false;
    out.col(p) = (stack(sp.v, sp.xg) - stack(sm.v, sm.xg)) / (2 * eps);
  }
  return true;
}

/// Largest entrywise violation of |a − b| ≤ max(rel·|b|, abs), as a ratio (≤ 1 passes).
inline double fd_mismatch(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double rel = 1e-4,
                          double abs = 1e-6) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    double bound = std::max(rel * std::abs(b(i)), abs);
    worst = std::max(worst, std::abs(a(i) - b(i)) / bound);
  }
  return worst;
}

/// Active rows of the strongly active set at θ.
inline std::vector<int> active_rows(const QcqpModel& model, const OpfSolution& sol, const Eigen::VectorXd& theta) {
  return classify(model, sol, theta).active;
}

/// Cheapest feasible cost of the two-generator case by enumeration: the non-reference unit's
/// dispatch is swept over [pmin, pmax] in steps of `step`, generator voltages are held at `vm`,
/// the rest follows from a power flow. Returns +inf when no grid point is feasible.
struct Enumerated {
  double cost = std::numeric_limits<double>::infinity();
  double dispatch = 0.0;
  int feasible = 0;
};

inline Enumerated enumerate_dispatch(const Network& net, const QcqpModel& model, const Eigen::VectorXd& theta,
                                     double step, const Eigen::VectorXd& vm, double feas_tol = 1e-9) {
  Enumerated best;
  int other = model.bus_gen[model.slack] == 0 ? 1 : 0;
  const Generator& g = net.generators[other];
  int n = static_cast<int>(std::floor((g.pmax - g.pmin) / step + 1e-9));
  Eigen::VectorXcd warm;
  for (int k = 0; k <= n; ++k) {
    double pg = g.pmin + k * step;
    Eigen::VectorXd pred(1 + vm.size());
    pred << pg, vm;
    PfOptions po;
    if (warm.size()) po.warm_start = warm;
    RecoveredState st = state_from_prediction(net, model, theta, pred, po);
    if (!st.pf.converged) continue;
    warm = st.pf.v;
    ConstraintValues c = eval_constraints(model, st.v, st.xg, theta);
    if (c.g.maxCoeff() > feas_tol) continue;
    ++best.feasible;
    double cost = model.a0.dot(st.xg);
    if (cost < best.cost) {
      best.cost = cost;
      best.dispatch = pg;
    }
  }
  return best;
}

/// Three buses in a line, 1–2–3, one generator at bus 1, parameters p2 and q2.
/// The bus-3 demand is chosen so that the optimum sits on two coupled limits at once:
///   0: both bus-2 and bus-3 voltage caps
///   1: the 2–3 current limit and the bus-3 voltage floor
///   2: the 2–3 current limit and the bus-2 voltage floor
/// In 1 and 2 a shunt conductance at bus 2 makes lower voltages cheaper, and the current limit
/// becomes a second lower bound on |v3| that coincides with the voltage floor.
/// `shape` varies the design point (angle across 2–3 and the voltage gap).
struct RadialCase {
  Network net;
  QcqpModel model;
};

inline RadialCase radial_case(int scenario, double shape) {
  const double base = 100.0;
  const std::complex<double> z23(0.02, 0.08);
  const std::complex<double> y23 = 1.0 / z23;

  // Design voltages on the 2–3 section (bus 2 at angle 0).
  double delta = 0.04 + 0.02 * shape;
  double gap = 0.01 + 0.005 * shape;
  std::complex<double> v2, v3;
  double vmax2 = 1.1, vmax3 = 1.1, vmin2 = 0.85, vmin3 = 0.85, gs2 = 0.0;
  if (scenario == 0) {
    vmax2 = vmax3 = 1.05;
    v2 = 1.05;
    v3 = std::polar(1.05, -delta);
  } else if (scenario == 1) {
    vmin3 = 0.95;
    v2 = 0.95 + gap;
    v3 = std::polar(0.95, -delta);
    gs2 = 50.0;
  } else {
    vmin2 = 0.95;
    v2 = 0.95;
    v3 = std::polar(0.95 - gap, -delta);
    gs2 = 50.0;
  }
  std::complex<double> i23 = y23 * (v2 - v3);
  std::complex<double> s3 = v3 * std::conj(-i23);  // injection at bus 3
  double pd3 = -s3.real() * base, qd3 = -s3.imag() * base;

  char text[2048];
  std::snprintf(text, sizeof text,
                "mpc.baseMVA = 100;\n"
                "mpc.bus = [\n"
                "1 3 0 0 0 0 1 1 0 230 1 1.1 0.85;\n"
                "2 1 60 10 %.17g 0 1 1 0 230 1 %.17g %.17g;\n"
                "3 1 %.17g %.17g 0 0 1 1 0 230 1 %.17g %.17g;\n"
                "];\n"
                "mpc.gen = [\n"
                "1 0 0 500 -500 1 100 1 500 0;\n"
                "];\n"
                "mpc.branch = [\n"
                "1 2 0.01 0.1 0 0 0 0 0 0 1 -360 360;\n"
                "2 3 %.17g %.17g 0 0 0 0 0 0 1 -360 360;\n"
                "];\n"
                "mpc.gencost = [\n"
                "2 0 0 2 10 0;\n"
                "];\n",
                gs2, vmax2, vmin2, pd3, qd3, vmax3, vmin3, z23.real(), z23.imag());
  RadialCase rc;
  rc.net = parse_case(text);
  if (scenario != 0) rc.net.branches[1].imax = std::norm(i23);
  rc.model = assemble_qcqp(rc.net, build_quadforms(rc.net), parse_params("p2,q2"));
  return rc;
}

}  // namespace testing
