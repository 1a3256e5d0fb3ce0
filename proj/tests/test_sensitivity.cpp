#include <cmath>

#include <Eigen/Dense>

#include "doctest.h"
#include "opfsense/dataset.hpp"
#include "support.hpp"

using namespace testing;

namespace {

struct Solved {
  QcqpModel model;
  Eigen::VectorXd theta;
  OpfSolution sol;
};

Solved solve_at(const QcqpModel& model, const Eigen::VectorXd& theta) {
  SolverOptions so;
  so.tol_kkt = 1e-10;
  Solved s{model, theta, solve_opf(model, theta, so)};
  REQUIRE(s.sol.status == OpfStatus::optimal);
  return s;
}

int find_row(const QcqpModel& m, IneqKind kind, int element) {
  for (int r = 0; r < m.num_ineq(); ++r)
    if (m.ineq[r].kind == kind && m.ineq[r].element == element) return r;
  return -1;
}

/// Gradients of every equality row and of the listed inequalities, one per row, over [v; x_g].
Eigen::MatrixXd constraint_gradients(const QcqpModel& m, const Eigen::VectorXd& v, const std::vector<int>& rows) {
  const int nx = m.nv() + m.nx();
  Eigen::MatrixXd g(m.num_eq() + static_cast<int>(rows.size()), nx);
  for (int l = 0; l + 1 < m.num_eq(); ++l) {
    Eigen::VectorXd row = Eigen::VectorXd::Zero(nx);
    row.head(m.nv()) = 2.0 * (m.eq[l].L * v);
    if (m.eq[l].a.index >= 0) row(m.nv() + m.eq[l].a.index) = -m.eq[l].a.sign;
    g.row(l) = row.transpose();
  }
  g.row(m.num_eq() - 1) = reference_gradient(m, v, ReferenceForm::linear).transpose();
  for (std::size_t k = 0; k < rows.size(); ++k)
    g.row(m.num_eq() + static_cast<int>(k)) =
        inequality_gradient(m, rows[k], v, GenLimitForm::quadratic, VoltageLimitForm::squared).transpose();
  return g;
}

}  // namespace

TEST_CASE("constraint classes") {
  Eigen::VectorXd g(3), mu(3), tau = Eigen::VectorXd::Constant(3, 1e-6);
  g << -1e-12, -0.3, -1e-11;
  mu << 0.5, 0.0, 1e-11;
  auto c = classify_constraints(g, mu, tau, 1e-6);
  CHECK(c[0] == ConstraintClass::strongly_active);
  CHECK(c[1] == ConstraintClass::inactive);
  CHECK(c[2] == ConstraintClass::degenerate);
}

TEST_CASE("a degenerate instance is refused") {
  Network net = twogen();
  Solved s = solve_at(assemble_qcqp(net), assemble_qcqp(net).nominal_theta);
  int row = find_row(s.model, IneqKind::pg_upper, 1);
  REQUIRE(s.sol.mu(row) > 1.0);
  OpfSolution broken = s.sol;
  broken.mu(row) = 0.0;  // binding but without a multiplier
  SensitivityRecord rec = compute_sensitivities(s.model, broken, s.theta);
  CHECK(rec.degenerate);
  CHECK_FALSE(rec.ok);
  CHECK(rec.J_full.size() == 0);
}

TEST_CASE("system dimensions") {
  auto two_bus = [](double r) {
    char text[1024];
    std::snprintf(text, sizeof text,
                  "mpc.baseMVA = 100;\n"
                  "mpc.bus = [1 3 0 0 0 0 1 1 0 230 1 1.1 0.9; 2 1 10 3 0 0 1 1 0 230 1 1.1 0.9;];\n"
                  "mpc.gen = [1 0 0 100 -100 1 100 1 200 0;];\n"
                  "mpc.branch = [1 2 %g 0.1 0 0 0 0 0 0 1 -360 360;];\n"
                  "mpc.gencost = [2 0 0 2 10 0;];\n",
                  r);
    return parse_case(text);
  };
  // Lossless: nothing binds, the bordered system has primal and equality blocks only.
  {
    QcqpModel m = assemble_qcqp(two_bus(0.0));
    Solved s = solve_at(m, m.nominal_theta);
    Classification cls = classify(m, s.sol, s.theta);
    KktDiffSystem sys = assemble_system(m, s.sol, s.theta, cls);
    CHECK(cls.active.empty());
    CHECK(sys.S.rows() == 2 * (2 + 1) + 5);
    CHECK(sys.U.cols() == m.num_params());
  }
  // Lossy: the optimum raises the generator voltage to its cap, adding one row and column.
  {
    QcqpModel m = assemble_qcqp(two_bus(0.01));
    Solved s = solve_at(m, m.nominal_theta);
    Classification cls = classify(m, s.sol, s.theta);
    REQUIRE(cls.active.size() == 1);
    CHECK(m.ineq[cls.active[0]].kind == IneqKind::v_upper);
    KktDiffSystem sys = assemble_system(m, s.sol, s.theta, cls);
    const int k = 2 * (2 + 1) + 5;
    CHECK(sys.S.rows() == k + 1);
    CHECK(sys.S(k, k) == 0.0);
    CHECK((sys.S.topLeftCorner(6, 6) - sys.S.topLeftCorner(6, 6).transpose()).norm() < 1e-12);
  }
}

TEST_CASE("a single generator on lossless lines covers every extra MW") {
  Network net = parse_case(
      "mpc.baseMVA = 100;\n"
      "mpc.bus = [1 3 0 0 0 0 1 1 0 230 1 1.1 0.9; 2 1 40 10 0 0 1 1 0 230 1 1.1 0.9;"
      " 3 1 30 5 0 0 1 1 0 230 1 1.1 0.9;];\n"
      "mpc.gen = [1 0 0 300 -300 1 100 1 300 0;];\n"
      "mpc.branch = [1 2 0 0.1 0 0 0 0 0 0 1 -360 360; 2 3 0 0.1 0 0 0 0 0 0 1 -360 360;"
      " 1 3 0 0.2 0 0 0 0 0 0 1 -360 360;];\n"
      "mpc.gencost = [2 0 0 2 10 0;];\n");
  QcqpModel m = assemble_qcqp(net);
  Solved s = solve_at(m, m.nominal_theta);
  SensitivityRecord rec = compute_sensitivities(m, s.sol, s.theta);
  REQUIRE(rec.J_full.size() > 0);
  for (int p = 0; p < m.num_params(); ++p) {
    double expect = m.params[p].reactive ? 0.0 : 1.0;
    CHECK(std::abs(rec.J_full(m.nv() + 0, p) - expect) < 1e-8);
  }
}

TEST_CASE("sensitivities match finite differences on small cases") {
  Network tn = toy(), cn = twogen();
  QcqpModel tm = toy_model(tn), cm = assemble_qcqp(cn);
  std::vector<Solved> cases = {solve_at(tm, tm.nominal_theta), solve_at(cm, cm.nominal_theta)};
  for (const auto& th : sample_thetas(cm.nominal_theta, 3, 0.85, 1.15, 9)) cases.push_back(solve_at(cm, th));
  for (const Solved& s : cases) {
    SensitivityRecord rec = compute_sensitivities(s.model, s.sol, s.theta);
    REQUIRE(rec.ok);
    Eigen::MatrixXd fd;
    REQUIRE(fd_primal(s.model, s.theta, s.sol, 1e-5, 1e-10, fd));
    CHECK(fd_mismatch(rec.J_full, fd) <= 1.0);

    // Reduced outputs through the chain rule.
    Eigen::MatrixXd jy = output_jacobian(s.model, s.sol.v, rec.J_full);
    Eigen::MatrixXd fy(jy.rows(), jy.cols());
    const int nv = s.model.nv();
    for (int p = 0; p < s.model.num_params(); ++p) {
      Eigen::VectorXd x = stack(s.sol.v, s.sol.xg);
      Eigen::VectorXd xp = x + 1e-5 * fd.col(p), xm = x - 1e-5 * fd.col(p);
      fy.col(p) = (reduced_output(s.model, xp.head(nv), xp.tail(s.model.nx())) -
                   reduced_output(s.model, xm.head(nv), xm.tail(s.model.nx()))) / 2e-5;
    }
    CHECK((jy - fy).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("constraint forms change duals but not primal sensitivities") {
  Network net = twogen();
  QcqpModel m = assemble_qcqp(net);
  Solved s = solve_at(m, m.nominal_theta);
  SensitivityRecord base = compute_sensitivities(m, s.sol, s.theta);
  REQUIRE(base.ok);
  std::vector<SensitivityOptions> variants(4);
  variants[0].gen_limits = GenLimitForm::box;
  variants[1].voltage_limits = VoltageLimitForm::magnitude;
  variants[2].reference = ReferenceForm::angle;
  variants[3].reference = ReferenceForm::quadratic;
  for (const auto& o : variants) {
    SensitivityRecord rec = compute_sensitivities(m, s.sol, s.theta, o);
    REQUIRE(rec.ok);
    CHECK((rec.J_full - base.J_full).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("gradients under the constraint forms") {
  Network net = twogen();
  QcqpModel m = assemble_qcqp(net);
  Eigen::VectorXd flat = flat_voltage(m.nb);
  int vrow = find_row(m, IneqKind::v_upper, 2);
  Eigen::VectorXd sq = inequality_gradient(m, vrow, flat, GenLimitForm::quadratic, VoltageLimitForm::squared);
  Eigen::VectorXd mag = inequality_gradient(m, vrow, flat, GenLimitForm::quadratic, VoltageLimitForm::magnitude);
  CHECK((sq - 2.0 * mag).norm() < 1e-14);
  CHECK(mag.norm() > 0.5);

  Eigen::VectorXd v = flat;
  v(m.nb + 1) = 0.1;
  int up = find_row(m, IneqKind::pg_upper, 1), lo = find_row(m, IneqKind::pg_lower, 1);
  Eigen::VectorXd gu = inequality_gradient(m, up, v, GenLimitForm::box, VoltageLimitForm::squared);
  Eigen::VectorXd gl = inequality_gradient(m, lo, v, GenLimitForm::box, VoltageLimitForm::squared);
  CHECK(gu.head(m.nv()).norm() == 0.0);
  CHECK(gu(m.nv() + 1) == 1.0);
  CHECK(gu.tail(m.nx()).cwiseAbs().sum() == 1.0);
  CHECK(gl(m.nv() + 1) == -1.0);
  // The quadratic form of the same limit does depend on v.
  CHECK(inequality_gradient(m, up, v, GenLimitForm::quadratic, VoltageLimitForm::squared).head(m.nv()).norm() > 0.0);

  Eigen::VectorXd lin = reference_gradient(m, flat, ReferenceForm::linear);
  Eigen::VectorXd ang = reference_gradient(m, flat, ReferenceForm::angle);
  CHECK((lin - ang).norm() < 1e-14);
  CHECK(lin(m.nb + m.slack) == 1.0);
}

TEST_CASE("voltage-magnitude chain rule") {
  Eigen::VectorXd v(2);
  v << 0.8, 0.6;
  Eigen::MatrixXd jv(2, 1);
  jv << 1.0, 1.0;
  CHECK(vmag_chain_rule(v, jv, {0})(0, 0) == doctest::Approx(1.4).epsilon(1e-15));
  // Numerical cross-check of the same point.
  double h = 1e-7;
  double fd = (std::hypot(0.8 + h, 0.6 + h) - std::hypot(0.8 - h, 0.6 - h)) / (2 * h);
  CHECK(fd == doctest::Approx(1.4).epsilon(1e-8));

  Eigen::VectorXd real(2);
  real << 1.02, 0.0;
  Eigen::MatrixXd j2(2, 3);
  j2 << 0.3, -0.1, 2.0, 5.0, 6.0, 7.0;
  CHECK((vmag_chain_rule(real, j2, {0}) - j2.row(0)).norm() < 1e-15);

  Eigen::VectorXd zero = Eigen::VectorXd::Zero(2);
  CHECK_THROWS_AS(vmag_chain_rule(zero, jv, {0}), std::domain_error);
}

TEST_CASE("keeping inactive rows yields zero multiplier sensitivities") {
  Network net = toy();
  QcqpModel m = toy_model(net);
  Solved s = solve_at(m, m.nominal_theta);
  SensitivityRecord reduced = compute_sensitivities(m, s.sol, s.theta);
  SensitivityOptions keep;
  keep.keep_inactive = true;
  SensitivityRecord full = compute_sensitivities(m, s.sol, s.theta, keep);
  REQUIRE(reduced.ok);
  REQUIRE(full.ok);
  CHECK(full.rows.size() > reduced.rows.size());
  Classification cls = classify(m, s.sol, s.theta);
  for (std::size_t k = 0; k < full.rows.size(); ++k) {
    if (cls.classes[full.rows[k]] != ConstraintClass::inactive) continue;
    CHECK(full.dmu.row(static_cast<Eigen::Index>(k)).cwiseAbs().maxCoeff() < 1e-10);
  }
  CHECK((full.J_full - reduced.J_full).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("first-order update is accurate to second order") {
  Network net = twogen();
  QcqpModel m = assemble_qcqp(net);
  Solved s = solve_at(m, m.nominal_theta);
  SensitivityRecord rec = compute_sensitivities(m, s.sol, s.theta);
  REQUIRE(rec.ok);
  Eigen::VectorXd dir = Eigen::VectorXd::Ones(m.num_params()).normalized();
  std::vector<double> steps = {1e-2, 1e-3, 1e-4}, res;
  for (double t : steps) {
    Eigen::VectorXd dth = t * dir;
    Eigen::VectorXd x = stack(s.sol.v, s.sol.xg) + rec.J_full * dth;
    Eigen::VectorXd lam = s.sol.lambda + rec.dlambda * dth;
    Eigen::VectorXd mu = s.sol.mu;
    Eigen::VectorXd dmu = rec.dmu * dth;
    for (std::size_t k = 0; k < rec.rows.size(); ++k) mu(rec.rows[k]) += dmu(static_cast<Eigen::Index>(k));
    KktResiduals r = kkt_residuals(m, x.head(m.nv()), x.tail(m.nx()), lam, mu, s.theta + dth);
    res.push_back(r.max());
  }
  double slope = std::log(res[0] / res[2]) / std::log(steps[0] / steps[2]);
  CHECK(slope >= 1.9);
}

TEST_CASE("coupled limits on a radial feeder") {
  for (int scenario = 0; scenario < 3; ++scenario) {
    RadialCase rc = radial_case(scenario, 0.0);
    Solved s = solve_at(rc.model, rc.model.nominal_theta);
    SensitivityRecord rec = compute_sensitivities(rc.model, s.sol, s.theta);
    CAPTURE(scenario);
    REQUIRE(rec.ok);
    CHECK(rec.rank_deficient);
    CHECK(rec.dual_caveat);
    CHECK(rec.sigma_min / rec.sigma_max < 1e-10);
    REQUIRE(rec.null_basis.cols() > 0);
    const int np = rc.model.nv() + rc.model.nx();
    CHECK(rec.null_basis.topRows(np).cwiseAbs().maxCoeff() < 1e-8);
    Eigen::MatrixXd fd;
    REQUIRE(fd_primal(rc.model, s.theta, s.sol, 1e-5, 1e-10, fd));
    CHECK(fd_mismatch(rec.J_full, fd) <= 1.0);

    // Any other valid dual vector gives the same primal sensitivities.
    std::vector<int> act = classify(rc.model, s.sol, s.theta).active;
    Eigen::MatrixXd g = constraint_gradients(rc.model, s.sol.v, act);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(g.transpose());
    Eigen::MatrixXd w = lu.kernel();
    REQUIRE(w.cols() >= 1);
    REQUIRE(w.col(0).norm() > 0.0);
    Eigen::VectorXd dir = w.col(0).normalized();
    double room = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < act.size(); ++k) {
      double d = dir(rc.model.num_eq() + static_cast<int>(k));
      if (d != 0.0) room = std::min(room, s.sol.mu(act[k]) / std::abs(d));
    }
    REQUIRE(std::isfinite(room));
    for (double frac : {-0.5, 0.5}) {
      OpfSolution alt = s.sol;
      alt.lambda += frac * room * dir.head(rc.model.num_eq());
      for (std::size_t k = 0; k < act.size(); ++k)
        alt.mu(act[k]) += frac * room * dir(rc.model.num_eq() + static_cast<int>(k));
      CHECK((alt.mu - s.sol.mu).cwiseAbs().maxCoeff() > 1e-3);
      KktResiduals r = kkt_residuals(rc.model, alt.v, alt.xg, alt.lambda, alt.mu, s.theta);
      CHECK(r.max() < 1e-8);
      SensitivityRecord other = compute_sensitivities(rc.model, alt, s.theta);
      REQUIRE(other.ok);
      CHECK((other.J_full - rec.J_full).cwiseAbs().maxCoeff() < 1e-6);
    }
  }
}

TEST_CASE("an unreachable residual threshold rejects the record") {
  Network net = twogen();
  QcqpModel m = assemble_qcqp(net);
  Solved s = solve_at(m, m.nominal_theta);
  SensitivityOptions o;
  o.tau_res_rel = 0.0;
  SensitivityRecord rec = compute_sensitivities(m, s.sol, s.theta, o);
  CHECK(rec.rejected);
  CHECK_FALSE(rec.ok);
}
