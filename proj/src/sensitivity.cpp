#include "opfsense/sensitivity.hpp"

#include <cmath>
#include <limits>

#include <Eigen/LU>
#include <Eigen/SVD>

namespace opfsense {

GenLimitForm parse_gen_limit_form(std::string_view s) {
  if (s == "quadratic") return GenLimitForm::quadratic;
  if (s == "box") return GenLimitForm::box;
  throw std::invalid_argument("unknown generator-limit form '" + std::string(s) + "'");
}

VoltageLimitForm parse_voltage_limit_form(std::string_view s) {
  if (s == "squared") return VoltageLimitForm::squared;
  if (s == "magnitude") return VoltageLimitForm::magnitude;
  throw std::invalid_argument("unknown voltage-limit form '" + std::string(s) + "'");
}

ReferenceForm parse_reference_form(std::string_view s) {
  if (s == "linear") return ReferenceForm::linear;
  if (s == "angle") return ReferenceForm::angle;
  if (s == "quadratic") return ReferenceForm::quadratic;
  throw std::invalid_argument("unknown reference form '" + std::string(s) + "'");
}

std::vector<ConstraintClass> classify_constraints(const Eigen::VectorXd& g, const Eigen::VectorXd& mu,
                                                  const Eigen::VectorXd& tau_g, double tau_mu) {
  if (g.size() != mu.size() || g.size() != tau_g.size())
    throw std::invalid_argument("classify_constraints: dimension mismatch");
  std::vector<ConstraintClass> out(static_cast<std::size_t>(g.size()));
  for (Eigen::Index m = 0; m < g.size(); ++m) {
    auto& c = out[static_cast<std::size_t>(m)];
    if (mu(m) < tau_mu && g(m) < -tau_g(m)) c = ConstraintClass::inactive;
    else if (mu(m) >= tau_mu && std::abs(g(m)) <= tau_g(m)) c = ConstraintClass::strongly_active;
    else c = ConstraintClass::degenerate;
  }
  return out;
}

Classification classify(const QcqpModel& model, const OpfSolution& sol, const Eigen::VectorXd& theta,
                        const SensitivityOptions& opts) {
  Classification c;
  c.g = eval_constraints(model, sol.v, sol.xg, theta).g;
  const int m = model.num_ineq();
  double mumax = m ? sol.mu.lpNorm<Eigen::Infinity>() : 0.0;
  c.tau_mu = opts.tau_mu_rel * std::max(1.0, mumax);
  Eigen::VectorXd tau_g(m), g = c.g, mu = sol.mu;
  for (int k = 0; k < m; ++k) {
    double f = model.ineq[k].f;
    tau_g(k) = opts.tau_g_rel * std::max(1.0, std::isfinite(f) ? std::abs(f) : 1.0);
    if (!std::isfinite(f)) {
      g(k) = -std::numeric_limits<double>::max();
      mu(k) = 0.0;
    }
  }
  c.classes = classify_constraints(g, mu, tau_g, c.tau_mu);
  for (int k = 0; k < m; ++k) {
    if (c.classes[k] == ConstraintClass::strongly_active) c.active.push_back(k);
    if (c.classes[k] == ConstraintClass::degenerate) c.degenerate.push_back(k);
  }
  return c;
}

namespace {

bool is_gen_limit(IneqKind k) {
  return k == IneqKind::pg_upper || k == IneqKind::pg_lower || k == IneqKind::qg_upper ||
         k == IneqKind::qg_lower;
}
bool is_upper(IneqKind k) {
  return k == IneqKind::pg_upper || k == IneqKind::qg_upper || k == IneqKind::v_upper;
}
bool is_voltage(IneqKind k) { return k == IneqKind::v_upper || k == IneqKind::v_lower; }

double bus_vmag(const Eigen::VectorXd& v, int nb, int n) { return std::hypot(v(n), v(nb + n)); }

/// Hessian (on v) of inequality m under the chosen forms, added with weight `a`.
void add_ineq_hessian(Eigen::MatrixXd& w, const QcqpModel& model, int m, const Eigen::VectorXd& v,
                      const SensitivityOptions& opts, double a) {
  const auto& row = model.ineq[m];
  if (a == 0.0) return;
  if (opts.gen_limits == GenLimitForm::box && is_gen_limit(row.kind)) return;
  if (opts.voltage_limits == VoltageLimitForm::magnitude && is_voltage(row.kind)) {
    const int nb = model.nb, n = row.element;
    double r = bus_vmag(v, nb, n);
    double sign = is_upper(row.kind) ? 1.0 : -1.0;
    int idx[2] = {n, nb + n};
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        double val = (i == j ? 1.0 / r : 0.0) - v(idx[i]) * v(idx[j]) / (r * r * r);
        w(idx[i], idx[j]) += a * sign * val;
      }
    return;
  }
  add_scaled(w, row.M, 2.0 * a);
}

Eigen::VectorXd ineq_dtheta(const QcqpModel& model, int m, const SensitivityOptions& opts) {
  Eigen::VectorXd d = Eigen::VectorXd::Zero(model.num_params());
  const auto& row = model.ineq[m];
  if (opts.gen_limits == GenLimitForm::box && is_gen_limit(row.kind)) return d;
  if (row.d.index >= 0) d(row.d.index) = -row.d.sign;
  return d;
}

}  // namespace

Eigen::VectorXd inequality_gradient(const QcqpModel& model, int m, const Eigen::VectorXd& v,
                                    GenLimitForm gen, VoltageLimitForm volt) {
  const int nv = model.nv(), np = nv + model.nx();
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(np);
  const auto& row = model.ineq[m];
  if (gen == GenLimitForm::box && is_gen_limit(row.kind)) {
    bool reactive = row.kind == IneqKind::qg_upper || row.kind == IneqKind::qg_lower;
    grad(nv + (reactive ? model.ng : 0) + row.element) = is_upper(row.kind) ? 1.0 : -1.0;
    return grad;
  }
  if (volt == VoltageLimitForm::magnitude && is_voltage(row.kind)) {
    const int nb = model.nb, n = row.element;
    double r = bus_vmag(v, nb, n);
    double sign = is_upper(row.kind) ? 1.0 : -1.0;
    grad(n) = sign * v(n) / r;
    grad(nb + n) = sign * v(nb + n) / r;
    return grad;
  }
  grad.head(nv) = 2.0 * (row.M * v);
  return grad;
}

Eigen::VectorXd reference_gradient(const QcqpModel& model, const Eigen::VectorXd& v, ReferenceForm form) {
  const int nb = model.nb, s = model.slack;
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(model.nv() + model.nx());
  switch (form) {
    case ReferenceForm::linear:
      grad(nb + s) = 1.0;
      break;
    case ReferenceForm::angle: {
      double r2 = v(s) * v(s) + v(nb + s) * v(nb + s);
      grad(s) = -v(nb + s) / r2;
      grad(nb + s) = v(s) / r2;
      break;
    }
    case ReferenceForm::quadratic:
      grad(nb + s) = 2.0 * v(nb + s);
      break;
  }
  return grad;
}

VariantDuals convert_duals(const QcqpModel& model, const OpfSolution& sol, const Eigen::VectorXd& theta,
                           const SensitivityOptions& opts) {
  VariantDuals d;
  d.lambda = sol.lambda;
  d.mu = sol.mu;
  d.g = eval_constraints(model, sol.v, sol.xg, theta).g;
  const int nb = model.nb, ng = model.ng;
  if (opts.gen_limits == GenLimitForm::box) {
    // the balance-row multiplier absorbs the limit multipliers of the same generator
    for (int g = 0; g < ng; ++g) {
      int bus = model.gen_bus[g];
      d.lambda(bus) += sol.mu(g) - sol.mu(ng + g);
      d.lambda(nb + bus) += sol.mu(2 * ng + g) - sol.mu(3 * ng + g);
    }
  }
  if (opts.voltage_limits == VoltageLimitForm::magnitude) {
    for (int m = 0; m < model.num_ineq(); ++m) {
      const auto& row = model.ineq[m];
      if (!is_voltage(row.kind)) continue;
      double r = bus_vmag(sol.v, nb, row.element);
      d.mu(m) = 2.0 * r * sol.mu(m);
      double lim = std::sqrt(std::abs(row.f));
      d.g(m) = is_upper(row.kind) ? r - lim : lim - r;
    }
  }
  const int ref = model.num_eq() - 1;
  if (opts.reference == ReferenceForm::angle) d.lambda(ref) = sol.lambda(ref) * sol.v(model.slack);
  if (opts.reference == ReferenceForm::quadratic)
    d.lambda(ref) = std::max(1.0, sol.lambda.lpNorm<Eigen::Infinity>());
  return d;
}

KktDiffSystem assemble_system(const QcqpModel& model, const OpfSolution& sol, const Eigen::VectorXd& theta,
                              const Classification& cls, const SensitivityOptions& opts) {
  KktDiffSystem sys;
  if (!cls.degenerate.empty()) {
    sys.degenerate = true;
    sys.degenerate_set = cls.degenerate;
    return sys;
  }
  const int nb = model.nb, nv = model.nv(), np = nv + model.nx();
  const int L = model.num_eq(), nth = model.num_params();
  const Eigen::VectorXd& v = sol.v;
  VariantDuals duals = convert_duals(model, sol, theta, opts);

  for (int m = 0; m < model.num_ineq(); ++m) {
    if (!std::isfinite(model.ineq[m].f)) continue;
    if (cls.classes[m] == ConstraintClass::strongly_active ||
        (opts.keep_inactive && cls.classes[m] == ConstraintClass::inactive))
      sys.rows.push_back(m);
  }
  const int K = static_cast<int>(sys.rows.size());
  const int N = np + L + K;
  sys.n_primal = np;
  sys.n_eq = L;
  sys.S = Eigen::MatrixXd::Zero(N, N);
  sys.U = Eigen::MatrixXd::Zero(N, nth);

  // Hessian of the Lagrangian on v
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(nv, nv);
  for (int l = 0; l < L - 1; ++l) add_scaled(w, model.eq[l].L, 2.0 * duals.lambda(l));
  {
    double lr = duals.lambda(L - 1);
    const int s = model.slack;
    if (opts.reference == ReferenceForm::quadratic) {
      w(nb + s, nb + s) += 2.0 * lr;
    } else if (opts.reference == ReferenceForm::angle && lr != 0.0) {
      double x = v(s), y = v(nb + s), r4 = std::pow(x * x + y * y, 2);
      w(s, s) += lr * 2.0 * x * y / r4;
      w(nb + s, nb + s) += lr * -2.0 * x * y / r4;
      w(s, nb + s) += lr * (y * y - x * x) / r4;
      w(nb + s, s) += lr * (y * y - x * x) / r4;
    }
  }
  for (int m = 0; m < model.num_ineq(); ++m)
    if (std::isfinite(model.ineq[m].f)) add_ineq_hessian(w, model, m, v, opts, duals.mu(m));

  // block row 1: ½ of the v-stationarity differential; block row 2: minus the x_g part
  sys.S.topLeftCorner(nv, nv) = 0.5 * w;
  auto put_column = [&](int col, const Eigen::VectorXd& grad) {
    sys.S.block(0, col, nv, 1) = 0.5 * grad.head(nv);
    sys.S.block(nv, col, np - nv, 1) = -grad.tail(np - nv);
  };
  for (int l = 0; l < L; ++l) {
    Eigen::VectorXd grad;
    if (l == L - 1) {
      grad = reference_gradient(model, v, opts.reference);
    } else {
      const auto& row = model.eq[l];
      grad = Eigen::VectorXd::Zero(np);
      grad.head(nv) = 2.0 * (row.L * v);
      if (row.a.index >= 0) grad(nv + row.a.index) = -row.a.sign;
      if (row.b.index >= 0) sys.U(np + l, row.b.index) = row.b.sign;  // −∂h/∂θ
    }
    put_column(np + l, grad);
    sys.S.block(np + l, 0, 1, np) = grad.transpose();
  }
  for (int k = 0; k < K; ++k) {
    int m = sys.rows[k];
    Eigen::VectorXd grad = inequality_gradient(model, m, v, opts.gen_limits, opts.voltage_limits);
    put_column(np + L + k, grad);
    double mu = duals.mu(m);
    bool active = cls.classes[m] == ConstraintClass::strongly_active;
    sys.S.block(np + L + k, 0, 1, np) = mu * grad.transpose();
    sys.S(np + L + k, np + L + k) = active ? 0.0 : duals.g(m);
    sys.U.row(np + L + k) = -mu * ineq_dtheta(model, m, opts).transpose();
  }
  return sys;
}

SensitivityRecord solve_sensitivities(const KktDiffSystem& sys, const SensitivityOptions& opts) {
  SensitivityRecord rec;
  rec.rows = sys.rows;
  if (sys.degenerate) {
    rec.degenerate = true;
    return rec;
  }
  const auto N = sys.S.rows();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(sys.S, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::VectorXd& sv = svd.singularValues();
  rec.sigma_max = sv(0);
  rec.sigma_min = sv(N - 1);
  Eigen::MatrixXd gamma;
  if (rec.sigma_min <= opts.rank_tol * rec.sigma_max) {
    rec.rank_deficient = true;
    rec.dual_caveat = true;
    double cut = opts.rank_tol * rec.sigma_max;
    Eigen::Index rank = 0;
    while (rank < N && sv(rank) > cut) ++rank;
    Eigen::MatrixXd ut_u = svd.matrixU().leftCols(rank).transpose() * sys.U;
    gamma = svd.matrixV().leftCols(rank) * (sv.head(rank).cwiseInverse().asDiagonal() * ut_u);
    rec.null_basis = svd.matrixV().rightCols(N - rank);
  } else {
    gamma = sys.S.partialPivLu().solve(sys.U);
  }
  rec.residual = (sys.S * gamma - sys.U).norm();
  double unorm = sys.U.norm();
  double limit = opts.tau_res_rel * (unorm > 0 ? unorm : 1.0);
  if (!std::isfinite(rec.residual) || rec.residual > limit) {
    rec.rejected = true;
    return rec;
  }
  rec.J_full = gamma.topRows(sys.n_primal);
  rec.dlambda = gamma.middleRows(sys.n_primal, sys.n_eq);
  rec.dmu = gamma.bottomRows(N - sys.n_primal - sys.n_eq);
  rec.ok = true;
  return rec;
}

SensitivityRecord compute_sensitivities(const QcqpModel& model, const OpfSolution& sol,
                                        const Eigen::VectorXd& theta, const SensitivityOptions& opts) {
  Classification cls = classify(model, sol, theta, opts);
  KktDiffSystem sys = assemble_system(model, sol, theta, cls, opts);
  return solve_sensitivities(sys, opts);
}

Eigen::MatrixXd vmag_chain_rule(const Eigen::VectorXd& v, const Eigen::MatrixXd& jv,
                                const std::vector<int>& buses) {
  const auto nb = v.size() / 2;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(buses.size()), jv.cols());
  for (std::size_t k = 0; k < buses.size(); ++k) {
    int n = buses[k];
    double r = std::hypot(v(n), v(nb + n));
    if (r < 1e-6) throw std::domain_error("voltage magnitude too small for the chain rule");
    out.row(static_cast<Eigen::Index>(k)) = (v(n) * jv.row(n) + v(nb + n) * jv.row(nb + n)) / r;
  }
  return out;
}

Eigen::VectorXd reduced_output(const QcqpModel& model, const Eigen::VectorXd& v, const Eigen::VectorXd& xg) {
  const int ng = model.ng;
  Eigen::VectorXd y(2 * ng - 1);
  int ref = model.bus_gen[model.slack], k = 0;
  for (int g = 0; g < ng; ++g)
    if (g != ref) y(k++) = xg(g);
  for (int g = 0; g < ng; ++g) y(k++) = bus_vmag(v, model.nb, model.gen_bus[g]);
  return y;
}

Eigen::MatrixXd output_jacobian(const QcqpModel& model, const Eigen::VectorXd& v, const Eigen::MatrixXd& j_full) {
  const int ng = model.ng, nv = model.nv();
  Eigen::MatrixXd j(2 * ng - 1, j_full.cols());
  int ref = model.bus_gen[model.slack], k = 0;
  for (int g = 0; g < ng; ++g)
    if (g != ref) j.row(k++) = j_full.row(nv + g);
  j.bottomRows(ng) = vmag_chain_rule(v, j_full.topRows(nv), model.gen_bus);
  return j;
}

std::vector<std::string> output_names(const QcqpModel& model, const Network& net) {
  std::vector<std::string> names;
  int ref = model.bus_gen[model.slack];
  for (int g = 0; g < model.ng; ++g)
    if (g != ref) names.push_back("pg" + std::to_string(net.generators[g].bus));
  for (int g = 0; g < model.ng; ++g) names.push_back("vm" + std::to_string(net.generators[g].bus));
  return names;
}

}  // namespace opfsense
