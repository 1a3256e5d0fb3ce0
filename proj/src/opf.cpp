#include "opfsense/opf.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include <Eigen/QR>
#include <lapacke.h>

#include "opfsense/powerflow.hpp"

namespace opfsense {

std::string_view to_string(OpfStatus s) {
  switch (s) {
    case OpfStatus::optimal: return "optimal";
    case OpfStatus::infeasible: return "infeasible";
    case OpfStatus::max_iter: return "max_iter";
  }
  return "?";
}

double KktResiduals::max() const { return std::max({stationarity, feasibility, complementarity}); }

void add_scaled(Eigen::MatrixXd& h, const SpMat& m, double a) {
  if (a == 0.0) return;
  for (int k = 0; k < m.outerSize(); ++k)
    for (SpMat::InnerIterator it(m, k); it; ++it) h(it.row(), it.col()) += a * it.value();
}

Eigen::MatrixXd lagrangian_matrix(const QcqpModel& model, const Eigen::VectorXd& lambda,
                                  const Eigen::VectorXd& mu) {
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(model.nv(), model.nv());
  for (int l = 0; l < model.num_eq(); ++l) add_scaled(z, model.eq[l].L, lambda(l));
  for (int m = 0; m < model.num_ineq(); ++m) add_scaled(z, model.ineq[m].M, mu(m));
  return z;
}

KktResiduals kkt_residuals(const QcqpModel& model, const Eigen::VectorXd& v,
                           const Eigen::VectorXd& xg, const Eigen::VectorXd& lambda,
                           const Eigen::VectorXd& mu, const Eigen::VectorXd& theta) {
  if (lambda.size() != model.num_eq() || mu.size() != model.num_ineq())
    throw std::invalid_argument("kkt_residuals: dimension mismatch");
  KktResiduals r;
  Eigen::MatrixXd z = lagrangian_matrix(model, lambda, mu);
  Eigen::VectorXd gv = 2.0 * z * v;
  Eigen::VectorXd gx = model.a0 - model.A().transpose() * lambda;
  r.stationarity = std::max(gv.lpNorm<Eigen::Infinity>(), gx.size() ? gx.lpNorm<Eigen::Infinity>() : 0.0);
  ConstraintValues c = eval_constraints(model, v, xg, theta);
  double hmax = c.h.size() ? c.h.lpNorm<Eigen::Infinity>() : 0.0;
  double gmax = 0.0, comp = 0.0;
  for (int m = 0; m < model.num_ineq(); ++m) {
    if (!std::isfinite(model.ineq[m].f)) continue;
    gmax = std::max(gmax, c.g(m));
    comp = std::max(comp, std::abs(mu(m) * c.g(m)));
  }
  r.feasibility = hmax + gmax;
  r.complementarity = comp;
  return r;
}

namespace {

struct Ldl {
  Eigen::MatrixXd a;
  std::vector<lapack_int> ipiv;
  int pos = 0, neg = 0, zero = 0;
  bool ok = false;

  void factor(const Eigen::MatrixXd& k) {
    a = k;
    const lapack_int n = static_cast<lapack_int>(a.rows());
    ipiv.assign(static_cast<std::size_t>(n), 0);
    lapack_int info = LAPACKE_dsytrf(LAPACK_COL_MAJOR, 'L', n, a.data(), n, ipiv.data());
    ok = info >= 0;
    pos = neg = zero = 0;
    if (!ok) return;
    double scale = std::max(1.0, k.cwiseAbs().maxCoeff());
    double tiny = 1e-14 * scale;
    for (lapack_int i = 0; i < n;) {
      if (ipiv[i] > 0) {
        double d = a(i, i);
        if (std::abs(d) <= tiny || !std::isfinite(d)) ++zero;
        else if (d > 0) ++pos;
        else ++neg;
        i += 1;
      } else {
        double p = a(i, i), q = a(i + 1, i), r = a(i + 1, i + 1);
        double det = p * r - q * q;
        if (std::abs(det) <= tiny * tiny) {
          ++zero;
          if (p + r > 0) ++pos;
          else ++neg;
        } else if (det < 0) {
          ++pos;
          ++neg;
        } else if (p + r > 0) {
          pos += 2;
        } else {
          neg += 2;
        }
        i += 2;
      }
    }
  }

  Eigen::VectorXd solve(const Eigen::VectorXd& b) const {
    Eigen::VectorXd x = b;
    const lapack_int n = static_cast<lapack_int>(a.rows());
    LAPACKE_dsytrs(LAPACK_COL_MAJOR, 'L', n, 1, a.data(), n, ipiv.data(), x.data(), n);
    return x;
  }
};

/// The QCQP restricted to the unknowns the solver iterates on: voltages without the
/// reference imaginary part, equality rows of buses without generators, finite inequalities.
struct Reduced {
  const QcqpModel& m;
  int nb = 0, n = 0, fixed = 0;
  std::vector<int> full;  // reduced -> full index
  std::vector<int> eq_rows;
  Eigen::VectorXd eq_rhs;
  std::vector<int> in_rows;
  Eigen::VectorXd in_rhs, w;
  SpMat cost;
  double kappa = 1.0;
  Eigen::VectorXd loads;

  Reduced(const QcqpModel& model, const Eigen::VectorXd& theta) : m(model) {
    nb = m.nb;
    fixed = nb + m.slack;
    for (int i = 0; i < 2 * nb; ++i)
      if (i != fixed) full.push_back(i);
    n = static_cast<int>(full.size());
    loads = load_injection(m, theta);
    for (int l = 0; l < 2 * nb; ++l)
      if (m.eq[l].a.index < 0) eq_rows.push_back(l);
    eq_rhs.resize(static_cast<Eigen::Index>(eq_rows.size()));
    for (std::size_t k = 0; k < eq_rows.size(); ++k) eq_rhs(static_cast<Eigen::Index>(k)) = loads(eq_rows[k]);
    for (int r = 0; r < m.num_ineq(); ++r)
      if (std::isfinite(m.ineq[r].f)) in_rows.push_back(r);
    in_rhs.resize(static_cast<Eigen::Index>(in_rows.size()));
    w.resize(in_rhs.size());
    for (std::size_t k = 0; k < in_rows.size(); ++k) {
      const auto& row = m.ineq[in_rows[k]];
      double rhs = row.f + (row.d.index >= 0 ? row.d.sign * theta(row.d.index) : 0.0);
      in_rhs(static_cast<Eigen::Index>(k)) = rhs;
      w(static_cast<Eigen::Index>(k)) = 1.0 / std::max(1.0, std::abs(row.f));
    }
    kappa = 1.0 / std::max(1.0, m.a0.size() ? m.a0.cwiseAbs().maxCoeff() : 0.0);
    cost.resize(2 * nb, 2 * nb);
    for (int g = 0; g < m.ng; ++g) {
      int bus = m.gen_bus[g];
      if (m.a0(g) != 0.0) cost += m.a0(g) * m.eq[bus].L;
      if (m.a0(m.ng + g) != 0.0) cost += m.a0(m.ng + g) * m.eq[nb + bus].L;
    }
  }

  int p() const { return static_cast<int>(eq_rows.size()); }
  int mi() const { return static_cast<int>(in_rows.size()); }

  Eigen::VectorXd expand(const Eigen::VectorXd& x) const {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(2 * nb);
    for (int k = 0; k < n; ++k) v(full[k]) = x(k);
    return v;
  }
  Eigen::VectorXd restrict_vec(const Eigen::VectorXd& v) const {
    Eigen::VectorXd x(n);
    for (int k = 0; k < n; ++k) x(k) = v(full[k]);
    return x;
  }
  Eigen::MatrixXd restrict_mat(const Eigen::MatrixXd& h) const {
    Eigen::MatrixXd r(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) r(i, j) = h(full[i], full[j]);
    return r;
  }

  struct Eval {
    Eigen::VectorXd v, h, g, df;
    Eigen::MatrixXd jh, jg;
    double f = 0.0;
  };

  Eval evaluate(const Eigen::VectorXd& x) const {
    Eval e;
    e.v = expand(x);
    Eigen::VectorXd cv = cost * e.v;
    e.f = kappa * e.v.dot(cv);
    e.df = restrict_vec(2.0 * kappa * cv);
    e.h.resize(p());
    e.jh.resize(p(), n);
    for (int k = 0; k < p(); ++k) {
      Eigen::VectorXd lv = m.eq[eq_rows[k]].L * e.v;
      e.h(k) = e.v.dot(lv) - eq_rhs(k);
      e.jh.row(k) = restrict_vec(2.0 * lv).transpose();
    }
    e.g.resize(mi());
    e.jg.resize(mi(), n);
    for (int k = 0; k < mi(); ++k) {
      Eigen::VectorXd mv = m.ineq[in_rows[k]].M * e.v;
      e.g(k) = w(k) * (e.v.dot(mv) - in_rhs(k));
      e.jg.row(k) = restrict_vec(2.0 * w(k) * mv).transpose();
    }
    return e;
  }

  Eigen::MatrixXd hessian(const Eigen::VectorXd& lam, const Eigen::VectorXd& mu) const {
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(2 * nb, 2 * nb);
    add_scaled(h, cost, 2.0 * kappa);
    for (int k = 0; k < p(); ++k) add_scaled(h, m.eq[eq_rows[k]].L, 2.0 * lam(k));
    for (int k = 0; k < mi(); ++k) add_scaled(h, m.ineq[in_rows[k]].M, 2.0 * mu(k) * w(k));
    return restrict_mat(h);
  }
};

struct PolishResult {
  bool ok = false;
  Eigen::VectorXd x, lam, mu;
};

/// Newton on the equality-constrained KKT system of the identified active set, with
/// minimum-norm steps so that dependent active gradients are tolerated.
PolishResult polish(const Reduced& red, const Eigen::VectorXd& x0, const Eigen::VectorXd& lam0,
                    const Eigen::VectorXd& mu0, const Eigen::VectorXd& s0) {
  PolishResult out;
  const int n = red.n, p = red.p();
  std::vector<int> act;
  for (int k = 0; k < red.mi(); ++k)
    if (mu0(k) > s0(k)) act.push_back(k);
  const int a = static_cast<int>(act.size());

  Eigen::VectorXd x = x0, lam = lam0, mua(a);
  for (int k = 0; k < a; ++k) mua(k) = mu0(act[k]);

  auto residual = [&](const Reduced::Eval& e, const Eigen::VectorXd& mu_full) {
    Eigen::VectorXd f(n + p + a);
    f.head(n) = e.df + e.jh.transpose() * lam + e.jg.transpose() * mu_full;
    f.segment(n, p) = e.h;
    for (int k = 0; k < a; ++k) f(n + p + k) = e.g(act[k]);
    return f;
  };
  auto full_mu = [&](const Eigen::VectorXd& ma) {
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(red.mi());
    for (int k = 0; k < a; ++k) mu(act[k]) = ma(k);
    return mu;
  };

  double scale = 1.0 + std::max(lam.size() ? lam.lpNorm<Eigen::Infinity>() : 0.0,
                                mua.size() ? mua.lpNorm<Eigen::Infinity>() : 0.0);
  double prev = std::numeric_limits<double>::infinity();
  Reduced::Eval e;
  Eigen::VectorXd mu;
  bool converged = false;
  for (int it = 0; it < 12; ++it) {
    mu = full_mu(mua);
    e = red.evaluate(x);
    Eigen::VectorXd f = residual(e, mu);
    double r = f.lpNorm<Eigen::Infinity>();
    if (!std::isfinite(r)) return out;
    if (r < 1e-14 * scale || (it > 0 && r >= 0.5 * prev && r < 1e-11 * scale)) {
      converged = true;
      break;
    }
    if (it > 2 && r > prev) return out;
    prev = r;
    Eigen::MatrixXd j = Eigen::MatrixXd::Zero(n + p + a, n + p + a);
    j.topLeftCorner(n, n) = red.hessian(lam, mu);
    j.block(0, n, n, p) = e.jh.transpose();
    j.block(n, 0, p, n) = e.jh;
    for (int k = 0; k < a; ++k) {
      j.block(0, n + p + k, n, 1) = e.jg.row(act[k]).transpose();
      j.block(n + p + k, 0, 1, n) = e.jg.row(act[k]);
    }
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(j);
    cod.setThreshold(1e-13);
    Eigen::VectorXd step = cod.solve(-f);
    x += step.head(n);
    lam += step.segment(n, p);
    mua += step.tail(a);
  }
  if (!converged) return out;
  for (int k = 0; k < a; ++k)
    if (mua(k) < -1e-12 * scale) return out;
  std::vector<bool> is_act(static_cast<std::size_t>(red.mi()), false);
  for (int k : act) is_act[static_cast<std::size_t>(k)] = true;
  for (int k = 0; k < red.mi(); ++k)
    if (!is_act[static_cast<std::size_t>(k)] && e.g(k) > 0.0) return out;
  out.ok = true;
  out.x = x;
  out.lam = lam;
  out.mu = full_mu(mua.cwiseMax(0.0));
  return out;
}

}  // namespace

OpfSolution solve_opf(const QcqpModel& model, const Eigen::VectorXd& theta, const SolverOptions& opts) {
  if (theta.size() != model.num_params()) throw std::invalid_argument("solve_opf: θ has the wrong length");
  if (!(opts.tol_kkt > 0.0)) throw std::invalid_argument("solve_opf: tol_kkt must be positive");
  Reduced red(model, theta);
  const int n = red.n, p = red.p(), mi = red.mi();

  Eigen::VectorXd v0;
  if (opts.warm_start) {
    if (opts.warm_start->size() != model.nv()) throw std::invalid_argument("solve_opf: warm start size");
    // rotate so that the reference angle is zero
    Eigen::VectorXcd vc = to_complex(*opts.warm_start);
    std::complex<double> ref = vc(model.slack);
    if (std::abs(ref) > 0) vc *= std::abs(ref) / ref;
    v0 = to_cartesian(vc);
  } else {
    v0 = flat_voltage(model.nb);
    for (int i = 0; i < model.nb; ++i) {
      const auto& up = model.ineq[4 * model.ng + i];
      const auto& lo = model.ineq[4 * model.ng + model.nb + i];
      double vmax = std::sqrt(up.f), vmin = std::sqrt(-lo.f);
      v0(i) = std::clamp(1.0, vmin, vmax);
    }
  }
  Eigen::VectorXd x = red.restrict_vec(v0);
  Reduced::Eval e = red.evaluate(x);
  Eigen::VectorXd s = (-e.g).cwiseMax(0.1);
  Eigen::VectorXd mu = s.cwiseInverse();
  // equality multipliers: least-squares fit of stationarity at the starting point
  Eigen::VectorXd lam = Eigen::VectorXd::Zero(p);
  if (p) {
    Eigen::VectorXd r = e.df + (mi ? Eigen::VectorXd(e.jg.transpose() * mu) : Eigen::VectorXd::Zero(n));
    lam = e.jh.transpose().completeOrthogonalDecomposition().solve(-r);
  }

  OpfSolution sol;
  double delta_last = 0.0;
  bool done = false, polished = false;
  double last_polish_level = std::numeric_limits<double>::infinity();
  int it = 0;
  double feas_unscaled = std::numeric_limits<double>::infinity();
  for (; it <= opts.max_iter; ++it) {
    Eigen::VectorXd lx = e.df + e.jh.transpose() * lam + e.jg.transpose() * mu;
    double xnorm = x.lpNorm<Eigen::Infinity>();
    double hn = p ? e.h.lpNorm<Eigen::Infinity>() : 0.0;
    double gn = mi ? std::max(0.0, e.g.maxCoeff()) : 0.0;
    feas_unscaled = std::max(hn, gn);
    double dual_norm = std::max(p ? lam.lpNorm<Eigen::Infinity>() : 0.0, mi ? mu.lpNorm<Eigen::Infinity>() : 0.0);
    double feascond = std::max(hn, gn) / (1.0 + std::max(xnorm, mi ? s.lpNorm<Eigen::Infinity>() : 0.0));
    double gradcond = lx.lpNorm<Eigen::Infinity>() / (1.0 + dual_norm);
    double compcond = (mi ? s.dot(mu) : 0.0) / (1.0 + xnorm);
    double level = std::max({feascond, gradcond, compcond});
    if (opts.verbose)
      std::fprintf(stderr, "it %3d feas %.2e grad %.2e comp %.2e\n", it, feascond, gradcond, compcond);
    if (!std::isfinite(level) || xnorm > 1e3) break;

    if (opts.polish && level < 1e-6 && level < 0.01 * last_polish_level) {
      last_polish_level = level;
      PolishResult pr = polish(red, x, lam, mu, s);
      if (pr.ok) {
        x = pr.x;
        lam = pr.lam;
        mu = pr.mu;
        e = red.evaluate(x);
        polished = true;
        done = true;
        break;
      }
    }
    if (level < opts.ipm_tol) {
      done = true;
      break;
    }
    if (it == opts.max_iter) break;

    double gamma = mi ? opts.sigma * s.dot(mu) / mi : 0.0;
    Eigen::VectorXd ratio = mu.cwiseQuotient(s);
    Eigen::MatrixXd hc = red.hessian(lam, mu);
    if (mi) hc.noalias() += e.jg.transpose() * ratio.asDiagonal() * e.jg;
    Eigen::VectorXd comp_term = (gamma + mu.cwiseProduct(e.g).array()).matrix().cwiseQuotient(s);
    Eigen::VectorXd rhs(n + p);
    rhs.head(n) = -lx - (mi ? Eigen::VectorXd(e.jg.transpose() * comp_term) : Eigen::VectorXd::Zero(n));
    rhs.tail(p) = -e.h;

    Eigen::MatrixXd k(n + p, n + p);
    k.topLeftCorner(n, n) = hc;
    k.topRightCorner(n, p) = e.jh.transpose();
    k.bottomLeftCorner(p, n) = e.jh;
    k.bottomRightCorner(p, p).setZero();
    Ldl ldl;
    double dw = 0.0, dc = 0.0;
    for (int attempt = 0; attempt < 80; ++attempt) {
      Eigen::MatrixXd kk = k;
      kk.topLeftCorner(n, n).diagonal().array() += dw;
      kk.bottomRightCorner(p, p).diagonal().array() -= dc;
      ldl.factor(kk);
      if (ldl.ok && ldl.pos == n && ldl.neg == p && ldl.zero == 0) break;
      if (ldl.zero > 0 && dc == 0.0) dc = 1e-10;
      if (!ldl.ok || ldl.pos != n || ldl.neg != p || ldl.zero > 0) {
        if (dw == 0.0) dw = delta_last > 0.0 ? std::max(opts.delta_init, delta_last / 4.0) : opts.delta_init;
        else dw *= 2.0;
      }
    }
    delta_last = dw;
    Eigen::VectorXd sol_step = ldl.solve(rhs);
    Eigen::VectorXd dx = sol_step.head(n), dl = sol_step.tail(p);
    Eigen::VectorXd ds(mi), dmu(mi);
    if (mi) {
      Eigen::VectorXd jdx = e.jg * dx;
      ds = -(e.g + s) - jdx;
      dmu = (gamma + mu.cwiseProduct(e.g).array() + mu.cwiseProduct(jdx).array()).matrix().cwiseQuotient(s);
    }
    double ap = 1.0, ad = 1.0;
    for (int i = 0; i < mi; ++i) {
      if (ds(i) < 0) ap = std::min(ap, -opts.step_fraction * s(i) / ds(i));
      if (dmu(i) < 0) ad = std::min(ad, -opts.step_fraction * mu(i) / dmu(i));
    }
    x += ap * dx;
    if (mi) {
      s += ap * ds;
      mu += ad * dmu;
    }
    lam += ad * dl;
    e = red.evaluate(x);
  }

  // unscale and rebuild the full primal/dual vectors
  sol.iterations = it;
  sol.polished = polished;
  sol.v = e.v;
  sol.xg = generator_outputs(model, sol.v, theta);
  sol.lambda = Eigen::VectorXd::Zero(model.num_eq());
  for (int k = 0; k < p; ++k) sol.lambda(red.eq_rows[k]) = lam(k) / red.kappa;
  for (int l = 0; l < 2 * model.nb; ++l)
    if (model.eq[l].a.index >= 0) sol.lambda(l) = model.a0(model.eq[l].a.index) / model.eq[l].a.sign;
  sol.mu = Eigen::VectorXd::Zero(model.num_ineq());
  for (int k = 0; k < mi; ++k) sol.mu(red.in_rows[k]) = mu(k) * red.w(k) / red.kappa;
  {
    Eigen::MatrixXd z = lagrangian_matrix(model, sol.lambda, sol.mu);
    sol.lambda(model.num_eq() - 1) = 2.0 * z.row(red.fixed).dot(sol.v);
  }
  sol.objective = model.a0.dot(sol.xg);
  sol.kkt = kkt_residuals(model, sol.v, sol.xg, sol.lambda, sol.mu, theta);
  if (done && sol.kkt.max() < opts.tol_kkt) sol.status = OpfStatus::optimal;
  else if (!std::isfinite(feas_unscaled) || feas_unscaled > 1e-5 || !std::isfinite(sol.kkt.feasibility) ||
           sol.kkt.feasibility > 1e-5)
    sol.status = OpfStatus::infeasible;
  else sol.status = OpfStatus::max_iter;
  return sol;
}

}  // namespace opfsense
