#include "opfsense/powerflow.hpp"

#include <cmath>
#include <complex>

#include <Eigen/LU>

namespace opfsense {

using cplx = std::complex<double>;

Eigen::VectorXd to_cartesian(const Eigen::VectorXcd& v) {
  Eigen::VectorXd out(2 * v.size());
  out << v.real(), v.imag();
  return out;
}

Eigen::VectorXcd to_complex(const Eigen::VectorXd& v) {
  const auto n = v.size() / 2;
  Eigen::VectorXcd out(n);
  for (Eigen::Index i = 0; i < n; ++i) out(i) = cplx(v(i), v(n + i));
  return out;
}

Eigen::VectorXcd injections(const Network& net, const Eigen::VectorXcd& v) {
  Eigen::VectorXcd i = net.ybus * v;
  return v.cwiseProduct(i.conjugate());
}

PfSolution solve_pf(const Network& net, const PfSpec& spec, const PfOptions& opts) {
  const int n = net.num_buses();
  if (static_cast<int>(spec.type.size()) != n || spec.p.size() != n || spec.q.size() != n ||
      spec.vm.size() != n)
    throw std::invalid_argument("solve_pf: specification does not cover every bus");
  if (!(opts.tol > 0.0)) throw std::invalid_argument("solve_pf: tolerance must be positive");

  std::vector<int> pvpq, pq;
  int slacks = 0;
  for (int i = 0; i < n; ++i) {
    if (spec.type[i] == PfBusType::slack) ++slacks;
    else pvpq.push_back(i);
    if (spec.type[i] == PfBusType::pq) pq.push_back(i);
  }
  if (slacks != 1) throw std::invalid_argument("solve_pf: exactly one slack bus required");
  const int npv = static_cast<int>(pvpq.size()), npq = static_cast<int>(pq.size());

  Eigen::VectorXd va(n), vm(n);
  if (opts.warm_start) {
    if (opts.warm_start->size() != n) throw std::invalid_argument("solve_pf: warm start size");
    for (int i = 0; i < n; ++i) {
      va(i) = std::arg((*opts.warm_start)(i));
      vm(i) = std::abs((*opts.warm_start)(i));
    }
  } else {
    va.setZero();
    vm.setOnes();
  }
  for (int i = 0; i < n; ++i) {
    if (spec.type[i] != PfBusType::pq) vm(i) = spec.vm(i);
    if (spec.type[i] == PfBusType::slack && !opts.warm_start) va(i) = 0.0;
  }

  const Eigen::MatrixXcd& y = net.ybus;
  auto voltage = [&]() {
    Eigen::VectorXcd v(n);
    for (int i = 0; i < n; ++i) v(i) = std::polar(vm(i), va(i));
    return v;
  };
  auto mismatch = [&](const Eigen::VectorXcd& v) {
    Eigen::VectorXcd s = injections(net, v);
    Eigen::VectorXd f(npv + npq);
    for (int k = 0; k < npv; ++k) f(k) = s(pvpq[k]).real() - spec.p(pvpq[k]);
    for (int k = 0; k < npq; ++k) f(npv + k) = s(pq[k]).imag() - spec.q(pq[k]);
    return f;
  };

  PfSolution sol;
  Eigen::VectorXcd v = voltage();
  Eigen::VectorXd f = mismatch(v);
  double norm = f.size() ? f.lpNorm<Eigen::Infinity>() : 0.0;
  sol.mismatch_history.push_back(norm);
  int it = 0;
  while (norm >= opts.tol && it < opts.max_iter && std::isfinite(norm)) {
    ++it;
    Eigen::VectorXcd ibus = y * v;
    Eigen::VectorXcd vnorm = v.cwiseQuotient(v.cwiseAbs().cast<cplx>());
    // dS/dVm = diag(V) conj(Y diag(Vnorm)) + conj(diag(I)) diag(Vnorm)
    // dS/dVa = j diag(V) conj(diag(I) − Y diag(V))
    Eigen::MatrixXcd dsdvm = v.asDiagonal() * (y * vnorm.asDiagonal()).conjugate();
    dsdvm.diagonal() += ibus.conjugate().cwiseProduct(vnorm);
    Eigen::MatrixXcd tmp = -(y * v.asDiagonal());
    tmp.diagonal() += ibus;
    Eigen::MatrixXcd dsdva = cplx(0.0, 1.0) * (v.asDiagonal() * tmp.conjugate());

    Eigen::MatrixXd jac(npv + npq, npv + npq);
    for (int r = 0; r < npv; ++r) {
      for (int c = 0; c < npv; ++c) jac(r, c) = dsdva(pvpq[r], pvpq[c]).real();
      for (int c = 0; c < npq; ++c) jac(r, npv + c) = dsdvm(pvpq[r], pq[c]).real();
    }
    for (int r = 0; r < npq; ++r) {
      for (int c = 0; c < npv; ++c) jac(npv + r, c) = dsdva(pq[r], pvpq[c]).imag();
      for (int c = 0; c < npq; ++c) jac(npv + r, npv + c) = dsdvm(pq[r], pq[c]).imag();
    }
    Eigen::VectorXd dx = jac.partialPivLu().solve(-f);
    for (int k = 0; k < npv; ++k) va(pvpq[k]) += dx(k);
    for (int k = 0; k < npq; ++k) vm(pq[k]) += dx(npv + k);
    v = voltage();
    f = mismatch(v);
    norm = f.lpNorm<Eigen::Infinity>();
    sol.mismatch_history.push_back(norm);
  }
  sol.v = v;
  sol.iterations = it;
  sol.max_mismatch = norm;
  sol.converged = std::isfinite(norm) && norm < opts.tol;
  return sol;
}

Eigen::VectorXd generator_outputs(const QcqpModel& model, const Eigen::VectorXd& v,
                                  const Eigen::VectorXd& theta) {
  Eigen::VectorXd loads = load_injection(model, theta);
  Eigen::VectorXd xg(2 * model.ng);
  for (int g = 0; g < model.ng; ++g) {
    int n = model.gen_bus[g];
    xg(g) = v.dot(model.eq[n].L * v) - loads(n);
    xg(model.ng + g) = v.dot(model.eq[model.nb + n].L * v) - loads(model.nb + n);
  }
  return xg;
}

RecoveredState state_from_prediction(const Network& net, const QcqpModel& model,
                                     const Eigen::VectorXd& theta,
                                     const Eigen::VectorXd& prediction, const PfOptions& opts) {
  const int nb = model.nb, ng = model.ng;
  if (prediction.size() != 2 * ng - 1)
    throw std::invalid_argument("state_from_prediction: expected 2Ng-1 entries");
  Eigen::VectorXd loads = load_injection(model, theta);
  PfSpec spec;
  spec.type.assign(nb, PfBusType::pq);
  spec.p = loads.head(nb);
  spec.q = loads.tail(nb);
  spec.vm = Eigen::VectorXd::Ones(nb);
  int slack_gen = model.bus_gen[model.slack];
  int k = 0;
  for (int g = 0; g < ng; ++g) {
    int n = model.gen_bus[g];
    spec.type[n] = n == model.slack ? PfBusType::slack : PfBusType::pv;
    if (g != slack_gen) spec.p(n) += prediction(k++);
    spec.vm(n) = prediction(ng - 1 + g);
  }
  RecoveredState out;
  out.pf = solve_pf(net, spec, opts);
  out.v = to_cartesian(out.pf.v);
  out.xg = generator_outputs(model, out.v, theta);
  return out;
}

}  // namespace opfsense
