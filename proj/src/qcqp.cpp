#include "opfsense/qcqp.hpp"

#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <sstream>

namespace opfsense {

namespace {

using cplx = std::complex<double>;
using Trip = Eigen::Triplet<double>;

/// Triplets of the real form of a Hermitian matrix given by its complex triplets.
void push_hermitian(std::vector<Trip>& out, int nb, int i, int k, cplx h) {
  // [[Hr, -Hi], [Hi, Hr]]
  if (h.real() != 0.0) {
    out.emplace_back(i, k, h.real());
    out.emplace_back(nb + i, nb + k, h.real());
  }
  if (h.imag() != 0.0) {
    out.emplace_back(i, nb + k, -h.imag());
    out.emplace_back(nb + i, k, h.imag());
  }
}

SpMat from_triplets(int n, const std::vector<Trip>& t) {
  SpMat m(n, n);
  m.setFromTriplets(t.begin(), t.end());
  m.prune(0.0);
  return m;
}

/// |wᵀV|² as a real quadratic form.
SpMat current_form(int nb, const std::vector<std::pair<int, cplx>>& w) {
  Eigen::VectorXd a1 = Eigen::VectorXd::Zero(2 * nb), a2 = Eigen::VectorXd::Zero(2 * nb);
  for (auto [k, c] : w) {
    a1(k) += c.real();
    a1(nb + k) += -c.imag();
    a2(k) += c.imag();
    a2(nb + k) += c.real();
  }
  std::vector<Trip> t;
  for (int i = 0; i < 2 * nb; ++i)
    for (int j = 0; j < 2 * nb; ++j) {
      double val = a1(i) * a1(j) + a2(i) * a2(j);
      if (val != 0.0) t.emplace_back(i, j, val);
    }
  return from_triplets(2 * nb, t);
}

}  // namespace

FlowEnds parse_flow_ends(std::string_view s) {
  if (s == "series") return FlowEnds::series;
  if (s == "both-ends" || s == "both_ends") return FlowEnds::both_ends;
  throw std::invalid_argument("unknown flow-ends mode '" + std::string(s) + "'");
}

Eigen::MatrixXd real_form(const Eigen::MatrixXcd& h) {
  const auto n = h.rows();
  Eigen::MatrixXd r(2 * n, 2 * n);
  r << h.real(), -h.imag(), h.imag(), h.real();
  return r;
}

QuadForms build_quadforms(const Network& net, FlowEnds ends) {
  const int nb = net.num_buses();
  const Eigen::MatrixXcd& y = net.ybus;
  QuadForms q;
  q.nb = nb;
  q.ends = ends;
  for (int n = 0; n < nb; ++n) {
    std::vector<Trip> tp, tq;
    // Hp = (E_n Y + Yᴴ E_n)/2, Hq = (Yᴴ E_n − E_n Y)/(2j)
    for (int k = 0; k < nb; ++k) {
      cplx ynk = y(n, k);
      if (ynk == cplx(0.0)) continue;
      if (k == n) {
        push_hermitian(tp, nb, n, n, cplx(ynk.real(), 0.0));
        push_hermitian(tq, nb, n, n, cplx(-ynk.imag(), 0.0));
        continue;
      }
      push_hermitian(tp, nb, n, k, 0.5 * ynk);
      push_hermitian(tp, nb, k, n, 0.5 * std::conj(ynk));
      // (−E_n Y)/(2j) at (n,k): −ynk/(2j) = j·ynk/2 ; (Yᴴ E_n)/(2j) at (k,n): conj(ynk)/(2j)
      push_hermitian(tq, nb, n, k, cplx(0.0, 0.5) * ynk);
      push_hermitian(tq, nb, k, n, std::conj(ynk) / cplx(0.0, 2.0));
    }
    q.mp.push_back(from_triplets(2 * nb, tp));
    q.mq.push_back(from_triplets(2 * nb, tq));
    q.mv.push_back(from_triplets(2 * nb, {Trip(n, n, 1.0), Trip(nb + n, nb + n, 1.0)}));
  }
  for (int e = 0; e < net.num_branches(); ++e) {
    const auto& br = net.branches[e];
    int f = net.bus_index(br.from), t = net.bus_index(br.to);
    cplx ys = 1.0 / cplx(br.r, br.x);
    cplx tau = std::polar(br.tap, br.shift_deg * std::numbers::pi / 180.0);
    if (ends == FlowEnds::series) {
      q.mi.push_back(current_form(nb, {{f, ys / tau}, {t, -ys}}));
      q.mi_branch.push_back(e);
      q.mi_end.push_back(0);
    } else {
      cplx ytt = ys + cplx(0.0, br.b_charge / 2.0);
      q.mi.push_back(current_form(nb, {{f, ytt / std::norm(tau)}, {t, -ys / std::conj(tau)}}));
      q.mi_branch.push_back(e);
      q.mi_end.push_back(0);
      q.mi.push_back(current_form(nb, {{f, -ys / tau}, {t, ytt}}));
      q.mi_branch.push_back(e);
      q.mi_end.push_back(1);
    }
  }
  int s = net.slack_index();
  q.mref = from_triplets(2 * nb, {Trip(nb + s, nb + s, 1.0)});
  return q;
}

std::vector<ParamEntry> default_params(const Network& net) {
  std::vector<ParamEntry> out;
  for (bool reactive : {false, true})
    for (const auto& b : net.buses)
      if (b.kind == BusKind::load || b.kind == BusKind::zero_injection)
        out.push_back({b.id, reactive});
  return out;
}

std::vector<ParamEntry> parse_params(std::string_view text) {
  std::vector<ParamEntry> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find(',', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string tok(text.substr(pos, end - pos));
    pos = end + 1;
    if (tok.empty()) continue;
    if (tok.size() < 2 || (tok[0] != 'p' && tok[0] != 'q'))
      throw std::invalid_argument("parameter '" + tok + "' must look like p<bus> or q<bus>");
    ParamEntry p;
    p.reactive = tok[0] == 'q';
    std::size_t used = 0;
    p.bus = std::stoi(tok.substr(1), &used);
    if (used != tok.size() - 1) throw std::invalid_argument("invalid parameter '" + tok + "'");
    out.push_back(p);
  }
  return out;
}

std::string param_name(const ParamEntry& p) {
  return (p.reactive ? "q" : "p") + std::to_string(p.bus);
}

std::string_view to_string(EqKind k) {
  switch (k) {
    case EqKind::p_balance: return "p_balance";
    case EqKind::q_balance: return "q_balance";
    case EqKind::reference: return "reference";
  }
  return "?";
}

std::string_view to_string(IneqKind k) {
  switch (k) {
    case IneqKind::pg_upper: return "pg_upper";
    case IneqKind::pg_lower: return "pg_lower";
    case IneqKind::qg_upper: return "qg_upper";
    case IneqKind::qg_lower: return "qg_lower";
    case IneqKind::v_upper: return "v_upper";
    case IneqKind::v_lower: return "v_lower";
    case IneqKind::flow: return "flow";
  }
  return "?";
}

QcqpModel assemble_qcqp(const Network& net, const QuadForms& forms,
                        const std::vector<ParamEntry>& params) {
  const double inf = std::numeric_limits<double>::infinity();
  QcqpModel m;
  m.nb = net.num_buses();
  m.ng = net.num_generators();
  m.slack = net.slack_index();
  m.bus_gen = net.generator_at_bus();
  if (m.bus_gen[m.slack] < 0)
    throw ValidationError("the reference bus " + std::to_string(net.slack_bus) + " hosts no generator");
  for (const auto& g : net.generators) m.gen_bus.push_back(net.bus_index(g.bus));
  m.params = params;
  m.nominal_theta.resize(m.num_params());
  m.flow_ends = forms.ends;

  // parameter column for each (bus position, quantity)
  std::vector<int> pcol(m.nb, -1), qcol(m.nb, -1);
  for (int k = 0; k < m.num_params(); ++k) {
    const auto& p = params[k];
    int i = net.bus_index(p.bus);
    auto& col = p.reactive ? qcol : pcol;
    if (col[i] >= 0) throw std::invalid_argument("parameter " + param_name(p) + " listed twice");
    if (m.bus_gen[i] >= 0)
      throw std::invalid_argument("parameter " + param_name(p) + " sits at a generator bus");
    col[i] = k;
    m.nominal_theta(k) = p.reactive ? net.buses[i].qd : net.buses[i].pd;
  }

  m.a0 = Eigen::VectorXd::Zero(2 * m.ng);
  for (int g = 0; g < m.ng; ++g) {
    m.a0(g) = net.generators[g].cp;
    m.a0(m.ng + g) = net.generators[g].cq;
  }

  for (bool reactive : {false, true}) {
    for (int n = 0; n < m.nb; ++n) {
      EqualityRow row;
      row.L = reactive ? forms.mq[n] : forms.mp[n];
      row.kind = reactive ? EqKind::q_balance : EqKind::p_balance;
      row.element = n;
      int g = m.bus_gen[n];
      if (g >= 0) row.a = {reactive ? m.ng + g : g, 1.0};
      int col = reactive ? qcol[n] : pcol[n];
      double demand = reactive ? net.buses[n].qd : net.buses[n].pd;
      if (col >= 0) row.b = {col, -1.0};
      else row.c = -demand;
      m.eq.push_back(std::move(row));
    }
  }
  {
    EqualityRow ref;
    ref.L = forms.mref;
    ref.kind = EqKind::reference;
    ref.element = m.slack;
    m.eq.push_back(std::move(ref));
  }

  auto finite_or_inf = [inf](double x) { return std::isfinite(x) ? x : inf; };
  // generator limits: lo <= vᵀMv + demand <= hi
  for (bool reactive : {false, true}) {
    for (int side = 0; side < 2; ++side) {
      for (int g = 0; g < m.ng; ++g) {
        const auto& gen = net.generators[g];
        int n = m.gen_bus[g];
        InequalityRow row;
        const SpMat& base = reactive ? forms.mq[n] : forms.mp[n];
        double demand = reactive ? net.buses[n].qd : net.buses[n].pd;
        int col = reactive ? qcol[n] : pcol[n];
        if (side == 0) {
          row.M = base;
          row.kind = reactive ? IneqKind::qg_upper : IneqKind::pg_upper;
          row.f = finite_or_inf(reactive ? gen.qmax : gen.pmax);
          if (col >= 0) row.d = {col, -1.0};
          else row.f -= demand;
        } else {
          row.M = -base;
          row.kind = reactive ? IneqKind::qg_lower : IneqKind::pg_lower;
          double lo = reactive ? gen.qmin : gen.pmin;
          row.f = std::isfinite(lo) ? -lo : inf;
          if (col >= 0) row.d = {col, 1.0};
          else row.f += demand;
        }
        row.element = g;
        m.ineq.push_back(std::move(row));
      }
    }
  }
  for (int side = 0; side < 2; ++side) {
    for (int n = 0; n < m.nb; ++n) {
      InequalityRow row;
      const auto& b = net.buses[n];
      if (side == 0) {
        row.M = forms.mv[n];
        row.f = b.vmax * b.vmax;
        row.kind = IneqKind::v_upper;
      } else {
        row.M = -forms.mv[n];
        row.f = -b.vmin * b.vmin;
        row.kind = IneqKind::v_lower;
      }
      row.element = n;
      m.ineq.push_back(std::move(row));
    }
  }
  for (std::size_t k = 0; k < forms.mi.size(); ++k) {
    InequalityRow row;
    row.M = forms.mi[k];
    const auto& br = net.branches[forms.mi_branch[k]];
    row.f = br.imax ? *br.imax : inf;
    row.kind = IneqKind::flow;
    row.element = static_cast<int>(k);
    row.branch = forms.mi_branch[k];
    row.end = forms.mi_end[k];
    m.ineq.push_back(std::move(row));
  }
  return m;
}

QcqpModel assemble_qcqp(const Network& net, FlowEnds ends) {
  return assemble_qcqp(net, build_quadforms(net, ends), default_params(net));
}

Eigen::MatrixXd QcqpModel::A() const {
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(num_eq(), nx());
  for (int l = 0; l < num_eq(); ++l)
    if (eq[l].a.index >= 0) a(l, eq[l].a.index) = eq[l].a.sign;
  return a;
}

Eigen::MatrixXd QcqpModel::B() const {
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(num_eq(), num_params());
  for (int l = 0; l < num_eq(); ++l)
    if (eq[l].b.index >= 0) b(l, eq[l].b.index) = eq[l].b.sign;
  return b;
}

Eigen::MatrixXd QcqpModel::D() const {
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(num_ineq(), num_params());
  for (int m = 0; m < num_ineq(); ++m)
    if (ineq[m].d.index >= 0) d(m, ineq[m].d.index) = ineq[m].d.sign;
  return d;
}

Eigen::VectorXd QcqpModel::f() const {
  Eigen::VectorXd out(num_ineq());
  for (int m = 0; m < num_ineq(); ++m) out(m) = ineq[m].f;
  return out;
}

std::string QcqpModel::ineq_label(int m) const {
  const auto& r = ineq[m];
  std::string s(to_string(r.kind));
  if (r.kind == IneqKind::flow)
    return s + "[" + std::to_string(r.branch) + (r.end ? ",to" : "") + "]";
  return s + "[" + std::to_string(r.element) + "]";
}

ConstraintValues eval_constraints(const QcqpModel& model, const Eigen::VectorXd& v,
                                  const Eigen::VectorXd& xg, const Eigen::VectorXd& theta) {
  if (v.size() != model.nv() || xg.size() != model.nx() || theta.size() != model.num_params())
    throw std::invalid_argument("eval_constraints: dimension mismatch");
  ConstraintValues out;
  out.h.resize(model.num_eq());
  out.g.resize(model.num_ineq());
  for (int l = 0; l < model.num_eq(); ++l) {
    const auto& r = model.eq[l];
    double val = v.dot(r.L * v) - r.c;
    if (r.a.index >= 0) val -= r.a.sign * xg(r.a.index);
    if (r.b.index >= 0) val -= r.b.sign * theta(r.b.index);
    out.h(l) = val;
  }
  for (int m = 0; m < model.num_ineq(); ++m) {
    const auto& r = model.ineq[m];
    double val = v.dot(r.M * v) - r.f;
    if (r.d.index >= 0) val -= r.d.sign * theta(r.d.index);
    out.g(m) = val;
  }
  return out;
}

Eigen::VectorXd load_injection(const QcqpModel& model, const Eigen::VectorXd& theta) {
  Eigen::VectorXd out(2 * model.nb);
  for (int l = 0; l < 2 * model.nb; ++l) {
    const auto& r = model.eq[l];
    out(l) = r.c + (r.b.index >= 0 ? r.b.sign * theta(r.b.index) : 0.0);
  }
  return out;
}

std::string dump_model(const QcqpModel& model) {
  std::ostringstream os;
  os.precision(17);
  os << "# nb " << model.nb << " ng " << model.ng << " params " << model.num_params() << "\n";
  os << "a0";
  for (int i = 0; i < model.a0.size(); ++i) os << ' ' << model.a0(i);
  os << "\n";
  auto triplets = [&os](const SpMat& m) {
    for (int k = 0; k < m.outerSize(); ++k)
      for (SpMat::InnerIterator it(m, k); it; ++it)
        os << ' ' << it.row() << ',' << it.col() << ',' << it.value();
  };
  for (int l = 0; l < model.num_eq(); ++l) {
    const auto& r = model.eq[l];
    os << "eq " << l << ' ' << to_string(r.kind) << ' ' << r.element << " a " << r.a.index << ' '
       << r.a.sign << " b " << r.b.index << ' ' << r.b.sign << " c " << r.c << " L";
    triplets(r.L);
    os << "\n";
  }
  for (int m = 0; m < model.num_ineq(); ++m) {
    const auto& r = model.ineq[m];
    os << "ineq " << m << ' ' << to_string(r.kind) << ' ' << r.element << " d " << r.d.index << ' '
       << r.d.sign << " f " << r.f << " M";
    triplets(r.M);
    os << "\n";
  }
  return os.str();
}

Eigen::VectorXd flat_voltage(int nb) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(2 * nb);
  v.head(nb).setOnes();
  return v;
}

}  // namespace opfsense
