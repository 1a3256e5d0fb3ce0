#include "opfsense/network.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <queue>
#include <sstream>

namespace opfsense {

namespace {

using cplx = std::complex<double>;

struct Table {
  int line = 0;  // line of the opening bracket
  std::vector<std::vector<double>> rows;
  std::vector<int> row_lines;
};

struct RawCase {
  std::optional<double> base_mva;
  std::map<std::string, Table> tables;
};

bool parse_number(std::string_view tok, double& out) {
  if (tok == "Inf" || tok == "inf" || tok == "+Inf") {
    out = std::numeric_limits<double>::infinity();
    return true;
  }
  if (tok == "-Inf" || tok == "-inf") {
    out = -std::numeric_limits<double>::infinity();
    return true;
  }
  if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), out);
  return ec == std::errc() && ptr == tok.data() + tok.size();
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string_view strip_comment(std::string_view s) {
  bool quoted = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\'') quoted = !quoted;
    if (s[i] == '%' && !quoted) return s.substr(0, i);
  }
  return s;
}

RawCase scan(std::string_view text) {
  RawCase raw;
  Table* open = nullptr;
  std::vector<double> row;
  int row_line = 0;

  auto flush_row = [&]() {
    if (!row.empty()) {
      open->rows.push_back(std::move(row));
      open->row_lines.push_back(row_line);
      row.clear();
    }
  };

  // Consumes matrix body text; returns true once the closing bracket is seen.
  auto consume = [&](std::string_view body, int lineno) -> bool {
    std::size_t i = 0;
    while (i < body.size()) {
      char c = body[i];
      if (std::isspace(static_cast<unsigned char>(c)) || c == ',') {
        ++i;
        continue;
      }
      if (c == ';') {
        flush_row();
        ++i;
        continue;
      }
      if (c == ']') {
        flush_row();
        return true;
      }
      std::size_t j = i;
      while (j < body.size() && !std::isspace(static_cast<unsigned char>(body[j])) &&
             body[j] != ',' && body[j] != ';' && body[j] != ']')
        ++j;
      double value = 0.0;
      auto tok = body.substr(i, j - i);
      if (!parse_number(tok, value))
        throw ParseError(lineno, "invalid number '" + std::string(tok) + "'");
      if (row.empty()) row_line = lineno;
      row.push_back(value);
      i = j;
    }
    flush_row();  // a newline ends a row as well
    return false;
  };

  int lineno = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    ++lineno;
    std::string_view line = strip_comment(text.substr(pos, end - pos));
    pos = end + 1;

    if (open) {
      if (consume(line, lineno)) open = nullptr;
      continue;
    }
    line = trim(line);
    if (line.empty() || line.starts_with("function")) continue;
    auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ParseError(lineno, "unexpected statement '" + std::string(line) + "'");
    }
    auto lhs = trim(line.substr(0, eq));
    auto rhs = trim(line.substr(eq + 1));
    auto dot = lhs.find('.');
    std::string name(dot == std::string_view::npos ? lhs : lhs.substr(dot + 1));
    if (!rhs.empty() && rhs.front() == '[') {
      if (raw.tables.count(name)) throw ParseError(lineno, "table '" + name + "' defined twice");
      open = &raw.tables[name];
      open->line = lineno;
      if (consume(rhs.substr(1), lineno)) open = nullptr;
      continue;
    }
    if (name == "baseMVA") {
      auto v = trim(rhs);
      if (!v.empty() && v.back() == ';') v.remove_suffix(1);
      double value = 0.0;
      if (!parse_number(trim(v), value) || !(value > 0.0))
        throw ParseError(lineno, "invalid baseMVA");
      raw.base_mva = value;
    }
  }
  if (open) throw ParseError(open->line, "unterminated matrix");
  return raw;
}

const Table& require_table(const RawCase& raw, const std::string& name, std::size_t min_cols,
                           std::size_t used_cols, std::vector<std::string>& warnings) {
  auto it = raw.tables.find(name);
  if (it == raw.tables.end()) throw ParseError(0, "missing table '" + name + "'");
  const Table& t = it->second;
  std::size_t width = t.rows.empty() ? 0 : t.rows.front().size();
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    if (t.rows[r].size() != width)
      throw ParseError(t.row_lines[r], "row width differs from the first row of '" + name + "'");
  }
  if (!t.rows.empty() && width < min_cols)
    throw ParseError(t.row_lines.front(), "table '" + name + "' needs at least " +
                                              std::to_string(min_cols) + " columns");
  if (width > used_cols)
    warnings.push_back("ignoring " + std::to_string(width - used_cols) + " extra column(s) of '" +
                       name + "'");
  return t;
}

bool is_integer(double x) { return std::isfinite(x) && std::floor(x) == x; }

/// A file value x with x / base == target exactly, so that re-parsing is lossless.
double unscale(double target, double base) {
  if (!std::isfinite(target) || target == 0.0) return target;
  double x = target * base;
  if (x / base == target) return x;
  double up = x, down = x;
  for (int k = 0; k < 8; ++k) {
    up = std::nextafter(up, std::numeric_limits<double>::infinity());
    down = std::nextafter(down, -std::numeric_limits<double>::infinity());
    if (up / base == target) return up;
    if (down / base == target) return down;
  }
  return x;
}

/// A file value c with c * base == target exactly.
double unscale_cost(double target, double base) {
  if (target == 0.0) return 0.0;
  double c = target / base;
  if (c * base == target) return c;
  double up = c, down = c;
  for (int k = 0; k < 8; ++k) {
    up = std::nextafter(up, std::numeric_limits<double>::infinity());
    down = std::nextafter(down, -std::numeric_limits<double>::infinity());
    if (up * base == target) return up;
    if (down * base == target) return down;
  }
  return c;
}

std::string fmt(double x) {
  if (std::isinf(x)) return x > 0 ? "Inf" : "-Inf";
  if (x == 0.0) return "0";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

void apply_flow_limits(Network& net, FlowLimit mode) {
  for (auto& br : net.branches) {
    br.imax.reset();
    if (mode == FlowLimit::off || !br.rate) continue;
    double vmin = net.buses[net.bus_index(br.from)].vmin;
    double i = *br.rate / vmin;
    br.imax = i * i;
  }
}

}  // namespace

ParseError::ParseError(int line, const std::string& what)
    : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what),
      line_(line) {}

int Network::bus_index(int id) const {
  for (int i = 0; i < num_buses(); ++i)
    if (buses[i].id == id) return i;
  throw std::out_of_range("unknown bus id " + std::to_string(id));
}

std::vector<int> Network::generator_at_bus() const {
  std::vector<int> at(buses.size(), -1);
  for (int g = 0; g < num_generators(); ++g) at[bus_index(generators[g].bus)] = g;
  return at;
}

CostMode parse_cost_mode(std::string_view s) {
  if (s == "reject") return CostMode::reject;
  if (s == "linearize-at-midpoint" || s == "linearize_at_midpoint")
    return CostMode::linearize_at_midpoint;
  throw std::invalid_argument("unknown cost mode '" + std::string(s) + "'");
}

GenBusLoads parse_gen_bus_loads(std::string_view s) {
  if (s == "reject") return GenBusLoads::reject;
  if (s == "drop") return GenBusLoads::drop;
  throw std::invalid_argument("unknown generator-bus load mode '" + std::string(s) + "'");
}

FlowLimit parse_flow_limit(std::string_view s) {
  if (s == "current") return FlowLimit::current;
  if (s == "off") return FlowLimit::off;
  throw std::invalid_argument("unknown flow-limit mode '" + std::string(s) + "'");
}

std::string_view to_string(BusKind kind) {
  switch (kind) {
    case BusKind::slack: return "slack";
    case BusKind::generator: return "generator";
    case BusKind::load: return "load";
    case BusKind::zero_injection: return "zero-injection";
  }
  return "?";
}

Network parse_case(std::string_view text, const ParseOptions& options) {
  RawCase raw = scan(text);
  Network net;
  if (!raw.base_mva) throw ParseError(0, "missing baseMVA");
  net.base_mva = *raw.base_mva;
  const double base = net.base_mva;

  const Table& bus = require_table(raw, "bus", 13, 13, net.warnings);
  const Table& gen = require_table(raw, "gen", 10, 10, net.warnings);
  const Table& branch = require_table(raw, "branch", 11, 13, net.warnings);
  const Table& cost = require_table(raw, "gencost", 4, std::numeric_limits<std::size_t>::max(),
                                    net.warnings);

  std::vector<int> slack_rows;
  for (std::size_t r = 0; r < bus.rows.size(); ++r) {
    const auto& row = bus.rows[r];
    int line = bus.row_lines[r];
    if (!is_integer(row[0]) || !is_integer(row[1])) throw ParseError(line, "bus id and type must be integers");
    Bus b;
    b.id = static_cast<int>(row[0]);
    int type = static_cast<int>(row[1]);
    if (type < 1 || type > 3) throw ParseError(line, "unsupported bus type " + std::to_string(type));
    if (type == 3) slack_rows.push_back(line);
    b.kind = type == 3 ? BusKind::slack : BusKind::load;
    b.pd = row[2] / base;
    b.qd = row[3] / base;
    b.gsh = row[4] / base;
    b.bsh = row[5] / base;
    b.vm0 = row[7];
    b.va0_deg = row[8];
    b.vmax = row[11];
    b.vmin = row[12];
    for (const auto& other : net.buses)
      if (other.id == b.id) throw ParseError(line, "duplicate bus id " + std::to_string(b.id));
    net.buses.push_back(b);
    if (type == 3) net.slack_bus = b.id;
  }
  if (slack_rows.size() != 1)
    throw ValidationError("expected exactly one slack bus, found " + std::to_string(slack_rows.size()));

  std::vector<std::size_t> gen_rows;
  for (std::size_t r = 0; r < gen.rows.size(); ++r) {
    const auto& row = gen.rows[r];
    int line = gen.row_lines[r];
    if (!is_integer(row[0])) throw ParseError(line, "generator bus must be an integer");
    if (row[7] <= 0.0) {
      net.warnings.push_back("skipping out-of-service generator at bus " + fmt(row[0]));
      continue;
    }
    Generator g;
    g.bus = static_cast<int>(row[0]);
    g.pg0 = row[1] / base;
    g.qg0 = row[2] / base;
    g.qmax = row[3] / base;
    g.qmin = row[4] / base;
    g.vg0 = row[5];
    g.pmax = row[8] / base;
    g.pmin = row[9] / base;
    try {
      net.bus_index(g.bus);
    } catch (const std::out_of_range&) {
      throw ParseError(line, "generator at unknown bus " + std::to_string(g.bus));
    }
    net.generators.push_back(g);
    gen_rows.push_back(r);
  }

  // Cost rows: one per generator row, optionally followed by reactive rows.
  const std::size_t ngen_rows = gen.rows.size();
  if (cost.rows.size() != ngen_rows && cost.rows.size() != 2 * ngen_rows)
    throw ParseError(cost.line, "gencost needs one row per generator (or two)");
  auto linear_cost = [&](std::size_t r, double pmin, double pmax) -> double {
    const auto& row = cost.rows[r];
    int line = cost.row_lines[r];
    if (row[0] != 2.0) throw ParseError(line, "only polynomial cost (model 2) is supported");
    if (!is_integer(row[3]) || row[3] < 0) throw ParseError(line, "invalid coefficient count");
    std::size_t n = static_cast<std::size_t>(row[3]);
    if (row.size() < 4 + n) throw ParseError(line, "missing cost coefficients");
    if (row.size() > 4 + n)
      net.warnings.push_back("ignoring trailing gencost entries on line " + std::to_string(line));
    // coefficients from highest order down to the constant
    std::vector<double> c(row.begin() + 4, row.begin() + 4 + static_cast<long>(n));
    if (options.uniform_cost) return 0.0;
    double slope = 0.0;
    for (std::size_t k = 0; k + 2 < n; ++k) {
      std::size_t order = n - 1 - k;
      if (c[k] == 0.0) continue;
      if (options.cost_mode == CostMode::reject)
        throw ParseError(line, "non-linear generation cost (use cost mode linearize-at-midpoint)");
      double mid = 0.5 * (pmin + pmax) * base;
      slope += static_cast<double>(order) * c[k] * std::pow(mid, static_cast<double>(order - 1));
    }
    if (n >= 2) slope += c[n - 2];
    return slope * base;
  };
  for (std::size_t k = 0; k < net.generators.size(); ++k) {
    auto& g = net.generators[k];
    g.cp = options.uniform_cost ? *options.uniform_cost : linear_cost(gen_rows[k], g.pmin, g.pmax);
    if (cost.rows.size() == 2 * ngen_rows && !options.uniform_cost)
      g.cq = linear_cost(ngen_rows + gen_rows[k], g.qmin, g.qmax);
  }

  for (std::size_t r = 0; r < branch.rows.size(); ++r) {
    const auto& row = branch.rows[r];
    int line = branch.row_lines[r];
    if (!is_integer(row[0]) || !is_integer(row[1])) throw ParseError(line, "branch ends must be integers");
    if (row[10] <= 0.0) {
      net.warnings.push_back("skipping out-of-service branch " + fmt(row[0]) + "-" + fmt(row[1]));
      continue;
    }
    Branch br;
    br.from = static_cast<int>(row[0]);
    br.to = static_cast<int>(row[1]);
    br.r = row[2];
    br.x = row[3];
    br.b_charge = row[4];
    if (row[5] > 0.0 && std::isfinite(row[5])) br.rate = row[5] / base;
    br.tap = row[8] == 0.0 ? 1.0 : row[8];
    br.shift_deg = row[9];
    try {
      net.bus_index(br.from);
      net.bus_index(br.to);
    } catch (const std::out_of_range&) {
      throw ParseError(line, "branch references an unknown bus");
    }
    net.branches.push_back(br);
  }

  // Loads at generator buses.
  for (const auto& g : net.generators) {
    auto& b = net.buses[net.bus_index(g.bus)];
    if (b.pd == 0.0 && b.qd == 0.0) continue;
    if (options.gen_bus_loads == GenBusLoads::reject)
      throw ValidationError("bus " + std::to_string(b.id) + " hosts both a generator and a load");
    net.warnings.push_back("dropping load at generator bus " + std::to_string(b.id));
    b.pd = 0.0;
    b.qd = 0.0;
  }

  validate(net);
  apply_flow_limits(net, options.flow_limit);
  net.ybus = build_ybus(net);
  return net;
}

Network load_case_file(const std::string& path, const ParseOptions& options) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open case file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_case(ss.str(), options);
}

void validate(Network& net) {
  int slacks = 0;
  for (const auto& b : net.buses) {
    if (b.kind == BusKind::slack) ++slacks;
    if (!(b.vmin < b.vmax))
      throw ValidationError("bus " + std::to_string(b.id) + ": vmin must be below vmax");
    if (!(b.vmin > 0.0)) throw ValidationError("bus " + std::to_string(b.id) + ": vmin must be positive");
  }
  if (slacks != 1) throw ValidationError("expected exactly one slack bus, found " + std::to_string(slacks));

  std::vector<int> count(net.buses.size(), 0);
  for (const auto& g : net.generators) {
    int i = net.bus_index(g.bus);
    if (++count[i] > 1)
      throw ValidationError("bus " + std::to_string(g.bus) + " hosts more than one generator");
    if (!(g.pmin <= g.pmax) || !(g.qmin <= g.qmax))
      throw ValidationError("generator at bus " + std::to_string(g.bus) + " has inverted limits");
  }
  for (std::size_t i = 0; i < net.buses.size(); ++i) {
    auto& b = net.buses[i];
    if (b.kind == BusKind::slack) continue;
    if (count[i]) b.kind = BusKind::generator;
    else b.kind = (b.pd == 0.0 && b.qd == 0.0) ? BusKind::zero_injection : BusKind::load;
  }

  for (const auto& br : net.branches) {
    if (br.from == br.to) throw ValidationError("branch from bus " + std::to_string(br.from) + " to itself");
    if (br.r == 0.0 && br.x == 0.0)
      throw ValidationError("branch " + std::to_string(br.from) + "-" + std::to_string(br.to) +
                            " has zero impedance");
    if (br.imax && !(*br.imax > 0.0)) throw ValidationError("current limit must be positive");
    if (!(br.tap > 0.0)) throw ValidationError("tap ratio must be positive");
  }

  // connectivity
  const int n = net.num_buses();
  std::vector<std::vector<int>> adj(n);
  for (const auto& br : net.branches) {
    int f = net.bus_index(br.from), t = net.bus_index(br.to);
    adj[f].push_back(t);
    adj[t].push_back(f);
  }
  std::vector<bool> seen(n, false);
  std::queue<int> q;
  q.push(0);
  seen[0] = true;
  int reached = 1;
  while (!q.empty()) {
    int u = q.front();
    q.pop();
    for (int w : adj[u])
      if (!seen[w]) {
        seen[w] = true;
        ++reached;
        q.push(w);
      }
  }
  if (reached != n) throw ValidationError("network is disconnected");
}

Eigen::MatrixXcd build_ybus(const Network& net) {
  const int n = net.num_buses();
  Eigen::MatrixXcd y = Eigen::MatrixXcd::Zero(n, n);
  for (const auto& br : net.branches) {
    int f = net.bus_index(br.from), t = net.bus_index(br.to);
    cplx ys = 1.0 / cplx(br.r, br.x);
    cplx tau = std::polar(br.tap, br.shift_deg * std::numbers::pi / 180.0);
    cplx ytt = ys + cplx(0.0, br.b_charge / 2.0);
    y(f, f) += ytt / std::norm(tau);
    y(t, t) += ytt;
    y(f, t) += -ys / std::conj(tau);
    y(t, f) += -ys / tau;
  }
  for (int i = 0; i < n; ++i) y(i, i) += cplx(net.buses[i].gsh, net.buses[i].bsh);
  return y;
}

std::string serialize_case(const Network& net) {
  const double base = net.base_mva;
  std::ostringstream os;
  os << "function mpc = serialized_case\n\nmpc.version = '2';\nmpc.baseMVA = " << fmt(base) << ";\n\n";
  os << "% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin\nmpc.bus = [\n";
  for (const auto& b : net.buses) {
    int type = b.kind == BusKind::slack ? 3 : b.kind == BusKind::generator ? 2 : 1;
    os << '\t' << b.id << '\t' << type << '\t' << fmt(unscale(b.pd, base)) << '\t'
       << fmt(unscale(b.qd, base)) << '\t' << fmt(unscale(b.gsh, base)) << '\t'
       << fmt(unscale(b.bsh, base)) << "\t1\t" << fmt(b.vm0) << '\t' << fmt(b.va0_deg) << "\t0\t1\t"
       << fmt(b.vmax) << '\t' << fmt(b.vmin) << ";\n";
  }
  os << "];\n\n% bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin\nmpc.gen = [\n";
  for (const auto& g : net.generators) {
    os << '\t' << g.bus << '\t' << fmt(unscale(g.pg0, base)) << '\t' << fmt(unscale(g.qg0, base))
       << '\t' << fmt(unscale(g.qmax, base)) << '\t' << fmt(unscale(g.qmin, base)) << '\t'
       << fmt(g.vg0) << '\t' << fmt(base) << "\t1\t" << fmt(unscale(g.pmax, base)) << '\t'
       << fmt(unscale(g.pmin, base)) << ";\n";
  }
  os << "];\n\n% fbus tbus r x b rateA rateB rateC ratio angle status angmin angmax\nmpc.branch = [\n";
  for (const auto& br : net.branches) {
    std::string rate = br.rate ? fmt(unscale(*br.rate, base)) : "0";
    os << '\t' << br.from << '\t' << br.to << '\t' << fmt(br.r) << '\t' << fmt(br.x) << '\t'
       << fmt(br.b_charge) << '\t' << rate << '\t' << rate << '\t' << rate << '\t' << fmt(br.tap)
       << '\t' << fmt(br.shift_deg) << "\t1\t-360\t360;\n";
  }
  os << "];\n\n% 2 startup shutdown n c1 c0\nmpc.gencost = [\n";
  for (const auto& g : net.generators) os << "\t2\t0\t0\t2\t" << fmt(unscale_cost(g.cp, base)) << "\t0;\n";
  bool reactive = false;
  for (const auto& g : net.generators) reactive = reactive || g.cq != 0.0;
  if (reactive)
    for (const auto& g : net.generators) os << "\t2\t0\t0\t2\t" << fmt(unscale_cost(g.cq, base)) << "\t0;\n";
  os << "];\n";
  return os.str();
}

nlohmann::json network_to_json(const Network& net) {
  using nlohmann::json;
  auto num = [](double x) -> json {
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    return x;
  };
  json j;
  j["baseMVA"] = net.base_mva;
  j["slack_bus"] = net.slack_bus;
  j["buses"] = json::array();
  for (const auto& b : net.buses) {
    j["buses"].push_back({{"id", b.id}, {"kind", std::string(to_string(b.kind))}, {"pd", b.pd},
                          {"qd", b.qd}, {"vmin", b.vmin}, {"vmax", b.vmax}, {"gsh", b.gsh},
                          {"bsh", b.bsh}, {"vm0", b.vm0}, {"va0_deg", b.va0_deg}});
  }
  j["branches"] = json::array();
  for (const auto& br : net.branches) {
    json rec = {{"from", br.from}, {"to", br.to}, {"r", br.r}, {"x", br.x}, {"b_charge", br.b_charge},
                {"tap", br.tap}, {"shift_deg", br.shift_deg}};
    rec["rate"] = br.rate ? json(*br.rate) : json(nullptr);
    rec["imax"] = br.imax ? json(*br.imax) : json(nullptr);
    j["branches"].push_back(rec);
  }
  j["generators"] = json::array();
  for (const auto& g : net.generators) {
    j["generators"].push_back({{"bus", g.bus}, {"pmin", num(g.pmin)}, {"pmax", num(g.pmax)},
                               {"qmin", num(g.qmin)}, {"qmax", num(g.qmax)}, {"cp", g.cp},
                               {"cq", g.cq}, {"pg0", g.pg0}, {"qg0", g.qg0}, {"vg0", g.vg0}});
  }
  return j;
}

Network network_from_json(const nlohmann::json& j) {
  auto num = [](const nlohmann::json& v) -> double {
    if (v.is_string()) {
      auto s = v.get<std::string>();
      if (s == "inf") return std::numeric_limits<double>::infinity();
      if (s == "-inf") return -std::numeric_limits<double>::infinity();
      throw std::invalid_argument("invalid number '" + s + "'");
    }
    return v.get<double>();
  };
  auto kind_of = [](const std::string& s) {
    if (s == "slack") return BusKind::slack;
    if (s == "generator") return BusKind::generator;
    if (s == "load") return BusKind::load;
    if (s == "zero-injection") return BusKind::zero_injection;
    throw std::invalid_argument("unknown bus kind '" + s + "'");
  };
  Network net;
  net.base_mva = j.at("baseMVA").get<double>();
  net.slack_bus = j.at("slack_bus").get<int>();
  for (const auto& b : j.at("buses")) {
    Bus bus;
    bus.id = b.at("id").get<int>();
    bus.kind = kind_of(b.at("kind").get<std::string>());
    bus.pd = b.at("pd").get<double>();
    bus.qd = b.at("qd").get<double>();
    bus.vmin = b.at("vmin").get<double>();
    bus.vmax = b.at("vmax").get<double>();
    bus.gsh = b.at("gsh").get<double>();
    bus.bsh = b.at("bsh").get<double>();
    bus.vm0 = b.value("vm0", 1.0);
    bus.va0_deg = b.value("va0_deg", 0.0);
    net.buses.push_back(bus);
  }
  for (const auto& b : j.at("branches")) {
    Branch br;
    br.from = b.at("from").get<int>();
    br.to = b.at("to").get<int>();
    br.r = b.at("r").get<double>();
    br.x = b.at("x").get<double>();
    br.b_charge = b.at("b_charge").get<double>();
    br.tap = b.at("tap").get<double>();
    br.shift_deg = b.at("shift_deg").get<double>();
    if (b.contains("rate") && !b["rate"].is_null()) br.rate = b["rate"].get<double>();
    if (b.contains("imax") && !b["imax"].is_null()) br.imax = b["imax"].get<double>();
    net.branches.push_back(br);
  }
  for (const auto& g : j.at("generators")) {
    Generator gen;
    gen.bus = g.at("bus").get<int>();
    gen.pmin = num(g.at("pmin"));
    gen.pmax = num(g.at("pmax"));
    gen.qmin = num(g.at("qmin"));
    gen.qmax = num(g.at("qmax"));
    gen.cp = g.at("cp").get<double>();
    gen.cq = g.at("cq").get<double>();
    gen.pg0 = g.value("pg0", 0.0);
    gen.qg0 = g.value("qg0", 0.0);
    gen.vg0 = g.value("vg0", 1.0);
    net.generators.push_back(gen);
  }
  validate(net);
  net.ybus = build_ybus(net);
  return net;
}

std::string network_hash(const Network& net) {
  std::string dump = network_to_json(net).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

bool networks_equal(const Network& a, const Network& b, double rel_tol) {
  auto close = [rel_tol](double x, double y) {
    if (x == y) return true;
    if (std::isnan(x) || std::isnan(y) || std::isinf(x) || std::isinf(y)) return false;
    return std::abs(x - y) <= rel_tol * std::max(std::abs(x), std::abs(y));
  };
  auto close_opt = [&](const std::optional<double>& x, const std::optional<double>& y) {
    if (x.has_value() != y.has_value()) return false;
    return !x || close(*x, *y);
  };
  if (a.slack_bus != b.slack_bus || a.buses.size() != b.buses.size() ||
      a.branches.size() != b.branches.size() || a.generators.size() != b.generators.size())
    return false;
  for (std::size_t i = 0; i < a.buses.size(); ++i) {
    const auto &x = a.buses[i], &y = b.buses[i];
    if (x.id != y.id || x.kind != y.kind || !close(x.pd, y.pd) || !close(x.qd, y.qd) ||
        !close(x.vmin, y.vmin) || !close(x.vmax, y.vmax) || !close(x.gsh, y.gsh) || !close(x.bsh, y.bsh))
      return false;
  }
  for (std::size_t i = 0; i < a.branches.size(); ++i) {
    const auto &x = a.branches[i], &y = b.branches[i];
    if (x.from != y.from || x.to != y.to || !close(x.r, y.r) || !close(x.x, y.x) ||
        !close(x.b_charge, y.b_charge) || !close(x.tap, y.tap) || !close(x.shift_deg, y.shift_deg) ||
        !close_opt(x.rate, y.rate) || !close_opt(x.imax, y.imax))
      return false;
  }
  for (std::size_t i = 0; i < a.generators.size(); ++i) {
    const auto &x = a.generators[i], &y = b.generators[i];
    if (x.bus != y.bus || !close(x.pmin, y.pmin) || !close(x.pmax, y.pmax) || !close(x.qmin, y.qmin) ||
        !close(x.qmax, y.qmax) || !close(x.cp, y.cp) || !close(x.cq, y.cq))
      return false;
  }
  return true;
}

}  // namespace opfsense
