#include "opfsense/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace opfsense {

using nlohmann::json;

std::vector<Eigen::VectorXd> sample_thetas(const Eigen::VectorXd& nominal, int n, double lo, double hi,
                                           std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_thetas: n must be at least 1");
  if (!(lo <= hi)) throw std::invalid_argument("sample_thetas: empty range");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<Eigen::VectorXd> out;
  out.reserve(n);
  for (int s = 0; s < n; ++s) {
    Eigen::VectorXd t(nominal.size());
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      double r = lo == hi ? lo : u(rng);
      t(i) = nominal(i) * r;
    }
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<Eigen::VectorXd> grid_thetas(const Eigen::VectorXd& base, int i, double lo_i, double hi_i, int n_i,
                                         int j, double lo_j, double hi_j, int n_j) {
  if (n_i < 1 || n_j < 1) throw std::invalid_argument("grid_thetas: empty grid");
  auto at = [](double lo, double hi, int n, int k) { return n == 1 ? lo : lo + (hi - lo) * k / (n - 1); };
  std::vector<Eigen::VectorXd> out;
  for (int a = 0; a < n_i; ++a)
    for (int b = 0; b < n_j; ++b) {
      Eigen::VectorXd t = base;
      t(i) = at(lo_i, hi_i, n_i, a);
      t(j) = at(lo_j, hi_j, n_j, b);
      out.push_back(std::move(t));
    }
  return out;
}

std::vector<int> Dataset::usable_indices() const {
  std::vector<int> idx;
  for (int s = 0; s < static_cast<int>(samples.size()); ++s)
    if (samples[s].usable()) idx.push_back(s);
  return idx;
}

QcqpModel Dataset::model() const { return assemble_qcqp(network, build_quadforms(network, flow_ends), params); }

namespace {

TrainingSample solve_one(const QcqpModel& model, const Eigen::VectorXd& theta, const GenerateOptions& opts,
                         std::uint64_t column_seed) {
  TrainingSample s;
  s.theta = theta;
  OpfSolution sol;
  try {
    sol = solve_opf(model, theta, opts.solver);
  } catch (const std::exception& e) {
    s.status = "error";
    s.error = e.what();
    return s;
  }
  s.status = std::string(to_string(sol.status));
  s.kkt = sol.kkt.max();
  if (sol.status != OpfStatus::optimal) return s;
  s.objective = sol.objective;
  s.y = reduced_output(model, sol.v, sol.xg);

  SensitivityRecord rec;
  try {
    rec = compute_sensitivities(model, sol, theta, opts.sensitivity);
  } catch (const std::exception& e) {
    s.rejected = true;
    s.error = e.what();
    return s;
  }
  s.degenerate = rec.degenerate;
  s.rejected = rec.rejected;
  s.rank_deficient = rec.rank_deficient;
  s.active = rec.rows;
  if (!rec.ok) return s;
  Eigen::MatrixXd j = output_jacobian(model, sol.v, rec.J_full);

  if (opts.spot_check && model.num_params() > 0) {
    std::mt19937_64 rng(column_seed);
    std::uniform_int_distribution<int> pick(0, model.num_params() - 1);
    const int c = pick(rng);
    s.fd_column = c;
    SolverOptions warm = opts.solver;
    warm.warm_start = sol.v;
    Eigen::VectorXd tp = theta, tm = theta;
    tp(c) += opts.fd_eps;
    tm(c) -= opts.fd_eps;
    OpfSolution sp = solve_opf(model, tp, warm), sm = solve_opf(model, tm, warm);
    if (sp.status != OpfStatus::optimal || sm.status != OpfStatus::optimal) {
      s.rejected = true;
      s.error = "spot check: perturbed solve failed";
      return s;
    }
    Eigen::VectorXd fd = (reduced_output(model, sp.v, sp.xg) - reduced_output(model, sm.v, sm.xg)) /
                         (2.0 * opts.fd_eps);
    double scale = std::max({j.col(c).lpNorm<Eigen::Infinity>(), fd.lpNorm<Eigen::Infinity>(), 1e-6});
    s.fd_error = (fd - j.col(c)).lpNorm<Eigen::Infinity>() / scale;
    if (!(s.fd_error < opts.fd_tol)) {
      s.rejected = true;
      s.error = "spot check: finite-difference mismatch";
      return s;
    }
  }
  s.has_jacobian = true;
  s.J = std::move(j);
  return s;
}

std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

/// Non-finite values are written as null.
json number(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }
double number_from(const json& j) { return j.is_null() ? std::nan("") : j.get<double>(); }

Eigen::VectorXd from_vec(const json& j) {
  auto v = j.get<std::vector<double>>();
  return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json options_json(const GenerateOptions& o) {
  return {{"tol_kkt", o.solver.tol_kkt},
          {"ipm_tol", o.solver.ipm_tol},
          {"max_iter", o.solver.max_iter},
          {"polish", o.solver.polish},
          {"tau_mu_rel", o.sensitivity.tau_mu_rel},
          {"tau_g_rel", o.sensitivity.tau_g_rel},
          {"tau_res_rel", o.sensitivity.tau_res_rel},
          {"spot_check", o.spot_check},
          {"fd_eps", o.fd_eps},
          {"fd_tol", o.fd_tol},
          {"seed", o.seed}};
}

json sample_json(int index, const TrainingSample& s) {
  json j;
  j["kind"] = "sample";
  j["index"] = index;
  j["theta"] = to_vec(s.theta);
  j["status"] = s.status;
  if (!s.error.empty()) j["error"] = s.error;
  j["objective"] = number(s.objective);
  j["kkt"] = number(s.kkt);
  j["y"] = to_vec(s.y);
  if (s.has_jacobian) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < s.J.rows(); ++r) rows.push_back(to_vec(s.J.row(r).transpose()));
    j["J"] = rows;
  } else {
    j["J"] = nullptr;
  }
  j["degenerate"] = s.degenerate;
  j["rejected"] = s.rejected;
  j["rank_deficient"] = s.rank_deficient;
  j["fd_column"] = s.fd_column;
  j["fd_error"] = number(s.fd_error);
  j["active"] = s.active;
  return j;
}

TrainingSample sample_from_json(const json& j) {
  TrainingSample s;
  s.theta = from_vec(j.at("theta"));
  s.status = j.at("status").get<std::string>();
  s.error = j.value("error", std::string());
  s.objective = number_from(j.at("objective"));
  s.kkt = number_from(j.at("kkt"));
  s.y = from_vec(j.at("y"));
  if (!j.at("J").is_null()) {
    const auto& rows = j.at("J");
    s.has_jacobian = true;
    s.J.resize(static_cast<Eigen::Index>(rows.size()), s.theta.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      Eigen::VectorXd row = from_vec(rows[r]);
      if (row.size() != s.theta.size()) throw std::runtime_error("dataset: Jacobian row length");
      s.J.row(static_cast<Eigen::Index>(r)) = row.transpose();
    }
  }
  s.degenerate = j.at("degenerate").get<bool>();
  s.rejected = j.at("rejected").get<bool>();
  s.rank_deficient = j.at("rank_deficient").get<bool>();
  s.fd_column = j.at("fd_column").get<int>();
  s.fd_error = number_from(j.at("fd_error"));
  s.active = j.at("active").get<std::vector<int>>();
  return s;
}

}  // namespace

Dataset generate(const Network& net, const QcqpModel& model, const std::vector<Eigen::VectorXd>& thetas,
                 const GenerateOptions& opts) {
  Dataset ds;
  ds.network = net;
  ds.params = model.params;
  ds.flow_ends = model.flow_ends;
  ds.outputs = output_names(model, net);
  ds.options = options_json(opts);
  ds.samples.reserve(thetas.size());
  std::mt19937_64 seeder(opts.seed);
  for (const auto& theta : thetas) {
    std::uint64_t column_seed = seeder();
    if (theta.size() != model.num_params()) {
      TrainingSample s;
      s.theta = theta;
      s.status = "error";
      s.error = "parameter vector has the wrong length";
      ds.samples.push_back(std::move(s));
      continue;
    }
    ds.samples.push_back(solve_one(model, theta, opts, column_seed));
  }
  return ds;
}

void write_dataset(std::ostream& out, const Dataset& ds) {
  json h;
  h["kind"] = "header";
  h["format"] = "opf-sense-dataset";
  h["version"] = 1;
  h["network_hash"] = network_hash(ds.network);
  h["network"] = network_to_json(ds.network);
  std::vector<std::string> names;
  for (const auto& p : ds.params) names.push_back(param_name(p));
  h["params"] = names;
  h["outputs"] = ds.outputs;
  h["flow_ends"] = ds.flow_ends == FlowEnds::series ? "series" : "both_ends";
  h["options"] = ds.options;
  h["count"] = ds.samples.size();
  out << h.dump() << '\n';
  for (std::size_t s = 0; s < ds.samples.size(); ++s)
    out << sample_json(static_cast<int>(s), ds.samples[s]).dump() << '\n';
  if (!out) throw std::runtime_error("dataset: write failed");
}

void write_dataset_file(const std::string& path, const Dataset& ds) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  write_dataset(f, ds);
}

Dataset read_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("dataset: missing header");
  json h = json::parse(line);
  if (h.value("format", "") != "opf-sense-dataset") throw std::runtime_error("dataset: not a dataset file");
  Dataset ds;
  ds.network = network_from_json(h.at("network"));
  if (network_hash(ds.network) != h.at("network_hash").get<std::string>())
    throw std::runtime_error("dataset: network hash mismatch");
  std::string params;
  for (const auto& p : h.at("params")) params += (params.empty() ? "" : ",") + p.get<std::string>();
  ds.params = parse_params(params);
  ds.flow_ends = parse_flow_ends(h.at("flow_ends").get<std::string>());
  ds.outputs = h.at("outputs").get<std::vector<std::string>>();
  ds.options = h.at("options");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    if (j.at("index").get<std::size_t>() != ds.samples.size()) throw std::runtime_error("dataset: samples out of order");
    ds.samples.push_back(sample_from_json(j));
  }
  if (ds.samples.size() != h.at("count").get<std::size_t>()) throw std::runtime_error("dataset: truncated file");
  return ds;
}

Dataset read_dataset_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  return read_dataset(f);
}

std::vector<Split> split(const std::vector<int>& pool, const SplitPlan& plan) {
  std::vector<Split> out;
  std::mt19937_64 rng(plan.seed);
  if (!plan.runs_per_size.empty() && plan.runs_per_size.size() != plan.sizes.size())
    throw std::invalid_argument("split: runs_per_size must match sizes");
  for (std::size_t k = 0; k < plan.sizes.size(); ++k) {
    const int size = plan.sizes[k];
    const int runs = plan.runs_per_size.empty() ? plan.runs : plan.runs_per_size[k];
    if (size < 1 || size >= static_cast<int>(pool.size()))
      throw std::invalid_argument("split: training size must be between 1 and pool size - 1");
    for (int r = 0; r < runs; ++r) {
      std::vector<int> order(pool.size());
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      std::vector<char> chosen(pool.size(), 0);
      for (int k = 0; k < size; ++k) chosen[order[k]] = 1;
      Split s;
      s.size = size;
      s.run = r;
      for (std::size_t k = 0; k < pool.size(); ++k) (chosen[k] ? s.train : s.test).push_back(pool[k]);
      out.push_back(std::move(s));
    }
  }
  return out;
}

void output_box(const Network& net, const QcqpModel& model, Eigen::VectorXd& lo, Eigen::VectorXd& hi) {
  const int ng = model.ng;
  lo.resize(2 * ng - 1);
  hi.resize(2 * ng - 1);
  int ref = model.bus_gen[model.slack], k = 0;
  for (int g = 0; g < ng; ++g) {
    if (g == ref) continue;
    lo(k) = net.generators[g].pmin;
    hi(k++) = net.generators[g].pmax;
  }
  for (int g = 0; g < ng; ++g) {
    const Bus& b = net.buses[model.gen_bus[g]];
    lo(k) = b.vmin;
    hi(k++) = b.vmax;
  }
}

}  // namespace opfsense
