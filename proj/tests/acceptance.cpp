// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero
// when any criterion fails. Pass criterion numbers as arguments to run a subset.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "mlp_check.hpp"
#include "opfsense/experiment.hpp"
#include "support.hpp"

using namespace testing;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// shared fixtures

struct Case39Pool {
  Network net;
  Dataset ds;
};

const Case39Pool& case39_pool() {
  static const Case39Pool pool = [] {
    Case39Pool p;
    p.net = case39();
    QcqpModel m = assemble_qcqp(p.net);
    GenerateOptions go;
    go.seed = 1;
    p.ds = generate(p.net, m, sample_thetas(m.nominal_theta, 200, 0.8, 1.2, 1), go);
    return p;
  }();
  return pool;
}

const Dataset& toy_grid() {
  static const Dataset ds = [] {
    Network net = toy();
    QcqpModel m = toy_model(net);
    GenerateOptions go;
    go.seed = 1;
    return generate(net, m, grid_thetas(m.nominal_theta, 0, 1.5, 3.75, 39, 1, 0.4, 6.0, 39), go);
  }();
  return ds;
}

const std::vector<RunResult>& case39_runs() {
  static const std::vector<RunResult> res = [] {
    ExperimentConfig cfg;
    cfg.train.epochs = 2000;
    cfg.plan.sizes = {10};
    cfg.plan.runs = 5;
    cfg.plan.seed = 1;
    return run_experiment(case39_pool().ds, cfg);
  }();
  return res;
}

/// Pairs (P-DNN, SI-DNN) of each split, in run order.
std::vector<std::pair<const RunResult*, const RunResult*>> paired(const std::vector<RunResult>& res) {
  std::vector<std::pair<const RunResult*, const RunResult*>> out;
  for (std::size_t i = 0; i + 1 < res.size(); i += 2) out.emplace_back(&res[i], &res[i + 1]);
  return out;
}

// ---------------------------------------------------------------------------
// 1: sensitivities against finite differences

struct FdTally {
  int instances = 0, draws = 0, skipped = 0;
  double worst = 0.0;
};

/// Counts an instance when it is optimal, non-degenerate and its active set is unchanged at every
/// perturbed point, so that the solution map is differentiable across the stencil.
FdTally fd_sweep(const QcqpModel& model, const std::function<Eigen::VectorXd(std::mt19937_64&)>& draw,
                 int wanted, int max_draws, std::uint64_t seed) {
  FdTally t;
  std::mt19937_64 rng(seed);
  SolverOptions so;
  so.tol_kkt = 1e-10;
  const double eps = 1e-5;
  while (t.instances < wanted && t.draws < max_draws) {
    ++t.draws;
    Eigen::VectorXd th = draw(rng);
    OpfSolution sol = solve_opf(model, th, so);
    if (sol.status != OpfStatus::optimal) continue;
    SensitivityRecord rec = compute_sensitivities(model, sol, th);
    if (!rec.ok) {
      ++t.skipped;
      continue;
    }
    std::vector<int> act = active_rows(model, sol, th);
    SolverOptions warm = so;
    warm.warm_start = sol.v;
    Eigen::MatrixXd fd(model.nv() + model.nx(), model.num_params());
    bool stable = true;
    for (int p = 0; p < model.num_params() && stable; ++p) {
      Eigen::VectorXd tp = th, tm = th;
      tp(p) += eps;
      tm(p) -= eps;
      OpfSolution a = solve_opf(model, tp, warm), b = solve_opf(model, tm, warm);
      stable = a.status == OpfStatus::optimal && b.status == OpfStatus::optimal &&
               active_rows(model, a, tp) == act && active_rows(model, b, tm) == act;
      if (stable) fd.col(p) = (stack(a.v, a.xg) - stack(b.v, b.xg)) / (2 * eps);
    }
    if (!stable) {
      ++t.skipped;
      continue;
    }
    ++t.instances;
    t.worst = std::max(t.worst, fd_mismatch(rec.J_full, fd));
  }
  return t;
}

Verdict criterion1() {
  Network c3 = twogen(), t5 = toy(), c39 = case39();
  QcqpModel m3 = assemble_qcqp(c3), m5 = toy_model(t5), m39 = assemble_qcqp(c39);
  auto scaled = [](const Eigen::VectorXd& nominal) {
    return [nominal](std::mt19937_64& rng) {
      std::uniform_real_distribution<double> u(0.8, 1.2);
      Eigen::VectorXd th = nominal;
      for (int i = 0; i < th.size(); ++i) th(i) *= u(rng);
      return th;
    };
  };
  auto box = [](std::mt19937_64& rng) {
    std::uniform_real_distribution<double> p2(1.5, 3.75), p4(0.4, 6.0);
    Eigen::VectorXd th(2);
    th << p2(rng), p4(rng);
    return th;
  };
  FdTally a = fd_sweep(m3, scaled(m3.nominal_theta), 50, 400, 31);
  FdTally b = fd_sweep(m5, box, 50, 1000, 32);
  FdTally c = fd_sweep(m39, scaled(m39.nominal_theta), 50, 200, 33);
  bool pass = a.instances >= 50 && b.instances >= 50 && c.instances >= 50 && a.worst <= 1.0 && b.worst <= 1.0 &&
              c.worst <= 1.0;
  return {pass, fmt("3-bus %d inst (worst %.3g), 5-bus %d (worst %.3g), 39-bus %d (worst %.3g); "
                    "worst = max |J-FD| / max(1e-4|FD|, 1e-6), must be <= 1; skipped %d/%d/%d",
                    a.instances, a.worst, b.instances, b.worst, c.instances, c.worst, a.skipped, b.skipped,
                    c.skipped)};
}

// ---------------------------------------------------------------------------
// 2: singular systems on radial feeders

Verdict criterion2() {
  int count = 0, good = 0;
  double worst_ratio = 0.0, worst_null = 0.0, worst_fd = 0.0;
  for (int scenario = 0; scenario < 3; ++scenario) {
    for (double shape : {0.0, 1.0}) {
      RadialCase rc = radial_case(scenario, shape);
      SolverOptions so;
      so.tol_kkt = 1e-10;
      Eigen::VectorXd th = rc.model.nominal_theta;
      OpfSolution sol = solve_opf(rc.model, th, so);
      ++count;
      if (sol.status != OpfStatus::optimal) continue;
      SensitivityRecord rec = compute_sensitivities(rc.model, sol, th);
      if (!rec.ok || rec.null_basis.cols() == 0) continue;
      const int np = rc.model.nv() + rc.model.nx();
      double ratio = rec.sigma_min / rec.sigma_max;
      double null_block = rec.null_basis.topRows(np).cwiseAbs().maxCoeff();
      Eigen::MatrixXd fd;
      if (!fd_primal(rc.model, th, sol, 1e-5, 1e-10, fd)) continue;
      double mismatch = fd_mismatch(rec.J_full, fd);
      worst_ratio = std::max(worst_ratio, ratio);
      worst_null = std::max(worst_null, null_block);
      worst_fd = std::max(worst_fd, mismatch);
      if (ratio < 1e-10 && null_block < 1e-8 && mismatch <= 1.0) ++good;
    }
  }
  return {good == count && count >= 5,
          fmt("%d/%d instances; max sigma_min/sigma_max %.2g, max null-space primal entry %.2g, FD mismatch %.3g",
              good, count, worst_ratio, worst_null, worst_fd)};
}

// ---------------------------------------------------------------------------
// 3: label validity and enumeration on the two-generator case

Verdict criterion3() {
  double worst = 0.0;
  int labels = 0;
  for (const Dataset* ds : {&case39_pool().ds, &toy_grid()}) {
    for (int i : ds->usable_indices()) {
      worst = std::max(worst, ds->samples[i].kkt);
      ++labels;
    }
  }
  Network net = twogen();
  QcqpModel m = assemble_qcqp(net);
  SolverOptions so;
  so.tol_kkt = 1e-10;
  OpfSolution sol = solve_opf(m, m.nominal_theta, so);
  Eigen::VectorXd caps(2);
  caps << net.buses[0].vmax, net.buses[1].vmax;
  Enumerated e = enumerate_dispatch(net, m, m.nominal_theta, 1e-4, caps);
  // Lower generator voltages never beat the caps at the enumerated dispatch.
  double best_other = std::numeric_limits<double>::infinity();
  for (double v1 = net.buses[0].vmin; v1 <= net.buses[0].vmax + 1e-12; v1 += 0.01)
    for (double v2 = net.buses[1].vmin; v2 <= net.buses[1].vmax + 1e-12; v2 += 0.01) {
      Eigen::VectorXd vm(2);
      vm << v1, v2;
      Eigen::VectorXd pred(3);
      pred << e.dispatch, vm;
      RecoveredState st = state_from_prediction(net, m, m.nominal_theta, pred);
      if (!st.pf.converged || eval_constraints(m, st.v, st.xg, m.nominal_theta).g.maxCoeff() > 1e-9) continue;
      best_other = std::min(best_other, m.a0.dot(st.xg));
    }
  double gap = std::abs(e.cost - sol.objective);
  bool pass = worst < 1e-8 && labels > 0 && sol.status == OpfStatus::optimal && gap < 1e-3 &&
              best_other >= e.cost - 1e-9;
  return {pass, fmt("%d labels, max KKT residual %.2g; enumeration %.6f $ vs solver %.6f $ (gap %.2g, "
                    "%d feasible grid points, best off-cap voltage pair %.6f $)",
                    labels, worst, e.cost, sol.objective, gap, e.feasible, best_other)};
}

// ---------------------------------------------------------------------------
// 4: network derivatives

Verdict criterion4() {
  double jac = 0.0, grad = 0.0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    for (const std::vector<int>& dims : {std::vector<int>{4, 2, 3}, std::vector<int>{10, 8, 8, 5}}) {
      MlpProblem p = random_mlp_problem(dims, 1000 + seed);
      jac = std::max(jac, input_jacobian_error(p));
      grad = std::max(grad, weight_gradient_error(p, 0.7));
    }
  }
  return {jac < 1e-5 && grad < 1e-5,
          fmt("200 networks (4-2-3 and 10-8-8-5, 100 seeds); max relative error: input Jacobian %.2g, "
              "loss gradient %.2g",
              jac, grad)};
}

// ---------------------------------------------------------------------------
// 5 and 6: 39-bus sample efficiency and violations

Verdict criterion5() {
  const auto& res = case39_runs();
  double p = 0.0, s = 0.0, tp = 0.0, ts = 0.0;
  int n = 0;
  std::string errors;
  for (auto [a, b] : paired(res)) {
    if (!a->error.empty() || !b->error.empty()) errors += a->error + b->error;
    p += a->test_mse;
    s += b->test_mse;
    tp += a->train_seconds;
    ts += b->train_seconds;
    ++n;
  }
  p /= n;
  s /= n;
  return {errors.empty() && n >= 5 && s <= 0.6 * p,
          fmt("pool %d usable of 200, size 10, %d runs, 2000 epochs: mean test MSE P-DNN %.3g, SI-DNN %.3g "
              "(ratio %.3f, limit 0.6); training %.0f s / %.0f s",
              static_cast<int>(case39_pool().ds.usable_indices().size()), n, p, s, s / p, tp, ts)};
}

Verdict criterion6() {
  const auto& res = case39_runs();
  int ok = 0, n = 0;
  std::string per_run;
  for (auto [a, b] : paired(res)) {
    bool mean_ok = b->violations.mean_violation <= a->violations.mean_violation;
    bool max_ok = b->violations.max_violation <= a->violations.max_violation;
    ok += mean_ok && max_ok;
    ++n;
    per_run += fmt(" [mean %.2g/%.2g max %.2g/%.2g]", a->violations.mean_violation, b->violations.mean_violation,
                   a->violations.max_violation, b->violations.max_violation);
  }
  return {ok >= 4, fmt("SI-DNN at or below P-DNN on both mean and max violation in %d of %d runs "
                       "(P/SI per run):%s",
                       ok, n, per_run.c_str())};
}

// ---------------------------------------------------------------------------
// 7: the 5-bus sweep

Verdict criterion7() {
  const Dataset& ds = toy_grid();
  ExperimentConfig cfg;
  cfg.hidden = {16, 16};
  cfg.train.epochs = 5000;
  cfg.plan.sizes = {37};
  cfg.plan.runs = 5;
  cfg.plan.seed = 1;
  cfg.violations = false;
  auto res = run_experiment(ds, cfg);
  const auto outputs = ds.outputs;
  int idx = static_cast<int>(std::find(outputs.begin(), outputs.end(), "pg5") - outputs.begin());
  int wins = 0, n = 0;
  std::string per_run;
  for (auto [a, b] : paired(res)) {
    double pm = a->test_mse_per_output(idx), sm = b->test_mse_per_output(idx);
    wins += sm < pm;
    ++n;
    per_run += fmt(" %.2g/%.2g", pm, sm);
  }
  return {idx < static_cast<int>(outputs.size()) && wins >= 4,
          fmt("%d feasible grid points, 37 training, 2x16: SI-DNN below P-DNN on pg5 test MSE in %d of %d seeds "
              "(P/SI):%s",
              static_cast<int>(ds.usable_indices().size()), wins, n, per_run.c_str())};
}

// ---------------------------------------------------------------------------
// 8: CLI pipeline determinism

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

int run(const std::string& cmd) { return std::system((cmd + " > /dev/null 2>&1").c_str()); }

Verdict criterion8() {
  namespace fs = std::filesystem;
  fs::path root = fs::temp_directory_path() / "opfsense_acceptance_pipeline";
  fs::remove_all(root);
  const std::string cli = OPFSENSE_CLI;
  const std::string toy_case = data_file("case5_toy.m");
  int failures = 0;
  for (const char* name : {"a", "b"}) {
    fs::path dir = root / name;
    fs::create_directories(dir);
    std::string ds = (dir / "toy.jsonl").string();
    failures += run(cli + " dataset generate --case " + toy_case + " --params p2,p4 --grid p2:1.5:3.75:12,p4:0.4:6.0:12" +
                    " --seed 7 --out " + ds) != 0;
    failures += run(cli + " train --data " + ds + " --size 10 --seed 3 --epochs 200 --hidden 16,16 --out " +
                    (dir / "model.json").string()) != 0;
    failures += run(cli + " report --data " + ds + " --sizes 5,10 --runs 2 --epochs-per-size 150,150 --seed 5 --out " +
                    (dir / "report").string()) != 0;
  }
  int compared = 0, identical = 0;
  std::string differing;
  for (const char* f : {"toy.jsonl", "model.json", "report/runs.csv", "report/summary.csv",
                        "report/loss_curves.csv"}) {
    std::string x = slurp(root / "a" / f), y = slurp(root / "b" / f);
    ++compared;
    if (!x.empty() && x == y) ++identical;
    else differing += std::string(" ") + f;
  }
  fs::remove_all(root);
  return {failures == 0 && identical == compared,
          fmt("dataset generate -> train -> report twice: %d/%d artifacts byte-identical, %d command failures%s%s",
              identical, compared, failures, differing.empty() ? "" : "; differing:", differing.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, Verdict (*)()>> criteria = {
      {"sensitivities match finite differences", criterion1},
      {"singular KKT systems on radial feeders", criterion2},
      {"KKT validity of labels and enumeration oracle", criterion3},
      {"network input Jacobian and loss gradient", criterion4},
      {"39-bus sample efficiency (SI <= 0.6 P test MSE)", criterion5},
      {"39-bus violation trend", criterion6},
      {"5-bus sweep, pg5 error", criterion7},
      {"pipeline determinism", criterion8},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    int id = static_cast<int>(k) + 1;
    if (!only.empty() && !only.count(id)) continue;
    auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[k].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s criterion %d: %s -- %s [%.1f s]\n", v.pass ? "PASS" : "FAIL", id, criteria[k].first,
                v.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !v.pass;
  }
  return failed ? 1 : 0;
}
