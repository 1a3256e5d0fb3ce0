// opf-sense: command-line front end for the OPF, sensitivity, dataset and training pipeline.

#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "opfsense/dataset.hpp"
#include "opfsense/experiment.hpp"
#include "opfsense/mlp.hpp"
#include "opfsense/network.hpp"
#include "opfsense/opf.hpp"
#include "opfsense/powerflow.hpp"
#include "opfsense/qcqp.hpp"
#include "opfsense/sensitivity.hpp"

using nlohmann::json;
using namespace opfsense;

namespace {

struct CaseArgs {
  std::string path;
  std::string cost_mode = "reject";
  std::string gen_bus_loads = "reject";
  std::string flow_limit = "current";
  std::string flow_ends = "series";
  std::string params;
  std::optional<double> uniform_cost;
};

void add_case_options(CLI::App* app, CaseArgs& a) {
  app->add_option("--case", a.path, "MATPOWER-style case file")->required();
  app->add_option("--cost-mode", a.cost_mode, "reject | linearize_at_midpoint");
  app->add_option("--gen-bus-loads", a.gen_bus_loads, "reject | drop");
  app->add_option("--flow-limit", a.flow_limit, "current | off");
  app->add_option("--flow-ends", a.flow_ends, "series | both_ends");
  app->add_option("--params", a.params, "parameter list such as p2,p4 (default: all load-bus p and q)");
  app->add_option("--uniform-cost", a.uniform_cost, "active cost ($/pu) for every generator");
}

Network load_network(const CaseArgs& a) {
  ParseOptions po;
  po.cost_mode = parse_cost_mode(a.cost_mode);
  po.gen_bus_loads = parse_gen_bus_loads(a.gen_bus_loads);
  po.flow_limit = parse_flow_limit(a.flow_limit);
  po.uniform_cost = a.uniform_cost;
  Network net = load_case_file(a.path, po);
  for (const auto& w : net.warnings) std::cerr << "warning: " << w << '\n';
  return net;
}

QcqpModel build_model(const Network& net, const CaseArgs& a) {
  QuadForms forms = build_quadforms(net, parse_flow_ends(a.flow_ends));
  return assemble_qcqp(net, forms, a.params.empty() ? default_params(net) : parse_params(a.params));
}

std::vector<double> split_numbers(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    double x = std::stod(item, &used);
    if (used != item.size()) throw std::invalid_argument("not a number: '" + item + "'");
    out.push_back(x);
  }
  return out;
}

std::vector<int> split_ints(const std::string& text) {
  std::vector<int> out;
  for (double x : split_numbers(text)) {
    if (x != std::floor(x)) throw std::invalid_argument("expected an integer list: " + text);
    out.push_back(static_cast<int>(x));
  }
  return out;
}

std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

json matrix_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back(to_vec(m.row(r).transpose()));
  return rows;
}

/// θ from `--theta` values or the nominal demand times `--load-scale`.
Eigen::VectorXd pick_theta(const QcqpModel& model, const std::string& theta, double load_scale) {
  if (!theta.empty()) {
    auto v = split_numbers(theta);
    if (static_cast<int>(v.size()) != model.num_params())
      throw std::invalid_argument("--theta needs " + std::to_string(model.num_params()) + " values");
    return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  return model.nominal_theta * load_scale;
}

json solution_json(const Network& net, const QcqpModel& model, const OpfSolution& sol) {
  json j;
  j["status"] = std::string(to_string(sol.status));
  j["iterations"] = sol.iterations;
  j["objective"] = sol.objective;
  j["kkt"] = {{"stationarity", sol.kkt.stationarity},
              {"feasibility", sol.kkt.feasibility},
              {"complementarity", sol.kkt.complementarity}};
  json buses = json::array();
  for (int n = 0; n < model.nb; ++n)
    buses.push_back({{"bus", net.buses[n].id},
                     {"vm", std::hypot(sol.v(n), sol.v(model.nb + n))},
                     {"va_deg", std::atan2(sol.v(model.nb + n), sol.v(n)) * 180.0 / M_PI}});
  j["buses"] = buses;
  json gens = json::array();
  for (int g = 0; g < model.ng; ++g)
    gens.push_back({{"bus", net.generators[g].bus}, {"pg", sol.xg(g)}, {"qg", sol.xg(model.ng + g)}});
  j["generators"] = gens;
  json binding = json::array();
  for (int m = 0; m < model.num_ineq(); ++m)
    if (sol.mu(m) > 1e-6) binding.push_back({{"constraint", model.ineq_label(m)}, {"mu", sol.mu(m)}});
  j["binding"] = binding;
  return j;
}

void print(const json& j) { std::cout << j.dump(2) << '\n'; }

/// Network + split bookkeeping stored next to the weights.
struct Checkpoint {
  MlpModel model;
  std::string network_hash;
  std::vector<int> train;
  json config;
};

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  json j;
  j["format"] = "opf-sense-model";
  j["version"] = 1;
  j["network_hash"] = c.network_hash;
  j["train_indices"] = c.train;
  j["config"] = c.config;
  j["model"] = mlp_to_json(c.model);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << j.dump() << '\n';
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  json j = json::parse(f);
  if (j.value("format", "") != "opf-sense-model") throw std::runtime_error(path + " is not a model checkpoint");
  Checkpoint c;
  c.model = mlp_from_json(j.at("model"));
  c.network_hash = j.at("network_hash").get<std::string>();
  c.train = j.at("train_indices").get<std::vector<int>>();
  c.config = j.at("config");
  return c;
}

struct ModelArgs {
  std::string hidden = "256,256,256,256";
  double rho = 20.0;
  double lr = 5e-4;
  int epochs = 2000;
  std::string norm = "mean";
  std::string init = "glorot_uniform";
  bool raw_inputs = false;
};

void add_model_options(CLI::App* app, ModelArgs& a) {
  app->add_option("--hidden", a.hidden, "hidden layer widths");
  app->add_option("--lr", a.lr, "initial Adam learning rate");
  app->add_option("--epochs", a.epochs, "training epochs");
  app->add_option("--norm", a.norm, "loss normalisation: mean | sum");
  app->add_option("--init", a.init, "weight init: glorot_uniform | he_uniform");
  app->add_flag("--raw-inputs", a.raw_inputs, "feed θ in pu instead of relative to its nominal value");
}

TrainConfig train_config(const ModelArgs& a, std::uint64_t seed) {
  TrainConfig tc;
  tc.rho = a.rho;
  tc.lr0 = a.lr;
  tc.epochs = a.epochs;
  tc.norm = parse_loss_norm(a.norm);
  tc.seed = seed;
  return tc;
}

void print_error(const std::string& type, const std::string& message, int line = 0) {
  json e = {{"type", type}, {"message", message}};
  if (line > 0) e["line"] = line;
  std::cerr << json{{"error", e}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parametric AC-OPF sensitivities and sensitivity-informed learning"};
  app.set_config("--config", "", "key = value configuration file");
  app.require_subcommand(1);

  CaseArgs case_args;
  double load_scale = 1.0;
  std::string theta_text;
  std::string out;
  std::uint64_t seed = 1;

  // parse
  auto* parse = app.add_subcommand("parse", "validate a case file and print the network");
  add_case_options(parse, case_args);
  parse->add_option("--out", out, "write the network JSON here instead of stdout");

  // pf
  auto* pf = app.add_subcommand("pf", "Newton power flow at the case's generator setpoints");
  add_case_options(pf, case_args);

  // opf
  SolverOptions solver;
  auto* opf = app.add_subcommand("opf", "solve the OPF for one load vector");
  auto* sense = app.add_subcommand("sense", "solve the OPF and print the sensitivities of the setpoints");
  std::string gen_form = "quadratic", volt_form = "squared", ref_form = "linear";
  for (auto* sub : {opf, sense}) {
    add_case_options(sub, case_args);
    sub->add_option("--load-scale", load_scale, "multiplier on the nominal demand");
    sub->add_option("--theta", theta_text, "explicit parameter values, comma separated");
    sub->add_option("--tol", solver.tol_kkt, "KKT tolerance");
    sub->add_option("--max-iter", solver.max_iter, "interior-point iteration limit");
    sub->add_flag("--verbose", solver.verbose, "iteration log on stderr");
  }
  sense->add_option("--gen-limits", gen_form, "quadratic | box");
  sense->add_option("--voltage-limits", volt_form, "squared | magnitude");
  sense->add_option("--reference", ref_form, "linear | angle | quadratic");

  // dataset generate
  auto* dataset = app.add_subcommand("dataset", "dataset tools");
  dataset->require_subcommand(1);
  auto* generate_cmd = dataset->add_subcommand("generate", "solve and differentiate sampled instances");
  add_case_options(generate_cmd, case_args);
  int n_samples = 200;
  std::string range = "0.8,1.2";
  std::string grid;
  bool no_spot_check = false, full_scale = false;
  generate_cmd->add_option("--n", n_samples, "number of random load vectors");
  generate_cmd->add_option("--range", range, "uniform multiplier range lo,hi");
  generate_cmd->add_option("--grid", grid, "2-D grid instead of random draws: name:lo:hi:n,name:lo:hi:n");
  generate_cmd->add_option("--seed", seed, "sampling seed");
  generate_cmd->add_option("--out", out, "dataset path (JSON lines)")->required();
  generate_cmd->add_flag("--no-spot-check", no_spot_check, "skip the finite-difference check of each Jacobian");
  generate_cmd->add_flag("--paper-scale", full_scale, "1000 instances");

  // train
  std::string data_path, model_path;
  int size = 10;
  ModelArgs margs;
  auto* train_cmd = app.add_subcommand("train", "train one predictor on a random training split");
  train_cmd->add_option("--data", data_path, "dataset path")->required();
  train_cmd->add_option("--size", size, "training set size");
  train_cmd->add_option("--seed", seed, "split, initialisation and shuffling seed");
  train_cmd->add_option("--rho", margs.rho, "sensitivity weight (0 trains a plain predictor)");
  train_cmd->add_option("--out", out, "checkpoint path")->required();
  add_model_options(train_cmd, margs);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "test error and constraint violations of a checkpoint");
  eval_cmd->add_option("--data", data_path, "dataset path")->required();
  eval_cmd->add_option("--model", model_path, "checkpoint path")->required();

  // report
  std::string sizes = "10", runs_text = "5", epochs_text, results_path;
  double si_rho = 20.0;
  bool no_violations = false;
  auto* report = app.add_subcommand("report", "P-DNN vs SI-DNN sweep with CSV and SVG output");
  report->add_option("--data", data_path, "dataset path");
  report->add_option("--results", results_path, "re-render an existing results.json instead of training");
  report->add_option("--out", out, "output directory")->required();
  report->add_option("--sizes", sizes, "training sizes");
  report->add_option("--runs", runs_text, "runs, one value or one per size");
  report->add_option("--epochs-per-size", epochs_text, "epochs per size (overrides --epochs)");
  report->add_option("--seed", seed, "split and initialisation seed");
  report->add_option("--rho", si_rho, "sensitivity weight of the SI-DNN");
  report->add_flag("--no-violations", no_violations, "skip the power-flow violation statistics");
  report->add_flag("--paper-scale", full_scale, "sizes 10,50,100,250 with 20,20,10,4 runs and 5000/2000 epochs");
  add_model_options(report, margs);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return 2;
  }

  try {
    if (*parse) {
      Network net = load_network(case_args);
      json j = network_to_json(net);
      j["hash"] = network_hash(net);
      j["warnings"] = net.warnings;
      if (out.empty()) {
        print(j);
      } else {
        std::ofstream f(out);
        if (!f) throw std::runtime_error("cannot open " + out + " for writing");
        f << j.dump(2) << '\n';
      }
    } else if (*pf) {
      Network net = load_network(case_args);
      PfSpec spec;
      const int nb = net.num_buses();
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
      PfSolution sol = solve_pf(net, spec);
      json buses = json::array();
      for (int n = 0; n < nb; ++n)
        buses.push_back({{"bus", net.buses[n].id},
                         {"vm", std::abs(sol.v(n))},
                         {"va_deg", std::arg(sol.v(n)) * 180.0 / M_PI}});
      print({{"converged", sol.converged},
             {"iterations", sol.iterations},
             {"max_mismatch", sol.max_mismatch},
             {"buses", buses}});
      if (!sol.converged) throw std::runtime_error("power flow did not converge");
    } else if (*opf || *sense) {
      Network net = load_network(case_args);
      QcqpModel model = build_model(net, case_args);
      Eigen::VectorXd theta = pick_theta(model, theta_text, load_scale);
      OpfSolution sol = solve_opf(model, theta, solver);
      if (*opf) {
        print(solution_json(net, model, sol));
      } else {
        if (sol.status != OpfStatus::optimal)
          throw std::runtime_error(std::string("OPF not solved: ") + std::string(to_string(sol.status)));
        SensitivityOptions so;
        so.gen_limits = parse_gen_limit_form(gen_form);
        so.voltage_limits = parse_voltage_limit_form(volt_form);
        so.reference = parse_reference_form(ref_form);
        SensitivityRecord rec = compute_sensitivities(model, sol, theta, so);
        json j;
        j["status"] = rec.ok ? "ok" : (rec.degenerate ? "degenerate" : "rejected");
        j["rank_deficient"] = rec.rank_deficient;
        j["residual"] = rec.residual;
        j["sigma_ratio"] = rec.sigma_max > 0 ? rec.sigma_min / rec.sigma_max : 0.0;
        std::vector<std::string> pnames;
        for (const auto& p : model.params) pnames.push_back(param_name(p));
        j["params"] = pnames;
        j["outputs"] = output_names(model, net);
        j["y"] = to_vec(reduced_output(model, sol.v, sol.xg));
        if (rec.ok) j["J"] = matrix_json(output_jacobian(model, sol.v, rec.J_full));
        print(j);
        if (!rec.ok) throw std::runtime_error("sensitivities unavailable for this instance");
      }
    } else if (*generate_cmd) {
      Network net = load_network(case_args);
      QcqpModel model = build_model(net, case_args);
      std::vector<Eigen::VectorXd> thetas;
      if (!grid.empty()) {
        std::vector<std::string> axes;
        std::stringstream ss(grid);
        std::string item;
        while (std::getline(ss, item, ',')) axes.push_back(item);
        if (axes.size() != 2) throw std::invalid_argument("--grid needs two axes");
        int idx[2];
        double lo[2], hi[2];
        int cnt[2];
        for (int a = 0; a < 2; ++a) {
          std::vector<std::string> f;
          std::stringstream s2(axes[a]);
          while (std::getline(s2, item, ':')) f.push_back(item);
          if (f.size() != 4) throw std::invalid_argument("grid axis must be name:lo:hi:n");
          auto p = parse_params(f[0]);
          idx[a] = -1;
          for (int k = 0; k < model.num_params(); ++k)
            if (param_name(model.params[k]) == param_name(p.at(0))) idx[a] = k;
          if (idx[a] < 0) throw std::invalid_argument("grid axis " + f[0] + " is not a parameter");
          lo[a] = std::stod(f[1]);
          hi[a] = std::stod(f[2]);
          cnt[a] = std::stoi(f[3]);
        }
        thetas = grid_thetas(model.nominal_theta, idx[0], lo[0], hi[0], cnt[0], idx[1], lo[1], hi[1], cnt[1]);
      } else {
        auto r = split_numbers(range);
        if (r.size() != 2) throw std::invalid_argument("--range needs lo,hi");
        thetas = sample_thetas(model.nominal_theta, full_scale ? 1000 : n_samples, r[0], r[1], seed);
      }
      GenerateOptions go;
      go.seed = seed;
      go.spot_check = !no_spot_check;
      Dataset ds = generate(net, model, thetas, go);
      write_dataset_file(out, ds);
      int usable = 0, jac = 0;
      for (const auto& s : ds.samples) {
        usable += s.usable();
        jac += s.has_jacobian;
      }
      print({{"samples", ds.samples.size()}, {"optimal", usable}, {"with_jacobian", jac}, {"out", out}});
    } else if (*train_cmd) {
      Dataset ds = read_dataset_file(data_path);
      QcqpModel model = ds.model();
      SplitPlan plan;
      plan.sizes = {size};
      plan.seed = seed;
      Split sp = split(ds.usable_indices(), plan).at(0);
      MlpModel net = make_predictor(ds, model, split_ints(margs.hidden), !margs.raw_inputs, seed,
                                    parse_weight_init(margs.init));
      TrainHistory hist = train(net, make_examples(ds, net, sp.train), train_config(margs, seed));
      Checkpoint c{net, network_hash(ds.network), sp.train,
                   {{"rho", margs.rho}, {"lr", margs.lr}, {"epochs", margs.epochs}, {"norm", margs.norm},
                    {"init", margs.init}, {"hidden", margs.hidden}, {"raw_inputs", margs.raw_inputs},
                    {"seed", seed}, {"size", size}}};
      save_checkpoint(out, c);
      print({{"out", out}, {"final_loss", hist.loss.back()}, {"final_value_loss", hist.value_loss.back()}});
    } else if (*eval_cmd) {
      Dataset ds = read_dataset_file(data_path);
      Checkpoint c = load_checkpoint(model_path);
      if (c.network_hash != network_hash(ds.network))
        throw std::runtime_error("checkpoint was trained on a different network");
      QcqpModel model = ds.model();
      std::vector<int> test;
      for (int i : ds.usable_indices())
        if (std::find(c.train.begin(), c.train.end(), i) == c.train.end()) test.push_back(i);
      if (test.empty()) throw std::runtime_error("empty test set");
      std::vector<Example> ex = make_examples(ds, c.model, test);
      Eigen::VectorXd per = Eigen::VectorXd::Zero(c.model.num_outputs());
      std::vector<Eigen::VectorXd> thetas, preds;
      for (const auto& e : ex) {
        Eigen::VectorXd yhat = forward(c.model, e.theta);
        per += (yhat - e.y).array().square().matrix();
        thetas.push_back(e.theta);
        preds.push_back(unscale_output(c.model, yhat));
      }
      per /= static_cast<double>(ex.size());
      ViolationStats vs = violation_report(ds.network, model, thetas, preds);
      json outputs;
      for (std::size_t k = 0; k < ds.outputs.size(); ++k) outputs[ds.outputs[k]] = per(static_cast<Eigen::Index>(k));
      print({{"test_instances", ex.size()},
             {"test_mse", per.mean()},
             {"test_mse_per_output", outputs},
             {"violations",
              {{"per_instance", vs.count_per_instance},
               {"max", vs.max_violation},
               {"mean", vs.mean_violation},
               {"pf_failures", vs.pf_failures}}}});
    } else if (*report) {
      std::vector<RunResult> results;
      if (!results_path.empty()) {
        std::ifstream f(results_path);
        if (!f) throw std::runtime_error("cannot open " + results_path);
        results = results_from_json(json::parse(f));
      } else {
        if (data_path.empty()) throw std::invalid_argument("report needs --data or --results");
        Dataset ds = read_dataset_file(data_path);
        ExperimentConfig cfg;
        cfg.hidden = split_ints(margs.hidden);
        cfg.train = train_config(margs, seed);
        cfg.variants = {{"P-DNN", 0.0}, {"SI-DNN", si_rho}};
        cfg.init_seed = seed;
        cfg.init = parse_weight_init(margs.init);
        cfg.scale_inputs = !margs.raw_inputs;
        cfg.violations = !no_violations;
        cfg.plan.seed = seed;
        if (full_scale) {
          cfg.plan.sizes = {10, 50, 100, 250};
          cfg.plan.runs_per_size = {20, 20, 10, 4};
          cfg.epochs_per_size = {5000, 5000, 5000, 2000};
        } else {
          cfg.plan.sizes = split_ints(sizes);
          auto r = split_ints(runs_text);
          if (r.size() == 1)
            cfg.plan.runs = r[0];
          else
            cfg.plan.runs_per_size = r;
          if (!epochs_text.empty()) cfg.epochs_per_size = split_ints(epochs_text);
        }
        results = run_experiment(ds, cfg);
      }
      emit_reports(results, out);
      if (results_path.empty()) {
        std::ofstream f(out + "/results.json");
        f << results_to_json(results).dump() << '\n';
      }
      json cells = json::array();
      for (const auto& s : summarize(results))
        cells.push_back({{"size", s.size}, {"variant", s.variant}, {"runs", s.runs}, {"mean_test_mse", s.mean_test_mse}});
      print({{"out", out}, {"summary", cells}});
    }
  } catch (const ParseError& e) {
    print_error("parse", e.what(), e.line());
    return 1;
  } catch (const ValidationError& e) {
    print_error("validation", e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("runtime", e.what());
    return 1;
  }
  return 0;
}
