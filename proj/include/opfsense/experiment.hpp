#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "opfsense/dataset.hpp"
#include "opfsense/mlp.hpp"

namespace opfsense {

/// Constraints that the bounded output layer does not enforce, evaluated on the power-flow state
/// recovered from predicted setpoints.
struct ViolationStats {
  int instances = 0;       ///< instances whose power flow converged
  int pf_failures = 0;
  double count_per_instance = 0.0;  ///< violations above `threshold` per instance
  double max_violation = 0.0;
  double mean_violation = 0.0;      ///< over every constraint of every instance
  double threshold = 1e-4;
};

/// `predictions` are reduced outputs in physical units, one per θ.
ViolationStats violation_report(const Network& net, const QcqpModel& model,
                                const std::vector<Eigen::VectorXd>& thetas,
                                const std::vector<Eigen::VectorXd>& predictions, double threshold = 1e-4);

/// Normalized violations of one recovered state: load-bus voltages (pu), line currents,
/// generator reactive powers and the reference generator's active power (relative to the larger limit).
Eigen::VectorXd constraint_violations(const Network& net, const QcqpModel& model, const Eigen::VectorXd& v,
                                      const Eigen::VectorXd& xg);

struct Variant {
  std::string name;
  double rho = 0.0;
};

struct ExperimentConfig {
  std::vector<int> hidden = {256, 256, 256, 256};
  TrainConfig train = {.norm = LossNorm::mean};  ///< `rho` is taken from each variant
  std::vector<int> epochs_per_size;  ///< overrides `train.epochs`, one entry per plan size
  SplitPlan plan;
  std::vector<Variant> variants = {{"P-DNN", 0.0}, {"SI-DNN", 20.0}};
  std::uint64_t init_seed = 1;
  WeightInit init = WeightInit::glorot_uniform;
  bool scale_inputs = true;  ///< divide θ by its nominal value before the first layer
  bool violations = true;
};

struct RunResult {
  int size = 0;
  int run = 0;
  std::string variant;
  double rho = 0.0;
  int n_train = 0, n_test = 0;
  int n_train_jacobians = 0;
  double train_mse = 0.0;  ///< scaled outputs, mean over samples and entries
  double test_mse = 0.0;
  Eigen::VectorXd test_mse_per_output;
  double train_seconds = 0.0;  ///< wall clock of the training loop
  std::vector<double> loss_curve, value_curve;
  std::string label_hash;  ///< hash of the value labels fed to training
  ViolationStats violations;
  std::string error;
};

/// Builds a network for `dims` with output scaling from the model's generator box.
MlpModel make_predictor(const Dataset& ds, const QcqpModel& model, const std::vector<int>& hidden,
                        bool scale_inputs, std::uint64_t seed, WeightInit init = WeightInit::he_uniform);

/// Examples in scaled output space; Jacobians are attached when present.
std::vector<Example> make_examples(const Dataset& ds, const MlpModel& net, const std::vector<int>& indices);

/// Trains every variant on every split; failures are recorded in `error`.
std::vector<RunResult> run_experiment(const Dataset& ds, const ExperimentConfig& cfg);

struct SummaryRow {
  int size = 0;
  std::string variant;
  int runs = 0;
  double mean_train_mse = 0.0, mean_test_mse = 0.0;
  double mean_violation_count = 0.0, mean_max_violation = 0.0, mean_mean_violation = 0.0;
};

/// Cell averages over successful runs, in order of first appearance.
std::vector<SummaryRow> summarize(const std::vector<RunResult>& results);

/// runs.csv, summary.csv, loss_curves.csv, loss_curves.svg, test_mse.svg and timing.json in `dir`.
/// Only timing.json depends on wall-clock time.
void emit_reports(const std::vector<RunResult>& results, const std::string& dir);

std::string runs_csv(const std::vector<RunResult>& results);
std::string summary_csv(const std::vector<SummaryRow>& rows);
std::string loss_curves_csv(const std::vector<RunResult>& results);
std::string loss_curves_svg(const std::vector<RunResult>& results);
std::string test_mse_svg(const std::vector<SummaryRow>& rows);

nlohmann::json results_to_json(const std::vector<RunResult>& results);
std::vector<RunResult> results_from_json(const nlohmann::json& j);

}  // namespace opfsense
