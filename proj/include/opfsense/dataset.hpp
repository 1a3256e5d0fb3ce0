#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "opfsense/network.hpp"
#include "opfsense/opf.hpp"
#include "opfsense/qcqp.hpp"
#include "opfsense/sensitivity.hpp"

namespace opfsense {

/// θ = nominal ⊙ u with u drawn independently and uniformly from [lo, hi].
std::vector<Eigen::VectorXd> sample_thetas(const Eigen::VectorXd& nominal, int n, double lo, double hi,
                                           std::uint64_t seed);

/// Row-major grid over two parameter entries; the others stay at `base`.
std::vector<Eigen::VectorXd> grid_thetas(const Eigen::VectorXd& base, int i, double lo_i, double hi_i, int n_i,
                                         int j, double lo_j, double hi_j, int n_j);

struct TrainingSample {
  Eigen::VectorXd theta;
  std::string status;      ///< solver status, or "error"
  std::string error;
  double objective = 0.0;
  double kkt = 0.0;        ///< max KKT residual of the label
  Eigen::VectorXd y;       ///< reduced output in physical units
  bool has_jacobian = false;
  Eigen::MatrixXd J;       ///< ∂y/∂θ when present
  bool degenerate = false;
  bool rejected = false;   ///< sensitivity solve or spot check failed
  bool rank_deficient = false;
  int fd_column = -1;      ///< parameter used for the spot check
  double fd_error = 0.0;
  std::vector<int> active; ///< strongly active inequality rows

  bool usable() const { return status == "optimal"; }
};

struct GenerateOptions {
  SolverOptions solver;
  SensitivityOptions sensitivity;
  bool spot_check = true;
  double fd_eps = 1e-5;
  double fd_tol = 1e-3;
  std::uint64_t seed = 0;  ///< picks the spot-check column
};

struct Dataset {
  Network network;
  std::vector<ParamEntry> params;
  FlowEnds flow_ends = FlowEnds::series;
  std::vector<std::string> outputs;
  nlohmann::json options;  ///< generation settings, informational
  std::vector<TrainingSample> samples;

  std::vector<int> usable_indices() const;
  QcqpModel model() const;
};

/// Solves and differentiates every θ. Failures are recorded per sample, never thrown.
Dataset generate(const Network& net, const QcqpModel& model, const std::vector<Eigen::VectorXd>& thetas,
                 const GenerateOptions& opts = {});

/// JSON-lines: a header record, then one record per sample in input order.
void write_dataset(std::ostream& out, const Dataset& ds);
void write_dataset_file(const std::string& path, const Dataset& ds);
Dataset read_dataset(std::istream& in);
Dataset read_dataset_file(const std::string& path);

struct SplitPlan {
  std::vector<int> sizes;
  int runs = 1;
  std::vector<int> runs_per_size;  ///< overrides `runs` when given, one entry per size
  std::uint64_t seed = 0;
};

struct Split {
  int size = 0;
  int run = 0;
  std::vector<int> train, test;  ///< sample indices
};

/// For each size and run, a training set drawn without replacement from `pool`; test is the rest.
std::vector<Split> split(const std::vector<int>& pool, const SplitPlan& plan);

/// Per-output [lo, hi] used to scale labels: p limits of non-reference generators, then v limits.
void output_box(const Network& net, const QcqpModel& model, Eigen::VectorXd& lo, Eigen::VectorXd& hi);

}  // namespace opfsense
