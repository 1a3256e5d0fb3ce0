#pragma once

#include <algorithm>
#include <random>
#include <vector>

#include "opfsense/mlp.hpp"

namespace testing {

using namespace opfsense;

/// A network with random weights and biases, and a few examples (one value-only) whose inputs keep
/// every rectifier at least `margin` away from its kink.
struct MlpProblem {
  MlpModel model;
  std::vector<Example> data;
};

inline double min_margin(const MlpModel& m, const Eigen::VectorXd& theta) {
  Eigen::VectorXd a = m.in_scale.cwiseProduct(theta);
  double margin = std::numeric_limits<double>::infinity();
  for (int k = 0; k + 1 < m.num_layers(); ++k) {
    Eigen::VectorXd z = m.W[k] * a + m.b[k];
    margin = std::min(margin, z.cwiseAbs().minCoeff());
    a = z.cwiseMax(0.0);
  }
  return margin;
}

inline MlpProblem random_mlp_problem(const std::vector<int>& dims, std::uint64_t seed, double margin = 1e-3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  MlpProblem p;
  p.model = make_mlp(dims, seed, WeightInit::glorot_uniform);
  for (auto& b : p.model.b)
    for (int i = 0; i < b.size(); ++i) b(i) = 0.3 * u(rng);
  for (int i = 0; i < p.model.in_scale.size(); ++i) p.model.in_scale(i) = 1.0 + 0.5 * u(rng);
  const int nin = dims.front(), nout = dims.back();
  for (int s = 0; s < 3; ++s) {
    Example ex;
    do {
      ex.theta = Eigen::VectorXd::NullaryExpr(nin, [&] { return 2.0 * u(rng); });
    } while (min_margin(p.model, ex.theta) < margin);
    ex.y = Eigen::VectorXd::NullaryExpr(nout, [&] { return 0.9 * u(rng); });
    if (s != 1) ex.J = Eigen::MatrixXd::NullaryExpr(nout, nin, [&] { return u(rng); });
    p.data.push_back(ex);
  }
  return p;
}

inline double relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).norm() / std::max(b.norm(), 1e-12);
}

/// ‖analytic − central difference‖ / ‖central difference‖ of the input Jacobian at each example.
inline double input_jacobian_error(const MlpProblem& p, double eps = 1e-6) {
  double worst = 0.0;
  for (const auto& ex : p.data) {
    Eigen::MatrixXd j = input_jacobian(p.model, ex.theta);
    Eigen::MatrixXd fd(j.rows(), j.cols());
    for (int i = 0; i < ex.theta.size(); ++i) {
      Eigen::VectorXd tp = ex.theta, tm = ex.theta;
      tp(i) += eps;
      tm(i) -= eps;
      fd.col(i) = (forward(p.model, tp) - forward(p.model, tm)) / (2 * eps);
    }
    worst = std::max(worst, relative_error(j.reshaped(), fd.reshaped()));
  }
  return worst;
}

/// Same measure for the gradient of the full loss over every weight and bias.
inline double weight_gradient_error(MlpProblem p, double rho, double eps = 1e-6) {
  Gradients g;
  loss_and_grads(p.model, p.data, rho, &g);
  std::vector<double> analytic, numeric;
  auto probe = [&](double& w, double a) {
    double keep = w;
    w = keep + eps;
    double lp = loss_and_grads(p.model, p.data, rho, nullptr).total(rho);
    w = keep - eps;
    double lm = loss_and_grads(p.model, p.data, rho, nullptr).total(rho);
    w = keep;
    analytic.push_back(a);
    numeric.push_back((lp - lm) / (2 * eps));
  };
  for (int k = 0; k < p.model.num_layers(); ++k) {
    for (Eigen::Index i = 0; i < p.model.W[k].size(); ++i) probe(p.model.W[k].data()[i], g.W[k].data()[i]);
    for (Eigen::Index i = 0; i < p.model.b[k].size(); ++i) probe(p.model.b[k](i), g.b[k](i));
  }
  return relative_error(Eigen::Map<Eigen::VectorXd>(analytic.data(), static_cast<Eigen::Index>(analytic.size())),
                        Eigen::Map<Eigen::VectorXd>(numeric.data(), static_cast<Eigen::Index>(numeric.size())));
}

}  // namespace testing
