#include "opfsense/mlp.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace opfsense {

int MlpModel::num_weights() const {
  int n = 0;
  for (int k = 0; k < num_layers(); ++k) n += static_cast<int>(W[k].size() + b[k].size());
  return n;
}

WeightInit parse_weight_init(std::string_view s) {
  if (s == "he_uniform" || s == "he") return WeightInit::he_uniform;
  if (s == "glorot_uniform" || s == "glorot") return WeightInit::glorot_uniform;
  throw std::invalid_argument("unknown weight init '" + std::string(s) + "'");
}

MlpModel make_mlp(const std::vector<int>& dims, std::uint64_t seed, WeightInit init) {
  if (dims.size() < 2) throw std::invalid_argument("make_mlp: need at least input and output sizes");
  MlpModel m;
  m.dims = dims;
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    double limit = init == WeightInit::he_uniform ? std::sqrt(6.0 / dims[k])
                                                  : std::sqrt(6.0 / (dims[k] + dims[k + 1]));
    std::uniform_real_distribution<double> u(-limit, limit);
    Eigen::MatrixXd w(dims[k + 1], dims[k]);
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = u(rng);
    m.W.push_back(std::move(w));
    m.b.push_back(Eigen::VectorXd::Zero(dims[k + 1]));
  }
  m.in_scale = Eigen::VectorXd::Ones(dims.front());
  m.out_lo = -Eigen::VectorXd::Ones(dims.back());
  m.out_hi = Eigen::VectorXd::Ones(dims.back());
  return m;
}

namespace {

/// Pre-activations of every layer for a batch stored column-wise.
struct Pass {
  std::vector<Eigen::MatrixXd> z;  // pre-activations per layer
  std::vector<Eigen::MatrixXd> a;  // a[0] = scaled inputs, a[k] = activation of layer k
  Eigen::MatrixXd out;
};

Pass run(const MlpModel& m, const Eigen::MatrixXd& x) {
  Pass p;
  p.a.push_back(m.in_scale.asDiagonal() * x);
  const int layers = m.num_layers();
  for (int k = 0; k < layers; ++k) {
    Eigen::MatrixXd z = m.W[k] * p.a.back();
    z.colwise() += m.b[k];
    p.z.push_back(z);
    if (k + 1 < layers) p.a.push_back(z.cwiseMax(0.0));
  }
  p.out = m.tanh_output ? Eigen::MatrixXd(p.z.back().array().tanh()) : p.z.back();
  return p;
}

}  // namespace

Eigen::VectorXd forward(const MlpModel& model, const Eigen::VectorXd& theta) {
  if (theta.size() != model.num_inputs()) throw std::invalid_argument("forward: input size");
  return run(model, theta).out.col(0);
}

Eigen::MatrixXd input_jacobian(const MlpModel& model, const Eigen::VectorXd& theta) {
  if (theta.size() != model.num_inputs()) throw std::invalid_argument("input_jacobian: input size");
  Pass p = run(model, theta);
  Eigen::MatrixXd j = Eigen::MatrixXd(model.in_scale.asDiagonal());
  const int layers = model.num_layers();
  for (int k = 0; k < layers; ++k) {
    j = model.W[k] * j;
    if (k + 1 < layers) {
      for (Eigen::Index r = 0; r < j.rows(); ++r)
        if (!(p.z[k](r, 0) > 0.0)) j.row(r).setZero();
    }
  }
  if (model.tanh_output) {
    Eigen::VectorXd d = 1.0 - p.out.col(0).array().square();
    j = d.asDiagonal() * j;
  }
  return j;
}

Eigen::VectorXd scale_output(const MlpModel& model, const Eigen::VectorXd& y) {
  return (2.0 * (y - model.out_lo).array() / (model.out_hi - model.out_lo).array() - 1.0).matrix();
}

Eigen::MatrixXd scale_jacobian(const MlpModel& model, const Eigen::MatrixXd& j) {
  Eigen::VectorXd s = 2.0 / (model.out_hi - model.out_lo).array();
  return s.asDiagonal() * j;
}

Eigen::VectorXd unscale_output(const MlpModel& model, const Eigen::VectorXd& yhat) {
  const double margin = 1e-12;
  Eigen::VectorXd c = yhat.cwiseMax(-1.0 + margin).cwiseMin(1.0 - margin);
  Eigen::VectorXd y = model.out_lo.array() + (c.array() + 1.0) * 0.5 * (model.out_hi - model.out_lo).array();
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (y(i) <= model.out_lo(i)) y(i) = std::nextafter(model.out_lo(i), model.out_hi(i));
    if (y(i) >= model.out_hi(i)) y(i) = std::nextafter(model.out_hi(i), model.out_lo(i));
  }
  return y;
}

LossParts loss_and_grads(const MlpModel& model, const std::vector<Example>& batch, double rho,
                         Gradients* grads) {
  std::vector<const Example*> ptrs;
  for (const auto& e : batch) ptrs.push_back(&e);
  return loss_and_grads(model, ptrs, rho, grads);
}

LossParts loss_and_grads(const MlpModel& model, const std::vector<const Example*>& batch, double rho,
                         Gradients* grads) {
  const int layers = model.num_layers();
  const int u0 = model.num_inputs(), uo = model.num_outputs();
  const int n = static_cast<int>(batch.size());
  Eigen::MatrixXd x(u0, n), y(uo, n);
  for (int s = 0; s < n; ++s) {
    if (batch[s]->theta.size() != u0 || batch[s]->y.size() != uo)
      throw std::invalid_argument("loss_and_grads: example dimension mismatch");
    if (batch[s]->J && (batch[s]->J->rows() != uo || batch[s]->J->cols() != u0))
      throw std::invalid_argument("loss_and_grads: Jacobian dimension mismatch");
    x.col(s) = batch[s]->theta;
    y.col(s) = batch[s]->y;
  }
  Pass p = run(model, x);
  LossParts loss;
  Eigen::MatrixXd diff = p.out - y;
  loss.value = diff.squaredNorm();

  Eigen::MatrixXd dout = Eigen::MatrixXd::Ones(uo, n);  // ∂ŷ/∂z at the output
  if (model.tanh_output) dout = 1.0 - p.out.array().square();
  // signal at the output pre-activation
  Eigen::MatrixXd delta = (2.0 * diff.array() * dout.array()).matrix();

  // Jacobian path: P_k stacked per sample as u_k x (nj·u0) blocks
  std::vector<int> with_j;
  for (int s = 0; s < n; ++s)
    if (batch[s]->J) with_j.push_back(s);
  const int nj = static_cast<int>(with_j.size());
  std::vector<Eigen::MatrixXd> P;  // P[0] = input scaling, P[k] = after hidden layer k
  Eigen::MatrixXd gq;              // ∂loss/∂(output pre-activation Jacobian)
  if (rho != 0.0 && nj > 0) {
    Eigen::MatrixXd p0(u0, nj * u0);
    for (int t = 0; t < nj; ++t) p0.middleCols(t * u0, u0) = model.in_scale.asDiagonal();
    P.push_back(std::move(p0));
    for (int k = 0; k + 1 < layers; ++k) {
      Eigen::MatrixXd pk = model.W[k] * P.back();
      for (int t = 0; t < nj; ++t) {
        const auto zc = p.z[k].col(with_j[t]);
        auto blk = pk.middleCols(t * u0, u0);
        for (Eigen::Index r = 0; r < blk.rows(); ++r)
          if (!(zc(r) > 0.0)) blk.row(r).setZero();
      }
      P.push_back(std::move(pk));
    }
    Eigen::MatrixXd q = model.W[layers - 1] * P.back();
    gq.resize(uo, nj * u0);
    for (int t = 0; t < nj; ++t) {
      int s = with_j[t];
      auto qb = q.middleCols(t * u0, u0);
      Eigen::MatrixXd jhat = dout.col(s).asDiagonal() * qb;
      Eigen::MatrixXd r = jhat - *batch[s]->J;
      loss.jacobian += r.squaredNorm();
      Eigen::MatrixXd g = 2.0 * rho * r;  // ∂/∂Ĵ
      gq.middleCols(t * u0, u0) = dout.col(s).asDiagonal() * g;
      if (model.tanh_output) {
        // dependence of 1 − ŷ² on the output pre-activation
        Eigen::VectorXd gd = (g.array() * qb.array()).rowwise().sum();
        Eigen::VectorXd yh = p.out.col(s);
        delta.col(s).array() += gd.array() * (-2.0 * yh.array() * (1.0 - yh.array().square()));
      }
    }
  }
  if (!grads) return loss;

  grads->W.assign(layers, Eigen::MatrixXd());
  grads->b.assign(layers, Eigen::VectorXd());
  // value path (plus the output-derivative term) by ordinary back-propagation
  for (int k = layers - 1; k >= 0; --k) {
    grads->W[k] = delta * p.a[k].transpose();
    grads->b[k] = delta.rowwise().sum();
    if (k > 0) {
      Eigen::MatrixXd back = model.W[k].transpose() * delta;
      delta = (back.array() * (p.z[k - 1].array() > 0.0).cast<double>()).matrix();
    }
  }
  // Jacobian path with masks held fixed
  if (gq.size()) {
    grads->W[layers - 1] += gq * P[layers - 1].transpose();
    Eigen::MatrixXd gp = model.W[layers - 1].transpose() * gq;
    for (int k = layers - 2; k >= 0; --k) {
      for (int t = 0; t < nj; ++t) {
        const auto zc = p.z[k].col(with_j[t]);
        auto blk = gp.middleCols(t * u0, u0);
        for (Eigen::Index r = 0; r < blk.rows(); ++r)
          if (!(zc(r) > 0.0)) blk.row(r).setZero();
      }
      grads->W[k] += gp * P[k].transpose();
      if (k > 0) gp = model.W[k].transpose() * gp;
    }
  }
  return loss;
}

LossNorm parse_loss_norm(std::string_view s) {
  if (s == "sum") return LossNorm::sum;
  if (s == "mean") return LossNorm::mean;
  throw std::invalid_argument("unknown loss norm '" + std::string(s) + "'");
}

TrainHistory train(MlpModel& model, const std::vector<Example>& data, const TrainConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("train: empty training set");
  if (cfg.rho < 0.0) throw std::invalid_argument("train: rho must be non-negative");
  // the mean form is the sum form with ρ/u_in, scaled by 1/u_out
  const bool mean = cfg.norm == LossNorm::mean;
  const double rho = mean ? cfg.rho / model.num_inputs() : cfg.rho;
  const double scale = mean ? 1.0 / model.num_outputs() : 1.0;
  const int layers = model.num_layers();
  const int n = static_cast<int>(data.size());
  const int bs = n <= cfg.batch_size ? n : cfg.batch_size;
  std::vector<Eigen::MatrixXd> mW, vW;
  std::vector<Eigen::VectorXd> mb, vb;
  for (int k = 0; k < layers; ++k) {
    mW.push_back(Eigen::MatrixXd::Zero(model.W[k].rows(), model.W[k].cols()));
    vW.push_back(mW.back());
    mb.push_back(Eigen::VectorXd::Zero(model.b[k].size()));
    vb.push_back(mb.back());
  }
  std::mt19937_64 rng(cfg.seed);
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  TrainHistory hist;
  long step = 0;
  Gradients g;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = cfg.lr0 * std::pow(cfg.decay, epoch / cfg.decay_every);
    if (bs < n) std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0, value = 0.0;
    for (int start = 0; start < n; start += bs) {
      std::vector<const Example*> batch;
      for (int i = start; i < std::min(n, start + bs); ++i) batch.push_back(&data[order[i]]);
      LossParts lp = loss_and_grads(model, batch, rho, &g);
      double t = scale * lp.total(rho);
      if (!std::isfinite(t))
        throw std::runtime_error("non-finite training loss at epoch " + std::to_string(epoch));
      total += t;
      value += scale * lp.value;
      if (mean)
        for (int k = 0; k < layers; ++k) {
          g.W[k] *= scale;
          g.b[k] *= scale;
        }
      ++step;
      double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      for (int k = 0; k < layers; ++k) {
        mW[k] = cfg.beta1 * mW[k] + (1.0 - cfg.beta1) * g.W[k];
        vW[k] = cfg.beta2 * vW[k] + (1.0 - cfg.beta2) * g.W[k].cwiseAbs2();
        model.W[k].array() -= lr * (mW[k].array() / c1) / ((vW[k].array() / c2).sqrt() + cfg.eps);
        mb[k] = cfg.beta1 * mb[k] + (1.0 - cfg.beta1) * g.b[k];
        vb[k] = cfg.beta2 * vb[k] + (1.0 - cfg.beta2) * g.b[k].cwiseAbs2();
        model.b[k].array() -= lr * (mb[k].array() / c1) / ((vb[k].array() / c2).sqrt() + cfg.eps);
      }
    }
    hist.loss.push_back(total / n);
    hist.value_loss.push_back(value / n);
  }
  return hist;
}

nlohmann::json mlp_to_json(const MlpModel& model) {
  using nlohmann::json;
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  json j;
  j["dims"] = model.dims;
  j["hidden_activation"] = "relu";
  j["output_activation"] = model.tanh_output ? "tanh" : "identity";
  j["in_scale"] = vec(model.in_scale);
  j["out_lo"] = vec(model.out_lo);
  j["out_hi"] = vec(model.out_hi);
  j["layers"] = json::array();
  for (int k = 0; k < model.num_layers(); ++k) {
    std::vector<double> w;  // row-major
    for (Eigen::Index r = 0; r < model.W[k].rows(); ++r)
      for (Eigen::Index c = 0; c < model.W[k].cols(); ++c) w.push_back(model.W[k](r, c));
    j["layers"].push_back({{"W", w}, {"b", vec(model.b[k])}});
  }
  return j;
}

MlpModel mlp_from_json(const nlohmann::json& j) {
  MlpModel m;
  m.dims = j.at("dims").get<std::vector<int>>();
  m.tanh_output = j.at("output_activation").get<std::string>() == "tanh";
  auto vec = [](const nlohmann::json& a) {
    auto v = a.get<std::vector<double>>();
    return Eigen::VectorXd(Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
  };
  m.in_scale = vec(j.at("in_scale"));
  m.out_lo = vec(j.at("out_lo"));
  m.out_hi = vec(j.at("out_hi"));
  const auto& layers = j.at("layers");
  if (layers.size() + 1 != m.dims.size()) throw std::invalid_argument("checkpoint: layer count");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    auto w = layers[k].at("W").get<std::vector<double>>();
    Eigen::MatrixXd W(m.dims[k + 1], m.dims[k]);
    if (w.size() != static_cast<std::size_t>(W.size())) throw std::invalid_argument("checkpoint: weight size");
    for (Eigen::Index r = 0, i = 0; r < W.rows(); ++r)
      for (Eigen::Index c = 0; c < W.cols(); ++c) W(r, c) = w[static_cast<std::size_t>(i++)];
    m.W.push_back(W);
    m.b.push_back(vec(layers[k].at("b")));
  }
  return m;
}

}  // namespace opfsense
