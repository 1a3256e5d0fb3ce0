#include "opfsense/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "opfsense/powerflow.hpp"

namespace opfsense {

using nlohmann::json;

Eigen::VectorXd constraint_violations(const Network& net, const QcqpModel& model, const Eigen::VectorXd& v,
                                      const Eigen::VectorXd& xg) {
  std::vector<double> out;
  const int nb = model.nb, ng = model.ng;
  for (int n = 0; n < nb; ++n) {
    if (model.bus_gen[n] >= 0) continue;
    double vm = std::hypot(v(n), v(nb + n));
    out.push_back(std::max(0.0, vm - net.buses[n].vmax));
    out.push_back(std::max(0.0, net.buses[n].vmin - vm));
  }
  for (const auto& row : model.ineq) {
    if (row.kind != IneqKind::flow || !std::isfinite(row.f) || row.f <= 0.0) continue;
    double current = std::sqrt(std::max(0.0, v.dot(row.M * v)));
    double limit = std::sqrt(row.f);
    out.push_back(std::max(0.0, current - limit) / limit);
  }
  auto relative = [&](double x, double lo, double hi) {
    double scale = std::max({std::abs(lo), std::abs(hi), 1e-12});
    return std::make_pair(std::max(0.0, x - hi) / scale, std::max(0.0, lo - x) / scale);
  };
  for (int g = 0; g < ng; ++g) {
    const Generator& gen = net.generators[g];
    auto [up, lo] = relative(xg(ng + g), gen.qmin, gen.qmax);
    out.push_back(up);
    out.push_back(lo);
  }
  int ref = model.bus_gen[model.slack];
  auto [up, lo] = relative(xg(ref), net.generators[ref].pmin, net.generators[ref].pmax);
  out.push_back(up);
  out.push_back(lo);
  return Eigen::Map<Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size()));
}

ViolationStats violation_report(const Network& net, const QcqpModel& model,
                                const std::vector<Eigen::VectorXd>& thetas,
                                const std::vector<Eigen::VectorXd>& predictions, double threshold) {
  if (thetas.size() != predictions.size()) throw std::invalid_argument("violation_report: size mismatch");
  ViolationStats st;
  st.threshold = threshold;
  double sum = 0.0;
  long entries = 0, count = 0;
  for (std::size_t s = 0; s < thetas.size(); ++s) {
    RecoveredState rs = state_from_prediction(net, model, thetas[s], predictions[s]);
    if (!rs.pf.converged) {
      ++st.pf_failures;
      continue;
    }
    Eigen::VectorXd viol = constraint_violations(net, model, rs.v, rs.xg);
    ++st.instances;
    sum += viol.sum();
    entries += viol.size();
    count += (viol.array() > threshold).count();
    if (viol.size()) st.max_violation = std::max(st.max_violation, viol.maxCoeff());
  }
  if (st.instances > 0) {
    st.count_per_instance = static_cast<double>(count) / st.instances;
    st.mean_violation = entries ? sum / static_cast<double>(entries) : 0.0;
  }
  return st;
}

MlpModel make_predictor(const Dataset& ds, const QcqpModel& model, const std::vector<int>& hidden,
                        bool scale_inputs, std::uint64_t seed, WeightInit init) {
  std::vector<int> dims;
  dims.push_back(model.num_params());
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(2 * model.ng - 1);
  MlpModel net = make_mlp(dims, seed, init);
  output_box(ds.network, model, net.out_lo, net.out_hi);
  for (Eigen::Index i = 0; i < net.out_lo.size(); ++i)
    if (!(net.out_hi(i) > net.out_lo(i)))
      throw std::invalid_argument("predictor: output " + ds.outputs[static_cast<std::size_t>(i)] +
                                  " has an empty range");
  if (scale_inputs)
    for (Eigen::Index i = 0; i < net.in_scale.size(); ++i)
      if (model.nominal_theta(i) != 0.0) net.in_scale(i) = 1.0 / model.nominal_theta(i);
  return net;
}

std::vector<Example> make_examples(const Dataset& ds, const MlpModel& net, const std::vector<int>& indices) {
  std::vector<Example> out;
  out.reserve(indices.size());
  for (int i : indices) {
    const TrainingSample& s = ds.samples[static_cast<std::size_t>(i)];
    Example e;
    e.theta = s.theta;
    e.y = scale_output(net, s.y);
    if (s.has_jacobian) e.J = scale_jacobian(net, s.J);
    out.push_back(std::move(e));
  }
  return out;
}

namespace {

std::string label_hash(const std::vector<Example>& ex) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& e : ex)
    for (Eigen::Index i = 0; i < e.y.size(); ++i) {
      unsigned char bytes[sizeof(double)];
      double x = e.y(i);
      std::memcpy(bytes, &x, sizeof x);
      for (unsigned char c : bytes) h = (h ^ c) * 1099511628211ULL;
    }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

double mse(const MlpModel& net, const std::vector<Example>& ex, Eigen::VectorXd* per_output) {
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(net.num_outputs());
  for (const auto& e : ex) acc += (forward(net, e.theta) - e.y).array().square().matrix();
  if (ex.empty()) return 0.0;
  acc /= static_cast<double>(ex.size());
  if (per_output) *per_output = acc;
  return acc.mean();
}

}  // namespace

std::vector<RunResult> run_experiment(const Dataset& ds, const ExperimentConfig& cfg) {
  const QcqpModel model = ds.model();
  const std::vector<int> pool = ds.usable_indices();
  for (int size : cfg.plan.sizes)
    if (size >= static_cast<int>(pool.size())) throw std::invalid_argument("empty test set");
  const std::vector<Split> splits = split(pool, cfg.plan);
  std::vector<RunResult> results;
  for (const Split& sp : splits) {
    const std::uint64_t seed = cfg.init_seed + 1000003ULL * static_cast<std::uint64_t>(sp.size) +
                               static_cast<std::uint64_t>(sp.run);
    const MlpModel init = make_predictor(ds, model, cfg.hidden, cfg.scale_inputs, seed, cfg.init);
    const std::vector<Example> train_set = make_examples(ds, init, sp.train);
    const std::vector<Example> test_set = make_examples(ds, init, sp.test);
    for (const Variant& var : cfg.variants) {
      RunResult r;
      r.size = sp.size;
      r.run = sp.run;
      r.variant = var.name;
      r.rho = var.rho;
      r.n_train = static_cast<int>(train_set.size());
      r.n_test = static_cast<int>(test_set.size());
      for (const auto& e : train_set) r.n_train_jacobians += e.J.has_value();
      r.label_hash = label_hash(train_set);
      MlpModel net = init;
      TrainConfig tc = cfg.train;
      tc.rho = var.rho;
      if (!cfg.epochs_per_size.empty()) {
        auto it = std::find(cfg.plan.sizes.begin(), cfg.plan.sizes.end(), sp.size);
        tc.epochs = cfg.epochs_per_size.at(static_cast<std::size_t>(it - cfg.plan.sizes.begin()));
      }
      tc.seed = cfg.train.seed + static_cast<std::uint64_t>(sp.run);
      try {
        auto t0 = std::chrono::steady_clock::now();
        TrainHistory hist = train(net, train_set, tc);
        r.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        r.loss_curve = std::move(hist.loss);
        r.value_curve = std::move(hist.value_loss);
      } catch (const std::exception& e) {
        r.error = e.what();
        results.push_back(std::move(r));
        continue;
      }
      r.train_mse = mse(net, train_set, nullptr);
      r.test_mse = mse(net, test_set, &r.test_mse_per_output);
      if (cfg.violations) {
        std::vector<Eigen::VectorXd> thetas, preds;
        for (const auto& e : test_set) {
          thetas.push_back(e.theta);
          preds.push_back(unscale_output(net, forward(net, e.theta)));
        }
        r.violations = violation_report(ds.network, model, thetas, preds);
      }
      results.push_back(std::move(r));
    }
  }
  return results;
}

std::vector<SummaryRow> summarize(const std::vector<RunResult>& results) {
  std::vector<SummaryRow> rows;
  for (const RunResult& r : results) {
    if (!r.error.empty()) continue;
    auto it = std::find_if(rows.begin(), rows.end(),
                           [&](const SummaryRow& s) { return s.size == r.size && s.variant == r.variant; });
    if (it == rows.end()) {
      rows.push_back({});
      it = rows.end() - 1;
      it->size = r.size;
      it->variant = r.variant;
    }
    it->runs += 1;
    it->mean_train_mse += r.train_mse;
    it->mean_test_mse += r.test_mse;
    it->mean_violation_count += r.violations.count_per_instance;
    it->mean_max_violation += r.violations.max_violation;
    it->mean_mean_violation += r.violations.mean_violation;
  }
  for (auto& s : rows) {
    s.mean_train_mse /= s.runs;
    s.mean_test_mse /= s.runs;
    s.mean_violation_count /= s.runs;
    s.mean_max_violation /= s.runs;
    s.mean_mean_violation /= s.runs;
  }
  return rows;
}

namespace {

std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

/// Polyline chart with a linear or logarithmic y axis.
class SvgChart {
 public:
  SvgChart(std::string title, std::string xlabel, std::string ylabel, bool logy)
      : title_(std::move(title)), xlabel_(std::move(xlabel)), ylabel_(std::move(ylabel)), logy_(logy) {}

  void add(std::string name, std::vector<double> x, std::vector<double> y, std::string colour) {
    series_.push_back({std::move(name), std::move(x), std::move(y), std::move(colour)});
  }

  std::string render() const {
    const double w = 720, h = 440, l = 70, r = 160, t = 40, b = 50;
    double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
    for (const auto& s : series_)
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        double y = ty(s.y[i]);
        if (!std::isfinite(y)) continue;
        x0 = std::min(x0, s.x[i]);
        x1 = std::max(x1, s.x[i]);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
    if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    auto px = [&](double x) { return l + (x - x0) / (x1 - x0) * (w - l - r); };
    auto py = [&](double y) { return h - b - (y - y0) / (y1 - y0) * (h - t - b); };
    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title_ << "</text>\n";
    o << "<line x1=\"" << l << "\" y1=\"" << h - b << "\" x2=\"" << w - r << "\" y2=\"" << h - b
      << "\" stroke=\"black\"/>\n";
    o << "<line x1=\"" << l << "\" y1=\"" << t << "\" x2=\"" << l << "\" y2=\"" << h - b << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
      double xv = x0 + (x1 - x0) * k / 4, yv = y0 + (y1 - y0) * k / 4;
      o << "<text x=\"" << num(px(xv)) << "\" y=\"" << h - b + 16 << "\" text-anchor=\"middle\">" << num(xv)
        << "</text>\n";
      o << "<text x=\"" << l - 6 << "\" y=\"" << num(py(yv) + 4) << "\" text-anchor=\"end\">"
        << num(logy_ ? std::pow(10.0, yv) : yv) << "</text>\n";
    }
    o << "<text x=\"" << (l + w - r) / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\">" << xlabel_
      << "</text>\n";
    o << "<text x=\"16\" y=\"" << (t + h - b) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << (t + h - b) / 2 << ")\">" << ylabel_ << "</text>\n";
    for (std::size_t k = 0; k < series_.size(); ++k) {
      const auto& s = series_[k];
      o << "<polyline fill=\"none\" stroke=\"" << s.colour << "\" stroke-width=\"1.2\" points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        double y = ty(s.y[i]);
        if (!std::isfinite(y)) continue;
        o << num(px(s.x[i])) << ',' << num(py(y)) << ' ';
      }
      o << "\"><title>" << s.name << "</title></polyline>\n";
    }
    // legend: one entry per colour
    std::vector<std::pair<std::string, std::string>> legend;
    for (const auto& s : series_) {
      std::string label = s.name.substr(0, s.name.find(' '));
      if (std::none_of(legend.begin(), legend.end(), [&](const auto& e) { return e.first == label; }))
        legend.emplace_back(label, s.colour);
    }
    for (std::size_t k = 0; k < legend.size(); ++k) {
      double y = t + 10 + 18.0 * static_cast<double>(k);
      o << "<line x1=\"" << w - r + 12 << "\" y1=\"" << y << "\" x2=\"" << w - r + 36 << "\" y2=\"" << y
        << "\" stroke=\"" << legend[k].second << "\" stroke-width=\"2\"/>\n";
      o << "<text x=\"" << w - r + 42 << "\" y=\"" << y + 4 << "\">" << legend[k].first << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
  }

 private:
  struct Series {
    std::string name;
    std::vector<double> x, y;
    std::string colour;
  };
  double ty(double y) const { return logy_ ? (y > 0 ? std::log10(y) : NAN) : y; }
  std::string title_, xlabel_, ylabel_;
  bool logy_;
  std::vector<Series> series_;
};

const char* colour_for(std::size_t k) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  return palette[k % 6];
}

std::size_t variant_slot(std::vector<std::string>& seen, const std::string& name) {
  auto it = std::find(seen.begin(), seen.end(), name);
  if (it != seen.end()) return static_cast<std::size_t>(it - seen.begin());
  seen.push_back(name);
  return seen.size() - 1;
}

}  // namespace

std::string runs_csv(const std::vector<RunResult>& results) {
  std::ostringstream o;
  o << "size,run,variant,rho,n_train,n_test,n_train_jacobians,train_mse,test_mse,violations_per_instance,"
       "max_violation,mean_violation,pf_failures,label_hash,error\n";
  for (const auto& r : results)
    o << r.size << ',' << r.run << ',' << csv_field(r.variant) << ',' << num(r.rho) << ',' << r.n_train << ','
      << r.n_test << ',' << r.n_train_jacobians << ',' << num(r.train_mse) << ',' << num(r.test_mse) << ','
      << num(r.violations.count_per_instance) << ',' << num(r.violations.max_violation) << ','
      << num(r.violations.mean_violation) << ',' << r.violations.pf_failures << ',' << r.label_hash << ','
      << csv_field(r.error) << '\n';
  return o.str();
}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::ostringstream o;
  o << "size,variant,runs,mean_train_mse,mean_test_mse,mean_test_mse_x1e3,mean_violations_per_instance,"
       "mean_max_violation,mean_mean_violation\n";
  for (const auto& s : rows)
    o << s.size << ',' << csv_field(s.variant) << ',' << s.runs << ',' << num(s.mean_train_mse) << ','
      << num(s.mean_test_mse) << ',' << num(1e3 * s.mean_test_mse) << ',' << num(s.mean_violation_count) << ','
      << num(s.mean_max_violation) << ',' << num(s.mean_mean_violation) << '\n';
  return o.str();
}

std::string loss_curves_csv(const std::vector<RunResult>& results) {
  std::ostringstream o;
  o << "size,run,variant,epoch,loss,value_loss\n";
  for (const auto& r : results)
    for (std::size_t e = 0; e < r.loss_curve.size(); ++e)
      o << r.size << ',' << r.run << ',' << csv_field(r.variant) << ',' << e << ',' << num(r.loss_curve[e]) << ','
        << num(r.value_curve[e]) << '\n';
  return o.str();
}

std::string loss_curves_svg(const std::vector<RunResult>& results) {
  SvgChart chart("Training loss", "epoch", "loss per sample", true);
  std::vector<std::string> seen;
  for (const auto& r : results) {
    if (r.loss_curve.empty()) continue;
    std::vector<double> x(r.loss_curve.size());
    for (std::size_t e = 0; e < x.size(); ++e) x[e] = static_cast<double>(e);
    chart.add(r.variant + " size " + std::to_string(r.size) + " run " + std::to_string(r.run), x, r.loss_curve,
              colour_for(variant_slot(seen, r.variant)));
  }
  return chart.render();
}

std::string test_mse_svg(const std::vector<SummaryRow>& rows) {
  SvgChart chart("Mean test MSE", "training size", "test MSE (scaled outputs)", true);
  std::vector<std::string> seen;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_variant;
  for (const auto& s : rows) {
    variant_slot(seen, s.variant);
    by_variant[s.variant].first.push_back(s.size);
    by_variant[s.variant].second.push_back(s.mean_test_mse);
  }
  for (std::size_t k = 0; k < seen.size(); ++k)
    chart.add(seen[k], by_variant[seen[k]].first, by_variant[seen[k]].second, colour_for(k));
  return chart.render();
}

json results_to_json(const std::vector<RunResult>& results) {
  json a = json::array();
  for (const auto& r : results) {
    std::vector<double> per(r.test_mse_per_output.data(), r.test_mse_per_output.data() + r.test_mse_per_output.size());
    a.push_back({{"size", r.size},
                 {"run", r.run},
                 {"variant", r.variant},
                 {"rho", r.rho},
                 {"n_train", r.n_train},
                 {"n_test", r.n_test},
                 {"n_train_jacobians", r.n_train_jacobians},
                 {"train_mse", r.train_mse},
                 {"test_mse", r.test_mse},
                 {"test_mse_per_output", per},
                 {"train_seconds", r.train_seconds},
                 {"loss_curve", r.loss_curve},
                 {"value_curve", r.value_curve},
                 {"label_hash", r.label_hash},
                 {"violations",
                  {{"instances", r.violations.instances},
                   {"pf_failures", r.violations.pf_failures},
                   {"count_per_instance", r.violations.count_per_instance},
                   {"max_violation", r.violations.max_violation},
                   {"mean_violation", r.violations.mean_violation},
                   {"threshold", r.violations.threshold}}},
                 {"error", r.error}});
  }
  return a;
}

std::vector<RunResult> results_from_json(const json& j) {
  std::vector<RunResult> out;
  for (const auto& e : j) {
    RunResult r;
    r.size = e.at("size").get<int>();
    r.run = e.at("run").get<int>();
    r.variant = e.at("variant").get<std::string>();
    r.rho = e.at("rho").get<double>();
    r.n_train = e.at("n_train").get<int>();
    r.n_test = e.at("n_test").get<int>();
    r.n_train_jacobians = e.at("n_train_jacobians").get<int>();
    r.train_mse = e.at("train_mse").get<double>();
    r.test_mse = e.at("test_mse").get<double>();
    auto per = e.at("test_mse_per_output").get<std::vector<double>>();
    r.test_mse_per_output = Eigen::Map<Eigen::VectorXd>(per.data(), static_cast<Eigen::Index>(per.size()));
    r.train_seconds = e.at("train_seconds").get<double>();
    r.loss_curve = e.at("loss_curve").get<std::vector<double>>();
    r.value_curve = e.at("value_curve").get<std::vector<double>>();
    r.label_hash = e.at("label_hash").get<std::string>();
    const auto& v = e.at("violations");
    r.violations.instances = v.at("instances").get<int>();
    r.violations.pf_failures = v.at("pf_failures").get<int>();
    r.violations.count_per_instance = v.at("count_per_instance").get<double>();
    r.violations.max_violation = v.at("max_violation").get<double>();
    r.violations.mean_violation = v.at("mean_violation").get<double>();
    r.violations.threshold = v.at("threshold").get<double>();
    r.error = e.at("error").get<std::string>();
    out.push_back(std::move(r));
  }
  return out;
}

void emit_reports(const std::vector<RunResult>& results, const std::string& dir) {
  if (results.empty()) throw std::invalid_argument("emit_reports: no results");
  std::filesystem::create_directories(dir);
  auto write = [&](const std::string& name, const std::string& text) {
    std::string path = (std::filesystem::path(dir) / name).string();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f << text;
    if (!f) throw std::runtime_error("write failed: " + path);
  };
  std::vector<SummaryRow> rows = summarize(results);
  write("runs.csv", runs_csv(results));
  write("summary.csv", summary_csv(rows));
  write("loss_curves.csv", loss_curves_csv(results));
  write("loss_curves.svg", loss_curves_svg(results));
  write("test_mse.svg", test_mse_svg(rows));
  json timing = json::array();
  for (const auto& r : results)
    timing.push_back({{"size", r.size}, {"run", r.run}, {"variant", r.variant}, {"train_seconds", r.train_seconds}});
  write("timing.json", timing.dump(2) + "\n");
}

}  // namespace opfsense
