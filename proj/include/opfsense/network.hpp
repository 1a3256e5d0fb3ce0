#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include "json.hpp"

namespace opfsense {

/// Raised for malformed case text. `line()` is 1-based, 0 when unknown.
class ParseError : public std::runtime_error {
 public:
  ParseError(int line, const std::string& what);
  int line() const { return line_; }

 private:
  int line_;
};

/// Raised when a parsed case violates a network invariant.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class BusKind { slack, generator, load, zero_injection };

struct Bus {
  int id = 0;
  BusKind kind = BusKind::load;
  double pd = 0.0;  // pu
  double qd = 0.0;
  double vmin = 0.9;
  double vmax = 1.1;
  double gsh = 0.0;
  double bsh = 0.0;
  double vm0 = 1.0;  // solved-case voltage, informational
  double va0_deg = 0.0;
};

struct Branch {
  int from = 0;  // bus ids
  int to = 0;
  double r = 0.0;
  double x = 0.0;
  double b_charge = 0.0;
  double tap = 1.0;  // 1.0 for lines (a zero ratio in the file means 1)
  double shift_deg = 0.0;
  std::optional<double> rate;  // apparent-power rating, pu
  std::optional<double> imax;  // squared-current limit, pu
};

struct Generator {
  int bus = 0;
  double pmin = 0.0;
  double pmax = 0.0;
  double qmin = 0.0;
  double qmax = 0.0;
  double cp = 0.0;  // $/pu
  double cq = 0.0;
  double pg0 = 0.0;  // dispatch and voltage setpoint from the case
  double qg0 = 0.0;
  double vg0 = 1.0;
};

struct Network {
  double base_mva = 100.0;
  std::vector<Bus> buses;
  std::vector<Branch> branches;
  std::vector<Generator> generators;
  int slack_bus = 0;  // bus id
  Eigen::MatrixXcd ybus;
  std::vector<std::string> warnings;

  int num_buses() const { return static_cast<int>(buses.size()); }
  int num_generators() const { return static_cast<int>(generators.size()); }
  int num_branches() const { return static_cast<int>(branches.size()); }

  /// Position of bus `id` in `buses`; throws std::out_of_range.
  int bus_index(int id) const;
  int slack_index() const { return bus_index(slack_bus); }
  /// For every bus position, the index of its generator or -1.
  std::vector<int> generator_at_bus() const;
};

enum class CostMode { reject, linearize_at_midpoint };
enum class GenBusLoads { reject, drop };
enum class FlowLimit { current, off };

struct ParseOptions {
  CostMode cost_mode = CostMode::reject;
  GenBusLoads gen_bus_loads = GenBusLoads::reject;
  FlowLimit flow_limit = FlowLimit::current;
  /// When set, every generator gets this active cost ($/pu) and zero reactive cost.
  std::optional<double> uniform_cost;
};

CostMode parse_cost_mode(std::string_view s);
GenBusLoads parse_gen_bus_loads(std::string_view s);
FlowLimit parse_flow_limit(std::string_view s);

/// Parses MATPOWER case text (numeric-matrix subset) into a validated
/// per-unit network with its admittance matrix built.
Network parse_case(std::string_view text, const ParseOptions& options = {});
Network load_case_file(const std::string& path, const ParseOptions& options = {});

/// Checks the network invariants and infers bus kinds from generator placement.
void validate(Network& net);

/// Π-model stamping of series impedances, charging, taps, phase shifts and shunts.
Eigen::MatrixXcd build_ybus(const Network& net);

/// MATPOWER text that parses back to the same per-unit network.
std::string serialize_case(const Network& net);

/// Canonical per-unit JSON: {baseMVA, slack_bus, buses[], branches[], generators[]}.
nlohmann::json network_to_json(const Network& net);
Network network_from_json(const nlohmann::json& j);

/// FNV-1a over the canonical JSON dump, as 16 hex digits.
std::string network_hash(const Network& net);

/// Per-unit equality with a relative tolerance on real fields; the MVA base itself is not compared.
bool networks_equal(const Network& a, const Network& b, double rel_tol = 0.0);

std::string_view to_string(BusKind kind);

}  // namespace opfsense
