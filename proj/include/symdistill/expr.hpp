#pragma once

// Symbolic expression trees over lagged feature streams: evaluation,
// reverse-mode differentiation, complexity scoring and serialization.
//
// An Expression is an immutable tree stored as a pre-order arena (node 0 is
// the root, every child index is greater than its parent's). That layout
// makes evaluation a single reverse sweep and backprop a single forward
// sweep, with no recursion in the hot path.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace symdistill {

enum class Op : uint8_t {
  add,
  sub,
  mul,
  div,
  sq,
  sqrt_s,  // sign(x) * sqrt(|x|)
  exp,
  pow_s,  // sign(x) * |x|^y
  tanh,
  asinh,
  sinh,
  relu,
  erfc,
};

inline constexpr int kNumOps = 13;

constexpr bool op_is_binary(Op op) {
  switch (op) {
    case Op::add:
    case Op::sub:
    case Op::mul:
    case Op::div:
    case Op::pow_s:
      return true;
    default:
      return false;
  }
}

std::string_view op_name(Op op);
std::optional<Op> op_from_name(std::string_view name);
const std::vector<Op>& all_ops();

// Non-finite inputs propagate; no clamping anywhere.
inline double op_apply(Op op, double a, double b = 0.0) {
  switch (op) {
    case Op::add:
      return a + b;
    case Op::sub:
      return a - b;
    case Op::mul:
      return a * b;
    case Op::div:
      return a / b;
    case Op::sq:
      return a * a;
    case Op::sqrt_s:
      return std::copysign(std::sqrt(std::fabs(a)), a);
    case Op::exp:
      return std::exp(a);
    case Op::pow_s: {
      if (std::isnan(a) || std::isnan(b)) return a + b;
      const double s = (a > 0.0) ? 1.0 : (a < 0.0 ? -1.0 : 0.0);
      return s * std::pow(std::fabs(a), b);
    }
    case Op::tanh:
      return std::tanh(a);
    case Op::asinh:
      return std::asinh(a);
    case Op::sinh:
      return std::sinh(a);
    case Op::relu:
      if (std::isnan(a)) return a;
      return a > 0.0 ? a : 0.0;
    case Op::erfc:
      return std::erfc(a);
  }
  return std::numeric_limits<double>::quiet_NaN();
}

// Partial derivatives w.r.t. the first/second child. Subgradient 0 at
// non-differentiable points (relu at 0, sqrt_s/pow_s at argument 0).
inline double op_d1(Op op, double a, double b) {
  switch (op) {
    case Op::add:
    case Op::sub:
      return 1.0;
    case Op::mul:
      return b;
    case Op::div:
      return 1.0 / b;
    case Op::sq:
      return 2.0 * a;
    case Op::sqrt_s:
      return a == 0.0 ? 0.0 : 0.5 / std::sqrt(std::fabs(a));
    case Op::exp:
      return std::exp(a);
    case Op::pow_s:
      return a == 0.0 ? 0.0 : b * std::pow(std::fabs(a), b - 1.0);
    case Op::tanh: {
      const double t = std::tanh(a);
      return 1.0 - t * t;
    }
    case Op::asinh:
      return 1.0 / std::sqrt(1.0 + a * a);
    case Op::sinh:
      return std::cosh(a);
    case Op::relu:
      return a > 0.0 ? 1.0 : 0.0;
    case Op::erfc:
      return -1.1283791670955126 * std::exp(-a * a);  // -2/sqrt(pi) e^{-a^2}
  }
  return 0.0;
}

inline double op_d2(Op op, double a, double b) {
  switch (op) {
    case Op::sub:
      return -1.0;
    case Op::add:
      return 1.0;
    case Op::mul:
      return a;
    case Op::div:
      return -a / (b * b);
    case Op::pow_s: {
      if (a == 0.0) return 0.0;
      const double s = a > 0.0 ? 1.0 : -1.0;
      const double fa = std::fabs(a);
      return s * std::pow(fa, b) * std::log(fa);
    }
    default:
      return 0.0;
  }
}

struct Node {
  enum class Kind : uint8_t { op, var, cst };
  Kind kind = Kind::cst;
  Op op = Op::add;
  int32_t a = -1;  // children; op nodes only
  int32_t b = -1;
  int16_t stream = -1;  // var: index into the expression's stream table
  int16_t lag = 0;
  double value = 0.0;  // cst

  bool operator==(const Node&) const = default;
};

// Structural problem with an evaluation request (missing stream or lag);
// distinct from a non-finite numeric result, which is returned, not thrown.
struct MissingInputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Per-stream buffers of the last T values; index 0 is the newest (lag 0).
class FeatureWindow {
 public:
  FeatureWindow() = default;

  void set(std::string stream, std::vector<double> lags);
  const std::vector<double>* find(std::string_view stream) const;
  double at(std::string_view stream, int lag) const;  // throws MissingInputError

  const std::vector<std::pair<std::string, std::vector<double>>>& entries()
      const {
    return entries_;
  }

 private:
  std::vector<std::pair<std::string, std::vector<double>>> entries_;
};

class Expression {
 public:
  Expression() = default;  // invalid; for containers

  static Expression constant(double value);
  static Expression variable(std::string_view stream, int lag);
  static Expression apply(Op op, Expression a);
  static Expression apply(Op op, Expression a, Expression b);

  // Canonicalizes an arbitrary arena: keeps only nodes reachable from
  // `root`, rewrites them in pre-order and rebuilds the stream table in
  // first-use order. Validates arity, lags and constant finiteness.
  static Expression from_nodes(const std::vector<Node>& nodes,
                               const std::vector<std::string>& streams,
                               int root);

  bool valid() const { return !nodes_.empty(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<std::string>& streams() const { return streams_; }
  int node_count() const { return static_cast<int>(nodes_.size()); }
  int horizon() const { return horizon_; }  // max referenced lag + 1, >= 1
  int depth() const;

  std::vector<double> constants() const;  // pre-order == arena order
  int num_constants() const;
  Expression with_constants(std::span<const double> values) const;

  std::vector<int> constant_node_indices() const;
  Expression subtree(int node_index) const;
  Expression replaced(int node_index, const Expression& replacement) const;

  bool operator==(const Expression& other) const {
    return nodes_ == other.nodes_ && streams_ == other.streams_;
  }

  nlohmann::ordered_json sexpr() const;

 private:
  std::vector<Node> nodes_;
  std::vector<std::string> streams_;
  int horizon_ = 1;

  void recompute_horizon();
};

struct ComplexityWeights {
  int op_diversity = 0;   // per distinct operator kind used
  int distinct_vars = 0;  // per distinct (stream, lag) referenced
};

// Default: total node count (operators, variable leaves, constant leaves).
int complexity(const Expression& e, const ComplexityWeights& w = {});

// Low-level evaluation over resolved variables. `var(stream_idx, lag)` must
// return the input value. Scratch buffers avoid per-call allocation.
struct EvalScratch {
  std::vector<double> val;
  std::vector<double> adj;
};

template <class VarFn>
double eval_expr(const Expression& e, VarFn&& var, EvalScratch& ws) {
  const auto& nodes = e.nodes();
  const int n = static_cast<int>(nodes.size());
  ws.val.resize(nodes.size());
  double* val = ws.val.data();
  for (int i = n - 1; i >= 0; --i) {
    const Node& nd = nodes[static_cast<size_t>(i)];
    switch (nd.kind) {
      case Node::Kind::cst:
        val[i] = nd.value;
        break;
      case Node::Kind::var:
        val[i] = var(nd.stream, nd.lag);
        break;
      case Node::Kind::op:
        val[i] = op_is_binary(nd.op)
                     ? op_apply(nd.op, val[nd.a], val[nd.b])
                     : op_apply(nd.op, val[nd.a]);
        break;
    }
  }
  return val[0];
}

// Fills ws.adj with d(output)/d(node value) for every node. Requires a prior
// eval_expr on the same scratch. Returns the output value.
inline double backprop_expr(const Expression& e, EvalScratch& ws) {
  const auto& nodes = e.nodes();
  const int n = static_cast<int>(nodes.size());
  ws.adj.assign(nodes.size(), 0.0);
  double* adj = ws.adj.data();
  const double* val = ws.val.data();
  adj[0] = 1.0;
  for (int i = 0; i < n; ++i) {
    const Node& nd = nodes[static_cast<size_t>(i)];
    if (nd.kind != Node::Kind::op) continue;
    const double g = adj[i];
    if (g == 0.0) continue;
    const double a = val[nd.a];
    const double b = op_is_binary(nd.op) ? val[nd.b] : 0.0;
    adj[nd.a] += g * op_d1(nd.op, a, b);
    if (op_is_binary(nd.op)) adj[nd.b] += g * op_d2(nd.op, a, b);
  }
  return val[0];
}

// Evaluates on a named window. Missing stream/lag throws MissingInputError;
// non-finite intermediates propagate to a non-finite result.
double evaluate(const Expression& e, const FeatureWindow& window);

// d(output)/d(constant_j), pre-order constant order. Throws std::domain_error
// if the output is non-finite at the window.
std::vector<double> grad_constants(const Expression& e,
                                   const FeatureWindow& window);

// d(output)/d(input at (stream, lag)): result[s][lag] aligned with
// e.streams() and lag in [0, horizon).
std::vector<std::vector<double>> grad_inputs(const Expression& e,
                                             const FeatureWindow& window);

}  // namespace symdistill
