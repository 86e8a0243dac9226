#include "symdistill/expr.hpp"

#include <algorithm>
#include <array>
#include <limits>

namespace symdistill {

namespace {

constexpr std::array<std::string_view, kNumOps> kOpNames = {
    "add", "sub",  "mul",   "div",  "sq",    "sqrt_s", "exp",
    "pow_s", "tanh", "asinh", "sinh", "relu",  "erfc"};

}  // namespace

std::string_view op_name(Op op) { return kOpNames[static_cast<size_t>(op)]; }

std::optional<Op> op_from_name(std::string_view name) {
  for (size_t i = 0; i < kOpNames.size(); ++i) {
    if (kOpNames[i] == name) return static_cast<Op>(i);
  }
  return std::nullopt;
}

const std::vector<Op>& all_ops() {
  static const std::vector<Op> ops = [] {
    std::vector<Op> v;
    for (int i = 0; i < kNumOps; ++i) v.push_back(static_cast<Op>(i));
    return v;
  }();
  return ops;
}

void FeatureWindow::set(std::string stream, std::vector<double> lags) {
  for (auto& e : entries_) {
    if (e.first == stream) {
      e.second = std::move(lags);
      return;
    }
  }
  entries_.emplace_back(std::move(stream), std::move(lags));
}

const std::vector<double>* FeatureWindow::find(std::string_view stream) const {
  for (const auto& e : entries_) {
    if (e.first == stream) return &e.second;
  }
  return nullptr;
}

double FeatureWindow::at(std::string_view stream, int lag) const {
  const auto* v = find(stream);
  if (v == nullptr) {
    throw MissingInputError("window has no stream '" + std::string(stream) +
                            "'");
  }
  if (lag < 0 || static_cast<size_t>(lag) >= v->size()) {
    throw MissingInputError("stream '" + std::string(stream) +
                            "' has no lag " + std::to_string(lag));
  }
  return (*v)[static_cast<size_t>(lag)];
}

Expression Expression::constant(double value) {
  if (!std::isfinite(value)) {
    throw std::invalid_argument("expression constants must be finite");
  }
  Expression e;
  Node n;
  n.kind = Node::Kind::cst;
  n.value = value;
  e.nodes_.push_back(n);
  return e;
}

Expression Expression::variable(std::string_view stream, int lag) {
  if (lag < 0) throw std::invalid_argument("variable lag must be >= 0");
  Expression e;
  Node n;
  n.kind = Node::Kind::var;
  n.stream = 0;
  n.lag = static_cast<int16_t>(lag);
  e.nodes_.push_back(n);
  e.streams_.emplace_back(stream);
  e.horizon_ = lag + 1;
  return e;
}

Expression Expression::apply(Op op, Expression a) {
  if (op_is_binary(op)) {
    throw std::invalid_argument("binary operator applied to one child");
  }
  if (!a.valid()) throw std::invalid_argument("invalid child expression");
  Expression e;
  e.streams_ = std::move(a.streams_);
  Node root;
  root.kind = Node::Kind::op;
  root.op = op;
  root.a = 1;
  e.nodes_.reserve(a.nodes_.size() + 1);
  e.nodes_.push_back(root);
  for (Node n : a.nodes_) {
    if (n.kind == Node::Kind::op) {
      n.a += 1;
      if (n.b >= 0) n.b += 1;
    }
    e.nodes_.push_back(n);
  }
  e.recompute_horizon();
  return e;
}

Expression Expression::apply(Op op, Expression a, Expression b) {
  if (!op_is_binary(op)) {
    throw std::invalid_argument("unary operator applied to two children");
  }
  if (!a.valid() || !b.valid()) {
    throw std::invalid_argument("invalid child expression");
  }
  Expression e;
  e.streams_ = a.streams_;
  // Remap b's stream indices into the merged table.
  std::vector<int16_t> remap(b.streams_.size());
  for (size_t i = 0; i < b.streams_.size(); ++i) {
    auto it = std::find(e.streams_.begin(), e.streams_.end(), b.streams_[i]);
    if (it == e.streams_.end()) {
      e.streams_.push_back(b.streams_[i]);
      remap[i] = static_cast<int16_t>(e.streams_.size() - 1);
    } else {
      remap[i] = static_cast<int16_t>(it - e.streams_.begin());
    }
  }
  Node root;
  root.kind = Node::Kind::op;
  root.op = op;
  root.a = 1;
  root.b = static_cast<int32_t>(a.nodes_.size()) + 1;
  e.nodes_.reserve(a.nodes_.size() + b.nodes_.size() + 1);
  e.nodes_.push_back(root);
  for (Node n : a.nodes_) {
    if (n.kind == Node::Kind::op) {
      n.a += 1;
      if (n.b >= 0) n.b += 1;
    }
    e.nodes_.push_back(n);
  }
  const int32_t off = root.b;
  for (Node n : b.nodes_) {
    if (n.kind == Node::Kind::op) {
      n.a += off;
      if (n.b >= 0) n.b += off;
    } else if (n.kind == Node::Kind::var) {
      n.stream = remap[static_cast<size_t>(n.stream)];
    }
    e.nodes_.push_back(n);
  }
  e.recompute_horizon();
  return e;
}

namespace {

// Recursive pre-order copy used by from_nodes/subtree/replaced.
void copy_preorder(const std::vector<Node>& src, int idx,
                   const std::vector<std::string>& src_streams,
                   std::vector<Node>& dst, std::vector<std::string>& streams,
                   int depth) {
  if (depth > 512) throw std::invalid_argument("expression too deep");
  if (idx < 0 || static_cast<size_t>(idx) >= src.size()) {
    throw std::invalid_argument("node index out of range");
  }
  Node n = src[static_cast<size_t>(idx)];
  const int self = static_cast<int>(dst.size());
  switch (n.kind) {
    case Node::Kind::cst:
      if (!std::isfinite(n.value)) {
        throw std::invalid_argument("expression constants must be finite");
      }
      n.a = n.b = -1;
      n.stream = -1;
      dst.push_back(n);
      return;
    case Node::Kind::var: {
      if (n.stream < 0 ||
          static_cast<size_t>(n.stream) >= src_streams.size()) {
        throw std::invalid_argument("variable stream index out of range");
      }
      if (n.lag < 0) throw std::invalid_argument("variable lag must be >= 0");
      const std::string& name = src_streams[static_cast<size_t>(n.stream)];
      auto it = std::find(streams.begin(), streams.end(), name);
      if (it == streams.end()) {
        streams.push_back(name);
        n.stream = static_cast<int16_t>(streams.size() - 1);
      } else {
        n.stream = static_cast<int16_t>(it - streams.begin());
      }
      n.a = n.b = -1;
      dst.push_back(n);
      return;
    }
    case Node::Kind::op: {
      const int a = n.a;
      const int b = n.b;
      dst.push_back(n);
      dst[static_cast<size_t>(self)].a = static_cast<int32_t>(dst.size());
      copy_preorder(src, a, src_streams, dst, streams, depth + 1);
      if (op_is_binary(n.op)) {
        if (b < 0) throw std::invalid_argument("binary operator missing child");
        dst[static_cast<size_t>(self)].b = static_cast<int32_t>(dst.size());
        copy_preorder(src, b, src_streams, dst, streams, depth + 1);
      } else {
        dst[static_cast<size_t>(self)].b = -1;
      }
      return;
    }
  }
}

}  // namespace

Expression Expression::from_nodes(const std::vector<Node>& nodes,
                                  const std::vector<std::string>& streams,
                                  int root) {
  Expression e;
  copy_preorder(nodes, root, streams, e.nodes_, e.streams_, 0);
  e.recompute_horizon();
  return e;
}

void Expression::recompute_horizon() {
  int h = 1;
  for (const Node& n : nodes_) {
    if (n.kind == Node::Kind::var) h = std::max(h, n.lag + 1);
  }
  horizon_ = h;
}

int Expression::depth() const {
  std::vector<int> d(nodes_.size(), 1);
  int best = 0;
  for (size_t i = nodes_.size(); i-- > 0;) {
    const Node& n = nodes_[i];
    if (n.kind == Node::Kind::op) {
      d[i] = 1 + d[static_cast<size_t>(n.a)];
      if (n.b >= 0) d[i] = std::max(d[i], 1 + d[static_cast<size_t>(n.b)]);
    }
    best = std::max(best, d[i]);
  }
  return best;
}

std::vector<double> Expression::constants() const {
  std::vector<double> out;
  for (const Node& n : nodes_) {
    if (n.kind == Node::Kind::cst) out.push_back(n.value);
  }
  return out;
}

int Expression::num_constants() const {
  int c = 0;
  for (const Node& n : nodes_) c += n.kind == Node::Kind::cst;
  return c;
}

Expression Expression::with_constants(std::span<const double> values) const {
  if (values.size() != static_cast<size_t>(num_constants())) {
    throw std::invalid_argument("constant count mismatch");
  }
  Expression e = *this;
  size_t j = 0;
  for (Node& n : e.nodes_) {
    if (n.kind != Node::Kind::cst) continue;
    if (!std::isfinite(values[j])) {
      throw std::invalid_argument("expression constants must be finite");
    }
    n.value = values[j++];
  }
  return e;
}

std::vector<int> Expression::constant_node_indices() const {
  std::vector<int> out;
  for (size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].kind == Node::Kind::cst) out.push_back(static_cast<int>(i));
  }
  return out;
}

Expression Expression::subtree(int node_index) const {
  return from_nodes(nodes_, streams_, node_index);
}

Expression Expression::replaced(int node_index,
                                const Expression& replacement) const {
  if (node_index == 0) return replacement;
  if (node_index < 0 || node_index >= node_count()) {
    throw std::invalid_argument("node index out of range");
  }
  // Graft the replacement arena after ours, pointing the parent at it, then
  // re-canonicalize.
  std::vector<Node> merged = nodes_;
  std::vector<std::string> streams = streams_;
  const int32_t off = static_cast<int32_t>(merged.size());
  std::vector<int16_t> remap(replacement.streams_.size());
  for (size_t i = 0; i < replacement.streams_.size(); ++i) {
    auto it =
        std::find(streams.begin(), streams.end(), replacement.streams_[i]);
    if (it == streams.end()) {
      streams.push_back(replacement.streams_[i]);
      remap[i] = static_cast<int16_t>(streams.size() - 1);
    } else {
      remap[i] = static_cast<int16_t>(it - streams.begin());
    }
  }
  for (Node n : replacement.nodes_) {
    if (n.kind == Node::Kind::op) {
      n.a += off;
      if (n.b >= 0) n.b += off;
    } else if (n.kind == Node::Kind::var) {
      n.stream = remap[static_cast<size_t>(n.stream)];
    }
    merged.push_back(n);
  }
  for (Node& n : merged) {
    if (n.kind != Node::Kind::op) continue;
    if (n.a == node_index) n.a = off;
    if (n.b == node_index) n.b = off;
  }
  return from_nodes(merged, streams, 0);
}

nlohmann::ordered_json Expression::sexpr() const {
  std::vector<nlohmann::ordered_json> built(nodes_.size());
  for (size_t i = nodes_.size(); i-- > 0;) {
    const Node& n = nodes_[i];
    switch (n.kind) {
      case Node::Kind::cst:
        built[i] = nlohmann::ordered_json::array({"c", n.value});
        break;
      case Node::Kind::var:
        built[i] = nlohmann::ordered_json::array(
            {"v", streams_[static_cast<size_t>(n.stream)], n.lag});
        break;
      case Node::Kind::op: {
        auto arr = nlohmann::ordered_json::array({std::string(op_name(n.op))});
        arr.push_back(built[static_cast<size_t>(n.a)]);
        if (n.b >= 0) arr.push_back(built[static_cast<size_t>(n.b)]);
        built[i] = std::move(arr);
        break;
      }
    }
  }
  return built.empty() ? nlohmann::ordered_json() : built[0];
}

int complexity(const Expression& e, const ComplexityWeights& w) {
  int score = e.node_count();
  if (w.op_diversity != 0) {
    bool seen[kNumOps] = {};
    int distinct = 0;
    for (const Node& n : e.nodes()) {
      if (n.kind == Node::Kind::op && !seen[static_cast<size_t>(n.op)]) {
        seen[static_cast<size_t>(n.op)] = true;
        ++distinct;
      }
    }
    score += w.op_diversity * distinct;
  }
  if (w.distinct_vars != 0) {
    std::vector<std::pair<int16_t, int16_t>> seen;
    for (const Node& n : e.nodes()) {
      if (n.kind != Node::Kind::var) continue;
      const std::pair<int16_t, int16_t> key{n.stream, n.lag};
      if (std::find(seen.begin(), seen.end(), key) == seen.end()) {
        seen.push_back(key);
      }
    }
    score += w.distinct_vars * static_cast<int>(seen.size());
  }
  return score;
}

namespace {

struct WindowBinding {
  const Expression* expr;
  const FeatureWindow* window;
  std::vector<const std::vector<double>*> buffers;

  WindowBinding(const Expression& e, const FeatureWindow& w)
      : expr(&e), window(&w) {
    buffers.reserve(e.streams().size());
    for (const auto& name : e.streams()) {
      const auto* buf = w.find(name);
      if (buf == nullptr) {
        throw MissingInputError("window has no stream '" + name + "'");
      }
      buffers.push_back(buf);
    }
  }

  double operator()(int16_t stream, int16_t lag) const {
    const auto& buf = *buffers[static_cast<size_t>(stream)];
    if (static_cast<size_t>(lag) >= buf.size()) {
      throw MissingInputError(
          "stream '" + expr->streams()[static_cast<size_t>(stream)] +
          "' has no lag " + std::to_string(lag));
    }
    return buf[static_cast<size_t>(lag)];
  }
};

}  // namespace

double evaluate(const Expression& e, const FeatureWindow& window) {
  if (!e.valid()) throw std::invalid_argument("invalid expression");
  WindowBinding bind(e, window);
  EvalScratch ws;
  return eval_expr(e, bind, ws);
}

std::vector<double> grad_constants(const Expression& e,
                                   const FeatureWindow& window) {
  if (!e.valid()) throw std::invalid_argument("invalid expression");
  WindowBinding bind(e, window);
  EvalScratch ws;
  const double out = eval_expr(e, bind, ws);
  if (!std::isfinite(out)) {
    throw std::domain_error("expression output is non-finite at this window");
  }
  backprop_expr(e, ws);
  std::vector<double> g;
  const auto& nodes = e.nodes();
  for (size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].kind == Node::Kind::cst) g.push_back(ws.adj[i]);
  }
  return g;
}

std::vector<std::vector<double>> grad_inputs(const Expression& e,
                                             const FeatureWindow& window) {
  if (!e.valid()) throw std::invalid_argument("invalid expression");
  WindowBinding bind(e, window);
  EvalScratch ws;
  const double out = eval_expr(e, bind, ws);
  if (!std::isfinite(out)) {
    throw std::domain_error("expression output is non-finite at this window");
  }
  backprop_expr(e, ws);
  std::vector<std::vector<double>> g(
      e.streams().size(), std::vector<double>(static_cast<size_t>(e.horizon()), 0.0));
  const auto& nodes = e.nodes();
  for (size_t i = 0; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    if (n.kind != Node::Kind::var) continue;
    g[static_cast<size_t>(n.stream)][static_cast<size_t>(n.lag)] += ws.adj[i];
  }
  return g;
}

}  // namespace symdistill
