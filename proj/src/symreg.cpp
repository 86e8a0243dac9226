#include "symdistill/symreg.hpp"

#include <algorithm>
#include <functional>
#include <thread>

#include "symdistill/parse.hpp"

namespace symdistill {

namespace {

// Tags for RNG stream derivation.
enum : uint64_t { kTagSplit = 1, kTagInit = 2, kTagIter = 3, kTagSub = 4 };

struct BoundEval {
  const ScaledDb* db;
  const std::vector<int>* bind;
  size_t record;

  double operator()(int16_t stream, int16_t lag) const {
    const size_t s = static_cast<size_t>((*bind)[static_cast<size_t>(stream)]);
    return db->value(s, record, lag);
  }
};

double split_mean(const DbSplit& split) {
  double m = 0.0;
  for (size_t i : split.indices) m += split.db->y[i];
  return split.indices.empty() ? 0.0 : m / static_cast<double>(split.indices.size());
}

}  // namespace

void SRConfig::validate() const {
  if (population < 2) throw std::invalid_argument("population must be >= 2");
  if (iterations < 1) throw std::invalid_argument("iterations must be >= 1");
  if (max_lag < 1) throw std::invalid_argument("max_lag must be >= 1");
  if (operators.empty()) throw std::invalid_argument("operator set is empty");
  if (val_fraction <= 0.0 || val_fraction >= 1.0) {
    throw std::invalid_argument("val_fraction must be in (0, 1)");
  }
  if (tournament_size < 1) {
    throw std::invalid_argument("tournament_size must be >= 1");
  }
}

bool SRConfig::allows(Op op) const {
  return std::find(operators.begin(), operators.end(), op) != operators.end();
}

std::vector<Op> SRConfig::unary_subset() const {
  std::vector<Op> v;
  for (Op op : operators) {
    if (!op_is_binary(op)) v.push_back(op);
  }
  return v;
}

std::vector<Op> SRConfig::binary_subset() const {
  std::vector<Op> v;
  for (Op op : operators) {
    if (op_is_binary(op)) v.push_back(op);
  }
  return v;
}

bool ParetoFront::consider(Individual ind) {
  if (!ind.valid()) return false;
  auto it = entries_.find(ind.complexity);
  if (it == entries_.end()) {
    entries_.emplace(ind.complexity, std::move(ind));
    return true;
  }
  if (ind.mse < it->second.mse) {
    it->second = std::move(ind);
    return true;
  }
  return false;
}

std::vector<Individual> ParetoFront::pruned() const {
  std::vector<Individual> out;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& [c, ind] : entries_) {
    if (ind.mse < best) {
      best = ind.mse;
      out.push_back(ind);
    }
  }
  return out;
}

double ParetoFront::best_r2() const {
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& [c, ind] : entries_) best = std::max(best, ind.r2);
  return best;
}

nlohmann::ordered_json ParetoFront::to_json() const {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& [c, ind] : entries_) {
    nlohmann::ordered_json j;
    j["complexity"] = c;
    j["mse"] = ind.mse;
    j["r2"] = ind.r2;
    j["expr_infix"] = render(ind.expr);
    j["expr_sexpr"] = ind.expr.sexpr();
    arr.push_back(std::move(j));
  }
  return arr;
}

ParetoFront ParetoFront::from_json(const nlohmann::ordered_json& j,
                                   int max_lag) {
  ParetoFront f;
  for (const auto& e : j) {
    Individual ind;
    ind.complexity = e.at("complexity").get<int>();
    ind.mse = e.at("mse").get<double>();
    ind.r2 = e.at("r2").get<double>();
    ind.expr = parse_expression(e.at("expr_infix").get<std::string>(), max_lag);
    f.entries_[ind.complexity] = std::move(ind);
  }
  return f;
}

std::pair<double, double> score(const Expression& e, const DbSplit& split) {
  const ScaledDb& db = *split.db;
  const auto bind = bind_streams(e, db);
  EvalScratch ws;
  double ss_res = 0.0;
  double sum_y = 0.0, sum_y2 = 0.0;
  BoundEval ev{&db, &bind, 0};
  for (size_t i : split.indices) {
    ev.record = i;
    const double pred = eval_expr(e, ev, ws);
    if (!std::isfinite(pred)) {
      return {std::numeric_limits<double>::infinity(),
              -std::numeric_limits<double>::infinity()};
    }
    const double y = db.y[i];
    const double d = pred - y;
    ss_res += d * d;
    sum_y += y;
    sum_y2 += y * y;
  }
  const double n = static_cast<double>(split.indices.size());
  if (n == 0.0) {
    return {std::numeric_limits<double>::infinity(),
            -std::numeric_limits<double>::infinity()};
  }
  const double mse = ss_res / n;
  const double mean = sum_y / n;
  const double ss_tot = sum_y2 - n * mean * mean;
  double r2;
  if (ss_tot > 0.0) {
    r2 = 1.0 - ss_res / ss_tot;
  } else {
    r2 = ss_res == 0.0 ? 1.0 : -std::numeric_limits<double>::infinity();
  }
  return {mse, r2};
}

namespace {

double train_mse_at(const Expression& e, const std::vector<double>& consts,
                    const DbSplit& split, const std::vector<int>& bind,
                    EvalScratch& ws) {
  const Expression cur = e.with_constants(consts);
  const ScaledDb& db = *split.db;
  BoundEval ev{&db, &bind, 0};
  double ss = 0.0;
  for (size_t i : split.indices) {
    ev.record = i;
    const double pred = eval_expr(cur, ev, ws);
    if (!std::isfinite(pred)) return std::numeric_limits<double>::infinity();
    const double d = pred - db.y[i];
    ss += d * d;
  }
  return ss / static_cast<double>(split.indices.size());
}

}  // namespace

Expression optimize_constants(const Expression& e, const DbSplit& train,
                              const ConstantOptConfig& cfg) {
  const int nc = e.num_constants();
  if (nc == 0 || train.indices.empty() || cfg.steps <= 0) return e;
  const auto bind = bind_streams(e, *train.db);
  EvalScratch ws;
  std::vector<double> c = e.constants();
  double loss = train_mse_at(e, c, train, bind, ws);
  if (!std::isfinite(loss)) return e;

  const ScaledDb& db = *train.db;
  const double inv_n = 1.0 / static_cast<double>(train.indices.size());
  std::vector<double> grad(static_cast<size_t>(nc));
  std::vector<double> trial(static_cast<size_t>(nc));
  double lr = cfg.lr;
  Expression cur = e;

  for (int step = 0; step < cfg.steps; ++step) {
    cur = cur.with_constants(c);
    std::fill(grad.begin(), grad.end(), 0.0);
    BoundEval ev{&db, &bind, 0};
    bool bad = false;
    for (size_t i : train.indices) {
      ev.record = i;
      const double pred = eval_expr(cur, ev, ws);
      if (!std::isfinite(pred)) {
        bad = true;
        break;
      }
      backprop_expr(cur, ws);
      const double coef = 2.0 * (pred - db.y[i]) * inv_n;
      size_t j = 0;
      const auto& nodes = cur.nodes();
      for (size_t k = 0; k < nodes.size(); ++k) {
        if (nodes[k].kind == Node::Kind::cst) {
          grad[j++] += coef * ws.adj[k];
        }
      }
    }
    if (bad) break;
    double gnorm2 = 0.0;
    for (double g : grad) gnorm2 += g * g;
    if (gnorm2 < 1e-24) break;

    // Backtracking: accept only strict improvement.
    bool improved = false;
    for (int half = 0; half < 24; ++half) {
      bool finite = true;
      for (int j = 0; j < nc; ++j) {
        trial[static_cast<size_t>(j)] =
            c[static_cast<size_t>(j)] - lr * grad[static_cast<size_t>(j)];
        finite = finite && std::isfinite(trial[static_cast<size_t>(j)]);
      }
      const double trial_loss =
          finite ? train_mse_at(e, trial, train, bind, ws)
                 : std::numeric_limits<double>::infinity();
      if (trial_loss < loss) {
        c = trial;
        loss = trial_loss;
        improved = true;
        lr *= 2.0;
        break;
      }
      lr *= 0.5;
    }
    if (!improved) break;
  }
  return e.with_constants(c);
}

Mutator::Mutator(const SRConfig& cfg, std::vector<std::string> streams)
    : cfg_(cfg),
      streams_(std::move(streams)),
      unary_(cfg.unary_subset()),
      binary_(cfg.binary_subset()) {
  if (streams_.empty()) {
    throw std::invalid_argument("mutator needs at least one stream");
  }
}

Expression Mutator::random_leaf(Rng& rng) const {
  if (rng.bernoulli(0.6)) {
    const auto& s = streams_[rng.index(streams_.size())];
    // Lags biased toward the recent past; deep lags still reachable.
    const int lag = rng.bernoulli(0.5)
                        ? static_cast<int>(rng.uniform_int(0, std::min(3, cfg_.max_lag - 1)))
                        : static_cast<int>(rng.uniform_int(0, cfg_.max_lag - 1));
    return Expression::variable(s, lag);
  }
  return Expression::constant(rng.normal());
}

Expression Mutator::random_tree(Rng& rng, int max_depth) const {
  if (max_depth <= 0 || rng.bernoulli(0.3)) return random_leaf(rng);
  const size_t total = unary_.size() + binary_.size();
  const size_t pick = rng.index(total);
  if (pick < unary_.size()) {
    return Expression::apply(unary_[pick], random_tree(rng, max_depth - 1));
  }
  const Op op = binary_[pick - unary_.size()];
  return Expression::apply(op, random_tree(rng, max_depth - 1),
                           random_tree(rng, max_depth - 1));
}

bool Mutator::admissible(const Expression& e) const {
  if (complexity(e) > cfg_.max_complexity) return false;
  if (e.depth() > cfg_.max_depth) return false;
  if (e.horizon() > cfg_.max_lag) return false;
  return true;
}

std::optional<Expression> Mutator::try_mutation(size_t kind,
                                                const Expression& parent,
                                                Rng& rng,
                                                const Expression* donor) const {
  const auto& nodes = parent.nodes();
  switch (kind) {
    case 0: {  // replace operator, arity preserved
      std::vector<int> ops;
      for (size_t i = 0; i < nodes.size(); ++i) {
        if (nodes[i].kind == Node::Kind::op) ops.push_back(static_cast<int>(i));
      }
      if (ops.empty()) return std::nullopt;
      const int idx = ops[rng.index(ops.size())];
      const Node& n = nodes[static_cast<size_t>(idx)];
      const auto& pool = op_is_binary(n.op) ? binary_ : unary_;
      std::vector<Op> alt;
      for (Op op : pool) {
        if (op != n.op) alt.push_back(op);
      }
      if (alt.empty()) return std::nullopt;
      std::vector<Node> copy = nodes;
      copy[static_cast<size_t>(idx)].op = alt[rng.index(alt.size())];
      return Expression::from_nodes(copy, parent.streams(), 0);
    }
    case 1: {  // perturb constant (multiplicative log-normal jitter)
      const auto consts = parent.constant_node_indices();
      if (consts.empty()) return std::nullopt;
      const int idx = consts[rng.index(consts.size())];
      std::vector<Node> copy = nodes;
      double v = copy[static_cast<size_t>(idx)].value * std::exp(rng.normal(0.0, 0.4));
      if (v == 0.0) v = rng.normal(0.0, 1.0);
      if (!std::isfinite(v)) return std::nullopt;
      copy[static_cast<size_t>(idx)].value = v;
      return Expression::from_nodes(copy, parent.streams(), 0);
    }
    case 2: {  // insert unary above a random node
      if (unary_.empty()) return std::nullopt;
      const int idx = static_cast<int>(rng.index(nodes.size()));
      const Op op = unary_[rng.index(unary_.size())];
      return parent.replaced(
          idx, Expression::apply(op, parent.subtree(idx)));
    }
    case 3: {  // replace subtree with a fresh random tree
      const int idx = static_cast<int>(rng.index(nodes.size()));
      return parent.replaced(idx, random_tree(rng, 3));
    }
    case 4: {  // delete an operator node, splicing one child up
      std::vector<int> ops;
      for (size_t i = 0; i < nodes.size(); ++i) {
        if (nodes[i].kind == Node::Kind::op) ops.push_back(static_cast<int>(i));
      }
      if (ops.empty()) return std::nullopt;
      const int idx = ops[rng.index(ops.size())];
      const Node& n = nodes[static_cast<size_t>(idx)];
      const int child =
          (n.b >= 0 && rng.bernoulli(0.5)) ? n.b : n.a;
      return parent.replaced(idx, parent.subtree(child));
    }
    case 5: {  // swap two disjoint subtrees
      const size_t count = nodes.size();
      if (count < 3) return std::nullopt;
      // Pre-order subtree sizes.
      std::vector<int> size(count, 1);
      for (size_t i = count; i-- > 0;) {
        if (nodes[i].kind == Node::Kind::op) {
          size[i] = 1 + size[static_cast<size_t>(nodes[i].a)];
          if (nodes[i].b >= 0) size[i] += size[static_cast<size_t>(nodes[i].b)];
        }
      }
      const int i = 1 + static_cast<int>(rng.index(count - 1));
      const int j = 1 + static_cast<int>(rng.index(count - 1));
      const int lo = std::min(i, j), hi = std::max(i, j);
      if (lo == hi || hi < lo + size[static_cast<size_t>(lo)]) return std::nullopt;
      const Expression st_lo = parent.subtree(lo);
      const Expression st_hi = parent.subtree(hi);
      Expression mid = parent.replaced(lo, st_hi);
      const int hi_shift = hi + st_hi.node_count() - st_lo.node_count();
      return mid.replaced(hi_shift, st_lo);
    }
    case 6: {  // crossover: graft a donor subtree
      if (donor == nullptr || !donor->valid()) return std::nullopt;
      const int idx = static_cast<int>(rng.index(nodes.size()));
      const int didx = static_cast<int>(rng.index(donor->nodes().size()));
      return parent.replaced(idx, donor->subtree(didx));
    }
    default:
      return std::nullopt;
  }
}

Expression Mutator::mutate(const Expression& parent, Rng& rng,
                           const Expression* donor) const {
  const std::vector<double> weights = {
      cfg_.mutation.replace_op,     cfg_.mutation.perturb_constant,
      cfg_.mutation.insert_unary,   cfg_.mutation.replace_subtree,
      cfg_.mutation.delete_node,    cfg_.mutation.swap_subtrees,
      cfg_.mutation.crossover};
  for (int attempt = 0; attempt < 20; ++attempt) {
    const size_t kind = rng.pick_weighted(weights);
    auto child = try_mutation(kind, parent, rng, donor);
    if (child && admissible(*child)) return std::move(*child);
  }
  // Fallback: constant perturbation, or the parent unchanged if there is no
  // constant to perturb.
  auto fallback = try_mutation(1, parent, rng, nullptr);
  if (fallback && admissible(*fallback)) return std::move(*fallback);
  return parent;
}

namespace {

struct Candidate {
  Expression expr;
  double train_mse = std::numeric_limits<double>::infinity();
  double val_mse = std::numeric_limits<double>::infinity();
  double val_r2 = -std::numeric_limits<double>::infinity();
  int complexity = 0;

  double fitness(double parsimony) const {
    return train_mse + parsimony * static_cast<double>(complexity);
  }
};

Candidate evaluate_candidate(Expression expr, const DbSplit& train,
                             const DbSplit& val) {
  Candidate c;
  c.complexity = complexity(expr);
  const auto [tm, tr2] = score(expr, train);
  c.train_mse = tm;
  const auto [vm, vr2] = score(expr, val);
  c.val_mse = vm;
  c.val_r2 = vr2;
  c.expr = std::move(expr);
  return c;
}

size_t tournament(const std::vector<Candidate>& pop, Rng& rng, int size,
                  double parsimony) {
  size_t best = rng.index(pop.size());
  double best_fit = pop[best].fitness(parsimony);
  for (int k = 1; k < size; ++k) {
    const size_t i = rng.index(pop.size());
    const double f = pop[i].fitness(parsimony);
    if (f < best_fit) {
      best = i;
      best_fit = f;
    }
  }
  return best;
}

void parallel_for(size_t n, int workers, const std::function<void(size_t)>& fn) {
  if (workers <= 1 || n < 2) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const int nw = std::min<int>(workers, static_cast<int>(n));
  std::vector<std::thread> threads;
  threads.reserve(static_cast<size_t>(nw));
  for (int w = 0; w < nw; ++w) {
    threads.emplace_back([&, w] {
      for (size_t i = static_cast<size_t>(w); i < n; i += static_cast<size_t>(nw)) {
        fn(i);
      }
    });
  }
  for (auto& t : threads) t.join();
}

}  // namespace

FitResult fit(const TrajectoryDB& db, const SRConfig& cfg) {
  cfg.validate();
  if (db.records.empty()) throw std::invalid_argument("empty trajectory db");
  if (cfg.max_lag > db.horizon) {
    throw std::invalid_argument("max_lag exceeds db horizon");
  }

  const ScaledDb sdb = ScaledDb::from(db);

  // Seeded 80/20-style split by record.
  std::vector<size_t> perm(sdb.n);
  for (size_t i = 0; i < sdb.n; ++i) perm[i] = i;
  Rng split_rng = Rng::derive(cfg.seed, {kTagSplit});
  split_rng.shuffle(perm);
  const size_t n_val = std::max<size_t>(1, static_cast<size_t>(
      static_cast<double>(sdb.n) * cfg.val_fraction));
  FitResult out;
  out.val_indices.assign(perm.begin(), perm.begin() + static_cast<long>(n_val));
  out.train_indices.assign(perm.begin() + static_cast<long>(n_val), perm.end());
  if (out.train_indices.empty()) {
    throw std::invalid_argument("db too small for the requested split");
  }
  DbSplit train{&sdb, out.train_indices};
  DbSplit val{&sdb, out.val_indices};

  Mutator mut(cfg, sdb.streams);
  const size_t pop_size = static_cast<size_t>(cfg.population);
  std::vector<Candidate> pop(pop_size);

  // Initial population: the train-mean constant, bare variables, simple
  // scaled variables and random trees.
  const double y_mean = split_mean(train);
  parallel_for(pop_size, cfg.workers, [&](size_t i) {
    Rng rng = Rng::derive(cfg.seed, {kTagInit, i});
    Expression e;
    if (i == 0) {
      e = Expression::constant(y_mean);
    } else if (i % 4 == 1) {
      const auto& s = sdb.streams[i / 4 % sdb.streams.size()];
      e = Expression::variable(s, static_cast<int>(i / (4 * sdb.streams.size())) %
                                       cfg.max_lag);
    } else if (i % 4 == 2) {
      const auto& s = sdb.streams[rng.index(sdb.streams.size())];
      e = Expression::apply(Op::mul, Expression::constant(rng.normal()),
                            Expression::variable(s, static_cast<int>(rng.uniform_int(
                                                        0, cfg.max_lag - 1))));
    } else {
      e = mut.random_tree(rng, 3);
    }
    pop[i] = evaluate_candidate(std::move(e), train, val);
  });

  ParetoFront& front = out.front;
  auto archive = [&](const Candidate& c) {
    Individual ind;
    ind.expr = c.expr;
    ind.mse = c.val_mse;
    ind.r2 = c.val_r2;
    ind.complexity = c.complexity;
    front.consider(std::move(ind));
  };
  for (const auto& c : pop) archive(c);

  // Subsample of the train split used for in-loop constant refinement.
  std::vector<size_t> sub_indices = out.train_indices;
  if (cfg.constant_opt.subsample > 0 &&
      sub_indices.size() > cfg.constant_opt.subsample) {
    Rng sub_rng = Rng::derive(cfg.seed, {kTagSub});
    sub_rng.shuffle(sub_indices);
    sub_indices.resize(cfg.constant_opt.subsample);
  }
  DbSplit sub{&sdb, sub_indices};

  int consecutive_invalid_rounds = 0;
  std::vector<Candidate> next(pop_size);
  for (int iter = 1; iter <= cfg.iterations; ++iter) {
    // Elite slots: carry over the current best by fitness untouched.
    std::vector<size_t> order(pop_size);
    for (size_t i = 0; i < pop_size; ++i) order[i] = i;
    const size_t n_elite = std::min<size_t>(static_cast<size_t>(std::max(cfg.elite, 0)), pop_size);
    std::partial_sort(order.begin(), order.begin() + static_cast<long>(n_elite),
                      order.end(), [&](size_t a, size_t b) {
                        return pop[a].fitness(cfg.parsimony) <
                               pop[b].fitness(cfg.parsimony);
                      });

    parallel_for(pop_size, cfg.workers, [&](size_t i) {
      if (i < n_elite) {
        next[i] = pop[order[i]];
        return;
      }
      Rng rng = Rng::derive(cfg.seed, {kTagIter, static_cast<uint64_t>(iter), i});
      const Candidate& parent = pop[tournament(pop, rng, cfg.tournament_size,
                                               cfg.parsimony)];
      const Candidate& donor = pop[tournament(pop, rng, cfg.tournament_size,
                                              cfg.parsimony)];
      Expression child = mut.mutate(parent.expr, rng, &donor.expr);
      if (child.num_constants() > 0) {
        child = optimize_constants(child, sub, cfg.constant_opt);
      }
      next[i] = evaluate_candidate(std::move(child), train, val);
    });

    bool any_valid = false;
    for (size_t i = 0; i < pop_size; ++i) {
      archive(next[i]);
      if (i >= n_elite && std::isfinite(next[i].train_mse)) any_valid = true;
    }
    if (!any_valid) {
      if (++consecutive_invalid_rounds >= 3) {
        throw std::runtime_error(
            "symbolic regression stalled: every candidate invalid for 3 "
            "consecutive rounds");
      }
    } else {
      consecutive_invalid_rounds = 0;
    }
    pop.swap(next);
  }

  // Final polish: refine archive constants on the full train split and
  // re-archive (the archive keeps the better of old/new per complexity).
  std::vector<Individual> polished;
  polished.reserve(front.entries().size());
  for (const auto& [c, ind] : front.entries()) polished.push_back(ind);
  std::vector<Candidate> repolished(polished.size());
  ConstantOptConfig polish_cfg = cfg.constant_opt;
  polish_cfg.steps = std::max(cfg.constant_opt.steps, 40);
  parallel_for(polished.size(), cfg.workers, [&](size_t i) {
    Expression e = optimize_constants(polished[i].expr, train, polish_cfg);
    repolished[i] = evaluate_candidate(std::move(e), train, val);
  });
  for (const auto& c : repolished) archive(c);

  return out;
}

}  // namespace symdistill
