#pragma once

// Genetic-programming symbolic regression over trajectory databases. A
// population of expression candidates is evolved by tournament selection and
// mutation; a hall-of-fame archive keeps the best individual per complexity
// level, scored on a held-out validation split.

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "symdistill/db.hpp"
#include "symdistill/expr.hpp"
#include "symdistill/rng.hpp"

namespace symdistill {

struct MutationWeights {
  double replace_op = 1.0;
  double perturb_constant = 2.0;
  double insert_unary = 0.6;
  double replace_subtree = 0.8;
  double delete_node = 0.8;
  double swap_subtrees = 0.25;
  double crossover = 1.2;
};

struct ConstantOptConfig {
  int steps = 12;
  double lr = 0.25;        // initial step size; backtracking halves it
  size_t subsample = 1024; // records used per refinement inside the GP loop
};

struct SRConfig {
  int iterations = 300;
  int population = 200;
  size_t db_size = 5000;  // target DB record count (used by generation)
  int max_lag = 20;
  int max_complexity = 200;
  int max_depth = 12;
  std::vector<Op> operators = all_ops();
  int tournament_size = 5;
  MutationWeights mutation;
  ConstantOptConfig constant_opt;
  double parsimony = 1e-5;
  double val_fraction = 0.2;
  int elite = 2;
  int workers = 1;
  uint64_t seed = 0;

  void validate() const;
  bool allows(Op op) const;
  std::vector<Op> unary_subset() const;
  std::vector<Op> binary_subset() const;
};

struct Individual {
  Expression expr;
  double mse = std::numeric_limits<double>::infinity();   // validation
  double r2 = -std::numeric_limits<double>::infinity();   // validation
  int complexity = 0;

  bool valid() const { return std::isfinite(mse); }
};

class ParetoFront {
 public:
  // Keeps the minimum-mse individual per complexity. Returns true if the
  // candidate was archived (strictly better or new slot).
  bool consider(Individual ind);

  const std::map<int, Individual>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }

  // Dominated-free view: complexity ascending, mse strictly decreasing.
  std::vector<Individual> pruned() const;

  // Best validation r2 over the archive.
  double best_r2() const;

  nlohmann::ordered_json to_json() const;
  static ParetoFront from_json(const nlohmann::ordered_json& j, int max_lag);

 private:
  std::map<int, Individual> entries_;
};

// Record-index split of a ScaledDb.
struct DbSplit {
  const ScaledDb* db = nullptr;
  std::vector<size_t> indices;
};

// (mse, r2) over the split; r2 = 1 - SS_res/SS_tot with SS_tot taken from the
// split's output variance. Any non-finite prediction yields (inf, -inf).
std::pair<double, double> score(const Expression& e, const DbSplit& split);

// Gradient descent with backtracking on the split MSE; the result never has
// higher MSE than the input on that split. Returns the input unchanged when
// there are no constants or the starting loss is non-finite.
Expression optimize_constants(const Expression& e, const DbSplit& train,
                              const ConstantOptConfig& cfg);

// Mutation context: configuration plus the stream universe candidates may
// reference.
class Mutator {
 public:
  Mutator(const SRConfig& cfg, std::vector<std::string> streams);

  Expression mutate(const Expression& parent, Rng& rng,
                    const Expression* donor = nullptr) const;
  Expression random_tree(Rng& rng, int max_depth) const;
  Expression random_leaf(Rng& rng) const;

 private:
  const SRConfig& cfg_;
  std::vector<std::string> streams_;
  std::vector<Op> unary_;
  std::vector<Op> binary_;

  bool admissible(const Expression& e) const;
  std::optional<Expression> try_mutation(size_t kind, const Expression& parent,
                                         Rng& rng,
                                         const Expression* donor) const;
};

struct FitResult {
  ParetoFront front;
  std::vector<size_t> train_indices;
  std::vector<size_t> val_indices;
};

// Evolves `population` candidates for `iterations` rounds. Deterministic for
// a fixed config.seed regardless of worker count: every (iteration, slot)
// derives its own RNG stream and archive reduction is ordered by slot.
FitResult fit(const TrajectoryDB& db, const SRConfig& cfg);

}  // namespace symdistill
