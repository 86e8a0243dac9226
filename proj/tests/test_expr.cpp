#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "symdistill/expr.hpp"
#include "symdistill/parse.hpp"
#include "symdistill/rng.hpp"

using namespace symdistill;

namespace {

FeatureWindow window_of(std::initializer_list<
                        std::pair<std::string, std::vector<double>>> entries) {
  FeatureWindow w;
  for (auto& [name, vals] : entries) w.set(name, vals);
  return w;
}

// Test-local random tree generator, independent of the search machinery.
Expression random_tree(Rng& rng, int depth, int max_lag = 8) {
  if (depth <= 0 || rng.bernoulli(0.3)) {
    if (rng.bernoulli(0.5)) {
      const char* streams[] = {"g", "mhat", "ghat"};
      return Expression::variable(streams[rng.index(3)],
                                  static_cast<int>(rng.uniform_int(0, max_lag - 1)));
    }
    return Expression::constant(rng.normal());
  }
  const auto& ops = all_ops();
  const Op op = ops[rng.index(ops.size())];
  if (op_is_binary(op)) {
    return Expression::apply(op, random_tree(rng, depth - 1, max_lag),
                             random_tree(rng, depth - 1, max_lag));
  }
  return Expression::apply(op, random_tree(rng, depth - 1, max_lag));
}

FeatureWindow random_window(Rng& rng, int T = 8) {
  FeatureWindow w;
  for (const char* s : {"g", "mhat", "ghat"}) {
    std::vector<double> v(static_cast<size_t>(T));
    for (auto& x : v) x = rng.uniform(-1.5, 1.5);
    w.set(s, std::move(v));
  }
  return w;
}

}  // namespace

TEST_CASE("sign-extended operators") {
  CHECK(op_apply(Op::sqrt_s, -4.0) == doctest::Approx(-2.0).epsilon(1e-12));
  CHECK(op_apply(Op::sqrt_s, 9.0) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(op_apply(Op::pow_s, -8.0, 1.0 / 3.0) ==
        doctest::Approx(-2.0).epsilon(1e-12));
  CHECK(op_apply(Op::pow_s, 0.0, 2.0) == 0.0);
  CHECK(op_apply(Op::pow_s, -3.0, 0.0) == -1.0);  // sign(x)*|x|^0
  CHECK(op_apply(Op::pow_s, 5.0, 0.0) == 1.0);
  CHECK(op_apply(Op::pow_s, 0.0, 0.0) == 0.0);
  CHECK(op_apply(Op::erfc, 0.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(op_apply(Op::relu, -3.0) == 0.0);
  CHECK(op_apply(Op::relu, 3.0) == 3.0);
}

TEST_CASE("non-finite values propagate, never clamp") {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const double inf = std::numeric_limits<double>::infinity();
  for (Op op : all_ops()) {
    const double r = op_is_binary(op) ? op_apply(op, nan, 1.0)
                                      : op_apply(op, nan);
    CHECK_MESSAGE(std::isnan(r), "op ", op_name(op));
  }
  CHECK(std::isnan(op_apply(Op::pow_s, 1.0, nan)));
  CHECK(op_apply(Op::relu, -inf) == 0.0);
  CHECK(op_apply(Op::exp, 1000.0) == inf);
  CHECK(std::isinf(op_apply(Op::div, 1.0, 0.0)));

  const auto e = parse_expression("1/g[0]");
  const double v = evaluate(e, window_of({{"g", {0.0}}}));
  CHECK(std::isinf(v));  // non-finite result, not an error
}

TEST_CASE("unary operators track a high-precision reference on [-10,10]") {
  for (int i = 0; i <= 400; ++i) {
    const double x = -10.0 + 0.05 * i;
    const long double lx = static_cast<long double>(x);
    CHECK(std::fabs(op_apply(Op::tanh, x) - static_cast<double>(tanhl(lx))) <= 1e-6);
    CHECK(std::fabs(op_apply(Op::asinh, x) - static_cast<double>(asinhl(lx))) <= 1e-6);
    CHECK(std::fabs(op_apply(Op::sinh, x) - static_cast<double>(sinhl(lx))) <= 1e-6 * std::max(1.0, std::fabs(static_cast<double>(sinhl(lx)))));
    CHECK(std::fabs(op_apply(Op::erfc, x) - static_cast<double>(erfcl(lx))) <= 1e-6);
    CHECK(std::fabs(op_apply(Op::exp, x) - static_cast<double>(expl(lx))) <= 1e-6 * std::max(1.0, std::fabs(static_cast<double>(expl(lx)))));
    const long double sq = copysignl(sqrtl(fabsl(lx)), lx);
    CHECK(std::fabs(op_apply(Op::sqrt_s, x) - static_cast<double>(sq)) <= 1e-6);
  }
}

TEST_CASE("evaluate: structural errors vs numeric propagation") {
  const auto e = parse_expression("mhat[2]+g[0]");
  CHECK_THROWS_AS(evaluate(e, window_of({{"g", {1.0}}})), MissingInputError);
  CHECK_THROWS_AS(
      evaluate(e, window_of({{"g", {1.0}}, {"mhat", {1.0, 2.0}}})),
      MissingInputError);  // lag 2 missing
  CHECK(evaluate(e, window_of({{"g", {1.0}}, {"mhat", {0.0, 0.0, 3.0}}})) ==
        4.0);
}

TEST_CASE("evaluation is pure and bit-identical") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto e = random_tree(rng, 5);
    const auto w = random_window(rng);
    const double a = evaluate(e, w);
    const double b = evaluate(e, w);
    if (std::isnan(a)) {
      CHECK(std::isnan(b));
    } else {
      CHECK(std::memcmp(&a, &b, sizeof a) == 0);
    }
  }
}

TEST_CASE("decaying erfc rule evaluates to zero at t=0 with zero gradients") {
  const auto e = parse_expression(fixtures::decaying_erfc_rule_text());
  FeatureWindow w;
  w.set("g", std::vector<double>(20, 0.0));
  w.set("t", {0.0});
  CHECK(evaluate(e, w) == doctest::Approx(0.0).epsilon(1e-15));

  // Finite on bounded random windows.
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    FeatureWindow win;
    std::vector<double> g(20);
    for (auto& x : g) x = rng.uniform(-1.0, 1.0);
    win.set("g", g);
    win.set("t", {static_cast<double>(rng.uniform_int(0, 100))});
    CHECK(std::isfinite(evaluate(e, win)));
  }
}

TEST_CASE("sign-gated sinh rule parses, evaluates finitely, round-trips") {
  const std::string text = fixtures::sign_gated_sinh_rule_text();
  const auto e = parse_expression(text);
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    FeatureWindow win;
    std::vector<double> g(5);
    for (auto& x : g) x = rng.uniform(-1.0, 1.0);
    win.set("g", g);
    CHECK(std::isfinite(evaluate(e, win)));
  }
  CHECK(parse_expression(render(e)) == e);
}

TEST_CASE("complexity: node count by default") {
  CHECK(complexity(parse_expression("0.5")) == 1);
  CHECK(complexity(parse_expression("-0.01*g[0]")) == 3);
  CHECK(complexity(parse_expression("tanh(g[0])")) == 2);

  // Weighted variant counts operator diversity and distinct variables.
  const auto e = parse_expression("g[0]+g[0]*g[1]");
  ComplexityWeights w;
  w.op_diversity = 10;
  w.distinct_vars = 100;
  CHECK(complexity(e) == 5);
  CHECK(complexity(e, w) == 5 + 2 * 10 + 2 * 100);
}

TEST_CASE("complexity is monotone under subtree insertion") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto e = random_tree(rng, 4);
    const int idx = static_cast<int>(rng.index(static_cast<size_t>(e.node_count())));
    const auto grown =
        e.replaced(idx, Expression::apply(Op::tanh, e.subtree(idx)));
    CHECK(complexity(grown) > complexity(e));
    ComplexityWeights w{3, 2};
    CHECK(complexity(grown, w) > complexity(e, w));
  }
}

TEST_CASE("grad_constants: closed-form cases") {
  const auto lin = parse_expression("0.7*g[0]");
  const auto g1 = grad_constants(lin, window_of({{"g", {2.0}}}));
  REQUIRE(g1.size() == 1);
  CHECK(g1[0] == doctest::Approx(2.0));

  auto th = parse_expression("tanh(0.0*g[0])");
  const auto g2 = grad_constants(th, window_of({{"g", {5.0}}}));
  REQUIRE(g2.size() == 1);
  CHECK(g2[0] == doctest::Approx(5.0));  // tanh'(0) = 1

  CHECK_THROWS_AS(grad_constants(parse_expression("exp(1000*g[0])"),
                                 window_of({{"g", {1.0}}})),
                  std::domain_error);
}

TEST_CASE("grad_inputs: closed-form cases") {
  const auto sum = parse_expression("0.5*g[0]+0.25*g[1]+0.125*g[2]");
  const auto gi = grad_inputs(sum, window_of({{"g", {1.0, 1.0, 1.0}}}));
  REQUIRE(gi.size() == 1);
  REQUIRE(gi[0].size() == 3);
  CHECK(gi[0][0] == doctest::Approx(0.5));
  CHECK(gi[0][1] == doctest::Approx(0.25));
  CHECK(gi[0][2] == doctest::Approx(0.125));

  const auto sq = parse_expression("sq(g[0])");
  CHECK(grad_inputs(sq, window_of({{"g", {3.0}}}))[0][0] ==
        doctest::Approx(6.0));
}

TEST_CASE("thresholded-sum gradients match the closed forms") {
  // Sum over two streams and lags 0..2 of w * (gamma * tanh(x / gamma)).
  const double gamma = 0.7;
  const double W[2][3] = {{0.3, -0.2, 0.05}, {-0.4, 0.1, 0.02}};
  const char* streams[2] = {"mhat", "ghat"};
  Expression e;
  std::vector<double> w_order;
  for (int s = 0; s < 2; ++s) {
    for (int lag = 0; lag < 3; ++lag) {
      auto term = Expression::apply(
          Op::mul, Expression::constant(W[s][lag]),
          Expression::apply(
              Op::mul, Expression::constant(gamma),
              Expression::apply(Op::tanh,
                                Expression::apply(Op::div,
                                                  Expression::variable(streams[s], lag),
                                                  Expression::constant(gamma)))));
      w_order.push_back(W[s][lag]);
      e = e.valid() ? Expression::apply(Op::add, std::move(e), std::move(term))
                    : std::move(term);
    }
  }
  Rng rng(13);
  FeatureWindow win;
  std::vector<double> mv(3), gv(3);
  for (auto& x : mv) x = rng.uniform(-2.0, 2.0);
  for (auto& x : gv) x = rng.uniform(-2.0, 2.0);
  win.set("mhat", mv);
  win.set("ghat", gv);

  // d/dW = gamma * tanh(x/gamma); constants are [W, gamma, gamma] per term.
  const auto gc = grad_constants(e, win);
  const auto gi = grad_inputs(e, win);
  size_t ci = 0;
  for (int s = 0; s < 2; ++s) {
    for (int lag = 0; lag < 3; ++lag) {
      const double x = s == 0 ? mv[static_cast<size_t>(lag)] : gv[static_cast<size_t>(lag)];
      CHECK(gc[ci] == doctest::Approx(gamma * std::tanh(x / gamma)).epsilon(1e-12));
      ci += 3;  // skip the two gamma leaves of this term
      const double th = std::tanh(x / gamma);
      const double sech2 = 1.0 - th * th;
      CHECK(gi[static_cast<size_t>(s)][static_cast<size_t>(lag)] ==
            doctest::Approx(W[s][lag] * sech2).epsilon(1e-12));
    }
  }

  // And both match finite differences.
  const auto consts = e.constants();
  auto loss_c = [&](const std::vector<double>& c) {
    return evaluate(e.with_constants(c), win);
  };
  const auto fd = oracles::finite_diff(loss_c, consts);
  for (size_t i = 0; i < consts.size(); ++i) {
    CHECK(oracles::grad_close(gc[i], fd[i]));
  }
}

TEST_CASE("gradients match central finite differences on random pairs") {
  Rng rng(21);
  int accepted = 0;
  int guard = 0;
  while (accepted < 100 && guard < 4000) {
    ++guard;
    const auto e = random_tree(rng, 4);
    if (e.num_constants() == 0) continue;
    const auto w = random_window(rng);

    // Skip windows near kinks or with extreme magnitudes: evaluate node
    // values and inspect children of sign-extended / relu nodes.
    EvalScratch ws;
    std::vector<const std::vector<double>*> bufs;
    bool missing = false;
    for (const auto& s : e.streams()) {
      const auto* b = w.find(s);
      if (!b) missing = true;
      bufs.push_back(b);
    }
    if (missing) continue;
    auto varfn = [&](int16_t s, int16_t lag) {
      return (*bufs[static_cast<size_t>(s)])[static_cast<size_t>(lag)];
    };
    const double out = eval_expr(e, varfn, ws);
    if (!std::isfinite(out) || std::fabs(out) > 1e3) continue;
    bool near_kink = false;
    const auto& nodes = e.nodes();
    for (size_t i = 0; i < nodes.size(); ++i) {
      if (!std::isfinite(ws.val[i]) || std::fabs(ws.val[i]) > 1e3) near_kink = true;
      if (nodes[i].kind != Node::Kind::op) continue;
      if (nodes[i].op == Op::sqrt_s || nodes[i].op == Op::relu ||
          nodes[i].op == Op::pow_s) {
        if (std::fabs(ws.val[static_cast<size_t>(nodes[i].a)]) < 5e-2) near_kink = true;
      }
    }
    if (near_kink) continue;

    const auto gc = grad_constants(e, w);
    const auto consts = e.constants();
    auto loss_c = [&](const std::vector<double>& c) {
      return evaluate(e.with_constants(c), w);
    };
    const auto fd = oracles::finite_diff(loss_c, consts);
    bool ok = true;
    for (size_t i = 0; i < consts.size(); ++i) {
      ok = ok && oracles::grad_close(gc[i], fd[i], 1e-4, 1e-6);
    }

    // Inputs: flatten the window of referenced streams.
    const auto gi = grad_inputs(e, w);
    for (size_t s = 0; s < e.streams().size(); ++s) {
      for (int lag = 0; lag < e.horizon(); ++lag) {
        auto loss_x = [&](const std::vector<double>& x) {
          FeatureWindow w2 = w;
          auto vals = *w2.find(e.streams()[s]);
          vals[static_cast<size_t>(lag)] = x[0];
          w2.set(e.streams()[s], vals);
          return evaluate(e, w2);
        };
        const double base = (*w.find(e.streams()[s]))[static_cast<size_t>(lag)];
        const auto fdx = oracles::finite_diff(loss_x, {base});
        ok = ok && oracles::grad_close(gi[s][static_cast<size_t>(lag)], fdx[0], 1e-4, 1e-6);
      }
    }
    CHECK(ok);
    if (ok) ++accepted;
  }
  CHECK(accepted >= 100);
}

TEST_CASE("parse/render canonical forms") {
  CHECK(render(parse_expression("-0.01*g[0]")) == "-0.01*g[0]");
  CHECK(render(parse_expression(" 1 + 2 * g[0] ")) == "1+2*g[0]");
  CHECK(render(parse_expression("(1+2)*g[0]")) == "(1+2)*g[0]");
  CHECK(render(parse_expression("-g[0]")) == "-1*g[0]");
  CHECK(render(parse_expression("a[0]-(b[0]-c[0])")) == "a[0]-(b[0]-c[0])");
  CHECK(render(parse_expression("a[0]-b[0]-c[0]")) == "a[0]-b[0]-c[0]");
  CHECK(render(parse_expression("pow_s(g[0], 0.5)")) == "pow_s(g[0],0.5)");

  const auto e = parse_expression("-0.01*g[0]");
  REQUIRE(e.node_count() == 3);
  CHECK(e.nodes()[0].op == Op::mul);
  CHECK(e.constants() == std::vector<double>{-0.01});
}

TEST_CASE("parse errors carry positions") {
  CHECK_THROWS_AS(parse_expression("1+"), ParseError);
  CHECK_THROWS_AS(parse_expression("foo(g[0])"), ParseError);
  CHECK_THROWS_AS(parse_expression("g[25]", 20), ParseError);
  CHECK_THROWS_AS(parse_expression("g[3)"), ParseError);
  CHECK_THROWS_AS(parse_expression("pow_s(g[0])"), ParseError);
  CHECK_THROWS_AS(parse_expression("1 2"), ParseError);
  try {
    parse_expression("g[0]+foo(1)");
  } catch (const ParseError& e) {
    CHECK(e.position == 5);
  }
}

TEST_CASE("parse(render(e)) reproduces random trees exactly") {
  Rng rng(31);
  for (int trial = 0; trial < 300; ++trial) {
    const auto e = random_tree(rng, 8);
    const std::string text = render(e);
    const auto back = parse_expression(text, 8);
    CHECK_MESSAGE(back == e, text);
    CHECK(render(back) == text);
  }
}

TEST_CASE("constant order is stable under serialization round-trip") {
  Rng rng(37);
  for (int trial = 0; trial < 50; ++trial) {
    const auto e = random_tree(rng, 6);
    const auto back = parse_expression(render(e), 8);
    CHECK(back.constants() == e.constants());
  }
}

TEST_CASE("sexpr emission") {
  const auto e = parse_expression("-0.01*g[0]");
  const auto j = e.sexpr();
  CHECK(j.dump() == R"(["mul",["c",-0.01],["v","g",0]])");
}
