#pragma once

// Shared equation fixtures used by unit and acceptance tests.

#include <string>

#include "symdistill/expr.hpp"
#include "symdistill/parse.hpp"

namespace fixtures {

// Time-decaying erfc/sinh/tanh composite over 20 gradient lags plus the step
// counter stream "t". The published form leaves the per-lag tanh weights
// unspecified; this fixture pins c_i = 0.05 * 0.9^i.
inline std::string decaying_erfc_rule_text() {
  std::string inner = "sinh(g[0])";
  double c = 0.05;
  for (int i = 0; i < 20; ++i) {
    inner += "+" + symdistill::format_double(c) + "*tanh(g[" +
             std::to_string(i) + "])";
    c *= 0.9;
  }
  return "0.013*exp(-0.835*asinh(t[0]))*(erfc(" + inner + ")-1)";
}

// Sign-gated sinh-of-root composite over early gradient lags. sign(x) is
// expressed as pow_s(x, 0).
inline std::string sign_gated_sinh_rule_text() {
  return "-0.02*g[0]-0.01*pow_s(g[0]*g[1],0)*sinh(sqrt_s("
         "pow_s(asinh(g[0]),2.2)"
         "+0.7*pow_s(asinh(g[1]),2.3)"
         "+0.5*pow_s(asinh(g[3]),1.7)"
         "+0.2*pow_s(asinh(g[4]),2.1)))";
}

// Root-of-squares variant of the same rule without hyperbolic operators.
inline std::string sign_gated_root_rule_text() {
  return "-0.02*g[0]-0.01*pow_s(g[0]*g[1],0)*sqrt_s("
         "sq(g[0])+0.9*sq(g[1])+0.8*sq(g[2])+0.7*sq(g[3])"
         "+0.5*pow_s(g[4],2.4)+0.4*sq(g[5])+0.3*g[6]+0.1*pow_s(g[7],2.5))";
}

// Sanity-suite target: truncated linear-decay sum over lags 0..10.
inline std::string linear_decay_sum_text() {
  std::string s;
  for (int i = 0; i <= 10; ++i) {
    const double w = 1.0 - 0.1 * i;
    if (i > 0) s += "+";
    s += symdistill::format_double(w) + "*g[" + std::to_string(i) + "]";
  }
  return s;
}

// Sanity-suite target: square/exp composite.
inline std::string nonlinear_composite_text() {
  return "sq(g[0])+g[1]+2*g[2]+exp(g[4])";
}

}  // namespace fixtures
