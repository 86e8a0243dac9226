#pragma once

// Infix text form for expressions.
//
// Grammar:
//   expr    := term (('+' | '-') term)*
//   term    := factor (('*' | '/') factor)*
//   factor  := '-' factor | primary
//   primary := NUMBER | NAME '(' expr [',' expr] ')' | NAME '[' INT ']'
//            | '(' expr ')'
//
// Function names: sq, sqrt_s, exp, pow_s (two arguments), tanh, asinh,
// sinh, relu, erfc. Any other NAME followed by '[' is a variable reference
// <stream>[<lag>]. Unary minus on a numeric literal folds into the constant;
// on anything else it becomes multiplication by -1.
//
// render() emits the canonical form: no whitespace, minimal parentheses,
// constants in shortest round-trip notation. parse(render(e)) == e.

#include <string>
#include <string_view>

#include "symdistill/expr.hpp"

namespace symdistill {

struct ParseError : std::runtime_error {
  size_t position;
  ParseError(const std::string& msg, size_t pos)
      : std::runtime_error(msg + " at offset " + std::to_string(pos)),
        position(pos) {}
};

// max_lag bounds variable lags: lag must satisfy 0 <= lag < max_lag.
Expression parse_expression(std::string_view text, int max_lag = 20);

std::string render(const Expression& e);
std::string format_double(double v);  // shortest round-trip form

}  // namespace symdistill
