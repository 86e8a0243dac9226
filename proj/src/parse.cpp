#include "symdistill/parse.hpp"

#include <cctype>
#include <charconv>

namespace symdistill {

namespace {

struct Parser {
  std::string_view text;
  size_t pos = 0;
  int max_lag;

  explicit Parser(std::string_view t, int ml) : text(t), max_lag(ml) {}

  void skip_ws() {
    while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
  }

  bool eof() {
    skip_ws();
    return pos >= text.size();
  }

  char peek() {
    skip_ws();
    return pos < text.size() ? text[pos] : '\0';
  }

  bool accept(char c) {
    if (peek() == c) {
      ++pos;
      return true;
    }
    return false;
  }

  void expect(char c) {
    if (!accept(c)) {
      throw ParseError(std::string("expected '") + c + "'", pos);
    }
  }

  [[noreturn]] void fail(const std::string& msg) { throw ParseError(msg, pos); }

  Expression parse_expr() {
    Expression lhs = parse_term();
    while (true) {
      if (accept('+')) {
        lhs = Expression::apply(Op::add, std::move(lhs), parse_term());
      } else if (accept('-')) {
        lhs = Expression::apply(Op::sub, std::move(lhs), parse_term());
      } else {
        return lhs;
      }
    }
  }

  Expression parse_term() {
    Expression lhs = parse_factor();
    while (true) {
      if (accept('*')) {
        lhs = Expression::apply(Op::mul, std::move(lhs), parse_factor());
      } else if (accept('/')) {
        lhs = Expression::apply(Op::div, std::move(lhs), parse_factor());
      } else {
        return lhs;
      }
    }
  }

  Expression parse_factor() {
    if (accept('-')) {
      skip_ws();
      if (pos < text.size() &&
          (std::isdigit(static_cast<unsigned char>(text[pos])) ||
           text[pos] == '.')) {
        return parse_number(true);
      }
      return Expression::apply(Op::mul, Expression::constant(-1.0),
                               parse_factor());
    }
    return parse_primary();
  }

  Expression parse_primary() {
    const char c = peek();
    if (c == '(') {
      ++pos;
      Expression e = parse_expr();
      expect(')');
      return e;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      return parse_number(false);
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      return parse_name();
    }
    fail("expected expression");
  }

  Expression parse_number(bool negate) {
    skip_ws();
    const size_t start = pos;
    while (pos < text.size() &&
           (std::isdigit(static_cast<unsigned char>(text[pos])) ||
            text[pos] == '.')) {
      ++pos;
    }
    if (pos < text.size() && (text[pos] == 'e' || text[pos] == 'E')) {
      size_t p = pos + 1;
      if (p < text.size() && (text[p] == '+' || text[p] == '-')) ++p;
      if (p < text.size() && std::isdigit(static_cast<unsigned char>(text[p]))) {
        pos = p;
        while (pos < text.size() &&
               std::isdigit(static_cast<unsigned char>(text[pos]))) {
          ++pos;
        }
      }
    }
    double value = 0.0;
    const auto res =
        std::from_chars(text.data() + start, text.data() + pos, value);
    if (res.ec != std::errc() || res.ptr != text.data() + pos) {
      throw ParseError("bad numeric literal", start);
    }
    return Expression::constant(negate ? -value : value);
  }

  Expression parse_name() {
    skip_ws();
    const size_t start = pos;
    while (pos < text.size() &&
           (std::isalnum(static_cast<unsigned char>(text[pos])) ||
            text[pos] == '_')) {
      ++pos;
    }
    const std::string_view name = text.substr(start, pos - start);
    if (peek() == '(') {
      const auto op = op_from_name(name);
      if (!op || *op == Op::add || *op == Op::sub || *op == Op::mul ||
          *op == Op::div) {
        throw ParseError("unknown operator '" + std::string(name) + "'",
                         start);
      }
      ++pos;
      Expression first = parse_expr();
      if (op_is_binary(*op)) {
        expect(',');
        Expression second = parse_expr();
        expect(')');
        return Expression::apply(*op, std::move(first), std::move(second));
      }
      expect(')');
      return Expression::apply(*op, std::move(first));
    }
    if (peek() == '[') {
      ++pos;
      skip_ws();
      const size_t lag_start = pos;
      while (pos < text.size() &&
             std::isdigit(static_cast<unsigned char>(text[pos]))) {
        ++pos;
      }
      int lag = -1;
      const auto res =
          std::from_chars(text.data() + lag_start, text.data() + pos, lag);
      if (res.ec != std::errc() || lag_start == pos) {
        throw ParseError("bad lag index", lag_start);
      }
      expect(']');
      if (lag >= max_lag) {
        throw ParseError("lag " + std::to_string(lag) +
                             " out of range (horizon " +
                             std::to_string(max_lag) + ")",
                         lag_start);
      }
      return Expression::variable(name, lag);
    }
    throw ParseError("expected '(' or '[' after '" + std::string(name) + "'",
                     start);
  }
};

constexpr int kPrecAddSub = 1;
constexpr int kPrecMulDiv = 2;
constexpr int kPrecAtom = 3;

int node_prec(const Node& n) {
  if (n.kind != Node::Kind::op) return kPrecAtom;
  switch (n.op) {
    case Op::add:
    case Op::sub:
      return kPrecAddSub;
    case Op::mul:
    case Op::div:
      return kPrecMulDiv;
    default:
      return kPrecAtom;
  }
}

char op_symbol(Op op) {
  switch (op) {
    case Op::add:
      return '+';
    case Op::sub:
      return '-';
    case Op::mul:
      return '*';
    case Op::div:
      return '/';
    default:
      return '\0';
  }
}

void render_node(const Expression& e, int idx, int min_prec, std::string& out) {
  const Node& n = e.nodes()[static_cast<size_t>(idx)];
  switch (n.kind) {
    case Node::Kind::cst:
      out += format_double(n.value);
      return;
    case Node::Kind::var:
      out += e.streams()[static_cast<size_t>(n.stream)];
      out += '[';
      out += std::to_string(n.lag);
      out += ']';
      return;
    case Node::Kind::op: {
      const char sym = op_symbol(n.op);
      if (sym == '\0') {
        out += op_name(n.op);
        out += '(';
        render_node(e, n.a, 0, out);
        if (n.b >= 0) {
          out += ',';
          render_node(e, n.b, 0, out);
        }
        out += ')';
        return;
      }
      const int prec = node_prec(n);
      const bool wrap = prec < min_prec;
      if (wrap) out += '(';
      render_node(e, n.a, prec, out);
      out += sym;
      render_node(e, n.b, prec + 1, out);
      if (wrap) out += ')';
      return;
    }
  }
}

}  // namespace

Expression parse_expression(std::string_view text, int max_lag) {
  Parser p(text, max_lag);
  Expression e = p.parse_expr();
  if (!p.eof()) p.fail("trailing input");
  return e;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string render(const Expression& e) {
  if (!e.valid()) throw std::invalid_argument("invalid expression");
  std::string out;
  render_node(e, 0, 0, out);
  return out;
}

}  // namespace symdistill
