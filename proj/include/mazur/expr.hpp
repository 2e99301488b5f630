#pragma once

// Arithmetic expressions over phase-space coordinates q1..qr, p1..pr.
//
// Grammar (lowest to highest precedence):
//   expr    := term (('+' | '-') term)*
//   term    := unary (('*' | '/') unary)*
//   unary   := ('-' | '+') unary | power
//   power   := primary ('^' unary)?          right-associative
//   primary := number | 'pi' | qN | pN | macro | func '(' expr ')' | '(' expr ')'
//   func    := sin | cos | exp | sqrt | log
//
// Macros (H, H1..Hk for conserved quantities) are expanded at parse time.
// Trees are immutable; evaluation runs a compiled postfix program.

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mazur/error.hpp"

namespace mazur {

class ParseError : public ValidationError {
 public:
  ParseError(std::size_t position, const std::string& message)
      : ValidationError("parse error at position " + std::to_string(position) + ": " + message),
        position_(position) {}

  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

class EvalError : public NumericError {
 public:
  using NumericError::NumericError;
};

enum class Op : std::uint8_t { Const, Var, Neg, Add, Sub, Mul, Div, Pow, Sin, Cos, Exp, Sqrt, Log };

struct Node;
using NodePtr = std::shared_ptr<const Node>;

struct Node {
  Op op = Op::Const;
  double value = 0.0;
  int var = -1;
  NodePtr lhs;
  NodePtr rhs;
};

namespace detail {

inline bool is_const(const NodePtr& n) { return n->op == Op::Const; }
inline bool is_const(const NodePtr& n, double v) { return n->op == Op::Const && n->value == v; }

inline NodePtr node(Op op, NodePtr a = nullptr, NodePtr b = nullptr) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->lhs = std::move(a);
  n->rhs = std::move(b);
  return n;
}

inline NodePtr make_const(double v) {
  auto n = std::make_shared<Node>();
  n->op = Op::Const;
  n->value = v;
  return n;
}

inline NodePtr make_var(int index) {
  auto n = std::make_shared<Node>();
  n->op = Op::Var;
  n->var = index;
  return n;
}

inline bool is_integer(double v) { return std::isfinite(v) && std::floor(v) == v && std::fabs(v) < 1e9; }

inline double int_pow(double x, long long n) {
  if (n < 0) return 1.0 / int_pow(x, -n);
  double acc = 1.0;
  for (long long i = 0; i < n; ++i) acc *= x;
  return acc;
}

inline NodePtr make_neg(NodePtr a) {
  if (is_const(a)) return make_const(-a->value);
  if (a->op == Op::Neg) return a->lhs;
  return node(Op::Neg, std::move(a));
}

// Constant folding plus the 0/1 identities needed to keep derivatives readable.
inline NodePtr make_binary(Op op, NodePtr a, NodePtr b) {
  if (is_const(a) && is_const(b)) {
    const double x = a->value, y = b->value;
    double r = 0.0;
    bool ok = true;
    switch (op) {
      case Op::Add: r = x + y; break;
      case Op::Sub: r = x - y; break;
      case Op::Mul: r = x * y; break;
      case Op::Div: ok = y != 0.0; r = ok ? x / y : 0.0; break;
      case Op::Pow:
        if (is_integer(y)) {
          ok = !(x == 0.0 && y < 0.0);
          r = ok ? int_pow(x, static_cast<long long>(y)) : 0.0;
        } else {
          ok = x >= 0.0;
          r = ok ? std::pow(x, y) : 0.0;
        }
        break;
      default: ok = false;
    }
    if (ok && std::isfinite(r)) return make_const(r);
    return node(op, std::move(a), std::move(b));
  }
  switch (op) {
    case Op::Add:
      if (is_const(a, 0.0)) return b;
      if (is_const(b, 0.0)) return a;
      break;
    case Op::Sub:
      if (is_const(b, 0.0)) return a;
      if (is_const(a, 0.0)) return make_neg(std::move(b));
      break;
    case Op::Mul:
      if (is_const(a, 0.0) || is_const(b, 0.0)) return make_const(0.0);
      if (is_const(a, 1.0)) return b;
      if (is_const(b, 1.0)) return a;
      if (is_const(b)) std::swap(a, b);
      if (is_const(a) && b->op == Op::Mul && is_const(b->lhs))
        return make_binary(Op::Mul, make_const(a->value * b->lhs->value), b->rhs);
      break;
    case Op::Div:
      if (is_const(b, 1.0)) return a;
      if (is_const(b) && b->value != 0.0 && a->op == Op::Mul && is_const(a->lhs))
        return make_binary(Op::Mul, make_const(a->lhs->value / b->value), a->rhs);
      break;
    case Op::Pow:
      if (is_const(b, 1.0)) return a;
      if (is_const(b, 0.0)) return make_const(1.0);
      break;
    default: break;
  }
  return node(op, std::move(a), std::move(b));
}

inline NodePtr make_func(Op op, NodePtr a) {
  if (is_const(a)) {
    const double x = a->value;
    double r = 0.0;
    bool ok = true;
    switch (op) {
      case Op::Sin: r = std::sin(x); break;
      case Op::Cos: r = std::cos(x); break;
      case Op::Exp: r = std::exp(x); break;
      case Op::Sqrt: ok = x >= 0.0; r = ok ? std::sqrt(x) : 0.0; break;
      case Op::Log: ok = x > 0.0; r = ok ? std::log(x) : 0.0; break;
      default: ok = false;
    }
    if (ok && std::isfinite(r)) return make_const(r);
  }
  return node(op, std::move(a));
}

inline const char* func_name(Op op) {
  switch (op) {
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Exp: return "exp";
    case Op::Sqrt: return "sqrt";
    case Op::Log: return "log";
    default: return "?";
  }
}

inline int precedence(const NodePtr& n) {
  switch (n->op) {
    case Op::Add:
    case Op::Sub: return 1;
    case Op::Mul:
    case Op::Div: return 2;
    case Op::Neg: return 3;
    case Op::Pow: return 4;
    case Op::Const: return n->value < 0.0 || std::signbit(n->value) ? 3 : 5;
    default: return 5;
  }
}

inline std::string format_number(double v) {
  std::array<char, 64> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), end);
}

inline std::string var_name(int index, int r) {
  return (index < r ? "q" : "p") + std::to_string(index % r + 1);
}

inline void print(const NodePtr& n, int r, std::string& out) {
  auto child = [&](const NodePtr& c, bool parens) {
    if (parens) out += '(';
    print(c, r, out);
    if (parens) out += ')';
  };
  switch (n->op) {
    case Op::Const: out += format_number(n->value); return;
    case Op::Var: out += var_name(n->var, r); return;
    case Op::Neg:
      out += '-';
      child(n->lhs, precedence(n->lhs) < 3);
      return;
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div: {
      const int p = precedence(n);
      child(n->lhs, precedence(n->lhs) < p);
      out += n->op == Op::Add ? '+' : n->op == Op::Sub ? '-' : n->op == Op::Mul ? '*' : '/';
      child(n->rhs, precedence(n->rhs) <= p);
      return;
    }
    case Op::Pow:
      child(n->lhs, precedence(n->lhs) < 5);
      out += '^';
      child(n->rhs, precedence(n->rhs) < 3);
      return;
    default:
      out += func_name(n->op);
      child(n->lhs, true);
      return;
  }
}

inline NodePtr differentiate(const NodePtr& n, int v) {
  switch (n->op) {
    case Op::Const: return make_const(0.0);
    case Op::Var: return make_const(n->var == v ? 1.0 : 0.0);
    case Op::Neg: return make_neg(differentiate(n->lhs, v));
    case Op::Add:
    case Op::Sub:
      return make_binary(n->op, differentiate(n->lhs, v), differentiate(n->rhs, v));
    case Op::Mul:
      return make_binary(Op::Add, make_binary(Op::Mul, differentiate(n->lhs, v), n->rhs),
                         make_binary(Op::Mul, n->lhs, differentiate(n->rhs, v)));
    case Op::Div: {
      auto da = differentiate(n->lhs, v);
      if (is_const(n->rhs)) return make_binary(Op::Div, da, n->rhs);
      auto num = make_binary(Op::Sub, make_binary(Op::Mul, da, n->rhs),
                             make_binary(Op::Mul, n->lhs, differentiate(n->rhs, v)));
      return make_binary(Op::Div, num, make_binary(Op::Pow, n->rhs, make_const(2.0)));
    }
    case Op::Pow: {
      auto da = differentiate(n->lhs, v);
      if (is_const(n->rhs)) {
        const double c = n->rhs->value;
        auto outer = make_binary(Op::Mul, make_const(c),
                                 make_binary(Op::Pow, n->lhs, make_const(c - 1.0)));
        return make_binary(Op::Mul, outer, da);
      }
      // d(a^b) = a^b * (b' log a + b a'/a)
      auto db = differentiate(n->rhs, v);
      auto inner = make_binary(Op::Add, make_binary(Op::Mul, db, make_func(Op::Log, n->lhs)),
                               make_binary(Op::Div, make_binary(Op::Mul, n->rhs, da), n->lhs));
      return make_binary(Op::Mul, n, inner);
    }
    case Op::Sin:
      return make_binary(Op::Mul, make_func(Op::Cos, n->lhs), differentiate(n->lhs, v));
    case Op::Cos:
      return make_binary(Op::Mul, make_neg(make_func(Op::Sin, n->lhs)),
                         differentiate(n->lhs, v));
    case Op::Exp: return make_binary(Op::Mul, n, differentiate(n->lhs, v));
    case Op::Sqrt:
      return make_binary(Op::Div, differentiate(n->lhs, v),
                         make_binary(Op::Mul, make_const(2.0), n));
    case Op::Log: return make_binary(Op::Div, differentiate(n->lhs, v), n->lhs);
  }
  return make_const(0.0);
}

inline bool depends_on(const NodePtr& n, int v) {
  if (!n) return false;
  if (n->op == Op::Var) return n->var == v;
  return depends_on(n->lhs, v) || depends_on(n->rhs, v);
}

// Postfix program used for evaluation.
enum class Code : std::uint8_t { Const, Var, Neg, Add, Sub, Mul, Div, PowInt, Pow, Sin, Cos, Exp, Sqrt, Log };

struct Instr {
  Code code;
  int index = 0;  // variable index or integer exponent
  double value = 0.0;
};

inline void compile(const NodePtr& n, std::vector<Instr>& prog) {
  switch (n->op) {
    case Op::Const: prog.push_back({Code::Const, 0, n->value}); return;
    case Op::Var: prog.push_back({Code::Var, n->var, 0.0}); return;
    case Op::Pow:
      compile(n->lhs, prog);
      if (is_const(n->rhs) && is_integer(n->rhs->value) && std::fabs(n->rhs->value) <= 64) {
        prog.push_back({Code::PowInt, static_cast<int>(n->rhs->value), 0.0});
      } else {
        compile(n->rhs, prog);
        prog.push_back({Code::Pow});
      }
      return;
    default: break;
  }
  compile(n->lhs, prog);
  if (n->rhs) compile(n->rhs, prog);
  static constexpr std::array<Code, 13> map = {Code::Const, Code::Var,  Code::Neg, Code::Add,
                                               Code::Sub,   Code::Mul,  Code::Div, Code::Pow,
                                               Code::Sin,   Code::Cos,  Code::Exp, Code::Sqrt,
                                               Code::Log};
  prog.push_back({map[static_cast<std::size_t>(n->op)]});
}

inline std::size_t stack_depth(const std::vector<Instr>& prog) {
  std::size_t depth = 0, max_depth = 0;
  for (const auto& in : prog) {
    switch (in.code) {
      case Code::Const:
      case Code::Var: ++depth; break;
      case Code::Add:
      case Code::Sub:
      case Code::Mul:
      case Code::Div:
      case Code::Pow: --depth; break;
      default: break;
    }
    max_depth = std::max(max_depth, depth);
  }
  return max_depth;
}

}  // namespace detail

/// Immutable expression over a phase space of r degrees of freedom.
/// Variable index i < r is q_{i+1}; index r + i is p_{i+1}.
class Expression {
 public:
  Expression() : Expression(detail::make_const(0.0), 1) {}

  Expression(NodePtr root, int dims) : root_(std::move(root)), dims_(dims) {
    detail::compile(root_, program_);
    depth_ = detail::stack_depth(program_);
  }

  static Expression constant(double v, int dims) { return Expression(detail::make_const(v), dims); }

  int dims() const noexcept { return dims_; }
  const NodePtr& root() const noexcept { return root_; }

  bool is_constant() const noexcept { return root_->op == Op::Const; }

  bool depends_on(int var) const { return detail::depends_on(root_, var); }

  std::string to_string() const {
    std::string out;
    detail::print(root_, dims_, out);
    return out;
  }

  /// Partial derivative with respect to variable index `var` (see class comment).
  Expression derivative(int var) const { return Expression(detail::differentiate(root_, var), dims_); }

  /// Evaluates at x = (q1..qr, p1..pr). Throws EvalError on division by zero or a domain error.
  double operator()(std::span<const double> x) const {
    if (depth_ <= kInlineStack) {
      std::array<double, kInlineStack> stack;
      return run(x, stack.data());
    }
    std::vector<double> stack(depth_);
    return run(x, stack.data());
  }

  double evaluate(std::span<const double> x) const { return (*this)(x); }

 private:
  static constexpr std::size_t kInlineStack = 32;

  double run(std::span<const double> x, double* s) const {
    using detail::Code;
    std::size_t top = 0;
    for (const auto& in : program_) {
      switch (in.code) {
        case Code::Const: s[top++] = in.value; break;
        case Code::Var: s[top++] = x[static_cast<std::size_t>(in.index)]; break;
        case Code::Neg: s[top - 1] = -s[top - 1]; break;
        case Code::Add: --top; s[top - 1] += s[top]; break;
        case Code::Sub: --top; s[top - 1] -= s[top]; break;
        case Code::Mul: --top; s[top - 1] *= s[top]; break;
        case Code::Div:
          --top;
          if (s[top] == 0.0) throw EvalError("division by zero");
          s[top - 1] /= s[top];
          break;
        case Code::PowInt: {
          double& b = s[top - 1];
          if (in.index < 0 && b == 0.0) throw EvalError("division by zero (negative power of 0)");
          b = detail::int_pow(b, in.index);
          break;
        }
        case Code::Pow: {
          --top;
          const double b = s[top - 1], e = s[top];
          if (b < 0.0 && !detail::is_integer(e))
            throw EvalError("domain error: negative base with non-integer exponent");
          if (b == 0.0 && e < 0.0) throw EvalError("division by zero (negative power of 0)");
          s[top - 1] = std::pow(b, e);
          break;
        }
        case Code::Sin: s[top - 1] = std::sin(s[top - 1]); break;
        case Code::Cos: s[top - 1] = std::cos(s[top - 1]); break;
        case Code::Exp: s[top - 1] = std::exp(s[top - 1]); break;
        case Code::Sqrt:
          if (s[top - 1] < 0.0) throw EvalError("domain error: sqrt of negative value");
          s[top - 1] = std::sqrt(s[top - 1]);
          break;
        case Code::Log:
          if (s[top - 1] <= 0.0) throw EvalError("domain error: log of non-positive value");
          s[top - 1] = std::log(s[top - 1]);
          break;
      }
    }
    return s[0];
  }

  NodePtr root_;
  int dims_ = 1;
  std::vector<detail::Instr> program_;
  std::size_t depth_ = 0;
};

using Macros = std::map<std::string, Expression, std::less<>>;

namespace detail {

class Parser {
 public:
  Parser(std::string_view text, int r, const Macros* macros, std::size_t offset = 0)
      : text_(text), r_(r), macros_(macros), offset_(offset) {}

  NodePtr parse_all() {
    auto e = parse_expr();
    skip_ws();
    if (pos_ < text_.size())
      fail("unexpected '" + std::string(1, text_[pos_]) + "', expected operator or end of input");
    return e;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const { throw ParseError(offset_ + pos_, msg); }

  void skip_ws() {
    while (pos_ < text_.size() && (text_[pos_] == ' ' || text_[pos_] == '\t' || text_[pos_] == '\n' ||
                                   text_[pos_] == '\r'))
      ++pos_;
  }

  bool accept(char c) {
    skip_ws();
    if (pos_ < text_.size() && text_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  void expect(char c) {
    if (!accept(c)) {
      if (pos_ >= text_.size()) fail(std::string("expected '") + c + "' but reached end of input");
      fail(std::string("expected '") + c + "' but found '" + text_[pos_] + "'");
    }
  }

  NodePtr parse_expr() {
    auto lhs = parse_term();
    for (;;) {
      if (accept('+')) lhs = make_binary(Op::Add, lhs, parse_term());
      else if (accept('-')) lhs = make_binary(Op::Sub, lhs, parse_term());
      else return lhs;
    }
  }

  NodePtr parse_term() {
    auto lhs = parse_unary();
    for (;;) {
      if (accept('*')) lhs = make_binary(Op::Mul, lhs, parse_unary());
      else if (accept('/')) lhs = make_binary(Op::Div, lhs, parse_unary());
      else return lhs;
    }
  }

  NodePtr parse_unary() {
    if (accept('-')) return make_neg(parse_unary());
    if (accept('+')) return parse_unary();
    return parse_power();
  }

  NodePtr parse_power() {
    auto base = parse_primary();
    if (accept('^')) return make_binary(Op::Pow, base, parse_unary());
    return base;
  }

  NodePtr parse_primary() {
    skip_ws();
    if (pos_ >= text_.size()) fail("expected a number, variable, function or '(' but reached end of input");
    const char c = text_[pos_];
    if (c == '(') {
      ++pos_;
      auto e = parse_expr();
      expect(')');
      return e;
    }
    if ((c >= '0' && c <= '9') || c == '.') return parse_number();
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') return parse_identifier();
    fail(std::string("unexpected '") + c + "', expected a number, variable, function or '('");
  }

  NodePtr parse_number() {
    const std::size_t start = pos_;
    while (pos_ < text_.size() && (std::isdigit(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '.'))
      ++pos_;
    if (pos_ < text_.size() && (text_[pos_] == 'e' || text_[pos_] == 'E')) {
      std::size_t p = pos_ + 1;
      if (p < text_.size() && (text_[p] == '+' || text_[p] == '-')) ++p;
      if (p < text_.size() && std::isdigit(static_cast<unsigned char>(text_[p]))) {
        pos_ = p;
        while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) ++pos_;
      }
    }
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(text_.data() + start, text_.data() + pos_, v);
    if (ec != std::errc() || ptr != text_.data() + pos_) {
      pos_ = start;
      fail("malformed number");
    }
    return make_const(v);
  }

  NodePtr parse_identifier() {
    const std::size_t start = pos_;
    while (pos_ < text_.size() &&
           (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_'))
      ++pos_;
    const std::string_view name = text_.substr(start, pos_ - start);

    static const std::map<std::string_view, Op> functions = {
        {"sin", Op::Sin}, {"cos", Op::Cos}, {"exp", Op::Exp}, {"sqrt", Op::Sqrt}, {"log", Op::Log}};
    if (auto f = functions.find(name); f != functions.end()) {
      expect('(');
      auto arg = parse_expr();
      expect(')');
      return make_func(f->second, arg);
    }
    if (name == "pi") return make_const(std::numbers::pi);

    if (name.size() >= 2 && (name[0] == 'q' || name[0] == 'p') &&
        name.find_first_not_of("0123456789", 1) == std::string_view::npos) {
      int index = 0;
      auto [ptr, ec] = std::from_chars(name.data() + 1, name.data() + name.size(), index);
      if (ec != std::errc() || index < 1 || index > r_) {
        pos_ = start;
        fail("variable index out of range: '" + std::string(name) + "' (system has r = " +
             std::to_string(r_) + ")");
      }
      return make_var((name[0] == 'q' ? 0 : r_) + index - 1);
    }
    if (macros_) {
      if (auto m = macros_->find(name); m != macros_->end()) return m->second.root();
    }
    pos_ = start;
    fail("unknown identifier '" + std::string(name) + "'");
  }

  std::string_view text_;
  int r_;
  const Macros* macros_;
  std::size_t offset_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Parses `text` against a system with r degrees of freedom.
inline Expression parse(std::string_view text, int r, const Macros& macros = {}) {
  if (r < 1) throw ValidationError("system dimension r must be >= 1");
  detail::Parser parser(text, r, &macros);
  return Expression(parser.parse_all(), r);
}

/// All 2r partial derivatives, ordered d/dq1..d/dqr, d/dp1..d/dpr.
inline std::vector<Expression> gradient(const Expression& e) {
  std::vector<Expression> g;
  g.reserve(static_cast<std::size_t>(2 * e.dims()));
  for (int v = 0; v < 2 * e.dims(); ++v) g.push_back(e.derivative(v));
  return g;
}

// ---------------------------------------------------------------------------
// Predicates: conjunctions of comparisons, used to define invariant cells.

enum class Cmp : std::uint8_t { Less, LessEq, Greater, GreaterEq };

struct Comparison {
  Expression lhs;
  Cmp cmp = Cmp::Greater;
  Expression rhs;

  bool operator()(std::span<const double> x) const {
    const double a = lhs(x), b = rhs(x);
    switch (cmp) {
      case Cmp::Less: return a < b;
      case Cmp::LessEq: return a <= b;
      case Cmp::Greater: return a > b;
      case Cmp::GreaterEq: return a >= b;
    }
    return false;
  }
};

struct Predicate {
  std::vector<Comparison> clauses;
  std::string text;

  bool operator()(std::span<const double> x) const {
    for (const auto& c : clauses)
      if (!c(x)) return false;
    return true;
  }
};

/// Parses "expr CMP expr && expr CMP expr ..." with CMP one of < <= > >=.
inline Predicate parse_predicate(std::string_view text, int r, const Macros& macros = {}) {
  Predicate pred;
  pred.text = std::string(text);
  std::size_t clause_start = 0;
  while (clause_start <= text.size()) {
    std::size_t and_pos = text.find("&&", clause_start);
    const std::size_t clause_end = and_pos == std::string_view::npos ? text.size() : and_pos;
    const std::string_view clause = text.substr(clause_start, clause_end - clause_start);

    int depth = 0;
    std::size_t op_pos = std::string_view::npos, op_len = 0;
    Cmp cmp = Cmp::Greater;
    for (std::size_t i = 0; i < clause.size(); ++i) {
      const char c = clause[i];
      if (c == '(') ++depth;
      else if (c == ')') --depth;
      else if (depth == 0 && (c == '<' || c == '>')) {
        if (op_pos != std::string_view::npos)
          throw ParseError(clause_start + i, "more than one comparison in a clause");
        op_pos = i;
        const bool eq = i + 1 < clause.size() && clause[i + 1] == '=';
        op_len = eq ? 2 : 1;
        cmp = c == '<' ? (eq ? Cmp::LessEq : Cmp::Less) : (eq ? Cmp::GreaterEq : Cmp::Greater);
        if (eq) ++i;
      }
    }
    if (op_pos == std::string_view::npos)
      throw ParseError(clause_start, "expected a comparison (<, <=, >, >=) in predicate clause");
    detail::Parser lp(clause.substr(0, op_pos), r, &macros, clause_start);
    detail::Parser rp(clause.substr(op_pos + op_len), r, &macros, clause_start + op_pos + op_len);
    pred.clauses.push_back({Expression(lp.parse_all(), r), cmp, Expression(rp.parse_all(), r)});

    if (and_pos == std::string_view::npos) break;
    clause_start = and_pos + 2;
  }
  return pred;
}

}  // namespace mazur
