#pragma once

// Small expression language for real-analytic functions of the real chart
// coordinates (x1, y1, ..., xn, yn).  Supports exact symbolic differentiation
// (real partials and Wirtinger operators), evaluation over complex scalars,
// substitution, and compilation to a flat tape for fast repeated evaluation.
//
// Grammar accepted by parse():
//   expr   := ('+'|'-')? term (('+'|'-') term)*
//   term   := factor (('*'|'/') factor)*
//   factor := base ('^' integer)?
//   base   := number | 'pi' | ident | func '(' expr ')' | '(' expr ')'
//   func   := sin | cos | exp | log
//   ident  := x1..xn | y1..yn
// A number may carry an 'i' suffix (imaginary literal); the printer uses it
// for constants produced by Wirtinger differentiation, so printing followed
// by parsing is semantically the identity.

#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "curvcheck/util.hpp"

namespace curvcheck {

inline constexpr double kPi = 3.141592653589793238462643383279502884;

struct ParseError : std::runtime_error {
    ParseError(const std::string& msg, std::size_t off)
        : std::runtime_error(msg + " at offset " + std::to_string(off)), offset(off) {}
    std::size_t offset;
};

struct EvalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class ExprOp : std::uint8_t { Const, Var, Add, Sub, Mul, Div, Pow, Sin, Cos, Exp, Log };

/// Real coordinate index of x_k / y_k (k is 1-based chart index).
inline int var_x(int k) { return 2 * (k - 1); }
inline int var_y(int k) { return 2 * (k - 1) + 1; }

class Expr {
public:
    struct Node {
        ExprOp op;
        Complex value{};            // Const
        int var = -1;               // Var
        int ipow = 0;               // Pow exponent
        std::shared_ptr<const Node> a, b;
    };
    using NodePtr = std::shared_ptr<const Node>;

    Expr() : Expr(constant(0.0)) {}
    explicit Expr(NodePtr n) : node_(std::move(n)) {}

    static Expr constant(Complex c) {
        Node n{ExprOp::Const};
        n.value = c;
        return Expr(std::make_shared<Node>(std::move(n)));
    }
    static Expr constant(double c) { return constant(Complex(c, 0.0)); }

    static Expr variable(int real_var_index) {
        if (real_var_index < 0) throw std::invalid_argument("negative variable index");
        Node n{ExprOp::Var};
        n.var = real_var_index;
        return Expr(std::make_shared<Node>(std::move(n)));
    }

    const Node& node() const { return *node_; }
    const NodePtr& ptr() const { return node_; }

    bool is_const() const { return node_->op == ExprOp::Const; }
    bool is_const(Complex c) const { return is_const() && node_->value == c; }
    Complex const_value() const { return node_->value; }

    // -- smart constructors (constant folding and 0/1 identities) ----------

    friend Expr operator+(const Expr& a, const Expr& b) {
        if (a.is_const() && b.is_const()) return constant(a.const_value() + b.const_value());
        if (a.is_const(0.0)) return b;
        if (b.is_const(0.0)) return a;
        return make(ExprOp::Add, a, b);
    }
    friend Expr operator-(const Expr& a, const Expr& b) {
        if (a.is_const() && b.is_const()) return constant(a.const_value() - b.const_value());
        if (b.is_const(0.0)) return a;
        return make(ExprOp::Sub, a, b);
    }
    friend Expr operator*(const Expr& a, const Expr& b) {
        if (a.is_const() && b.is_const()) return constant(a.const_value() * b.const_value());
        if (a.is_const(0.0) || b.is_const(0.0)) return constant(0.0);
        if (a.is_const(1.0)) return b;
        if (b.is_const(1.0)) return a;
        // fold nested constant factors: c1*(c2*e) -> (c1*c2)*e
        if (a.is_const() && b.node().op == ExprOp::Mul && b.node().a->op == ExprOp::Const)
            return constant(a.const_value() * b.node().a->value) * Expr(b.node().b);
        if (b.is_const()) return b * a;
        return make(ExprOp::Mul, a, b);
    }
    friend Expr operator/(const Expr& a, const Expr& b) {
        if (b.is_const() && b.const_value() != Complex(0.0)) {
            if (a.is_const()) return constant(a.const_value() / b.const_value());
            return constant(Complex(1.0) / b.const_value()) * a;
        }
        if (a.is_const(0.0)) return constant(0.0);
        if (b.is_const(1.0)) return a;
        return make(ExprOp::Div, a, b);
    }
    friend Expr operator-(const Expr& a) { return constant(-1.0) * a; }

    static Expr pow(const Expr& a, int k) {
        if (k == 0) return constant(1.0);
        if (k == 1) return a;
        if (a.is_const() && !(a.const_value() == Complex(0.0) && k < 0))
            return constant(std::pow(a.const_value(), k));
        Node n{ExprOp::Pow};
        n.ipow = k;
        n.a = a.node_;
        return Expr(std::make_shared<Node>(std::move(n)));
    }
    static Expr sin(const Expr& a) { return unary(ExprOp::Sin, a); }
    static Expr cos(const Expr& a) { return unary(ExprOp::Cos, a); }
    static Expr exp(const Expr& a) { return unary(ExprOp::Exp, a); }
    static Expr log(const Expr& a) {
        // keep log(c) symbolic for c <= 0 so the domain error surfaces at eval
        if (a.is_const()) {
            Complex c = a.const_value();
            if (c.imag() == 0.0 && c.real() > 0.0) return constant(std::log(c.real()));
        }
        return unary(ExprOp::Log, a);
    }

private:
    static Expr make(ExprOp op, const Expr& a, const Expr& b) {
        Node n{op};
        n.a = a.node_;
        n.b = b.node_;
        return Expr(std::make_shared<Node>(std::move(n)));
    }
    static Expr unary(ExprOp op, const Expr& a) {
        if (a.is_const() && op != ExprOp::Log) {
            switch (op) {
                case ExprOp::Sin: return constant(std::sin(a.const_value()));
                case ExprOp::Cos: return constant(std::cos(a.const_value()));
                case ExprOp::Exp: return constant(std::exp(a.const_value()));
                default: break;
            }
        }
        Node n{op};
        n.a = a.node_;
        return Expr(std::make_shared<Node>(std::move(n)));
    }

    NodePtr node_;
};

// ---------------------------------------------------------------------------
// evaluation

namespace detail {

inline void check_finite(Complex v) {
    if (!std::isfinite(v.real()) || !std::isfinite(v.imag()))
        throw EvalError("non-finite value in evaluation");
}

inline Complex eval_node(const Expr::Node& n, std::span<const double> xy) {
    switch (n.op) {
        case ExprOp::Const: return n.value;
        case ExprOp::Var:
            if (n.var >= static_cast<int>(xy.size()))
                throw EvalError("point dimension too small for variable index " +
                                std::to_string(n.var));
            return Complex(xy[static_cast<std::size_t>(n.var)], 0.0);
        case ExprOp::Add: return eval_node(*n.a, xy) + eval_node(*n.b, xy);
        case ExprOp::Sub: return eval_node(*n.a, xy) - eval_node(*n.b, xy);
        case ExprOp::Mul: return eval_node(*n.a, xy) * eval_node(*n.b, xy);
        case ExprOp::Div: {
            Complex den = eval_node(*n.b, xy);
            if (den == Complex(0.0)) throw EvalError("division by zero");
            Complex v = eval_node(*n.a, xy) / den;
            check_finite(v);
            return v;
        }
        case ExprOp::Pow: {
            Complex base = eval_node(*n.a, xy);
            if (base == Complex(0.0) && n.ipow < 0) throw EvalError("zero raised to negative power");
            Complex v = std::pow(base, n.ipow);
            check_finite(v);
            return v;
        }
        case ExprOp::Sin: return std::sin(eval_node(*n.a, xy));
        case ExprOp::Cos: return std::cos(eval_node(*n.a, xy));
        case ExprOp::Exp: {
            Complex v = std::exp(eval_node(*n.a, xy));
            check_finite(v);
            return v;
        }
        case ExprOp::Log: {
            Complex arg = eval_node(*n.a, xy);
            if (std::abs(arg.imag()) <= 1e-14 * (1.0 + std::abs(arg.real()))) {
                if (arg.real() <= 0.0) throw EvalError("log of non-positive value");
                return Complex(std::log(arg.real()), 0.0);
            }
            return std::log(arg);
        }
    }
    throw EvalError("corrupt expression node");
}

} // namespace detail

inline Complex eval(const Expr& e, std::span<const double> xy) {
    Complex v = detail::eval_node(e.node(), xy);
    detail::check_finite(v);
    return v;
}

// ---------------------------------------------------------------------------
// differentiation

namespace detail {

class Differentiator {
public:
    explicit Differentiator(int var) : var_(var) {}

    Expr run(const Expr& e) {
        auto it = memo_.find(e.ptr().get());
        if (it != memo_.end()) return it->second;
        Expr d = derive(e);
        memo_.emplace(e.ptr().get(), d);
        return d;
    }

private:
    Expr derive(const Expr& e) {
        const Expr::Node& n = e.node();
        switch (n.op) {
            case ExprOp::Const: return Expr::constant(0.0);
            case ExprOp::Var: return Expr::constant(n.var == var_ ? 1.0 : 0.0);
            case ExprOp::Add: return run(child(n.a)) + run(child(n.b));
            case ExprOp::Sub: return run(child(n.a)) - run(child(n.b));
            case ExprOp::Mul: {
                Expr a = child(n.a), b = child(n.b);
                return run(a) * b + a * run(b);
            }
            case ExprOp::Div: {
                Expr a = child(n.a), b = child(n.b);
                return (run(a) * b - a * run(b)) / Expr::pow(b, 2);
            }
            case ExprOp::Pow: {
                Expr a = child(n.a);
                return Expr::constant(static_cast<double>(n.ipow)) * Expr::pow(a, n.ipow - 1) *
                       run(a);
            }
            case ExprOp::Sin: {
                Expr a = child(n.a);
                return Expr::cos(a) * run(a);
            }
            case ExprOp::Cos: {
                Expr a = child(n.a);
                return Expr::constant(-1.0) * Expr::sin(a) * run(a);
            }
            case ExprOp::Exp: {
                Expr a = child(n.a);
                return Expr::exp(a) * run(a);
            }
            case ExprOp::Log: {
                Expr a = child(n.a);
                return run(a) / a;
            }
        }
        throw std::logic_error("corrupt expression node");
    }

    static Expr child(const Expr::NodePtr& p) { return Expr(p); }

    int var_;
    std::unordered_map<const Expr::Node*, Expr> memo_;
};

} // namespace detail

/// d/d(real coordinate) as a new expression. Shared subtrees are
/// differentiated once (memoized by node identity).
inline Expr diff_real(const Expr& e, int real_var) {
    return detail::Differentiator(real_var).run(e);
}

enum class Wirtinger { Dz, Dzbar };

struct WirtingerVar {
    int index = 1; // 1-based chart coordinate
    Wirtinger kind = Wirtinger::Dz;
};

/// Wirtinger derivative w.r.t. z_k or conj(z_k):
///   d/dz    = (d/dx - i d/dy) / 2
///   d/dzbar = (d/dx + i d/dy) / 2
inline Expr wirtinger_diff(const Expr& e, int k, Wirtinger kind) {
    Expr dx = diff_real(e, var_x(k));
    Expr dy = diff_real(e, var_y(k));
    const double s = (kind == Wirtinger::Dz) ? -0.5 : 0.5;
    return Expr::constant(0.5) * dx + Expr::constant(Complex(0.0, s)) * dy;
}

inline Expr wirtinger_diff(const Expr& e, WirtingerVar v) {
    return wirtinger_diff(e, v.index, v.kind);
}

// ---------------------------------------------------------------------------
// structural maps

namespace detail {

template <class Fn>
class Mapper {
public:
    explicit Mapper(Fn fn) : fn_(std::move(fn)) {}

    Expr run(const Expr& e) {
        auto it = memo_.find(e.ptr().get());
        if (it != memo_.end()) return it->second;
        Expr r = apply(e);
        memo_.emplace(e.ptr().get(), r);
        return r;
    }

private:
    Expr apply(const Expr& e) {
        const Expr::Node& n = e.node();
        switch (n.op) {
            case ExprOp::Const:
            case ExprOp::Var: return fn_(e);
            case ExprOp::Add: return run(Expr(n.a)) + run(Expr(n.b));
            case ExprOp::Sub: return run(Expr(n.a)) - run(Expr(n.b));
            case ExprOp::Mul: return run(Expr(n.a)) * run(Expr(n.b));
            case ExprOp::Div: return run(Expr(n.a)) / run(Expr(n.b));
            case ExprOp::Pow: return Expr::pow(run(Expr(n.a)), n.ipow);
            case ExprOp::Sin: return Expr::sin(run(Expr(n.a)));
            case ExprOp::Cos: return Expr::cos(run(Expr(n.a)));
            case ExprOp::Exp: return Expr::exp(run(Expr(n.a)));
            case ExprOp::Log: return Expr::log(run(Expr(n.a)));
        }
        throw std::logic_error("corrupt expression node");
    }

    Fn fn_;
    std::unordered_map<const Expr::Node*, Expr> memo_;
};

} // namespace detail

/// Substitute map[v] for every variable v. The map must cover all variables
/// appearing in e.
inline Expr substitute(const Expr& e, std::span<const Expr> map) {
    detail::Mapper m([&](const Expr& leaf) -> Expr {
        const Expr::Node& n = leaf.node();
        if (n.op == ExprOp::Var) {
            if (n.var >= static_cast<int>(map.size()))
                throw std::invalid_argument("substitution map does not cover variable " +
                                            std::to_string(n.var));
            return map[static_cast<std::size_t>(n.var)];
        }
        return leaf;
    });
    return m.run(e);
}

/// Complex conjugate of the function: variables are real, so conjugating all
/// constants conjugates the value.
inline Expr conjugated(const Expr& e) {
    detail::Mapper m([](const Expr& leaf) -> Expr {
        const Expr::Node& n = leaf.node();
        if (n.op == ExprOp::Const) return Expr::constant(std::conj(n.value));
        return leaf;
    });
    return m.run(e);
}

inline int max_variable(const Expr& e) {
    const Expr::Node& n = e.node();
    int m = (n.op == ExprOp::Var) ? n.var : -1;
    if (n.a) m = std::max(m, max_variable(Expr(n.a)));
    if (n.b) m = std::max(m, max_variable(Expr(n.b)));
    return m;
}

// ---------------------------------------------------------------------------
// printing

namespace detail {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Prints a constant so the parser reads back the same value.  Negative and
// complex constants are parenthesized, imaginary parts use the 'i' suffix.
inline std::string format_const(Complex c) {
    const double re = c.real(), im = c.imag();
    if (im == 0.0) {
        if (re < 0.0 || std::signbit(re)) return "(-" + format_double(-re) + ")";
        return format_double(re);
    }
    if (re == 0.0) {
        if (im < 0.0) return "(-" + format_double(-im) + "i)";
        return format_double(im) + "i";
    }
    std::string s = "(";
    s += (re < 0.0) ? "-" + format_double(-re) : format_double(re);
    s += (im < 0.0) ? " - " + format_double(-im) : " + " + format_double(im);
    s += "i)";
    return s;
}

inline int precedence(ExprOp op) {
    switch (op) {
        case ExprOp::Add:
        case ExprOp::Sub: return 1;
        case ExprOp::Mul:
        case ExprOp::Div: return 2;
        case ExprOp::Pow: return 3;
        default: return 4;
    }
}

inline void print_node(const Expr::Node& n, std::string& out) {
    const auto child = [&](const Expr::Node& c, int min_prec) {
        if (precedence(c.op) < min_prec) {
            out += '(';
            print_node(c, out);
            out += ')';
        } else {
            print_node(c, out);
        }
    };
    switch (n.op) {
        case ExprOp::Const: out += format_const(n.value); return;
        case ExprOp::Var: {
            const int k = n.var / 2 + 1;
            out += (n.var % 2 == 0 ? 'x' : 'y');
            out += std::to_string(k);
            return;
        }
        case ExprOp::Add:
            child(*n.a, 1);
            out += " + ";
            child(*n.b, 2);
            return;
        case ExprOp::Sub:
            child(*n.a, 1);
            out += " - ";
            child(*n.b, 2);
            return;
        case ExprOp::Mul:
            child(*n.a, 2);
            out += '*';
            child(*n.b, 3);
            return;
        case ExprOp::Div:
            child(*n.a, 2);
            out += '/';
            child(*n.b, 4);
            return;
        case ExprOp::Pow:
            child(*n.a, 4);
            out += '^';
            out += std::to_string(n.ipow);
            return;
        case ExprOp::Sin: out += "sin("; break;
        case ExprOp::Cos: out += "cos("; break;
        case ExprOp::Exp: out += "exp("; break;
        case ExprOp::Log: out += "log("; break;
    }
    print_node(*n.a, out);
    out += ')';
}

} // namespace detail

inline std::string to_string(const Expr& e) {
    std::string out;
    detail::print_node(e.node(), out);
    return out;
}

// ---------------------------------------------------------------------------
// parser

namespace detail {

class Parser {
public:
    Parser(std::string_view text, int n) : text_(text), n_(n) {}

    Expr parse() {
        Expr e = parse_expr();
        skip_ws();
        if (pos_ != text_.size()) throw ParseError("unexpected trailing input", pos_);
        return e;
    }

private:
    Expr parse_expr() {
        skip_ws();
        bool negate = false;
        if (peek() == '+' || peek() == '-') {
            negate = (peek() == '-');
            ++pos_;
        }
        Expr e = parse_term();
        if (negate) e = Expr::constant(-1.0) * e;
        for (;;) {
            skip_ws();
            char c = peek();
            if (c == '+' || c == '-') {
                ++pos_;
                Expr rhs = parse_term();
                e = (c == '+') ? e + rhs : e - rhs;
            } else {
                return e;
            }
        }
    }

    Expr parse_term() {
        Expr e = parse_factor();
        for (;;) {
            skip_ws();
            char c = peek();
            if (c == '*' || c == '/') {
                ++pos_;
                Expr rhs = parse_factor();
                e = (c == '*') ? e * rhs : e / rhs;
            } else {
                return e;
            }
        }
    }

    Expr parse_factor() {
        Expr base = parse_base();
        skip_ws();
        if (peek() == '^') {
            ++pos_;
            skip_ws();
            bool neg = false;
            if (peek() == '-') {
                neg = true;
                ++pos_;
            }
            std::size_t start = pos_;
            if (!std::isdigit(static_cast<unsigned char>(peek())))
                throw ParseError("expected integer exponent", pos_);
            long k = 0;
            while (std::isdigit(static_cast<unsigned char>(peek()))) {
                k = k * 10 + (peek() - '0');
                if (k > 64) throw ParseError("exponent too large", start);
                ++pos_;
            }
            return Expr::pow(base, static_cast<int>(neg ? -k : k));
        }
        return base;
    }

    Expr parse_base() {
        skip_ws();
        const std::size_t start = pos_;
        char c = peek();
        if (c == '\0') throw ParseError("unexpected end of input", pos_);
        if (c == '(') {
            ++pos_;
            Expr e = parse_expr();
            skip_ws();
            if (peek() != ')') throw ParseError("expected ')'", pos_);
            ++pos_;
            return e;
        }
        if (std::isdigit(static_cast<unsigned char>(c))) return parse_number();
        if (std::isalpha(static_cast<unsigned char>(c))) {
            std::string id;
            while (std::isalnum(static_cast<unsigned char>(peek()))) id += text_[pos_++];
            if (id == "pi") return Expr::constant(kPi);
            if (id == "sin" || id == "cos" || id == "exp" || id == "log") {
                skip_ws();
                if (peek() != '(') throw ParseError("expected '(' after function " + id, pos_);
                ++pos_;
                Expr arg = parse_expr();
                skip_ws();
                if (peek() != ')') throw ParseError("expected ')'", pos_);
                ++pos_;
                if (id == "sin") return Expr::sin(arg);
                if (id == "cos") return Expr::cos(arg);
                if (id == "exp") return Expr::exp(arg);
                return Expr::log(arg);
            }
            return resolve_variable(id, start);
        }
        throw ParseError(std::string("unexpected character '") + c + "'", pos_);
    }

    Expr resolve_variable(const std::string& id, std::size_t at) {
        if (id.size() >= 2 && (id[0] == 'x' || id[0] == 'y')) {
            int k = 0;
            bool digits = true;
            for (std::size_t i = 1; i < id.size(); ++i) {
                if (!std::isdigit(static_cast<unsigned char>(id[i]))) {
                    digits = false;
                    break;
                }
                k = k * 10 + (id[i] - '0');
            }
            if (digits && k >= 1) {
                if (k > n_)
                    throw ParseError("variable " + id + " out of range for dimension " +
                                         std::to_string(n_),
                                     at);
                return Expr::variable(id[0] == 'x' ? var_x(k) : var_y(k));
            }
        }
        throw ParseError("unknown identifier '" + id + "'", at);
    }

    Expr parse_number() {
        const std::size_t start = pos_;
        while (std::isdigit(static_cast<unsigned char>(peek()))) ++pos_;
        if (peek() == '.') {
            ++pos_;
            while (std::isdigit(static_cast<unsigned char>(peek()))) ++pos_;
        }
        if (peek() == 'e' || peek() == 'E') {
            std::size_t save = pos_;
            ++pos_;
            if (peek() == '+' || peek() == '-') ++pos_;
            if (!std::isdigit(static_cast<unsigned char>(peek()))) {
                pos_ = save; // not an exponent after all
            } else {
                while (std::isdigit(static_cast<unsigned char>(peek()))) ++pos_;
            }
        }
        double v = 0.0;
        try {
            v = std::stod(std::string(text_.substr(start, pos_ - start)));
        } catch (const std::exception&) {
            throw ParseError("malformed number", start);
        }
        // imaginary literal suffix
        if (peek() == 'i' &&
            !(pos_ + 1 < text_.size() &&
              std::isalnum(static_cast<unsigned char>(text_[pos_ + 1])))) {
            ++pos_;
            return Expr::constant(Complex(0.0, v));
        }
        return Expr::constant(v);
    }

    void skip_ws() {
        while (pos_ < text_.size() &&
               std::isspace(static_cast<unsigned char>(text_[pos_])))
            ++pos_;
    }
    char peek() const { return pos_ < text_.size() ? text_[pos_] : '\0'; }

    std::string_view text_;
    int n_;
    std::size_t pos_ = 0;
};

} // namespace detail

/// Parse an expression over the chart coordinates x1..xn, y1..yn.
inline Expr parse_expression(std::string_view text, int n) {
    return detail::Parser(text, n).parse();
}

// ---------------------------------------------------------------------------
// compiled tape
//
// Flattens one or more expressions into a single op list over value slots.
// Subtrees shared between expressions (by node identity) are evaluated once.

class Tape {
public:
    struct Op {
        ExprOp op;
        std::int32_t dst = 0, a = 0, b = 0;
        Complex value{};
        std::int32_t var = -1;
        std::int32_t ipow = 0;
    };

    static Tape compile(std::span<const Expr> exprs) {
        Tape t;
        std::unordered_map<const Expr::Node*, std::int32_t> slot;
        for (const Expr& e : exprs) t.roots_.push_back(t.emit(e.node(), slot));
        return t;
    }
    static Tape compile(const Expr& e) { return compile(std::span<const Expr>(&e, 1)); }

    std::size_t num_outputs() const { return roots_.size(); }
    std::size_t num_slots() const { return static_cast<std::size_t>(next_slot_); }

    /// Evaluate all outputs at xy. scratch is resized as needed; passing the
    /// same buffer across calls avoids reallocation.
    void eval(std::span<const double> xy, std::span<Complex> out,
              std::vector<Complex>& scratch) const {
        scratch.resize(num_slots());
        Complex* r = scratch.data();
        for (const Op& o : ops_) {
            switch (o.op) {
                case ExprOp::Const: r[o.dst] = o.value; break;
                case ExprOp::Var: r[o.dst] = Complex(xy[static_cast<std::size_t>(o.var)], 0.0); break;
                case ExprOp::Add: r[o.dst] = r[o.a] + r[o.b]; break;
                case ExprOp::Sub: r[o.dst] = r[o.a] - r[o.b]; break;
                case ExprOp::Mul: r[o.dst] = r[o.a] * r[o.b]; break;
                case ExprOp::Div:
                    if (r[o.b] == Complex(0.0)) throw EvalError("division by zero");
                    r[o.dst] = r[o.a] / r[o.b];
                    break;
                case ExprOp::Pow: r[o.dst] = ipow_eval(r[o.a], o.ipow); break;
                case ExprOp::Sin: r[o.dst] = std::sin(r[o.a]); break;
                case ExprOp::Cos: r[o.dst] = std::cos(r[o.a]); break;
                case ExprOp::Exp: r[o.dst] = std::exp(r[o.a]); break;
                case ExprOp::Log: r[o.dst] = log_checked(r[o.a]); break;
            }
        }
        for (std::size_t i = 0; i < roots_.size(); ++i)
            out[i] = r[roots_[i]];
    }

private:
    static Complex ipow_eval(Complex base, int k) {
        if (k < 0) {
            if (base == Complex(0.0)) throw EvalError("zero raised to negative power");
            base = Complex(1.0) / base;
            k = -k;
        }
        Complex acc(1.0);
        while (k > 0) {
            if (k & 1) acc *= base;
            base *= base;
            k >>= 1;
        }
        return acc;
    }

    static Complex log_checked(Complex arg) {
        if (std::abs(arg.imag()) <= 1e-14 * (1.0 + std::abs(arg.real()))) {
            if (arg.real() <= 0.0) throw EvalError("log of non-positive value");
            return Complex(std::log(arg.real()), 0.0);
        }
        return std::log(arg);
    }

    std::int32_t emit(const Expr::Node& n,
                      std::unordered_map<const Expr::Node*, std::int32_t>& slot) {
        auto it = slot.find(&n);
        if (it != slot.end()) return it->second;
        Op o{n.op};
        if (n.a) o.a = emit(*n.a, slot);
        if (n.b) o.b = emit(*n.b, slot);
        o.value = n.value;
        o.var = n.var;
        o.ipow = n.ipow;
        o.dst = next_slot_++;
        slot.emplace(&n, o.dst);
        ops_.push_back(o);
        return o.dst;
    }

    std::vector<Op> ops_;
    std::vector<std::int32_t> roots_;
    std::int32_t next_slot_ = 0;
};

} // namespace curvcheck
