// SPDX-License-Identifier: Apache-2.0
#pragma once

// Scalar reverse-mode automatic differentiation on an append-only tape.
//
// Every operation on a Var appends one node holding its operand indices and
// value. grad() runs a numeric reverse sweep; grad_as_var() records the reverse
// sweep itself on the same tape so the result can be differentiated again.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pgdpo/errors.hpp"

namespace pgdpo::ad {

enum class Op : std::uint8_t {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    PowConst,   // a^c
    LeakyRelu,  // c = negative-side slope
    Softplus,
    Sigmoid,
    Tanh,
    MaxConst,   // max(a, c)
    MinConst,   // min(a, c)
    Abs,
};

struct Node {
    Op op;
    std::uint32_t a;
    std::uint32_t b;
    double c;
    double value;
};

inline constexpr std::uint32_t kNoOperand = std::numeric_limits<std::uint32_t>::max();

// Plain-double primitives shared by the tape and the batched engine.

inline double leaky_relu(double x, double slope) { return x > 0.0 ? x : slope * x; }

/// log(1 + e^x), overflow safe and strictly positive for every finite x.
inline double softplus(double x) {
    const double y = x > 30.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    return y > 0.0 ? y : std::numeric_limits<double>::denorm_min();
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

namespace detail {

inline double eval_op(Op op, double a, double b, double c) {
    switch (op) {
        case Op::Add: return a + b;
        case Op::Sub: return a - b;
        case Op::Mul: return a * b;
        case Op::Div: return a / b;
        case Op::Neg: return -a;
        case Op::Exp: return std::exp(a);
        case Op::Log: return std::log(a);
        case Op::PowConst: return std::pow(a, c);
        case Op::LeakyRelu: return leaky_relu(a, c);
        case Op::Softplus: return softplus(a);
        case Op::Sigmoid: return sigmoid(a);
        case Op::Tanh: return std::tanh(a);
        case Op::MaxConst: return a > c ? a : c;
        case Op::MinConst: return a < c ? a : c;
        case Op::Abs: return std::fabs(a);
        case Op::Leaf:
        case Op::Const: break;
    }
    return std::numeric_limits<double>::quiet_NaN();
}

/// Local partials (d/da, d/db) of a node, evaluated at its recorded operand values.
inline std::pair<double, double> partials(Op op, double a, double b, double c, double v) {
    switch (op) {
        case Op::Add: return {1.0, 1.0};
        case Op::Sub: return {1.0, -1.0};
        case Op::Mul: return {b, a};
        case Op::Div: return {1.0 / b, -v / b};
        case Op::Neg: return {-1.0, 0.0};
        case Op::Exp: return {v, 0.0};
        case Op::Log: return {1.0 / a, 0.0};
        case Op::PowConst: return {c * std::pow(a, c - 1.0), 0.0};
        case Op::LeakyRelu: return {a > 0.0 ? 1.0 : c, 0.0};
        case Op::Softplus: return {sigmoid(a), 0.0};
        case Op::Sigmoid: return {v * (1.0 - v), 0.0};
        case Op::Tanh: return {1.0 - v * v, 0.0};
        case Op::MaxConst: return {a > c ? 1.0 : 0.0, 0.0};
        case Op::MinConst: return {a < c ? 1.0 : 0.0, 0.0};
        case Op::Abs: return {a > 0.0 ? 1.0 : (a < 0.0 ? -1.0 : 0.0), 0.0};
        case Op::Leaf:
        case Op::Const: break;
    }
    return {0.0, 0.0};
}

inline bool is_binary(Op op) {
    return op == Op::Add || op == Op::Sub || op == Op::Mul || op == Op::Div;
}

}  // namespace detail

class Tape;

/// Handle to a node on a Tape. Valid only for the tape that created it and
/// only until that tape is cleared.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::uint32_t index) : tape_(tape), index_(index) {}

    Tape* tape() const { return tape_; }
    std::uint32_t index() const { return index_; }
    double value() const;

private:
    Tape* tape_ = nullptr;
    std::uint32_t index_ = kNoOperand;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Differentiable input.
    Var variable(double v) { return push({Op::Leaf, kNoOperand, kNoOperand, 0.0, v}); }
    Var constant(double v) { return push({Op::Const, kNoOperand, kNoOperand, 0.0, v}); }

    std::size_t size() const { return nodes_.size(); }
    const Node& node(std::size_t i) const { return nodes_[i]; }
    double value(std::uint32_t i) const { return nodes_[i].value; }

    void clear() { nodes_.clear(); }
    void reserve(std::size_t n) { nodes_.reserve(n); }

    /// Overwrite a leaf's value; call replay() to propagate.
    void set_value(Var leaf, double v) {
        check_owned(leaf);
        if (nodes_[leaf.index()].op != Op::Leaf) throw UsageError("set_value: node is not a leaf");
        nodes_[leaf.index()].value = v;
    }

    /// Recompute every non-leaf value in recording order.
    void replay() {
        for (auto& n : nodes_) {
            if (n.op == Op::Leaf || n.op == Op::Const) continue;
            const double a = nodes_[n.a].value;
            const double b = n.b == kNoOperand ? 0.0 : nodes_[n.b].value;
            n.value = detail::eval_op(n.op, a, b, n.c);
        }
    }

    Var unary(Op op, Var a, double c = 0.0) {
        check_owned(a);
        const double v = detail::eval_op(op, value(a.index()), 0.0, c);
        return push({op, a.index(), kNoOperand, c, v});
    }

    Var binary(Op op, Var a, Var b) {
        check_owned(a);
        check_owned(b);
        const double v = detail::eval_op(op, value(a.index()), value(b.index()), 0.0);
        return push({op, a.index(), b.index(), 0.0, v});
    }

    void check_owned(Var v) const {
        if (v.tape() != this) throw UsageError("Var belongs to a different tape");
        if (v.index() >= nodes_.size()) throw UsageError("Var index out of range (tape cleared?)");
    }

private:
    Var push(const Node& n) {
        if (nodes_.size() >= kNoOperand) throw UsageError("tape capacity exceeded");
        nodes_.push_back(n);
        return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
    }

    std::vector<Node> nodes_;
};

inline double Var::value() const { return tape_->value(index_); }

namespace detail {

inline Tape& common_tape(Var a, Var b) {
    if (a.tape() == nullptr || a.tape() != b.tape()) throw UsageError("operands live on different tapes");
    return *a.tape();
}

}  // namespace detail

inline Var operator+(Var a, Var b) { return detail::common_tape(a, b).binary(Op::Add, a, b); }
inline Var operator-(Var a, Var b) { return detail::common_tape(a, b).binary(Op::Sub, a, b); }
inline Var operator*(Var a, Var b) { return detail::common_tape(a, b).binary(Op::Mul, a, b); }
inline Var operator/(Var a, Var b) { return detail::common_tape(a, b).binary(Op::Div, a, b); }
inline Var operator-(Var a) { return a.tape()->unary(Op::Neg, a); }

inline Var operator+(Var a, double b) { return a + a.tape()->constant(b); }
inline Var operator+(double a, Var b) { return b.tape()->constant(a) + b; }
inline Var operator-(Var a, double b) { return a - a.tape()->constant(b); }
inline Var operator-(double a, Var b) { return b.tape()->constant(a) - b; }
inline Var operator*(Var a, double b) { return a * a.tape()->constant(b); }
inline Var operator*(double a, Var b) { return b.tape()->constant(a) * b; }
inline Var operator/(Var a, double b) { return a / a.tape()->constant(b); }
inline Var operator/(double a, Var b) { return b.tape()->constant(a) / b; }

inline Var& operator+=(Var& a, Var b) { return a = a + b; }
inline Var& operator-=(Var& a, Var b) { return a = a - b; }
inline Var& operator*=(Var& a, Var b) { return a = a * b; }

inline Var exp(Var a) { return a.tape()->unary(Op::Exp, a); }
inline Var log(Var a) { return a.tape()->unary(Op::Log, a); }
inline Var pow(Var a, double p) { return a.tape()->unary(Op::PowConst, a, p); }
inline Var tanh(Var a) { return a.tape()->unary(Op::Tanh, a); }
inline Var sigmoid(Var a) { return a.tape()->unary(Op::Sigmoid, a); }
inline Var abs(Var a) { return a.tape()->unary(Op::Abs, a); }
inline Var max(Var a, double c) { return a.tape()->unary(Op::MaxConst, a, c); }
inline Var min(Var a, double c) { return a.tape()->unary(Op::MinConst, a, c); }

/// x if x > 0 else slope * x. The derivative at exactly 0 is `slope`.
inline Var leaky_relu(Var x, double slope) { return x.tape()->unary(Op::LeakyRelu, x, slope); }

/// log(1 + e^x); strictly positive.
inline Var softplus(Var x) { return x.tape()->unary(Op::Softplus, x); }

inline double value_of(double x) { return x; }
inline double value_of(Var x) { return x.value(); }

/// d output / d input for each input, by one numeric reverse sweep.
inline std::vector<double> grad(Var output, std::span<const Var> inputs) {
    Tape* tape = output.tape();
    if (tape == nullptr) throw UsageError("grad: output is not on a tape");
    tape->check_owned(output);
    for (const Var& in : inputs) tape->check_owned(in);

    const std::uint32_t top = output.index();
    std::vector<double> adj(top + 1, 0.0);
    adj[top] = 1.0;
    for (std::uint32_t i = top + 1; i-- > 0;) {
        const double g = adj[i];
        if (g == 0.0) continue;
        if (std::isnan(g)) throw NumericError("NaN adjoint during reverse sweep at node " + std::to_string(i), i);
        const Node& n = tape->node(i);
        if (n.op == Op::Leaf || n.op == Op::Const) continue;
        const double va = tape->value(n.a);
        const double vb = n.b == kNoOperand ? 0.0 : tape->value(n.b);
        const auto [pa, pb] = detail::partials(n.op, va, vb, n.c, n.value);
        if (std::isnan(pa) || std::isnan(pb)) {
            throw NumericError("NaN local partial during reverse sweep at node " + std::to_string(i), i);
        }
        adj[n.a] += g * pa;
        if (detail::is_binary(n.op)) adj[n.b] += g * pb;
    }

    std::vector<double> out;
    out.reserve(inputs.size());
    for (const Var& in : inputs) out.push_back(adj[in.index()]);
    return out;
}

inline double grad(Var output, Var input) { return grad(output, std::span<const Var>(&input, 1))[0]; }

/// d output / d input as a Var: the reverse sweep is recorded onto the tape,
/// so the result can be passed to grad() again for second derivatives.
inline Var grad_as_var(Var output, Var input) {
    Tape* tape = output.tape();
    if (tape == nullptr) throw UsageError("grad_as_var: output is not on a tape");
    tape->check_owned(output);
    tape->check_owned(input);

    const std::uint32_t top = output.index();
    std::vector<std::optional<Var>> adj(top + 1);
    adj[top] = tape->constant(1.0);

    auto accumulate = [&](std::uint32_t target, Var contribution) {
        adj[target] = adj[target] ? *adj[target] + contribution : contribution;
    };

    for (std::uint32_t i = top + 1; i-- > 0;) {
        if (!adj[i]) continue;
        const Var g = *adj[i];
        if (std::isnan(g.value())) throw NumericError("NaN adjoint during recorded sweep at node " + std::to_string(i), i);
        // Copy: the tape grows while we sweep.
        const Node n = tape->node(i);
        if (n.op == Op::Leaf || n.op == Op::Const) continue;
        const Var a(tape, n.a);
        const Var out(tape, i);
        switch (n.op) {
            case Op::Add:
                accumulate(n.a, g);
                accumulate(n.b, g);
                break;
            case Op::Sub:
                accumulate(n.a, g);
                accumulate(n.b, -g);
                break;
            case Op::Mul: {
                const Var b(tape, n.b);
                accumulate(n.a, g * b);
                accumulate(n.b, g * a);
                break;
            }
            case Op::Div: {
                const Var b(tape, n.b);
                accumulate(n.a, g / b);
                accumulate(n.b, -(g * out / b));
                break;
            }
            case Op::Neg: accumulate(n.a, -g); break;
            case Op::Exp: accumulate(n.a, g * out); break;
            case Op::Log: accumulate(n.a, g / a); break;
            case Op::PowConst: accumulate(n.a, g * (n.c * pow(a, n.c - 1.0))); break;
            case Op::LeakyRelu:
                accumulate(n.a, a.value() > 0.0 ? g : g * n.c);
                break;
            case Op::Softplus: accumulate(n.a, g * sigmoid(a)); break;
            case Op::Sigmoid: accumulate(n.a, g * (out * (1.0 - out))); break;
            case Op::Tanh: accumulate(n.a, g * (1.0 - out * out)); break;
            case Op::MaxConst:
                if (a.value() > n.c) accumulate(n.a, g);
                break;
            case Op::MinConst:
                if (a.value() < n.c) accumulate(n.a, g);
                break;
            case Op::Abs:
                if (a.value() > 0.0) accumulate(n.a, g);
                else if (a.value() < 0.0) accumulate(n.a, -g);
                break;
            case Op::Leaf:
            case Op::Const: break;
        }
    }
    return adj[input.index()] ? *adj[input.index()] : tape->constant(0.0);
}

}  // namespace pgdpo::ad
