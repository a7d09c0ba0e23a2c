// Reverse-mode scalar tape for the differentiable student rollouts.
//
// Values are computed eagerly as nodes are recorded, so control flow in
// client code (Jacobi rotations, softmax shifts, group splits) can branch on
// concrete values; the branch structure freezes into the graph, which is the
// usual almost-everywhere derivative convention.
//
// Higher-order support comes from grad_vars(): it emits the backward pass of
// a subgraph as new tape nodes, so an SGD step that consumes those gradient
// nodes stays differentiable, and one final plain reverse sweep over the
// whole tape yields exact unrolled meta-gradients.
#pragma once

#include "omnidistill/common.hpp"

#include <bit>
#include <unordered_map>

namespace omnidistill::tape {

using Var = int32_t;
constexpr Var kNoVar = -1;

enum class Op : uint8_t { Const, Input, Add, Sub, Mul, Div, Neg, Exp, Log, Sqrt, Sigmoid, Max, Min, Dot };

class Tape {
public:
    Tape() { reserve(1 << 16); }

    void reserve(size_t n) {
        op_.reserve(n);
        a_.reserve(n);
        b_.reserve(n);
        val_.reserve(n);
    }

    // Drop all nodes but keep allocated capacity (and the adjoint stamps,
    // whose epoch counter never resets) for reuse across rollouts.
    void clear() {
        op_.clear();
        a_.clear();
        b_.clear();
        val_.clear();
        pool_.clear();
        const_cache_.clear();
    }

    size_t size() const { return op_.size(); }
    double val(Var v) const { return val_[static_cast<size_t>(v)]; }

    Var input(double v) { return push(Op::Input, kNoVar, kNoVar, v); }

    Var constant(double v) {
        const uint64_t key = std::bit_cast<uint64_t>(v);
        auto it = const_cache_.find(key);
        if (it != const_cache_.end()) return it->second;
        Var id = push(Op::Const, kNoVar, kNoVar, v);
        const_cache_.emplace(key, id);
        return id;
    }

    Var add(Var a, Var b) { return push(Op::Add, a, b, val_[a] + val_[b]); }
    Var sub(Var a, Var b) { return push(Op::Sub, a, b, val_[a] - val_[b]); }
    Var mul(Var a, Var b) { return push(Op::Mul, a, b, val_[a] * val_[b]); }
    Var div(Var a, Var b) { return push(Op::Div, a, b, val_[a] / val_[b]); }
    Var neg(Var a) { return push(Op::Neg, a, kNoVar, -val_[a]); }
    Var exp_(Var a) { return push(Op::Exp, a, kNoVar, std::exp(val_[a])); }
    Var log_(Var a) { return push(Op::Log, a, kNoVar, std::log(val_[a])); }
    Var sqrt_(Var a) { return push(Op::Sqrt, a, kNoVar, std::sqrt(val_[a])); }
    Var sigmoid(Var a) { return push(Op::Sigmoid, a, kNoVar, 1.0 / (1.0 + std::exp(-val_[a]))); }
    Var max_(Var a, Var b) { return push(Op::Max, a, b, val_[a] >= val_[b] ? val_[a] : val_[b]); }
    Var min_(Var a, Var b) { return push(Op::Min, a, b, val_[a] <= val_[b] ? val_[a] : val_[b]); }

    // Fused inner product Σ_i xs[i]·ys[i]; one node, operands in a side pool.
    Var dot(const Var* xs, const Var* ys, int n) {
        const Var off = static_cast<Var>(pool_.size());
        double s = 0.0;
        for (int i = 0; i < n; ++i) {
            pool_.push_back(xs[i]);
            pool_.push_back(ys[i]);
            s += val_[xs[i]] * val_[ys[i]];
        }
        return push(Op::Dot, off, static_cast<Var>(n), s);
    }
    Var dot(const std::vector<Var>& xs, const std::vector<Var>& ys) {
        return dot(xs.data(), ys.data(), static_cast<int>(xs.size()));
    }

    void set_input(Var v, double x) {
        if (op_[static_cast<size_t>(v)] != Op::Input) throw NumericError("Tape::set_input: not an input node");
        val_[static_cast<size_t>(v)] = x;
    }

    // Recompute every node in recording order. With unchanged inputs this
    // reproduces all values bit-exactly.
    void replay() {
        const size_t n = op_.size();
        for (size_t i = 0; i < n; ++i) {
            switch (op_[i]) {
                case Op::Const:
                case Op::Input: break;
                case Op::Add: val_[i] = val_[a_[i]] + val_[b_[i]]; break;
                case Op::Sub: val_[i] = val_[a_[i]] - val_[b_[i]]; break;
                case Op::Mul: val_[i] = val_[a_[i]] * val_[b_[i]]; break;
                case Op::Div: val_[i] = val_[a_[i]] / val_[b_[i]]; break;
                case Op::Neg: val_[i] = -val_[a_[i]]; break;
                case Op::Exp: val_[i] = std::exp(val_[a_[i]]); break;
                case Op::Log: val_[i] = std::log(val_[a_[i]]); break;
                case Op::Sqrt: val_[i] = std::sqrt(val_[a_[i]]); break;
                case Op::Sigmoid: val_[i] = 1.0 / (1.0 + std::exp(-val_[a_[i]])); break;
                case Op::Max: val_[i] = val_[a_[i]] >= val_[b_[i]] ? val_[a_[i]] : val_[b_[i]]; break;
                case Op::Min: val_[i] = val_[a_[i]] <= val_[b_[i]] ? val_[a_[i]] : val_[b_[i]]; break;
                case Op::Dot: {
                    double s = 0.0;
                    const Var* p = pool_.data() + a_[i];
                    for (Var e = 0; e < b_[i]; ++e) s += val_[p[2 * e]] * val_[p[2 * e + 1]];
                    val_[i] = s;
                    break;
                }
            }
        }
    }

    // Differentiable backward pass: d(out)/d(each wrt), emitted as new tape
    // nodes. Adjoints are only propagated down to min(wrt) — anything older
    // participates as a value, which is exactly what a gradient treated as a
    // function of the older inputs requires.
    std::vector<Var> grad_vars(Var out, const std::vector<Var>& wrt) {
        if (wrt.empty()) return {};
        Var lower = out;
        for (Var v : wrt) lower = std::min(lower, v);

        begin_adjoint_epoch(out);
        set_adj(out, constant(1.0));

        for (Var i = out; i >= lower; --i) {
            Var g = get_adj(i);
            if (g == kNoVar) continue;
            const size_t n = static_cast<size_t>(i);
            const Var a = a_[n], b = b_[n];
            switch (op_[n]) {
                case Op::Const:
                case Op::Input: break;
                case Op::Add:
                    acc_var(a, g, lower);
                    acc_var(b, g, lower);
                    break;
                case Op::Sub:
                    acc_var(a, g, lower);
                    if (b >= lower) acc_var(b, neg(g), lower);
                    break;
                case Op::Mul:
                    if (a >= lower) acc_var(a, mul(g, b), lower);
                    if (b >= lower) acc_var(b, mul(g, a), lower);
                    break;
                case Op::Div:
                    if (a >= lower) acc_var(a, div(g, b), lower);
                    if (b >= lower) acc_var(b, neg(div(mul(g, i), b)), lower);
                    break;
                case Op::Neg:
                    if (a >= lower) acc_var(a, neg(g), lower);
                    break;
                case Op::Exp:
                    if (a >= lower) acc_var(a, mul(g, i), lower);
                    break;
                case Op::Log:
                    if (a >= lower) acc_var(a, div(g, a), lower);
                    break;
                case Op::Sqrt:
                    if (a >= lower) acc_var(a, div(g, mul(constant(2.0), i)), lower);
                    break;
                case Op::Sigmoid:
                    if (a >= lower) acc_var(a, mul(g, mul(i, sub(constant(1.0), i))), lower);
                    break;
                case Op::Max:
                    acc_var(val_[a] >= val_[b] ? a : b, g, lower);
                    break;
                case Op::Min:
                    acc_var(val_[a] <= val_[b] ? a : b, g, lower);
                    break;
                case Op::Dot: {
                    // pool may reallocate while emitting, so index it fresh
                    for (Var e = 0; e < b; ++e) {
                        const Var x = pool_[static_cast<size_t>(a) + 2 * e];
                        const Var y = pool_[static_cast<size_t>(a) + 2 * e + 1];
                        if (x >= lower) acc_var(x, mul(g, y), lower);
                        if (y >= lower) acc_var(y, mul(g, x), lower);
                    }
                    break;
                }
            }
        }

        std::vector<Var> out_grads;
        out_grads.reserve(wrt.size());
        for (Var v : wrt) {
            Var g = get_adj(v);
            out_grads.push_back(g == kNoVar ? constant(0.0) : g);
        }
        return out_grads;
    }

    // Plain reverse sweep with double accumulation over the entire graph.
    std::vector<double> gradient(Var out, const std::vector<Var>& leaves) {
        grad_adj_.assign(static_cast<size_t>(out) + 1, 0.0);
        std::vector<double>& adj = grad_adj_;
        adj[static_cast<size_t>(out)] = 1.0;
        for (Var i = out; i >= 0; --i) {
            const size_t n = static_cast<size_t>(i);
            const double g = adj[n];
            if (g == 0.0) continue;
            const Var a = a_[n], b = b_[n];
            switch (op_[n]) {
                case Op::Const:
                case Op::Input: break;
                case Op::Add:
                    adj[a] += g;
                    adj[b] += g;
                    break;
                case Op::Sub:
                    adj[a] += g;
                    adj[b] -= g;
                    break;
                case Op::Mul:
                    adj[a] += g * val_[b];
                    adj[b] += g * val_[a];
                    break;
                case Op::Div:
                    adj[a] += g / val_[b];
                    adj[b] -= g * val_[n] / val_[b];
                    break;
                case Op::Neg: adj[a] -= g; break;
                case Op::Exp: adj[a] += g * val_[n]; break;
                case Op::Log: adj[a] += g / val_[a]; break;
                case Op::Sqrt: adj[a] += g * 0.5 / val_[n]; break;
                case Op::Sigmoid: adj[a] += g * val_[n] * (1.0 - val_[n]); break;
                case Op::Max: adj[val_[a] >= val_[b] ? a : b] += g; break;
                case Op::Min: adj[val_[a] <= val_[b] ? a : b] += g; break;
                case Op::Dot: {
                    const Var* p = pool_.data() + a;
                    for (Var e = 0; e < b; ++e) {
                        adj[p[2 * e]] += g * val_[p[2 * e + 1]];
                        adj[p[2 * e + 1]] += g * val_[p[2 * e]];
                    }
                    break;
                }
            }
        }
        std::vector<double> out_grads;
        out_grads.reserve(leaves.size());
        for (Var v : leaves) out_grads.push_back(v <= out ? adj[static_cast<size_t>(v)] : 0.0);
        return out_grads;
    }

private:
    Var push(Op op, Var a, Var b, double v) {
        op_.push_back(op);
        a_.push_back(a);
        b_.push_back(b);
        val_.push_back(v);
        return static_cast<Var>(op_.size() - 1);
    }

    void begin_adjoint_epoch(Var out) {
        ++epoch_;
        if (adj_.size() <= static_cast<size_t>(out)) {
            adj_.resize(static_cast<size_t>(out) + 1, kNoVar);
            stamp_.resize(static_cast<size_t>(out) + 1, 0);
        }
    }

    Var get_adj(Var i) const {
        return stamp_[static_cast<size_t>(i)] == epoch_ ? adj_[static_cast<size_t>(i)] : kNoVar;
    }

    void set_adj(Var i, Var g) {
        adj_[static_cast<size_t>(i)] = g;
        stamp_[static_cast<size_t>(i)] = epoch_;
    }

    void acc_var(Var i, Var term, Var lower) {
        if (i < lower) return;
        Var cur = get_adj(i);
        set_adj(i, cur == kNoVar ? term : add(cur, term));
    }

    std::vector<Op> op_;
    std::vector<Var> a_, b_;
    std::vector<double> val_;
    std::vector<Var> pool_;  // Dot operand pairs
    std::unordered_map<uint64_t, Var> const_cache_;

    std::vector<Var> adj_;
    std::vector<uint32_t> stamp_;
    uint32_t epoch_ = 0;
    std::vector<double> grad_adj_;
};

}  // namespace omnidistill::tape
