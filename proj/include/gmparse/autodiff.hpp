#pragma once

#include <deque>
#include <functional>
#include <memory>

#include "gmparse/tensor.hpp"

namespace gmparse::ad {

template <class T>
class Tape;

// Trainable tensor living outside the tape. A fresh graph is recorded each
// step; parameters persist and receive their gradient after backward().
template <class T>
struct Parameter {
    std::string name;
    TensorND<T> value;
    TensorND<T> grad;

    Parameter() = default;
    Parameter(std::string n, TensorND<T> v) : name(std::move(n)), value(std::move(v)) {
        grad = TensorND<T>::zeros(value.shape);
    }
    std::size_t size() const { return value.size(); }
};

// One recorded operation. Nodes are appended in execution order, so the tape
// itself is the topological order; backward walks it once in reverse.
template <class T>
struct Node {
    int id = 0;
    const char* op = "";
    Shape shape;
    std::vector<T> val;
    std::vector<T> grad;  // empty until touched during backward
    bool requires_grad = false;
    std::function<void(Node&)> backfn;
    Tape<T>* tape = nullptr;

    std::size_t size() const { return val.size(); }
    std::string label() const { return std::string(op) + "#" + std::to_string(id); }
};

template <class T>
struct Var {
    Node<T>* n = nullptr;

    const Shape& shape() const { return n->shape; }
    const std::vector<T>& val() const { return n->val; }
    T scalar() const { return n->val[0]; }
    Tape<T>& tape() const { return *n->tape; }
    bool defined() const { return n != nullptr; }
};

struct BackwardReport {
    // Parameters registered on the tape but unreachable from the loss. They
    // get a zero gradient rather than an error.
    std::vector<std::string> disconnected;
};

template <class T>
class Tape {
public:
    explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}

    Var<T> make(const char* op, Shape shape, std::vector<T> val, bool requires_grad,
                std::function<void(Node<T>&)> backfn = nullptr) {
        nodes_.emplace_back();
        Node<T>& n = nodes_.back();
        n.id = int(nodes_.size()) - 1;
        n.op = op;
        n.shape = std::move(shape);
        n.val = std::move(val);
        if (n.val.size() != numel(n.shape))
            throw ShapeError(n.label() + ": value size does not match shape " + shape_str(n.shape));
        n.requires_grad = requires_grad;
        if (requires_grad) n.backfn = std::move(backfn);
        n.tape = this;
        if (check_finite_) {
            for (T v : n.val)
                if (!std::isfinite(double(v)))
                    throw NonFiniteError("non-finite value produced by node " + n.label());
        }
        return Var<T>{&n};
    }

    // Leaf holding externally supplied data (images, targets, masks).
    Var<T> input(const TensorND<T>& t, bool requires_grad = false) {
        return make("input", t.shape, t.data, requires_grad);
    }

    // Leaf bound to a Parameter; backward() writes the gradient back. Repeated
    // calls for the same Parameter return the same node, so shared use inside
    // one graph accumulates into one gradient.
    Var<T> param(Parameter<T>& p) {
        for (auto& [pp, node] : params_)
            if (pp == &p) return Var<T>{node};
        Var<T> v = make("param", p.value.shape, p.value.data, true);
        params_.emplace_back(&p, v.n);
        return v;
    }

    // Accumulate g into the node's grad buffer, allocating on first touch.
    static void accum(Node<T>* n, const std::vector<T>& g) {
        if (!n->requires_grad) return;
        if (n->grad.empty()) n->grad.assign(n->size(), T(0));
        for (std::size_t i = 0; i < g.size(); ++i) n->grad[i] += g[i];
    }
    static std::vector<T>& grad_buf(Node<T>* n) {
        if (n->grad.empty()) n->grad.assign(n->size(), T(0));
        return n->grad;
    }

    BackwardReport backward(Var<T> loss) {
        if (loss.n->tape != this) throw ValueError("backward: loss from a different tape");
        if (loss.n->size() != 1) throw ValueError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        loss.n->grad.assign(1, T(1));
        for (int i = loss.n->id; i >= 0; --i) {
            Node<T>& n = nodes_[std::size_t(i)];
            if (n.grad.empty() || !n.requires_grad || !n.backfn) continue;
            n.backfn(n);
        }
        BackwardReport rep;
        for (auto& [p, node] : params_) {
            if (node->grad.empty()) {
                std::fill(p->grad.data.begin(), p->grad.data.end(), T(0));
                rep.disconnected.push_back(p->name);
            } else {
                p->grad.data = node->grad;
            }
        }
        return rep;
    }

    std::size_t node_count() const { return nodes_.size(); }
    bool check_finite() const { return check_finite_; }

private:
    std::deque<Node<T>> nodes_;
    std::vector<std::pair<Parameter<T>*, Node<T>*>> params_;
    bool check_finite_;
};

// ---------------------------------------------------------------------------
// Central finite-difference gradient checking (64-bit). `build` records the
// forward pass on a fresh tape and returns the scalar loss; it must be a pure
// function of the parameter values.
// ---------------------------------------------------------------------------

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst;  // "param[i]" of the worst element
};

inline double rel_err(double a, double n) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
}

template <class Build>
GradCheckResult check_gradients(Build&& build, std::vector<Parameter<double>*> params, double eps = 1e-5) {
    if (eps < 1e-7 || eps > 1e-3) throw ValueError("check_gradients: eps out of [1e-7, 1e-3]");
    // Analytic pass.
    {
        Tape<double> tape;
        Var<double> loss = build(tape);
        tape.backward(loss);
    }
    std::vector<TensorND<double>> analytic;
    analytic.reserve(params.size());
    for (auto* p : params) analytic.push_back(p->grad);

    auto eval = [&]() {
        Tape<double> tape;
        Var<double> loss = build(tape);
        double v = loss.scalar();
        if (!std::isfinite(v)) throw NonFiniteError("check_gradients: non-finite perturbed loss");
        return v;
    };

    GradCheckResult res;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter<double>& p = *params[pi];
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double orig = p.value.data[i];
            p.value.data[i] = orig + eps;
            const double fp = eval();
            p.value.data[i] = orig - eps;
            const double fm = eval();
            p.value.data[i] = orig;
            const double numeric = (fp - fm) / (2 * eps);
            const double e = rel_err(analytic[pi].data[i], numeric);
            if (e > res.max_rel_err) {
                res.max_rel_err = e;
                res.worst = p.name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return res;
}

}  // namespace gmparse::ad
