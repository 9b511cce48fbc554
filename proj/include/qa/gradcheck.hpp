#pragma once

#include <functional>
#include <string>
#include <vector>

#include "qa/attention.hpp"

namespace qa {

// Builds a scalar loss from variable nodes created over the given inputs.
using LossBuilder = std::function<Node<double>(Tape<double>&, std::vector<Node<double>>&)>;

inline double eval_loss(const LossBuilder& build, const std::vector<DenseArray<double>>& inputs) {
    Tape<double> tape;
    std::vector<Node<double>> nodes;
    nodes.reserve(inputs.size());
    for (const auto& a : inputs) nodes.push_back(tape.constant(a));
    Node<double> loss = build(tape, nodes);
    if (loss.value().numel() != 1) throw ShapeError("gradcheck loss must be scalar");
    return loss.value()[0];
}

// Central-difference check of the reverse-mode gradients of `build` w.r.t.
// the selected inputs. Returns the worst relative error; the denominator is
// floored at 1e-3 so near-zero gradients are compared absolutely.
inline double finite_diff_check(const LossBuilder& build, std::vector<DenseArray<double>> inputs,
                                const std::vector<std::size_t>& check_inputs, double h = 1e-5) {
    Tape<double> tape;
    std::vector<Node<double>> nodes;
    nodes.reserve(inputs.size());
    for (const auto& a : inputs) nodes.push_back(tape.variable(a));
    Node<double> loss = build(tape, nodes);
    tape.backward(loss);

    std::vector<DenseArray<double>> analytic;
    analytic.reserve(check_inputs.size());
    for (std::size_t idx : check_inputs) {
        if (nodes[idx].has_grad()) {
            analytic.push_back(nodes[idx].grad());
        } else {
            analytic.push_back(DenseArray<double>::zeros(inputs[idx].shape));
        }
    }

    double worst = 0.0;
    for (std::size_t k = 0; k < check_inputs.size(); ++k) {
        DenseArray<double>& arr = inputs[check_inputs[k]];
        for (std::int64_t e = 0; e < arr.numel(); ++e) {
            const double orig = arr[e];
            arr[e] = orig + h;
            const double fp = eval_loss(build, inputs);
            arr[e] = orig - h;
            const double fm = eval_loss(build, inputs);
            arr[e] = orig;
            const double num = (fp - fm) / (2.0 * h);
            const double ana = analytic[k][e];
            const double denom = std::max({std::abs(num), std::abs(ana), 1e-3});
            worst = std::max(worst, std::abs(num - ana) / denom);
        }
    }
    return worst;
}

struct OpCheckResult {
    std::string name;
    double max_rel_err = 0.0;
    double tol = 1e-4;
    bool pass = false;
};

namespace detail {

inline DenseArray<double> rand_array(Shape s, Rng& rng, double stddev = 1.0) {
    return DenseArray<double>::randn(std::move(s), rng, stddev);
}

// Resamples entries that sit within `margin` of any kink in `kinks`.
inline void avoid_kinks(DenseArray<double>& a, Rng& rng, const std::vector<double>& kinks, double margin = 1e-3) {
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        bool bad = true;
        while (bad) {
            bad = false;
            for (double k : kinks) {
                if (std::abs(a[i] - k) < margin) {
                    a[i] = rng.normal();
                    bad = true;
                    break;
                }
            }
        }
    }
}

// Random projection makes the scalar loss sensitive to every output entry.
// Seeded (not fed from a live generator) so that rebuilding the same graph
// during finite differencing evaluates the same function.
inline Node<double> project_loss(Tape<double>& tp, Node<double> y, std::uint64_t seed) {
    Rng rng(seed);
    DenseArray<double> r = rand_array(y.shape(), rng);
    return sum_all(mul(y, tp.constant(std::move(r))));
}

}  // namespace detail

// Gradient checks for every registered op, run at 64-bit with h = 1e-5 on
// N(0,1) inputs; kink neighborhoods of piecewise ops are resampled away.
std::vector<OpCheckResult> standard_op_checks(std::uint64_t seed);

}  // namespace qa
