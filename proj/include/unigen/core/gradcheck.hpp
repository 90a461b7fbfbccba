#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "unigen/core/ops.hpp"

namespace unigen::core {

struct GradCheckReport {
    double max_rel_err = 0.0;
    bool pass = false;
    std::string detail;  // worst element, or the non-finite operand
};

// Compares reverse-mode gradients of a scalar function against central finite
// differences (f64, step 1e-5 by default). Relative error uses a small floor
// so exactly-zero gradients are not penalized by FD round-off.
template <class T>
GradCheckReport gradcheck(
    const std::function<Var<T>(Tape<T>&, std::vector<Var<T>>&)>& f,
    const std::vector<Tensor<T>>& points, double rel_tol, double fd_step = 1e-5) {
    GradCheckReport rep;
    for (size_t pi = 0; pi < points.size(); ++pi) {
        if (!points[pi].finite()) {
            rep.detail = "non-finite input tensor #" + std::to_string(pi);
            return rep;
        }
    }

    auto eval = [&](const std::vector<Tensor<T>>& xs, bool record, std::vector<Tensor<T>>* grads) {
        Tape<T> tape(record);
        std::vector<Var<T>> vars;
        vars.reserve(xs.size());
        for (const auto& x : xs) vars.push_back(tape.leaf(x, record));
        Var<T> out = f(tape, vars);
        const T value = out.scalar();
        if (record && grads) {
            tape.backward(out);
            grads->clear();
            for (const auto& v : vars) {
                if (tape.has_grad(v.id))
                    grads->push_back(tape.grad(v.id));
                else
                    grads->push_back(Tensor<T>::zeros(v.val().shape));
            }
        }
        return static_cast<double>(value);
    };

    std::vector<Tensor<T>> analytic;
    const double f0 = eval(points, true, &analytic);
    if (!std::isfinite(f0)) {
        rep.detail = "non-finite function value at base point";
        return rep;
    }
    for (size_t pi = 0; pi < analytic.size(); ++pi) {
        if (!analytic[pi].finite()) {
            rep.detail = "non-finite gradient for input #" + std::to_string(pi);
            return rep;
        }
    }

    std::vector<Tensor<T>> xs = points;
    for (size_t pi = 0; pi < xs.size(); ++pi) {
        for (int64_t e = 0; e < xs[pi].size(); ++e) {
            const T saved = xs[pi].v[static_cast<size_t>(e)];
            xs[pi].v[static_cast<size_t>(e)] = saved + static_cast<T>(fd_step);
            const double fp = eval(xs, false, nullptr);
            xs[pi].v[static_cast<size_t>(e)] = saved - static_cast<T>(fd_step);
            const double fm = eval(xs, false, nullptr);
            xs[pi].v[static_cast<size_t>(e)] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                rep.detail = "non-finite perturbed value at input #" + std::to_string(pi) +
                             " elem " + std::to_string(e);
                rep.pass = false;
                return rep;
            }
            const double fd = (fp - fm) / (2.0 * fd_step);
            const double an = static_cast<double>(analytic[pi].v[static_cast<size_t>(e)]);
            const double denom = std::max({1e-3, std::fabs(an), std::fabs(fd)});
            const double err = std::fabs(an - fd) / denom;
            if (err > rep.max_rel_err) {
                rep.max_rel_err = err;
                rep.detail = "input #" + std::to_string(pi) + " elem " + std::to_string(e) +
                             " analytic " + std::to_string(an) + " fd " + std::to_string(fd);
            }
        }
    }
    rep.pass = rep.max_rel_err <= rel_tol;
    return rep;
}

}  // namespace unigen::core
