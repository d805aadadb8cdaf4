#pragma once

#include <cmath>
#include <functional>

#include "affordgen/tape.hpp"

namespace afford::testing {

// Central-difference gradient oracle. Rebuilds the forward pass around each
// perturbed parameter element and compares against reverse-mode gradients.
// Returns the maximum relative error over every element of every trainable
// parameter in `set`.
inline double gradcheck(ParamSet& set, const std::function<VarId(Tape&)>& build,
                        double h = 1e-5) {
    Tape tape;
    const VarId loss = build(tape);
    GradSink sink(set);
    tape.backward(loss, &sink);

    auto eval = [&]() {
        Tape t;
        return t.val(build(t))[0];
    };

    double max_rel = 0.0;
    for (size_t pi = 0; pi < set.size(); ++pi) {
        Parameter& p = set.at(static_cast<int>(pi));
        if (!p.trainable) continue;
        const Tensor* g = sink.get(static_cast<int>(pi));
        for (int64_t i = 0; i < p.value.numel(); ++i) {
            const double saved = p.value[i];
            p.value[i] = saved + h;
            const double up = eval();
            p.value[i] = saved - h;
            const double down = eval();
            p.value[i] = saved;
            const double fd = (up - down) / (2.0 * h);
            const double an = g ? (*g)[i] : 0.0;
            const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-6});
            max_rel = std::max(max_rel, std::fabs(fd - an) / denom);
        }
    }
    return max_rel;
}

} // namespace afford::testing
