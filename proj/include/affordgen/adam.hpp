#pragma once

#include <cstdint>
#include <vector>

#include "affordgen/tape.hpp"
#include "affordgen/tensor.hpp"

namespace afford {

// Per-parameter Adam state. m and v match the parameter shape; t counts
// completed steps.
struct AdamState {
    Tensor m;
    Tensor v;
    int64_t t = 0;
    double lr = 1e-3;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam update for a single tensor. Increments state.t.
void adam_step(Tensor& param, const Tensor& grad, AdamState& state);

// Optimizer over a ParamSet. Skips parameters without a gradient in the sink
// and non-trainable parameters.
class AdamOptimizer {
public:
    AdamOptimizer(ParamSet& params, double lr = 1e-3, double beta1 = 0.5, double beta2 = 0.999,
                  double eps = 1e-8);

    void step(const GradSink& grads);
    int64_t steps_taken() const { return t_; }

    // Checkpoint access: moment buffers by parameter index.
    AdamState& state(int index) { return states_[static_cast<size_t>(index)]; }
    const AdamState& state(int index) const { return states_[static_cast<size_t>(index)]; }
    size_t size() const { return states_.size(); }
    void set_steps(int64_t t);

private:
    ParamSet* params_;
    std::vector<AdamState> states_;
    int64_t t_ = 0;
};

} // namespace afford
