#include "affordgen/adam.hpp"

#include <cmath>

namespace afford {

void adam_step(Tensor& param, const Tensor& grad, AdamState& state) {
    check_same_shape(param, grad, "adam_step");
    if (state.m.empty()) state.m = Tensor::zeros(param.shape());
    if (state.v.empty()) state.v = Tensor::zeros(param.shape());
    check_same_shape(param, state.m, "adam_step moment m");
    check_same_shape(param, state.v, "adam_step moment v");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    double* p = param.data();
    double* m = state.m.data();
    double* v = state.v.data();
    const double* g = grad.data();
    for (int64_t i = 0; i < param.numel(); ++i) {
        m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
        v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        p[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
}

AdamOptimizer::AdamOptimizer(ParamSet& params, double lr, double beta1, double beta2, double eps)
    : params_(&params), states_(params.size()) {
    for (size_t i = 0; i < states_.size(); ++i) {
        states_[i].lr = lr;
        states_[i].beta1 = beta1;
        states_[i].beta2 = beta2;
        states_[i].eps = eps;
    }
}

void AdamOptimizer::step(const GradSink& grads) {
    t_ += 1;
    for (size_t i = 0; i < params_->size(); ++i) {
        Parameter& p = params_->at(static_cast<int>(i));
        if (!p.trainable) continue;
        const Tensor* g = grads.get(static_cast<int>(i));
        if (!g) continue;
        AdamState& s = states_[i];
        s.t = t_ - 1; // adam_step increments to t_
        adam_step(p.value, *g, s);
    }
}

void AdamOptimizer::set_steps(int64_t t) {
    t_ = t;
    for (AdamState& s : states_) s.t = t;
}

} // namespace afford
