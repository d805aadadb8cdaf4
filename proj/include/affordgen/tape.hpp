#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "affordgen/tensor.hpp"

namespace afford {

// A named, trainable (or frozen) tensor owned by a model, living across
// training steps. Tapes reference parameter values without copying them.
struct Parameter {
    std::string name;
    Tensor value;
    bool trainable = true;
};

// Ordered registry of the parameters of one model. Registration order is
// fixed by construction and defines gradient-buffer and checkpoint layout.
class ParamSet {
public:
    int add(Parameter& p) {
        params_.push_back(&p);
        return static_cast<int>(params_.size()) - 1;
    }
    size_t size() const { return params_.size(); }
    Parameter& at(int i) { return *params_[static_cast<size_t>(i)]; }
    const Parameter& at(int i) const { return *params_[static_cast<size_t>(i)]; }
    const std::vector<Parameter*>& all() const { return params_; }

private:
    std::vector<Parameter*> params_;
};

// Per-thread gradient accumulator aligned with a ParamSet.
class GradSink {
public:
    explicit GradSink(const ParamSet& set) : set_(&set), grads_(set.size()) {}

    void accumulate(int index, const Tensor& g);
    // Folds `other` into this; call in a fixed order across threads.
    void add_from(const GradSink& other);
    void scale_all(double s);
    void clear();

    // Null until a gradient reached this parameter.
    const Tensor* get(int index) const {
        const Tensor& t = grads_[static_cast<size_t>(index)];
        return t.empty() ? nullptr : &t;
    }

private:
    const ParamSet* set_;
    std::vector<Tensor> grads_;
};

using VarId = int32_t;

// Batch statistics recorded by a train-mode batchnorm, for deferred
// running-stat folds under sample-parallel training.
struct BnBatchStats {
    Tensor mean; // [C]
    Tensor var;  // [C], biased
};

// Running statistics for batchnorm. Initialized lazily to (mean 0, var 1) on
// the first training update, then momentum-blended:
//   running = (1 - momentum) * running + momentum * batch.
struct BatchNormState {
    Tensor running_mean;
    Tensor running_var;
    bool initialized = false;
    double momentum = 0.1;
    double eps = 1e-5;

    void update(const BnBatchStats& stats);
};

// Reverse-mode autodiff tape. Nodes are appended in evaluation order, which
// is a topological order by construction; one backward pass sweeps the nodes
// exactly once in reverse. Confined to a single thread.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaves.
    VarId constant(Tensor value);
    VarId input(Tensor value, bool requires_grad = false);
    VarId param(const ParamSet& set, int index);

    // Binary / unary ops.
    VarId matmul(VarId a, VarId b);    // [MxK].[KxN]
    VarId matmul_nt(VarId a, VarId b); // [MxK].[NxK]^T
    VarId affine(VarId x, VarId w, VarId b); // x[K].w[KxN] + b[N]
    VarId add(VarId a, VarId b);
    VarId sub(VarId a, VarId b);
    VarId mul(VarId a, VarId b);
    VarId scale(VarId a, double c);
    VarId relu(VarId a);
    VarId clamp(VarId a, double lo, double hi);
    VarId softmax_rows(VarId a); // softmax along the last axis
    VarId rmsnorm(VarId x, VarId gamma, double eps = 1e-12);
    VarId conv2d(VarId x, VarId kernel, int stride, int padding);
    VarId batchnorm_train(VarId x, VarId bn_scale, VarId bn_shift, double eps,
                          BnBatchStats* stats_out);
    VarId batchnorm_eval(VarId x, VarId bn_scale, VarId bn_shift, const Tensor& running_mean,
                         const Tensor& running_var, double eps);
    VarId adaptive_avg_pool(VarId x, int out_size);
    VarId reshape(VarId x, std::vector<int64_t> shape);
    VarId flatten(VarId x);
    VarId concat_lastdim(const std::vector<VarId>& xs);
    VarId slice_lastdim(VarId x, int64_t offset, int64_t len);

    // Reductions / losses (scalar outputs).
    VarId sum(VarId x);
    VarId mean(VarId x);
    VarId sq_l2(VarId pred, VarId target);  // sum of squared differences
    VarId l2_norm(VarId pred, VarId target);
    VarId kld(VarId mu, VarId log_sigma);
    VarId cce(VarId probs, VarId target_onehot);
    VarId reparam(VarId mu, VarId log_sigma, VarId epsilon);

    const Tensor& val(VarId id) const;
    // Gradient of the last backward() w.r.t. node `id`; zeros if unreached.
    Tensor grad_of(VarId id) const;

    // Reverse sweep from a scalar loss. Populates node grads; when a sink is
    // given, parameter-leaf gradients are also accumulated there in
    // registration order.
    void backward(VarId loss, GradSink* sink = nullptr);

    size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;                    // owned unless external
        const Tensor* external = nullptr;
        Tensor grad;                     // lazily allocated
        bool requires_grad = false;
        int param_index = -1;
        std::function<void(Tape&)> backward;
    };

    VarId push(Tensor value, bool requires_grad, std::function<void(Tape&)> backward_fn);
    Tensor& grad_buf(VarId id);
    bool grad_ready(VarId id) const;
    const Node& node(VarId id) const { return nodes_[static_cast<size_t>(id)]; }
    Node& node(VarId id) { return nodes_[static_cast<size_t>(id)]; }
    bool requires(VarId id) const { return node(id).requires_grad; }

    std::vector<Node> nodes_;
};

// Spec-level batchnorm: train mode normalizes with batch statistics and
// updates `state`; eval mode uses the running statistics and requires at
// least one prior training update.
VarId batchnorm(Tape& tape, VarId x, VarId bn_scale, VarId bn_shift, BatchNormState& state,
                bool training);

} // namespace afford
