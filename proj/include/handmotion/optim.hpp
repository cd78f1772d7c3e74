#pragma once

#include <unordered_map>
#include <vector>

#include "handmotion/params.hpp"

namespace handmotion {

// Adaptive-moment optimizer with bias correction. One instance owns the
// moment state for one ParamSet; step counter is shared across the set.
class AdamOptimizer {
public:
    explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8);

    // `grads` must be parallel to the trainable items of `params`
    // (same order as BoundParams leaves restricted to trainable entries).
    void step(ParamSet& params, const std::vector<std::vector<double>>& grads);

    // Convenience: pull gradients out of a binding and step. Returns the
    // pre-clip global gradient norm.
    double step_from(ParamSet& params, const BoundParams& bound, double clip_norm = 0.0);

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    std::int64_t step_count() const { return step_; }
    void set_step_count(std::int64_t s) { step_ = s; }

private:
    struct Moments {
        std::vector<double> m;
        std::vector<double> v;
    };
    double lr_, beta1_, beta2_, eps_;
    std::int64_t step_ = 0;
    std::unordered_map<std::string, Moments> moments_;
};

// Scales the gradient set so its global L2 norm is at most `max_norm`.
// Returns the pre-clip norm.
double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm);

} // namespace handmotion
