#include "handmotion/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace handmotion {

AdamOptimizer::AdamOptimizer(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamOptimizer::step(ParamSet& params, const std::vector<std::vector<double>>& grads) {
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    std::size_t gi = 0;
    for (Param& p : params.items()) {
        if (!p.trainable) continue;
        if (gi >= grads.size()) throw std::invalid_argument("missing gradient for " + p.name);
        const std::vector<double>& g = grads[gi++];
        if (g.size() != p.value.size()) {
            throw std::invalid_argument("gradient shape mismatch for " + p.name);
        }
        Moments& mo = moments_[p.name];
        if (mo.m.size() != p.value.size()) {
            mo.m.assign(p.value.size(), 0.0);
            mo.v.assign(p.value.size(), 0.0);
        }
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            mo.m[i] = beta1_ * mo.m[i] + (1.0 - beta1_) * g[i];
            mo.v[i] = beta2_ * mo.v[i] + (1.0 - beta2_) * g[i] * g[i];
            const double mhat = mo.m[i] / bc1;
            const double vhat = mo.v[i] / bc2;
            p.value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
    if (gi != grads.size()) throw std::invalid_argument("extra gradients passed to step");
}

double AdamOptimizer::step_from(ParamSet& params, const BoundParams& bound, double clip_norm) {
    std::vector<std::vector<double>> grads;
    grads.reserve(params.size());
    std::size_t li = 0;
    for (const Param& p : params.items()) {
        Tensor leaf = bound.leaves()[li++];
        if (!p.trainable) continue;
        grads.push_back(leaf.grad());
    }
    const double norm = clip_global_norm(grads, clip_norm);
    step(params, grads);
    return norm;
}

double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads) {
        for (double v : g) sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& g : grads) {
            for (double& v : g) v *= s;
        }
    }
    return norm;
}

} // namespace handmotion
