#include "handmotion/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace handmotion {

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

} // namespace

const Shape& Tensor::shape() const { return tape_->shape_of(id_); }
const std::vector<double>& Tensor::values() const { return tape_->values_of(id_); }
const std::vector<double>& Tensor::grad() const { return tape_->grad_of(id_); }
std::int64_t Tensor::size() const { return static_cast<std::int64_t>(values().size()); }

double Tensor::scalar() const {
    const auto& v = values();
    require(v.size() == 1, "scalar() on tensor with " + std::to_string(v.size()) + " elements");
    return v[0];
}

std::vector<double>& Tape::grad_of(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

void Tape::check_finite(const std::vector<double>& values, const char* op) const {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw NonFiniteError(std::string("non-finite value produced by ") + op);
        }
    }
}

bool Tape::any_requires_grad(const std::vector<int>& parents) const {
    for (int p : parents) {
        if (nodes_[p].requires_grad) return true;
    }
    return false;
}

Tensor Tape::make(Shape shape, std::vector<double> values, std::vector<int> parents,
                  std::function<void(Tape&, int)> back) {
    require(numel(shape) == static_cast<std::int64_t>(values.size()),
            "shape/data mismatch: " + shape_str(shape) + " vs " +
                std::to_string(values.size()) + " values");
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(values);
    n.parents = std::move(parents);
    n.back = std::move(back);
    n.requires_grad = any_requires_grad(n.parents);
    nodes_.push_back(std::move(n));
    return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor Tape::leaf(Shape shape, std::vector<double> values, bool requires_grad) {
    check_finite(values, "leaf");
    Tensor t = make(std::move(shape), std::move(values), {}, nullptr);
    nodes_[t.id()].requires_grad = requires_grad;
    nodes_[t.id()].is_leaf = true;
    return t;
}

Tensor Tape::constant(Shape shape, std::vector<double> values) {
    return leaf(std::move(shape), std::move(values), false);
}

Tensor Tape::scalar_const(double v) { return constant({}, {v}); }

// ---------------------------------------------------------------------------
// matmul

Tensor Tape::matmul(Tensor a, Tensor b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    require(sa.size() == 2 && sb.size() == 2, "matmul expects 2D tensors");
    require(sa[1] == sb[0], "matmul inner dim mismatch: " + shape_str(sa) + " x " + shape_str(sb));
    const int n = sa[0], k = sa[1], m = sb[1];
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(static_cast<std::size_t>(n) * m, 0.0);
    for (int i = 0; i < n; ++i) {
        const double* arow = av.data() + static_cast<std::size_t>(i) * k;
        double* orow = out.data() + static_cast<std::size_t>(i) * m;
        for (int kk = 0; kk < k; ++kk) {
            const double aik = arow[kk];
            const double* brow = bv.data() + static_cast<std::size_t>(kk) * m;
            for (int j = 0; j < m; ++j) orow[j] += aik * brow[j];
        }
    }
    check_finite(out, "matmul");
    const int aid = a.id(), bid = b.id();
    return make({n, m}, std::move(out), {aid, bid}, [n, k, m, aid, bid](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        const auto& av2 = t.values_of(aid);
        const auto& bv2 = t.values_of(bid);
        if (t.nodes_[aid].requires_grad) {
            auto& ga = t.grad_of(aid); // dA += G * B^T
            for (int i = 0; i < n; ++i) {
                const double* grow = g.data() + static_cast<std::size_t>(i) * m;
                double* garow = ga.data() + static_cast<std::size_t>(i) * k;
                for (int kk = 0; kk < k; ++kk) {
                    const double* brow = bv2.data() + static_cast<std::size_t>(kk) * m;
                    double acc = 0.0;
                    for (int j = 0; j < m; ++j) acc += grow[j] * brow[j];
                    garow[kk] += acc;
                }
            }
        }
        if (t.nodes_[bid].requires_grad) {
            auto& gb = t.grad_of(bid); // dB += A^T * G
            for (int i = 0; i < n; ++i) {
                const double* arow = av2.data() + static_cast<std::size_t>(i) * k;
                const double* grow = g.data() + static_cast<std::size_t>(i) * m;
                for (int kk = 0; kk < k; ++kk) {
                    const double aik = arow[kk];
                    double* gbrow = gb.data() + static_cast<std::size_t>(kk) * m;
                    for (int j = 0; j < m; ++j) gbrow[j] += aik * grow[j];
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// conv2d, stride 1

Tensor Tape::conv2d(Tensor x, Tensor w, Tensor bias, Padding pad) {
    const Shape& sx = x.shape();
    const Shape& sw = w.shape();
    require(sx.size() == 4, "conv2d input must be [N,C,H,W]");
    require(sw.size() == 4, "conv2d kernel must be [Co,Ci,kh,kw]");
    require(sx[1] == sw[1], "conv2d channel mismatch");
    const int N = sx[0], C = sx[1], H = sx[2], W = sx[3];
    const int Co = sw[0], kh = sw[2], kw = sw[3];
    require(bias.shape() == Shape{Co}, "conv2d bias must be [Co]");
    int ph = 0, pw = 0, Ho, Wo;
    if (pad == Padding::Same) {
        require(kh % 2 == 1 && kw % 2 == 1, "same padding needs odd kernel");
        ph = (kh - 1) / 2;
        pw = (kw - 1) / 2;
        Ho = H;
        Wo = W;
    } else {
        Ho = H - kh + 1;
        Wo = W - kw + 1;
        require(Ho >= 1 && Wo >= 1, "conv2d valid output would be empty");
    }
    const auto& xv = x.values();
    const auto& wv = w.values();
    const auto& bv = bias.values();
    std::vector<double> out(static_cast<std::size_t>(N) * Co * Ho * Wo);
    const std::size_t xCs = static_cast<std::size_t>(H) * W;
    const std::size_t oCs = static_cast<std::size_t>(Ho) * Wo;
    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Co; ++co) {
            double* op = out.data() + (static_cast<std::size_t>(n) * Co + co) * oCs;
            for (int ho = 0; ho < Ho; ++ho) {
                for (int wo = 0; wo < Wo; ++wo) op[ho * Wo + wo] = bv[co];
            }
            for (int ci = 0; ci < C; ++ci) {
                const double* xp = xv.data() + (static_cast<std::size_t>(n) * C + ci) * xCs;
                const double* wp = wv.data() + (static_cast<std::size_t>(co) * C + ci) * kh * kw;
                for (int i = 0; i < kh; ++i) {
                    for (int j = 0; j < kw; ++j) {
                        const double wij = wp[i * kw + j];
                        if (wij == 0.0) continue;
                        const int hlo = std::max(0, ph - i);
                        const int hhi = std::min(Ho, H + ph - i);
                        for (int ho = hlo; ho < hhi; ++ho) {
                            const int hi = ho + i - ph;
                            const int wlo = std::max(0, pw - j);
                            const int whi = std::min(Wo, W + pw - j);
                            const double* xrow = xp + static_cast<std::size_t>(hi) * W + (wlo + j - pw);
                            double* orow = op + static_cast<std::size_t>(ho) * Wo + wlo;
                            const int len = whi - wlo;
                            for (int q = 0; q < len; ++q) orow[q] += wij * xrow[q];
                        }
                    }
                }
            }
        }
    }
    check_finite(out, "conv2d");
    const int xid = x.id(), wid = w.id(), bid = bias.id();
    auto back = [=](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        const auto& xv2 = t.values_of(xid);
        const auto& wv2 = t.values_of(wid);
        const bool need_x = t.nodes_[xid].requires_grad;
        const bool need_w = t.nodes_[wid].requires_grad;
        const bool need_b = t.nodes_[bid].requires_grad;
        std::vector<double>* gx = need_x ? &t.grad_of(xid) : nullptr;
        std::vector<double>* gw = need_w ? &t.grad_of(wid) : nullptr;
        std::vector<double>* gb = need_b ? &t.grad_of(bid) : nullptr;
        for (int n = 0; n < N; ++n) {
            for (int co = 0; co < Co; ++co) {
                const double* gp = g.data() + (static_cast<std::size_t>(n) * Co + co) * oCs;
                if (need_b) {
                    double acc = 0.0;
                    for (std::size_t q = 0; q < oCs; ++q) acc += gp[q];
                    (*gb)[co] += acc;
                }
                for (int ci = 0; ci < C; ++ci) {
                    const double* xp = xv2.data() + (static_cast<std::size_t>(n) * C + ci) * xCs;
                    const double* wp = wv2.data() + (static_cast<std::size_t>(co) * C + ci) * kh * kw;
                    double* gxp = need_x ? gx->data() + (static_cast<std::size_t>(n) * C + ci) * xCs : nullptr;
                    double* gwp = need_w ? gw->data() + (static_cast<std::size_t>(co) * C + ci) * kh * kw : nullptr;
                    for (int i = 0; i < kh; ++i) {
                        for (int j = 0; j < kw; ++j) {
                            const int hlo = std::max(0, ph - i);
                            const int hhi = std::min(Ho, H + ph - i);
                            double wacc = 0.0;
                            for (int ho = hlo; ho < hhi; ++ho) {
                                const int hi = ho + i - ph;
                                const int wlo = std::max(0, pw - j);
                                const int whi = std::min(Wo, W + pw - j);
                                const double* grow = gp + static_cast<std::size_t>(ho) * Wo + wlo;
                                const double* xrow = xp + static_cast<std::size_t>(hi) * W + (wlo + j - pw);
                                const int len = whi - wlo;
                                if (need_w) {
                                    for (int q = 0; q < len; ++q) wacc += grow[q] * xrow[q];
                                }
                                if (need_x) {
                                    const double wij = wp[i * kw + j];
                                    double* gxrow = gxp + static_cast<std::size_t>(hi) * W + (wlo + j - pw);
                                    for (int q = 0; q < len; ++q) gxrow[q] += wij * grow[q];
                                }
                            }
                            if (need_w) gwp[i * kw + j] += wacc;
                        }
                    }
                }
            }
        }
    };
    return make({N, Co, Ho, Wo}, std::move(out), {xid, wid, bid}, back);
}

// ---------------------------------------------------------------------------
// batch normalization

Tensor Tape::batchnorm(Tensor x, Tensor gamma, Tensor beta,
                       std::vector<double>& running_mean,
                       std::vector<double>& running_var,
                       NormMode mode, double momentum, double eps) {
    const Shape& sx = x.shape();
    require(sx.size() == 2 || sx.size() == 4, "batchnorm input must be [N,F] or [N,C,H,W]");
    const int C = (sx.size() == 2) ? sx[1] : sx[1];
    require(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
            "batchnorm gamma/beta must be [C]");
    require(static_cast<int>(running_mean.size()) == C &&
                static_cast<int>(running_var.size()) == C,
            "batchnorm running stats size mismatch");
    const auto& xv = x.values();
    const std::int64_t total = static_cast<std::int64_t>(xv.size());
    const std::int64_t spatial = (sx.size() == 4) ? static_cast<std::int64_t>(sx[2]) * sx[3] : 1;
    const std::int64_t N = sx[0];
    const std::int64_t m = N * spatial; // elements per channel

    std::vector<double> mu(C), var(C);
    if (mode == NormMode::Batch) {
        require(m >= 1, "batchnorm needs at least one element per channel");
        std::fill(mu.begin(), mu.end(), 0.0);
        std::fill(var.begin(), var.end(), 0.0);
        for (std::int64_t idx = 0; idx < total; ++idx) {
            const int c = static_cast<int>((idx / spatial) % C);
            mu[c] += xv[idx];
        }
        for (int c = 0; c < C; ++c) mu[c] /= static_cast<double>(m);
        for (std::int64_t idx = 0; idx < total; ++idx) {
            const int c = static_cast<int>((idx / spatial) % C);
            const double d = xv[idx] - mu[c];
            var[c] += d * d;
        }
        for (int c = 0; c < C; ++c) var[c] /= static_cast<double>(m);
        for (int c = 0; c < C; ++c) {
            running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mu[c];
            running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var[c];
        }
    } else {
        mu = running_mean;
        var = running_var;
    }

    std::vector<double> inv_s(C);
    for (int c = 0; c < C; ++c) inv_s[c] = 1.0 / std::sqrt(var[c] + eps);

    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    std::vector<double> xhat(total);
    std::vector<double> out(total);
    for (std::int64_t idx = 0; idx < total; ++idx) {
        const int c = static_cast<int>((idx / spatial) % C);
        xhat[idx] = (xv[idx] - mu[c]) * inv_s[c];
        out[idx] = xhat[idx] * gv[c] + bv[c];
    }
    check_finite(out, "batchnorm");

    const int xid = x.id(), gid = gamma.id(), bid = beta.id();
    const bool batch_mode = (mode == NormMode::Batch);
    auto back = [=, xhat = std::move(xhat), inv_s = std::move(inv_s)](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        const auto& gv2 = t.values_of(gid);
        const bool need_x = t.nodes_[xid].requires_grad;
        const bool need_g = t.nodes_[gid].requires_grad;
        const bool need_b = t.nodes_[bid].requires_grad;
        if (need_g || need_b) {
            std::vector<double> dg(C, 0.0), db(C, 0.0);
            for (std::int64_t idx = 0; idx < total; ++idx) {
                const int c = static_cast<int>((idx / spatial) % C);
                dg[c] += g[idx] * xhat[idx];
                db[c] += g[idx];
            }
            if (need_g) {
                auto& gg = t.grad_of(gid);
                for (int c = 0; c < C; ++c) gg[c] += dg[c];
            }
            if (need_b) {
                auto& gb = t.grad_of(bid);
                for (int c = 0; c < C; ++c) gb[c] += db[c];
            }
        }
        if (need_x) {
            auto& gx = t.grad_of(xid);
            if (batch_mode) {
                std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
                for (std::int64_t idx = 0; idx < total; ++idx) {
                    const int c = static_cast<int>((idx / spatial) % C);
                    sum_g[c] += g[idx];
                    sum_gx[c] += g[idx] * xhat[idx];
                }
                const double inv_m = 1.0 / static_cast<double>(m);
                for (std::int64_t idx = 0; idx < total; ++idx) {
                    const int c = static_cast<int>((idx / spatial) % C);
                    gx[idx] += gv2[c] * inv_s[c] *
                               (g[idx] - inv_m * sum_g[c] - xhat[idx] * inv_m * sum_gx[c]);
                }
            } else {
                for (std::int64_t idx = 0; idx < total; ++idx) {
                    const int c = static_cast<int>((idx / spatial) % C);
                    gx[idx] += gv2[c] * inv_s[c] * g[idx];
                }
            }
        }
    };
    return make(sx, std::move(out), {xid, gid, bid}, back);
}

// ---------------------------------------------------------------------------
// elementwise ops

namespace {

template <typename F>
std::vector<double> map_values(const std::vector<double>& in, F f) {
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
    return out;
}

} // namespace

Tensor Tape::leaky_relu(Tensor x, double alpha) {
    const auto& xv = x.values();
    auto out = map_values(xv, [alpha](double v) { return v >= 0.0 ? v : alpha * v; });
    check_finite(out, "leaky_relu");
    const int xid = x.id();
    return make(x.shape(), std::move(out), {xid}, [xid, alpha](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        const auto& xv2 = t.values_of(xid);
        auto& gx = t.grad_of(xid);
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx[i] += g[i] * (xv2[i] >= 0.0 ? 1.0 : alpha);
        }
    });
}

Tensor Tape::sigmoid(Tensor x) {
    auto out = map_values(x.values(), [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    check_finite(out, "sigmoid");
    const int xid = x.id();
    return make(x.shape(), std::move(out), {xid}, [xid](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        const auto& y = t.values_of(self);
        auto& gx = t.grad_of(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
    });
}

Tensor Tape::tanh_op(Tensor x) {
    auto out = map_values(x.values(), [](double v) { return std::tanh(v); });
    check_finite(out, "tanh");
    const int xid = x.id();
    return make(x.shape(), std::move(out), {xid}, [xid](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        const auto& y = t.values_of(self);
        auto& gx = t.grad_of(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
    });
}

Tensor Tape::add(Tensor a, Tensor b) {
    require(a.shape() == b.shape(), "add shape mismatch: " + shape_str(a.shape()) + " vs " +
                                        shape_str(b.shape()));
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    check_finite(out, "add");
    const int aid = a.id(), bid = b.id();
    return make(a.shape(), std::move(out), {aid, bid}, [aid, bid](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        if (t.nodes_[aid].requires_grad) {
            auto& ga = t.grad_of(aid);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.nodes_[bid].requires_grad) {
            auto& gb = t.grad_of(bid);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
}

Tensor Tape::sub(Tensor a, Tensor b) {
    require(a.shape() == b.shape(), "sub shape mismatch: " + shape_str(a.shape()) + " vs " +
                                        shape_str(b.shape()));
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
    check_finite(out, "sub");
    const int aid = a.id(), bid = b.id();
    return make(a.shape(), std::move(out), {aid, bid}, [aid, bid](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        if (t.nodes_[aid].requires_grad) {
            auto& ga = t.grad_of(aid);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.nodes_[bid].requires_grad) {
            auto& gb = t.grad_of(bid);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

Tensor Tape::mul(Tensor a, Tensor b) {
    require(a.shape() == b.shape(), "mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                                        shape_str(b.shape()));
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    check_finite(out, "mul");
    const int aid = a.id(), bid = b.id();
    return make(a.shape(), std::move(out), {aid, bid}, [aid, bid](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        const auto& av2 = t.values_of(aid);
        const auto& bv2 = t.values_of(bid);
        if (t.nodes_[aid].requires_grad) {
            auto& ga = t.grad_of(aid);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
        }
        if (t.nodes_[bid].requires_grad) {
            auto& gb = t.grad_of(bid);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
        }
    });
}

Tensor Tape::add_bias(Tensor x, Tensor bias) {
    const Shape& sx = x.shape();
    const Shape& sb = bias.shape();
    require(sb.size() == 1, "add_bias expects 1D bias");
    require((sx.size() == 2 && sx[1] == sb[0]) || (sx.size() == 4 && sx[1] == sb[0]),
            "add_bias shape mismatch: " + shape_str(sx) + " + " + shape_str(sb));
    const std::int64_t spatial = (sx.size() == 4) ? static_cast<std::int64_t>(sx[2]) * sx[3] : 1;
    const int C = sb[0];
    const auto& xv = x.values();
    const auto& bv = bias.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const int c = static_cast<int>((static_cast<std::int64_t>(i) / spatial) % C);
        out[i] = xv[i] + bv[c];
    }
    check_finite(out, "add_bias");
    const int xid = x.id(), bid = bias.id();
    return make(sx, std::move(out), {xid, bid}, [xid, bid, spatial, C](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        if (t.nodes_[xid].requires_grad) {
            auto& gx = t.grad_of(xid);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (t.nodes_[bid].requires_grad) {
            auto& gb = t.grad_of(bid);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const int c = static_cast<int>((static_cast<std::int64_t>(i) / spatial) % C);
                gb[c] += g[i];
            }
        }
    });
}

Tensor Tape::abs_op(Tensor x) {
    auto out = map_values(x.values(), [](double v) { return std::fabs(v); });
    check_finite(out, "abs");
    const int xid = x.id();
    return make(x.shape(), std::move(out), {xid}, [xid](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        const auto& xv = t.values_of(xid);
        auto& gx = t.grad_of(xid);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = xv[i] > 0.0 ? 1.0 : (xv[i] < 0.0 ? -1.0 : 0.0);
            gx[i] += g[i] * s;
        }
    });
}

Tensor Tape::square(Tensor x) {
    auto out = map_values(x.values(), [](double v) { return v * v; });
    check_finite(out, "square");
    const int xid = x.id();
    return make(x.shape(), std::move(out), {xid}, [xid](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        const auto& xv = t.values_of(xid);
        auto& gx = t.grad_of(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * 2.0 * xv[i];
    });
}

Tensor Tape::mean(Tensor x) {
    const auto& xv = x.values();
    require(!xv.empty(), "mean of empty tensor");
    double acc = 0.0;
    for (double v : xv) acc += v;
    const double m = acc / static_cast<double>(xv.size());
    check_finite({m}, "mean");
    const int xid = x.id();
    const double inv_n = 1.0 / static_cast<double>(xv.size());
    return make({}, {m}, {xid}, [xid, inv_n](Tape& t, int self) {
        const double g = t.grad_of(self)[0];
        auto& gx = t.grad_of(xid);
        for (auto& v : gx) v += g * inv_n;
    });
}

Tensor Tape::sum(Tensor x) {
    const auto& xv = x.values();
    double acc = 0.0;
    for (double v : xv) acc += v;
    check_finite({acc}, "sum");
    const int xid = x.id();
    return make({}, {acc}, {xid}, [xid](Tape& t, int self) {
        const double g = t.grad_of(self)[0];
        auto& gx = t.grad_of(xid);
        for (auto& v : gx) v += g;
    });
}

Tensor Tape::scale(Tensor x, double k) {
    auto out = map_values(x.values(), [k](double v) { return k * v; });
    check_finite(out, "scale");
    const int xid = x.id();
    return make(x.shape(), std::move(out), {xid}, [xid, k](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        auto& gx = t.grad_of(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * k;
    });
}

Tensor Tape::add_scalar(Tensor x, double k) {
    auto out = map_values(x.values(), [k](double v) { return v + k; });
    check_finite(out, "add_scalar");
    const int xid = x.id();
    return make(x.shape(), std::move(out), {xid}, [xid](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        auto& gx = t.grad_of(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

// ---------------------------------------------------------------------------
// shape ops

Tensor Tape::reshape(Tensor x, Shape shape) {
    require(numel(shape) == x.size(),
            "reshape numel mismatch: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    const int xid = x.id();
    return make(std::move(shape), x.values(), {xid}, [xid](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        auto& gx = t.grad_of(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

Tensor Tape::concat(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat of zero tensors");
    const Shape& s0 = parts[0].shape();
    require(!s0.empty(), "concat needs rank >= 1");
    Shape trailing(s0.begin() + 1, s0.end());
    int rows = 0;
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        const Shape& s = p.shape();
        require(s.size() == s0.size() && Shape(s.begin() + 1, s.end()) == trailing,
                "concat trailing shape mismatch");
        rows += s[0];
        total += p.values().size();
    }
    std::vector<double> out;
    out.reserve(total);
    std::vector<int> ids;
    std::vector<std::size_t> offsets;
    for (const Tensor& p : parts) {
        offsets.push_back(out.size());
        const auto& v = p.values();
        out.insert(out.end(), v.begin(), v.end());
        ids.push_back(p.id());
    }
    Shape out_shape = s0;
    out_shape[0] = rows;
    return make(std::move(out_shape), std::move(out), std::vector<int>(ids),
                [ids, offsets](Tape& t, int self) {
                    const auto& g = t.grad_of(self);
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                        if (!t.nodes_[ids[k]].requires_grad) continue;
                        auto& gp = t.grad_of(ids[k]);
                        const double* src = g.data() + offsets[k];
                        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += src[i];
                    }
                });
}

Tensor Tape::slice_rows(Tensor x, int r0, int r1) {
    const Shape& sx = x.shape();
    require(!sx.empty(), "slice_rows needs rank >= 1");
    require(0 <= r0 && r0 < r1 && r1 <= sx[0], "slice_rows range out of bounds");
    const std::size_t stride = static_cast<std::size_t>(numel(sx)) / sx[0];
    const auto& xv = x.values();
    std::vector<double> out(xv.begin() + r0 * stride, xv.begin() + r1 * stride);
    Shape out_shape = sx;
    out_shape[0] = r1 - r0;
    const int xid = x.id();
    return make(std::move(out_shape), std::move(out), {xid},
                [xid, r0, stride](Tape& t, int self) {
                    const auto& g = t.grad_of(self);
                    auto& gx = t.grad_of(xid);
                    double* dst = gx.data() + r0 * stride;
                    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                });
}

Tensor Tape::slice_cols(Tensor x, int c0, int c1) {
    const Shape& sx = x.shape();
    require(sx.size() == 2, "slice_cols expects a 2D tensor");
    require(0 <= c0 && c0 < c1 && c1 <= sx[1], "slice_cols range out of bounds");
    const int n = sx[0], c = sx[1], w = c1 - c0;
    const auto& xv = x.values();
    std::vector<double> out(static_cast<std::size_t>(n) * w);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < w; ++j) {
            out[static_cast<std::size_t>(i) * w + j] = xv[static_cast<std::size_t>(i) * c + c0 + j];
        }
    }
    const int xid = x.id();
    return make({n, w}, std::move(out), {xid}, [xid, c0, c, w, n](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        auto& gx = t.grad_of(xid);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < w; ++j) {
                gx[static_cast<std::size_t>(i) * c + c0 + j] += g[static_cast<std::size_t>(i) * w + j];
            }
        }
    });
}

Tensor Tape::detach(Tensor x) {
    return leaf(x.shape(), x.values(), false);
}

Tensor Tape::custom(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                    std::function<void(Tape&, int)> back) {
    check_finite(values, "custom");
    std::vector<int> ids;
    ids.reserve(parents.size());
    for (const Tensor& p : parents) ids.push_back(p.id());
    return make(std::move(shape), std::move(values), std::move(ids), std::move(back));
}

// ---------------------------------------------------------------------------
// backward

void Tape::backward(Tensor loss) {
    require(loss.defined() && loss.tape_ == this, "loss from a different tape");
    const int root = loss.id();
    require(numel(nodes_[root].shape) == 1, "backward requires a scalar loss");
    require(nodes_[root].requires_grad, "loss is detached from every trainable leaf");

    // mark nodes reachable from the loss through parent links
    std::vector<char> reachable(nodes_.size(), 0);
    std::vector<int> stack{root};
    reachable[root] = 1;
    while (!stack.empty()) {
        const int id = stack.back();
        stack.pop_back();
        for (int p : nodes_[id].parents) {
            if (!reachable[p] && nodes_[p].requires_grad) {
                reachable[p] = 1;
                stack.push_back(p);
            }
        }
    }

    // interior grads restart from zero each call; leaf grads accumulate
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (!reachable[i]) continue;
        Node& n = nodes_[i];
        if (n.is_leaf) {
            if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
        } else {
            n.grad.assign(n.value.size(), 0.0);
        }
    }
    grad_of(root)[0] += 1.0;

    for (int id = root; id >= 0; --id) {
        if (!reachable[id]) continue;
        Node& n = nodes_[id];
        if (n.back && n.requires_grad) n.back(*this, id);
    }
}

void Tape::zero_grad() {
    for (Node& n : nodes_) {
        if (!n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), 0.0);
    }
}

} // namespace handmotion
