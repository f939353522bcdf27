#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "dfeval/error.hpp"

namespace dfeval::nn {

/// A value in the computation graph. Leaves are parameters or inputs;
/// interior nodes carry a closure that pushes their gradient to parents.
struct Node {
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<int> shape;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
    bool requires_grad = false;
    bool parameter = false;  ///< trainable leaf owned by a model

    std::size_t numel() const { return value.size(); }

    std::vector<double>& ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

using Var = std::shared_ptr<Node>;

inline std::size_t shape_numel(const std::vector<int>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
}

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

/// When active, every op output records gradients even if no parent asks for
/// them. Grad-CAM uses this to read gradients at frozen feature layers.
inline bool& force_grad_flag() {
    thread_local bool flag = false;
    return flag;
}

/// When active (and force is not), op outputs never record gradients.
/// Inference uses this to skip building backward closures.
inline bool& no_grad_flag() {
    thread_local bool flag = false;
    return flag;
}

class NoGradScope {
public:
    NoGradScope() : prev_(no_grad_flag()) { no_grad_flag() = true; }
    ~NoGradScope() { no_grad_flag() = prev_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    bool prev_;
};

/// When active, gradients are never written into parameter leaves, so a
/// backward pass leaves the model untouched (used by Grad-CAM).
inline bool& detach_params_flag() {
    thread_local bool flag = false;
    return flag;
}

class DetachParamsScope {
public:
    DetachParamsScope() : prev_(detach_params_flag()) { detach_params_flag() = true; }
    ~DetachParamsScope() { detach_params_flag() = prev_; }
    DetachParamsScope(const DetachParamsScope&) = delete;
    DetachParamsScope& operator=(const DetachParamsScope&) = delete;

private:
    bool prev_;
};

inline bool wants_grad(const Node& n) { return n.requires_grad && !(n.parameter && detach_params_flag()); }

class ForceGradScope {
public:
    ForceGradScope() : prev_(force_grad_flag()) { force_grad_flag() = true; }
    ~ForceGradScope() { force_grad_flag() = prev_; }
    ForceGradScope(const ForceGradScope&) = delete;
    ForceGradScope& operator=(const ForceGradScope&) = delete;

private:
    bool prev_;
};

inline Var leaf(std::vector<double> value, std::vector<int> shape, bool requires_grad = false) {
    if (shape_numel(shape) != value.size())
        throw Error(ErrorKind::ShapeError, "leaf value size does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad || force_grad_flag();
    return n;
}

namespace detail {

inline Var make_op(std::vector<int> shape, std::vector<Var> parents) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value.assign(shape_numel(n->shape), 0.0);
    n->requires_grad = force_grad_flag();
    if (!no_grad_flag())
        for (const auto& p : parents) n->requires_grad = wants_grad(*n) || wants_grad(*p);
    n->parents = std::move(parents);
    return n;
}

} // namespace detail

/// Reverse sweep from `root`, seeded with `seed` (defaults to ones).
inline void backward(const Var& root, const std::vector<double>* seed = nullptr) {
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (wants_grad(*p) && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    auto& g = root->ensure_grad();
    if (seed) {
        if (seed->size() != g.size()) throw Error(ErrorKind::ShapeError, "backward seed has wrong size");
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*seed)[i];
    } else {
        for (auto& v : g) v += 1.0;
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

// ---------------------------------------------------------------------------
// Ops. Image tensors are [C, H, W]; vectors are [N].

struct Conv2dOptions {
    int stride = 1;
    int padding = 0;
    int groups = 1;
};

/// x [C,H,W], weight [O, C/groups, K, K], bias [O] (may be null).
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, Conv2dOptions opt = {}) {
    if (x->shape.size() != 3 || weight->shape.size() != 4)
        throw Error(ErrorKind::ShapeError, "conv2d expects [C,H,W] input and [O,C/g,K,K] weight");
    const int C = x->shape[0], H = x->shape[1], W = x->shape[2];
    const int O = weight->shape[0], Cg = weight->shape[1], K = weight->shape[2];
    const int G = opt.groups;
    if (C % G != 0 || O % G != 0 || Cg != C / G || weight->shape[3] != K)
        throw Error(ErrorKind::ShapeError, "conv2d channel mismatch: input " + shape_str(x->shape) + ", weight " +
                                               shape_str(weight->shape));
    const int S = opt.stride, P = opt.padding;
    const int OH = (H + 2 * P - K) / S + 1, OW = (W + 2 * P - K) / S + 1;
    if (OH <= 0 || OW <= 0) throw Error(ErrorKind::ShapeError, "conv2d output would be empty");
    std::vector<Var> parents{x, weight};
    if (bias) parents.push_back(bias);
    auto out = detail::make_op({O, OH, OW}, parents);
    const int Og = O / G;
    const double* xv = x->value.data();
    const double* wv = weight->value.data();
    double* ov = out->value.data();
    for (int o = 0; o < O; ++o) {
        const int g = o / Og;
        double* op = ov + static_cast<std::size_t>(o) * OH * OW;
        if (bias) std::fill(op, op + OH * OW, bias->value[o]);
        for (int ci = 0; ci < Cg; ++ci) {
            const int c = g * Cg + ci;
            const double* xp = xv + static_cast<std::size_t>(c) * H * W;
            for (int ky = 0; ky < K; ++ky) {
                for (int kx = 0; kx < K; ++kx) {
                    const double w = wv[((static_cast<std::size_t>(o) * Cg + ci) * K + ky) * K + kx];
                    for (int oy = 0; oy < OH; ++oy) {
                        const int iy = oy * S + ky - P;
                        if (iy < 0 || iy >= H) continue;
                        double* orow = op + static_cast<std::size_t>(oy) * OW;
                        const double* xrow = xp + static_cast<std::size_t>(iy) * W;
                        for (int ox = 0; ox < OW; ++ox) {
                            const int ix = ox * S + kx - P;
                            if (ix >= 0 && ix < W) orow[ox] += w * xrow[ix];
                        }
                    }
                }
            }
        }
    }
    out->backward = [=](Node& self) {
        const double* go = self.grad.data();
        double* gx = wants_grad(*x) ? x->ensure_grad().data() : nullptr;
        double* gw = wants_grad(*weight) ? weight->ensure_grad().data() : nullptr;
        if (bias && wants_grad(*bias)) {
            auto& gb = bias->ensure_grad();
            for (int o = 0; o < O; ++o) {
                double s = 0.0;
                for (int i = 0; i < OH * OW; ++i) s += go[static_cast<std::size_t>(o) * OH * OW + i];
                gb[o] += s;
            }
        }
        if (!gx && !gw) return;
        const double* xv2 = x->value.data();
        const double* wv2 = weight->value.data();
        for (int o = 0; o < O; ++o) {
            const int g = o / Og;
            const double* gop = go + static_cast<std::size_t>(o) * OH * OW;
            for (int ci = 0; ci < Cg; ++ci) {
                const int c = g * Cg + ci;
                const std::size_t xoff = static_cast<std::size_t>(c) * H * W;
                for (int ky = 0; ky < K; ++ky) {
                    for (int kx = 0; kx < K; ++kx) {
                        const std::size_t widx = ((static_cast<std::size_t>(o) * Cg + ci) * K + ky) * K + kx;
                        const double w = wv2[widx];
                        double acc_w = 0.0;
                        for (int oy = 0; oy < OH; ++oy) {
                            const int iy = oy * S + ky - P;
                            if (iy < 0 || iy >= H) continue;
                            const double* grow = gop + static_cast<std::size_t>(oy) * OW;
                            const std::size_t xrow = xoff + static_cast<std::size_t>(iy) * W;
                            for (int ox = 0; ox < OW; ++ox) {
                                const int ix = ox * S + kx - P;
                                if (ix < 0 || ix >= W) continue;
                                acc_w += grow[ox] * xv2[xrow + ix];
                                if (gx) gx[xrow + ix] += grow[ox] * w;
                            }
                        }
                        if (gw) gw[widx] += acc_w;
                    }
                }
            }
        }
    };
    return out;
}

inline Var relu(const Var& x) {
    auto out = detail::make_op(x->shape, {x});
    for (std::size_t i = 0; i < x->numel(); ++i) out->value[i] = x->value[i] > 0.0 ? x->value[i] : 0.0;
    out->backward = [x](Node& self) {
        if (!wants_grad(*x)) return;
        auto& gx = x->ensure_grad();
        for (std::size_t i = 0; i < gx.size(); ++i)
            if (x->value[i] > 0.0) gx[i] += self.grad[i];
    };
    return out;
}

/// 2x2 max pooling, stride 2 (odd trailing rows/columns dropped).
inline Var maxpool2(const Var& x) {
    const int C = x->shape[0], H = x->shape[1], W = x->shape[2];
    const int OH = H / 2, OW = W / 2;
    if (OH == 0 || OW == 0) throw Error(ErrorKind::ShapeError, "maxpool2 input too small: " + shape_str(x->shape));
    auto out = detail::make_op({C, OH, OW}, {x});
    auto argmax = std::make_shared<std::vector<std::size_t>>(out->numel());
    for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox) {
                std::size_t best = (static_cast<std::size_t>(c) * H + 2 * oy) * W + 2 * ox;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const std::size_t idx = (static_cast<std::size_t>(c) * H + 2 * oy + dy) * W + 2 * ox + dx;
                        if (x->value[idx] > x->value[best]) best = idx;
                    }
                const std::size_t o = (static_cast<std::size_t>(c) * OH + oy) * OW + ox;
                out->value[o] = x->value[best];
                (*argmax)[o] = best;
            }
    out->backward = [x, argmax](Node& self) {
        if (!wants_grad(*x)) return;
        auto& gx = x->ensure_grad();
        for (std::size_t o = 0; o < self.grad.size(); ++o) gx[(*argmax)[o]] += self.grad[o];
    };
    return out;
}

/// [C,H,W] -> [C]
inline Var global_avg_pool(const Var& x) {
    const int C = x->shape[0];
    const std::size_t hw = x->numel() / static_cast<std::size_t>(C);
    auto out = detail::make_op({C}, {x});
    for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < hw; ++i) s += x->value[c * hw + i];
        out->value[c] = s / static_cast<double>(hw);
    }
    out->backward = [x, hw, C](Node& self) {
        if (!wants_grad(*x)) return;
        auto& gx = x->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (std::size_t i = 0; i < hw; ++i) gx[c * hw + i] += self.grad[c] / static_cast<double>(hw);
    };
    return out;
}

/// Per-channel mean and variance: [C,H,W] -> [2C] (means then variances).
inline Var stats_pool(const Var& x) {
    const int C = x->shape[0];
    const std::size_t hw = x->numel() / static_cast<std::size_t>(C);
    auto out = detail::make_op({2 * C}, {x});
    auto means = std::make_shared<std::vector<double>>(C);
    for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < hw; ++i) s += x->value[c * hw + i];
        const double m = s / static_cast<double>(hw);
        double v = 0.0;
        for (std::size_t i = 0; i < hw; ++i) v += (x->value[c * hw + i] - m) * (x->value[c * hw + i] - m);
        (*means)[c] = m;
        out->value[c] = m;
        out->value[C + c] = v / static_cast<double>(hw);
    }
    out->backward = [x, hw, C, means](Node& self) {
        if (!wants_grad(*x)) return;
        auto& gx = x->ensure_grad();
        const double n = static_cast<double>(hw);
        for (int c = 0; c < C; ++c)
            for (std::size_t i = 0; i < hw; ++i)
                gx[c * hw + i] += self.grad[c] / n + self.grad[C + c] * 2.0 * (x->value[c * hw + i] - (*means)[c]) / n;
    };
    return out;
}

/// x [N], weight [M,N], bias [M] (may be null) -> [M]
inline Var linear(const Var& x, const Var& weight, const Var& bias) {
    const int M = weight->shape[0], N = weight->shape[1];
    if (static_cast<int>(x->numel()) != N)
        throw Error(ErrorKind::ShapeError, "linear: input has " + std::to_string(x->numel()) + " values, weight " +
                                               shape_str(weight->shape));
    std::vector<Var> parents{x, weight};
    if (bias) parents.push_back(bias);
    auto out = detail::make_op({M}, parents);
    for (int m = 0; m < M; ++m) {
        double s = bias ? bias->value[m] : 0.0;
        for (int n = 0; n < N; ++n) s += weight->value[static_cast<std::size_t>(m) * N + n] * x->value[n];
        out->value[m] = s;
    }
    out->backward = [x, weight, bias, M, N](Node& self) {
        if (bias && wants_grad(*bias)) {
            auto& gb = bias->ensure_grad();
            for (int m = 0; m < M; ++m) gb[m] += self.grad[m];
        }
        if (wants_grad(*weight)) {
            auto& gw = weight->ensure_grad();
            for (int m = 0; m < M; ++m)
                for (int n = 0; n < N; ++n) gw[static_cast<std::size_t>(m) * N + n] += self.grad[m] * x->value[n];
        }
        if (wants_grad(*x)) {
            auto& gx = x->ensure_grad();
            for (int m = 0; m < M; ++m)
                for (int n = 0; n < N; ++n) gx[n] += self.grad[m] * weight->value[static_cast<std::size_t>(m) * N + n];
        }
    };
    return out;
}

inline Var add(const Var& a, const Var& b) {
    if (a->shape != b->shape)
        throw Error(ErrorKind::ShapeError, "add: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    auto out = detail::make_op(a->shape, {a, b});
    for (std::size_t i = 0; i < a->numel(); ++i) out->value[i] = a->value[i] + b->value[i];
    out->backward = [a, b](Node& self) {
        for (const auto& p : {a, b}) {
            if (!wants_grad(*p)) continue;
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    };
    return out;
}

/// Concatenate flattened inputs into one vector.
inline Var concat(const std::vector<Var>& parts) {
    std::size_t total = 0;
    for (const auto& p : parts) total += p->numel();
    auto out = detail::make_op({static_cast<int>(total)}, parts);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->value.begin(), p->value.end(), out->value.begin() + static_cast<std::ptrdiff_t>(off));
        off += p->numel();
    }
    out->backward = [parts](Node& self) {
        std::size_t o = 0;
        for (const auto& p : parts) {
            if (wants_grad(*p)) {
                auto& g = p->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[o + i];
            }
            o += p->numel();
        }
    };
    return out;
}

/// Same values, new shape.
inline Var reshape(const Var& x, std::vector<int> shape) {
    if (shape_numel(shape) != x->numel())
        throw Error(ErrorKind::ShapeError, "reshape " + shape_str(x->shape) + " to " + shape_str(shape));
    auto out = detail::make_op(std::move(shape), {x});
    out->value = x->value;
    out->backward = [x](Node& self) {
        if (!wants_grad(*x)) return;
        auto& g = x->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    };
    return out;
}

/// Single element of a vector as a scalar [1].
inline Var select(const Var& x, int index) {
    auto out = detail::make_op({1}, {x});
    out->value[0] = x->value.at(static_cast<std::size_t>(index));
    out->backward = [x, index](Node& self) {
        if (wants_grad(*x)) x->ensure_grad()[static_cast<std::size_t>(index)] += self.grad[0];
    };
    return out;
}

inline std::vector<double> softmax(const std::vector<double>& z) {
    const double mx = *std::max_element(z.begin(), z.end());
    std::vector<double> p(z.size());
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - mx));
    for (auto& v : p) v /= s;
    return p;
}

/// weight * -log softmax(logits)[target], as a scalar [1].
inline Var softmax_cross_entropy(const Var& logits, int target, double weight = 1.0) {
    auto out = detail::make_op({1}, {logits});
    const auto p = softmax(logits->value);
    out->value[0] = -weight * std::log(std::max(p[static_cast<std::size_t>(target)], 1e-300));
    out->backward = [logits, p, target, weight](Node& self) {
        if (!wants_grad(*logits)) return;
        auto& g = logits->ensure_grad();
        for (std::size_t i = 0; i < p.size(); ++i)
            g[i] += self.grad[0] * weight * (p[i] - (static_cast<int>(i) == target ? 1.0 : 0.0));
    };
    return out;
}

/// squash(s) = |s|^2 / (1 + |s|^2) * s / |s|, applied to each row of a
/// [rows, dim] tensor (a plain vector is one row).
inline Var squash(const Var& s) {
    const int dim = s->shape.back();
    const std::size_t rows = s->numel() / static_cast<std::size_t>(dim);
    auto out = detail::make_op(s->shape, {s});
    for (std::size_t r = 0; r < rows; ++r) {
        const double* v = s->value.data() + r * dim;
        double n2 = 0.0;
        for (int d = 0; d < dim; ++d) n2 += v[d] * v[d];
        const double n = std::sqrt(n2);
        const double g = n / (1.0 + n2);  // squash(s) = g(|s|) * s
        for (int d = 0; d < dim; ++d) out->value[r * dim + d] = g * v[d];
    }
    out->backward = [s, dim, rows](Node& self) {
        if (!wants_grad(*s)) return;
        auto& gs = s->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* v = s->value.data() + r * dim;
            const double* go = self.grad.data() + r * dim;
            double n2 = 0.0, dot = 0.0;
            for (int d = 0; d < dim; ++d) {
                n2 += v[d] * v[d];
                dot += v[d] * go[d];
            }
            const double n = std::sqrt(n2);
            const double g = n / (1.0 + n2);
            // d/ds [g(n) s] = g I + g'(n)/n * s s^T, with g'(n) = (1-n^2)/(1+n^2)^2
            const double k = n > 1e-12 ? (1.0 - n2) / ((1.0 + n2) * (1.0 + n2)) / n : 0.0;
            for (int d = 0; d < dim; ++d) gs[r * dim + d] += g * go[d] + k * v[d] * dot;
        }
    };
    return out;
}

/// Euclidean norm of each row of [rows, dim] -> [rows].
inline Var row_norms(const Var& v) {
    const int dim = v->shape.back();
    const int rows = static_cast<int>(v->numel()) / dim;
    auto out = detail::make_op({rows}, {v});
    for (int r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int d = 0; d < dim; ++d) s += v->value[r * dim + d] * v->value[r * dim + d];
        out->value[r] = std::sqrt(s);
    }
    out->backward = [v, dim, rows](Node& self) {
        if (!wants_grad(*v)) return;
        auto& g = v->ensure_grad();
        for (int r = 0; r < rows; ++r) {
            const double n = self.value[r];
            if (n <= 0.0) continue;
            for (int d = 0; d < dim; ++d) g[r * dim + d] += self.grad[r] * v->value[r * dim + d] / n;
        }
    };
    return out;
}

/// Dynamic routing between capsule layers.
///
/// u [I, Din] input capsules, weight [I, J, Dout, Din]. Predictions
/// u_hat(i,j) = W(i,j) u(i); coupling c(i,.) = softmax(b(i,.)) with logits
/// b refined by agreement u_hat(i,j) . v(j) over `iterations` rounds;
/// output v(j) = squash(sum_i c(i,j) u_hat(i,j)), shape [J, Dout].
///
/// Gradients flow through u_hat (hence u and W) and the final squash; the
/// coupling coefficients are treated as constants in the backward pass.
inline Var dynamic_routing(const Var& u, const Var& weight, int iterations) {
    const int I = weight->shape[0], J = weight->shape[1], Dout = weight->shape[2], Din = weight->shape[3];
    if (u->shape.size() != 2 || u->shape[0] != I || u->shape[1] != Din)
        throw Error(ErrorKind::ShapeError, "routing: capsules " + shape_str(u->shape) + " vs weight " +
                                               shape_str(weight->shape));
    auto uhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(I) * J * Dout);
    auto widx = [=](int i, int j, int o, int d) {
        return ((static_cast<std::size_t>(i) * J + j) * Dout + o) * Din + d;
    };
    auto hidx = [=](int i, int j, int o) { return (static_cast<std::size_t>(i) * J + j) * Dout + o; };
    for (int i = 0; i < I; ++i)
        for (int j = 0; j < J; ++j)
            for (int o = 0; o < Dout; ++o) {
                double s = 0.0;
                for (int d = 0; d < Din; ++d) s += weight->value[widx(i, j, o, d)] * u->value[i * Din + d];
                (*uhat)[hidx(i, j, o)] = s;
            }
    std::vector<double> b(static_cast<std::size_t>(I) * J, 0.0);
    auto c = std::make_shared<std::vector<double>>(static_cast<std::size_t>(I) * J);
    std::vector<double> sj(static_cast<std::size_t>(J) * Dout), vj(sj.size());
    for (int it = 0; it < std::max(1, iterations); ++it) {
        for (int i = 0; i < I; ++i) {
            std::vector<double> row(b.begin() + i * J, b.begin() + (i + 1) * J);
            const auto p = softmax(row);
            std::copy(p.begin(), p.end(), c->begin() + i * J);
        }
        std::fill(sj.begin(), sj.end(), 0.0);
        for (int i = 0; i < I; ++i)
            for (int j = 0; j < J; ++j)
                for (int o = 0; o < Dout; ++o) sj[j * Dout + o] += (*c)[i * J + j] * (*uhat)[hidx(i, j, o)];
        for (int j = 0; j < J; ++j) {
            double n2 = 0.0;
            for (int o = 0; o < Dout; ++o) n2 += sj[j * Dout + o] * sj[j * Dout + o];
            const double g = std::sqrt(n2) / (1.0 + n2);
            for (int o = 0; o < Dout; ++o) vj[j * Dout + o] = g * sj[j * Dout + o];
        }
        if (it + 1 < iterations)
            for (int i = 0; i < I; ++i)
                for (int j = 0; j < J; ++j) {
                    double agree = 0.0;
                    for (int o = 0; o < Dout; ++o) agree += (*uhat)[hidx(i, j, o)] * vj[j * Dout + o];
                    b[i * J + j] += agree;
                }
    }
    // s_j as an intermediate node so squash's backward is reused.
    auto s_node = detail::make_op({J, Dout}, {u, weight});
    s_node->value = sj;
    s_node->backward = [=](Node& self) {
        std::vector<double> g_uhat(uhat->size());
        for (int i = 0; i < I; ++i)
            for (int j = 0; j < J; ++j)
                for (int o = 0; o < Dout; ++o) g_uhat[hidx(i, j, o)] = (*c)[i * J + j] * self.grad[j * Dout + o];
        if (wants_grad(*weight)) {
            auto& gw = weight->ensure_grad();
            for (int i = 0; i < I; ++i)
                for (int j = 0; j < J; ++j)
                    for (int o = 0; o < Dout; ++o)
                        for (int d = 0; d < Din; ++d) gw[widx(i, j, o, d)] += g_uhat[hidx(i, j, o)] * u->value[i * Din + d];
        }
        if (wants_grad(*u)) {
            auto& gu = u->ensure_grad();
            for (int i = 0; i < I; ++i)
                for (int j = 0; j < J; ++j)
                    for (int o = 0; o < Dout; ++o)
                        for (int d = 0; d < Din; ++d) gu[i * Din + d] += g_uhat[hidx(i, j, o)] * weight->value[widx(i, j, o, d)];
        }
    };
    return squash(s_node);
}

/// Capsule margin loss for output lengths [J], scalar [1]:
/// T_k max(0, m+ - |v_k|)^2 + lambda (1 - T_k) max(0, |v_k| - m-)^2.
inline Var margin_loss(const Var& lengths, int target, double weight = 1.0, double m_plus = 0.9,
                       double m_minus = 0.1, double lambda = 0.5) {
    auto out = detail::make_op({1}, {lengths});
    const int J = static_cast<int>(lengths->numel());
    double loss = 0.0;
    for (int k = 0; k < J; ++k) {
        const double len = lengths->value[k];
        loss += k == target ? std::pow(std::max(0.0, m_plus - len), 2)
                            : lambda * std::pow(std::max(0.0, len - m_minus), 2);
    }
    out->value[0] = weight * loss;
    out->backward = [=](Node& self) {
        if (!wants_grad(*lengths)) return;
        auto& g = lengths->ensure_grad();
        for (int k = 0; k < J; ++k) {
            const double len = lengths->value[k];
            const double d = k == target ? -2.0 * std::max(0.0, m_plus - len)
                                         : 2.0 * lambda * std::max(0.0, len - m_minus);
            g[k] += self.grad[0] * weight * d;
        }
    };
    return out;
}

} // namespace dfeval::nn
