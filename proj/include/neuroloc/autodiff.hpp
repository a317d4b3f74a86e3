#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "neuroloc/error.hpp"
#include "neuroloc/rng.hpp"

namespace neuroloc::ad {

// Reverse-mode automatic differentiation over dense row-major tensors,
// templated on the scalar type: f64 where gradients are verified against
// finite differences, f32 where training throughput matters. The op set is
// exactly what the models in this project need; there is no broadcasting
// beyond per-channel bias/affine shapes, and no implicit type promotion.
//
// Volumetric tensors are [B, C, D, H, W] row-major; matrices are
// [rows, cols] row-major. All loops run in fixed index order and Eigen is
// used single-threaded per graph, so results are bit-reproducible.

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

inline std::int64_t numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

template <typename S>
struct TensorNode {
    std::vector<int> shape;
    std::vector<S> values;
    std::vector<S> grad;  // lazily allocated; empty means "no gradient received"
    bool requires_grad = false;
    std::vector<TensorNode*> parents;              // op provenance
    std::function<void(TensorNode&)> backward_fn;  // empty for leaves
    std::int64_t tape_order = -1;                  // creation index; -1 for free leaves

    std::int64_t size() const { return static_cast<std::int64_t>(values.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), S(0));
    }
};

// Arena of intermediate nodes for one forward/backward pass. Parameters live
// outside the graph (in a ParamStore) and are referenced as leaf parents;
// clear() drops the intermediates while parameter values and accumulated
// parameter gradients survive to the optimizer step.
template <typename S>
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    TensorNode<S>* tensor(std::vector<int> shape, bool requires_grad = false) {
        const std::int64_t n = numel(shape);
        require(!shape.empty() && n > 0, ErrorKind::data, "tensor shape must have positive dimensions");
        nodes_.emplace_back();
        TensorNode<S>& t = nodes_.back();
        t.shape = std::move(shape);
        t.values.assign(static_cast<std::size_t>(n), S(0));
        t.requires_grad = requires_grad;
        t.tape_order = counter_++;
        return &t;
    }

    TensorNode<S>* tensor(std::vector<int> shape, const std::vector<S>& values,
                          bool requires_grad = false) {
        TensorNode<S>* t = tensor(std::move(shape), requires_grad);
        require(static_cast<std::int64_t>(values.size()) == t->size(), ErrorKind::data,
                "tensor literal size does not match its shape");
        t->values = values;
        return t;
    }

    // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse creation
    // order. The tape order is a topological order by construction (every
    // op's parents exist before it), and nodes that never received a
    // gradient are skipped, which prunes branches unreachable from `loss`.
    void backward(TensorNode<S>* loss) {
        require(loss != nullptr && loss->size() == 1, ErrorKind::data,
                "backward target must be a scalar node");
        require(loss->tape_order >= 0, ErrorKind::data,
                "backward target must belong to this graph");
        loss->ensure_grad();
        loss->grad[0] += S(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->backward_fn && !it->grad.empty()) it->backward_fn(*it);
        }
    }

    void clear() { nodes_.clear(); }
    std::size_t node_count() const { return nodes_.size(); }

private:
    std::deque<TensorNode<S>> nodes_;  // deque keeps node addresses stable
    std::int64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Parameters and optimizer
// ---------------------------------------------------------------------------

// Named trainable tensors with insertion-ordered, deterministic iteration.
template <typename S>
class ParamStore {
public:
    TensorNode<S>& create(const std::string& name, std::vector<int> shape) {
        require(by_name_.find(name) == by_name_.end(), ErrorKind::data,
                "duplicate parameter name: " + name);
        const std::int64_t n = numel(shape);
        require(!shape.empty() && n > 0, ErrorKind::data,
                "parameter shape must have positive dimensions: " + name);
        auto node = std::make_unique<TensorNode<S>>();
        node->shape = std::move(shape);
        node->values.assign(static_cast<std::size_t>(n), S(0));
        node->requires_grad = true;
        TensorNode<S>* raw = node.get();
        by_name_.emplace(name, std::move(node));
        order_.push_back(name);
        return *raw;
    }

    TensorNode<S>* find(const std::string& name) {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : it->second.get();
    }
    const TensorNode<S>* find(const std::string& name) const {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : it->second.get();
    }
    TensorNode<S>& at(const std::string& name) {
        TensorNode<S>* p = find(name);
        require(p != nullptr, ErrorKind::data, "unknown parameter: " + name);
        return *p;
    }
    const TensorNode<S>& at(const std::string& name) const {
        const TensorNode<S>* p = find(name);
        require(p != nullptr, ErrorKind::data, "unknown parameter: " + name);
        return *p;
    }

    const std::vector<std::string>& names() const { return order_; }
    std::size_t count() const { return order_.size(); }

    std::int64_t total_params() const {
        std::int64_t n = 0;
        for (const auto& name : order_) n += find(name)->size();
        return n;
    }

    void zero_grad() {
        for (const auto& name : order_) {
            TensorNode<S>* p = find(name);
            std::fill(p->grad.begin(), p->grad.end(), S(0));
        }
    }

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, std::unique_ptr<TensorNode<S>>> by_name_;
};

template <typename S>
struct AdamHyper {
    S lr = S(0);
    S beta1 = S(0.9);
    S beta2 = S(0.999);
    S eps = S(1e-8);
};

// First/second-moment state aligned with the store's parameter order.
template <typename S>
struct AdamState {
    AdamHyper<S> hyper;
    std::int64_t t = 0;
    std::vector<std::vector<S>> m;
    std::vector<std::vector<S>> v;

    AdamState() = default;
    AdamState(const ParamStore<S>& params, AdamHyper<S> h) : hyper(h) {
        require(hyper.lr > S(0), ErrorKind::data, "adam learning rate must be positive");
        m.reserve(params.count());
        v.reserve(params.count());
        for (const auto& name : params.names()) {
            const std::size_t n = params.at(name).values.size();
            m.emplace_back(n, S(0));
            v.emplace_back(n, S(0));
        }
    }
};

// Standard bias-corrected Adam update; an empty gradient counts as zero.
template <typename S>
void adam_step(ParamStore<S>& params, AdamState<S>& state) {
    require(state.m.size() == params.count() && state.v.size() == params.count(), ErrorKind::data,
            "adam state does not match the parameter store");
    state.t += 1;
    const S b1 = state.hyper.beta1;
    const S b2 = state.hyper.beta2;
    const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(b1), static_cast<double>(state.t)));
    const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(b2), static_cast<double>(state.t)));
    std::size_t pi = 0;
    for (const auto& name : params.names()) {
        TensorNode<S>& p = params.at(name);
        std::vector<S>& mm = state.m[pi];
        std::vector<S>& vv = state.v[pi];
        require(mm.size() == p.values.size(), ErrorKind::data,
                "adam moment size does not match parameter: " + name);
        const bool has_grad = !p.grad.empty();
        for (std::size_t i = 0; i < p.values.size(); ++i) {
            const S g = has_grad ? p.grad[i] : S(0);
            mm[i] = b1 * mm[i] + (S(1) - b1) * g;
            vv[i] = b2 * vv[i] + (S(1) - b2) * g * g;
            const S mhat = mm[i] / bc1;
            const S vhat = vv[i] / bc2;
            p.values[i] -= state.hyper.lr * mhat / (std::sqrt(vhat) + state.hyper.eps);
        }
        ++pi;
    }
}

// Centered-uniform fill in [-bound, bound]; draws f64 then rounds to S so a
// given seed produces the same parameters at either precision.
template <typename S>
void fill_uniform(TensorNode<S>& t, double bound, Rng& rng) {
    for (auto& x : t.values) x = static_cast<S>(rng.uniform(-bound, bound));
}

// ---------------------------------------------------------------------------
// Internal helpers
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
bool same_shape(const TensorNode<S>* a, const TensorNode<S>* b) {
    return a->shape == b->shape;
}

inline void check5d(const std::vector<int>& shape, const char* what) {
    require(shape.size() == 5, ErrorKind::data,
            std::string(what) + " expects a [B, C, D, H, W] tensor");
}

// Patch-matrix layout for convolution: row (ci, kd, kh, kw), column
// (od, oh, ow); out-of-volume taps are zero (zero padding).
template <typename S>
void im2col(const S* in, int Cin, int D, int H, int W, int k, int pad, int stride, int Do, int Ho,
            int Wo, RowMat<S>& col) {
    const int t_per_row = Do * Ho * Wo;
    col.resize(Cin * k * k * k, t_per_row);
    for (int ci = 0; ci < Cin; ++ci) {
        const S* src = in + static_cast<std::ptrdiff_t>(ci) * D * H * W;
        for (int kd = 0; kd < k; ++kd) {
            for (int kh = 0; kh < k; ++kh) {
                for (int kw = 0; kw < k; ++kw) {
                    const int r = ((ci * k + kd) * k + kh) * k + kw;
                    S* dst = col.data() + static_cast<std::ptrdiff_t>(r) * t_per_row;
                    int t = 0;
                    for (int od = 0; od < Do; ++od) {
                        const int id = od * stride + kd - pad;
                        if (id < 0 || id >= D) {
                            std::fill(dst + t, dst + t + Ho * Wo, S(0));
                            t += Ho * Wo;
                            continue;
                        }
                        for (int oh = 0; oh < Ho; ++oh) {
                            const int ih = oh * stride + kh - pad;
                            if (ih < 0 || ih >= H) {
                                std::fill(dst + t, dst + t + Wo, S(0));
                                t += Wo;
                                continue;
                            }
                            const S* row = src + (static_cast<std::ptrdiff_t>(id) * H + ih) * W;
                            for (int ow = 0; ow < Wo; ++ow) {
                                const int iw = ow * stride + kw - pad;
                                dst[t++] = (iw < 0 || iw >= W) ? S(0) : row[iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-adds the patch-matrix gradient back onto the
// input volume.
template <typename S>
void col2im_add(const RowMat<S>& g, S* din, int Cin, int D, int H, int W, int k, int pad,
                int stride, int Do, int Ho, int Wo) {
    const int t_per_row = Do * Ho * Wo;
    for (int ci = 0; ci < Cin; ++ci) {
        S* dst = din + static_cast<std::ptrdiff_t>(ci) * D * H * W;
        for (int kd = 0; kd < k; ++kd) {
            for (int kh = 0; kh < k; ++kh) {
                for (int kw = 0; kw < k; ++kw) {
                    const int r = ((ci * k + kd) * k + kh) * k + kw;
                    const S* src = g.data() + static_cast<std::ptrdiff_t>(r) * t_per_row;
                    int t = 0;
                    for (int od = 0; od < Do; ++od) {
                        const int id = od * stride + kd - pad;
                        if (id < 0 || id >= D) {
                            t += Ho * Wo;
                            continue;
                        }
                        for (int oh = 0; oh < Ho; ++oh) {
                            const int ih = oh * stride + kh - pad;
                            if (ih < 0 || ih >= H) {
                                t += Wo;
                                continue;
                            }
                            S* row = dst + (static_cast<std::ptrdiff_t>(id) * H + ih) * W;
                            for (int ow = 0; ow < Wo; ++ow) {
                                const int iw = ow * stride + kw - pad;
                                if (iw >= 0 && iw < W) row[iw] += src[t];
                                ++t;
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename S>
S sigmoid(S x) {
    if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
    const S e = std::exp(x);
    return e / (S(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

// Cross-correlation with cubic kernels k in {1, 3}, zero padding k/2 and
// stride in {1, 2}. input [B, Cin, D, H, W], weight [Cout, Cin, k, k, k],
// bias [Cout] -> [B, Cout, Do, Ho, Wo] with Do = (D + 2*(k/2) - k)/stride + 1.
template <typename S>
TensorNode<S>* conv3d(Graph<S>& g, TensorNode<S>* input, TensorNode<S>* weight,
                      TensorNode<S>* bias, int stride = 1) {
    detail::check5d(input->shape, "conv3d input");
    require(weight->shape.size() == 5, ErrorKind::data,
            "conv3d weight expects shape [Cout, Cin, k, k, k]");
    const int B = input->dim(0), Cin = input->dim(1);
    const int D = input->dim(2), H = input->dim(3), W = input->dim(4);
    const int Cout = weight->dim(0);
    const int k = weight->dim(2);
    require(weight->dim(1) == Cin, ErrorKind::data, "conv3d weight input-channel mismatch");
    require(weight->dim(3) == k && weight->dim(4) == k && (k == 1 || k == 3), ErrorKind::data,
            "conv3d kernel must be cubic with size 1 or 3");
    require(bias != nullptr && bias->size() == Cout, ErrorKind::data,
            "conv3d bias must have one entry per output channel");
    require(stride == 1 || stride == 2, ErrorKind::data, "conv3d stride must be 1 or 2");
    const int pad = k / 2;
    const int Do = (D + 2 * pad - k) / stride + 1;
    const int Ho = (H + 2 * pad - k) / stride + 1;
    const int Wo = (W + 2 * pad - k) / stride + 1;
    require(Do >= 1 && Ho >= 1 && Wo >= 1, ErrorKind::data, "conv3d output would be empty");

    TensorNode<S>* out = g.tensor({B, Cout, Do, Ho, Wo},
                                  input->requires_grad || weight->requires_grad || bias->requires_grad);
    const int T = Do * Ho * Wo;
    const int ck = Cin * k * k * k;
    Eigen::Map<const RowMat<S>> Wm(weight->values.data(), Cout, ck);
    Eigen::Map<const VecX<S>> bv(bias->values.data(), Cout);
    const bool plain = (k == 1 && stride == 1);
    RowMat<S> col;
    for (int b = 0; b < B; ++b) {
        const S* in_b = input->values.data() + static_cast<std::ptrdiff_t>(b) * Cin * D * H * W;
        Eigen::Map<RowMat<S>> O(out->values.data() + static_cast<std::ptrdiff_t>(b) * Cout * T,
                                Cout, T);
        if (plain) {
            Eigen::Map<const RowMat<S>> X(in_b, Cin, T);
            O.noalias() = Wm * X;
        } else {
            detail::im2col(in_b, Cin, D, H, W, k, pad, stride, Do, Ho, Wo, col);
            O.noalias() = Wm * col;
        }
        O.colwise() += bv;
    }

    out->parents = {input, weight, bias};
    out->backward_fn = [input, weight, bias, B, Cin, D, H, W, Cout, k, pad, stride, Do, Ho, Wo, T,
                        ck, plain](TensorNode<S>& o) {
        Eigen::Map<const RowMat<S>> Wm(weight->values.data(), Cout, ck);
        if (input->requires_grad) input->ensure_grad();
        if (weight->requires_grad) weight->ensure_grad();
        if (bias->requires_grad) bias->ensure_grad();
        RowMat<S> col;
        for (int b = 0; b < B; ++b) {
            Eigen::Map<const RowMat<S>> dO(o.grad.data() + static_cast<std::ptrdiff_t>(b) * Cout * T,
                                           Cout, T);
            const S* in_b = input->values.data() + static_cast<std::ptrdiff_t>(b) * Cin * D * H * W;
            if (bias->requires_grad) {
                // Sequential accumulation: vectorized horizontal sums split by
                // the runtime alignment of the grad buffer, which would make
                // the low bits depend on the heap layout.
                S* db = bias->grad.data();
                for (Eigen::Index c = 0; c < dO.rows(); ++c) {
                    S acc = S(0);
                    for (Eigen::Index t = 0; t < dO.cols(); ++t) acc += dO(c, t);
                    db[c] += acc;
                }
            }
            if (weight->requires_grad) {
                Eigen::Map<RowMat<S>> dWm(weight->grad.data(), Cout, ck);
                if (plain) {
                    Eigen::Map<const RowMat<S>> X(in_b, Cin, T);
                    dWm.noalias() += dO * X.transpose();
                } else {
                    detail::im2col(in_b, Cin, D, H, W, k, pad, stride, Do, Ho, Wo, col);
                    dWm.noalias() += dO * col.transpose();
                }
            }
            if (input->requires_grad) {
                S* din_b = input->grad.data() + static_cast<std::ptrdiff_t>(b) * Cin * D * H * W;
                if (plain) {
                    Eigen::Map<RowMat<S>> dX(din_b, Cin, T);
                    dX.noalias() += Wm.transpose() * dO;
                } else {
                    RowMat<S> G(ck, T);
                    G.noalias() = Wm.transpose() * dO;
                    detail::col2im_add(G, din_b, Cin, D, H, W, k, pad, stride, Do, Ho, Wo);
                }
            }
        }
    };
    return out;
}

// Each voxel replicated 2x2x2; the gradient sums over the eight replicas.
template <typename S>
TensorNode<S>* upsample_nearest2x(Graph<S>& g, TensorNode<S>* input) {
    detail::check5d(input->shape, "upsample_nearest2x");
    const int B = input->dim(0), C = input->dim(1);
    const int D = input->dim(2), H = input->dim(3), W = input->dim(4);
    TensorNode<S>* out = g.tensor({B, C, 2 * D, 2 * H, 2 * W}, input->requires_grad);
    const auto src_index = [=](int bc, int d, int h, int w) {
        return ((static_cast<std::ptrdiff_t>(bc) * D + d) * H + h) * W + w;
    };
    S* dst = out->values.data();
    std::ptrdiff_t t = 0;
    for (int bc = 0; bc < B * C; ++bc)
        for (int d = 0; d < 2 * D; ++d)
            for (int h = 0; h < 2 * H; ++h)
                for (int w = 0; w < 2 * W; ++w)
                    dst[t++] = input->values[static_cast<std::size_t>(src_index(bc, d / 2, h / 2, w / 2))];

    out->parents = {input};
    out->backward_fn = [input, B, C, D, H, W, src_index](TensorNode<S>& o) {
        if (!input->requires_grad) return;
        input->ensure_grad();
        const S* gsrc = o.grad.data();
        std::ptrdiff_t t = 0;
        for (int bc = 0; bc < B * C; ++bc)
            for (int d = 0; d < 2 * D; ++d)
                for (int h = 0; h < 2 * H; ++h)
                    for (int w = 0; w < 2 * W; ++w)
                        input->grad[static_cast<std::size_t>(src_index(bc, d / 2, h / 2, w / 2))] +=
                            gsrc[t++];
    };
    return out;
}

// Per-(sample, group) standardization over (C/groups)*D*H*W elements, then a
// per-channel affine. Biased variance, two-pass for stability.
template <typename S>
TensorNode<S>* group_norm(Graph<S>& g, TensorNode<S>* input, int groups, S eps,
                          TensorNode<S>* gain, TensorNode<S>* bias) {
    detail::check5d(input->shape, "group_norm");
    const int B = input->dim(0), C = input->dim(1);
    const int spatial = input->dim(2) * input->dim(3) * input->dim(4);
    require(groups >= 1 && C % groups == 0, ErrorKind::data,
            "group_norm channel count must be divisible by the group count");
    require(gain != nullptr && gain->size() == C && bias != nullptr && bias->size() == C,
            ErrorKind::data, "group_norm gain/bias must have one entry per channel");
    require(eps > S(0), ErrorKind::data, "group_norm eps must be positive");
    const int cpg = C / groups;
    const std::ptrdiff_t block = static_cast<std::ptrdiff_t>(cpg) * spatial;

    TensorNode<S>* out = g.tensor(input->shape, input->requires_grad || gain->requires_grad ||
                                                    bias->requires_grad);
    // Saved statistics per (sample, group) for the backward pass.
    auto mean = std::make_shared<std::vector<S>>(static_cast<std::size_t>(B) * groups);
    auto inv_std = std::make_shared<std::vector<S>>(static_cast<std::size_t>(B) * groups);
    for (int b = 0; b < B; ++b) {
        for (int gi = 0; gi < groups; ++gi) {
            const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(b) * C + gi * cpg) * spatial;
            const S* x = input->values.data() + base;
            S sum = S(0);
            for (std::ptrdiff_t i = 0; i < block; ++i) sum += x[i];
            const S mu = sum / static_cast<S>(block);
            S ss = S(0);
            for (std::ptrdiff_t i = 0; i < block; ++i) {
                const S d = x[i] - mu;
                ss += d * d;
            }
            const S istd = S(1) / std::sqrt(ss / static_cast<S>(block) + eps);
            (*mean)[static_cast<std::size_t>(b) * groups + gi] = mu;
            (*inv_std)[static_cast<std::size_t>(b) * groups + gi] = istd;
            S* y = out->values.data() + base;
            for (int cc = 0; cc < cpg; ++cc) {
                const S ga = gain->values[static_cast<std::size_t>(gi * cpg + cc)];
                const S be = bias->values[static_cast<std::size_t>(gi * cpg + cc)];
                const S* xc = x + static_cast<std::ptrdiff_t>(cc) * spatial;
                S* yc = y + static_cast<std::ptrdiff_t>(cc) * spatial;
                for (int i = 0; i < spatial; ++i) yc[i] = ga * (xc[i] - mu) * istd + be;
            }
        }
    }

    out->parents = {input, gain, bias};
    out->backward_fn = [input, gain, bias, B, C, spatial, groups, cpg, block, mean,
                        inv_std](TensorNode<S>& o) {
        if (input->requires_grad) input->ensure_grad();
        if (gain->requires_grad) gain->ensure_grad();
        if (bias->requires_grad) bias->ensure_grad();
        for (int b = 0; b < B; ++b) {
            for (int gi = 0; gi < groups; ++gi) {
                const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(b) * C + gi * cpg) * spatial;
                const S* x = input->values.data() + base;
                const S* dy = o.grad.data() + base;
                const S mu = (*mean)[static_cast<std::size_t>(b) * groups + gi];
                const S istd = (*inv_std)[static_cast<std::size_t>(b) * groups + gi];
                // dxhat = gain_c * dy; s1 = sum(dxhat); s2 = sum(dxhat * xhat)
                S s1 = S(0), s2 = S(0);
                for (int cc = 0; cc < cpg; ++cc) {
                    const S ga = gain->values[static_cast<std::size_t>(gi * cpg + cc)];
                    const S* xc = x + static_cast<std::ptrdiff_t>(cc) * spatial;
                    const S* dyc = dy + static_cast<std::ptrdiff_t>(cc) * spatial;
                    S dg = S(0), db = S(0);
                    for (int i = 0; i < spatial; ++i) {
                        const S xhat = (xc[i] - mu) * istd;
                        const S dxh = ga * dyc[i];
                        s1 += dxh;
                        s2 += dxh * xhat;
                        dg += dyc[i] * xhat;
                        db += dyc[i];
                    }
                    if (gain->requires_grad) gain->grad[static_cast<std::size_t>(gi * cpg + cc)] += dg;
                    if (bias->requires_grad) bias->grad[static_cast<std::size_t>(gi * cpg + cc)] += db;
                }
                if (!input->requires_grad) continue;
                const S inv_m = S(1) / static_cast<S>(block);
                S* dx = input->grad.data() + base;
                for (int cc = 0; cc < cpg; ++cc) {
                    const S ga = gain->values[static_cast<std::size_t>(gi * cpg + cc)];
                    const S* xc = x + static_cast<std::ptrdiff_t>(cc) * spatial;
                    const S* dyc = dy + static_cast<std::ptrdiff_t>(cc) * spatial;
                    S* dxc = dx + static_cast<std::ptrdiff_t>(cc) * spatial;
                    for (int i = 0; i < spatial; ++i) {
                        const S xhat = (xc[i] - mu) * istd;
                        const S dxh = ga * dyc[i];
                        dxc[i] += istd * (dxh - s1 * inv_m - xhat * s2 * inv_m);
                    }
                }
            }
        }
    };
    return out;
}

// x * sigmoid(x), elementwise on any shape.
template <typename S>
TensorNode<S>* silu(Graph<S>& g, TensorNode<S>* input) {
    TensorNode<S>* out = g.tensor(input->shape, input->requires_grad);
    for (std::size_t i = 0; i < input->values.size(); ++i) {
        const S x = input->values[i];
        out->values[i] = x * detail::sigmoid(x);
    }
    out->parents = {input};
    out->backward_fn = [input](TensorNode<S>& o) {
        if (!input->requires_grad) return;
        input->ensure_grad();
        for (std::size_t i = 0; i < input->values.size(); ++i) {
            const S x = input->values[i];
            const S s = detail::sigmoid(x);
            input->grad[i] += o.grad[i] * s * (S(1) + x * (S(1) - s));
        }
    };
    return out;
}

// max(x, 0) elementwise; subgradient 0 at x = 0.
template <typename S>
TensorNode<S>* relu(Graph<S>& g, TensorNode<S>* input) {
    TensorNode<S>* out = g.tensor(input->shape, input->requires_grad);
    for (std::size_t i = 0; i < input->values.size(); ++i)
        out->values[i] = input->values[i] > S(0) ? input->values[i] : S(0);
    out->parents = {input};
    out->backward_fn = [input](TensorNode<S>& o) {
        if (!input->requires_grad) return;
        input->ensure_grad();
        for (std::size_t i = 0; i < input->values.size(); ++i)
            if (input->values[i] > S(0)) input->grad[i] += o.grad[i];
    };
    return out;
}

template <typename S>
TensorNode<S>* add(Graph<S>& g, TensorNode<S>* a, TensorNode<S>* b) {
    require(detail::same_shape(a, b), ErrorKind::data, "add expects matching shapes");
    TensorNode<S>* out = g.tensor(a->shape, a->requires_grad || b->requires_grad);
    for (std::size_t i = 0; i < a->values.size(); ++i)
        out->values[i] = a->values[i] + b->values[i];
    out->parents = {a, b};
    out->backward_fn = [a, b](TensorNode<S>& o) {
        for (TensorNode<S>* p : {a, b}) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += o.grad[i];
        }
    };
    return out;
}

// [B, C1, D, H, W] ++ [B, C2, D, H, W] -> [B, C1+C2, D, H, W].
template <typename S>
TensorNode<S>* concat_channels(Graph<S>& g, TensorNode<S>* a, TensorNode<S>* b) {
    detail::check5d(a->shape, "concat_channels");
    detail::check5d(b->shape, "concat_channels");
    require(a->dim(0) == b->dim(0) && a->dim(2) == b->dim(2) && a->dim(3) == b->dim(3) &&
                a->dim(4) == b->dim(4),
            ErrorKind::data, "concat_channels expects matching batch and spatial dims");
    const int B = a->dim(0), Ca = a->dim(1), Cb = b->dim(1);
    const int spatial = a->dim(2) * a->dim(3) * a->dim(4);
    TensorNode<S>* out =
        g.tensor({B, Ca + Cb, a->dim(2), a->dim(3), a->dim(4)}, a->requires_grad || b->requires_grad);
    const std::ptrdiff_t sa = static_cast<std::ptrdiff_t>(Ca) * spatial;
    const std::ptrdiff_t sb = static_cast<std::ptrdiff_t>(Cb) * spatial;
    for (int bb = 0; bb < B; ++bb) {
        std::copy_n(a->values.data() + bb * sa, sa, out->values.data() + bb * (sa + sb));
        std::copy_n(b->values.data() + bb * sb, sb, out->values.data() + bb * (sa + sb) + sa);
    }
    out->parents = {a, b};
    out->backward_fn = [a, b, B, sa, sb](TensorNode<S>& o) {
        for (int bb = 0; bb < B; ++bb) {
            const S* go = o.grad.data() + bb * (sa + sb);
            if (a->requires_grad) {
                a->ensure_grad();
                S* ga = a->grad.data() + bb * sa;
                for (std::ptrdiff_t i = 0; i < sa; ++i) ga[i] += go[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                S* gb = b->grad.data() + bb * sb;
                for (std::ptrdiff_t i = 0; i < sb; ++i) gb[i] += go[sa + i];
            }
        }
    };
    return out;
}

// x [B, Fin] with weight [Fout, Fin], bias [Fout] -> [B, Fout].
template <typename S>
TensorNode<S>* linear(Graph<S>& g, TensorNode<S>* x, TensorNode<S>* weight, TensorNode<S>* bias) {
    require(x->shape.size() == 2 && weight->shape.size() == 2, ErrorKind::data,
            "linear expects 2-d input and weight");
    const int B = x->dim(0), Fin = x->dim(1), Fout = weight->dim(0);
    require(weight->dim(1) == Fin, ErrorKind::data, "linear weight width must match input features");
    require(bias != nullptr && bias->size() == Fout, ErrorKind::data,
            "linear bias must have one entry per output feature");
    TensorNode<S>* out =
        g.tensor({B, Fout}, x->requires_grad || weight->requires_grad || bias->requires_grad);
    Eigen::Map<const RowMat<S>> X(x->values.data(), B, Fin);
    Eigen::Map<const RowMat<S>> Wm(weight->values.data(), Fout, Fin);
    Eigen::Map<const VecX<S>> bv(bias->values.data(), Fout);
    Eigen::Map<RowMat<S>> O(out->values.data(), B, Fout);
    O.noalias() = X * Wm.transpose();
    O.rowwise() += bv.transpose();

    out->parents = {x, weight, bias};
    out->backward_fn = [x, weight, bias, B, Fin, Fout](TensorNode<S>& o) {
        Eigen::Map<const RowMat<S>> dO(o.grad.data(), B, Fout);
        Eigen::Map<const RowMat<S>> X(x->values.data(), B, Fin);
        Eigen::Map<const RowMat<S>> Wm(weight->values.data(), Fout, Fin);
        if (bias->requires_grad) {
            bias->ensure_grad();
            Eigen::Map<VecX<S>> db(bias->grad.data(), Fout);
            db.noalias() += dO.colwise().sum().transpose();
        }
        if (weight->requires_grad) {
            weight->ensure_grad();
            Eigen::Map<RowMat<S>> dW(weight->grad.data(), Fout, Fin);
            dW.noalias() += dO.transpose() * X;
        }
        if (x->requires_grad) {
            x->ensure_grad();
            Eigen::Map<RowMat<S>> dX(x->grad.data(), B, Fin);
            dX.noalias() += dO * Wm;
        }
    };
    return out;
}

// Same data, new shape (sizes must match); gradient passes through.
template <typename S>
TensorNode<S>* reshape(Graph<S>& g, TensorNode<S>* x, std::vector<int> shape) {
    require(numel(shape) == x->size(), ErrorKind::data, "reshape must preserve the element count");
    TensorNode<S>* out = g.tensor(std::move(shape), x->requires_grad);
    out->values = x->values;
    out->parents = {x};
    out->backward_fn = [x](TensorNode<S>& o) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += o.grad[i];
    };
    return out;
}

// Gathers per-voxel channel vectors from a volume: x [B, C, D, H, W] and
// flat spatial sites (index (d*H + h)*W + w, one per voxel) -> [B, N, C].
// With C = 3 the output layout matches the voxel-major source-field vector.
template <typename S>
TensorNode<S>* gather_sites(Graph<S>& g, TensorNode<S>* x, const std::vector<int>& sites) {
    detail::check5d(x->shape, "gather_sites");
    const int B = x->dim(0), C = x->dim(1);
    const int spatial = x->dim(2) * x->dim(3) * x->dim(4);
    const int N = static_cast<int>(sites.size());
    require(N > 0, ErrorKind::data, "gather_sites needs at least one site");
    for (int s : sites)
        require(s >= 0 && s < spatial, ErrorKind::data, "gather site outside the volume");
    auto idx = std::make_shared<std::vector<int>>(sites);
    TensorNode<S>* out = g.tensor({B, N, C}, x->requires_grad);
    for (int b = 0; b < B; ++b) {
        const S* xb = x->values.data() + static_cast<std::ptrdiff_t>(b) * C * spatial;
        S* ob = out->values.data() + static_cast<std::ptrdiff_t>(b) * N * C;
        for (int i = 0; i < N; ++i)
            for (int c = 0; c < C; ++c)
                ob[static_cast<std::ptrdiff_t>(i) * C + c] =
                    xb[static_cast<std::ptrdiff_t>(c) * spatial + (*idx)[static_cast<std::size_t>(i)]];
    }
    out->parents = {x};
    out->backward_fn = [x, idx, B, C, spatial, N](TensorNode<S>& o) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int b = 0; b < B; ++b) {
            S* gxb = x->grad.data() + static_cast<std::ptrdiff_t>(b) * C * spatial;
            const S* gob = o.grad.data() + static_cast<std::ptrdiff_t>(b) * N * C;
            for (int i = 0; i < N; ++i)
                for (int c = 0; c < C; ++c)
                    gxb[static_cast<std::ptrdiff_t>(c) * spatial + (*idx)[static_cast<std::size_t>(i)]] +=
                        gob[static_cast<std::ptrdiff_t>(i) * C + c];
        }
    };
    return out;
}

// Single-head spatial self-attention over the voxel tokens of one volume,
// with a residual connection around the whole block. The four projections
// are 1x1x1 convolutions (weights of C*C elements plus a C bias each) and
// the key dimension is the channel count at the block.
template <typename S>
struct AttentionParams {
    TensorNode<S>* wq = nullptr;
    TensorNode<S>* bq = nullptr;
    TensorNode<S>* wk = nullptr;
    TensorNode<S>* bk = nullptr;
    TensorNode<S>* wv = nullptr;
    TensorNode<S>* bv = nullptr;
    TensorNode<S>* wo = nullptr;
    TensorNode<S>* bo = nullptr;
};

template <typename S>
TensorNode<S>* attention(Graph<S>& g, TensorNode<S>* input, const AttentionParams<S>& p) {
    detail::check5d(input->shape, "attention");
    const int B = input->dim(0), C = input->dim(1);
    const int T = input->dim(2) * input->dim(3) * input->dim(4);
    bool any_param_grad = false;
    for (TensorNode<S>* w : {p.wq, p.wk, p.wv, p.wo}) {
        require(w != nullptr && w->size() == static_cast<std::int64_t>(C) * C, ErrorKind::data,
                "attention projection weight must have C*C elements");
        any_param_grad = any_param_grad || w->requires_grad;
    }
    for (TensorNode<S>* b : {p.bq, p.bk, p.bv, p.bo}) {
        require(b != nullptr && b->size() == C, ErrorKind::data,
                "attention projection bias must have C elements");
        any_param_grad = any_param_grad || b->requires_grad;
    }
    TensorNode<S>* out = g.tensor(input->shape, input->requires_grad || any_param_grad);
    const S scale = S(1) / static_cast<S>(std::sqrt(static_cast<double>(C)));

    // Per-sample activations saved for the backward pass.
    struct Saved {
        MatX<S> q, k, v, a, z;  // q/k/v/z are C x T, a is T x T (softmax rows)
    };
    auto saved = std::make_shared<std::vector<Saved>>(static_cast<std::size_t>(B));

    for (int b = 0; b < B; ++b) {
        Eigen::Map<const RowMat<S>> X(input->values.data() + static_cast<std::ptrdiff_t>(b) * C * T,
                                      C, T);
        Saved& sv = (*saved)[static_cast<std::size_t>(b)];
        const auto project = [&](TensorNode<S>* w, TensorNode<S>* bias_n) {
            Eigen::Map<const RowMat<S>> Wm(w->values.data(), C, C);
            Eigen::Map<const VecX<S>> bv(bias_n->values.data(), C);
            MatX<S> r(C, T);
            r.noalias() = Wm * X;
            r.colwise() += bv;
            return r;
        };
        sv.q = project(p.wq, p.bq);
        sv.k = project(p.wk, p.bk);
        sv.v = project(p.wv, p.bv);
        // Row-wise softmax of (Q^T K) * scale with max subtraction.
        MatX<S> s(T, T);
        s.noalias() = sv.q.transpose() * sv.k;
        s *= scale;
        sv.a.resize(T, T);
        for (int t = 0; t < T; ++t) {
            const S mx = s.row(t).maxCoeff();
            S denom = S(0);
            for (int u = 0; u < T; ++u) {
                const S e = std::exp(s(t, u) - mx);
                sv.a(t, u) = e;
                denom += e;
            }
            sv.a.row(t) /= denom;
        }
        sv.z.resize(C, T);
        sv.z.noalias() = sv.v * sv.a.transpose();
        Eigen::Map<const RowMat<S>> Wo(p.wo->values.data(), C, C);
        Eigen::Map<const VecX<S>> bo(p.bo->values.data(), C);
        Eigen::Map<RowMat<S>> O(out->values.data() + static_cast<std::ptrdiff_t>(b) * C * T, C, T);
        O.noalias() = Wo * sv.z;
        O.colwise() += bo;
        O += X;
    }

    out->parents = {input, p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo};
    out->backward_fn = [input, p, B, C, T, scale, saved](TensorNode<S>& o) {
        for (TensorNode<S>* n : {input, p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo})
            if (n->requires_grad) n->ensure_grad();
        for (int b = 0; b < B; ++b) {
            const Saved& sv = (*saved)[static_cast<std::size_t>(b)];
            Eigen::Map<const RowMat<S>> X(
                input->values.data() + static_cast<std::ptrdiff_t>(b) * C * T, C, T);
            Eigen::Map<const RowMat<S>> dOut(o.grad.data() + static_cast<std::ptrdiff_t>(b) * C * T,
                                             C, T);
            // Residual path.
            if (input->requires_grad) {
                Eigen::Map<RowMat<S>> dX(input->grad.data() + static_cast<std::ptrdiff_t>(b) * C * T,
                                         C, T);
                dX += dOut;
            }
            // Output projection: O = Wo * Z + bo.
            Eigen::Map<const RowMat<S>> Wo(p.wo->values.data(), C, C);
            if (p.wo->requires_grad) {
                Eigen::Map<RowMat<S>> dWo(p.wo->grad.data(), C, C);
                dWo.noalias() += dOut * sv.z.transpose();
            }
            if (p.bo->requires_grad) {
                // Sequential accumulation; see the conv3d bias gradient.
                S* dbo = p.bo->grad.data();
                for (Eigen::Index c = 0; c < dOut.rows(); ++c) {
                    S acc = S(0);
                    for (Eigen::Index t = 0; t < dOut.cols(); ++t) acc += dOut(c, t);
                    dbo[c] += acc;
                }
            }
            MatX<S> dZ(C, T);
            dZ.noalias() = Wo.transpose() * dOut;
            // Z = V A^T.
            MatX<S> dV(C, T);
            dV.noalias() = dZ * sv.a;
            MatX<S> dA(T, T);
            dA.noalias() = dZ.transpose() * sv.v;
            // Softmax rows: dS_tu = A_tu (dA_tu - sum_u' A_tu' dA_tu').
            MatX<S> dS(T, T);
            for (int t = 0; t < T; ++t) {
                const S dot = sv.a.row(t).dot(dA.row(t));
                for (int u = 0; u < T; ++u) dS(t, u) = sv.a(t, u) * (dA(t, u) - dot);
            }
            dS *= scale;
            // S = scale * Q^T K.
            MatX<S> dQ(C, T), dK(C, T);
            dQ.noalias() = sv.k * dS.transpose();
            dK.noalias() = sv.q * dS;
            // Input projections P = Wp X + bp for P in {Q, K, V}.
            const auto unproject = [&](const MatX<S>& dP, TensorNode<S>* w, TensorNode<S>* bias_n) {
                if (w->requires_grad) {
                    Eigen::Map<RowMat<S>> dW(w->grad.data(), C, C);
                    dW.noalias() += dP * X.transpose();
                }
                if (bias_n->requires_grad) {
                    // Sequential accumulation; see the conv3d bias gradient.
                    S* db = bias_n->grad.data();
                    for (Eigen::Index c = 0; c < dP.rows(); ++c) {
                        S acc = S(0);
                        for (Eigen::Index t = 0; t < dP.cols(); ++t) acc += dP(c, t);
                        db[c] += acc;
                    }
                }
                if (input->requires_grad) {
                    Eigen::Map<const RowMat<S>> Wm(w->values.data(), C, C);
                    Eigen::Map<RowMat<S>> dX(
                        input->grad.data() + static_cast<std::ptrdiff_t>(b) * C * T, C, T);
                    dX.noalias() += Wm.transpose() * dP;
                }
            };
            unproject(dQ, p.wq, p.bq);
            unproject(dK, p.wk, p.bk);
            unproject(dV, p.wv, p.bv);
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// Losses (scalar outputs; targets are plain data, not differentiated)
// ---------------------------------------------------------------------------

enum class LossKind { l1, l2, cosine, l1_plus_recon };

inline LossKind loss_kind_from_string(const std::string& s) {
    if (s == "l1") return LossKind::l1;
    if (s == "l2") return LossKind::l2;
    if (s == "cosine") return LossKind::cosine;
    if (s == "l1_plus_recon") return LossKind::l1_plus_recon;
    fail_usage("unknown loss kind: " + s + " (expected l1, l2, cosine, or l1_plus_recon)");
}

inline std::string to_string(LossKind k) {
    switch (k) {
        case LossKind::l1: return "l1";
        case LossKind::l2: return "l2";
        case LossKind::cosine: return "cosine";
        case LossKind::l1_plus_recon: return "l1_plus_recon";
    }
    return "?";
}

// Mean absolute error over all elements; subgradient 0 at exact ties.
template <typename S>
TensorNode<S>* loss_l1(Graph<S>& g, TensorNode<S>* pred, const std::vector<S>& target) {
    require(target.size() == pred->values.size(), ErrorKind::data,
            "l1 loss target size mismatch");
    TensorNode<S>* out = g.tensor({1}, pred->requires_grad);
    const S inv_n = S(1) / static_cast<S>(pred->values.size());
    S acc = S(0);
    for (std::size_t i = 0; i < target.size(); ++i)
        acc += std::abs(pred->values[i] - target[i]);
    out->values[0] = acc * inv_n;
    auto tgt = std::make_shared<std::vector<S>>(target);
    out->parents = {pred};
    out->backward_fn = [pred, tgt, inv_n](TensorNode<S>& o) {
        if (!pred->requires_grad) return;
        pred->ensure_grad();
        const S go = o.grad[0] * inv_n;
        for (std::size_t i = 0; i < tgt->size(); ++i) {
            const S d = pred->values[i] - (*tgt)[i];
            if (d > S(0))
                pred->grad[i] += go;
            else if (d < S(0))
                pred->grad[i] -= go;
        }
    };
    return out;
}

// Mean squared error over all elements.
template <typename S>
TensorNode<S>* loss_l2(Graph<S>& g, TensorNode<S>* pred, const std::vector<S>& target) {
    require(target.size() == pred->values.size(), ErrorKind::data,
            "l2 loss target size mismatch");
    TensorNode<S>* out = g.tensor({1}, pred->requires_grad);
    const S inv_n = S(1) / static_cast<S>(pred->values.size());
    S acc = S(0);
    for (std::size_t i = 0; i < target.size(); ++i) {
        const S d = pred->values[i] - target[i];
        acc += d * d;
    }
    out->values[0] = acc * inv_n;
    auto tgt = std::make_shared<std::vector<S>>(target);
    out->parents = {pred};
    out->backward_fn = [pred, tgt, inv_n](TensorNode<S>& o) {
        if (!pred->requires_grad) return;
        pred->ensure_grad();
        const S go = o.grad[0] * inv_n * S(2);
        for (std::size_t i = 0; i < tgt->size(); ++i)
            pred->grad[i] += go * (pred->values[i] - (*tgt)[i]);
    };
    return out;
}

// 1 - mean per-voxel cosine similarity, the mean taken over voxels where
// both the predicted and target moment vectors are nonzero. If no voxel
// qualifies the loss is 1 with zero gradient.
template <typename S>
TensorNode<S>* loss_cosine(Graph<S>& g, TensorNode<S>* pred, const std::vector<S>& target) {
    require(target.size() == pred->values.size(), ErrorKind::data,
            "cosine loss target size mismatch");
    require(!pred->shape.empty() && pred->shape.back() == 3, ErrorKind::data,
            "cosine loss expects per-voxel 3-vectors in the last dimension");
    const std::int64_t V = pred->size() / 3;
    TensorNode<S>* out = g.tensor({1}, pred->requires_grad);
    std::int64_t cnt = 0;
    S acc = S(0);
    for (std::int64_t i = 0; i < V; ++i) {
        const S* v = pred->values.data() + 3 * i;
        const S* t = target.data() + 3 * i;
        const S nv = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        const S nt = std::sqrt(t[0] * t[0] + t[1] * t[1] + t[2] * t[2]);
        if (nv > S(0) && nt > S(0)) {
            acc += (v[0] * t[0] + v[1] * t[1] + v[2] * t[2]) / (nv * nt);
            ++cnt;
        }
    }
    out->values[0] = S(1) - (cnt > 0 ? acc / static_cast<S>(cnt) : S(0));
    auto tgt = std::make_shared<std::vector<S>>(target);
    out->parents = {pred};
    out->backward_fn = [pred, tgt, V, cnt](TensorNode<S>& o) {
        if (!pred->requires_grad || cnt == 0) return;
        pred->ensure_grad();
        const S go = -o.grad[0] / static_cast<S>(cnt);
        for (std::int64_t i = 0; i < V; ++i) {
            const S* v = pred->values.data() + 3 * i;
            const S* t = tgt->data() + 3 * i;
            const S nv2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
            const S nt2 = t[0] * t[0] + t[1] * t[1] + t[2] * t[2];
            if (!(nv2 > S(0)) || !(nt2 > S(0))) continue;
            const S nv = std::sqrt(nv2), nt = std::sqrt(nt2);
            const S dot = v[0] * t[0] + v[1] * t[1] + v[2] * t[2];
            for (int kk = 0; kk < 3; ++kk)
                pred->grad[3 * i + kk] += go * (t[kk] / (nv * nt) - v[kk] * dot / (nv2 * nv * nt));
        }
    };
    return out;
}

// lambda * mean over samples of || gain * vec(pred_b) - y_b ||^2 where
// vec() is the voxel-major flattening of the per-sample [N, 3] field.
// pred is [B, N, 3] (or [N, 3] for a single sample); y holds B sensor rows.
template <typename S>
TensorNode<S>* loss_recon(Graph<S>& g, TensorNode<S>* pred, const MatX<S>& gain,
                          const std::vector<S>& y, S lambda) {
    const int B = pred->shape.size() == 3 ? pred->dim(0) : 1;
    const std::int64_t per = pred->size() / B;
    require(per == gain.cols(), ErrorKind::data,
            "reconstruction loss: gain columns must match the flattened field size");
    require(static_cast<std::int64_t>(y.size()) == static_cast<std::int64_t>(B) * gain.rows(),
            ErrorKind::data, "reconstruction loss: measurement size mismatch");
    require(lambda >= S(0), ErrorKind::data, "reconstruction weight must be nonnegative");
    const int M = static_cast<int>(gain.rows());
    TensorNode<S>* out = g.tensor({1}, pred->requires_grad);
    auto residuals = std::make_shared<MatX<S>>(M, B);
    S acc = S(0);
    for (int b = 0; b < B; ++b) {
        Eigen::Map<const VecX<S>> pb(pred->values.data() + static_cast<std::ptrdiff_t>(b) * per, per);
        Eigen::Map<const VecX<S>> yb(y.data() + static_cast<std::ptrdiff_t>(b) * M, M);
        residuals->col(b).noalias() = gain * pb;
        residuals->col(b) -= yb;
        acc += residuals->col(b).squaredNorm();
    }
    out->values[0] = lambda * acc / static_cast<S>(B);
    auto gain_copy = std::make_shared<MatX<S>>(gain);
    out->parents = {pred};
    out->backward_fn = [pred, gain_copy, residuals, lambda, B, per](TensorNode<S>& o) {
        if (!pred->requires_grad) return;
        pred->ensure_grad();
        const S go = o.grad[0] * lambda * S(2) / static_cast<S>(B);
        for (int b = 0; b < B; ++b) {
            Eigen::Map<VecX<S>> gp(pred->grad.data() + static_cast<std::ptrdiff_t>(b) * per, per);
            gp.noalias() += go * (gain_copy->transpose() * residuals->col(b));
        }
    };
    return out;
}

// Dispatcher used by the training loop. For l1_plus_recon, `gain` and `y`
// must be provided; they are ignored otherwise.
template <typename S>
TensorNode<S>* make_loss(Graph<S>& g, LossKind kind, TensorNode<S>* pred,
                         const std::vector<S>& target, const MatX<S>* gain = nullptr,
                         const std::vector<S>* y = nullptr, S lambda_rec = S(0.0001)) {
    switch (kind) {
        case LossKind::l1: return loss_l1(g, pred, target);
        case LossKind::l2: return loss_l2(g, pred, target);
        case LossKind::cosine: return loss_cosine(g, pred, target);
        case LossKind::l1_plus_recon: {
            require(gain != nullptr && y != nullptr, ErrorKind::data,
                    "l1_plus_recon needs the forward gain matrix and the measurements");
            TensorNode<S>* a = loss_l1(g, pred, target);
            TensorNode<S>* b = loss_recon(g, pred, *gain, *y, lambda_rec);
            return add(g, a, b);
        }
    }
    fail_data("unknown loss kind");
}

}  // namespace neuroloc::ad
