#pragma once

#include <memory>

#include "gmparse/autodiff.hpp"
#include "gmparse/spectral.hpp"

// Differentiable operations. Every op appends one node to the tape; the
// backward lambda pulls the node's grad into its parents via Tape::accum.
// Parent value buffers stay alive for the tape's lifetime, so lambdas capture
// raw Node pointers plus whatever forward-pass caches the gradient needs.

namespace gmparse::ad {

namespace detail {

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ===========================================================================
// Elementwise unary
// ===========================================================================

template <class T, class Fwd, class Bwd>
Var<T> unary_elementwise(const char* name, Var<T> x, Fwd fwd, Bwd dydx_from) {
    auto* xn = x.n;
    std::vector<T> out(xn->val.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xn->val[i]);
    return x.tape().make(name, xn->shape, std::move(out), xn->requires_grad, [xn, dydx_from](Node<T>& n) {
        auto& g = Tape<T>::grad_buf(xn);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * dydx_from(xn->val[i], n.val[i]);
    });
}

template <class T>
Var<T> relu(Var<T> x) {
    return unary_elementwise<T>(
        "relu", x, [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

template <class T>
Var<T> leaky_relu(Var<T> x, T alpha = T(0.2)) {
    return unary_elementwise<T>(
        "leaky_relu", x, [alpha](T v) { return v > 0 ? v : alpha * v; },
        [alpha](T v, T) { return v > 0 ? T(1) : alpha; });
}

template <class T>
Var<T> tanh_op(Var<T> x) {
    return unary_elementwise<T>(
        "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> sigmoid(Var<T> x) {
    return unary_elementwise<T>(
        "sigmoid", x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> square(Var<T> x) {
    return unary_elementwise<T>(
        "square", x, [](T v) { return v * v; }, [](T v, T) { return 2 * v; });
}

// y = a*x + b, elementwise with scalar coefficients.
template <class T>
Var<T> affine(Var<T> x, T a, T b) {
    return unary_elementwise<T>(
        "affine", x, [a, b](T v) { return a * v + b; }, [a](T, T) { return a; });
}

template <class T>
Var<T> scale(Var<T> x, T s) {
    return affine(x, s, T(0));
}
template <class T>
Var<T> neg(Var<T> x) {
    return affine(x, T(-1), T(0));
}

// log(max(x, floor)); zero gradient on the clamped branch. Keeps weighted
// cross-entropies finite when a composed probability underflows.
template <class T>
Var<T> log_clamped(Var<T> x, T floor = T(1e-12)) {
    return unary_elementwise<T>(
        "log_clamped", x, [floor](T v) { return std::log(std::max(v, floor)); },
        [floor](T v, T) { return v > floor ? T(1) / v : T(0); });
}

// log(max(sigmoid(x), floor)), numerically flattened: for x above the clamp
// threshold uses the stable -log1p(exp(-x)) form.
template <class T>
Var<T> log_sigmoid_clamped(Var<T> x, T floor = T(1e-12)) {
    const T xmin = std::log(floor / (T(1) - floor));  // sigmoid(xmin) == floor
    return unary_elementwise<T>(
        "log_sigmoid", x,
        [xmin, floor](T v) {
            if (v <= xmin) return std::log(floor);
            return v >= 0 ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v));
        },
        [xmin](T v, T) {
            if (v <= xmin) return T(0);
            return T(1) / (T(1) + std::exp(v));  // 1 - sigmoid(v)
        });
}

// ===========================================================================
// Elementwise binary (identical shapes)
// ===========================================================================

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::require_same_shape(a, b, "add");
    auto *an = a.n, *bn = b.n;
    std::vector<T> out(an->val.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->val[i] + bn->val[i];
    return a.tape().make("add", an->shape, std::move(out), an->requires_grad || bn->requires_grad,
                         [an, bn](Node<T>& n) {
                             Tape<T>::accum(an, n.grad);
                             Tape<T>::accum(bn, n.grad);
                         });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
    detail::require_same_shape(a, b, "sub");
    auto *an = a.n, *bn = b.n;
    std::vector<T> out(an->val.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->val[i] - bn->val[i];
    return a.tape().make("sub", an->shape, std::move(out), an->requires_grad || bn->requires_grad,
                         [an, bn](Node<T>& n) {
                             if (an->requires_grad) {
                                 auto& g = Tape<T>::grad_buf(an);
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                             }
                             if (bn->requires_grad) {
                                 auto& g = Tape<T>::grad_buf(bn);
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
                             }
                         });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::require_same_shape(a, b, "mul");
    auto *an = a.n, *bn = b.n;
    std::vector<T> out(an->val.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->val[i] * bn->val[i];
    return a.tape().make("mul", an->shape, std::move(out), an->requires_grad || bn->requires_grad,
                         [an, bn](Node<T>& n) {
                             if (an->requires_grad) {
                                 auto& g = Tape<T>::grad_buf(an);
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bn->val[i];
                             }
                             if (bn->requires_grad) {
                                 auto& g = Tape<T>::grad_buf(bn);
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * an->val[i];
                             }
                         });
}

// ===========================================================================
// Shape movement
// ===========================================================================

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
    detail::require(numel(shape) == x.n->size(),
                    "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    auto* xn = x.n;
    return x.tape().make("reshape", std::move(shape), xn->val, xn->requires_grad,
                         [xn](Node<T>& n) { Tape<T>::accum(xn, n.grad); });
}

// Swap the trailing two axes for every leading index.
template <class T>
Var<T> transpose_hw(Var<T> x) {
    const Shape& s = x.shape();
    detail::require(s.size() >= 2, "transpose_hw: need >= 2 dims, got " + shape_str(s));
    const int h = s[s.size() - 2], w = s[s.size() - 1];
    const std::size_t plane = std::size_t(h) * w, lead = x.n->size() / plane;
    Shape os = s;
    std::swap(os[os.size() - 2], os[os.size() - 1]);
    auto* xn = x.n;
    std::vector<T> out(xn->val.size());
    for (std::size_t l = 0; l < lead; ++l)
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) out[l * plane + std::size_t(c) * h + r] = xn->val[l * plane + std::size_t(r) * w + c];
    return x.tape().make("transpose_hw", std::move(os), std::move(out), xn->requires_grad,
                         [xn, h, w, plane, lead](Node<T>& n) {
                             auto& g = Tape<T>::grad_buf(xn);
                             for (std::size_t l = 0; l < lead; ++l)
                                 for (int r = 0; r < h; ++r)
                                     for (int c = 0; c < w; ++c)
                                         g[l * plane + std::size_t(r) * w + c] += n.grad[l * plane + std::size_t(c) * h + r];
                         });
}

// y[n, j] = x[n, idx[j]] for a 2-D x.
template <class T>
Var<T> gather_cols(Var<T> x, std::vector<int> idx) {
    const Shape& s = x.shape();
    detail::require(s.size() == 2, "gather_cols: need 2-D input, got " + shape_str(s));
    const int N = s[0], K = s[1], M = int(idx.size());
    for (int j : idx)
        if (j < 0 || j >= K) throw ValueError("gather_cols: index " + std::to_string(j) + " out of [0," + std::to_string(K) + ")");
    auto* xn = x.n;
    std::vector<T> out(std::size_t(N) * M);
    for (int n = 0; n < N; ++n)
        for (int j = 0; j < M; ++j) out[std::size_t(n) * M + j] = xn->val[std::size_t(n) * K + idx[std::size_t(j)]];
    auto ix = std::make_shared<std::vector<int>>(std::move(idx));
    return x.tape().make("gather_cols", Shape{N, M}, std::move(out), xn->requires_grad, [xn, ix, N, K, M](Node<T>& n) {
        auto& g = Tape<T>::grad_buf(xn);
        for (int r = 0; r < N; ++r)
            for (int j = 0; j < M; ++j) g[std::size_t(r) * K + (*ix)[std::size_t(j)]] += n.grad[std::size_t(r) * M + j];
    });
}

// ===========================================================================
// Reductions
// ===========================================================================

template <class T>
Var<T> sum_all(Var<T> x) {
    auto* xn = x.n;
    T s = 0;
    for (T v : xn->val) s += v;
    return x.tape().make("sum", Shape{1}, std::vector<T>{s}, xn->requires_grad, [xn](Node<T>& n) {
        auto& g = Tape<T>::grad_buf(xn);
        for (auto& v : g) v += n.grad[0];
    });
}

template <class T>
Var<T> mean_all(Var<T> x) {
    return scale(sum_all(x), T(1) / T(x.n->size()));
}

// Maximum element; ties resolve to the first flat index.
template <class T>
Var<T> max_all(Var<T> x) {
    auto* xn = x.n;
    std::size_t arg = 0;
    for (std::size_t i = 1; i < xn->val.size(); ++i)
        if (xn->val[i] > xn->val[arg]) arg = i;
    return x.tape().make("max", Shape{1}, std::vector<T>{xn->val[arg]}, xn->requires_grad, [xn, arg](Node<T>& n) {
        Tape<T>::grad_buf(xn)[arg] += n.grad[0];
    });
}

// ===========================================================================
// Dense / convolutional layers (NCHW layout)
// ===========================================================================

// x [N, Fin], w [Fout, Fin], b [Fout] -> [N, Fout]
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
    const Shape &xs = x.shape(), &ws = w.shape(), &bs = b.shape();
    detail::require(xs.size() == 2 && ws.size() == 2 && bs.size() == 1 && xs[1] == ws[1] && ws[0] == bs[0],
                    "linear: incompatible shapes x" + shape_str(xs) + " w" + shape_str(ws) + " b" + shape_str(bs));
    const int N = xs[0], Fin = xs[1], Fout = ws[0];
    auto *xn = x.n, *wn = w.n, *bn = b.n;
    std::vector<T> out(std::size_t(N) * Fout);
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < Fout; ++o) {
            T acc = bn->val[std::size_t(o)];
            const T* xr = xn->val.data() + std::size_t(n) * Fin;
            const T* wr = wn->val.data() + std::size_t(o) * Fin;
            for (int i = 0; i < Fin; ++i) acc += xr[i] * wr[i];
            out[std::size_t(n) * Fout + o] = acc;
        }
    bool rg = xn->requires_grad || wn->requires_grad || bn->requires_grad;
    return x.tape().make("linear", Shape{N, Fout}, std::move(out), rg, [xn, wn, bn, N, Fin, Fout](Node<T>& n) {
        if (xn->requires_grad) {
            auto& gx = Tape<T>::grad_buf(xn);
            for (int r = 0; r < N; ++r)
                for (int o = 0; o < Fout; ++o) {
                    const T g = n.grad[std::size_t(r) * Fout + o];
                    const T* wr = wn->val.data() + std::size_t(o) * Fin;
                    for (int i = 0; i < Fin; ++i) gx[std::size_t(r) * Fin + i] += g * wr[i];
                }
        }
        if (wn->requires_grad) {
            auto& gw = Tape<T>::grad_buf(wn);
            for (int r = 0; r < N; ++r)
                for (int o = 0; o < Fout; ++o) {
                    const T g = n.grad[std::size_t(r) * Fout + o];
                    const T* xr = xn->val.data() + std::size_t(r) * Fin;
                    for (int i = 0; i < Fin; ++i) gw[std::size_t(o) * Fin + i] += g * xr[i];
                }
        }
        if (bn->requires_grad) {
            auto& gb = Tape<T>::grad_buf(bn);
            for (int r = 0; r < N; ++r)
                for (int o = 0; o < Fout; ++o) gb[std::size_t(o)] += n.grad[std::size_t(r) * Fout + o];
        }
    });
}

// x [N, Ci, H, W], w [Co, Ci, kh, kw], b [Co]; zero padding.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride = 1, int pad = 0) {
    const Shape &xs = x.shape(), &ws = w.shape();
    detail::require(xs.size() == 4 && ws.size() == 4 && b.shape().size() == 1, "conv2d: need x[N,C,H,W], w[Co,Ci,kh,kw], b[Co]");
    const int N = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
    const int Co = ws[0], kh = ws[2], kw = ws[3];
    detail::require(ws[1] == Ci && b.shape()[0] == Co,
                    "conv2d: channel mismatch x" + shape_str(xs) + " w" + shape_str(ws));
    detail::require(stride >= 1 && pad >= 0, "conv2d: stride must be >= 1 and pad >= 0");
    const int Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
    detail::require(H + 2 * pad >= kh && W + 2 * pad >= kw, "conv2d: kernel larger than padded input");
    auto *xn = x.n, *wn = w.n, *bn = b.n;
    std::vector<T> out(std::size_t(N) * Co * Ho * Wo);
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    T acc = bn->val[std::size_t(co)];
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int i = 0; i < kh; ++i) {
                            const int ih = oh * stride - pad + i;
                            if (ih < 0 || ih >= H) continue;
                            const T* xr = xn->val.data() + ((std::size_t(n) * Ci + ci) * H + ih) * W;
                            const T* wr = wn->val.data() + ((std::size_t(co) * Ci + ci) * kh + i) * kw;
                            for (int j = 0; j < kw; ++j) {
                                const int iw = ow * stride - pad + j;
                                if (iw >= 0 && iw < W) acc += xr[iw] * wr[j];
                            }
                        }
                    out[((std::size_t(n) * Co + co) * Ho + oh) * Wo + ow] = acc;
                }
    bool rg = xn->requires_grad || wn->requires_grad || bn->requires_grad;
    return x.tape().make(
        "conv2d", Shape{N, Co, Ho, Wo}, std::move(out), rg,
        [xn, wn, bn, N, Ci, H, W, Co, kh, kw, Ho, Wo, stride, pad](Node<T>& n) {
            const bool gx = xn->requires_grad, gw = wn->requires_grad, gb = bn->requires_grad;
            auto* gxb = gx ? &Tape<T>::grad_buf(xn) : nullptr;
            auto* gwb = gw ? &Tape<T>::grad_buf(wn) : nullptr;
            auto* gbb = gb ? &Tape<T>::grad_buf(bn) : nullptr;
            for (int r = 0; r < N; ++r)
                for (int co = 0; co < Co; ++co)
                    for (int oh = 0; oh < Ho; ++oh)
                        for (int ow = 0; ow < Wo; ++ow) {
                            const T g = n.grad[((std::size_t(r) * Co + co) * Ho + oh) * Wo + ow];
                            if (g == T(0)) continue;
                            if (gbb) (*gbb)[std::size_t(co)] += g;
                            for (int ci = 0; ci < Ci; ++ci)
                                for (int i = 0; i < kh; ++i) {
                                    const int ih = oh * stride - pad + i;
                                    if (ih < 0 || ih >= H) continue;
                                    const std::size_t xoff = ((std::size_t(r) * Ci + ci) * H + ih) * W;
                                    const std::size_t woff = ((std::size_t(co) * Ci + ci) * kh + i) * kw;
                                    for (int j = 0; j < kw; ++j) {
                                        const int iw = ow * stride - pad + j;
                                        if (iw < 0 || iw >= W) continue;
                                        if (gxb) (*gxb)[xoff + iw] += g * wn->val[woff + j];
                                        if (gwb) (*gwb)[woff + j] += g * xn->val[xoff + iw];
                                    }
                                }
                        }
        });
}

// x [N, Ci, H, W], w [Ci, Co, kh, kw], b [Co]; output (H-1)*stride + kh - 2*pad.
template <class T>
Var<T> conv_transpose2d(Var<T> x, Var<T> w, Var<T> b, int stride = 1, int pad = 0) {
    const Shape &xs = x.shape(), &ws = w.shape();
    detail::require(xs.size() == 4 && ws.size() == 4 && b.shape().size() == 1,
                    "conv_transpose2d: need x[N,Ci,H,W], w[Ci,Co,kh,kw], b[Co]");
    const int N = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
    const int Co = ws[1], kh = ws[2], kw = ws[3];
    detail::require(ws[0] == Ci && b.shape()[0] == Co,
                    "conv_transpose2d: channel mismatch x" + shape_str(xs) + " w" + shape_str(ws));
    const int Ho = (H - 1) * stride + kh - 2 * pad, Wo = (W - 1) * stride + kw - 2 * pad;
    detail::require(Ho > 0 && Wo > 0, "conv_transpose2d: non-positive output size");
    auto *xn = x.n, *wn = w.n, *bn = b.n;
    std::vector<T> out(std::size_t(N) * Co * Ho * Wo);
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co) {
            T* op = out.data() + (std::size_t(n) * Co + co) * Ho * Wo;
            for (std::size_t i = 0; i < std::size_t(Ho) * Wo; ++i) op[i] = bn->val[std::size_t(co)];
        }
    for (int n = 0; n < N; ++n)
        for (int ci = 0; ci < Ci; ++ci)
            for (int h = 0; h < H; ++h)
                for (int wI = 0; wI < W; ++wI) {
                    const T xv = xn->val[((std::size_t(n) * Ci + ci) * H + h) * W + wI];
                    for (int co = 0; co < Co; ++co)
                        for (int i = 0; i < kh; ++i) {
                            const int oh = h * stride + i - pad;
                            if (oh < 0 || oh >= Ho) continue;
                            for (int j = 0; j < kw; ++j) {
                                const int ow = wI * stride + j - pad;
                                if (ow < 0 || ow >= Wo) continue;
                                out[((std::size_t(n) * Co + co) * Ho + oh) * Wo + ow] +=
                                    xv * wn->val[((std::size_t(ci) * Co + co) * kh + i) * kw + j];
                            }
                        }
                }
    bool rg = xn->requires_grad || wn->requires_grad || bn->requires_grad;
    return x.tape().make(
        "conv_transpose2d", Shape{N, Co, Ho, Wo}, std::move(out), rg,
        [xn, wn, bn, N, Ci, H, W, Co, kh, kw, Ho, Wo, stride, pad](Node<T>& n) {
            const bool gx = xn->requires_grad, gw = wn->requires_grad, gb = bn->requires_grad;
            auto* gxb = gx ? &Tape<T>::grad_buf(xn) : nullptr;
            auto* gwb = gw ? &Tape<T>::grad_buf(wn) : nullptr;
            auto* gbb = gb ? &Tape<T>::grad_buf(bn) : nullptr;
            if (gbb)
                for (int r = 0; r < N; ++r)
                    for (int co = 0; co < Co; ++co) {
                        const T* gp = n.grad.data() + (std::size_t(r) * Co + co) * Ho * Wo;
                        for (std::size_t i = 0; i < std::size_t(Ho) * Wo; ++i) (*gbb)[std::size_t(co)] += gp[i];
                    }
            for (int r = 0; r < N; ++r)
                for (int ci = 0; ci < Ci; ++ci)
                    for (int h = 0; h < H; ++h)
                        for (int wI = 0; wI < W; ++wI) {
                            const std::size_t xoff = ((std::size_t(r) * Ci + ci) * H + h) * W + wI;
                            T gacc = 0;
                            for (int co = 0; co < Co; ++co)
                                for (int i = 0; i < kh; ++i) {
                                    const int oh = h * stride + i - pad;
                                    if (oh < 0 || oh >= Ho) continue;
                                    for (int j = 0; j < kw; ++j) {
                                        const int ow = wI * stride + j - pad;
                                        if (ow < 0 || ow >= Wo) continue;
                                        const T g = n.grad[((std::size_t(r) * Co + co) * Ho + oh) * Wo + ow];
                                        const std::size_t woff = ((std::size_t(ci) * Co + co) * kh + i) * kw + j;
                                        if (gxb) gacc += g * wn->val[woff];
                                        if (gwb) (*gwb)[woff] += g * xn->val[xoff];
                                    }
                                }
                            if (gxb) (*gxb)[xoff] += gacc;
                        }
        });
}

// Nearest-neighbour upsampling by an integer factor.
template <class T>
Var<T> upsample_nearest2(Var<T> x, int factor = 2) {
    const Shape& s = x.shape();
    detail::require(s.size() == 4, "upsample_nearest2: need [N,C,H,W], got " + shape_str(s));
    detail::require(factor >= 1, "upsample_nearest2: factor must be >= 1");
    const int N = s[0], C = s[1], H = s[2], W = s[3], Ho = H * factor, Wo = W * factor;
    auto* xn = x.n;
    std::vector<T> out(std::size_t(N) * C * Ho * Wo);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow)
                    out[((std::size_t(n) * C + c) * Ho + oh) * Wo + ow] =
                        xn->val[((std::size_t(n) * C + c) * H + oh / factor) * W + ow / factor];
    return x.tape().make("upsample_nearest", Shape{N, C, Ho, Wo}, std::move(out), xn->requires_grad,
                         [xn, N, C, H, W, Ho, Wo, factor](Node<T>& n) {
                             auto& g = Tape<T>::grad_buf(xn);
                             for (int r = 0; r < N; ++r)
                                 for (int c = 0; c < C; ++c)
                                     for (int oh = 0; oh < Ho; ++oh)
                                         for (int ow = 0; ow < Wo; ++ow)
                                             g[((std::size_t(r) * C + c) * H + oh / factor) * W + ow / factor] +=
                                                 n.grad[((std::size_t(r) * C + c) * Ho + oh) * Wo + ow];
                         });
}

template <class T>
Var<T> maxpool2d(Var<T> x, int k, int stride) {
    const Shape& s = x.shape();
    detail::require(s.size() == 4, "maxpool2d: need [N,C,H,W], got " + shape_str(s));
    const int N = s[0], C = s[1], H = s[2], W = s[3];
    detail::require(k >= 1 && stride >= 1 && k <= H && k <= W, "maxpool2d: bad kernel/stride for input");
    const int Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
    auto* xn = x.n;
    std::vector<T> out(std::size_t(N) * C * Ho * Wo);
    auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    std::size_t best = ((std::size_t(n) * C + c) * H + oh * stride) * W + ow * stride;
                    T bv = xn->val[best];
                    for (int i = 0; i < k; ++i)
                        for (int j = 0; j < k; ++j) {
                            const std::size_t idx = ((std::size_t(n) * C + c) * H + oh * stride + i) * W + ow * stride + j;
                            if (xn->val[idx] > bv) { bv = xn->val[idx]; best = idx; }
                        }
                    const std::size_t o = ((std::size_t(n) * C + c) * Ho + oh) * Wo + ow;
                    out[o] = bv;
                    (*arg)[o] = best;
                }
    return x.tape().make("maxpool2d", Shape{N, C, Ho, Wo}, std::move(out), xn->requires_grad, [xn, arg](Node<T>& n) {
        auto& g = Tape<T>::grad_buf(xn);
        for (std::size_t o = 0; o < n.grad.size(); ++o) g[(*arg)[o]] += n.grad[o];
    });
}

template <class T>
Var<T> avgpool2d(Var<T> x, int k, int stride) {
    const Shape& s = x.shape();
    detail::require(s.size() == 4, "avgpool2d: need [N,C,H,W], got " + shape_str(s));
    const int N = s[0], C = s[1], H = s[2], W = s[3];
    detail::require(k >= 1 && stride >= 1 && k <= H && k <= W, "avgpool2d: bad kernel/stride for input");
    const int Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
    const T inv = T(1) / T(k * k);
    auto* xn = x.n;
    std::vector<T> out(std::size_t(N) * C * Ho * Wo);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    T acc = 0;
                    for (int i = 0; i < k; ++i)
                        for (int j = 0; j < k; ++j)
                            acc += xn->val[((std::size_t(n) * C + c) * H + oh * stride + i) * W + ow * stride + j];
                    out[((std::size_t(n) * C + c) * Ho + oh) * Wo + ow] = acc * inv;
                }
    return x.tape().make("avgpool2d", Shape{N, C, Ho, Wo}, std::move(out), xn->requires_grad,
                         [xn, N, C, H, W, Ho, Wo, k, stride, inv](Node<T>& n) {
                             auto& g = Tape<T>::grad_buf(xn);
                             for (int r = 0; r < N; ++r)
                                 for (int c = 0; c < C; ++c)
                                     for (int oh = 0; oh < Ho; ++oh)
                                         for (int ow = 0; ow < Wo; ++ow) {
                                             const T gv = n.grad[((std::size_t(r) * C + c) * Ho + oh) * Wo + ow] * inv;
                                             for (int i = 0; i < k; ++i)
                                                 for (int j = 0; j < k; ++j)
                                                     g[((std::size_t(r) * C + c) * H + oh * stride + i) * W + ow * stride + j] += gv;
                                         }
                         });
}

// ===========================================================================
// Normalization layers
// ===========================================================================

namespace detail {

// Shared backward for (x - mu) * invs * gamma + beta normalizations.
// Each group of `m` elements was normalized with its own (mu, invs); gamma is
// indexed per element via cidx. u = upstream * gamma; then
//   dx = invs * (u - mean(u) - xhat * mean(u * xhat)).
struct NormGroup {
    std::size_t begin;  // first flat index (for contiguous groups) -- unused when custom iteration
};

}  // namespace detail

// Batch normalization over (N, H, W) per channel. In training mode uses batch
// statistics (biased variance) and, when running buffers are supplied, blends
// them as run = (1 - momentum) * run + momentum * batch. Eval mode normalizes
// with the running buffers.
template <class T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, TensorND<std::type_identity_t<T>>* run_mean,
                  TensorND<std::type_identity_t<T>>* run_var, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
    const Shape& s = x.shape();
    detail::require(s.size() == 4, "batch_norm: need [N,C,H,W], got " + shape_str(s));
    const int N = s[0], C = s[1], H = s[2], W = s[3];
    detail::require(gamma.shape() == Shape{C} && beta.shape() == Shape{C}, "batch_norm: gamma/beta must be [C]");
    if (!training) detail::require(run_mean && run_var, "batch_norm: eval mode needs running statistics");
    const std::size_t m = std::size_t(N) * H * W;
    auto *xn = x.n, *gn = gamma.n, *bn = beta.n;
    auto mu = std::make_shared<std::vector<T>>(C), invs = std::make_shared<std::vector<T>>(C);
    for (int c = 0; c < C; ++c) {
        T mean = 0, var = 0;
        if (training) {
            for (int n = 0; n < N; ++n)
                for (std::size_t i = 0; i < std::size_t(H) * W; ++i) mean += xn->val[((std::size_t(n) * C + c) * H) * W + i];
            mean /= T(m);
            for (int n = 0; n < N; ++n)
                for (std::size_t i = 0; i < std::size_t(H) * W; ++i) {
                    const T d = xn->val[((std::size_t(n) * C + c) * H) * W + i] - mean;
                    var += d * d;
                }
            var /= T(m);
            if (run_mean && run_var) {
                run_mean->data[std::size_t(c)] = (T(1) - momentum) * run_mean->data[std::size_t(c)] + momentum * mean;
                run_var->data[std::size_t(c)] = (T(1) - momentum) * run_var->data[std::size_t(c)] + momentum * var;
            }
        } else {
            mean = run_mean->data[std::size_t(c)];
            var = run_var->data[std::size_t(c)];
        }
        (*mu)[std::size_t(c)] = mean;
        (*invs)[std::size_t(c)] = T(1) / std::sqrt(var + eps);
    }
    std::vector<T> out(xn->val.size());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T mc = (*mu)[std::size_t(c)], ic = (*invs)[std::size_t(c)];
            const T gc = gn->val[std::size_t(c)], bc = bn->val[std::size_t(c)];
            const std::size_t off = (std::size_t(n) * C + c) * H * W;
            for (std::size_t i = 0; i < std::size_t(H) * W; ++i) out[off + i] = (xn->val[off + i] - mc) * ic * gc + bc;
        }
    bool rg = xn->requires_grad || gn->requires_grad || bn->requires_grad;
    return x.tape().make(
        "batch_norm", s, std::move(out), rg, [xn, gn, bn, mu, invs, N, C, H, W, m, training](Node<T>& n) {
            const std::size_t hw = std::size_t(H) * W;
            for (int c = 0; c < C; ++c) {
                const T mc = (*mu)[std::size_t(c)], ic = (*invs)[std::size_t(c)], gc = gn->val[std::size_t(c)];
                T sum_u = 0, sum_uxh = 0, sum_g = 0, sum_gxh = 0;
                for (int r = 0; r < N; ++r) {
                    const std::size_t off = (std::size_t(r) * C + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        const T g = n.grad[off + i];
                        const T xh = (xn->val[off + i] - mc) * ic;
                        sum_g += g;
                        sum_gxh += g * xh;
                        sum_u += g * gc;
                        sum_uxh += g * gc * xh;
                    }
                }
                if (gn->requires_grad) Tape<T>::grad_buf(gn)[std::size_t(c)] += sum_gxh;
                if (bn->requires_grad) Tape<T>::grad_buf(bn)[std::size_t(c)] += sum_g;
                if (xn->requires_grad) {
                    auto& gx = Tape<T>::grad_buf(xn);
                    const T mu_u = sum_u / T(m), mu_uxh = sum_uxh / T(m);
                    for (int r = 0; r < N; ++r) {
                        const std::size_t off = (std::size_t(r) * C + c) * hw;
                        for (std::size_t i = 0; i < hw; ++i) {
                            const T u = n.grad[off + i] * gc;
                            if (training) {
                                const T xh = (xn->val[off + i] - mc) * ic;
                                gx[off + i] += ic * (u - mu_u - xh * mu_uxh);
                            } else {
                                gx[off + i] += ic * u;  // running stats are constants
                            }
                        }
                    }
                }
            }
        });
}

// Instance normalization: statistics over (H, W) per (n, c); per-channel affine.
template <class T>
Var<T> instance_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
    const Shape& s = x.shape();
    detail::require(s.size() == 4, "instance_norm: need [N,C,H,W], got " + shape_str(s));
    const int N = s[0], C = s[1], H = s[2], W = s[3];
    detail::require(gamma.shape() == Shape{C} && beta.shape() == Shape{C}, "instance_norm: gamma/beta must be [C]");
    const std::size_t hw = std::size_t(H) * W;
    detail::require(hw >= 2, "instance_norm: needs H*W >= 2");
    auto *xn = x.n, *gn = gamma.n, *bn = beta.n;
    auto mu = std::make_shared<std::vector<T>>(std::size_t(N) * C), invs = std::make_shared<std::vector<T>>(std::size_t(N) * C);
    std::vector<T> out(xn->val.size());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const std::size_t off = (std::size_t(n) * C + c) * hw;
            T mean = 0, var = 0;
            for (std::size_t i = 0; i < hw; ++i) mean += xn->val[off + i];
            mean /= T(hw);
            for (std::size_t i = 0; i < hw; ++i) {
                const T d = xn->val[off + i] - mean;
                var += d * d;
            }
            var /= T(hw);
            const T ic = T(1) / std::sqrt(var + eps);
            (*mu)[std::size_t(n) * C + c] = mean;
            (*invs)[std::size_t(n) * C + c] = ic;
            const T gc = gn->val[std::size_t(c)], bc = bn->val[std::size_t(c)];
            for (std::size_t i = 0; i < hw; ++i) out[off + i] = (xn->val[off + i] - mean) * ic * gc + bc;
        }
    bool rg = xn->requires_grad || gn->requires_grad || bn->requires_grad;
    return x.tape().make("instance_norm", s, std::move(out), rg, [xn, gn, bn, mu, invs, N, C, hw](Node<T>& n) {
        for (int r = 0; r < N; ++r)
            for (int c = 0; c < C; ++c) {
                const std::size_t off = (std::size_t(r) * C + c) * hw;
                const T mc = (*mu)[std::size_t(r) * C + c], ic = (*invs)[std::size_t(r) * C + c];
                const T gc = gn->val[std::size_t(c)];
                T sum_u = 0, sum_uxh = 0, sum_g = 0, sum_gxh = 0;
                for (std::size_t i = 0; i < hw; ++i) {
                    const T g = n.grad[off + i];
                    const T xh = (xn->val[off + i] - mc) * ic;
                    sum_g += g;
                    sum_gxh += g * xh;
                    sum_u += g * gc;
                    sum_uxh += g * gc * xh;
                }
                if (gn->requires_grad) Tape<T>::grad_buf(gn)[std::size_t(c)] += sum_gxh;
                if (bn->requires_grad) Tape<T>::grad_buf(bn)[std::size_t(c)] += sum_g;
                if (xn->requires_grad) {
                    auto& gx = Tape<T>::grad_buf(xn);
                    const T mu_u = sum_u / T(hw), mu_uxh = sum_uxh / T(hw);
                    for (std::size_t i = 0; i < hw; ++i) {
                        const T u = n.grad[off + i] * gc;
                        const T xh = (xn->val[off + i] - mc) * ic;
                        gx[off + i] += ic * (u - mu_u - xh * mu_uxh);
                    }
                }
            }
    });
}

// Layer normalization: statistics over (C, H, W) per sample; per-channel affine.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
    const Shape& s = x.shape();
    detail::require(s.size() == 4, "layer_norm: need [N,C,H,W], got " + shape_str(s));
    const int N = s[0], C = s[1], H = s[2], W = s[3];
    detail::require(gamma.shape() == Shape{C} && beta.shape() == Shape{C}, "layer_norm: gamma/beta must be [C]");
    const std::size_t m = std::size_t(C) * H * W, hw = std::size_t(H) * W;
    auto *xn = x.n, *gn = gamma.n, *bn = beta.n;
    auto mu = std::make_shared<std::vector<T>>(N), invs = std::make_shared<std::vector<T>>(N);
    std::vector<T> out(xn->val.size());
    for (int n = 0; n < N; ++n) {
        const std::size_t off = std::size_t(n) * m;
        T mean = 0, var = 0;
        for (std::size_t i = 0; i < m; ++i) mean += xn->val[off + i];
        mean /= T(m);
        for (std::size_t i = 0; i < m; ++i) {
            const T d = xn->val[off + i] - mean;
            var += d * d;
        }
        var /= T(m);
        const T ic = T(1) / std::sqrt(var + eps);
        (*mu)[std::size_t(n)] = mean;
        (*invs)[std::size_t(n)] = ic;
        for (int c = 0; c < C; ++c) {
            const T gc = gn->val[std::size_t(c)], bc = bn->val[std::size_t(c)];
            for (std::size_t i = 0; i < hw; ++i)
                out[off + std::size_t(c) * hw + i] = (xn->val[off + std::size_t(c) * hw + i] - mean) * ic * gc + bc;
        }
    }
    bool rg = xn->requires_grad || gn->requires_grad || bn->requires_grad;
    return x.tape().make("layer_norm", s, std::move(out), rg, [xn, gn, bn, mu, invs, N, C, m, hw](Node<T>& n) {
        for (int r = 0; r < N; ++r) {
            const std::size_t off = std::size_t(r) * m;
            const T mc = (*mu)[std::size_t(r)], ic = (*invs)[std::size_t(r)];
            T sum_u = 0, sum_uxh = 0;
            for (int c = 0; c < C; ++c) {
                const T gc = gn->val[std::size_t(c)];
                T sum_g = 0, sum_gxh = 0;
                for (std::size_t i = 0; i < hw; ++i) {
                    const T g = n.grad[off + std::size_t(c) * hw + i];
                    const T xh = (xn->val[off + std::size_t(c) * hw + i] - mc) * ic;
                    sum_g += g;
                    sum_gxh += g * xh;
                    sum_u += g * gc;
                    sum_uxh += g * gc * xh;
                }
                if (gn->requires_grad) Tape<T>::grad_buf(gn)[std::size_t(c)] += sum_gxh;
                if (bn->requires_grad) Tape<T>::grad_buf(bn)[std::size_t(c)] += sum_g;
            }
            if (xn->requires_grad) {
                auto& gx = Tape<T>::grad_buf(xn);
                const T mu_u = sum_u / T(m), mu_uxh = sum_uxh / T(m);
                for (int c = 0; c < C; ++c) {
                    const T gc = gn->val[std::size_t(c)];
                    for (std::size_t i = 0; i < hw; ++i) {
                        const std::size_t idx = off + std::size_t(c) * hw + i;
                        const T u = n.grad[idx] * gc;
                        const T xh = (xn->val[idx] - mc) * ic;
                        gx[idx] += ic * (u - mu_u - xh * mu_uxh);
                    }
                }
            }
        }
    });
}

// Row-wise log-softmax for [N, C] logits.
template <class T>
Var<T> log_softmax(Var<T> x) {
    const Shape& s = x.shape();
    detail::require(s.size() == 2, "log_softmax: need [N,C], got " + shape_str(s));
    const int N = s[0], C = s[1];
    auto* xn = x.n;
    std::vector<T> out(xn->val.size());
    for (int n = 0; n < N; ++n) {
        const T* row = xn->val.data() + std::size_t(n) * C;
        T mx = row[0];
        for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        T lse = 0;
        for (int c = 0; c < C; ++c) lse += std::exp(row[c] - mx);
        lse = mx + std::log(lse);
        for (int c = 0; c < C; ++c) out[std::size_t(n) * C + c] = row[c] - lse;
    }
    return x.tape().make("log_softmax", s, std::move(out), xn->requires_grad, [xn, N, C](Node<T>& n) {
        auto& gx = Tape<T>::grad_buf(xn);
        for (int r = 0; r < N; ++r) {
            T gsum = 0;
            for (int c = 0; c < C; ++c) gsum += n.grad[std::size_t(r) * C + c];
            for (int c = 0; c < C; ++c) {
                const std::size_t i = std::size_t(r) * C + c;
                gx[i] += n.grad[i] - std::exp(n.val[i]) * gsum;
            }
        }
    });
}

// ===========================================================================
// Spectral ops
// ===========================================================================

// Centered unnormalized 2-D DFT of each trailing [H, W] plane; output gains a
// size-2 axis before H holding (real, imaginary): [..., H, W] -> [..., 2, H, W].
template <class T>
Var<T> dft2_op(Var<T> x) {
    const Shape& s = x.shape();
    detail::require(s.size() >= 2, "dft2: need >= 2 dims, got " + shape_str(s));
    const int H = s[s.size() - 2], W = s[s.size() - 1];
    detail::require(H >= 2 && W >= 2, "dft2: image sides must be >= 2");
    const std::size_t plane = std::size_t(H) * W, lead = x.n->size() / plane;
    Shape os(s.begin(), s.end() - 2);
    os.push_back(2);
    os.push_back(H);
    os.push_back(W);
    auto* xn = x.n;
    std::vector<T> out(lead * 2 * plane);
    std::vector<std::complex<T>> buf(plane);
    for (std::size_t l = 0; l < lead; ++l) {
        for (std::size_t i = 0; i < plane; ++i) buf[i] = std::complex<T>(xn->val[l * plane + i], T(0));
        spectral::detail::transform2(buf, H, W, -1);
        T* re = out.data() + l * 2 * plane;
        T* im = re + plane;
        for (int u = 0; u < H; ++u) {
            const int r = (u + H / 2) % H;  // DC lands at (H/2, W/2)
            for (int v = 0; v < W; ++v) {
                const int c = (v + W / 2) % W;
                re[std::size_t(r) * W + c] = buf[std::size_t(u) * W + v].real();
                im[std::size_t(r) * W + c] = buf[std::size_t(u) * W + v].imag();
            }
        }
    }
    return x.tape().make("dft2", std::move(os), std::move(out), xn->requires_grad, [xn, H, W, plane, lead](Node<T>& n) {
        // Adjoint of the unnormalized forward transform: x_grad is the real
        // part of the unnormalized inverse transform of the (unshifted) grad.
        auto& gx = Tape<T>::grad_buf(xn);
        std::vector<std::complex<T>> buf(plane);
        for (std::size_t l = 0; l < lead; ++l) {
            const T* re = n.grad.data() + l * 2 * plane;
            const T* im = re + plane;
            for (int u = 0; u < H; ++u) {
                const int r = (u + H / 2) % H;
                for (int v = 0; v < W; ++v) {
                    const int c = (v + W / 2) % W;
                    buf[std::size_t(u) * W + v] = std::complex<T>(re[std::size_t(r) * W + c], im[std::size_t(r) * W + c]);
                }
            }
            spectral::detail::transform2(buf, H, W, +1);
            for (std::size_t i = 0; i < plane; ++i) gx[l * plane + i] += buf[i].real();
        }
    });
}

// Multiply every trailing [H, W] plane by a fixed 0/1 mask.
template <class T>
Var<T> mul_mask2d(Var<T> x, const std::vector<unsigned char>& mask, int h, int w) {
    const Shape& s = x.shape();
    detail::require(s.size() >= 2 && s[s.size() - 2] == h && s[s.size() - 1] == w,
                    "mul_mask2d: trailing dims of " + shape_str(s) + " do not match mask " + std::to_string(h) + "x" + std::to_string(w));
    detail::require(mask.size() == std::size_t(h) * w, "mul_mask2d: mask size mismatch");
    const std::size_t plane = std::size_t(h) * w, lead = x.n->size() / plane;
    auto* xn = x.n;
    auto mk = std::make_shared<std::vector<unsigned char>>(mask);
    std::vector<T> out(xn->val.size());
    for (std::size_t l = 0; l < lead; ++l)
        for (std::size_t i = 0; i < plane; ++i) out[l * plane + i] = (*mk)[i] ? xn->val[l * plane + i] : T(0);
    return x.tape().make("mul_mask2d", s, std::move(out), xn->requires_grad, [xn, mk, plane, lead](Node<T>& n) {
        auto& g = Tape<T>::grad_buf(xn);
        for (std::size_t l = 0; l < lead; ++l)
            for (std::size_t i = 0; i < plane; ++i)
                if ((*mk)[i]) g[l * plane + i] += n.grad[l * plane + i];
    });
}

// Input [..., 2, H, W] of (real, imaginary) planes. For each leading index
// takes the largest bin magnitude (ties: first in row-major order), negates,
// and averages over the leading indices. A zero-magnitude maximum gets zero
// gradient (subgradient at the cone tip).
template <class T>
Var<T> neg_max_mag_mean(Var<T> x) {
    const Shape& s = x.shape();
    detail::require(s.size() >= 3 && s[s.size() - 3] == 2, "neg_max_mag_mean: need [...,2,H,W], got " + shape_str(s));
    const int H = s[s.size() - 2], W = s[s.size() - 1];
    const std::size_t plane = std::size_t(H) * W, lead = x.n->size() / (2 * plane);
    auto* xn = x.n;
    auto args = std::make_shared<std::vector<std::size_t>>(lead);
    T total = 0;
    for (std::size_t l = 0; l < lead; ++l) {
        const T* re = xn->val.data() + l * 2 * plane;
        const T* im = re + plane;
        std::size_t best = 0;
        T bm = -1;
        for (std::size_t i = 0; i < plane; ++i) {
            const T m2 = re[i] * re[i] + im[i] * im[i];
            if (m2 > bm) { bm = m2; best = i; }
        }
        (*args)[l] = best;
        total -= std::sqrt(bm);
    }
    total /= T(lead);
    return x.tape().make("neg_max_mag_mean", Shape{1}, std::vector<T>{total}, xn->requires_grad,
                         [xn, args, plane, lead](Node<T>& n) {
                             auto& g = Tape<T>::grad_buf(xn);
                             const T go = n.grad[0] / T(lead);
                             for (std::size_t l = 0; l < lead; ++l) {
                                 const std::size_t i = (*args)[l];
                                 const T re = xn->val[l * 2 * plane + i], im = xn->val[l * 2 * plane + plane + i];
                                 const T mag = std::sqrt(re * re + im * im);
                                 if (mag > T(0)) {
                                     g[l * 2 * plane + i] += -go * re / mag;
                                     g[l * 2 * plane + plane + i] += -go * im / mag;
                                 }
                             }
                         });
}

// ===========================================================================
// Fused kernels
// ===========================================================================

// Squared maximum mean discrepancy with a Gaussian kernel, biased estimator:
//   mean_ij k(x_i,x_j) + mean_ij k(y_i,y_j) - 2 mean_ij k(x_i,y_j),
//   k(a,b) = exp(-|a-b|^2 / (2 sigma^2)).
template <class T>
Var<T> mmd2(Var<T> x, Var<T> y, T sigma) {
    const Shape &xs = x.shape(), &ys = y.shape();
    detail::require(xs.size() == 2 && ys.size() == 2 && xs[1] == ys[1],
                    "mmd2: need [N,D] and [M,D], got " + shape_str(xs) + " and " + shape_str(ys));
    detail::require(sigma > T(0), "mmd2: sigma must be positive");
    const int N = xs[0], M = ys[0], D = xs[1];
    auto *xn = x.n, *yn = y.n;
    const T is2 = T(1) / (2 * sigma * sigma);
    auto kern = [D, is2](const T* a, const T* b) {
        T d2 = 0;
        for (int i = 0; i < D; ++i) {
            const T d = a[i] - b[i];
            d2 += d * d;
        }
        return std::exp(-d2 * is2);
    };
    T kxx = 0, kyy = 0, kxy = 0;
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j) kxx += kern(xn->val.data() + std::size_t(i) * D, xn->val.data() + std::size_t(j) * D);
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < M; ++j) kyy += kern(yn->val.data() + std::size_t(i) * D, yn->val.data() + std::size_t(j) * D);
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < M; ++j) kxy += kern(xn->val.data() + std::size_t(i) * D, yn->val.data() + std::size_t(j) * D);
    const T val = kxx / T(std::size_t(N) * N) + kyy / T(std::size_t(M) * M) - 2 * kxy / T(std::size_t(N) * M);
    const T gs = T(1) / (sigma * sigma);
    bool rg = xn->requires_grad || yn->requires_grad;
    return x.tape().make("mmd2", Shape{1}, std::vector<T>{val}, rg, [xn, yn, N, M, D, is2, gs, kern](Node<T>& n) {
        const T g = n.grad[0];
        if (xn->requires_grad) {
            auto& gx = Tape<T>::grad_buf(xn);
            for (int i = 0; i < N; ++i) {
                const T* xi = xn->val.data() + std::size_t(i) * D;
                for (int j = 0; j < N; ++j) {
                    const T* xj = xn->val.data() + std::size_t(j) * D;
                    const T k = kern(xi, xj) * gs * 2 / T(std::size_t(N) * N);  // both (i,j) and (j,i) terms
                    for (int d = 0; d < D; ++d) gx[std::size_t(i) * D + d] += g * k * (xj[d] - xi[d]);
                }
                for (int j = 0; j < M; ++j) {
                    const T* yj = yn->val.data() + std::size_t(j) * D;
                    const T k = kern(xi, yj) * gs * (-2) / T(std::size_t(N) * M);
                    for (int d = 0; d < D; ++d) gx[std::size_t(i) * D + d] += g * k * (yj[d] - xi[d]);
                }
            }
        }
        if (yn->requires_grad) {
            auto& gy = Tape<T>::grad_buf(yn);
            for (int i = 0; i < M; ++i) {
                const T* yi = yn->val.data() + std::size_t(i) * D;
                for (int j = 0; j < M; ++j) {
                    const T* yj = yn->val.data() + std::size_t(j) * D;
                    const T k = kern(yi, yj) * gs * 2 / T(std::size_t(M) * M);
                    for (int d = 0; d < D; ++d) gy[std::size_t(i) * D + d] += g * k * (yj[d] - yi[d]);
                }
                for (int j = 0; j < N; ++j) {
                    const T* xj = xn->val.data() + std::size_t(j) * D;
                    const T k = kern(yi, xj) * gs * (-2) / T(std::size_t(N) * M);
                    for (int d = 0; d < D; ++d) gy[std::size_t(i) * D + d] += g * k * (xj[d] - yi[d]);
                }
            }
        }
    });
}

}  // namespace gmparse::ad
