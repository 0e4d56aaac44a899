#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <vector>

#include "pcseg/parallel.hpp"
#include "pcseg/tensor.hpp"

namespace pcseg {

enum class Mode { train, eval };

// A tensor participating in reverse-mode differentiation. Gradient buffers are
// allocated only for nodes on a tracked path and accumulate additively.
template <class S>
struct AdNode {
    TensorData<S> value;
    TensorData<S> grad;
    bool requires_grad = false;

    void ensure_grad() {
        requires_grad = true;
        if (grad.numel() != value.numel()) grad = TensorData<S>(value.shape);
    }
    void zero_grad() {
        if (requires_grad) grad.fill(S(0));
    }
};

template <class S>
using Var = std::shared_ptr<AdNode<S>>;

template <class S>
Var<S> make_var(TensorData<S> data, bool requires_grad = false) {
    auto n = std::make_shared<AdNode<S>>();
    n->value = std::move(data);
    if (requires_grad) n->ensure_grad();
    return n;
}

// Ordered record of executed operations. backward() replays the records
// strictly in reverse execution order; each record adds into input gradients.
template <class S>
class Tape {
public:
    void record(std::function<void()> backward_step) { records_.push_back(std::move(backward_step)); }

    std::size_t size() const { return records_.size(); }

    void backward(const Var<S>& loss) {
        PCSEG_CHECK(loss->value.numel() == 1, "backward expects a scalar, got shape "
                                                  << shape_str(loss->value.shape));
        PCSEG_CHECK(loss->requires_grad, "loss does not depend on any tracked variable");
        loss->grad.v[0] = S(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    }

    void clear() { records_.clear(); }

private:
    std::vector<std::function<void()>> records_;
};

namespace detail {

template <class S>
bool track(Tape<S>* tape, std::initializer_list<const Var<S>*> ins) {
    if (!tape) return false;
    for (const Var<S>* p : ins)
        if ((*p)->requires_grad) return true;
    return false;
}

template <class S>
void prepare(const Var<S>& out, std::initializer_list<const Var<S>*> ins) {
    out->ensure_grad();
    (void)ins;
}

inline std::int64_t row_grain(std::int64_t cols) { return std::max<std::int64_t>(1, 32768 / std::max<std::int64_t>(1, cols)); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class S>
Var<S> add(Tape<S>* tape, const Var<S>& a, const Var<S>& b) {
    PCSEG_CHECK(a->value.same_shape(b->value), "add: shape mismatch " << shape_str(a->value.shape)
                                                                      << " vs " << shape_str(b->value.shape));
    auto out = make_var<S>(TensorData<S>(a->value.shape));
    const std::int64_t n = a->value.numel();
    parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) out->value.v[i] = a->value.v[i] + b->value.v[i];
    });
    if (detail::track(tape, {&a, &b})) {
        out->ensure_grad();
        const bool ga = a->requires_grad, gb = b->requires_grad;
        if (ga) a->ensure_grad();
        if (gb) b->ensure_grad();
        tape->record([=] {
            for (std::int64_t i = 0; i < n; ++i) {
                if (ga) a->grad.v[i] += out->grad.v[i];
                if (gb) b->grad.v[i] += out->grad.v[i];
            }
        });
    }
    return out;
}

template <class S>
Var<S> scale(Tape<S>* tape, const Var<S>& x, S factor) {
    auto out = make_var<S>(TensorData<S>(x->value.shape));
    const std::int64_t n = x->value.numel();
    for (std::int64_t i = 0; i < n; ++i) out->value.v[i] = factor * x->value.v[i];
    if (detail::track(tape, {&x})) {
        out->ensure_grad();
        x->ensure_grad();
        tape->record([=] {
            for (std::int64_t i = 0; i < n; ++i) x->grad.v[i] += factor * out->grad.v[i];
        });
    }
    return out;
}

template <class S>
Var<S> relu(Tape<S>* tape, const Var<S>& x) {
    auto out = make_var<S>(TensorData<S>(x->value.shape));
    const std::int64_t n = x->value.numel();
    parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) out->value.v[i] = x->value.v[i] > S(0) ? x->value.v[i] : S(0);
    });
    if (detail::track(tape, {&x})) {
        out->ensure_grad();
        x->ensure_grad();
        tape->record([=] {
            for (std::int64_t i = 0; i < n; ++i)
                if (x->value.v[i] > S(0)) x->grad.v[i] += out->grad.v[i];
        });
    }
    return out;
}

// Exact (erf) form. Present for parity with configurations that swap it in;
// the default model uses relu throughout.
template <class S>
Var<S> gelu(Tape<S>* tape, const Var<S>& x) {
    auto out = make_var<S>(TensorData<S>(x->value.shape));
    const std::int64_t n = x->value.numel();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    for (std::int64_t i = 0; i < n; ++i) {
        const double xv = static_cast<double>(x->value.v[i]);
        out->value.v[i] = static_cast<S>(0.5 * xv * (1.0 + std::erf(xv * inv_sqrt2)));
    }
    if (detail::track(tape, {&x})) {
        out->ensure_grad();
        x->ensure_grad();
        tape->record([=] {
            for (std::int64_t i = 0; i < n; ++i) {
                const double xv = static_cast<double>(x->value.v[i]);
                const double cdf = 0.5 * (1.0 + std::erf(xv * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * xv * xv);
                x->grad.v[i] += static_cast<S>((cdf + xv * pdf) * static_cast<double>(out->grad.v[i]));
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Layout ops
// ---------------------------------------------------------------------------

template <class S>
Var<S> transpose2d(Tape<S>* tape, const Var<S>& x) {
    PCSEG_CHECK(x->value.ndim() == 2, "transpose2d expects a matrix, got " << shape_str(x->value.shape));
    const std::int64_t rows = x->value.dim(0), cols = x->value.dim(1);
    auto out = make_var<S>(TensorData<S>({cols, rows}));
    parallel_for(rows, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i)
            for (std::int64_t j = 0; j < cols; ++j) out->value.v[j * rows + i] = x->value.v[i * cols + j];
    }, detail::row_grain(cols));
    if (detail::track(tape, {&x})) {
        out->ensure_grad();
        x->ensure_grad();
        tape->record([=] {
            for (std::int64_t i = 0; i < rows; ++i)
                for (std::int64_t j = 0; j < cols; ++j) x->grad.v[i * cols + j] += out->grad.v[j * rows + i];
        });
    }
    return out;
}

// [HW, C] -> [C, H, W]; pairs a transpose with the grid reshape in one pass.
template <class S>
Var<S> to_chw(Tape<S>* tape, const Var<S>& x, std::int64_t h, std::int64_t w) {
    PCSEG_CHECK(x->value.ndim() == 2 && x->value.dim(0) == h * w,
                "to_chw expects [" << h * w << ", C], got " << shape_str(x->value.shape));
    const std::int64_t hw = h * w, c = x->value.dim(1);
    auto out = make_var<S>(TensorData<S>({c, h, w}));
    parallel_for(hw, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t p = lo; p < hi; ++p)
            for (std::int64_t ch = 0; ch < c; ++ch) out->value.v[ch * hw + p] = x->value.v[p * c + ch];
    }, detail::row_grain(c));
    if (detail::track(tape, {&x})) {
        out->ensure_grad();
        x->ensure_grad();
        tape->record([=] {
            for (std::int64_t p = 0; p < hw; ++p)
                for (std::int64_t ch = 0; ch < c; ++ch) x->grad.v[p * c + ch] += out->grad.v[ch * hw + p];
        });
    }
    return out;
}

// [C, H, W] -> [HW, C].
template <class S>
Var<S> from_chw(Tape<S>* tape, const Var<S>& x) {
    PCSEG_CHECK(x->value.ndim() == 3, "from_chw expects [C, H, W], got " << shape_str(x->value.shape));
    const std::int64_t c = x->value.dim(0), hw = x->value.dim(1) * x->value.dim(2);
    auto out = make_var<S>(TensorData<S>({hw, c}));
    parallel_for(hw, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t p = lo; p < hi; ++p)
            for (std::int64_t ch = 0; ch < c; ++ch) out->value.v[p * c + ch] = x->value.v[ch * hw + p];
    }, detail::row_grain(c));
    if (detail::track(tape, {&x})) {
        out->ensure_grad();
        x->ensure_grad();
        tape->record([=] {
            for (std::int64_t p = 0; p < hw; ++p)
                for (std::int64_t ch = 0; ch < c; ++ch) x->grad.v[ch * hw + p] += out->grad.v[p * c + ch];
        });
    }
    return out;
}

// Stack along the channel axis: [C1, N] + [C2, N] -> [C1 + C2, N].
template <class S>
Var<S> concat_rows(Tape<S>* tape, const Var<S>& a, const Var<S>& b) {
    PCSEG_CHECK(a->value.ndim() == 2 && b->value.ndim() == 2 && a->value.dim(1) == b->value.dim(1),
                "concat_rows: incompatible shapes " << shape_str(a->value.shape) << " and "
                                                    << shape_str(b->value.shape));
    const std::int64_t c1 = a->value.dim(0), c2 = b->value.dim(0), n = a->value.dim(1);
    auto out = make_var<S>(TensorData<S>({c1 + c2, n}));
    std::copy(a->value.v.begin(), a->value.v.end(), out->value.v.begin());
    std::copy(b->value.v.begin(), b->value.v.end(), out->value.v.begin() + static_cast<std::ptrdiff_t>(c1 * n));
    if (detail::track(tape, {&a, &b})) {
        out->ensure_grad();
        const bool ga = a->requires_grad, gb = b->requires_grad;
        if (ga) a->ensure_grad();
        if (gb) b->ensure_grad();
        tape->record([=] {
            if (ga)
                for (std::int64_t i = 0; i < c1 * n; ++i) a->grad.v[i] += out->grad.v[i];
            if (gb)
                for (std::int64_t i = 0; i < c2 * n; ++i) b->grad.v[i] += out->grad.v[c1 * n + i];
        });
    }
    return out;
}

// out[c, j] = x[c, idx[j]]. Backward scatter-adds back into the picked columns.
template <class S>
Var<S> gather_columns(Tape<S>* tape, const Var<S>& x, std::shared_ptr<const std::vector<std::int64_t>> idx) {
    PCSEG_CHECK(x->value.ndim() == 2, "gather_columns expects a matrix");
    const std::int64_t c = x->value.dim(0), m = x->value.dim(1);
    const std::int64_t mo = static_cast<std::int64_t>(idx->size());
    for (auto j : *idx) PCSEG_CHECK(j >= 0 && j < m, "gather index " << j << " outside [0, " << m << ")");
    auto out = make_var<S>(TensorData<S>({c, mo}));
    parallel_for(c, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t ch = lo; ch < hi; ++ch) {
            const S* src = x->value.row(ch);
            S* dst = out->value.row(ch);
            for (std::int64_t j = 0; j < mo; ++j) dst[j] = src[(*idx)[static_cast<std::size_t>(j)]];
        }
    }, detail::row_grain(mo));
    if (detail::track(tape, {&x})) {
        out->ensure_grad();
        x->ensure_grad();
        tape->record([=] {
            for (std::int64_t ch = 0; ch < c; ++ch) {
                S* dst = x->grad.row(ch);
                const S* g = out->grad.row(ch);
                for (std::int64_t j = 0; j < mo; ++j) dst[(*idx)[static_cast<std::size_t>(j)]] += g[j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolutions (all kernel-size 1 along the point axis; see conv2d for grids)
// ---------------------------------------------------------------------------

// out[o, n] = b[o] + sum_i w[o, i_local] * x[i, n] within channel groups.
template <class S>
Var<S> conv1d_grouped(Tape<S>* tape, const Var<S>& x, const Var<S>& w, const Var<S>& b, int groups) {
    PCSEG_CHECK(x->value.ndim() == 2 && w->value.ndim() == 2 && b->value.ndim() == 1,
                "conv1d: bad ranks x=" << shape_str(x->value.shape) << " w=" << shape_str(w->value.shape)
                                       << " b=" << shape_str(b->value.shape));
    const std::int64_t cin = x->value.dim(0), n = x->value.dim(1);
    const std::int64_t cout = w->value.dim(0), win = w->value.dim(1);
    PCSEG_CHECK(groups >= 1 && cin % groups == 0 && cout % groups == 0,
                "conv1d: group count " << groups << " must divide C_in=" << cin << " and C_out=" << cout);
    const std::int64_t gi = cin / groups, go = cout / groups;
    PCSEG_CHECK(win == gi, "conv1d: weight expects " << win << " inputs per group, x provides " << gi);
    PCSEG_CHECK(b->value.dim(0) == cout, "conv1d: bias size " << b->value.dim(0) << " != C_out " << cout);

    auto out = make_var<S>(TensorData<S>({cout, n}));
    parallel_for(cout, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t o = lo; o < hi; ++o) {
            S* dst = out->value.row(o);
            std::fill(dst, dst + n, b->value.v[static_cast<std::size_t>(o)]);
            const std::int64_t base = (o / go) * gi;
            for (std::int64_t i = 0; i < gi; ++i) {
                const S wv = w->value.at(o, i);
                if (wv == S(0)) continue;
                const S* src = x->value.row(base + i);
                for (std::int64_t j = 0; j < n; ++j) dst[j] += wv * src[j];
            }
        }
    }, detail::row_grain(n * gi));

    if (detail::track(tape, {&x, &w, &b})) {
        out->ensure_grad();
        const bool gx = x->requires_grad, gw = w->requires_grad, gb = b->requires_grad;
        if (gx) x->ensure_grad();
        if (gw) w->ensure_grad();
        if (gb) b->ensure_grad();
        tape->record([=] {
            if (gb || gw) {
                parallel_for(cout, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t o = lo; o < hi; ++o) {
                        const S* g = out->grad.row(o);
                        if (gb) {
                            S acc = S(0);
                            for (std::int64_t j = 0; j < n; ++j) acc += g[j];
                            b->grad.v[static_cast<std::size_t>(o)] += acc;
                        }
                        if (gw) {
                            const std::int64_t base = (o / go) * gi;
                            for (std::int64_t i = 0; i < gi; ++i) {
                                const S* src = x->value.row(base + i);
                                S acc = S(0);
                                for (std::int64_t j = 0; j < n; ++j) acc += g[j] * src[j];
                                w->grad.at(o, i) += acc;
                            }
                        }
                    }
                }, detail::row_grain(n * gi));
            }
            if (gx) {
                parallel_for(groups, [&](std::int64_t glo, std::int64_t ghi) {
                    for (std::int64_t grp = glo; grp < ghi; ++grp) {
                        for (std::int64_t i = 0; i < gi; ++i) {
                            S* dst = x->grad.row(grp * gi + i);
                            for (std::int64_t o = grp * go; o < (grp + 1) * go; ++o) {
                                const S wv = w->value.at(o, i);
                                const S* g = out->grad.row(o);
                                for (std::int64_t j = 0; j < n; ++j) dst[j] += wv * g[j];
                            }
                        }
                    }
                }, std::max<std::int64_t>(1, detail::row_grain(n * gi * go)));
            }
        });
    }
    return out;
}

// Per-point linear map of the channel column (kernel size 1); wider kernels
// along the point axis would couple outputs to the arbitrary point ordering.
template <class S>
Var<S> conv1d_pointwise(Tape<S>* tape, const Var<S>& x, const Var<S>& w, const Var<S>& b) {
    return conv1d_grouped(tape, x, w, b, 1);
}

// out[c, n] = w[c] * x[c, n] + b[c].
template <class S>
Var<S> conv1d_depthwise(Tape<S>* tape, const Var<S>& x, const Var<S>& w, const Var<S>& b) {
    PCSEG_CHECK(x->value.ndim() == 2 && w->value.ndim() == 1 && b->value.ndim() == 1,
                "conv1d_depthwise: bad ranks");
    const std::int64_t c = x->value.dim(0), n = x->value.dim(1);
    PCSEG_CHECK(w->value.dim(0) == c && b->value.dim(0) == c,
                "conv1d_depthwise: channel mismatch, x has " << c << ", w " << w->value.dim(0) << ", b "
                                                             << b->value.dim(0));
    auto out = make_var<S>(TensorData<S>({c, n}));
    parallel_for(c, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t ch = lo; ch < hi; ++ch) {
            const S wv = w->value.v[static_cast<std::size_t>(ch)];
            const S bv = b->value.v[static_cast<std::size_t>(ch)];
            const S* src = x->value.row(ch);
            S* dst = out->value.row(ch);
            for (std::int64_t j = 0; j < n; ++j) dst[j] = wv * src[j] + bv;
        }
    }, detail::row_grain(n));
    if (detail::track(tape, {&x, &w, &b})) {
        out->ensure_grad();
        const bool gx = x->requires_grad, gw = w->requires_grad, gb = b->requires_grad;
        if (gx) x->ensure_grad();
        if (gw) w->ensure_grad();
        if (gb) b->ensure_grad();
        tape->record([=] {
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const S* g = out->grad.row(ch);
                if (gx) {
                    const S wv = w->value.v[static_cast<std::size_t>(ch)];
                    S* dst = x->grad.row(ch);
                    for (std::int64_t j = 0; j < n; ++j) dst[j] += wv * g[j];
                }
                if (gw) {
                    const S* src = x->value.row(ch);
                    S acc = S(0);
                    for (std::int64_t j = 0; j < n; ++j) acc += g[j] * src[j];
                    w->grad.v[static_cast<std::size_t>(ch)] += acc;
                }
                if (gb) {
                    S acc = S(0);
                    for (std::int64_t j = 0; j < n; ++j) acc += g[j];
                    b->grad.v[static_cast<std::size_t>(ch)] += acc;
                }
            }
        });
    }
    return out;
}

// Per-channel 2D cross-correlation with zero padding (k-1)/2; no channel mixing.
template <class S>
Var<S> conv2d_depthwise(Tape<S>* tape, const Var<S>& x, const Var<S>& w, const Var<S>& b) {
    PCSEG_CHECK(x->value.ndim() == 3, "conv2d_depthwise expects [C, H, W], got " << shape_str(x->value.shape));
    PCSEG_CHECK(w->value.ndim() == 3 && w->value.dim(1) == w->value.dim(2),
                "conv2d_depthwise expects square kernels [C, k, k], got " << shape_str(w->value.shape));
    const std::int64_t c = x->value.dim(0), h = x->value.dim(1), wd = x->value.dim(2);
    const std::int64_t k = w->value.dim(1);
    PCSEG_CHECK(k % 2 == 1, "conv2d_depthwise: kernel size must be odd, got " << k);
    PCSEG_CHECK(w->value.dim(0) == c && b->value.dim(0) == c, "conv2d_depthwise: channel mismatch");
    const std::int64_t pad = (k - 1) / 2;

    auto out = make_var<S>(TensorData<S>({c, h, wd}));
    const std::int64_t plane = h * wd;
    parallel_for(c, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t ch = lo; ch < hi; ++ch) {
            const S* src = x->value.v.data() + ch * plane;
            const S* ker = w->value.v.data() + ch * k * k;
            const S bv = b->value.v[static_cast<std::size_t>(ch)];
            S* dst = out->value.v.data() + ch * plane;
            for (std::int64_t y = 0; y < h; ++y) {
                for (std::int64_t xx = 0; xx < wd; ++xx) {
                    S acc = bv;
                    for (std::int64_t dy = 0; dy < k; ++dy) {
                        const std::int64_t sy = y + dy - pad;
                        if (sy < 0 || sy >= h) continue;
                        for (std::int64_t dx = 0; dx < k; ++dx) {
                            const std::int64_t sx = xx + dx - pad;
                            if (sx < 0 || sx >= wd) continue;
                            acc += ker[dy * k + dx] * src[sy * wd + sx];
                        }
                    }
                    dst[y * wd + xx] = acc;
                }
            }
        }
    }, std::max<std::int64_t>(1, 8192 / std::max<std::int64_t>(1, h * wd * k * k)));

    if (detail::track(tape, {&x, &w, &b})) {
        out->ensure_grad();
        const bool gx = x->requires_grad, gw = w->requires_grad, gb = b->requires_grad;
        if (gx) x->ensure_grad();
        if (gw) w->ensure_grad();
        if (gb) b->ensure_grad();
        tape->record([=] {
            parallel_for(c, [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t ch = lo; ch < hi; ++ch) {
                    const std::int64_t pl = h * wd;
                    const S* g = out->grad.v.data() + ch * pl;
                    const S* src = x->value.v.data() + ch * pl;
                    const S* ker = w->value.v.data() + ch * k * k;
                    if (gb) {
                        S acc = S(0);
                        for (std::int64_t i = 0; i < pl; ++i) acc += g[i];
                        b->grad.v[static_cast<std::size_t>(ch)] += acc;
                    }
                    for (std::int64_t y = 0; y < h; ++y) {
                        for (std::int64_t xx = 0; xx < wd; ++xx) {
                            const S gv = g[y * wd + xx];
                            if (gv == S(0)) continue;
                            for (std::int64_t dy = 0; dy < k; ++dy) {
                                const std::int64_t sy = y + dy - pad;
                                if (sy < 0 || sy >= h) continue;
                                for (std::int64_t dx = 0; dx < k; ++dx) {
                                    const std::int64_t sx = xx + dx - pad;
                                    if (sx < 0 || sx >= wd) continue;
                                    if (gw) w->grad.v[ch * k * k + dy * k + dx] += gv * src[sy * wd + sx];
                                    if (gx) x->grad.v[ch * pl + sy * wd + sx] += ker[dy * k + dx] * gv;
                                }
                            }
                        }
                    }
                }
            }, std::max<std::int64_t>(1, 8192 / std::max<std::int64_t>(1, h * wd * k * k)));
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization, pooling, loss
// ---------------------------------------------------------------------------

template <class S>
struct BnState {
    TensorData<S> running_mean;
    TensorData<S> running_var;
    double momentum = 0.99;

    static BnState make(std::int64_t channels, double momentum = 0.99) {
        BnState s;
        s.running_mean = TensorData<S>({channels});
        s.running_var = TensorData<S>::full({channels}, S(1));
        s.momentum = momentum;
        return s;
    }
};

inline constexpr double kBnEpsilon = 1e-5;

// Per-channel standardization over the M axis followed by the affine map.
// Train mode uses batch statistics (biased variance) and refreshes the running
// buffers; eval mode standardizes with the stored statistics.
template <class S>
Var<S> batchnorm(Tape<S>* tape, const Var<S>& x, const Var<S>& gamma, const Var<S>& beta,
                 BnState<S>& state, Mode mode) {
    PCSEG_CHECK(x->value.ndim() == 2, "batchnorm expects [C, M], got " << shape_str(x->value.shape));
    const std::int64_t c = x->value.dim(0), m = x->value.dim(1);
    PCSEG_CHECK(m >= 1, "batchnorm: empty batch axis");
    PCSEG_CHECK(gamma->value.dim(0) == c && beta->value.dim(0) == c && state.running_mean.dim(0) == c,
                "batchnorm: channel mismatch");

    auto out = make_var<S>(TensorData<S>({c, m}));
    TensorData<S> xhat({c, m});
    TensorData<S> inv_std({c});
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const S* src = x->value.row(ch);
        double mean, var;
        if (mode == Mode::train) {
            double sum = 0;
            for (std::int64_t j = 0; j < m; ++j) sum += static_cast<double>(src[j]);
            mean = sum / static_cast<double>(m);
            double sq = 0;
            for (std::int64_t j = 0; j < m; ++j) {
                const double d = static_cast<double>(src[j]) - mean;
                sq += d * d;
            }
            var = sq / static_cast<double>(m);
            const double mom = state.momentum;
            state.running_mean.v[static_cast<std::size_t>(ch)] =
                static_cast<S>(mom * static_cast<double>(state.running_mean.v[static_cast<std::size_t>(ch)]) +
                               (1.0 - mom) * mean);
            state.running_var.v[static_cast<std::size_t>(ch)] =
                static_cast<S>(mom * static_cast<double>(state.running_var.v[static_cast<std::size_t>(ch)]) +
                               (1.0 - mom) * var);
        } else {
            mean = static_cast<double>(state.running_mean.v[static_cast<std::size_t>(ch)]);
            var = static_cast<double>(state.running_var.v[static_cast<std::size_t>(ch)]);
        }
        const double inv = 1.0 / std::sqrt(var + kBnEpsilon);
        inv_std.v[static_cast<std::size_t>(ch)] = static_cast<S>(inv);
        const S g = gamma->value.v[static_cast<std::size_t>(ch)];
        const S bt = beta->value.v[static_cast<std::size_t>(ch)];
        S* xh = xhat.row(ch);
        S* dst = out->value.row(ch);
        for (std::int64_t j = 0; j < m; ++j) {
            xh[j] = static_cast<S>((static_cast<double>(src[j]) - mean) * inv);
            dst[j] = g * xh[j] + bt;
        }
    }

    if (detail::track(tape, {&x, &gamma, &beta})) {
        out->ensure_grad();
        const bool gx = x->requires_grad, gg = gamma->requires_grad, gb = beta->requires_grad;
        if (gx) x->ensure_grad();
        if (gg) gamma->ensure_grad();
        if (gb) beta->ensure_grad();
        const bool train = mode == Mode::train;
        auto xhat_p = std::make_shared<TensorData<S>>(std::move(xhat));
        auto inv_p = std::make_shared<TensorData<S>>(std::move(inv_std));
        tape->record([=] {
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const S* g = out->grad.row(ch);
                const S* xh = xhat_p->row(ch);
                const S gm = gamma->value.v[static_cast<std::size_t>(ch)];
                const S inv = inv_p->v[static_cast<std::size_t>(ch)];
                double sum_g = 0, sum_gx = 0;
                for (std::int64_t j = 0; j < m; ++j) {
                    sum_g += static_cast<double>(g[j]);
                    sum_gx += static_cast<double>(g[j]) * static_cast<double>(xh[j]);
                }
                if (gb) beta->grad.v[static_cast<std::size_t>(ch)] += static_cast<S>(sum_g);
                if (gg) gamma->grad.v[static_cast<std::size_t>(ch)] += static_cast<S>(sum_gx);
                if (gx) {
                    S* dst = x->grad.row(ch);
                    if (train) {
                        const double mg = sum_g / static_cast<double>(m);
                        const double mgx = sum_gx / static_cast<double>(m);
                        for (std::int64_t j = 0; j < m; ++j)
                            dst[j] += static_cast<S>(static_cast<double>(gm) * static_cast<double>(inv) *
                                                     (static_cast<double>(g[j]) - mg -
                                                      static_cast<double>(xh[j]) * mgx));
                    } else {
                        for (std::int64_t j = 0; j < m; ++j) dst[j] += gm * inv * g[j];
                    }
                }
            }
        });
    }
    return out;
}

// Max over the neighbor axis. x holds K stacked [C, N] slices as [C, K*N]
// (column k*N + n is neighbor slot k of point n); the result is [C, N].
// Gradient flows to the argmax slot only, first slot winning ties.
template <class S>
Var<S> max_over_k(Tape<S>* tape, const Var<S>& x, std::int64_t k) {
    PCSEG_CHECK(x->value.ndim() == 2, "max_over_k expects [C, K*N]");
    PCSEG_CHECK(k >= 1 && x->value.dim(1) % k == 0,
                "max_over_k: column count " << x->value.dim(1) << " is not a multiple of K=" << k);
    const std::int64_t c = x->value.dim(0), n = x->value.dim(1) / k;
    auto out = make_var<S>(TensorData<S>({c, n}));
    auto argmax = std::make_shared<std::vector<std::int32_t>>(static_cast<std::size_t>(c * n));
    parallel_for(c, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t ch = lo; ch < hi; ++ch) {
            const S* src = x->value.row(ch);
            S* dst = out->value.row(ch);
            std::int32_t* arg = argmax->data() + ch * n;
            for (std::int64_t j = 0; j < n; ++j) {
                S best = src[j];
                std::int32_t bk = 0;
                for (std::int64_t kk = 1; kk < k; ++kk) {
                    const S v = src[kk * n + j];
                    if (v > best) {
                        best = v;
                        bk = static_cast<std::int32_t>(kk);
                    }
                }
                dst[j] = best;
                arg[j] = bk;
            }
        }
    }, detail::row_grain(n * k));
    if (detail::track(tape, {&x})) {
        out->ensure_grad();
        x->ensure_grad();
        tape->record([=] {
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const S* g = out->grad.row(ch);
                S* dst = x->grad.row(ch);
                const std::int32_t* arg = argmax->data() + ch * n;
                for (std::int64_t j = 0; j < n; ++j) dst[static_cast<std::int64_t>(arg[j]) * n + j] += g[j];
            }
        });
    }
    return out;
}

// Excluded neighbor slots are replaced by a large negative constant so they
// never win the following max; gradient passes through kept slots only.
template <class S>
Var<S> mask_slots(Tape<S>* tape, const Var<S>& x, std::shared_ptr<const std::vector<std::uint8_t>> keep) {
    PCSEG_CHECK(x->value.ndim() == 2 && static_cast<std::int64_t>(keep->size()) == x->value.dim(1),
                "mask_slots: keep mask must cover every column");
    const std::int64_t c = x->value.dim(0), m = x->value.dim(1);
    constexpr S kMasked = S(-1e30);
    auto out = make_var<S>(TensorData<S>({c, m}));
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const S* src = x->value.row(ch);
        S* dst = out->value.row(ch);
        for (std::int64_t j = 0; j < m; ++j) dst[j] = (*keep)[static_cast<std::size_t>(j)] ? src[j] : kMasked;
    }
    if (detail::track(tape, {&x})) {
        out->ensure_grad();
        x->ensure_grad();
        tape->record([=] {
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const S* g = out->grad.row(ch);
                S* dst = x->grad.row(ch);
                for (std::int64_t j = 0; j < m; ++j)
                    if ((*keep)[static_cast<std::size_t>(j)]) dst[j] += g[j];
            }
        });
    }
    return out;
}

// Column-wise softmax of [C, N], plain data (prediction/test helper).
template <class S>
TensorData<S> softmax_columns(const TensorData<S>& logits) {
    PCSEG_CHECK(logits.ndim() == 2, "softmax_columns expects [C, N]");
    const std::int64_t c = logits.dim(0), n = logits.dim(1);
    TensorData<S> probs({c, n});
    for (std::int64_t j = 0; j < n; ++j) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t ch = 0; ch < c; ++ch) mx = std::max(mx, static_cast<double>(logits.at(ch, j)));
        double denom = 0;
        for (std::int64_t ch = 0; ch < c; ++ch) denom += std::exp(static_cast<double>(logits.at(ch, j)) - mx);
        for (std::int64_t ch = 0; ch < c; ++ch)
            probs.at(ch, j) = static_cast<S>(std::exp(static_cast<double>(logits.at(ch, j)) - mx) / denom);
    }
    return probs;
}

// Mean negative log-softmax over non-ignored points, max-subtracted for
// stability. Errors out when every point is ignored (mean undefined).
template <class S>
Var<S> softmax_crossentropy(Tape<S>* tape, const Var<S>& logits,
                            std::shared_ptr<const std::vector<std::int32_t>> targets,
                            std::int32_t ignore_class) {
    PCSEG_CHECK(logits->value.ndim() == 2, "softmax_crossentropy expects [C, N]");
    const std::int64_t c = logits->value.dim(0), n = logits->value.dim(1);
    PCSEG_CHECK(static_cast<std::int64_t>(targets->size()) == n,
                "softmax_crossentropy: " << targets->size() << " targets for " << n << " points");
    std::int64_t counted = 0;
    double loss = 0;
    auto probs = std::make_shared<TensorData<S>>(softmax_columns(logits->value));
    for (std::int64_t j = 0; j < n; ++j) {
        const std::int32_t t = (*targets)[static_cast<std::size_t>(j)];
        if (t == ignore_class) continue;
        PCSEG_CHECK(t >= 0 && t < c, "target " << t << " outside [0, " << c << ")");
        ++counted;
        loss -= std::log(std::max(static_cast<double>(probs->at(t, j)), 1e-300));
    }
    PCSEG_CHECK(counted > 0, "softmax_crossentropy: every point carries the ignore class");
    auto out = make_var<S>(TensorData<S>({1}, {static_cast<S>(loss / static_cast<double>(counted))}));
    if (detail::track(tape, {&logits})) {
        out->ensure_grad();
        logits->ensure_grad();
        const double inv_count = 1.0 / static_cast<double>(counted);
        tape->record([=] {
            const S go = out->grad.v[0];
            for (std::int64_t j = 0; j < n; ++j) {
                const std::int32_t t = (*targets)[static_cast<std::size_t>(j)];
                if (t == ignore_class) continue;
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    double p = static_cast<double>(probs->at(ch, j));
                    if (ch == t) p -= 1.0;
                    logits->grad.at(ch, j) += static_cast<S>(static_cast<double>(go) * p * inv_count);
                }
            }
        });
    }
    return out;
}

// Fixed-weight contraction to a scalar; the standard head for gradient checks.
template <class S>
Var<S> weighted_sum(Tape<S>* tape, const Var<S>& x, std::shared_ptr<const TensorData<S>> weights) {
    PCSEG_CHECK(weights->numel() == x->value.numel(), "weighted_sum: weight/input size mismatch");
    double acc = 0;
    for (std::int64_t i = 0; i < x->value.numel(); ++i)
        acc += static_cast<double>(x->value.v[static_cast<std::size_t>(i)]) *
               static_cast<double>(weights->v[static_cast<std::size_t>(i)]);
    auto out = make_var<S>(TensorData<S>({1}, {static_cast<S>(acc)}));
    if (detail::track(tape, {&x})) {
        out->ensure_grad();
        x->ensure_grad();
        tape->record([=] {
            const S go = out->grad.v[0];
            for (std::int64_t i = 0; i < x->value.numel(); ++i)
                x->grad.v[static_cast<std::size_t>(i)] += go * weights->v[static_cast<std::size_t>(i)];
        });
    }
    return out;
}

}  // namespace pcseg
