#pragma once
//
// Convolution, transposed convolution and group normalization.
//
// All spatial kernels work on three spatial axes [N, C, D, H, W]; the 2D
// entry points view [N, C, H, W] as depth 1. Every output element is
// produced by a fixed loop order, so results do not depend on scheduling.
//

#include <array>
#include <cmath>
#include <string>

#include "axon/nn/tensor.hpp"

namespace axon::nn {

using Int3 = std::array<std::size_t, 3>;

struct ConvGeometry {
    std::size_t batch = 1;
    std::size_t c_in = 1, c_out = 1; // channels of the "input" (large) and "output" tensors
    Int3 in{};                       // spatial extents of the input side
    Int3 out{};                      // spatial extents of the output side
    Int3 k{1, 1, 1};
    Int3 stride{1, 1, 1};
    Int3 pad{0, 0, 0};
};

namespace detail {

// Range of output positions o along one axis for which o*s - p + kk lies in [0, n).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t n_in, std::size_t n_out, std::size_t kk,
                                                       std::size_t s, std::size_t p) {
    // o*s + kk >= p  and  o*s + kk - p <= n_in - 1
    std::size_t lo = 0;
    if (kk < p) lo = (p - kk + s - 1) / s;
    const long hi_num = long(n_in) - 1 + long(p) - long(kk);
    if (hi_num < 0) return {0, 0};
    std::size_t hi = std::size_t(hi_num) / s + 1;
    hi = std::min(hi, n_out);
    if (lo >= hi) return {0, 0};
    return {lo, hi};
}

inline double dot_strided(const double* a, const double* b, std::size_t n, std::size_t sb) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i * sb];
        s1 += a[i + 1] * b[(i + 1) * sb];
        s2 += a[i + 2] * b[(i + 2) * sb];
        s3 += a[i + 3] * b[(i + 3) * sb];
    }
    for (; i < n; ++i) s0 += a[i] * b[i * sb];
    return (s0 + s1) + (s2 + s3);
}

// y[n,co,o] += sum_{ci,k} w[co,ci,k] * x[n,ci,o*s-p+k]
inline void conv_forward(const ConvGeometry& g, const double* x, const double* w, double* y) {
    const std::size_t in_sp = g.in[0] * g.in[1] * g.in[2], out_sp = g.out[0] * g.out[1] * g.out[2];
    const std::size_t kvol = g.k[0] * g.k[1] * g.k[2];
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t co = 0; co < g.c_out; ++co) {
            double* yc = y + (n * g.c_out + co) * out_sp;
            for (std::size_t ci = 0; ci < g.c_in; ++ci) {
                const double* xc = x + (n * g.c_in + ci) * in_sp;
                const double* wk = w + (co * g.c_in + ci) * kvol;
                for (std::size_t kd = 0; kd < g.k[0]; ++kd) {
                    const auto [d_lo, d_hi] = valid_range(g.in[0], g.out[0], kd, g.stride[0], g.pad[0]);
                    for (std::size_t kh = 0; kh < g.k[1]; ++kh) {
                        const auto [h_lo, h_hi] = valid_range(g.in[1], g.out[1], kh, g.stride[1], g.pad[1]);
                        for (std::size_t kw = 0; kw < g.k[2]; ++kw) {
                            const auto [w_lo, w_hi] = valid_range(g.in[2], g.out[2], kw, g.stride[2], g.pad[2]);
                            const double wv = wk[(kd * g.k[1] + kh) * g.k[2] + kw];
                            if (wv == 0.0 || w_lo >= w_hi) continue;
                            const std::size_t len = w_hi - w_lo;
                            for (std::size_t od = d_lo; od < d_hi; ++od) {
                                const std::size_t id = od * g.stride[0] + kd - g.pad[0];
                                for (std::size_t oh = h_lo; oh < h_hi; ++oh) {
                                    const std::size_t ih = oh * g.stride[1] + kh - g.pad[1];
                                    double* yr = yc + (od * g.out[1] + oh) * g.out[2] + w_lo;
                                    const double* xr =
                                        xc + (id * g.in[1] + ih) * g.in[2] + w_lo * g.stride[2] + kw - g.pad[2];
                                    if (g.stride[2] == 1) {
                                        for (std::size_t i = 0; i < len; ++i) yr[i] += wv * xr[i];
                                    } else {
                                        const std::size_t s = g.stride[2];
                                        for (std::size_t i = 0; i < len; ++i) yr[i] += wv * xr[i * s];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
}

// gx[n,ci,o*s-p+k] += sum_{co} w[co,ci,k] * gy[n,co,o]
inline void conv_backward_input(const ConvGeometry& g, const double* gy, const double* w, double* gx) {
    const std::size_t in_sp = g.in[0] * g.in[1] * g.in[2], out_sp = g.out[0] * g.out[1] * g.out[2];
    const std::size_t kvol = g.k[0] * g.k[1] * g.k[2];
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t ci = 0; ci < g.c_in; ++ci) {
            double* xc = gx + (n * g.c_in + ci) * in_sp;
            for (std::size_t co = 0; co < g.c_out; ++co) {
                const double* yc = gy + (n * g.c_out + co) * out_sp;
                const double* wk = w + (co * g.c_in + ci) * kvol;
                for (std::size_t kd = 0; kd < g.k[0]; ++kd) {
                    const auto [d_lo, d_hi] = valid_range(g.in[0], g.out[0], kd, g.stride[0], g.pad[0]);
                    for (std::size_t kh = 0; kh < g.k[1]; ++kh) {
                        const auto [h_lo, h_hi] = valid_range(g.in[1], g.out[1], kh, g.stride[1], g.pad[1]);
                        for (std::size_t kw = 0; kw < g.k[2]; ++kw) {
                            const auto [w_lo, w_hi] = valid_range(g.in[2], g.out[2], kw, g.stride[2], g.pad[2]);
                            const double wv = wk[(kd * g.k[1] + kh) * g.k[2] + kw];
                            if (wv == 0.0 || w_lo >= w_hi) continue;
                            const std::size_t len = w_hi - w_lo;
                            for (std::size_t od = d_lo; od < d_hi; ++od) {
                                const std::size_t id = od * g.stride[0] + kd - g.pad[0];
                                for (std::size_t oh = h_lo; oh < h_hi; ++oh) {
                                    const std::size_t ih = oh * g.stride[1] + kh - g.pad[1];
                                    const double* yr = yc + (od * g.out[1] + oh) * g.out[2] + w_lo;
                                    double* xr =
                                        xc + (id * g.in[1] + ih) * g.in[2] + w_lo * g.stride[2] + kw - g.pad[2];
                                    if (g.stride[2] == 1) {
                                        for (std::size_t i = 0; i < len; ++i) xr[i] += wv * yr[i];
                                    } else {
                                        const std::size_t s = g.stride[2];
                                        for (std::size_t i = 0; i < len; ++i) xr[i * s] += wv * yr[i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
}

// gw[co,ci,k] += sum_{n,o} gy[n,co,o] * x[n,ci,o*s-p+k]
inline void conv_backward_weight(const ConvGeometry& g, const double* gy, const double* x, double* gw) {
    const std::size_t in_sp = g.in[0] * g.in[1] * g.in[2], out_sp = g.out[0] * g.out[1] * g.out[2];
    const std::size_t kvol = g.k[0] * g.k[1] * g.k[2];
    for (std::size_t co = 0; co < g.c_out; ++co)
        for (std::size_t ci = 0; ci < g.c_in; ++ci) {
            double* wk = gw + (co * g.c_in + ci) * kvol;
            for (std::size_t kd = 0; kd < g.k[0]; ++kd) {
                const auto [d_lo, d_hi] = valid_range(g.in[0], g.out[0], kd, g.stride[0], g.pad[0]);
                for (std::size_t kh = 0; kh < g.k[1]; ++kh) {
                    const auto [h_lo, h_hi] = valid_range(g.in[1], g.out[1], kh, g.stride[1], g.pad[1]);
                    for (std::size_t kw = 0; kw < g.k[2]; ++kw) {
                        const auto [w_lo, w_hi] = valid_range(g.in[2], g.out[2], kw, g.stride[2], g.pad[2]);
                        if (w_lo >= w_hi) continue;
                        const std::size_t len = w_hi - w_lo;
                        double acc = 0.0;
                        for (std::size_t n = 0; n < g.batch; ++n) {
                            const double* yc = gy + (n * g.c_out + co) * out_sp;
                            const double* xc = x + (n * g.c_in + ci) * in_sp;
                            for (std::size_t od = d_lo; od < d_hi; ++od) {
                                const std::size_t id = od * g.stride[0] + kd - g.pad[0];
                                for (std::size_t oh = h_lo; oh < h_hi; ++oh) {
                                    const std::size_t ih = oh * g.stride[1] + kh - g.pad[1];
                                    const double* yr = yc + (od * g.out[1] + oh) * g.out[2] + w_lo;
                                    const double* xr =
                                        xc + (id * g.in[1] + ih) * g.in[2] + w_lo * g.stride[2] + kw - g.pad[2];
                                    acc += dot_strided(yr, xr, len, g.stride[2]);
                                }
                            }
                        }
                        wk[(kd * g.k[1] + kh) * g.k[2] + kw] += acc;
                    }
                }
            }
        }
}

inline Int3 spatial3(const Tensor& t) {
    if (t.rank() == 5) return {t.dim(2), t.dim(3), t.dim(4)};
    if (t.rank() == 4) return {1, t.dim(2), t.dim(3)};
    throw ShapeError("expected a rank-4 or rank-5 tensor, got " + shape_str(t.shape()));
}

inline Int3 kernel3(const Tensor& w) {
    if (w.rank() == 5) return {w.dim(2), w.dim(3), w.dim(4)};
    if (w.rank() == 4) return {1, w.dim(2), w.dim(3)};
    throw ShapeError("expected a rank-4 or rank-5 kernel, got " + shape_str(w.shape()));
}

inline Shape with_spatial(std::size_t n, std::size_t c, const Int3& sp, std::size_t rank) {
    if (rank == 5) return {n, c, sp[0], sp[1], sp[2]};
    return {n, c, sp[1], sp[2]};
}

inline void add_bias(double* y, const double* b, std::size_t n, std::size_t c, std::size_t sp) {
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            double* r = y + (i * c + j) * sp;
            for (std::size_t k = 0; k < sp; ++k) r[k] += b[j];
        }
}

inline void bias_grad(const double* gy, double* gb, std::size_t n, std::size_t c, std::size_t sp) {
    for (std::size_t j = 0; j < c; ++j) {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double* r = gy + (i * c + j) * sp;
            for (std::size_t k = 0; k < sp; ++k) s += r[k];
        }
        gb[j] += s;
    }
}

} // namespace detail

/// Cross-correlation. input [N, Ci, (D,) H, W], weight [Co, Ci, (kd,) kh, kw], bias [Co] or undefined.
/// Output extent per axis: floor((in + 2 pad - k) / stride) + 1.
inline Tensor conv(const Tensor& x, const Tensor& w, const Tensor& b, Int3 stride, Int3 pad) {
    if (x.rank() != w.rank() || (x.rank() != 4 && x.rank() != 5))
        throw ShapeError("conv: input " + shape_str(x.shape()) + " and weight " + shape_str(w.shape()));
    if (w.dim(1) != x.dim(1))
        throw ShapeError("conv: weight expects " + std::to_string(w.dim(1)) + " input channels, got " +
                         std::to_string(x.dim(1)));
    if (b.defined() && (b.rank() != 1 || b.dim(0) != w.dim(0))) throw ShapeError("conv: bias shape");
    ConvGeometry g;
    g.batch = x.dim(0);
    g.c_in = x.dim(1);
    g.c_out = w.dim(0);
    g.in = detail::spatial3(x);
    g.k = detail::kernel3(w);
    g.stride = stride;
    g.pad = pad;
    for (int i = 0; i < 3; ++i) {
        if (stride[i] == 0) throw ShapeError("conv: zero stride");
        const long span = long(g.in[i]) + 2 * long(pad[i]) - long(g.k[i]);
        if (span < 0) throw ShapeError("conv: kernel larger than padded input");
        g.out[i] = std::size_t(span) / stride[i] + 1;
    }
    const std::size_t out_sp = g.out[0] * g.out[1] * g.out[2];
    std::vector<double> y(g.batch * g.c_out * out_sp, 0.0);
    detail::conv_forward(g, x.data().data(), w.data().data(), y.data());
    if (b.defined()) detail::add_bias(y.data(), b.data().data(), g.batch, g.c_out, out_sp);
    Node *px = x.node(), *pw = w.node(), *pb = b.defined() ? b.node() : nullptr;
    return detail::make_result(detail::with_spatial(g.batch, g.c_out, g.out, x.rank()), std::move(y),
                               {&x, &w, b.defined() ? &b : &x}, [=](Node& o) {
                                   if (px->requires_grad)
                                       detail::conv_backward_input(g, o.grad.data(), pw->value.data(), px->grad.data());
                                   if (pw->requires_grad)
                                       detail::conv_backward_weight(g, o.grad.data(), px->value.data(), pw->grad.data());
                                   if (pb && pb->requires_grad)
                                       detail::bias_grad(o.grad.data(), pb->grad.data(), g.batch, g.c_out, out_sp);
                               });
}

/// Transposed convolution (adjoint of conv w.r.t. its input).
/// input [N, Ci, ...], weight [Ci, Co, k...], bias [Co]; extent (in - 1) * stride - 2 pad + k.
inline Tensor conv_transpose(const Tensor& x, const Tensor& w, const Tensor& b, Int3 stride, Int3 pad) {
    if (x.rank() != w.rank() || (x.rank() != 4 && x.rank() != 5))
        throw ShapeError("conv_transpose: input " + shape_str(x.shape()) + " and weight " + shape_str(w.shape()));
    if (w.dim(0) != x.dim(1))
        throw ShapeError("conv_transpose: weight expects " + std::to_string(w.dim(0)) + " input channels, got " +
                         std::to_string(x.dim(1)));
    if (b.defined() && (b.rank() != 1 || b.dim(0) != w.dim(1))) throw ShapeError("conv_transpose: bias shape");
    // Express as the adjoint of a conv whose "input" is the large output tensor.
    ConvGeometry g;
    g.batch = x.dim(0);
    g.c_out = x.dim(1); // small side
    g.c_in = w.dim(1);  // large side
    g.out = detail::spatial3(x);
    g.k = detail::kernel3(w);
    g.stride = stride;
    g.pad = pad;
    for (int i = 0; i < 3; ++i) {
        if (stride[i] == 0) throw ShapeError("conv_transpose: zero stride");
        const long ext = (long(g.out[i]) - 1) * long(stride[i]) - 2 * long(pad[i]) + long(g.k[i]);
        if (ext <= 0) throw ShapeError("conv_transpose: non-positive output extent");
        g.in[i] = std::size_t(ext);
    }
    const std::size_t big_sp = g.in[0] * g.in[1] * g.in[2];
    std::vector<double> y(g.batch * g.c_in * big_sp, 0.0);
    detail::conv_backward_input(g, x.data().data(), w.data().data(), y.data());
    if (b.defined()) detail::add_bias(y.data(), b.data().data(), g.batch, g.c_in, big_sp);
    Node *px = x.node(), *pw = w.node(), *pb = b.defined() ? b.node() : nullptr;
    return detail::make_result(detail::with_spatial(g.batch, g.c_in, g.in, x.rank()), std::move(y),
                               {&x, &w, b.defined() ? &b : &x}, [=](Node& o) {
                                   if (px->requires_grad)
                                       detail::conv_forward(g, o.grad.data(), pw->value.data(), px->grad.data());
                                   if (pw->requires_grad)
                                       detail::conv_backward_weight(g, px->value.data(), o.grad.data(), pw->grad.data());
                                   if (pb && pb->requires_grad)
                                       detail::bias_grad(o.grad.data(), pb->grad.data(), g.batch, g.c_in, big_sp);
                               });
}

inline Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride = 1, std::size_t pad = 0) {
    if (x.rank() != 5) throw ShapeError("conv3d expects [N, C, D, H, W], got " + shape_str(x.shape()));
    return conv(x, w, b, {stride, stride, stride}, {pad, pad, pad});
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride = 1, std::size_t pad = 0) {
    if (x.rank() != 4) throw ShapeError("conv2d expects [N, C, H, W], got " + shape_str(x.shape()));
    return conv(x, w, b, {1, stride, stride}, {0, pad, pad});
}

inline Tensor conv_transpose3d(const Tensor& x, const Tensor& w, const Tensor& b, Int3 stride, Int3 pad = {0, 0, 0}) {
    if (x.rank() != 5) throw ShapeError("conv_transpose3d expects [N, C, D, H, W]");
    return conv_transpose(x, w, b, stride, pad);
}

inline Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                               std::size_t pad = 0) {
    if (x.rank() != 4) throw ShapeError("conv_transpose2d expects [N, C, H, W]");
    return conv_transpose(x, w, b, {1, stride, stride}, {0, pad, pad});
}

/// Group normalization over (channels-in-group x spatial), then per-channel affine.
inline Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    if (x.rank() < 2) throw ShapeError("group_norm expects [N, C, ...]");
    const std::size_t n = x.dim(0), c = x.dim(1);
    if (groups == 0 || c % groups != 0)
        throw ShapeError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                         std::to_string(groups) + " groups");
    if (gamma.size() != c || beta.size() != c) throw ShapeError("group_norm: affine parameter size");
    const std::size_t sp = x.size() / (n * c), cg = c / groups, m = cg * sp;
    std::vector<double> y(x.size()), xhat(x.size()), inv_std(n * groups);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t off = (i * c + gi * cg) * sp;
            double mu = 0;
            for (std::size_t k = 0; k < m; ++k) mu += x.data()[off + k];
            mu /= double(m);
            double var = 0;
            for (std::size_t k = 0; k < m; ++k) {
                const double d = x.data()[off + k] - mu;
                var += d * d;
            }
            var /= double(m);
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[i * groups + gi] = is;
            for (std::size_t k = 0; k < m; ++k) {
                const std::size_t ch = gi * cg + k / sp;
                const double h = (x.data()[off + k] - mu) * is;
                xhat[off + k] = h;
                y[off + k] = gamma.data()[ch] * h + beta.data()[ch];
            }
        }
    Node *px = x.node(), *pg = gamma.node(), *pb = beta.node();
    return detail::make_result(x.shape(), std::move(y), {&x, &gamma, &beta},
                               [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& o) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t gi = 0; gi < groups; ++gi) {
                const std::size_t off = (i * c + gi * cg) * sp;
                double mean_d = 0, mean_dx = 0;
                for (std::size_t k = 0; k < m; ++k) {
                    const std::size_t ch = gi * cg + k / sp;
                    const double g = o.grad[off + k];
                    if (pg->requires_grad) pg->grad[ch] += g * xhat[off + k];
                    if (pb->requires_grad) pb->grad[ch] += g;
                    const double d = g * pg->value[ch];
                    mean_d += d;
                    mean_dx += d * xhat[off + k];
                }
                if (!px->requires_grad) continue;
                mean_d /= double(m);
                mean_dx /= double(m);
                const double is = inv_std[i * groups + gi];
                for (std::size_t k = 0; k < m; ++k) {
                    const std::size_t ch = gi * cg + k / sp;
                    const double d = o.grad[off + k] * pg->value[ch];
                    px->grad[off + k] += is * (d - mean_d - xhat[off + k] * mean_dx);
                }
            }
    });
}

} // namespace axon::nn
