#pragma once
//
// Minimal reverse-mode automatic differentiation over dense f64 tensors.
//
// A Tensor is a handle to a graph node. Operations on tensors that require
// gradients record their parents and a backward closure; backward() walks the
// graph in reverse topological order and accumulates into every reachable
// node's grad buffer. Leaves created with requires_grad (parameters) keep
// their accumulated gradient until zero_grad().
//

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "axon/error.hpp"

namespace axon::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
} // namespace detail

/// Disables graph recording in its scope (inference / sampling).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
        : node_(std::make_shared<Node>()) {
        for (auto e : shape)
            if (e == 0) throw ShapeError("tensor extents must be positive: " + shape_str(shape));
        node_->value.assign(numel(shape), fill);
        node_->shape = std::move(shape);
        node_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : node_(std::make_shared<Node>()) {
        if (data.size() != numel(shape))
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        for (auto e : shape)
            if (e == 0) throw ShapeError("tensor extents must be positive: " + shape_str(shape));
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor scalar(double v, bool requires_grad = false) { return Tensor({1}, v, requires_grad); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }

    std::span<double> data() { return node_->value; }
    std::span<const double> data() const { return node_->value; }
    double item() const { return node_->value.at(0); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool r) { node_->requires_grad = r; }
    bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->value.empty(); }
    std::span<double> grad() { return node_->grad; }
    std::span<const double> grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

    /// Detached copy of the values (no graph, no grad).
    Tensor detach() const { return Tensor(shape(), node_->value, false); }

    /// Reverse pass from this tensor with an upstream gradient of ones (scalars) or `seed`.
    void backward(std::span<const double> seed = {}) const;

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

/// Creates the result node; records parents when any requires grad and grad mode is on.
inline Tensor make_result(Shape shape, std::vector<double> value,
                          std::initializer_list<const Tensor*> inputs,
                          std::function<void(Node&)> backward) {
    Tensor out(std::move(shape), std::move(value), false);
    if (!grad_mode()) return out;
    bool any = false;
    for (const Tensor* t : inputs) any = any || t->requires_grad();
    if (!any) return out;
    Node* n = out.node();
    n->requires_grad = true;
    for (const Tensor* t : inputs) n->parents.push_back(t->node_ptr());
    n->backward = std::move(backward);
    return out;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

} // namespace detail

inline void Tensor::backward(std::span<const double> seed) const {
    if (!node_->requires_grad) throw DomainError("backward on a tensor that does not require grad");
    // Iterative post-order DFS for a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node* p = n->parents[i++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (Node* n : order) n->ensure_grad();
    if (seed.empty()) {
        for (auto& g : node_->grad) g += 1.0;
    } else {
        if (seed.size() != node_->value.size()) throw ShapeError("backward seed length mismatch");
        for (std::size_t i = 0; i < seed.size(); ++i) node_->grad[i] += seed[i];
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward) (*it)->backward(**it);
}

// ---------------------------------------------------------------------------
// Elementwise and structural operations.

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
    Node *pa = a.node(), *pb = b.node();
    return detail::make_result(a.shape(), std::move(v), {&a, &b}, [pa, pb](Node& o) {
        for (Node* p : {pa, pb})
            if (p->requires_grad)
                for (std::size_t i = 0; i < o.grad.size(); ++i) p->grad[i] += o.grad[i];
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
    Node *pa = a.node(), *pb = b.node();
    return detail::make_result(a.shape(), std::move(v), {&a, &b}, [pa, pb](Node& o) {
        if (pa->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) pa->grad[i] += o.grad[i];
        if (pb->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) pb->grad[i] -= o.grad[i];
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
    Node *pa = a.node(), *pb = b.node();
    return detail::make_result(a.shape(), std::move(v), {&a, &b}, [pa, pb](Node& o) {
        if (pa->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) pa->grad[i] += o.grad[i] * pb->value[i];
        if (pb->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) pb->grad[i] += o.grad[i] * pa->value[i];
    });
}

/// sa * a + sb * b
inline Tensor lincomb(const Tensor& a, double sa, const Tensor& b, double sb) {
    detail::require_same_shape(a, b, "lincomb");
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = sa * a.data()[i] + sb * b.data()[i];
    Node *pa = a.node(), *pb = b.node();
    return detail::make_result(a.shape(), std::move(v), {&a, &b}, [pa, pb, sa, sb](Node& o) {
        if (pa->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) pa->grad[i] += sa * o.grad[i];
        if (pb->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) pb->grad[i] += sb * o.grad[i];
    });
}

/// s * a + c
inline Tensor affine(const Tensor& a, double s, double c = 0.0) {
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = s * a.data()[i] + c;
    Node* pa = a.node();
    return detail::make_result(a.shape(), std::move(v), {&a}, [pa, s](Node& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) pa->grad[i] += s * o.grad[i];
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] > 0 ? a.data()[i] : 0.0;
    Node* pa = a.node();
    return detail::make_result(a.shape(), std::move(v), {&a}, [pa](Node& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            if (pa->value[i] > 0) pa->grad[i] += o.grad[i];
    });
}

inline Tensor silu(const Tensor& a) {
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double x = a.data()[i];
        v[i] = x / (1.0 + std::exp(-x));
    }
    Node* pa = a.node();
    return detail::make_result(a.shape(), std::move(v), {&a}, [pa](Node& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            const double x = pa->value[i];
            const double s = 1.0 / (1.0 + std::exp(-x));
            pa->grad[i] += o.grad[i] * s * (1.0 + x * (1.0 - s));
        }
    });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size())
        throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
    std::vector<double> v(a.data().begin(), a.data().end());
    Node* pa = a.node();
    return detail::make_result(std::move(shape), std::move(v), {&a}, [pa](Node& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) pa->grad[i] += o.grad[i];
    });
}

/// Axis permutation: out.shape[i] = in.shape[perm[i]].
inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
    const auto& in = a.shape();
    const std::size_t r = in.size();
    if (perm.size() != r) throw ShapeError("permute: rank mismatch");
    std::vector<bool> used(r, false);
    for (auto p : perm) {
        if (p >= r || used[p]) throw ShapeError("permute: invalid permutation");
        used[p] = true;
    }
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) out[i] = in[perm[i]];
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r - 1; i > 0; --i) in_stride[i - 1] = in_stride[i] * in[i];
    // map[k] = input flat index of output flat index k
    std::vector<std::size_t> map(a.size());
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t k = 0; k < map.size(); ++k) {
        std::size_t src = 0;
        for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_stride[perm[i]];
        map[k] = src;
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < out[i]) break;
            idx[i] = 0;
        }
    }
    std::vector<double> v(a.size());
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = a.data()[map[k]];
    Node* pa = a.node();
    return detail::make_result(std::move(out), std::move(v), {&a}, [pa, map = std::move(map)](Node& o) {
        for (std::size_t k = 0; k < o.grad.size(); ++k) pa->grad[map[k]] += o.grad[k];
    });
}

/// Concatenates along axis 1 (channels) of [N, C, ...] tensors.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || a.rank() != b.rank() || a.dim(0) != b.dim(0))
        throw ShapeError("concat_channels: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    for (std::size_t i = 2; i < a.rank(); ++i)
        if (a.dim(i) != b.dim(i)) throw ShapeError("concat_channels: spatial extents differ");
    const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    const std::size_t sp = a.size() / (n * ca);
    Shape shape = a.shape();
    shape[1] = ca + cb;
    std::vector<double> v(a.size() + b.size());
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.data().begin() + std::ptrdiff_t(i * ca * sp), ca * sp,
                    v.begin() + std::ptrdiff_t(i * (ca + cb) * sp));
        std::copy_n(b.data().begin() + std::ptrdiff_t(i * cb * sp), cb * sp,
                    v.begin() + std::ptrdiff_t((i * (ca + cb) + ca) * sp));
    }
    Node *pa = a.node(), *pb = b.node();
    return detail::make_result(std::move(shape), std::move(v), {&a, &b}, [=](Node& o) {
        for (std::size_t i = 0; i < n; ++i) {
            if (pa->requires_grad)
                for (std::size_t k = 0; k < ca * sp; ++k) pa->grad[i * ca * sp + k] += o.grad[i * (ca + cb) * sp + k];
            if (pb->requires_grad)
                for (std::size_t k = 0; k < cb * sp; ++k)
                    pb->grad[i * cb * sp + k] += o.grad[(i * (ca + cb) + ca) * sp + k];
        }
    });
}

/// Channels [begin, begin + count) of an [N, C, ...] tensor.
inline Tensor slice_channels(const Tensor& a, std::size_t begin, std::size_t count) {
    if (a.rank() < 2 || count == 0 || begin + count > a.dim(1)) throw ShapeError("slice_channels out of range");
    const std::size_t n = a.dim(0), c = a.dim(1), sp = a.size() / (n * c);
    Shape shape = a.shape();
    shape[1] = count;
    std::vector<double> v(n * count * sp);
    for (std::size_t i = 0; i < n; ++i)
        std::copy_n(a.data().begin() + std::ptrdiff_t((i * c + begin) * sp), count * sp,
                    v.begin() + std::ptrdiff_t(i * count * sp));
    Node* pa = a.node();
    return detail::make_result(std::move(shape), std::move(v), {&a}, [=](Node& o) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < count * sp; ++k) pa->grad[(i * c + begin) * sp + k] += o.grad[i * count * sp + k];
    });
}

/// Concatenates along axis 0 (batch).
inline Tensor concat_batch(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_batch of nothing");
    Shape shape = parts[0].shape();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != shape.size()) throw ShapeError("concat_batch rank mismatch");
        for (std::size_t i = 1; i < shape.size(); ++i)
            if (p.dim(i) != shape[i]) throw ShapeError("concat_batch extent mismatch");
        total += p.dim(0);
    }
    shape[0] = total;
    std::vector<double> v;
    v.reserve(numel(shape));
    for (const auto& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
    Tensor out(std::move(shape), std::move(v), false);
    if (!detail::grad_mode()) return out;
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (!any) return out;
    Node* n = out.node();
    n->requires_grad = true;
    std::vector<Node*> raw;
    for (const auto& p : parts) {
        n->parents.push_back(p.node_ptr());
        raw.push_back(p.node());
    }
    n->backward = [raw](Node& o) {
        std::size_t off = 0;
        for (Node* p : raw) {
            if (p->requires_grad)
                for (std::size_t k = 0; k < p->value.size(); ++k) p->grad[k] += o.grad[off + k];
            off += p->value.size();
        }
    };
    return out;
}

/// x [N, C, ...] + v [N, C] broadcast over the trailing (spatial) axes.
inline Tensor add_channelwise(const Tensor& x, const Tensor& v) {
    if (x.rank() < 2 || v.rank() != 2 || v.dim(0) != x.dim(0) || v.dim(1) != x.dim(1))
        throw ShapeError("add_channelwise: " + shape_str(x.shape()) + " + " + shape_str(v.shape()));
    const std::size_t nc = x.dim(0) * x.dim(1), sp = x.size() / nc;
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::size_t c = 0; c < nc; ++c)
        for (std::size_t k = 0; k < sp; ++k) out[c * sp + k] += v.data()[c];
    Node *px = x.node(), *pv = v.node();
    return detail::make_result(x.shape(), std::move(out), {&x, &v}, [=](Node& o) {
        if (px->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) px->grad[i] += o.grad[i];
        if (pv->requires_grad)
            for (std::size_t c = 0; c < nc; ++c) {
                double s = 0;
                for (std::size_t k = 0; k < sp; ++k) s += o.grad[c * sp + k];
                pv->grad[c] += s;
            }
    });
}

/// x [N, in] * W^T + b, W [out, in], b [out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || w.dim(1) != x.dim(1) || b.dim(0) != w.dim(0))
        throw ShapeError("linear: " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
    const std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
    std::vector<double> v(n * out);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < out; ++o) {
            double s = b.data()[o];
            for (std::size_t k = 0; k < in; ++k) s += w.data()[o * in + k] * x.data()[i * in + k];
            v[i * out + o] = s;
        }
    Node *px = x.node(), *pw = w.node(), *pb = b.node();
    return detail::make_result({n, out}, std::move(v), {&x, &w, &b}, [=](Node& o) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < out; ++j) {
                const double g = o.grad[i * out + j];
                if (pb->requires_grad) pb->grad[j] += g;
                for (std::size_t k = 0; k < in; ++k) {
                    if (pw->requires_grad) pw->grad[j * in + k] += g * px->value[i * in + k];
                    if (px->requires_grad) px->grad[i * in + k] += g * pw->value[j * in + k];
                }
            }
    });
}

inline Tensor sum(const Tensor& a) {
    double s = 0;
    for (double x : a.data()) s += x;
    Node* pa = a.node();
    return detail::make_result({1}, {s}, {&a}, [pa](Node& o) {
        for (auto& g : pa->grad) g += o.grad[0];
    });
}

inline Tensor mean(const Tensor& a) { return affine(sum(a), 1.0 / double(a.size())); }

/// mean((a - b)^2)
inline Tensor mse_loss(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mse_loss");
    const double inv = 1.0 / double(a.size());
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    Node *pa = a.node(), *pb = b.node();
    return detail::make_result({1}, {s * inv}, {&a, &b}, [=](Node& o) {
        const double g = o.grad[0] * 2.0 * inv;
        for (std::size_t i = 0; i < pa->value.size(); ++i) {
            const double d = g * (pa->value[i] - pb->value[i]);
            if (pa->requires_grad) pa->grad[i] += d;
            if (pb->requires_grad) pb->grad[i] -= d;
        }
    });
}

/// mean(|a - b|); the subgradient at 0 is 0.
inline Tensor l1_loss(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "l1_loss");
    const double inv = 1.0 / double(a.size());
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a.data()[i] - b.data()[i]);
    Node *pa = a.node(), *pb = b.node();
    return detail::make_result({1}, {s * inv}, {&a, &b}, [=](Node& o) {
        const double g = o.grad[0] * inv;
        for (std::size_t i = 0; i < pa->value.size(); ++i) {
            const double d = pa->value[i] - pb->value[i];
            const double sg = d > 0 ? g : (d < 0 ? -g : 0.0);
            if (pa->requires_grad) pa->grad[i] += sg;
            if (pb->requires_grad) pb->grad[i] -= sg;
        }
    });
}

/// Sinusoidal embedding [N, dim] of timesteps: interleaved (sin(t w_i), cos(t w_i)) with
/// w_i geometric from 1 down to 1/10000. Not differentiable (timesteps are data).
inline Tensor time_embedding(std::span<const double> t, std::size_t dim) {
    if (dim < 2 || dim % 2 != 0) throw ShapeError("time embedding dim must be even and >= 2");
    if (t.empty()) throw ShapeError("time embedding needs at least one timestep");
    const std::size_t half = dim / 2;
    std::vector<double> v(t.size() * dim);
    for (std::size_t n = 0; n < t.size(); ++n)
        for (std::size_t i = 0; i < half; ++i) {
            const double w = half == 1 ? 1.0 : std::pow(1e-4, double(i) / double(half - 1));
            v[n * dim + 2 * i] = std::sin(t[n] * w);
            v[n * dim + 2 * i + 1] = std::cos(t[n] * w);
        }
    return Tensor({t.size(), dim}, std::move(v));
}

} // namespace axon::nn
