#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "qa/tape.hpp"

namespace qa {

namespace detail {

inline int normalize_axis(int axis, int rank) {
    int a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    return a;
}

// Splits a shape at `axis` into (outer, len, inner) extents.
inline void axis_split(const Shape& s, int axis, std::int64_t& outer, std::int64_t& len, std::int64_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
    len = s[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

// Accumulates `g` (shape of `big`) into the gradient of node `id` whose shape
// is a suffix of big's; leading extents are summed out by flat-index modulo.
template <typename T>
void accum_suffix(Tape<T>& tp, int id, const DenseArray<T>& g) {
    if (!tp.wants_grad(id)) return;
    DenseArray<T>& buf = tp.grad_buf(id);
    const std::int64_t n = buf.numel();
    for (std::int64_t i = 0; i < g.numel(); ++i) buf[i % n] += g[i];
}

template <typename T>
void check_suffix_operands(const DenseArray<T>& a, const DenseArray<T>& b, const char* op) {
    if (!is_suffix_shape(b.shape, a.shape)) {
        throw ShapeError(std::string(op) + ": shape " + shape_str(b.shape) + " is not broadcastable into " + shape_str(a.shape));
    }
}

}  // namespace detail

// ---- elementwise binary (b may be a trailing-shape broadcast of a) ----

template <typename T>
Node<T> add(Node<T> a, Node<T> b) {
    Tape<T>& tp = same_tape(a, b);
    const DenseArray<T>& av = a.value();
    const DenseArray<T>& bv = b.value();
    detail::check_suffix_operands(av, bv, "add");
    DenseArray<T> out(av.shape);
    const std::int64_t nb = bv.numel();
    for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i % nb];
    Node<T> o = tp.leaf(std::move(out), a.requires_grad() || b.requires_grad());
    if (o.requires_grad()) {
        int aid = a.id, bid = b.id, oid = o.id;
        tp.record([aid, bid, oid](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go) return;
            t.accum(aid, *go);
            detail::accum_suffix(t, bid, *go);
        });
    }
    return o;
}

template <typename T>
Node<T> sub(Node<T> a, Node<T> b) {
    Tape<T>& tp = same_tape(a, b);
    const DenseArray<T>& av = a.value();
    const DenseArray<T>& bv = b.value();
    detail::check_suffix_operands(av, bv, "sub");
    DenseArray<T> out(av.shape);
    const std::int64_t nb = bv.numel();
    for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] - bv[i % nb];
    Node<T> o = tp.leaf(std::move(out), a.requires_grad() || b.requires_grad());
    if (o.requires_grad()) {
        int aid = a.id, bid = b.id, oid = o.id;
        tp.record([aid, bid, oid](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go) return;
            t.accum(aid, *go);
            if (t.wants_grad(bid)) {
                DenseArray<T>& buf = t.grad_buf(bid);
                const std::int64_t n = buf.numel();
                for (std::int64_t i = 0; i < go->numel(); ++i) buf[i % n] -= (*go)[i];
            }
        });
    }
    return o;
}

template <typename T>
Node<T> mul(Node<T> a, Node<T> b) {
    Tape<T>& tp = same_tape(a, b);
    const DenseArray<T>& av = a.value();
    const DenseArray<T>& bv = b.value();
    detail::check_suffix_operands(av, bv, "mul");
    DenseArray<T> out(av.shape);
    const std::int64_t nb = bv.numel();
    for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] * bv[i % nb];
    Node<T> o = tp.leaf(std::move(out), a.requires_grad() || b.requires_grad());
    if (o.requires_grad()) {
        int aid = a.id, bid = b.id, oid = o.id;
        tp.record([aid, bid, oid](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go) return;
            const DenseArray<T>& av2 = t.value(aid);
            const DenseArray<T>& bv2 = t.value(bid);
            const std::int64_t n2 = bv2.numel();
            if (t.wants_grad(aid)) {
                DenseArray<T>& buf = t.grad_buf(aid);
                for (std::int64_t i = 0; i < go->numel(); ++i) buf[i] += (*go)[i] * bv2[i % n2];
            }
            if (t.wants_grad(bid)) {
                DenseArray<T>& buf = t.grad_buf(bid);
                for (std::int64_t i = 0; i < go->numel(); ++i) buf[i % n2] += (*go)[i] * av2[i];
            }
        });
    }
    return o;
}

template <typename T>
Node<T> scale(Node<T> a, T c) {
    Tape<T>& tp = *a.tape;
    DenseArray<T> out(a.shape());
    const DenseArray<T>& av = a.value();
    for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] * c;
    Node<T> o = tp.leaf(std::move(out), a.requires_grad());
    if (o.requires_grad()) {
        int aid = a.id, oid = o.id;
        tp.record([aid, oid, c](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go || !t.wants_grad(aid)) return;
            DenseArray<T>& buf = t.grad_buf(aid);
            for (std::int64_t i = 0; i < go->numel(); ++i) buf[i] += (*go)[i] * c;
        });
    }
    return o;
}

template <typename T>
Node<T> add_scalar(Node<T> a, T c) {
    Tape<T>& tp = *a.tape;
    DenseArray<T> out(a.shape());
    const DenseArray<T>& av = a.value();
    for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] + c;
    Node<T> o = tp.leaf(std::move(out), a.requires_grad());
    if (o.requires_grad()) {
        int aid = a.id, oid = o.id;
        tp.record([aid, oid](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (go) t.accum(aid, *go);
        });
    }
    return o;
}

// ---- unary math ----

namespace detail {

template <typename T, typename FwdFn, typename BwdFn>
Node<T> unary_op(Node<T> a, FwdFn fwd, BwdFn dfdx) {
    Tape<T>& tp = *a.tape;
    const DenseArray<T>& av = a.value();
    DenseArray<T> out(av.shape);
    for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = fwd(av[i]);
    Node<T> o = tp.leaf(std::move(out), a.requires_grad());
    if (o.requires_grad()) {
        int aid = a.id, oid = o.id;
        tp.record([aid, oid, dfdx](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go || !t.wants_grad(aid)) return;
            const DenseArray<T>& x = t.value(aid);
            DenseArray<T>& buf = t.grad_buf(aid);
            for (std::int64_t i = 0; i < go->numel(); ++i) buf[i] += (*go)[i] * dfdx(x[i]);
        });
    }
    return o;
}

}  // namespace detail

template <typename T>
Node<T> leaky_relu(Node<T> a, T slope) {
    return detail::unary_op(
        a, [slope](T x) { return x > T(0) ? x : slope * x; }, [slope](T x) { return x > T(0) ? T(1) : slope; });
}

template <typename T>
Node<T> gelu(Node<T> a) {
    // Exact form x * Phi(x).
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    return detail::unary_op(
        a,
        [](T x) {
            double xd = static_cast<double>(x);
            return static_cast<T>(0.5 * xd * (1.0 + std::erf(xd * inv_sqrt2)));
        },
        [](T x) {
            double xd = static_cast<double>(x);
            double phi = 0.5 * (1.0 + std::erf(xd * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * xd * xd);
            return static_cast<T>(phi + xd * pdf);
        });
}

template <typename T>
Node<T> sin_op(Node<T> a) {
    return detail::unary_op(
        a, [](T x) { return static_cast<T>(std::sin(static_cast<double>(x))); },
        [](T x) { return static_cast<T>(std::cos(static_cast<double>(x))); });
}

template <typename T>
Node<T> cos_op(Node<T> a) {
    return detail::unary_op(
        a, [](T x) { return static_cast<T>(std::cos(static_cast<double>(x))); },
        [](T x) { return static_cast<T>(-std::sin(static_cast<double>(x))); });
}

template <typename T>
Node<T> reciprocal(Node<T> a) {
    return detail::unary_op(
        a, [](T x) { return T(1) / x; },
        [](T x) {
            T r = T(1) / x;
            return -r * r;
        });
}

// 1 / clamp(z): |z| below eps is replaced by sign(z)*eps (sign(0) = +1) and the
// derivative is taken through the clamped value, so gradients stay finite near
// the projective singularity.
template <typename T>
Node<T> clamped_reciprocal(Node<T> a, T eps) {
    auto clamp = [eps](T z) {
        if (z >= eps || z <= -eps) return z;
        return z >= T(0) ? eps : -eps;
    };
    return detail::unary_op(
        a, [clamp](T z) { return T(1) / clamp(z); },
        [clamp](T z) {
            T r = T(1) / clamp(z);
            return -r * r;
        });
}

// ---- reductions / normalization ----

template <typename T>
Node<T> sum_all(Node<T> a) {
    Tape<T>& tp = *a.tape;
    const DenseArray<T>& av = a.value();
    T s = T(0);
    for (std::int64_t i = 0; i < av.numel(); ++i) s += av[i];
    Node<T> o = tp.leaf(DenseArray<T>::scalar(s), a.requires_grad());
    if (o.requires_grad()) {
        int aid = a.id, oid = o.id;
        tp.record([aid, oid](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go || !t.wants_grad(aid)) return;
            DenseArray<T>& buf = t.grad_buf(aid);
            const T g = (*go)[0];
            for (std::int64_t i = 0; i < buf.numel(); ++i) buf[i] += g;
        });
    }
    return o;
}

template <typename T>
Node<T> mean_axis(Node<T> a, int axis) {
    Tape<T>& tp = *a.tape;
    const DenseArray<T>& av = a.value();
    const int ax = detail::normalize_axis(axis, av.rank());
    std::int64_t outer, len, inner;
    detail::axis_split(av.shape, ax, outer, len, inner);
    Shape os;
    for (int i = 0; i < av.rank(); ++i) {
        if (i != ax) os.push_back(av.shape[static_cast<std::size_t>(i)]);
    }
    if (os.empty()) os.push_back(1);
    DenseArray<T> out(os);
    const T invn = T(1) / static_cast<T>(len);
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            T s = T(0);
            for (std::int64_t l = 0; l < len; ++l) s += av[(o * len + l) * inner + in];
            out[o * inner + in] = s * invn;
        }
    }
    Node<T> onode = tp.leaf(std::move(out), a.requires_grad());
    if (onode.requires_grad()) {
        int aid = a.id, oid = onode.id;
        tp.record([aid, oid, outer, len, inner, invn](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go || !t.wants_grad(aid)) return;
            DenseArray<T>& buf = t.grad_buf(aid);
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const T g = (*go)[o * inner + in] * invn;
                    for (std::int64_t l = 0; l < len; ++l) buf[(o * len + l) * inner + in] += g;
                }
            }
        });
    }
    return onode;
}

template <typename T>
Node<T> softmax(Node<T> a, int axis) {
    Tape<T>& tp = *a.tape;
    const DenseArray<T>& av = a.value();
    const int ax = detail::normalize_axis(axis, av.rank());
    std::int64_t outer, len, inner;
    detail::axis_split(av.shape, ax, outer, len, inner);
    DenseArray<T> out(av.shape);
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            T m = av[(o * len) * inner + in];
            for (std::int64_t l = 1; l < len; ++l) m = std::max(m, av[(o * len + l) * inner + in]);
            T s = T(0);
            for (std::int64_t l = 0; l < len; ++l) {
                T e = static_cast<T>(std::exp(static_cast<double>(av[(o * len + l) * inner + in] - m)));
                out[(o * len + l) * inner + in] = e;
                s += e;
            }
            const T invs = T(1) / s;
            for (std::int64_t l = 0; l < len; ++l) out[(o * len + l) * inner + in] *= invs;
        }
    }
    Node<T> onode = tp.leaf(std::move(out), a.requires_grad());
    if (onode.requires_grad()) {
        int aid = a.id, oid = onode.id;
        tp.record([aid, oid, outer, len, inner](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go || !t.wants_grad(aid)) return;
            const DenseArray<T>& y = t.value(oid);
            DenseArray<T>& buf = t.grad_buf(aid);
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    T dot = T(0);
                    for (std::int64_t l = 0; l < len; ++l) {
                        const std::int64_t ix = (o * len + l) * inner + in;
                        dot += (*go)[ix] * y[ix];
                    }
                    for (std::int64_t l = 0; l < len; ++l) {
                        const std::int64_t ix = (o * len + l) * inner + in;
                        buf[ix] += y[ix] * ((*go)[ix] - dot);
                    }
                }
            }
        });
    }
    return onode;
}

// Normalizes the last axis to zero mean / unit variance; no affine terms.
template <typename T>
Node<T> layer_norm(Node<T> a, T eps) {
    Tape<T>& tp = *a.tape;
    const DenseArray<T>& av = a.value();
    const std::int64_t len = av.shape.back();
    const std::int64_t rows = av.numel() / len;
    DenseArray<T> out(av.shape);
    std::vector<T> inv_std(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const std::int64_t base = r * len;
        T mu = T(0);
        for (std::int64_t l = 0; l < len; ++l) mu += av[base + l];
        mu /= static_cast<T>(len);
        T var = T(0);
        for (std::int64_t l = 0; l < len; ++l) {
            const T d = av[base + l] - mu;
            var += d * d;
        }
        var /= static_cast<T>(len);
        const T is = T(1) / static_cast<T>(std::sqrt(static_cast<double>(var + eps)));
        inv_std[static_cast<std::size_t>(r)] = is;
        for (std::int64_t l = 0; l < len; ++l) out[base + l] = (av[base + l] - mu) * is;
    }
    Node<T> onode = tp.leaf(std::move(out), a.requires_grad());
    if (onode.requires_grad()) {
        int aid = a.id, oid = onode.id;
        tp.record([aid, oid, rows, len, inv_std = std::move(inv_std)](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go || !t.wants_grad(aid)) return;
            const DenseArray<T>& y = t.value(oid);
            DenseArray<T>& buf = t.grad_buf(aid);
            for (std::int64_t r = 0; r < rows; ++r) {
                const std::int64_t base = r * len;
                T mean_dy = T(0), mean_dyy = T(0);
                for (std::int64_t l = 0; l < len; ++l) {
                    mean_dy += (*go)[base + l];
                    mean_dyy += (*go)[base + l] * y[base + l];
                }
                mean_dy /= static_cast<T>(len);
                mean_dyy /= static_cast<T>(len);
                const T is = inv_std[static_cast<std::size_t>(r)];
                for (std::int64_t l = 0; l < len; ++l) {
                    buf[base + l] += is * ((*go)[base + l] - mean_dy - y[base + l] * mean_dyy);
                }
            }
        });
    }
    return onode;
}

// ---- structural ops ----

template <typename T>
Node<T> reshape(Node<T> a, Shape s) {
    Tape<T>& tp = *a.tape;
    // -1 wildcard on a single extent
    std::int64_t known = 1;
    int wild = -1;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == -1) {
            if (wild >= 0) throw ShapeError("reshape: more than one -1 extent");
            wild = static_cast<int>(i);
        } else {
            known *= s[i];
        }
    }
    if (wild >= 0) s[static_cast<std::size_t>(wild)] = a.value().numel() / known;
    DenseArray<T> out = a.value().reshaped(s);
    Node<T> o = tp.leaf(std::move(out), a.requires_grad());
    if (o.requires_grad()) {
        int aid = a.id, oid = o.id;
        tp.record([aid, oid](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go || !t.wants_grad(aid)) return;
            DenseArray<T>& buf = t.grad_buf(aid);
            for (std::int64_t i = 0; i < go->numel(); ++i) buf[i] += (*go)[i];
        });
    }
    return o;
}

namespace detail {

template <typename T>
void permute_copy(const DenseArray<T>& in, const std::vector<int>& perm, DenseArray<T>& out, bool add_into) {
    const int r = in.rank();
    std::vector<std::int64_t> istride(static_cast<std::size_t>(r), 1);
    for (int d = r - 2; d >= 0; --d) {
        istride[static_cast<std::size_t>(d)] =
            istride[static_cast<std::size_t>(d + 1)] * in.shape[static_cast<std::size_t>(d + 1)];
    }
    std::vector<std::int64_t> ostride_for_input(static_cast<std::size_t>(r), 0);
    // out dim d corresponds to input dim perm[d]
    std::vector<std::int64_t> ostride(static_cast<std::size_t>(r), 1);
    for (int d = r - 2; d >= 0; --d) {
        ostride[static_cast<std::size_t>(d)] =
            ostride[static_cast<std::size_t>(d + 1)] * out.shape[static_cast<std::size_t>(d + 1)];
    }
    for (int d = 0; d < r; ++d) ostride_for_input[static_cast<std::size_t>(perm[static_cast<std::size_t>(d)])] = ostride[static_cast<std::size_t>(d)];
    std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
    const std::int64_t n = in.numel();
    std::int64_t ooff = 0;
    for (std::int64_t flat = 0; flat < n; ++flat) {
        if (add_into) {
            out[ooff] += in[flat];
        } else {
            out[ooff] = in[flat];
        }
        for (int d = r - 1; d >= 0; --d) {
            idx[static_cast<std::size_t>(d)]++;
            ooff += ostride_for_input[static_cast<std::size_t>(d)];
            if (idx[static_cast<std::size_t>(d)] < in.shape[static_cast<std::size_t>(d)]) break;
            ooff -= ostride_for_input[static_cast<std::size_t>(d)] * in.shape[static_cast<std::size_t>(d)];
            idx[static_cast<std::size_t>(d)] = 0;
        }
    }
}

}  // namespace detail

template <typename T>
Node<T> permute(Node<T> a, std::vector<int> perm) {
    Tape<T>& tp = *a.tape;
    const DenseArray<T>& av = a.value();
    const int r = av.rank();
    if (static_cast<int>(perm.size()) != r) throw ShapeError("permute: perm rank mismatch");
    Shape os(static_cast<std::size_t>(r));
    std::vector<bool> seen(static_cast<std::size_t>(r), false);
    for (int d = 0; d < r; ++d) {
        int p = perm[static_cast<std::size_t>(d)];
        if (p < 0 || p >= r || seen[static_cast<std::size_t>(p)]) throw ShapeError("permute: invalid permutation");
        seen[static_cast<std::size_t>(p)] = true;
        os[static_cast<std::size_t>(d)] = av.shape[static_cast<std::size_t>(p)];
    }
    DenseArray<T> out(os);
    detail::permute_copy(av, perm, out, false);
    Node<T> o = tp.leaf(std::move(out), a.requires_grad());
    if (o.requires_grad()) {
        std::vector<int> inv(perm.size());
        for (int d = 0; d < r; ++d) inv[static_cast<std::size_t>(perm[static_cast<std::size_t>(d)])] = d;
        int aid = a.id, oid = o.id;
        tp.record([aid, oid, inv = std::move(inv)](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go || !t.wants_grad(aid)) return;
            DenseArray<T>& buf = t.grad_buf(aid);
            detail::permute_copy(*go, inv, buf, true);
        });
    }
    return o;
}

template <typename T>
Node<T> transpose_last2(Node<T> a) {
    const int r = a.value().rank();
    if (r < 2) throw ShapeError("transpose_last2 requires rank >= 2");
    std::vector<int> perm(static_cast<std::size_t>(r));
    for (int d = 0; d < r; ++d) perm[static_cast<std::size_t>(d)] = d;
    std::swap(perm[static_cast<std::size_t>(r - 2)], perm[static_cast<std::size_t>(r - 1)]);
    return permute(a, perm);
}

template <typename T>
Node<T> narrow(Node<T> a, int axis, std::int64_t start, std::int64_t len) {
    Tape<T>& tp = *a.tape;
    const DenseArray<T>& av = a.value();
    const int ax = detail::normalize_axis(axis, av.rank());
    const std::int64_t full = av.shape[static_cast<std::size_t>(ax)];
    if (start < 0 || len <= 0 || start + len > full) throw ShapeError("narrow: range out of bounds");
    std::int64_t outer, axis_len, inner;
    detail::axis_split(av.shape, ax, outer, axis_len, inner);
    Shape os = av.shape;
    os[static_cast<std::size_t>(ax)] = len;
    DenseArray<T> out(os);
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t l = 0; l < len; ++l) {
            const std::int64_t src = (o * axis_len + start + l) * inner;
            const std::int64_t dst = (o * len + l) * inner;
            for (std::int64_t in = 0; in < inner; ++in) out[dst + in] = av[src + in];
        }
    }
    Node<T> onode = tp.leaf(std::move(out), a.requires_grad());
    if (onode.requires_grad()) {
        int aid = a.id, oid = onode.id;
        tp.record([aid, oid, outer, axis_len, inner, start, len](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go || !t.wants_grad(aid)) return;
            DenseArray<T>& buf = t.grad_buf(aid);
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t l = 0; l < len; ++l) {
                    const std::int64_t dst = (o * axis_len + start + l) * inner;
                    const std::int64_t src = (o * len + l) * inner;
                    for (std::int64_t in = 0; in < inner; ++in) buf[dst + in] += (*go)[src + in];
                }
            }
        });
    }
    return onode;
}

template <typename T>
Node<T> concat(const std::vector<Node<T>>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no operands");
    Tape<T>& tp = *parts[0].tape;
    const int r = parts[0].value().rank();
    const int ax = detail::normalize_axis(axis, r);
    Shape os = parts[0].value().shape;
    std::int64_t total = 0;
    bool needs_grad = false;
    for (const Node<T>& p : parts) {
        if (p.tape != &tp) throw NumericError("concat: operands live on different tapes");
        const Shape& s = p.value().shape;
        if (static_cast<int>(s.size()) != r) throw ShapeError("concat: rank mismatch");
        for (int d = 0; d < r; ++d) {
            if (d != ax && s[static_cast<std::size_t>(d)] != os[static_cast<std::size_t>(d)]) {
                throw ShapeError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(os));
            }
        }
        total += s[static_cast<std::size_t>(ax)];
        needs_grad = needs_grad || p.requires_grad();
    }
    os[static_cast<std::size_t>(ax)] = total;
    std::int64_t outer, len_total, inner;
    {
        Shape tmp = os;
        detail::axis_split(tmp, ax, outer, len_total, inner);
    }
    DenseArray<T> out(os);
    std::vector<std::int64_t> offsets;
    std::int64_t off = 0;
    for (const Node<T>& p : parts) {
        offsets.push_back(off);
        const DenseArray<T>& pv = p.value();
        const std::int64_t plen = pv.shape[static_cast<std::size_t>(ax)];
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t l = 0; l < plen; ++l) {
                const std::int64_t src = (o * plen + l) * inner;
                const std::int64_t dst = (o * len_total + off + l) * inner;
                for (std::int64_t in = 0; in < inner; ++in) out[dst + in] = pv[src + in];
            }
        }
        off += plen;
    }
    Node<T> onode = tp.leaf(std::move(out), needs_grad);
    if (onode.requires_grad()) {
        std::vector<int> ids;
        std::vector<std::int64_t> lens;
        for (const Node<T>& p : parts) {
            ids.push_back(p.id);
            lens.push_back(p.value().shape[static_cast<std::size_t>(ax)]);
        }
        int oid = onode.id;
        tp.record([ids = std::move(ids), lens = std::move(lens), offsets = std::move(offsets), oid, outer, len_total,
                   inner](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go) return;
            for (std::size_t k = 0; k < ids.size(); ++k) {
                if (!t.wants_grad(ids[k])) continue;
                DenseArray<T>& buf = t.grad_buf(ids[k]);
                const std::int64_t plen = lens[k];
                for (std::int64_t o = 0; o < outer; ++o) {
                    for (std::int64_t l = 0; l < plen; ++l) {
                        const std::int64_t dst = (o * plen + l) * inner;
                        const std::int64_t src = (o * len_total + offsets[k] + l) * inner;
                        for (std::int64_t in = 0; in < inner; ++in) buf[dst + in] += (*go)[src + in];
                    }
                }
            }
        });
    }
    return onode;
}

// out[..., m] = table[..., idx[m]]; used for relative-position bias lookup.
template <typename T>
Node<T> gather_last(Node<T> table, std::vector<std::int64_t> idx) {
    Tape<T>& tp = *table.tape;
    const DenseArray<T>& tv = table.value();
    const std::int64_t R = tv.shape.back();
    const std::int64_t rows = tv.numel() / R;
    for (std::int64_t i : idx) {
        if (i < 0 || i >= R) throw ShapeError("gather_last: index out of range");
    }
    const std::int64_t M = static_cast<std::int64_t>(idx.size());
    Shape os = tv.shape;
    os.back() = M;
    DenseArray<T> out(os);
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t m = 0; m < M; ++m) out[r * M + m] = tv[r * R + idx[static_cast<std::size_t>(m)]];
    }
    Node<T> o = tp.leaf(std::move(out), table.requires_grad());
    if (o.requires_grad()) {
        int tid = table.id, oid = o.id;
        tp.record([tid, oid, R, rows, M, idx = std::move(idx)](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go || !t.wants_grad(tid)) return;
            DenseArray<T>& buf = t.grad_buf(tid);
            for (std::int64_t r = 0; r < rows; ++r) {
                for (std::int64_t m = 0; m < M; ++m) buf[r * R + idx[static_cast<std::size_t>(m)]] += (*go)[r * M + m];
            }
        });
    }
    return o;
}

// ---- matmul ----

namespace detail {

template <typename T>
void mm_acc(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            const T* brow = b + p * n;
            T* crow = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// Batched matrix product. Leading (batch) extents must match where both are
// present; the operand with fewer leading extents is broadcast.
template <typename T>
Node<T> matmul(Node<T> a, Node<T> b) {
    Tape<T>& tp = same_tape(a, b);
    const DenseArray<T>& av = a.value();
    const DenseArray<T>& bv = b.value();
    if (av.rank() < 2 || bv.rank() < 2) throw ShapeError("matmul requires rank >= 2 operands");
    const std::int64_t m = av.shape[static_cast<std::size_t>(av.rank() - 2)];
    const std::int64_t k = av.shape[static_cast<std::size_t>(av.rank() - 1)];
    const std::int64_t kb = bv.shape[static_cast<std::size_t>(bv.rank() - 2)];
    const std::int64_t n = bv.shape[static_cast<std::size_t>(bv.rank() - 1)];
    if (k != kb) {
        throw ShapeError("matmul: inner extents differ, " + shape_str(av.shape) + " x " + shape_str(bv.shape));
    }
    Shape abatch(av.shape.begin(), av.shape.end() - 2);
    Shape bbatch(bv.shape.begin(), bv.shape.end() - 2);
    const Shape& big = abatch.size() >= bbatch.size() ? abatch : bbatch;
    const Shape& small = abatch.size() >= bbatch.size() ? bbatch : abatch;
    if (!is_suffix_shape(small, big)) {
        throw ShapeError("matmul: batch extents not broadcastable, " + shape_str(av.shape) + " x " + shape_str(bv.shape));
    }
    const std::int64_t batch = numel_of(big);
    const std::int64_t ba = numel_of(abatch);
    const std::int64_t bb = numel_of(bbatch);
    Shape os = big;
    os.push_back(m);
    os.push_back(n);
    DenseArray<T> out(os);
    for (std::int64_t q = 0; q < batch; ++q) {
        detail::mm_acc(av.data.data() + (q % ba) * m * k, bv.data.data() + (q % bb) * k * n,
                       out.data.data() + q * m * n, m, k, n);
    }
    Node<T> o = tp.leaf(std::move(out), a.requires_grad() || b.requires_grad());
    if (o.requires_grad()) {
        int aid = a.id, bid = b.id, oid = o.id;
        tp.record([aid, bid, oid, m, k, n, batch, ba, bb](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go) return;
            const DenseArray<T>& A = t.value(aid);
            const DenseArray<T>& B = t.value(bid);
            const bool wa = t.wants_grad(aid);
            const bool wb = t.wants_grad(bid);
            DenseArray<T>* da = wa ? &t.grad_buf(aid) : nullptr;
            DenseArray<T>* db = wb ? &t.grad_buf(bid) : nullptr;
            for (std::int64_t q = 0; q < batch; ++q) {
                const T* gb = go->data.data() + q * m * n;
                const T* ab = A.data.data() + (q % ba) * m * k;
                const T* bbuf = B.data.data() + (q % bb) * k * n;
                if (wa) {
                    // dA[i,p] += sum_j dC[i,j] * B[p,j]
                    T* dab = da->data.data() + (q % ba) * m * k;
                    for (std::int64_t i = 0; i < m; ++i) {
                        for (std::int64_t p = 0; p < k; ++p) {
                            T s = T(0);
                            const T* grow = gb + i * n;
                            const T* brow = bbuf + p * n;
                            for (std::int64_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                            dab[i * k + p] += s;
                        }
                    }
                }
                if (wb) {
                    // dB[p,j] += sum_i A[i,p] * dC[i,j]
                    T* dbb = db->data.data() + (q % bb) * k * n;
                    for (std::int64_t i = 0; i < m; ++i) {
                        const T* grow = gb + i * n;
                        for (std::int64_t p = 0; p < k; ++p) {
                            const T avl = ab[i * k + p];
                            T* drow = dbb + p * n;
                            for (std::int64_t j = 0; j < n; ++j) drow[j] += avl * grow[j];
                        }
                    }
                }
            }
        });
    }
    return o;
}

// x (..., Cin) @ w (Cin, Cout) + bias (Cout). conv1x1 over NHWC maps is the
// same computation.
template <typename T>
Node<T> linear(Node<T> x, Node<T> w, Node<T> bias) {
    const Shape xs = x.shape();
    const std::int64_t cin = xs.back();
    if (w.shape().size() != 2 || w.shape()[0] != cin) {
        throw ShapeError("linear: weight " + shape_str(w.shape()) + " does not match input " + shape_str(xs));
    }
    Node<T> flat = reshape(x, Shape{-1, cin});
    Node<T> y = matmul(flat, w);
    y = add(y, bias);
    Shape os = xs;
    os.back() = w.shape()[1];
    return reshape(y, os);
}

template <typename T>
Node<T> conv1x1(Node<T> x, Node<T> w, Node<T> bias) {
    return linear(x, w, bias);
}

// ---- spatial ops on NHWC maps ----

template <typename T>
Node<T> pad2d(Node<T> x, std::int64_t pad_h, std::int64_t pad_w) {
    Tape<T>& tp = *x.tape;
    const DenseArray<T>& xv = x.value();
    if (xv.rank() != 4) throw ShapeError("pad2d expects (B,H,W,C), got " + shape_str(xv.shape));
    const std::int64_t B = xv.shape[0], H = xv.shape[1], W = xv.shape[2], C = xv.shape[3];
    const std::int64_t Hp = H + pad_h, Wp = W + pad_w;
    DenseArray<T> out({B, Hp, Wp, C});
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t y = 0; y < H; ++y) {
            const T* src = xv.data.data() + ((b * H + y) * W) * C;
            T* dst = out.data.data() + ((b * Hp + y) * Wp) * C;
            std::copy(src, src + W * C, dst);
        }
    }
    Node<T> o = tp.leaf(std::move(out), x.requires_grad());
    if (o.requires_grad()) {
        int xid = x.id, oid = o.id;
        tp.record([xid, oid, B, H, W, C, Hp, Wp](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go || !t.wants_grad(xid)) return;
            DenseArray<T>& buf = t.grad_buf(xid);
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t y = 0; y < H; ++y) {
                    const T* src = go->data.data() + ((b * Hp + y) * Wp) * C;
                    T* dst = buf.data.data() + ((b * H + y) * W) * C;
                    for (std::int64_t i = 0; i < W * C; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return o;
}

template <typename T>
Node<T> mean_pool2d(Node<T> x, std::int64_t kernel, std::int64_t stride) {
    Tape<T>& tp = *x.tape;
    const DenseArray<T>& xv = x.value();
    if (xv.rank() != 4) throw ShapeError("mean_pool2d expects (B,H,W,C), got " + shape_str(xv.shape));
    if (kernel < 1 || stride < 1) throw ShapeError("mean_pool2d: kernel and stride must be positive");
    const std::int64_t B = xv.shape[0], H = xv.shape[1], W = xv.shape[2], C = xv.shape[3];
    if (H < kernel || W < kernel) throw ShapeError("mean_pool2d: kernel larger than input");
    const std::int64_t Ho = (H - kernel) / stride + 1;
    const std::int64_t Wo = (W - kernel) / stride + 1;
    DenseArray<T> out({B, Ho, Wo, C});
    const T inv = T(1) / static_cast<T>(kernel * kernel);
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t oy = 0; oy < Ho; ++oy) {
            for (std::int64_t ox = 0; ox < Wo; ++ox) {
                T* dst = out.data.data() + (((b * Ho + oy) * Wo) + ox) * C;
                for (std::int64_t dy = 0; dy < kernel; ++dy) {
                    for (std::int64_t dx = 0; dx < kernel; ++dx) {
                        const T* src = xv.data.data() + (((b * H + oy * stride + dy) * W) + ox * stride + dx) * C;
                        for (std::int64_t c = 0; c < C; ++c) dst[c] += src[c];
                    }
                }
                for (std::int64_t c = 0; c < C; ++c) dst[c] *= inv;
            }
        }
    }
    Node<T> o = tp.leaf(std::move(out), x.requires_grad());
    if (o.requires_grad()) {
        int xid = x.id, oid = o.id;
        tp.record([xid, oid, B, H, W, C, Ho, Wo, kernel, stride, inv](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go || !t.wants_grad(xid)) return;
            DenseArray<T>& buf = t.grad_buf(xid);
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t oy = 0; oy < Ho; ++oy) {
                    for (std::int64_t ox = 0; ox < Wo; ++ox) {
                        const T* src = go->data.data() + (((b * Ho + oy) * Wo) + ox) * C;
                        for (std::int64_t dy = 0; dy < kernel; ++dy) {
                            for (std::int64_t dx = 0; dx < kernel; ++dx) {
                                T* dst = buf.data.data() + (((b * H + oy * stride + dy) * W) + ox * stride + dx) * C;
                                for (std::int64_t c = 0; c < C; ++c) dst[c] += src[c] * inv;
                            }
                        }
                    }
                }
            }
        });
    }
    return o;
}

// Per-channel convolution with an odd square kernel and same padding.
template <typename T>
Node<T> depthwise_conv2d(Node<T> x, Node<T> kernel) {
    Tape<T>& tp = same_tape(x, kernel);
    const DenseArray<T>& xv = x.value();
    const DenseArray<T>& kv = kernel.value();
    if (xv.rank() != 4) throw ShapeError("depthwise_conv2d expects (B,H,W,C), got " + shape_str(xv.shape));
    if (kv.rank() != 3 || kv.shape[0] != kv.shape[1] || kv.shape[0] % 2 == 0 || kv.shape[2] != xv.shape[3]) {
        throw ShapeError("depthwise_conv2d: kernel " + shape_str(kv.shape) + " incompatible with input " +
                         shape_str(xv.shape));
    }
    const std::int64_t B = xv.shape[0], H = xv.shape[1], W = xv.shape[2], C = xv.shape[3];
    const std::int64_t K = kv.shape[0];
    const std::int64_t P = (K - 1) / 2;
    DenseArray<T> out({B, H, W, C});
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t dy = 0; dy < K; ++dy) {
                const std::int64_t sy = y + dy - P;
                if (sy < 0 || sy >= H) continue;
                for (std::int64_t x2 = 0; x2 < W; ++x2) {
                    T* dst = out.data.data() + (((b * H + y) * W) + x2) * C;
                    for (std::int64_t dx = 0; dx < K; ++dx) {
                        const std::int64_t sx = x2 + dx - P;
                        if (sx < 0 || sx >= W) continue;
                        const T* src = xv.data.data() + (((b * H + sy) * W) + sx) * C;
                        const T* kk = kv.data.data() + (dy * K + dx) * C;
                        for (std::int64_t c = 0; c < C; ++c) dst[c] += src[c] * kk[c];
                    }
                }
            }
        }
    }
    Node<T> o = tp.leaf(std::move(out), x.requires_grad() || kernel.requires_grad());
    if (o.requires_grad()) {
        int xid = x.id, kid = kernel.id, oid = o.id;
        tp.record([xid, kid, oid, B, H, W, C, K, P](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go) return;
            const DenseArray<T>& xv2 = t.value(xid);
            const DenseArray<T>& kv2 = t.value(kid);
            const bool wx = t.wants_grad(xid);
            const bool wk = t.wants_grad(kid);
            DenseArray<T>* dx = wx ? &t.grad_buf(xid) : nullptr;
            DenseArray<T>* dk = wk ? &t.grad_buf(kid) : nullptr;
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t y = 0; y < H; ++y) {
                    for (std::int64_t dy = 0; dy < K; ++dy) {
                        const std::int64_t sy = y + dy - P;
                        if (sy < 0 || sy >= H) continue;
                        for (std::int64_t x2 = 0; x2 < W; ++x2) {
                            const T* g = go->data.data() + (((b * H + y) * W) + x2) * C;
                            for (std::int64_t dx2 = 0; dx2 < K; ++dx2) {
                                const std::int64_t sx = x2 + dx2 - P;
                                if (sx < 0 || sx >= W) continue;
                                const std::int64_t soff = (((b * H + sy) * W) + sx) * C;
                                const std::int64_t koff = (dy * K + dx2) * C;
                                if (wx) {
                                    T* d = dx->data.data() + soff;
                                    const T* kk = kv2.data.data() + koff;
                                    for (std::int64_t c = 0; c < C; ++c) d[c] += g[c] * kk[c];
                                }
                                if (wk) {
                                    T* d = dk->data.data() + koff;
                                    const T* src = xv2.data.data() + soff;
                                    for (std::int64_t c = 0; c < C; ++c) d[c] += g[c] * src[c];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return o;
}

// (B,H,W,C) -> (B,H/b,W/b,C*b*b); output channel order is (dy, dx, c).
template <typename T>
Node<T> space_to_depth(Node<T> x, std::int64_t block) {
    Tape<T>& tp = *x.tape;
    const DenseArray<T>& xv = x.value();
    if (xv.rank() != 4) throw ShapeError("space_to_depth expects (B,H,W,C), got " + shape_str(xv.shape));
    const std::int64_t B = xv.shape[0], H = xv.shape[1], W = xv.shape[2], C = xv.shape[3];
    if (block < 1 || H % block != 0 || W % block != 0) {
        throw ShapeError("space_to_depth: extents " + shape_str(xv.shape) + " not divisible by block " +
                         std::to_string(block));
    }
    const std::int64_t Ho = H / block, Wo = W / block, Co = C * block * block;
    DenseArray<T> out({B, Ho, Wo, Co});
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t oy = 0; oy < Ho; ++oy) {
            for (std::int64_t ox = 0; ox < Wo; ++ox) {
                T* dst = out.data.data() + (((b * Ho + oy) * Wo) + ox) * Co;
                for (std::int64_t dy = 0; dy < block; ++dy) {
                    const T* src = xv.data.data() + (((b * H + oy * block + dy) * W) + ox * block) * C;
                    std::copy(src, src + block * C, dst + dy * block * C);
                }
            }
        }
    }
    Node<T> o = tp.leaf(std::move(out), x.requires_grad());
    if (o.requires_grad()) {
        int xid = x.id, oid = o.id;
        tp.record([xid, oid, B, H, W, C, Ho, Wo, Co, block](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go || !t.wants_grad(xid)) return;
            DenseArray<T>& buf = t.grad_buf(xid);
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t oy = 0; oy < Ho; ++oy) {
                    for (std::int64_t ox = 0; ox < Wo; ++ox) {
                        const T* src = go->data.data() + (((b * Ho + oy) * Wo) + ox) * Co;
                        for (std::int64_t dy = 0; dy < block; ++dy) {
                            T* dst = buf.data.data() + (((b * H + oy * block + dy) * W) + ox * block) * C;
                            for (std::int64_t i = 0; i < block * C; ++i) dst[i] += src[dy * block * C + i];
                        }
                    }
                }
            }
        });
    }
    return o;
}

// Mean cross-entropy from raw logits (B,K) against integer labels.
template <typename T>
Node<T> cross_entropy(Node<T> logits, const std::vector<std::int64_t>& labels) {
    Tape<T>& tp = *logits.tape;
    const DenseArray<T>& lv = logits.value();
    if (lv.rank() != 2) throw ShapeError("cross_entropy expects (B,K) logits, got " + shape_str(lv.shape));
    const std::int64_t B = lv.shape[0], K = lv.shape[1];
    if (static_cast<std::int64_t>(labels.size()) != B) throw ShapeError("cross_entropy: label count mismatch");
    for (std::int64_t y : labels) {
        if (y < 0 || y >= K) throw ShapeError("cross_entropy: label out of range");
    }
    DenseArray<T> probs({B, K});
    double loss = 0.0;
    for (std::int64_t b = 0; b < B; ++b) {
        const T* row = lv.data.data() + b * K;
        T m = row[0];
        for (std::int64_t k = 1; k < K; ++k) m = std::max(m, row[k]);
        double s = 0.0;
        for (std::int64_t k = 0; k < K; ++k) s += std::exp(static_cast<double>(row[k] - m));
        const double lse = static_cast<double>(m) + std::log(s);
        loss += lse - static_cast<double>(row[labels[static_cast<std::size_t>(b)]]);
        for (std::int64_t k = 0; k < K; ++k) {
            probs[b * K + k] = static_cast<T>(std::exp(static_cast<double>(row[k]) - lse));
        }
    }
    loss /= static_cast<double>(B);
    Node<T> o = tp.leaf(DenseArray<T>::scalar(static_cast<T>(loss)), logits.requires_grad());
    if (o.requires_grad()) {
        int lid = logits.id, oid = o.id;
        tp.record([lid, oid, B, K, labels, probs = std::move(probs)](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go || !t.wants_grad(lid)) return;
            DenseArray<T>& buf = t.grad_buf(lid);
            const T g = (*go)[0] / static_cast<T>(B);
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t k = 0; k < K; ++k) {
                    T p = probs[b * K + k];
                    if (k == labels[static_cast<std::size_t>(b)]) p -= T(1);
                    buf[b * K + k] += g * p;
                }
            }
        });
    }
    return o;
}

}  // namespace qa
