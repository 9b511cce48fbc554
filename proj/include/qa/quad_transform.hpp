#pragma once

#include <cmath>

#include "qa/ops.hpp"
#include "qa/windowing.hpp"

namespace qa {

// Weight of the out-of-map coordinate penalty.
struct RegConfig {
    double lambda = 1.0;

    void validate() const {
        if (!(lambda >= 0.0)) throw ConfigError("RegConfig: lambda must be nonnegative, got " + std::to_string(lambda));
    }
};

inline constexpr double kPerspectiveEps = 1e-4;

// Pools each base window of the (possibly padded) map to one C-vector, then
// LeakyReLU and a 1x1 conv emit 9 surrogate parameters per head.
//   x:      (B, H, W, C)   conv_w: (C, 9N)   conv_b: (9N)
//   result: (B, nW, N, 9)
template <typename T>
Node<T> predict_params(Node<T> x, Node<T> conv_w, Node<T> conv_b, std::int64_t w, std::int64_t num_heads,
                       T leaky_slope = T(0.01)) {
    const Shape& xs = x.shape();
    if (xs.size() != 4) throw ShapeError("predict_params expects (B,H,W,C), got " + shape_str(xs));
    const std::int64_t B = xs[0], H = xs[1], W = xs[2], C = xs[3];
    if (conv_w.shape() != Shape{C, 9 * num_heads}) {
        throw ShapeError("predict_params: conv weights " + shape_str(conv_w.shape()) + " must be (" +
                         std::to_string(C) + "," + std::to_string(9 * num_heads) + ")");
    }
    WindowGridMeta m = window_grid(H, W, w);
    Node<T> padded = (m.pad_h || m.pad_w) ? pad2d(x, m.pad_h, m.pad_w) : x;
    Node<T> pooled = mean_pool2d(padded, w, w);              // (B, gh, gw, C)
    Node<T> act = leaky_relu(pooled, leaky_slope);
    Node<T> t = conv1x1(act, conv_w, conv_b);                // (B, gh, gw, 9N)
    return reshape(t, Shape{B, m.num_windows(), num_heads, 9});
}

// Composes T = Ts * Th * Tr * Tt * Tp from the surrogate parameters, each
// basic matrix assembled from slices of t so the whole map stays on the tape.
//   t: (B, nW, N, 9) -> (B, nW, N, 3, 3)
template <typename T>
Node<T> build_transform(Node<T> t, T beta1, T beta2) {
    Tape<T>& tp = *t.tape;
    const Shape ts = t.shape();  // copy: creating nodes may reallocate slot storage
    if (ts.size() != 4 || ts[3] != 9) throw ShapeError("build_transform expects (B,nW,N,9), got " + shape_str(ts));
    const Shape lead{ts[0], ts[1], ts[2], 1};
    Node<T> zero = tp.constant(DenseArray<T>::zeros(lead));
    Node<T> one = tp.constant(DenseArray<T>::ones(lead));
    auto comp = [&](int k) { return narrow(t, 3, k, 1); };
    auto mat = [&](std::initializer_list<Node<T>> cells) {
        std::vector<Node<T>> v(cells);
        Node<T> flat = concat(v, 3);  // (B,nW,N,9)
        return reshape(flat, Shape{ts[0], ts[1], ts[2], 3, 3});
    };

    Node<T> sx = add_scalar(comp(0), T(1));
    Node<T> sy = add_scalar(comp(1), T(1));
    Node<T> t_scale = mat({sx, zero, zero, zero, sy, zero, zero, zero, one});

    Node<T> t_shear = mat({one, comp(2), zero, comp(3), one, zero, zero, zero, one});

    Node<T> c5 = cos_op(comp(4));
    Node<T> s5 = sin_op(comp(4));
    Node<T> t_rot = mat({c5, scale(s5, T(-1)), zero, s5, c5, zero, zero, zero, one});

    Node<T> t_trans = mat({one, zero, scale(comp(5), beta1), zero, one, scale(comp(6), beta2), zero, zero, one});

    Node<T> t_proj = mat({one, zero, zero, zero, one, zero, comp(7), comp(8), one});

    return matmul(matmul(matmul(matmul(t_scale, t_shear), t_rot), t_trans), t_proj);
}

// Constant homogeneous relative coordinates of the w*w window tokens, as a
// (3, w*w) matrix of columns [x_i - x_c, y_i - y_c, 1]^T (row-major tokens).
template <typename T>
DenseArray<T> relative_coord_columns(std::int64_t w) {
    DenseArray<T> rel({3, w * w});
    const T half = static_cast<T>(w - 1) / T(2);
    for (std::int64_t iy = 0; iy < w; ++iy) {
        for (std::int64_t ix = 0; ix < w; ++ix) {
            const std::int64_t i = iy * w + ix;
            rel[0 * w * w + i] = static_cast<T>(ix) - half;
            rel[1 * w * w + i] = static_cast<T>(iy) - half;
            rel[2 * w * w + i] = T(1);
        }
    }
    return rel;
}

// Maps window-relative token coordinates through T and re-anchors at each
// window center: absolute sampling coordinates (B, nW, N, w*w, 2) as (x, y).
template <typename T>
Node<T> project_coords(Node<T> transform, const WindowCenters& centers, std::int64_t w) {
    Tape<T>& tp = *transform.tape;
    const Shape s = transform.shape();
    if (s.size() != 5 || s[3] != 3 || s[4] != 3) {
        throw ShapeError("project_coords expects (B,nW,N,3,3), got " + shape_str(s));
    }
    const std::int64_t nW = s[1], N = s[2], P = w * w;
    if (nW != centers.meta.num_windows()) throw ShapeError("project_coords: center count mismatch");

    Node<T> rel = tp.constant(relative_coord_columns<T>(w));     // (3, P)
    Node<T> xyz = matmul(transform, rel);                        // (B,nW,N,3,P)
    Node<T> xy = narrow(xyz, 3, 0, 2);                           // (B,nW,N,2,P)
    Node<T> z = narrow(xyz, 3, 2, 1);                            // (B,nW,N,1,P)
    Node<T> zr = clamped_reciprocal(z, static_cast<T>(kPerspectiveEps));
    Node<T> zr2 = concat(std::vector<Node<T>>{zr, zr}, 3);       // (B,nW,N,2,P)
    Node<T> rel_q = mul(xy, zr2);
    Node<T> coords = transpose_last2(rel_q);                     // (B,nW,N,P,2)

    DenseArray<T> offs({nW, N, P, 2});
    for (std::int64_t wi = 0; wi < nW; ++wi) {
        const auto [cx, cy] = centers.xy[static_cast<std::size_t>(wi)];
        for (std::int64_t n = 0; n < N; ++n) {
            for (std::int64_t p = 0; p < P; ++p) {
                offs[((wi * N + n) * P + p) * 2 + 0] = static_cast<T>(cx);
                offs[((wi * N + n) * P + p) * 2 + 1] = static_cast<T>(cy);
            }
        }
    }
    return add(coords, tp.constant(std::move(offs)));
}

// Out-of-map penalty, Sum_i R(u_x)u_x + R(u_y)u_y over coordinates normalized
// to [-1, 1] across the map. R is the +-lambda step outside the band and is
// treated as a constant in the backward pass, so the pull is always toward
// the map. Zero iff every normalized coordinate lies in [-1, 1].
template <typename T>
Node<T> reg_loss(Node<T> coords, std::int64_t H, std::int64_t W, const RegConfig& cfg) {
    cfg.validate();
    Tape<T>& tp = *coords.tape;
    const DenseArray<T>& cv = coords.value();
    if (cv.rank() < 1 || cv.shape.back() != 2) {
        throw ShapeError("reg_loss expects (..., 2) coordinates, got " + shape_str(cv.shape));
    }
    const T lambda = static_cast<T>(cfg.lambda);
    const T sx = W > 1 ? T(2) / static_cast<T>(W - 1) : T(0);
    const T sy = H > 1 ? T(2) / static_cast<T>(H - 1) : T(0);
    auto step = [lambda](T u) { return u > T(1) ? lambda : (u < T(-1) ? -lambda : T(0)); };
    const std::int64_t pts = cv.numel() / 2;
    T loss = T(0);
    for (std::int64_t p = 0; p < pts; ++p) {
        const T ux = cv[p * 2] * sx - T(1);
        const T uy = cv[p * 2 + 1] * sy - T(1);
        loss += step(ux) * ux + step(uy) * uy;
    }
    Node<T> o = tp.leaf(DenseArray<T>::scalar(loss), coords.requires_grad());
    if (o.requires_grad()) {
        int cid = coords.id, oid = o.id;
        tp.record([cid, oid, pts, sx, sy, step](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go || !t.wants_grad(cid)) return;
            const DenseArray<T>& cv2 = t.value(cid);
            DenseArray<T>& buf = t.grad_buf(cid);
            const T g = (*go)[0];
            for (std::int64_t p = 0; p < pts; ++p) {
                const T ux = cv2[p * 2] * sx - T(1);
                const T uy = cv2[p * 2 + 1] * sy - T(1);
                buf[p * 2] += g * step(ux) * sx;
                buf[p * 2 + 1] += g * step(uy) * sy;
            }
        });
    }
    return o;
}

}  // namespace qa
