#pragma once

#include <cmath>

#include "qa/tape.hpp"

namespace qa {

// Bilinear sampling of per-head feature maps at continuous pixel coordinates.
//   feature: (B, N, H, W, C')   coords: (B, nW, N, P, 2) as (x, y)
//   output:  (B, nW, N, P, C')
// Neighbors outside [0,W-1]x[0,H-1] contribute zero, so points fully outside
// the map sample a zero vector and pass no gradient. Differentiable in both
// the feature values and the coordinates; at exact integer coordinates the
// coordinate gradient is the right-cell one-sided derivative.
template <typename T>
Node<T> bilinear_sample(Node<T> feature, Node<T> coords) {
    Tape<T>& tp = same_tape(feature, coords);
    const DenseArray<T>& fv = feature.value();
    const DenseArray<T>& cv = coords.value();
    if (fv.rank() != 5) throw ShapeError("bilinear_sample: feature must be (B,N,H,W,C), got " + shape_str(fv.shape));
    if (cv.rank() != 5 || cv.shape.back() != 2) {
        throw ShapeError("bilinear_sample: coords must be (B,nW,N,P,2), got " + shape_str(cv.shape));
    }
    if (fv.shape[0] != cv.shape[0] || fv.shape[1] != cv.shape[2]) {
        throw ShapeError("bilinear_sample: feature " + shape_str(fv.shape) + " and coords " + shape_str(cv.shape) +
                         " disagree on batch/head extents");
    }
    const std::int64_t B = fv.shape[0], N = fv.shape[1], H = fv.shape[2], W = fv.shape[3], C = fv.shape[4];
    const std::int64_t nW = cv.shape[1], P = cv.shape[3];
    for (std::int64_t i = 0; i < cv.numel(); ++i) {
        if (std::isnan(static_cast<double>(cv[i]))) throw NumericError("bilinear_sample: NaN coordinate");
    }
    DenseArray<T> out({B, nW, N, P, C});
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t wi = 0; wi < nW; ++wi) {
            for (std::int64_t n = 0; n < N; ++n) {
                for (std::int64_t p = 0; p < P; ++p) {
                    const std::int64_t coff = ((((b * nW + wi) * N + n) * P + p)) * 2;
                    const double x = static_cast<double>(cv[coff]);
                    const double y = static_cast<double>(cv[coff + 1]);
                    const double x0 = std::floor(x), y0 = std::floor(y);
                    const T wx = static_cast<T>(x - x0), wy = static_cast<T>(y - y0);
                    const std::int64_t ix0 = static_cast<std::int64_t>(x0);
                    const std::int64_t iy0 = static_cast<std::int64_t>(y0);
                    const std::int64_t ooff = ((((b * nW + wi) * N + n) * P + p)) * C;
                    for (int dy = 0; dy < 2; ++dy) {
                        const std::int64_t yy = iy0 + dy;
                        if (yy < 0 || yy >= H) continue;
                        const T wyk = dy ? wy : T(1) - wy;
                        for (int dx = 0; dx < 2; ++dx) {
                            const std::int64_t xx = ix0 + dx;
                            if (xx < 0 || xx >= W) continue;
                            const T wgt = (dx ? wx : T(1) - wx) * wyk;
                            const std::int64_t foff = (((b * N + n) * H + yy) * W + xx) * C;
                            for (std::int64_t c = 0; c < C; ++c) out[ooff + c] += wgt * fv[foff + c];
                        }
                    }
                }
            }
        }
    }

    Node<T> o = tp.leaf(std::move(out), feature.requires_grad() || coords.requires_grad());
    if (o.requires_grad()) {
        int fid = feature.id, cid = coords.id, oid = o.id;
        tp.record([fid, cid, oid, B, N, H, W, C, nW, P](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go) return;
            const DenseArray<T>& fv2 = t.value(fid);
            const DenseArray<T>& cv2 = t.value(cid);
            const bool wf = t.wants_grad(fid);
            const bool wc = t.wants_grad(cid);
            DenseArray<T>* df = wf ? &t.grad_buf(fid) : nullptr;
            DenseArray<T>* dc = wc ? &t.grad_buf(cid) : nullptr;
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t wi = 0; wi < nW; ++wi) {
                    for (std::int64_t n = 0; n < N; ++n) {
                        for (std::int64_t p = 0; p < P; ++p) {
                            const std::int64_t coff = ((((b * nW + wi) * N + n) * P + p)) * 2;
                            const double x = static_cast<double>(cv2[coff]);
                            const double y = static_cast<double>(cv2[coff + 1]);
                            const double x0 = std::floor(x), y0 = std::floor(y);
                            const T wx = static_cast<T>(x - x0), wy = static_cast<T>(y - y0);
                            const std::int64_t ix0 = static_cast<std::int64_t>(x0);
                            const std::int64_t iy0 = static_cast<std::int64_t>(y0);
                            const std::int64_t ooff = ((((b * nW + wi) * N + n) * P + p)) * C;
                            for (int dy = 0; dy < 2; ++dy) {
                                const std::int64_t yy = iy0 + dy;
                                if (yy < 0 || yy >= H) continue;
                                const T wyk = dy ? wy : T(1) - wy;
                                const T dwy = dy ? T(1) : T(-1);
                                for (int dx = 0; dx < 2; ++dx) {
                                    const std::int64_t xx = ix0 + dx;
                                    if (xx < 0 || xx >= W) continue;
                                    const T wxk = dx ? wx : T(1) - wx;
                                    const T dwx = dx ? T(1) : T(-1);
                                    const std::int64_t foff = (((b * N + n) * H + yy) * W + xx) * C;
                                    if (wf) {
                                        const T wgt = wxk * wyk;
                                        T* d = df->data.data() + foff;
                                        const T* g = go->data.data() + ooff;
                                        for (std::int64_t c = 0; c < C; ++c) d[c] += wgt * g[c];
                                    }
                                    if (wc) {
                                        T gdotf = T(0);
                                        const T* g = go->data.data() + ooff;
                                        const T* f = fv2.data.data() + foff;
                                        for (std::int64_t c = 0; c < C; ++c) gdotf += g[c] * f[c];
                                        (*dc)[coff] += gdotf * dwx * wyk;
                                        (*dc)[coff + 1] += gdotf * dwy * wxk;
                                    }
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

}  // namespace qa
