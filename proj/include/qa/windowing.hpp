#pragma once

#include <utility>
#include <vector>

#include "qa/ops.hpp"

namespace qa {

// Geometry of a non-overlapping w x w partition of an H x W map. Padding is
// zeros appended on the bottom/right so (H+pad_h) and (W+pad_w) divide by w.
struct WindowGridMeta {
    std::int64_t w = 0;
    std::int64_t grid_h = 0;
    std::int64_t grid_w = 0;
    std::int64_t pad_h = 0;
    std::int64_t pad_w = 0;

    std::int64_t num_windows() const { return grid_h * grid_w; }
    std::int64_t padded_h() const { return grid_h * w; }
    std::int64_t padded_w() const { return grid_w * w; }
};

inline WindowGridMeta window_grid(std::int64_t H, std::int64_t W, std::int64_t w) {
    if (w < 1) throw ShapeError("window size must be >= 1");
    WindowGridMeta m;
    m.w = w;
    m.grid_h = ceil_div(H, w);
    m.grid_w = ceil_div(W, w);
    m.pad_h = m.grid_h * w - H;
    m.pad_w = m.grid_w * w - W;
    return m;
}

// Windows plus the metadata needed to invert the partition.
template <typename T>
struct WindowGrid {
    DenseArray<T> windows;  // (B, num_windows, w*w, C)
    WindowGridMeta meta;
};

// Absolute (x, y) center of every window, row-major over (gy, gx).
struct WindowCenters {
    std::vector<std::pair<double, double>> xy;
    WindowGridMeta meta;
};

inline WindowCenters window_centers(std::int64_t H, std::int64_t W, std::int64_t w) {
    WindowCenters c;
    c.meta = window_grid(H, W, w);
    const double half = static_cast<double>(w - 1) / 2.0;
    c.xy.reserve(static_cast<std::size_t>(c.meta.num_windows()));
    for (std::int64_t gy = 0; gy < c.meta.grid_h; ++gy) {
        for (std::int64_t gx = 0; gx < c.meta.grid_w; ++gx) {
            c.xy.emplace_back(static_cast<double>(gx * w) + half, static_cast<double>(gy * w) + half);
        }
    }
    return c;
}

namespace detail {

// Copies map (B,H,W,C) into windows (B,nW,w^2,C); pad slots stay zero.
template <typename T>
void partition_copy(const DenseArray<T>& map, const WindowGridMeta& m, std::int64_t H, std::int64_t W,
                    DenseArray<T>& wins) {
    const std::int64_t B = map.shape[0], C = map.shape[3];
    const std::int64_t w = m.w;
    const std::int64_t nW = m.num_windows();
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t gy = 0; gy < m.grid_h; ++gy) {
            for (std::int64_t gx = 0; gx < m.grid_w; ++gx) {
                const std::int64_t wi = gy * m.grid_w + gx;
                for (std::int64_t iy = 0; iy < w; ++iy) {
                    const std::int64_t sy = gy * w + iy;
                    if (sy >= H) continue;
                    for (std::int64_t ix = 0; ix < w; ++ix) {
                        const std::int64_t sx = gx * w + ix;
                        if (sx >= W) continue;
                        const T* src = map.data.data() + (((b * H + sy) * W) + sx) * C;
                        T* dst = wins.data.data() + (((b * nW + wi) * w * w) + iy * w + ix) * C;
                        std::copy(src, src + C, dst);
                    }
                }
            }
        }
    }
}

// Copies windows back to a map, dropping pad slots.
template <typename T>
void merge_copy(const DenseArray<T>& wins, const WindowGridMeta& m, std::int64_t H, std::int64_t W,
                DenseArray<T>& map) {
    const std::int64_t B = map.shape[0], C = map.shape[3];
    const std::int64_t w = m.w;
    const std::int64_t nW = m.num_windows();
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t y = 0; y < H; ++y) {
            const std::int64_t gy = y / w, iy = y % w;
            for (std::int64_t x = 0; x < W; ++x) {
                const std::int64_t gx = x / w, ix = x % w;
                const std::int64_t wi = gy * m.grid_w + gx;
                const T* src = wins.data.data() + (((b * nW + wi) * w * w) + iy * w + ix) * C;
                T* dst = map.data.data() + (((b * H + y) * W) + x) * C;
                std::copy(src, src + C, dst);
            }
        }
    }
}

}  // namespace detail

// Plain-array partition; token order within a window is row-major.
template <typename T>
WindowGrid<T> partition(const DenseArray<T>& map, std::int64_t w) {
    if (map.rank() != 4) throw ShapeError("partition expects (B,H,W,C), got " + shape_str(map.shape));
    const std::int64_t B = map.shape[0], H = map.shape[1], W = map.shape[2], C = map.shape[3];
    WindowGrid<T> g;
    g.meta = window_grid(H, W, w);
    g.windows = DenseArray<T>({B, g.meta.num_windows(), w * w, C});
    detail::partition_copy(map, g.meta, H, W, g.windows);
    return g;
}

template <typename T>
DenseArray<T> merge(const WindowGrid<T>& g, std::int64_t H, std::int64_t W) {
    const WindowGridMeta& m = g.meta;
    if (m.grid_h != ceil_div(H, m.w) || m.grid_w != ceil_div(W, m.w)) {
        throw ShapeError("merge: window grid inconsistent with requested extents");
    }
    const std::int64_t B = g.windows.shape[0], C = g.windows.shape[3];
    if (g.windows.shape[1] != m.num_windows() || g.windows.shape[2] != m.w * m.w) {
        throw ShapeError("merge: windows array " + shape_str(g.windows.shape) + " inconsistent with metadata");
    }
    DenseArray<T> map({B, H, W, C});
    detail::merge_copy(g.windows, m, H, W, map);
    return map;
}

// ---- tape variants ----

template <typename T>
Node<T> window_partition(Node<T> x, std::int64_t w, WindowGridMeta* meta_out = nullptr) {
    Tape<T>& tp = *x.tape;
    const DenseArray<T>& xv = x.value();
    if (xv.rank() != 4) throw ShapeError("window_partition expects (B,H,W,C), got " + shape_str(xv.shape));
    const std::int64_t B = xv.shape[0], H = xv.shape[1], W = xv.shape[2], C = xv.shape[3];
    WindowGridMeta m = window_grid(H, W, w);
    if (meta_out) *meta_out = m;
    DenseArray<T> wins({B, m.num_windows(), w * w, C});
    detail::partition_copy(xv, m, H, W, wins);
    Node<T> o = tp.leaf(std::move(wins), x.requires_grad());
    if (o.requires_grad()) {
        int xid = x.id, oid = o.id;
        tp.record([xid, oid, m, H, W, B, C](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go || !t.wants_grad(xid)) return;
            DenseArray<T>& buf = t.grad_buf(xid);
            const std::int64_t w = m.w, nW = m.num_windows();
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t y = 0; y < H; ++y) {
                    const std::int64_t gy = y / w, iy = y % w;
                    for (std::int64_t x2 = 0; x2 < W; ++x2) {
                        const std::int64_t gx = x2 / w, ix = x2 % w;
                        const std::int64_t wi = gy * m.grid_w + gx;
                        const T* src = go->data.data() + (((b * nW + wi) * w * w) + iy * w + ix) * C;
                        T* dst = buf.data.data() + (((b * H + y) * W) + x2) * C;
                        for (std::int64_t c = 0; c < C; ++c) dst[c] += src[c];
                    }
                }
            }
        });
    }
    return o;
}

template <typename T>
Node<T> window_merge(Node<T> wins, const WindowGridMeta& m, std::int64_t H, std::int64_t W) {
    Tape<T>& tp = *wins.tape;
    const DenseArray<T>& wv = wins.value();
    if (wv.rank() != 4 || wv.shape[1] != m.num_windows() || wv.shape[2] != m.w * m.w) {
        throw ShapeError("window_merge: windows " + shape_str(wv.shape) + " inconsistent with metadata");
    }
    const std::int64_t B = wv.shape[0], C = wv.shape[3];
    DenseArray<T> map({B, H, W, C});
    detail::merge_copy(wv, m, H, W, map);
    Node<T> o = tp.leaf(std::move(map), wins.requires_grad());
    if (o.requires_grad()) {
        int wid = wins.id, oid = o.id;
        tp.record([wid, oid, m, H, W, B, C](Tape<T>& t) {
            const DenseArray<T>* go = t.maybe_grad(oid);
            if (!go || !t.wants_grad(wid)) return;
            DenseArray<T>& buf = t.grad_buf(wid);
            const std::int64_t w = m.w, nW = m.num_windows();
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t y = 0; y < H; ++y) {
                    const std::int64_t gy = y / w, iy = y % w;
                    for (std::int64_t x2 = 0; x2 < W; ++x2) {
                        const std::int64_t gx = x2 / w, ix = x2 % w;
                        const std::int64_t wi = gy * m.grid_w + gx;
                        const T* src = go->data.data() + (((b * H + y) * W) + x2) * C;
                        T* dst = buf.data.data() + (((b * nW + wi) * w * w) + iy * w + ix) * C;
                        for (std::int64_t c = 0; c < C; ++c) dst[c] += src[c];
                    }
                }
            }
        });
    }
    return o;
}

}  // namespace qa
