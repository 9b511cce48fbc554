#pragma once

#include <cmath>

#include "qa/grid_sample.hpp"
#include "qa/quad_transform.hpp"

namespace qa {

// Parameter handles for one attention layer. rel_pos_bias is only used by the
// window baseline; quad_w/quad_b only by quadrangle attention.
template <typename T>
struct AttentionWeights {
    Node<T> wq, bq, wk, bk, wv, bv, wo, bo;  // projections C -> C
    std::int64_t num_heads = 1;
    Node<T> rel_pos_bias;  // (N, (2w-1)^2)
    Node<T> quad_w;        // (C, 9N)
    Node<T> quad_b;        // (9N)
};

template <typename T>
struct AttentionOutput {
    Node<T> features;
    Node<T> attn_probs;   // retained only on request
    Node<T> quad_coords;  // QA: (B,nW,N,w^2,2) absolute sampling points
    Node<T> surrogate;    // QA: (B,nW,N,9)
    Node<T> transform;    // QA: (B,nW,N,3,3)
    WindowGridMeta meta;
};

struct AttnOpts {
    bool retain_probs = false;
    bool use_rel_bias = true;  // window baseline only
};

namespace detail {

// (B,H,W,C) -> per-window heads (B,nW,N,w^2,C/N)
template <typename T>
Node<T> to_window_heads(Node<T> x, std::int64_t w, std::int64_t heads, WindowGridMeta* meta) {
    const Shape& s = x.shape();
    const std::int64_t B = s[0], C = s[3];
    Node<T> wins = window_partition(x, w, meta);
    Node<T> split = reshape(wins, Shape{B, meta->num_windows(), w * w, heads, C / heads});
    return permute(split, {0, 1, 3, 2, 4});
}

// inverse of to_window_heads followed by un-windowing
template <typename T>
Node<T> from_window_heads(Node<T> ctx, const WindowGridMeta& m, std::int64_t H, std::int64_t W) {
    const Shape s = ctx.shape();
    Node<T> joined = permute(ctx, {0, 1, 3, 2, 4});
    joined = reshape(joined, Shape{s[0], s[1], s[3], s[2] * s[4]});
    return window_merge(joined, m, H, W);
}

inline std::vector<std::int64_t> rel_bias_index(std::int64_t w) {
    std::vector<std::int64_t> idx;
    idx.reserve(static_cast<std::size_t>(w * w * w * w));
    const std::int64_t span = 2 * w - 1;
    for (std::int64_t qi = 0; qi < w * w; ++qi) {
        const std::int64_t qy = qi / w, qx = qi % w;
        for (std::int64_t ki = 0; ki < w * w; ++ki) {
            const std::int64_t ky = ki / w, kx = ki % w;
            idx.push_back((qy - ky + w - 1) * span + (qx - kx + w - 1));
        }
    }
    return idx;
}

template <typename T>
void check_heads(const Shape& xs, std::int64_t heads) {
    if (xs.size() != 4) throw ShapeError("attention expects (B,H,W,C), got " + shape_str(xs));
    if (heads < 1 || xs[3] % heads != 0) {
        throw ShapeError("channels " + std::to_string(xs[3]) + " not divisible by " + std::to_string(heads) + " heads");
    }
}

}  // namespace detail

// Baseline multi-head attention inside fixed w x w windows with an additive
// relative-position bias on the scaled logits.
template <typename T>
AttentionOutput<T> window_attention(Node<T> x, const AttentionWeights<T>& wt, std::int64_t w,
                                    const AttnOpts& opts = {}) {
    detail::check_heads<T>(x.shape(), wt.num_heads);
    const std::int64_t H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
    const std::int64_t N = wt.num_heads, Ch = C / N;

    Node<T> q = linear(x, wt.wq, wt.bq);
    Node<T> k = linear(x, wt.wk, wt.bk);
    Node<T> v = linear(x, wt.wv, wt.bv);

    AttentionOutput<T> out;
    Node<T> qw = detail::to_window_heads(q, w, N, &out.meta);
    WindowGridMeta m2;
    Node<T> kw = detail::to_window_heads(k, w, N, &m2);
    Node<T> vw = detail::to_window_heads(v, w, N, &m2);

    Node<T> logits = matmul(qw, transpose_last2(kw));
    logits = scale(logits, static_cast<T>(1.0 / std::sqrt(static_cast<double>(Ch))));
    if (opts.use_rel_bias && wt.rel_pos_bias.valid()) {
        Node<T> bias = gather_last(wt.rel_pos_bias, detail::rel_bias_index(w));  // (N, w^4)
        bias = reshape(bias, Shape{N, w * w, w * w});
        logits = add(logits, bias);
    }
    Node<T> probs = softmax(logits, -1);
    Node<T> ctx = matmul(probs, vw);
    Node<T> merged = detail::from_window_heads(ctx, out.meta, H, W);
    out.features = linear(merged, wt.wo, wt.bo);
    if (opts.retain_probs) out.attn_probs = probs;
    return out;
}

// Quadrangle attention: keys/values are resampled from per-head feature maps
// at the projectively transformed window coordinates. No relative-position
// bias (sampled key positions are fractional); spatial cues come from the
// conditional position embedding outside this op.
template <typename T>
AttentionOutput<T> quadrangle_attention(Node<T> x, const AttentionWeights<T>& wt, std::int64_t w,
                                        const AttnOpts& opts = {}) {
    detail::check_heads<T>(x.shape(), wt.num_heads);
    if (!wt.quad_w.valid() || !wt.quad_b.valid()) {
        throw ShapeError("quadrangle_attention requires quadrangle prediction weights");
    }
    const std::int64_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
    const std::int64_t N = wt.num_heads, Ch = C / N;

    Node<T> q = linear(x, wt.wq, wt.bq);
    Node<T> k = linear(x, wt.wk, wt.bk);
    Node<T> v = linear(x, wt.wv, wt.bv);

    AttentionOutput<T> out;
    Node<T> qw = detail::to_window_heads(q, w, N, &out.meta);

    // per-head maps (B,N,H,W,C')
    Node<T> kmap = permute(reshape(k, Shape{B, H, W, N, Ch}), {0, 3, 1, 2, 4});
    Node<T> vmap = permute(reshape(v, Shape{B, H, W, N, Ch}), {0, 3, 1, 2, 4});

    out.surrogate = predict_params(x, wt.quad_w, wt.quad_b, w, N);
    const T beta1 = static_cast<T>(out.meta.padded_w()) / static_cast<T>(w);
    const T beta2 = static_cast<T>(out.meta.padded_h()) / static_cast<T>(w);
    out.transform = build_transform(out.surrogate, beta1, beta2);
    out.quad_coords = project_coords(out.transform, window_centers(H, W, w), w);

    Node<T> kw = bilinear_sample(kmap, out.quad_coords);
    Node<T> vw = bilinear_sample(vmap, out.quad_coords);

    Node<T> logits = matmul(qw, transpose_last2(kw));
    logits = scale(logits, static_cast<T>(1.0 / std::sqrt(static_cast<double>(Ch))));
    Node<T> probs = softmax(logits, -1);
    Node<T> ctx = matmul(probs, vw);
    Node<T> merged = detail::from_window_heads(ctx, out.meta, H, W);
    out.features = linear(merged, wt.wo, wt.bo);
    if (opts.retain_probs) out.attn_probs = probs;
    return out;
}

// Conditional position embedding: residual 7x7 depthwise convolution.
template <typename T>
Node<T> cpe(Node<T> x, Node<T> dw_kernel, Node<T> dw_bias) {
    Node<T> conv = depthwise_conv2d(x, dw_kernel);
    conv = add(conv, dw_bias);
    return add(x, conv);
}

}  // namespace qa
