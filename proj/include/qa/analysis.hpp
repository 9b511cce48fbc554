#pragma once

#include <cmath>

#include "qa/model.hpp"

namespace qa {

// All positions are in feature-map lattice units (one unit = one token), the
// same frame the sampling coordinates live in.

inline double window_distance_bound(std::int64_t w) {
    return static_cast<double>(w - 1) * std::sqrt(2.0);
}

struct LayerDistance {
    std::int64_t stage = 0;
    std::int64_t layer = 0;
    double mean = 0.0;
    double stddev = 0.0;  // across queries
    std::int64_t queries = 0;
};

// Probability-weighted mean Euclidean distance between each query token and
// its keys, averaged over queries, windows, heads and batch; the standard
// deviation is taken across queries.
template <typename T>
std::vector<LayerDistance> attention_distance(const Model<T>& model, const DenseArray<T>& batch) {
    Tape<T> tape;
    FwdOpts opts;
    opts.retain_probs = true;
    opts.trace = true;
    ForwardResult<T> res = model.forward(tape, batch, opts);
    const std::int64_t w = model.config().window;
    const std::int64_t P = w * w;
    auto rel = relative_coord_columns<double>(w);

    std::vector<LayerDistance> out;
    for (const LayerTrace<T>& tr : res.layers) {
        if (!tr.attn_probs.valid()) throw NumericError("attention distance requires retained probabilities");
        const DenseArray<T>& probs = tr.attn_probs.value();  // (B,nW,N,P,P)
        const std::int64_t B = probs.shape[0], nW = probs.shape[1], N = probs.shape[2];
        auto centers = window_centers(tr.feat_h, tr.feat_w, w);
        const bool quad = tr.quad_coords.valid();
        const DenseArray<T>* coords = quad ? &tr.quad_coords.value() : nullptr;

        double sum = 0.0, sum2 = 0.0;
        std::int64_t count = 0;
        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t wi = 0; wi < nW; ++wi) {
                const auto [cx, cy] = centers.xy[static_cast<std::size_t>(wi)];
                for (std::int64_t n = 0; n < N; ++n) {
                    for (std::int64_t q = 0; q < P; ++q) {
                        const double qx = cx + rel[q];
                        const double qy = cy + rel[P + q];
                        double d = 0.0;
                        for (std::int64_t k = 0; k < P; ++k) {
                            double kx, ky;
                            if (quad) {
                                const std::int64_t off = ((((b * nW + wi) * N + n) * P + k)) * 2;
                                kx = static_cast<double>((*coords)[off]);
                                ky = static_cast<double>((*coords)[off + 1]);
                            } else {
                                kx = cx + rel[k];
                                ky = cy + rel[P + k];
                            }
                            const double p = static_cast<double>(probs[(((b * nW + wi) * N + n) * P + q) * P + k]);
                            d += p * std::hypot(qx - kx, qy - ky);
                        }
                        sum += d;
                        sum2 += d * d;
                        ++count;
                    }
                }
            }
        }
        LayerDistance ld;
        ld.stage = tr.stage;
        ld.layer = tr.layer;
        ld.queries = count;
        ld.mean = sum / static_cast<double>(count);
        ld.stddev = std::sqrt(std::max(0.0, sum2 / static_cast<double>(count) - ld.mean * ld.mean));
        out.push_back(ld);
    }
    return out;
}

// One exported quadrangle per (attention layer, window, head).
struct QuadRecord {
    std::int64_t layer_index = 0;  // running index over attention layers
    std::int64_t stage = 0;
    std::int64_t layer = 0;
    std::int64_t window = 0;
    std::int64_t head = 0;
    double center_x = 0, center_y = 0;
    double transform[9] = {0};  // row-major 3x3
    double corners[8] = {0};    // TL, TR, BR, BL as (x, y) pairs
    double scale_x = 1, scale_y = 1, rotation = 0;
};

// Quadrangle geometry of every QA layer for a single image (batch of one).
template <typename T>
std::vector<QuadRecord> export_quads(const Model<T>& model, const DenseArray<T>& image) {
    if (image.rank() != 4 || image.shape[0] != 1) {
        throw ShapeError("export_quads expects a single image (1,H,W,C), got " + shape_str(image.shape));
    }
    if (model.config().attention != AttnKind::kQuad) {
        throw ConfigError("export_quads requires a quadrangle-attention model");
    }
    Tape<T> tape;
    FwdOpts opts;
    opts.trace = true;
    ForwardResult<T> res = model.forward(tape, image, opts);
    const std::int64_t w = model.config().window;
    const std::int64_t P = w * w;
    // base-window corner tokens in row-major order TL, TR, BR, BL
    const std::int64_t corner_tok[4] = {0, w - 1, P - 1, P - w};

    std::vector<QuadRecord> records;
    std::int64_t layer_index = 0;
    for (const LayerTrace<T>& tr : res.layers) {
        const DenseArray<T>& coords = tr.quad_coords.value();   // (1,nW,N,P,2)
        const DenseArray<T>& tmat = tr.transform.value();       // (1,nW,N,3,3)
        const DenseArray<T>& tvec = tr.surrogate.value();       // (1,nW,N,9)
        const std::int64_t nW = coords.shape[1], N = coords.shape[2];
        auto centers = window_centers(tr.feat_h, tr.feat_w, w);
        for (std::int64_t wi = 0; wi < nW; ++wi) {
            for (std::int64_t n = 0; n < N; ++n) {
                QuadRecord r;
                r.layer_index = layer_index;
                r.stage = tr.stage;
                r.layer = tr.layer;
                r.window = wi;
                r.head = n;
                r.center_x = centers.xy[static_cast<std::size_t>(wi)].first;
                r.center_y = centers.xy[static_cast<std::size_t>(wi)].second;
                for (int k = 0; k < 9; ++k) r.transform[k] = static_cast<double>(tmat[((wi * N + n) * 9) + k]);
                for (int c = 0; c < 4; ++c) {
                    const std::int64_t off = (((wi * N + n) * P) + corner_tok[c]) * 2;
                    r.corners[c * 2] = static_cast<double>(coords[off]);
                    r.corners[c * 2 + 1] = static_cast<double>(coords[off + 1]);
                }
                r.scale_x = static_cast<double>(tvec[(wi * N + n) * 9 + 0]) + 1.0;
                r.scale_y = static_cast<double>(tvec[(wi * N + n) * 9 + 1]) + 1.0;
                r.rotation = static_cast<double>(tvec[(wi * N + n) * 9 + 4]);
                records.push_back(r);
            }
        }
        ++layer_index;
    }
    return records;
}

}  // namespace qa
