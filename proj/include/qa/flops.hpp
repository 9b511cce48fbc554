#pragma once

#include "qa/model.hpp"

namespace qa {

// Analytic per-layer operation counts for one image.
// Convention: a multiply-add counts as 2 FLOPs; adds, divides, exponentials
// and comparisons count as 1 each.
struct LayerFlops {
    std::int64_t stage = 0;
    std::int64_t layer = 0;
    std::int64_t tokens_h = 0;
    std::int64_t tokens_w = 0;
    std::int64_t channels = 0;
    std::int64_t heads = 0;
    std::int64_t window = 0;
    double attention = 0;        // projections + logits + softmax + weighted sum
    double ffn = 0;
    double other = 0;            // norms and residual adds
    double cpe = 0;              // depthwise conv + bias
    double qa_extra = 0;         // pooling + prediction conv + sampling
    double predicted_extra = 0;  // closed form for cpe + qa_extra
    double total = 0;
};

struct FlopsReport {
    ModelConfig cfg;
    std::int64_t input_h = 0;
    std::int64_t input_w = 0;
    std::vector<LayerFlops> layers;
    double embed_flops = 0;
    double head_flops = 0;
    double total_flops = 0;
    double attention_flops = 0;
    double cpe_flops = 0;
    double qa_extra_flops = 0;
    double predicted_extra = 0;
    double ratio_extra_total = 0;  // qa_extra / total
};

FlopsReport count_flops(const ModelConfig& cfg, std::int64_t input_h, std::int64_t input_w);

}  // namespace qa
