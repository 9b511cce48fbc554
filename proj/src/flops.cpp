#include "qa/flops.hpp"

namespace qa {

FlopsReport count_flops(const ModelConfig& cfg, std::int64_t input_h, std::int64_t input_w) {
    cfg.validate();
    if (input_h % cfg.patch_size != 0 || input_w % cfg.patch_size != 0) {
        throw ConfigError("flops: input " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                          " not divisible by patch size " + std::to_string(cfg.patch_size));
    }
    FlopsReport rep;
    rep.cfg = cfg;
    rep.input_h = input_h;
    rep.input_w = input_w;

    std::int64_t h = input_h / cfg.patch_size;
    std::int64_t w = input_w / cfg.patch_size;
    const double s0 = static_cast<double>(h * w);
    const double c0 = static_cast<double>(cfg.channels[0]);
    const double in_dim = static_cast<double>(cfg.in_channels * cfg.patch_size * cfg.patch_size);
    rep.embed_flops = 2.0 * s0 * in_dim * c0 + s0 * c0 + 8.0 * s0 * c0;

    double merge_flops = 0.0;
    for (std::size_t st = 0; st < cfg.num_stages(); ++st) {
        const double C = static_cast<double>(cfg.channels[st]);
        const double N = static_cast<double>(cfg.heads[st]);
        const double W2 = static_cast<double>(cfg.window * cfg.window);
        if (st > 0) {
            if (h % 2 != 0 || w % 2 != 0) throw ConfigError("flops: token grid not divisible for patch merging");
            const double cp = static_cast<double>(cfg.channels[st - 1]);
            h /= 2;
            w /= 2;
            const double s = static_cast<double>(h * w);
            merge_flops += 2.0 * s * 4.0 * cp * C + s * C + 8.0 * s * 4.0 * cp;
        }
        const double S = static_cast<double>(h * w);
        const double hidden = std::floor(cfg.mlp_ratio * C);
        for (std::int64_t l = 0; l < cfg.depths[st]; ++l) {
            LayerFlops lf;
            lf.stage = static_cast<std::int64_t>(st);
            lf.layer = l;
            lf.tokens_h = h;
            lf.tokens_w = w;
            lf.channels = cfg.channels[st];
            lf.heads = cfg.heads[st];
            lf.window = cfg.window;

            // q,k,v and output projections, logits, softmax, weighted sum
            double attn = 4.0 * (2.0 * S * C * C + S * C);
            attn += 2.0 * (2.0 * S * W2 * C);       // QK^T and PV
            attn += S * N * W2;                     // logit scaling
            attn += 4.0 * S * N * W2;               // softmax: max, exp, sum, divide
            if (cfg.attention == AttnKind::kWindow) attn += S * N * W2;  // bias add
            lf.attention = attn;

            lf.cpe = 2.0 * 49.0 * S * C + S * C;

            if (cfg.attention == AttnKind::kQuad) {
                const double pooled = S / W2;
                double extra = S * C + pooled * C;            // window averaging
                extra += pooled * C;                          // LeakyReLU
                extra += 2.0 * pooled * C * 9.0 * N + pooled * 9.0 * N;  // 1x1 conv
                extra += 2.0 * 4.0 * S * C;                   // bilinear sampling, 4 taps
                lf.qa_extra = extra;
            }
            lf.predicted_extra = 2.0 * (54.0 + 9.0 * N / W2) * S * C;

            lf.ffn = 2.0 * S * C * hidden + S * hidden + 2.0 * S * hidden * C + S * C + S * hidden;
            lf.other = 2.0 * 8.0 * S * C + 3.0 * S * C;  // two norms, three residual adds

            lf.total = lf.attention + lf.ffn + lf.other + lf.cpe + lf.qa_extra;
            rep.layers.push_back(lf);
        }
    }

    const double sf = static_cast<double>(h * w);
    const double cf = static_cast<double>(cfg.channels.back());
    rep.head_flops = 8.0 * sf * cf + sf * cf + 2.0 * cf * static_cast<double>(cfg.num_classes) +
                     static_cast<double>(cfg.num_classes);

    rep.total_flops = rep.embed_flops + rep.head_flops + merge_flops;
    for (const LayerFlops& lf : rep.layers) {
        rep.total_flops += lf.total;
        rep.attention_flops += lf.attention;
        rep.cpe_flops += lf.cpe;
        rep.qa_extra_flops += lf.qa_extra;
        rep.predicted_extra += lf.predicted_extra;
    }
    rep.ratio_extra_total = rep.total_flops > 0.0 ? rep.qa_extra_flops / rep.total_flops : 0.0;
    return rep;
}

}  // namespace qa
