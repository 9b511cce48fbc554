#pragma once

#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "qa/attention.hpp"

namespace qa {

enum class Variant { kPlain, kHierarchical };
enum class AttnKind { kQuad, kWindow };

struct ModelConfig {
    Variant variant = Variant::kHierarchical;
    AttnKind attention = AttnKind::kQuad;
    std::vector<std::int64_t> depths;
    std::vector<std::int64_t> channels;
    std::vector<std::int64_t> heads;
    double mlp_ratio = 4.0;
    std::int64_t window = 7;
    std::int64_t patch_size = 4;
    std::int64_t num_classes = 10;
    std::int64_t in_channels = 3;
    double lambda = 1.0;
    std::string name;

    std::size_t num_stages() const { return depths.size(); }

    // Collects every problem into one error message.
    void validate() const {
        std::vector<std::string> bad;
        if (depths.empty()) bad.push_back("depths must not be empty");
        if (depths.size() != channels.size() || depths.size() != heads.size()) {
            bad.push_back("depths, channels and heads must have equal length");
        }
        if (variant == Variant::kPlain && depths.size() > 1) bad.push_back("plain variant takes a single stage");
        for (std::size_t s = 0; s < depths.size(); ++s) {
            if (depths[s] < 1) bad.push_back("depths[" + std::to_string(s) + "] must be positive");
        }
        for (std::size_t s = 0; s < channels.size() && s < heads.size(); ++s) {
            if (channels[s] < 1 || heads[s] < 1 || channels[s] % heads[s] != 0) {
                bad.push_back("channels[" + std::to_string(s) + "]=" + std::to_string(channels[s]) +
                              " must be a positive multiple of heads[" + std::to_string(s) +
                              "]=" + std::to_string(heads[s]));
            }
        }
        if (!(mlp_ratio > 0.0)) bad.push_back("mlp_ratio must be positive");
        if (window < 1) bad.push_back("window must be >= 1");
        if (patch_size < 1) bad.push_back("patch_size must be >= 1");
        if (variant == Variant::kHierarchical && patch_size != 4) {
            bad.push_back("hierarchical variant uses a fixed patch_size of 4");
        }
        if (num_classes < 2) bad.push_back("num_classes must be >= 2");
        if (in_channels < 1) bad.push_back("in_channels must be >= 1");
        if (!(lambda >= 0.0)) bad.push_back("lambda must be nonnegative");
        if (!bad.empty()) {
            std::string msg = "invalid model config:";
            for (const auto& b : bad) msg += "\n  - " + b;
            throw ConfigError(msg);
        }
    }
};

struct FwdOpts {
    bool train = false;         // parameters become differentiable leaves
    bool retain_probs = false;  // keep per-layer attention probabilities
    bool trace = false;         // keep quadrangle geometry per layer
};

template <typename T>
struct LayerTrace {
    Node<T> quad_coords;  // (1? B, nW, N, w^2, 2)
    Node<T> surrogate;    // (B, nW, N, 9)
    Node<T> transform;    // (B, nW, N, 3, 3)
    Node<T> attn_probs;
    WindowGridMeta meta;
    std::int64_t feat_h = 0, feat_w = 0;
    std::int64_t stage = 0, layer = 0;
};

template <typename T>
struct ForwardResult {
    Node<T> logits;
    Node<T> reg;  // scalar regularization loss, summed over QA layers
    std::vector<LayerTrace<T>> layers;
    std::vector<Node<T>> param_nodes;  // aligned with Model::params()
};

constexpr double kLayerNormEps = 1e-5;
constexpr std::int64_t kCpeKernel = 7;

// QFormer classifier: CPE + (window | quadrangle) attention blocks arranged as
// a constant-resolution plain stack or a staged hierarchy with patch merging.
template <typename T>
class Model {
public:
    struct Param {
        std::string name;
        DenseArray<T> value;
    };

    Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(seed ^ 0x5eedf00dULL);
        build_params(rng);
    }

    const ModelConfig& config() const { return cfg_; }
    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }

    DenseArray<T>& param(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw IoError("unknown parameter name: " + name);
        return params_[it->second].value;
    }

    bool has_param(const std::string& name) const { return index_.count(name) != 0; }

    std::int64_t num_scalars() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p.value.numel();
        return n;
    }

    ForwardResult<T> forward(Tape<T>& tape, const DenseArray<T>& batch, const FwdOpts& opts = {}) const {
        if (batch.rank() != 4 || batch.shape[3] != cfg_.in_channels) {
            throw ShapeError("model forward expects (B,H,W," + std::to_string(cfg_.in_channels) + "), got " +
                             shape_str(batch.shape));
        }
        ForwardResult<T> res;
        std::unordered_map<std::string, Node<T>> nodes;
        res.param_nodes.reserve(params_.size());
        for (const auto& p : params_) {
            Node<T> n = tape.leaf(p.value, opts.train);
            nodes.emplace(p.name, n);
            res.param_nodes.push_back(n);
        }
        auto P = [&](const std::string& name) -> Node<T> {
            auto it = nodes.find(name);
            if (it == nodes.end()) throw IoError("forward: missing parameter node " + name);
            return it->second;
        };
        auto ln = [&](Node<T> x, const std::string& prefix) {
            Node<T> y = layer_norm(x, static_cast<T>(kLayerNormEps));
            return add(mul(y, P(prefix + ".g")), P(prefix + ".b"));
        };

        const std::int64_t B = batch.shape[0];
        std::int64_t H = batch.shape[1], W = batch.shape[2];
        if (H % cfg_.patch_size != 0 || W % cfg_.patch_size != 0) {
            throw ShapeError("input extents " + shape_str(batch.shape) + " not divisible by patch size " +
                             std::to_string(cfg_.patch_size));
        }

        Node<T> z = tape.constant(batch);
        z = space_to_depth(z, cfg_.patch_size);
        z = linear(z, P("patch_embed.w"), P("patch_embed.b"));
        z = ln(z, "patch_embed.norm");
        H /= cfg_.patch_size;
        W /= cfg_.patch_size;

        res.reg = tape.constant(DenseArray<T>::scalar(T(0)));
        const RegConfig reg_cfg{cfg_.lambda};

        for (std::size_t s = 0; s < cfg_.num_stages(); ++s) {
            const std::int64_t N = cfg_.heads[s];
            if (s > 0) {
                if (H % 2 != 0 || W % 2 != 0) {
                    throw ShapeError("stage " + std::to_string(s) + " input " + std::to_string(H) + "x" +
                                     std::to_string(W) + " not divisible by 2 for patch merging");
                }
                const std::string mp = "merge" + std::to_string(s);
                z = space_to_depth(z, 2);
                z = ln(z, mp + ".norm");
                z = linear(z, P(mp + ".w"), P(mp + ".b"));
                H /= 2;
                W /= 2;
            }
            for (std::int64_t l = 0; l < cfg_.depths[s]; ++l) {
                const std::string bp = "s" + std::to_string(s) + ".b" + std::to_string(l) + ".";
                // attention branch input: CPE then norm; residual joins the raw stream
                Node<T> pe = cpe(z, P(bp + "cpe.k"), P(bp + "cpe.b"));
                Node<T> a_in = ln(pe, bp + "norm1");

                AttentionWeights<T> wt;
                wt.num_heads = N;
                wt.wq = P(bp + "attn.wq");
                wt.bq = P(bp + "attn.bq");
                wt.wk = P(bp + "attn.wk");
                wt.bk = P(bp + "attn.bk");
                wt.wv = P(bp + "attn.wv");
                wt.bv = P(bp + "attn.bv");
                wt.wo = P(bp + "attn.wo");
                wt.bo = P(bp + "attn.bo");
                AttnOpts aopts;
                aopts.retain_probs = opts.retain_probs;
                AttentionOutput<T> at;
                if (cfg_.attention == AttnKind::kQuad) {
                    wt.quad_w = P(bp + "attn.quad.w");
                    wt.quad_b = P(bp + "attn.quad.b");
                    at = quadrangle_attention(a_in, wt, cfg_.window, aopts);
                    res.reg = add(res.reg, reg_loss(at.quad_coords, H, W, reg_cfg));
                } else {
                    wt.rel_pos_bias = P(bp + "attn.rel_bias");
                    at = window_attention(a_in, wt, cfg_.window, aopts);
                }
                z = add(z, at.features);

                Node<T> f = ln(z, bp + "norm2");
                f = linear(f, P(bp + "ffn.w1"), P(bp + "ffn.b1"));
                f = gelu(f);
                f = linear(f, P(bp + "ffn.w2"), P(bp + "ffn.b2"));
                z = add(z, f);

                if (opts.trace || opts.retain_probs) {
                    LayerTrace<T> tr;
                    tr.quad_coords = at.quad_coords;
                    tr.surrogate = at.surrogate;
                    tr.transform = at.transform;
                    tr.attn_probs = at.attn_probs;
                    tr.meta = at.meta;
                    tr.feat_h = H;
                    tr.feat_w = W;
                    tr.stage = static_cast<std::int64_t>(s);
                    tr.layer = l;
                    res.layers.push_back(tr);
                }
            }
        }

        z = ln(z, "head.norm");
        Node<T> tokens = reshape(z, Shape{B, H * W, cfg_.channels.back()});
        Node<T> pooled = mean_axis(tokens, 1);
        res.logits = linear(pooled, P("head.w"), P("head.b"));
        return res;
    }

private:
    void add_param(const std::string& name, DenseArray<T> v) {
        index_.emplace(name, params_.size());
        params_.push_back(Param{name, std::move(v)});
    }

    DenseArray<T> trunc_normal(Shape s, Rng& rng, double stddev = 0.02) {
        DenseArray<T> a(std::move(s));
        for (std::int64_t i = 0; i < a.numel(); ++i) a[i] = static_cast<T>(rng.trunc_normal(stddev));
        return a;
    }

    void build_params(Rng& rng) {
        const std::int64_t C0 = cfg_.channels[0];
        add_param("patch_embed.w", trunc_normal({cfg_.in_channels * cfg_.patch_size * cfg_.patch_size, C0}, rng));
        add_param("patch_embed.b", DenseArray<T>::zeros({C0}));
        add_param("patch_embed.norm.g", DenseArray<T>::ones({C0}));
        add_param("patch_embed.norm.b", DenseArray<T>::zeros({C0}));

        for (std::size_t s = 0; s < cfg_.num_stages(); ++s) {
            const std::int64_t C = cfg_.channels[s];
            const std::int64_t N = cfg_.heads[s];
            if (s > 0) {
                const std::int64_t Cp = cfg_.channels[s - 1];
                const std::string mp = "merge" + std::to_string(s);
                add_param(mp + ".norm.g", DenseArray<T>::ones({4 * Cp}));
                add_param(mp + ".norm.b", DenseArray<T>::zeros({4 * Cp}));
                add_param(mp + ".w", trunc_normal({4 * Cp, C}, rng));
                add_param(mp + ".b", DenseArray<T>::zeros({C}));
            }
            const std::int64_t hidden = static_cast<std::int64_t>(cfg_.mlp_ratio * static_cast<double>(C));
            for (std::int64_t l = 0; l < cfg_.depths[s]; ++l) {
                const std::string bp = "s" + std::to_string(s) + ".b" + std::to_string(l) + ".";
                add_param(bp + "cpe.k", trunc_normal({kCpeKernel, kCpeKernel, C}, rng));
                add_param(bp + "cpe.b", DenseArray<T>::zeros({C}));
                add_param(bp + "norm1.g", DenseArray<T>::ones({C}));
                add_param(bp + "norm1.b", DenseArray<T>::zeros({C}));
                for (const char* nm : {"wq", "wk", "wv", "wo"}) {
                    add_param(bp + "attn." + std::string(nm), trunc_normal({C, C}, rng));
                }
                for (const char* nm : {"bq", "bk", "bv", "bo"}) {
                    add_param(bp + "attn." + std::string(nm), DenseArray<T>::zeros({C}));
                }
                if (cfg_.attention == AttnKind::kQuad) {
                    // zero-initialized so every transform starts as the identity
                    add_param(bp + "attn.quad.w", DenseArray<T>::zeros({C, 9 * N}));
                    add_param(bp + "attn.quad.b", DenseArray<T>::zeros({9 * N}));
                } else {
                    const std::int64_t span = 2 * cfg_.window - 1;
                    add_param(bp + "attn.rel_bias", DenseArray<T>::zeros({N, span * span}));
                }
                add_param(bp + "norm2.g", DenseArray<T>::ones({C}));
                add_param(bp + "norm2.b", DenseArray<T>::zeros({C}));
                add_param(bp + "ffn.w1", trunc_normal({C, hidden}, rng));
                add_param(bp + "ffn.b1", DenseArray<T>::zeros({hidden}));
                add_param(bp + "ffn.w2", trunc_normal({hidden, C}, rng));
                add_param(bp + "ffn.b2", DenseArray<T>::zeros({C}));
            }
        }
        const std::int64_t Cf = cfg_.channels.back();
        add_param("head.norm.g", DenseArray<T>::ones({Cf}));
        add_param("head.norm.b", DenseArray<T>::zeros({Cf}));
        add_param("head.w", trunc_normal({Cf, cfg_.num_classes}, rng));
        add_param("head.b", DenseArray<T>::zeros({cfg_.num_classes}));
    }

    ModelConfig cfg_;
    std::vector<Param> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Named micro/full configurations; desk-scale micro variants train on a CPU.
inline ModelConfig preset_config(const std::string& name) {
    ModelConfig c;
    c.name = name;
    if (name == "qformer-micro-h") {
        c.variant = Variant::kHierarchical;
        c.depths = {1, 1};
        c.channels = {16, 32};
        c.heads = {2, 4};
        c.window = 2;
        c.patch_size = 4;
        c.num_classes = 4;
        c.in_channels = 1;
    } else if (name == "qformer-micro-p") {
        c.variant = Variant::kPlain;
        c.depths = {4};
        c.channels = {32};
        c.heads = {4};
        c.window = 2;
        c.patch_size = 4;
        c.num_classes = 4;
        c.in_channels = 1;
    } else if (name == "qformer-h-t") {
        c.variant = Variant::kHierarchical;
        c.depths = {2, 2, 6, 2};
        c.channels = {96, 192, 384, 768};
        c.heads = {3, 6, 12, 24};
        c.window = 7;
        c.patch_size = 4;
        c.num_classes = 1000;
        c.in_channels = 3;
    } else if (name == "qformer-p-b") {
        c.variant = Variant::kPlain;
        c.depths = {12};
        c.channels = {768};
        c.heads = {12};
        c.window = 7;
        c.patch_size = 16;
        c.num_classes = 1000;
        c.in_channels = 3;
    } else {
        throw ConfigError("unknown preset: " + name);
    }
    return c;
}

}  // namespace qa
