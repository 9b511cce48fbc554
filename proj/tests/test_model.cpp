#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "qa/checkpoint.hpp"
#include "qa/commands.hpp"

using namespace qa;

namespace {

DenseArray<double> random_batch(Rng& rng, std::int64_t B, std::int64_t side, std::int64_t C) {
    return DenseArray<double>::randn({B, side, side, C}, rng, 0.5);
}

}  // namespace

TEST_CASE("hierarchical micro model halves the grid per stage: 16x16 -> 4x4 -> 2x2") {
    ModelConfig cfg = preset_config("qformer-micro-h");
    Model<double> model(cfg, 3);
    Rng rng(1);
    Tape<double> tape;
    FwdOpts opts;
    opts.trace = true;
    ForwardResult<double> res = model.forward(tape, random_batch(rng, 2, 16, 1), opts);
    REQUIRE(res.layers.size() == 2);
    CHECK(res.layers[0].feat_h == 4);
    CHECK(res.layers[0].feat_w == 4);
    CHECK(res.layers[1].feat_h == 2);
    CHECK(res.layers[1].feat_w == 2);
    CHECK(res.logits.shape() == Shape{2, 4});
}

TEST_CASE("plain model keeps a constant token grid") {
    ModelConfig cfg = preset_config("qformer-micro-p");
    cfg.depths = {2};
    Model<double> model(cfg, 3);
    Rng rng(2);
    Tape<double> tape;
    FwdOpts opts;
    opts.trace = true;
    ForwardResult<double> res = model.forward(tape, random_batch(rng, 1, 16, 1), opts);
    REQUIRE(res.layers.size() == 2);
    for (const auto& tr : res.layers) {
        CHECK(tr.feat_h == 4);
        CHECK(tr.feat_w == 4);
    }
}

TEST_CASE("parameter count matches the closed-form summation over named shapes") {
    for (const char* name : {"qformer-micro-h", "qformer-micro-p"}) {
        ModelConfig cfg = preset_config(name);
        Model<float> model(cfg, 0);
        // independent closed-form count
        std::int64_t want = 0;
        const std::int64_t C0 = cfg.channels[0];
        want += cfg.in_channels * cfg.patch_size * cfg.patch_size * C0 + C0 + 2 * C0;
        for (std::size_t s = 0; s < cfg.depths.size(); ++s) {
            const std::int64_t C = cfg.channels[s], N = cfg.heads[s];
            const std::int64_t hidden = static_cast<std::int64_t>(cfg.mlp_ratio * static_cast<double>(C));
            if (s > 0) {
                const std::int64_t Cp = cfg.channels[s - 1];
                want += 2 * (4 * Cp) + 4 * Cp * C + C;
            }
            for (std::int64_t l = 0; l < cfg.depths[s]; ++l) {
                want += 49 * C + C;                  // cpe kernel + bias
                want += 2 * C;                       // norm1
                want += 4 * C * C + 4 * C;           // qkvo
                want += C * 9 * N + 9 * N;           // quadrangle head
                want += 2 * C;                       // norm2
                want += C * hidden + hidden + hidden * C + C;
            }
        }
        const std::int64_t Cf = cfg.channels.back();
        want += 2 * Cf + Cf * cfg.num_classes + cfg.num_classes;
        CHECK(model.num_scalars() == want);
    }
}

TEST_CASE("zero-initialized QA model matches its window-attention twin bit for bit") {
    ModelConfig qa_cfg = preset_config("qformer-micro-h");
    ModelConfig win_cfg = qa_cfg;
    win_cfg.attention = AttnKind::kWindow;
    Model<double> qa_model(qa_cfg, 42);
    Model<double> win_model(win_cfg, 42);
    Rng rng(5);
    DenseArray<double> batch = random_batch(rng, 2, 16, 1);
    Tape<double> t1, t2;
    ForwardResult<double> a = qa_model.forward(t1, batch);
    ForwardResult<double> b = win_model.forward(t2, batch);
    CHECK(max_abs_diff(a.logits.value(), b.logits.value()) < 1e-10);
    CHECK(a.reg.value()[0] == 0.0);  // base windows stay inside the map
}

TEST_CASE("permuting the batch permutes the logits identically") {
    ModelConfig cfg = preset_config("qformer-micro-h");
    Model<double> model(cfg, 9);
    Rng rng(6);
    DenseArray<double> batch = random_batch(rng, 3, 16, 1);
    DenseArray<double> swapped({3, 16, 16, 1});
    const std::int64_t stride = 16 * 16;
    const std::int64_t perm[3] = {2, 0, 1};
    for (std::int64_t b = 0; b < 3; ++b) {
        std::copy(batch.data.begin() + perm[b] * stride, batch.data.begin() + (perm[b] + 1) * stride,
                  swapped.data.begin() + b * stride);
    }
    Tape<double> t1, t2;
    auto l1 = model.forward(t1, batch).logits.value();
    auto l2 = model.forward(t2, swapped).logits.value();
    for (std::int64_t b = 0; b < 3; ++b) {
        for (std::int64_t k = 0; k < 4; ++k) CHECK(l2[b * 4 + k] == l1[perm[b] * 4 + k]);
    }
}

TEST_CASE("zeroed output projections make every block an identity map") {
    ModelConfig deep_cfg = preset_config("qformer-micro-p");
    deep_cfg.depths = {3};
    ModelConfig shallow_cfg = deep_cfg;
    shallow_cfg.depths = {1};
    Model<double> deep(deep_cfg, 11);
    Model<double> shallow(shallow_cfg, 12);
    // align the embed/head parameters, zero every block's output projections
    for (const char* nm : {"patch_embed.w", "patch_embed.b", "patch_embed.norm.g", "patch_embed.norm.b",
                           "head.norm.g", "head.norm.b", "head.w", "head.b"}) {
        shallow.param(nm) = deep.param(nm);
    }
    for (auto* m : {&deep, &shallow}) {
        for (auto& p : m->params()) {
            if (p.name.find("attn.wo") != std::string::npos || p.name.find("attn.bo") != std::string::npos ||
                p.name.find("ffn.w2") != std::string::npos || p.name.find("ffn.b2") != std::string::npos) {
                std::fill(p.value.data.begin(), p.value.data.end(), 0.0);
            }
        }
    }
    Rng rng(7);
    DenseArray<double> batch = random_batch(rng, 2, 16, 1);
    Tape<double> t1, t2;
    auto l1 = deep.forward(t1, batch).logits.value();
    auto l2 = shallow.forward(t2, batch).logits.value();
    CHECK(max_abs_diff(l1, l2) < 1e-12);
}

TEST_CASE("checkpoint save/load round-trips bytes and forward results exactly") {
    ModelConfig cfg = preset_config("qformer-micro-h");
    Model<float> model(cfg, 77);
    // give the quad head nonzero content so the round trip is nontrivial
    Rng rng(8);
    for (auto& p : model.params()) {
        if (p.name.find("quad") != std::string::npos) {
            for (auto& v : p.value.data) v = static_cast<float>(rng.normal() * 0.05);
        }
    }
    const std::string p1 = "ckpt_roundtrip_a.bin", p2 = "ckpt_roundtrip_b.bin";
    save_model(model, p1);
    Model<float> loaded = load_model<float>(p1);
    save_model(loaded, p2);

    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    CHECK(!b1.empty());

    DenseArray<float> batch({1, 16, 16, 1});
    Rng rng2(3);
    for (auto& v : batch.data) v = static_cast<float>(rng2.uniform());
    Tape<float> t1, t2;
    auto l1 = model.forward(t1, batch).logits.value();
    auto l2 = loaded.forward(t2, batch).logits.value();
    CHECK(max_abs_diff(l1, l2) == 0.0);
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("checkpoint error paths: bad magic, unknown name, missing parameter") {
    ModelConfig cfg = preset_config("qformer-micro-h");
    Model<float> model(cfg, 1);
    const std::string path = "ckpt_errors.bin";
    save_model(model, path);
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    {
        std::string corrupt = bytes;
        corrupt[0] = 'X';
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        os.write(corrupt.data(), static_cast<std::streamsize>(corrupt.size()));
        os.close();
        CHECK_THROWS_WITH_AS(load_model<float>(path), doctest::Contains("magic"), IoError);
    }
    {
        // rename the first parameter (same length) -> unknown parameter
        std::string corrupt = bytes;
        const auto pos = corrupt.find("patch_embed.w");
        REQUIRE(pos != std::string::npos);
        corrupt.replace(pos, 13, "patch_embed.X");
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        os.write(corrupt.data(), static_cast<std::streamsize>(corrupt.size()));
        os.close();
        CHECK_THROWS_WITH_AS(load_model<float>(path), doctest::Contains("patch_embed.X"), IoError);
    }
    {
        // drop the last parameter by decrementing the count -> missing key
        std::string corrupt = bytes;
        const auto cfg_len_off = 8 + 4;
        std::uint64_t cfg_len;
        std::memcpy(&cfg_len, corrupt.data() + cfg_len_off, 8);
        const auto count_off = cfg_len_off + 8 + cfg_len;
        std::uint64_t count;
        std::memcpy(&count, corrupt.data() + count_off, 8);
        count -= 1;
        std::memcpy(corrupt.data() + count_off, &count, 8);
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        os.write(corrupt.data(), static_cast<std::streamsize>(corrupt.size()));
        os.close();
        CHECK_THROWS_WITH_AS(load_model<float>(path), doctest::Contains("missing parameter"), IoError);
    }
    std::remove(path.c_str());
}

TEST_CASE("full-model gradient check stays under 1e-3") {
    ModelCheckResult r = model_gradcheck(preset_config("qformer-micro-h"), 2024, 5);
    INFO("rel err ", r.max_rel_err);
    CHECK(r.max_rel_err < 1e-3);
}

TEST_CASE("config validation enumerates every problem") {
    ModelConfig cfg;
    cfg.depths = {2, 2};
    cfg.channels = {16};  // length mismatch
    cfg.heads = {3, 5};
    cfg.mlp_ratio = -1.0;
    cfg.window = 0;
    cfg.num_classes = 1;
    try {
        cfg.validate();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("equal length") != std::string::npos);
        CHECK(msg.find("mlp_ratio") != std::string::npos);
        CHECK(msg.find("window") != std::string::npos);
        CHECK(msg.find("num_classes") != std::string::npos);
    }
}
