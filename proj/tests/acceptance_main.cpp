// Acceptance suite: runs every advertised guarantee end to end and prints one
// pass/fail line per criterion. Exit code is the number of failed criteria.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "qa/analysis.hpp"
#include "qa/commands.hpp"
#include "qa/flops.hpp"
#include "qa/gradcheck.hpp"
#include "qa/train.hpp"
#include "support/geometry_oracle.hpp"

using namespace qa;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            if (!detail.empty()) detail += "; ";
            detail += what;
        }
    }
};

double elapsed_s(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string sci(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3e", v);
    return buf;
}

AttentionWeights<double> shared_weights(Tape<double>& tp, Rng& rng, std::int64_t C, std::int64_t N) {
    AttentionWeights<double> wt;
    wt.num_heads = N;
    wt.wq = tp.constant(DenseArray<double>::randn({C, C}, rng, 0.4));
    wt.bq = tp.constant(DenseArray<double>::randn({C}, rng, 0.1));
    wt.wk = tp.constant(DenseArray<double>::randn({C, C}, rng, 0.4));
    wt.bk = tp.constant(DenseArray<double>::randn({C}, rng, 0.1));
    wt.wv = tp.constant(DenseArray<double>::randn({C, C}, rng, 0.4));
    wt.bv = tp.constant(DenseArray<double>::randn({C}, rng, 0.1));
    wt.wo = tp.constant(DenseArray<double>::randn({C, C}, rng, 0.4));
    wt.bo = tp.constant(DenseArray<double>::randn({C}, rng, 0.1));
    wt.quad_w = tp.constant(DenseArray<double>::zeros({C, 9 * N}));
    wt.quad_b = tp.constant(DenseArray<double>::zeros({9 * N}));
    return wt;
}

// 1. QA with a zero-initialized prediction head equals window attention.
Outcome criterion_identity() {
    Outcome out;
    Rng rng(1001);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        Tape<double> tp;
        const std::int64_t C = 8, N = 2, w = 2;
        const std::int64_t H = 4 + static_cast<std::int64_t>(rng.below(5));
        const std::int64_t W = 4 + static_cast<std::int64_t>(rng.below(5));
        Node<double> x = tp.constant(DenseArray<double>::randn({2, H, W, C}, rng));
        AttentionWeights<double> wt = shared_weights(tp, rng, C, N);
        AttnOpts opts;
        opts.use_rel_bias = false;
        AttentionOutput<double> qa = quadrangle_attention(x, wt, w, opts);
        AttentionOutput<double> base = window_attention(x, wt, w, opts);
        worst = std::max(worst, max_abs_diff(qa.features.value(), base.features.value()));
    }
    out.require(worst < 1e-10, "max abs diff " + sci(worst));
    out.detail = "max abs diff over 20 inputs = " + sci(worst);
    return out;
}

// 2. Composed transforms and projected coordinates match the brute-force oracle.
Outcome criterion_geometry() {
    Outcome out;
    Rng rng(1002);
    const std::int64_t w = 3, H = 9, W = 6;
    auto centers = window_centers(H, W, w);
    const std::int64_t nW = centers.meta.num_windows();
    auto rel = relative_coord_columns<double>(w);
    double worst_mat = 0.0, worst_coord = 0.0;
    int done = 0;
    while (done < 1000) {
        double t[9];
        for (auto& v : t) v = rng.normal() * 0.4;
        t[7] *= 0.15;
        t[8] *= 0.15;
        qa_test::Mat3 want = qa_test::oracle_transform(t, static_cast<double>(W) / w, static_cast<double>(H) / w);
        bool safe = true;
        for (std::int64_t p = 0; p < w * w && safe; ++p) {
            if (std::abs(want[2][0] * rel[p] + want[2][1] * rel[w * w + p] + want[2][2]) < 0.05) safe = false;
        }
        if (!safe) continue;
        ++done;

        DenseArray<double> tfull({1, nW, 1, 9});
        for (std::int64_t wi = 0; wi < nW; ++wi) {
            for (int k = 0; k < 9; ++k) tfull[wi * 9 + k] = t[k];
        }
        Tape<double> tp;
        Node<double> T =
            build_transform(tp.constant(tfull), static_cast<double>(W) / w, static_cast<double>(H) / w);
        const auto& tv = T.value();
        for (std::int64_t wi = 0; wi < nW; ++wi) {
            for (int i = 0; i < 3; ++i) {
                for (int j = 0; j < 3; ++j) {
                    worst_mat = std::max(worst_mat, std::abs(tv[(wi * 9) + i * 3 + j] - want[i][j]));
                }
            }
        }
        const auto coords = project_coords(T, centers, w).value();
        for (std::int64_t wi = 0; wi < nW; ++wi) {
            const auto [cx, cy] = centers.xy[static_cast<std::size_t>(wi)];
            for (std::int64_t p = 0; p < w * w; ++p) {
                auto [qx, qy] = qa_test::oracle_project(want, rel[p], rel[w * w + p]);
                worst_coord = std::max(worst_coord, std::abs(coords[(wi * w * w + p) * 2] - (qx + cx)));
                worst_coord = std::max(worst_coord, std::abs(coords[(wi * w * w + p) * 2 + 1] - (qy + cy)));
            }
        }
    }
    out.require(worst_mat < 1e-12, "matrix diff " + sci(worst_mat));
    out.require(worst_coord < 1e-12, "coordinate diff " + sci(worst_coord));
    out.detail = "matrix diff " + sci(worst_mat) + ", coordinate diff " + sci(worst_coord);
    return out;
}

// 3. The gradient suite: every op plus the full micro model.
Outcome criterion_gradients() {
    Outcome out;
    double worst_op = 0.0;
    for (const OpCheckResult& r : standard_op_checks(1003)) {
        worst_op = std::max(worst_op, r.max_rel_err);
        out.require(r.pass, r.name + " rel err " + sci(r.max_rel_err));
    }
    ModelCheckResult mr = model_gradcheck(preset_config("qformer-micro-h"), 1003, 5);
    out.require(mr.max_rel_err < 1e-3, "model rel err " + sci(mr.max_rel_err));
    out.detail = "worst op rel err " + sci(worst_op) + ", model rel err " + sci(mr.max_rel_err);
    return out;
}

// 4. Regularization: exact zero inside, exact value at u=2, restoring gradient.
Outcome criterion_regularization() {
    Outcome out;
    Tape<double> tp;
    auto centers = window_centers(8, 8, 2);
    DenseArray<double> t({1, centers.meta.num_windows(), 1, 9});
    Node<double> coords = project_coords(build_transform(tp.constant(t), 4.0, 4.0), centers, 2);
    const double inside = reg_loss(coords, 8, 8, RegConfig{1.0}).value()[0];
    out.require(inside == 0.0, "in-bounds loss " + std::to_string(inside));

    DenseArray<double> one({1, 1, 1, 1, 2}, {6.0, 2.0});  // u_x = 2 on a width-5 map
    const double contrib = reg_loss(tp.constant(one), 5, 5, RegConfig{1.0}).value()[0];
    out.require(contrib == 2.0, "u=2 contribution " + std::to_string(contrib));

    Rng rng(1004);
    int checked = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::int64_t H = 6 + static_cast<std::int64_t>(rng.below(10));
        const std::int64_t W = 6 + static_cast<std::int64_t>(rng.below(10));
        DenseArray<double> pts({1, 1, 1, 8, 2});
        for (std::int64_t i = 0; i < pts.numel(); ++i) pts[i] = rng.uniform(-12.0, 24.0);
        Tape<double> tp2;
        Node<double> c = tp2.variable(pts);
        tp2.backward(reg_loss(c, H, W, RegConfig{1.0}));
        const auto& g = c.grad();
        for (std::int64_t p = 0; p < 8; ++p) {
            const double x = pts[p * 2], y = pts[p * 2 + 1];
            if (x < 0.0) out.require(g[p * 2] < 0.0, "x below map not pushed up");
            if (x > static_cast<double>(W - 1)) out.require(g[p * 2] > 0.0, "x above map not pushed down");
            if (y < 0.0) out.require(g[p * 2 + 1] < 0.0, "y below map not pushed up");
            if (y > static_cast<double>(H - 1)) out.require(g[p * 2 + 1] > 0.0, "y above map not pushed down");
            ++checked;
        }
    }
    out.detail = "in-bounds loss 0, u=2 contribution 2, " + std::to_string(checked) + " gradient sign checks";
    return out;
}

// 5. Complexity accounting against the closed form.
Outcome criterion_complexity() {
    Outcome out;
    FlopsReport pb = count_flops(preset_config("qformer-p-b"), 224, 224);
    out.require(pb.ratio_extra_total <= 0.001,
                "plain-B ratio " + sci(pb.ratio_extra_total));
    struct Case {
        const char* name;
        std::int64_t input;
    };
    double worst_gap = 0.0, worst_ratio = 0.0;
    for (const Case& c : {Case{"qformer-micro-h", 32}, Case{"qformer-micro-p", 32}, Case{"qformer-h-t", 224},
                          Case{"qformer-p-b", 224}}) {
        FlopsReport rep = count_flops(preset_config(c.name), c.input, c.input);
        worst_ratio = std::max(worst_ratio, rep.ratio_extra_total);
        out.require(rep.ratio_extra_total <= 0.05,
                    std::string(c.name) + " ratio " + sci(rep.ratio_extra_total));
        for (const LayerFlops& lf : rep.layers) {
            const double gap = std::abs(lf.cpe + lf.qa_extra - lf.predicted_extra) / lf.predicted_extra;
            worst_gap = std::max(worst_gap, gap);
            out.require(gap < 0.02, std::string(c.name) + " closed-form gap " + sci(gap));
        }
    }
    out.detail = "plain-B ratio " + sci(pb.ratio_extra_total) + ", worst shipped ratio " + sci(worst_ratio) +
                 ", worst closed-form gap " + sci(worst_gap);
    return out;
}

// 6. Comparative training on the oriented-bars task: QA vs its frozen-t twin,
// three seeds, plus scale-factor engagement of the trained QA models.
Outcome criterion_training() {
    Outcome out;
    SynthSpec spec;
    Dataset train_ds = generate_split(spec, 0, spec.train_count);
    Dataset test_ds = generate_split(spec, spec.train_count, spec.test_count);

    double qa_sum = 0.0, twin_sum = 0.0;
    std::string accs;
    bool engagement_all = true;
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        TrainConfig cfg;
        cfg.model = preset_config("qformer-micro-h");
        cfg.epochs = 40;
        cfg.batch_size = 64;
        cfg.warmup_epochs = 2;
        cfg.seed = seed;

        TrainResult qa_run = run_training(cfg, "acceptance_qa_" + std::to_string(seed), train_ds, test_ds);
        cfg.freeze_quad = true;
        TrainResult twin_run = run_training(cfg, "acceptance_twin_" + std::to_string(seed), train_ds, test_ds);
        qa_sum += qa_run.best_test_acc;
        twin_sum += twin_run.best_test_acc;
        accs += " seed" + std::to_string(seed) + ": qa=" + std::to_string(qa_run.best_test_acc) +
                " twin=" + std::to_string(twin_run.best_test_acc);

        // mean scale factor per (layer, head) over a handful of test images
        Model<float> best = load_model<float>(qa_run.best_ckpt);
        std::map<std::pair<int, int>, std::pair<double, double>> sums;
        std::map<std::pair<int, int>, std::int64_t> counts;
        for (int i = 0; i < 16; ++i) {
            DenseArray<float> img({1, spec.image_size, spec.image_size, 1});
            const float* src = test_ds.image(i);
            std::copy(src, src + spec.image_size * spec.image_size, img.data.begin());
            for (const QuadRecord& q : export_quads(best, img)) {
                auto key = std::make_pair(static_cast<int>(q.layer_index), static_cast<int>(q.head));
                sums[key].first += q.scale_x;
                sums[key].second += q.scale_y;
                counts[key]++;
            }
        }
        bool engaged = false;
        for (const auto& [key, s] : sums) {
            const double mx = s.first / static_cast<double>(counts[key]);
            const double my = s.second / static_cast<double>(counts[key]);
            if (mx < 0.95 || mx > 1.05 || my < 0.95 || my > 1.05) engaged = true;
        }
        engagement_all = engagement_all && engaged;
        for (const char* d : {"acceptance_qa_", "acceptance_twin_"}) {
            std::filesystem::remove_all(d + std::to_string(seed));
        }
    }
    const double qa_mean = qa_sum / 3.0, twin_mean = twin_sum / 3.0;
    out.require(qa_mean >= twin_mean - 0.01,
                "mean qa acc " + std::to_string(qa_mean) + " < twin - 1% (" + std::to_string(twin_mean) + ")");
    out.require(engagement_all, "a trained QA model kept every head's mean scale inside [0.95, 1.05]");
    out.detail = "mean qa acc " + std::to_string(qa_mean) + ", mean twin acc " + std::to_string(twin_mean) + "," +
                 accs + (engagement_all ? "; scale engagement in every seed" : "");
    return out;
}

// 7. Attention distance: scale-2 quadrangles exceed the window bound; the
// window baseline never does.
Outcome criterion_distance() {
    Outcome out;
    const double bound = window_distance_bound(2);

    ModelConfig cfg = preset_config("qformer-micro-h");
    Model<float> model(cfg, 6);
    for (auto& p : model.params()) {
        if (p.name.find("attn.wk") != std::string::npos || p.name.find("attn.bk") != std::string::npos) {
            std::fill(p.value.data.begin(), p.value.data.end(), 0.0f);  // uniform attention
        }
        if (p.name.find("attn.quad.b") != std::string::npos) {
            for (std::int64_t n = 0; n < p.value.numel() / 9; ++n) {
                p.value[n * 9 + 0] = 1.0f;
                p.value[n * 9 + 1] = 1.0f;
            }
        }
    }
    Rng rng(1007);
    DenseArray<float> batch({1, 32, 32, 1});
    for (auto& v : batch.data) v = static_cast<float>(rng.uniform());
    double qa_min = 1e30;
    for (const LayerDistance& ld : attention_distance(model, batch)) qa_min = std::min(qa_min, ld.mean);
    out.require(qa_min > bound, "scale-2 QA distance " + std::to_string(qa_min) + " <= bound");

    // per-query distances of the window baseline never exceed (w-1)*sqrt(2)
    const std::int64_t C = 8, N = 2, w = 2;
    auto rel = relative_coord_columns<double>(w);
    double win_max = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        Tape<double> tp;
        Node<double> x = tp.constant(DenseArray<double>::randn({1, 4, 4, C}, rng));
        AttentionWeights<double> wt = shared_weights(tp, rng, C, N);
        wt.rel_pos_bias = tp.constant(DenseArray<double>::randn({N, 9}, rng, 0.5));
        AttnOpts opts;
        opts.retain_probs = true;
        AttentionOutput<double> at = window_attention(x, wt, w, opts);
        const auto& probs = at.attn_probs.value();  // (1,nW,N,4,4)
        const std::int64_t nW = probs.shape[1];
        for (std::int64_t wi = 0; wi < nW; ++wi) {
            for (std::int64_t n = 0; n < N; ++n) {
                for (std::int64_t q = 0; q < 4; ++q) {
                    double d = 0.0;
                    for (std::int64_t k = 0; k < 4; ++k) {
                        d += probs[(((wi)*N + n) * 4 + q) * 4 + k] *
                             std::hypot(rel[q] - rel[k], rel[4 + q] - rel[4 + k]);
                    }
                    win_max = std::max(win_max, d);
                }
            }
        }
    }
    out.require(win_max <= bound + 1e-9, "window distance " + std::to_string(win_max) + " exceeded the bound");
    out.detail = "scale-2 QA min layer distance " + std::to_string(qa_min) + " > bound " + std::to_string(bound) +
                 "; window max per-query distance " + std::to_string(win_max);
    return out;
}

// 8. Round trips: windowing, checkpoints, dataset generation.
Outcome criterion_roundtrips() {
    Outcome out;
    Rng rng(1008);
    for (int trial = 0; trial < 50; ++trial) {
        const std::int64_t H = 1 + static_cast<std::int64_t>(rng.below(12));
        const std::int64_t W = 1 + static_cast<std::int64_t>(rng.below(12));
        const std::int64_t w = 1 + static_cast<std::int64_t>(rng.below(5));
        auto map = DenseArray<double>::randn({2, H, W, 3}, rng);
        auto g = partition(map, w);
        out.require(max_abs_diff(merge(g, H, W), map) == 0.0, "partition/merge not exact");
    }

    Model<float> model(preset_config("qformer-micro-h"), 99);
    Rng prng(4);
    for (auto& p : model.params()) {
        for (auto& v : p.value.data) v += static_cast<float>(prng.normal() * 0.01);
    }
    save_model(model, "acceptance_ckpt.bin");
    Model<float> loaded = load_model<float>("acceptance_ckpt.bin");
    save_model(loaded, "acceptance_ckpt2.bin");
    std::ifstream f1("acceptance_ckpt.bin", std::ios::binary), f2("acceptance_ckpt2.bin", std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    out.require(!b1.empty() && b1 == b2, "checkpoint round trip not byte-identical");
    std::remove("acceptance_ckpt.bin");
    std::remove("acceptance_ckpt2.bin");

    SynthSpec spec;
    spec.train_count = 128;
    Dataset a = generate_split(spec, 0, 128);
    Dataset b = generate_split(spec, 0, 128);
    out.require(dataset_checksum(a) == dataset_checksum(b) && a.images == b.images,
                "dataset generation not bit-reproducible");
    out.detail = "50 window round trips, checkpoint bytes stable, dataset checksum stable";
    return out;
}

}  // namespace

int main() {
    struct Entry {
        int id;
        const char* name;
        Outcome (*run)();
        double budget_s;  // 0 = unconstrained
    };
    const Entry entries[] = {
        {1, "identity reduction: zero-initialized QA equals window attention", criterion_identity, 10.0},
        {2, "geometry matches the brute-force homogeneous-coordinates oracle", criterion_geometry, 5.0},
        {3, "gradient suite: every op and the full micro model", criterion_gradients, 120.0},
        {4, "regularization: exact values and restoring gradients", criterion_regularization, 0.0},
        {5, "complexity: quadrangle overhead ratios and closed form", criterion_complexity, 0.0},
        {6, "comparative training: QA vs frozen twin with scale engagement", criterion_training, 1800.0},
        {7, "attention distance: QA exceeds the window bound, baseline never does", criterion_distance, 0.0},
        {8, "round trips: windowing, checkpoints, dataset generation", criterion_roundtrips, 0.0},
    };

    int failures = 0;
    for (const Entry& e : entries) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = e.run();
        } catch (const std::exception& ex) {
            out.pass = false;
            out.detail = std::string("exception: ") + ex.what();
        }
        const double sec = elapsed_s(t0);
        if (e.budget_s > 0.0 && sec > e.budget_s) {
            out.pass = false;
            out.detail += "; exceeded the " + std::to_string(e.budget_s) + "s budget";
        }
        std::printf("[%s] criterion %d: %s (%.1fs) — %s\n", out.pass ? "PASS" : "FAIL", e.id, e.name, sec,
                    out.detail.c_str());
        std::fflush(stdout);
        if (!out.pass) ++failures;
    }
    std::printf("%d/8 criteria passed\n", 8 - failures);
    return failures;
}
