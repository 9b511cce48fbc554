#include "qa/gradcheck.hpp"

namespace qa {

namespace {

using detail::avoid_kinks;
using detail::project_loss;
using detail::rand_array;

struct Check {
    std::string name;
    double tol;
    std::function<double(Rng&)> run;
};

// Keeps every sampled coordinate at least `margin` away from the integer
// lattice so bilinear gradients are two-sided.
void off_lattice(DenseArray<double>& coords, Rng& rng, double lo, double hi, double margin = 5e-3) {
    for (std::int64_t i = 0; i < coords.numel(); ++i) {
        double v = rng.uniform(lo, hi);
        while (std::abs(v - std::round(v)) < margin) v = rng.uniform(lo, hi);
        coords[i] = v;
    }
}

std::vector<Check> make_checks() {
    std::vector<Check> checks;
    auto add_check = [&](std::string name, std::function<double(Rng&)> fn, double tol = 1e-4) {
        checks.push_back({std::move(name), tol, std::move(fn)});
    };

    add_check("matmul", [](Rng& rng) {
        auto a = rand_array({3, 4}, rng), b = rand_array({4, 2}, rng);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) {
                return project_loss(tp, matmul(in[0], in[1]), pseed);
            },
            {a, b}, {0, 1});
    });

    add_check("matmul_batched_broadcast", [](Rng& rng) {
        auto a = rand_array({2, 3, 2, 4}, rng), b = rand_array({3, 4, 2}, rng);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) {
                return project_loss(tp, matmul(in[0], in[1]), pseed);
            },
            {a, b}, {0, 1});
    });

    add_check("add_broadcast", [](Rng& rng) {
        auto a = rand_array({2, 3, 4}, rng), b = rand_array({4}, rng);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) { return project_loss(tp, add(in[0], in[1]), pseed); },
            {a, b}, {0, 1});
    });

    add_check("sub_broadcast", [](Rng& rng) {
        auto a = rand_array({2, 5}, rng), b = rand_array({5}, rng);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) { return project_loss(tp, sub(in[0], in[1]), pseed); },
            {a, b}, {0, 1});
    });

    add_check("mul_broadcast", [](Rng& rng) {
        auto a = rand_array({2, 3, 4}, rng), b = rand_array({3, 4}, rng);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) { return project_loss(tp, mul(in[0], in[1]), pseed); },
            {a, b}, {0, 1});
    });

    add_check("scale_add_scalar", [](Rng& rng) {
        auto a = rand_array({7}, rng);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) {
                return project_loss(tp, add_scalar(scale(in[0], 1.7), -0.3), pseed);
            },
            {a}, {0});
    });

    add_check("softmax", [](Rng& rng) {
        auto a = rand_array({3, 7}, rng);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) { return project_loss(tp, softmax(in[0], -1), pseed); },
            {a}, {0});
    });

    add_check("softmax_axis0", [](Rng& rng) {
        auto a = rand_array({4, 3, 2}, rng);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) { return project_loss(tp, softmax(in[0], 0), pseed); },
            {a}, {0});
    });

    add_check("leaky_relu", [](Rng& rng) {
        auto a = rand_array({4, 5}, rng);
        avoid_kinks(a, rng, {0.0});
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) {
                return project_loss(tp, leaky_relu(in[0], 0.01), pseed);
            },
            {a}, {0});
    });

    add_check("gelu", [](Rng& rng) {
        auto a = rand_array({4, 5}, rng);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) { return project_loss(tp, gelu(in[0]), pseed); }, {a},
            {0});
    });

    add_check("sin", [](Rng& rng) {
        auto a = rand_array({3, 3}, rng);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) { return project_loss(tp, sin_op(in[0]), pseed); }, {a},
            {0});
    });

    add_check("cos", [](Rng& rng) {
        auto a = rand_array({3, 3}, rng);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) { return project_loss(tp, cos_op(in[0]), pseed); }, {a},
            {0});
    });

    add_check("reciprocal", [](Rng& rng) {
        auto a = rand_array({4, 4}, rng);
        for (std::int64_t i = 0; i < a.numel(); ++i) {
            while (std::abs(a[i]) < 0.2) a[i] = rng.normal();
        }
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) { return project_loss(tp, reciprocal(in[0]), pseed); },
            {a}, {0});
    });

    add_check("clamped_reciprocal", [](Rng& rng) {
        auto a = rand_array({4, 4}, rng);
        for (std::int64_t i = 0; i < a.numel(); ++i) {
            while (std::abs(a[i]) < 0.05) a[i] = rng.normal();
        }
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) {
                return project_loss(tp, clamped_reciprocal(in[0], 1e-4), pseed);
            },
            {a}, {0});
    });

    add_check("layer_norm", [](Rng& rng) {
        auto a = rand_array({3, 6}, rng);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) {
                return project_loss(tp, layer_norm(in[0], 1e-5), pseed);
            },
            {a}, {0});
    });

    add_check("mean_pool2d", [](Rng& rng) {
        auto a = rand_array({2, 4, 6, 3}, rng);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) {
                return project_loss(tp, mean_pool2d(in[0], 2, 2), pseed);
            },
            {a}, {0});
    });

    add_check("pad2d", [](Rng& rng) {
        auto a = rand_array({1, 3, 4, 2}, rng);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) { return project_loss(tp, pad2d(in[0], 2, 1), pseed); },
            {a}, {0});
    });

    add_check("depthwise_conv2d", [](Rng& rng) {
        auto x = rand_array({2, 5, 5, 3}, rng);
        auto k = rand_array({3, 3, 3}, rng);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) {
                return project_loss(tp, depthwise_conv2d(in[0], in[1]), pseed);
            },
            {x, k}, {0, 1});
    });

    add_check("linear", [](Rng& rng) {
        auto x = rand_array({2, 3, 5}, rng);
        auto w = rand_array({5, 4}, rng);
        auto b = rand_array({4}, rng);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) {
                return project_loss(tp, linear(in[0], in[1], in[2]), pseed);
            },
            {x, w, b}, {0, 1, 2});
    });

    add_check("cross_entropy", [](Rng& rng) {
        auto logits = rand_array({4, 5}, rng);
        std::vector<std::int64_t> labels{0, 3, 2, 4};
        return finite_diff_check(
            [labels](Tape<double>&, std::vector<Node<double>>& in) { return cross_entropy(in[0], labels); }, {logits},
            {0});
    });

    add_check("mean_axis", [](Rng& rng) {
        auto a = rand_array({2, 3, 4}, rng);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) { return project_loss(tp, mean_axis(in[0], 1), pseed); },
            {a}, {0});
    });

    add_check("structural_reshape_permute_narrow_concat", [](Rng& rng) {
        auto a = rand_array({2, 3, 4}, rng);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) {
                Node<double> y = permute(reshape(in[0], {3, 2, 4}), {1, 0, 2});
                Node<double> z = concat(std::vector<Node<double>>{narrow(y, 2, 0, 2), narrow(y, 2, 2, 2)}, 2);
                return project_loss(tp, z, pseed);
            },
            {a}, {0});
    });

    add_check("gather_last", [](Rng& rng) {
        auto table = rand_array({3, 9}, rng);
        std::vector<std::int64_t> idx{0, 4, 4, 8, 2, 7};
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed, idx](Tape<double>& tp, std::vector<Node<double>>& in) {
                return project_loss(tp, gather_last(in[0], idx), pseed);
            },
            {table}, {0});
    });

    add_check("space_to_depth", [](Rng& rng) {
        auto a = rand_array({1, 4, 4, 2}, rng);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) {
                return project_loss(tp, space_to_depth(in[0], 2), pseed);
            },
            {a}, {0});
    });

    add_check("window_partition_merge", [](Rng& rng) {
        auto a = rand_array({1, 5, 5, 2}, rng);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) {
                WindowGridMeta m;
                Node<double> wins = window_partition(in[0], 2, &m);
                Node<double> back = window_merge(wins, m, 5, 5);
                return project_loss(tp, back, pseed);
            },
            {a}, {0});
    });

    add_check("bilinear_sample_feature", [](Rng& rng) {
        auto f = rand_array({1, 2, 4, 5, 3}, rng);
        auto c = DenseArray<double>({1, 2, 2, 3, 2});
        off_lattice(c, rng, -1.5, 5.5);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed, c](Tape<double>& tp, std::vector<Node<double>>& in) {
                return project_loss(tp, bilinear_sample(in[0], tp.constant(c)), pseed);
            },
            {f}, {0});
    });

    add_check("bilinear_sample_coords", [](Rng& rng) {
        auto f = rand_array({1, 2, 4, 5, 3}, rng);
        auto c = DenseArray<double>({1, 2, 2, 3, 2});
        off_lattice(c, rng, -1.5, 5.5);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed, f](Tape<double>& tp, std::vector<Node<double>>& in) {
                return project_loss(tp, bilinear_sample(tp.constant(f), in[0]), pseed);
            },
            {c}, {0});
    });

    add_check("predict_params", [](Rng& rng) {
        auto x = rand_array({1, 4, 4, 3}, rng);
        for (std::int64_t i = 0; i < x.numel(); ++i) x[i] += 2.0;  // pooled means away from the LeakyReLU kink
        auto w = rand_array({3, 18}, rng, 0.5);
        auto b = rand_array({18}, rng, 0.2);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) {
                return project_loss(tp, predict_params(in[0], in[1], in[2], 2, 2), pseed);
            },
            {x, w, b}, {0, 1, 2});
    });

    add_check("build_transform", [](Rng& rng) {
        auto t = rand_array({1, 2, 2, 9}, rng, 0.3);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) {
                return project_loss(tp, build_transform(in[0], 2.0, 3.0), pseed);
            },
            {t}, {0});
    });

    add_check("project_coords_wrt_t", [](Rng& rng) {
        auto t = rand_array({1, 4, 2, 9}, rng, 0.3);
        // keep the projective row small so z stays away from 0
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            if (i % 9 == 7 || i % 9 == 8) t[i] *= 0.1;
        }
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) {
                Node<double> T = build_transform(in[0], 4.0, 4.0);
                Node<double> coords = project_coords(T, window_centers(4, 4, 2), 2);
                return project_loss(tp, coords, pseed);
            },
            {t}, {0});
    });

    add_check("reg_loss", [](Rng& rng) {
        const std::int64_t H = 6, W = 8;
        auto c = DenseArray<double>({1, 3, 2, 4, 2});
        for (std::int64_t p = 0; p < c.numel() / 2; ++p) {
            // spread around the map, resampling near the +-1 normalized kinks
            auto draw = [&rng](double extent) {
                double v = rng.uniform(-extent, 2.0 * extent);
                while (std::abs(v) < 0.05 || std::abs(v - (extent - 1.0)) < 0.05) v = rng.uniform(-extent, 2.0 * extent);
                return v;
            };
            c[p * 2] = draw(static_cast<double>(W));
            c[p * 2 + 1] = draw(static_cast<double>(H));
        }
        return finite_diff_check(
            [H, W](Tape<double>&, std::vector<Node<double>>& in) {
                return reg_loss(in[0], H, W, RegConfig{0.7});
            },
            {c}, {0});
    });

    add_check("attention_window", [](Rng& rng) {
        const std::int64_t C = 4, N = 2, w = 2;
        std::vector<DenseArray<double>> ins;
        ins.push_back(rand_array({1, 4, 4, C}, rng));                  // x
        for (int i = 0; i < 4; ++i) {
            ins.push_back(rand_array({C, C}, rng, 0.5));
            ins.push_back(rand_array({C}, rng, 0.2));
        }
        ins.push_back(rand_array({N, (2 * w - 1) * (2 * w - 1)}, rng, 0.3));  // bias table
        const std::uint64_t pseed = rng.next_u64();
        std::vector<std::size_t> which(ins.size());
        for (std::size_t i = 0; i < ins.size(); ++i) which[i] = i;
        return finite_diff_check(
            [pseed, N, w](Tape<double>& tp, std::vector<Node<double>>& in) {
                AttentionWeights<double> wt;
                wt.num_heads = N;
                wt.wq = in[1]; wt.bq = in[2];
                wt.wk = in[3]; wt.bk = in[4];
                wt.wv = in[5]; wt.bv = in[6];
                wt.wo = in[7]; wt.bo = in[8];
                wt.rel_pos_bias = in[9];
                return project_loss(tp, window_attention(in[0], wt, w).features, pseed);
            },
            ins, which);
    });

    add_check("attention_quad", [](Rng& rng) {
        const std::int64_t C = 4, N = 2, w = 2;
        std::vector<DenseArray<double>> ins;
        ins.push_back(rand_array({1, 4, 4, C}, rng));  // x
        for (int i = 0; i < 4; ++i) {
            ins.push_back(rand_array({C, C}, rng, 0.5));
            ins.push_back(rand_array({C}, rng, 0.2));
        }
        ins.push_back(rand_array({C, 9 * N}, rng, 0.05));  // quad conv weight
        // fixed offsets keep every sampled coordinate off the integer lattice
        auto qb = DenseArray<double>::zeros({9 * N});
        for (std::int64_t n = 0; n < N; ++n) {
            qb[n * 9 + 0] = 0.17;
            qb[n * 9 + 4] = 0.23 + 0.1 * static_cast<double>(n);
            qb[n * 9 + 5] = 0.11;
            qb[n * 9 + 6] = 0.13;
        }
        ins.push_back(qb);
        const std::uint64_t pseed = rng.next_u64();
        std::vector<std::size_t> which(ins.size());
        for (std::size_t i = 0; i < ins.size(); ++i) which[i] = i;
        return finite_diff_check(
            [pseed, N, w](Tape<double>& tp, std::vector<Node<double>>& in) {
                AttentionWeights<double> wt;
                wt.num_heads = N;
                wt.wq = in[1]; wt.bq = in[2];
                wt.wk = in[3]; wt.bk = in[4];
                wt.wv = in[5]; wt.bv = in[6];
                wt.wo = in[7]; wt.bo = in[8];
                wt.quad_w = in[9];
                wt.quad_b = in[10];
                AttentionOutput<double> out = quadrangle_attention(in[0], wt, w);
                return project_loss(tp, out.features, pseed);
            },
            ins, which);
    });

    add_check("cpe", [](Rng& rng) {
        auto x = rand_array({1, 5, 5, 3}, rng);
        auto k = rand_array({3, 3, 3}, rng, 0.3);
        auto b = rand_array({3}, rng, 0.1);
        const std::uint64_t pseed = rng.next_u64();
        return finite_diff_check(
            [pseed](Tape<double>& tp, std::vector<Node<double>>& in) {
                return project_loss(tp, cpe(in[0], in[1], in[2]), pseed);
            },
            {x, k, b}, {0, 1, 2});
    });

    return checks;
}

}  // namespace

std::vector<OpCheckResult> standard_op_checks(std::uint64_t seed) {
    std::vector<OpCheckResult> results;
    Rng rng(seed);
    for (const Check& c : make_checks()) {
        Rng local(rng.next_u64());
        OpCheckResult r;
        r.name = c.name;
        r.tol = c.tol;
        r.max_rel_err = c.run(local);
        r.pass = r.max_rel_err < c.tol;
        results.push_back(std::move(r));
    }
    return results;
}

}  // namespace qa
