#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>

#include "qa/flops.hpp"
#include "qa/synth_data.hpp"

using namespace qa;

TEST_CASE("same spec generates bit-identical datasets") {
    SynthSpec spec;
    spec.train_count = 64;
    spec.test_count = 16;
    Dataset a = generate_split(spec, 0, 64);
    Dataset b = generate_split(spec, 0, 64);
    CHECK(dataset_checksum(a) == dataset_checksum(b));
    CHECK(a.images == b.images);
    CHECK(a.labels == b.labels);

    SynthSpec other = spec;
    other.seed = spec.seed + 1;
    Dataset c = generate_split(other, 0, 64);
    CHECK(dataset_checksum(c) != dataset_checksum(a));
}

TEST_CASE("class balance is exact when count divides by num_classes") {
    SynthSpec spec;
    spec.num_classes = 4;
    Dataset ds = generate_split(spec, 0, 400);
    std::vector<int> counts(4, 0);
    for (auto l : ds.labels) counts[l]++;
    for (int k = 0; k < 4; ++k) CHECK(counts[static_cast<std::size_t>(k)] == 100);
}

TEST_CASE("orientation bins control pixel-mass spread along the axes") {
    // rasterization oracle: second moments of the bar mass along x and y
    auto spread = [](const std::vector<float>& img, std::int64_t S) {
        double mass = 0, mx = 0, my = 0;
        for (std::int64_t y = 0; y < S; ++y) {
            for (std::int64_t x = 0; x < S; ++x) {
                const double v = img[static_cast<std::size_t>(y * S + x)];
                mass += v;
                mx += v * static_cast<double>(x);
                my += v * static_cast<double>(y);
            }
        }
        mx /= mass;
        my /= mass;
        double vx = 0, vy = 0;
        for (std::int64_t y = 0; y < S; ++y) {
            for (std::int64_t x = 0; x < S; ++x) {
                const double v = img[static_cast<std::size_t>(y * S + x)];
                vx += v * (static_cast<double>(x) - mx) * (static_cast<double>(x) - mx);
                vy += v * (static_cast<double>(y) - my) * (static_cast<double>(y) - my);
            }
        }
        return std::pair<double, double>{vx / mass, vy / mass};
    };

    const std::int64_t S = 32;
    std::vector<float> horizontal(static_cast<std::size_t>(S * S), 0.0f);
    render_bar(horizontal.data(), S, S, 16.0, 16.0, 20.0, 3.0, 0.0);
    auto [hx, hy] = spread(horizontal, S);
    CHECK(hx > 4.0 * hy);  // mass stretched along x

    std::vector<float> vertical(static_cast<std::size_t>(S * S), 0.0f);
    render_bar(vertical.data(), S, S, 16.0, 16.0, 20.0, 3.0, 1.5707963267948966);
    auto [vx, vy] = spread(vertical, S);
    CHECK(vy > 4.0 * vx);

    // generator with zero noise keeps bin 0 near-horizontal and bin 1 oblique
    SynthSpec spec;
    spec.noise_sigma = 0.0;
    Dataset ds = generate_split(spec, 0, 8);
    for (std::int64_t i = 0; i < 8; ++i) {
        std::vector<float> img(ds.image(i), ds.image(i) + S * S);
        auto [gx, gy] = spread(img, S);
        if (ds.labels[static_cast<std::size_t>(i)] == 0) CHECK(gx > gy);
        if (ds.labels[static_cast<std::size_t>(i)] == 2) CHECK(gy > gx);  // 90 degrees
    }
}

TEST_CASE("labels depend only on the orientation bin, not the position") {
    SynthSpec spec;
    Dataset ds = generate_split(spec, 0, 40);
    for (std::int64_t i = 0; i < 40; ++i) CHECK(ds.labels[static_cast<std::size_t>(i)] == i % spec.num_classes);
}

TEST_CASE("dataset files round-trip") {
    SynthSpec spec;
    Dataset ds = generate_split(spec, 0, 32);
    const std::string path = "synth_roundtrip.bin";
    save_dataset(path, ds);
    Dataset back = load_dataset(path);
    CHECK(back.count == ds.count);
    CHECK(back.images == ds.images);
    CHECK(back.labels == ds.labels);
    CHECK(dataset_checksum(back) == dataset_checksum(ds));
    std::remove(path.c_str());
    CHECK(ds.images.size() == static_cast<std::size_t>(32 * 32 * 32));
    for (float v : ds.images) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("flops: plain-B extra stays under 0.1% and matches the closed form") {
    FlopsReport rep = count_flops(preset_config("qformer-p-b"), 224, 224);
    CHECK(rep.ratio_extra_total <= 0.001);
    for (const LayerFlops& lf : rep.layers) {
        const double measured = lf.cpe + lf.qa_extra;
        CHECK(std::abs(measured - lf.predicted_extra) / lf.predicted_extra < 0.02);
    }
}

TEST_CASE("flops: every shipped config keeps the quadrangle overhead below 5%") {
    struct Case {
        const char* name;
        std::int64_t input;
    };
    for (const Case& c : {Case{"qformer-micro-h", 32}, Case{"qformer-micro-p", 32}, Case{"qformer-h-t", 224},
                          Case{"qformer-p-b", 224}}) {
        FlopsReport rep = count_flops(preset_config(c.name), c.input, c.input);
        INFO(c.name, " ratio ", rep.ratio_extra_total);
        CHECK(rep.ratio_extra_total <= 0.05);
        CHECK(rep.ratio_extra_total >= 0.0);
        CHECK(rep.qa_extra_flops >= 0.0);
        for (const LayerFlops& lf : rep.layers) {
            const double measured = lf.cpe + lf.qa_extra;
            INFO(c.name, " stage ", lf.stage, " layer ", lf.layer);
            CHECK(std::abs(measured - lf.predicted_extra) / lf.predicted_extra < 0.02);
        }
    }
}

TEST_CASE("flops: window baseline reports zero quadrangle overhead") {
    ModelConfig cfg = preset_config("qformer-micro-h");
    cfg.attention = AttnKind::kWindow;
    FlopsReport rep = count_flops(cfg, 32, 32);
    CHECK(rep.qa_extra_flops == 0.0);
    CHECK(rep.ratio_extra_total == 0.0);
    CHECK(rep.total_flops > 0.0);
}
