#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "qa/quad_transform.hpp"
#include "qa/windowing.hpp"

using namespace qa;

TEST_CASE("4x4 map with w=2 yields 4 windows of 4 tokens") {
    Rng rng(1);
    auto map = DenseArray<double>::randn({1, 4, 4, 3}, rng);
    auto g = partition(map, 2);
    CHECK(g.windows.shape == Shape{1, 4, 4, 3});
    CHECK(g.meta.pad_h == 0);
    CHECK(g.meta.pad_w == 0);
    // window 0 holds rows 0-1, cols 0-1 in row-major token order
    for (std::int64_t c = 0; c < 3; ++c) {
        CHECK(g.windows.at({0, 0, 0, c}) == map.at({0, 0, 0, c}));
        CHECK(g.windows.at({0, 0, 1, c}) == map.at({0, 0, 1, c}));
        CHECK(g.windows.at({0, 0, 2, c}) == map.at({0, 1, 0, c}));
        CHECK(g.windows.at({0, 0, 3, c}) == map.at({0, 1, 1, c}));
    }
}

TEST_CASE("5x5 map with w=2 pads to 6x6 giving 9 windows") {
    Rng rng(2);
    auto map = DenseArray<double>::randn({2, 5, 5, 2}, rng);
    auto g = partition(map, 2);
    CHECK(g.meta.grid_h == 3);
    CHECK(g.meta.grid_w == 3);
    CHECK(g.meta.pad_h == 1);
    CHECK(g.meta.pad_w == 1);
    CHECK(g.windows.shape == Shape{2, 9, 4, 2});
    // bottom-right window is three-quarters padding
    CHECK(g.windows.at({0, 8, 1, 0}) == 0.0);
    CHECK(g.windows.at({0, 8, 2, 0}) == 0.0);
    CHECK(g.windows.at({0, 8, 3, 0}) == 0.0);
    CHECK(g.windows.at({0, 8, 0, 0}) == map.at({0, 4, 4, 0}));

    auto back = merge(g, 5, 5);
    CHECK(max_abs_diff(back, map) == 0.0);
}

TEST_CASE("2x2 map with w=2 is one window equal to the flattened map") {
    Rng rng(3);
    auto map = DenseArray<double>::randn({1, 2, 2, 5}, rng);
    auto g = partition(map, 2);
    CHECK(g.windows.shape == Shape{1, 1, 4, 5});
    CHECK(max_abs_diff(g.windows.reshaped({1, 2, 2, 5}), map) == 0.0);
}

TEST_CASE("merge of all-ones windows is an all-ones map") {
    WindowGridMeta m = window_grid(4, 6, 2);
    WindowGrid<double> g{DenseArray<double>::ones({1, m.num_windows(), 4, 3}), m};
    auto map = merge(g, 4, 6);
    for (std::int64_t i = 0; i < map.numel(); ++i) CHECK(map[i] == 1.0);
}

TEST_CASE("partition/merge identity on 50 random shapes including padded cases") {
    Rng rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        const std::int64_t H = 1 + static_cast<std::int64_t>(rng.below(12));
        const std::int64_t W = 1 + static_cast<std::int64_t>(rng.below(12));
        const std::int64_t w = 1 + static_cast<std::int64_t>(rng.below(5));
        const std::int64_t B = 1 + static_cast<std::int64_t>(rng.below(3));
        const std::int64_t C = 1 + static_cast<std::int64_t>(rng.below(4));
        auto map = DenseArray<double>::randn({B, H, W, C}, rng);
        auto g = partition(map, w);
        auto back = merge(g, H, W);
        CHECK(max_abs_diff(back, map) == 0.0);
        // merge then re-partition reproduces the window tensor bit-exactly
        auto g2 = partition(back, w);
        CHECK(max_abs_diff(g2.windows, g.windows) == 0.0);
    }
}

TEST_CASE("merge rejects inconsistent metadata") {
    auto g = partition(DenseArray<double>::ones({1, 4, 4, 1}), 2);
    CHECK_THROWS_AS(merge(g, 7, 7), ShapeError);
}

TEST_CASE("window centers form the stride-w lattice starting at (w-1)/2") {
    auto c = window_centers(4, 4, 2);
    REQUIRE(c.xy.size() == 4);
    CHECK(c.xy[0] == std::pair<double, double>{0.5, 0.5});
    CHECK(c.xy[1] == std::pair<double, double>{2.5, 0.5});
    CHECK(c.xy[2] == std::pair<double, double>{0.5, 2.5});
    CHECK(c.xy[3] == std::pair<double, double>{2.5, 2.5});

    auto c1 = window_centers(3, 2, 1);
    REQUIRE(c1.xy.size() == 6);
    for (std::int64_t gy = 0; gy < 3; ++gy) {
        for (std::int64_t gx = 0; gx < 2; ++gx) {
            auto [x, y] = c1.xy[static_cast<std::size_t>(gy * 2 + gx)];
            CHECK(x == static_cast<double>(gx));
            CHECK(y == static_cast<double>(gy));
        }
    }

    auto c7 = window_centers(7, 7, 7);
    REQUIRE(c7.xy.size() == 1);
    CHECK(c7.xy[0] == std::pair<double, double>{3.0, 3.0});
}

TEST_CASE("relative token coordinates span exactly [-(w-1)/2, (w-1)/2]") {
    for (std::int64_t w : {1, 2, 3, 5, 7}) {
        auto rel = relative_coord_columns<double>(w);
        double lox = 1e9, hix = -1e9, loy = 1e9, hiy = -1e9;
        for (std::int64_t i = 0; i < w * w; ++i) {
            lox = std::min(lox, rel[0 * w * w + i]);
            hix = std::max(hix, rel[0 * w * w + i]);
            loy = std::min(loy, rel[1 * w * w + i]);
            hiy = std::max(hiy, rel[1 * w * w + i]);
            CHECK(rel[2 * w * w + i] == 1.0);
        }
        const double half = static_cast<double>(w - 1) / 2.0;
        CHECK(lox == -half);
        CHECK(hix == half);
        CHECK(loy == -half);
        CHECK(hiy == half);
    }
}
