#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qa/common.hpp"

namespace qa {

// Oriented-bars classification task: the label is the orientation bin of a
// single anti-aliased bar placed at a random position. Orientation cannot be
// read off a single pooled window, which is the regime quadrangle windows are
// built for.
struct SynthSpec {
    std::int64_t image_size = 32;
    std::int64_t num_classes = 4;  // orientation bins over 180 degrees
    double bar_len_lo = 14.0;
    double bar_len_hi = 24.0;
    double bar_width_lo = 2.0;
    double bar_width_hi = 4.0;
    double noise_sigma = 0.08;
    std::uint64_t seed = 1;
    std::int64_t train_count = 2000;
    std::int64_t test_count = 500;

    void validate() const;
};

struct Dataset {
    std::int64_t count = 0;
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<float> images;          // count * H * W, values in [0,1]
    std::vector<std::uint16_t> labels;  // count

    const float* image(std::int64_t i) const { return images.data() + i * height * width; }
};

// Rasterizes one anti-aliased bar (rotated rectangle) additively into a
// row-major H x W buffer. Exposed so tests can oracle-check orientation mass.
void render_bar(float* img, std::int64_t H, std::int64_t W, double cx, double cy, double length, double width,
                double theta);

// Deterministic by construction: image i depends only on (spec.seed, offset+i).
// Train split uses offset 0, test split continues after the train images.
Dataset generate_split(const SynthSpec& spec, std::int64_t offset, std::int64_t count);

void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

// FNV-1a over labels and raw f32 image bits.
std::uint64_t dataset_checksum(const Dataset& ds);

}  // namespace qa
