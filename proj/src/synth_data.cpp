#include "qa/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "qa/rng.hpp"

namespace qa {

void SynthSpec::validate() const {
    if (image_size < 8) throw ConfigError("synth spec: image_size must be >= 8");
    if (num_classes < 2) throw ConfigError("synth spec: num_classes must be >= 2");
    if (!(bar_len_lo > 0.0) || bar_len_hi < bar_len_lo) throw ConfigError("synth spec: bad bar length range");
    if (!(bar_width_lo > 0.0) || bar_width_hi < bar_width_lo) throw ConfigError("synth spec: bad bar width range");
    if (noise_sigma < 0.0) throw ConfigError("synth spec: noise_sigma must be nonnegative");
    if (train_count < 1 || test_count < 1) throw ConfigError("synth spec: split counts must be positive");
}

void render_bar(float* img, std::int64_t H, std::int64_t W, double cx, double cy, double length, double width,
                double theta) {
    const double c = std::cos(theta), s = std::sin(theta);
    const double hl = length / 2.0, hw = width / 2.0;
    for (std::int64_t y = 0; y < H; ++y) {
        for (std::int64_t x = 0; x < W; ++x) {
            const double dx = static_cast<double>(x) - cx;
            const double dy = static_cast<double>(y) - cy;
            const double u = c * dx + s * dy;
            const double v = -s * dx + c * dy;
            const double d = std::max(std::abs(u) - hl, std::abs(v) - hw);
            const double cov = std::clamp(0.5 - d, 0.0, 1.0);  // ~1px anti-aliased edge
            img[y * W + x] += static_cast<float>(cov);
        }
    }
}

Dataset generate_split(const SynthSpec& spec, std::int64_t offset, std::int64_t count) {
    spec.validate();
    Dataset ds;
    ds.count = count;
    ds.height = spec.image_size;
    ds.width = spec.image_size;
    ds.images.assign(static_cast<std::size_t>(count * spec.image_size * spec.image_size), 0.0f);
    ds.labels.resize(static_cast<std::size_t>(count));
    const double bin = 3.14159265358979323846 / static_cast<double>(spec.num_classes);
    const double S = static_cast<double>(spec.image_size);
    for (std::int64_t i = 0; i < count; ++i) {
        Rng rng = keyed_rng(spec.seed, static_cast<std::uint64_t>(offset + i));
        const std::int64_t label = (offset + i) % spec.num_classes;  // balanced by construction
        const double theta = (static_cast<double>(label) + rng.uniform(-0.3, 0.3)) * bin;
        const double len = rng.uniform(spec.bar_len_lo, spec.bar_len_hi);
        const double wid = rng.uniform(spec.bar_width_lo, spec.bar_width_hi);
        const double cx = rng.uniform(0.25 * S, 0.75 * S);
        const double cy = rng.uniform(0.25 * S, 0.75 * S);
        float* img = ds.images.data() + i * spec.image_size * spec.image_size;
        render_bar(img, spec.image_size, spec.image_size, cx, cy, len, wid, theta);
        for (std::int64_t p = 0; p < spec.image_size * spec.image_size; ++p) {
            double v = static_cast<double>(img[p]) * 0.9;
            if (spec.noise_sigma > 0.0) v += rng.normal() * spec.noise_sigma;
            // quantize so the dataset is bit-stable across libm versions
            v = std::round(std::clamp(v, 0.0, 1.0) * 1024.0) / 1024.0;
            img[p] = static_cast<float>(v);
        }
        ds.labels[static_cast<std::size_t>(i)] = static_cast<std::uint16_t>(label);
    }
    return ds;
}

void save_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open dataset for writing: " + path);
    const std::uint32_t header[3] = {static_cast<std::uint32_t>(ds.count), static_cast<std::uint32_t>(ds.height),
                                     static_cast<std::uint32_t>(ds.width)};
    os.write(reinterpret_cast<const char*>(header), sizeof(header));
    os.write(reinterpret_cast<const char*>(ds.images.data()),
             static_cast<std::streamsize>(ds.images.size() * sizeof(float)));
    os.write(reinterpret_cast<const char*>(ds.labels.data()),
             static_cast<std::streamsize>(ds.labels.size() * sizeof(std::uint16_t)));
    if (!os) throw IoError("failed while writing dataset: " + path);
}

Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open dataset: " + path);
    std::uint32_t header[3];
    is.read(reinterpret_cast<char*>(header), sizeof(header));
    if (!is) throw IoError("dataset truncated: " + path);
    Dataset ds;
    ds.count = header[0];
    ds.height = header[1];
    ds.width = header[2];
    ds.images.resize(static_cast<std::size_t>(ds.count * ds.height * ds.width));
    ds.labels.resize(static_cast<std::size_t>(ds.count));
    is.read(reinterpret_cast<char*>(ds.images.data()), static_cast<std::streamsize>(ds.images.size() * sizeof(float)));
    is.read(reinterpret_cast<char*>(ds.labels.data()),
            static_cast<std::streamsize>(ds.labels.size() * sizeof(std::uint16_t)));
    if (!is) throw IoError("dataset truncated: " + path);
    return ds;
}

std::uint64_t dataset_checksum(const Dataset& ds) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const unsigned char* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    mix(reinterpret_cast<const unsigned char*>(ds.labels.data()), ds.labels.size() * sizeof(std::uint16_t));
    mix(reinterpret_cast<const unsigned char*>(ds.images.data()), ds.images.size() * sizeof(float));
    return h;
}

}  // namespace qa
