#pragma once

#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

#include "qa/model.hpp"

namespace qa {

// ---- ModelConfig <-> JSON ----

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"variant", c.variant == Variant::kPlain ? "plain" : "hierarchical"},
                       {"attention", c.attention == AttnKind::kQuad ? "quad" : "window"},
                       {"depths", c.depths},
                       {"channels", c.channels},
                       {"heads", c.heads},
                       {"mlp_ratio", c.mlp_ratio},
                       {"window", c.window},
                       {"patch_size", c.patch_size},
                       {"num_classes", c.num_classes},
                       {"in_channels", c.in_channels},
                       {"lambda", c.lambda},
                       {"name", c.name}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    const std::string variant = j.value("variant", "hierarchical");
    if (variant == "plain") {
        c.variant = Variant::kPlain;
    } else if (variant == "hierarchical") {
        c.variant = Variant::kHierarchical;
    } else {
        throw ConfigError("model config: variant must be 'plain' or 'hierarchical', got '" + variant + "'");
    }
    const std::string attn = j.value("attention", "quad");
    if (attn == "quad") {
        c.attention = AttnKind::kQuad;
    } else if (attn == "window") {
        c.attention = AttnKind::kWindow;
    } else {
        throw ConfigError("model config: attention must be 'quad' or 'window', got '" + attn + "'");
    }
    c.depths = j.value("depths", std::vector<std::int64_t>{});
    c.channels = j.value("channels", std::vector<std::int64_t>{});
    c.heads = j.value("heads", std::vector<std::int64_t>{});
    c.mlp_ratio = j.value("mlp_ratio", 4.0);
    c.window = j.value("window", std::int64_t{7});
    c.patch_size = j.value("patch_size", std::int64_t{4});
    c.num_classes = j.value("num_classes", std::int64_t{10});
    c.in_channels = j.value("in_channels", std::int64_t{3});
    c.lambda = j.value("lambda", 1.0);
    c.name = j.value("name", std::string{});
}

// Parses either a bare ModelConfig object or a preset reference {"preset": name}
// with optional field overrides.
inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    if (j.contains("preset")) {
        c = preset_config(j.at("preset").get<std::string>());
        nlohmann::json merged;
        to_json(merged, c);
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it.key() != "preset") merged[it.key()] = it.value();
        }
        from_json(merged, c);
    } else {
        from_json(j, c);
    }
    c.validate();
    return c;
}

// ---- binary checkpoint ----
// layout: magic "QACKPT01" | u32 version | u64 config-json-len | json bytes |
//         u64 param count | per param: u32 name len | name | u8 dtype |
//         u32 rank | u64 extents[rank] | raw little-endian scalars

inline constexpr char kCkptMagic[8] = {'Q', 'A', 'C', 'K', 'P', 'T', '0', '1'};
inline constexpr std::uint32_t kCkptVersion = 1;

namespace detail {

template <typename V>
void write_pod(std::ostream& os, const V& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& is, const char* what) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) throw IoError(std::string("checkpoint truncated while reading ") + what);
    return v;
}

template <typename T>
constexpr std::uint8_t dtype_tag() {
    return std::is_same_v<T, float> ? 0 : 1;
}

inline const char* dtype_name(std::uint8_t tag) { return tag == 0 ? "f32" : "f64"; }

}  // namespace detail

template <typename T>
void save_model(const Model<T>& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    os.write(kCkptMagic, sizeof(kCkptMagic));
    detail::write_pod(os, kCkptVersion);
    nlohmann::json cfg;
    to_json(cfg, model.config());
    const std::string cfg_str = cfg.dump();
    detail::write_pod(os, static_cast<std::uint64_t>(cfg_str.size()));
    os.write(cfg_str.data(), static_cast<std::streamsize>(cfg_str.size()));
    detail::write_pod(os, static_cast<std::uint64_t>(model.params().size()));
    for (const auto& p : model.params()) {
        detail::write_pod(os, static_cast<std::uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        detail::write_pod(os, detail::dtype_tag<T>());
        detail::write_pod(os, static_cast<std::uint32_t>(p.value.shape.size()));
        for (auto d : p.value.shape) detail::write_pod(os, static_cast<std::uint64_t>(d));
        os.write(reinterpret_cast<const char*>(p.value.data.data()),
                 static_cast<std::streamsize>(p.value.data.size() * sizeof(T)));
    }
    if (!os) throw IoError("failed while writing checkpoint: " + path);
}

template <typename T>
Model<T> load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0) {
        throw IoError("not a checkpoint file (bad magic): " + path);
    }
    const auto version = detail::read_pod<std::uint32_t>(is, "version");
    if (version != kCkptVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCkptVersion) + ")");
    }
    const auto cfg_len = detail::read_pod<std::uint64_t>(is, "config length");
    std::string cfg_str(cfg_len, '\0');
    is.read(cfg_str.data(), static_cast<std::streamsize>(cfg_len));
    if (!is) throw IoError("checkpoint truncated while reading config");
    ModelConfig cfg;
    try {
        from_json(nlohmann::json::parse(cfg_str), cfg);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint config block is not valid JSON: ") + e.what());
    }
    Model<T> model(cfg, 0);

    const auto count = detail::read_pod<std::uint64_t>(is, "parameter count");
    std::set<std::string> seen;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = detail::read_pod<std::uint32_t>(is, "parameter name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw IoError("checkpoint truncated while reading parameter name");
        const auto dtype = detail::read_pod<std::uint8_t>(is, "dtype tag");
        if (dtype != detail::dtype_tag<T>()) {
            throw IoError("parameter '" + name + "' has dtype " + detail::dtype_name(dtype) + ", expected " +
                          detail::dtype_name(detail::dtype_tag<T>()));
        }
        const auto rank = detail::read_pod<std::uint32_t>(is, "rank");
        Shape shape(rank);
        for (std::uint32_t d = 0; d < rank; ++d) {
            shape[d] = static_cast<std::int64_t>(detail::read_pod<std::uint64_t>(is, "extent"));
        }
        if (!model.has_param(name)) throw IoError("checkpoint contains unknown parameter: " + name);
        DenseArray<T>& dst = model.param(name);
        if (dst.shape != shape) {
            throw IoError("parameter '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                          shape_str(dst.shape));
        }
        is.read(reinterpret_cast<char*>(dst.data.data()), static_cast<std::streamsize>(dst.data.size() * sizeof(T)));
        if (!is) throw IoError("checkpoint truncated while reading data of '" + name + "'");
        seen.insert(name);
    }
    for (const auto& p : model.params()) {
        if (!seen.count(p.name)) throw IoError("checkpoint is missing parameter: " + p.name);
    }
    return model;
}

}  // namespace qa
