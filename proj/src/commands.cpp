#include "qa/commands.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>

#include "qa/analysis.hpp"
#include "qa/flops.hpp"
#include "qa/gradcheck.hpp"
#include "qa/train.hpp"

namespace qa {

namespace {

nlohmann::json load_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path);
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + " is not valid JSON: " + e.what());
    }
}

SynthSpec synth_spec_from_json(const nlohmann::json& j) {
    SynthSpec s;
    s.image_size = j.value("image_size", std::int64_t{32});
    s.num_classes = j.value("num_classes", std::int64_t{4});
    s.bar_len_lo = j.value("bar_len_lo", 14.0);
    s.bar_len_hi = j.value("bar_len_hi", 24.0);
    s.bar_width_lo = j.value("bar_width_lo", 2.0);
    s.bar_width_hi = j.value("bar_width_hi", 4.0);
    s.noise_sigma = j.value("noise_sigma", 0.08);
    s.seed = j.value("seed", std::uint64_t{1});
    s.train_count = j.value("train_count", std::int64_t{2000});
    s.test_count = j.value("test_count", std::int64_t{500});
    s.validate();
    return s;
}

nlohmann::json synth_spec_to_json(const SynthSpec& s) {
    return nlohmann::json{{"image_size", s.image_size},   {"num_classes", s.num_classes},
                          {"bar_len_lo", s.bar_len_lo},   {"bar_len_hi", s.bar_len_hi},
                          {"bar_width_lo", s.bar_width_lo}, {"bar_width_hi", s.bar_width_hi},
                          {"noise_sigma", s.noise_sigma}, {"seed", s.seed},
                          {"train_count", s.train_count}, {"test_count", s.test_count}};
}

DenseArray<float> image_from_dataset(const Dataset& ds, std::int64_t index) {
    if (index < 0 || index >= ds.count) {
        throw ConfigError("image index " + std::to_string(index) + " out of range (dataset holds " +
                          std::to_string(ds.count) + ")");
    }
    DenseArray<float> img({1, ds.height, ds.width, 1});
    const float* src = ds.image(index);
    std::copy(src, src + ds.height * ds.width, img.data.begin());
    return img;
}

}  // namespace

ModelCheckResult model_gradcheck(const ModelConfig& cfg, std::uint64_t seed, int entries, double h) {
    cfg.validate();
    Model<double> model(cfg, seed);
    Rng rng(seed ^ 0xabcdef12345ULL);
    // nudge the quadrangle head off zero so sampling points leave the lattice
    for (auto& p : model.params()) {
        if (p.name.find("attn.quad.w") != std::string::npos) {
            for (std::int64_t i = 0; i < p.value.numel(); ++i) p.value[i] = rng.normal() * 0.02;
        } else if (p.name.find("attn.quad.b") != std::string::npos) {
            const std::int64_t heads = p.value.numel() / 9;
            for (std::int64_t n = 0; n < heads; ++n) {
                p.value[n * 9 + 0] = 0.15;
                p.value[n * 9 + 4] = 0.2 + 0.07 * static_cast<double>(n);
                p.value[n * 9 + 5] = 0.1;
                p.value[n * 9 + 6] = 0.08;
            }
        }
    }

    const std::int64_t side = cfg.patch_size * cfg.window * 2;
    DenseArray<double> batch = DenseArray<double>::randn({2, side, side, cfg.in_channels}, rng, 0.5);
    std::vector<std::int64_t> labels;
    for (int b = 0; b < 2; ++b) labels.push_back(static_cast<std::int64_t>(rng.below(cfg.num_classes)));

    auto loss_value = [&]() {
        Tape<double> tape;
        ForwardResult<double> res = model.forward(tape, batch);
        Node<double> loss = add(cross_entropy(res.logits, labels), res.reg);
        return loss.value()[0];
    };

    // analytic gradients
    Tape<double> tape;
    FwdOpts fwd;
    fwd.train = true;
    ForwardResult<double> res = model.forward(tape, batch, fwd);
    Node<double> loss = add(cross_entropy(res.logits, labels), res.reg);
    tape.backward(loss);

    ModelCheckResult out;
    for (int e = 0; e < entries; ++e) {
        const std::size_t pi = static_cast<std::size_t>(rng.below(model.params().size()));
        DenseArray<double>& p = model.params()[pi].value;
        const std::int64_t ei = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(p.numel())));
        const Node<double>& pn = res.param_nodes[pi];
        const double analytic = pn.has_grad() ? pn.grad()[ei] : 0.0;

        const double orig = p[ei];
        p[ei] = orig + h;
        const double fp = loss_value();
        p[ei] = orig - h;
        const double fm = loss_value();
        p[ei] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-3});
        out.max_rel_err = std::max(out.max_rel_err, rel);
    }
    out.pass = out.max_rel_err < out.tol;
    return out;
}

namespace cmd {

int guarded(const std::function<int()>& fn) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

int train(const std::string& config_path, const std::string& out_dir) {
    TrainConfig cfg = train_config_from_json(load_json(config_path));
    TrainResult r = run_training(cfg, out_dir);
    nlohmann::json out;
    out["best_test_acc"] = r.best_test_acc;
    out["best_epoch"] = r.best_epoch;
    out["best_ckpt"] = r.best_ckpt;
    out["last_ckpt"] = r.last_ckpt;
    out["log"] = r.log_path;
    std::cout << out.dump() << "\n";
    return 0;
}

int eval(const std::string& ckpt_path, const std::string& data_path, std::int64_t batch_size) {
    Model<float> model = load_model<float>(ckpt_path);
    Dataset ds = load_dataset(data_path);
    EvalResult r = evaluate(model, ds, batch_size);
    nlohmann::json out;
    out["test_acc"] = r.acc;
    out["test_ce"] = r.ce;
    out["count"] = r.count;
    std::cout << out.dump() << "\n";
    return 0;
}

int gradcheck(const std::string& target, std::uint64_t seed) {
    const bool want_ops = target == "all" || target == "ops";
    const bool want_model = target == "all" || target == "model";
    const bool named = !want_ops && !want_model;
    bool all_pass = true;
    bool matched = false;
    if (want_ops || named) {
        for (const OpCheckResult& r : standard_op_checks(seed)) {
            if (named && r.name != target) continue;
            matched = true;
            all_pass = all_pass && r.pass;
            std::cout << (r.pass ? "pass " : "FAIL ") << r.name << " rel_err=" << r.max_rel_err
                      << " tol=" << r.tol << "\n";
        }
    }
    if (want_model) {
        matched = true;
        ModelCheckResult r = model_gradcheck(preset_config("qformer-micro-h"), seed);
        all_pass = all_pass && r.pass;
        std::cout << (r.pass ? "pass " : "FAIL ") << "model(qformer-micro-h) rel_err=" << r.max_rel_err
                  << " tol=" << r.tol << "\n";
    }
    if (!matched) throw ConfigError("unknown gradcheck target: " + target);
    std::cout << (all_pass ? "gradcheck: all targets passed" : "gradcheck: FAILURES present") << "\n";
    return all_pass ? 0 : 3;
}

int flops(const std::string& config_path, const std::string& input_size) {
    nlohmann::json j = load_json(config_path);
    ModelConfig cfg = model_config_from_json(j.contains("model") ? j.at("model") : j);
    std::int64_t H = 224, W = 224;
    if (j.contains("input_size")) {
        auto v = j.at("input_size").get<std::vector<std::int64_t>>();
        if (v.size() != 2) throw ConfigError("input_size must be [H, W]");
        H = v[0];
        W = v[1];
    }
    if (!input_size.empty()) {
        const auto x = input_size.find('x');
        if (x == std::string::npos) throw ConfigError("--input must look like HxW, got " + input_size);
        H = std::stoll(input_size.substr(0, x));
        W = std::stoll(input_size.substr(x + 1));
    }
    FlopsReport rep = count_flops(cfg, H, W);
    nlohmann::json out;
    out["convention"] = "multiply-add = 2 flops; add/div/exp/compare = 1";
    nlohmann::json cj;
    to_json(cj, cfg);
    out["model"] = cj;
    out["input"] = {H, W};
    nlohmann::json layers = nlohmann::json::array();
    for (const LayerFlops& lf : rep.layers) {
        layers.push_back({{"stage", lf.stage},
                          {"layer", lf.layer},
                          {"tokens", {lf.tokens_h, lf.tokens_w}},
                          {"channels", lf.channels},
                          {"heads", lf.heads},
                          {"attention", lf.attention},
                          {"ffn", lf.ffn},
                          {"other", lf.other},
                          {"cpe", lf.cpe},
                          {"qa_extra", lf.qa_extra},
                          {"predicted_extra", lf.predicted_extra},
                          {"total", lf.total}});
    }
    out["layers"] = layers;
    out["embed_flops"] = rep.embed_flops;
    out["head_flops"] = rep.head_flops;
    out["total_flops"] = rep.total_flops;
    out["attention_flops"] = rep.attention_flops;
    out["cpe_flops"] = rep.cpe_flops;
    out["qa_extra_flops"] = rep.qa_extra_flops;
    out["predicted_extra"] = rep.predicted_extra;
    out["ratio_extra_total"] = rep.ratio_extra_total;
    std::cout << out.dump(2) << "\n";
    return 0;
}

int export_quads(const std::string& ckpt_path, const std::string& image_path, std::int64_t index,
                 const std::string& out_path) {
    Model<float> model = load_model<float>(ckpt_path);
    Dataset ds = load_dataset(image_path);
    DenseArray<float> img = image_from_dataset(ds, index);
    std::vector<QuadRecord> records = export_quads(model, img);
    std::ostream* os = &std::cout;
    std::ofstream file;
    if (!out_path.empty()) {
        file.open(out_path, std::ios::trunc);
        if (!file) throw IoError("cannot open output: " + out_path);
        os = &file;
    }
    for (const QuadRecord& r : records) {
        nlohmann::json line;
        line["layer_index"] = r.layer_index;
        line["stage"] = r.stage;
        line["layer"] = r.layer;
        line["window"] = r.window;
        line["head"] = r.head;
        line["center"] = {r.center_x, r.center_y};
        line["T"] = {{r.transform[0], r.transform[1], r.transform[2]},
                     {r.transform[3], r.transform[4], r.transform[5]},
                     {r.transform[6], r.transform[7], r.transform[8]}};
        line["corners"] = {{r.corners[0], r.corners[1]},
                           {r.corners[2], r.corners[3]},
                           {r.corners[4], r.corners[5]},
                           {r.corners[6], r.corners[7]}};
        line["scale"] = {r.scale_x, r.scale_y};
        line["rotation"] = r.rotation;
        (*os) << line.dump() << "\n";
    }
    return 0;
}

int attn_distance(const std::string& ckpt_path, const std::string& data_path, std::int64_t count) {
    Model<float> model = load_model<float>(ckpt_path);
    Dataset ds = load_dataset(data_path);
    count = std::min<std::int64_t>(count, ds.count);
    if (count < 1) throw ConfigError("attn-distance requires at least one sample");
    std::vector<std::int64_t> idx(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = i;
    std::vector<std::int64_t> labels;
    DenseArray<float> batch = batch_from<float>(ds, idx, 0, count, &labels);
    for (const LayerDistance& ld : attention_distance(model, batch)) {
        nlohmann::json line;
        line["stage"] = ld.stage;
        line["layer"] = ld.layer;
        line["mean"] = ld.mean;
        line["std"] = ld.stddev;
        line["queries"] = ld.queries;
        std::cout << line.dump() << "\n";
    }
    return 0;
}

int gen_data(const std::string& spec_path, const std::string& out_dir) {
    SynthSpec spec = synth_spec_from_json(load_json(spec_path));
    std::filesystem::create_directories(out_dir);
    Dataset train_ds = generate_split(spec, 0, spec.train_count);
    Dataset test_ds = generate_split(spec, spec.train_count, spec.test_count);
    save_dataset(out_dir + "/train.bin", train_ds);
    save_dataset(out_dir + "/test.bin", test_ds);
    for (const char* split : {"train", "test"}) {
        std::ofstream side(out_dir + "/" + split + ".json", std::ios::trunc);
        nlohmann::json j = synth_spec_to_json(spec);
        j["split"] = split;
        side << j.dump(2) << "\n";
    }
    nlohmann::json out;
    out["train"] = out_dir + "/train.bin";
    out["test"] = out_dir + "/test.bin";
    out["train_checksum"] = dataset_checksum(train_ds);
    out["test_checksum"] = dataset_checksum(test_ds);
    std::cout << out.dump() << "\n";
    return 0;
}

}  // namespace cmd

}  // namespace qa
