#pragma once

#include <optional>

#include <json.hpp>

#include "qa/checkpoint.hpp"
#include "qa/synth_data.hpp"

namespace qa {

struct OptimizerConfig {
    double lr = 1e-3;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    ModelConfig model;
    OptimizerConfig optimizer;
    std::int64_t epochs = 50;
    std::int64_t batch_size = 32;
    std::int64_t warmup_epochs = 2;
    std::string lr_schedule = "cosine";
    std::uint64_t seed = 0;
    std::optional<double> lambda;  // overrides model.lambda when set
    bool freeze_quad = false;      // train the t-frozen-at-zero twin
    double quad_lr_scale = 1.0;    // learning-rate multiplier for the prediction head
    std::string train_data;
    std::string test_data;

    void validate() const {
        model.validate();
        std::vector<std::string> bad;
        if (epochs < 1) bad.push_back("epochs must be positive");
        if (batch_size < 1) bad.push_back("batch_size must be positive");
        if (warmup_epochs < 0 || warmup_epochs > epochs) bad.push_back("warmup_epochs out of range");
        if (lr_schedule != "cosine") bad.push_back("lr_schedule must be 'cosine'");
        if (!(optimizer.lr > 0.0)) bad.push_back("optimizer.lr must be positive");
        if (optimizer.weight_decay < 0.0) bad.push_back("optimizer.weight_decay must be nonnegative");
        if (lambda && !(*lambda >= 0.0)) bad.push_back("lambda must be nonnegative");
        if (!(quad_lr_scale > 0.0)) bad.push_back("quad_lr_scale must be positive");
        if (!bad.empty()) {
            std::string msg = "invalid train config:";
            for (const auto& b : bad) msg += "\n  - " + b;
            throw ConfigError(msg);
        }
    }
};

inline void from_json(const nlohmann::json& j, OptimizerConfig& o) {
    o.lr = j.value("lr", 1e-3);
    o.weight_decay = j.value("weight_decay", 0.05);
    if (j.contains("betas")) {
        auto b = j.at("betas").get<std::vector<double>>();
        if (b.size() != 2) throw ConfigError("optimizer.betas must have two entries");
        o.beta1 = b[0];
        o.beta2 = b[1];
    }
    o.eps = j.value("eps", 1e-8);
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (!j.contains("model")) throw ConfigError("train config requires a 'model' block");
    c.model = model_config_from_json(j.at("model"));
    if (j.contains("optimizer")) from_json(j.at("optimizer"), c.optimizer);
    c.epochs = j.value("epochs", std::int64_t{50});
    c.batch_size = j.value("batch_size", std::int64_t{32});
    c.warmup_epochs = j.value("warmup_epochs", std::int64_t{2});
    c.lr_schedule = j.value("lr_schedule", std::string("cosine"));
    c.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("lambda")) c.lambda = j.at("lambda").get<double>();
    c.freeze_quad = j.value("freeze_quad", false);
    c.quad_lr_scale = j.value("quad_lr_scale", 1.0);
    c.train_data = j.value("train_data", std::string{});
    c.test_data = j.value("test_data", std::string{});
    c.validate();
    return c;
}

struct EpochMetrics {
    std::int64_t epoch = 0;
    double lr = 0;
    double train_ce = 0;
    double train_reg = 0;
    double train_acc = 0;
    double test_ce = 0;
    double test_acc = 0;
};

struct TrainResult {
    std::vector<EpochMetrics> history;
    double best_test_acc = 0;
    std::int64_t best_epoch = -1;
    std::string best_ckpt;
    std::string last_ckpt;
    std::string log_path;
};

struct EvalResult {
    double acc = 0;
    double ce = 0;
    std::int64_t count = 0;
};

template <typename T>
DenseArray<T> batch_from(const Dataset& ds, const std::vector<std::int64_t>& idx, std::int64_t lo, std::int64_t hi,
                         std::vector<std::int64_t>* labels) {
    const std::int64_t B = hi - lo;
    DenseArray<T> batch({B, ds.height, ds.width, 1});
    if (labels) labels->clear();
    for (std::int64_t b = 0; b < B; ++b) {
        const std::int64_t i = idx[static_cast<std::size_t>(lo + b)];
        const float* src = ds.image(i);
        T* dst = batch.data.data() + b * ds.height * ds.width;
        for (std::int64_t p = 0; p < ds.height * ds.width; ++p) dst[p] = static_cast<T>(src[p]);
        if (labels) labels->push_back(ds.labels[static_cast<std::size_t>(i)]);
    }
    return batch;
}

template <typename T>
EvalResult evaluate(const Model<T>& model, const Dataset& ds, std::int64_t batch_size) {
    EvalResult r;
    r.count = ds.count;
    std::vector<std::int64_t> idx(static_cast<std::size_t>(ds.count));
    for (std::int64_t i = 0; i < ds.count; ++i) idx[static_cast<std::size_t>(i)] = i;
    double ce_sum = 0.0;
    std::int64_t correct = 0;
    for (std::int64_t lo = 0; lo < ds.count; lo += batch_size) {
        const std::int64_t hi = std::min(ds.count, lo + batch_size);
        std::vector<std::int64_t> labels;
        DenseArray<T> batch = batch_from<T>(ds, idx, lo, hi, &labels);
        Tape<T> tape;
        ForwardResult<T> res = model.forward(tape, batch);
        const DenseArray<T>& logits = res.logits.value();
        const std::int64_t K = logits.shape[1];
        for (std::int64_t b = 0; b < hi - lo; ++b) {
            std::int64_t best = 0;
            for (std::int64_t k = 1; k < K; ++k) {
                if (logits[b * K + k] > logits[b * K + best]) best = k;
            }
            if (best == labels[static_cast<std::size_t>(b)]) ++correct;
        }
        Node<T> ce = cross_entropy(res.logits, labels);
        ce_sum += static_cast<double>(ce.value()[0]) * static_cast<double>(hi - lo);
    }
    r.acc = static_cast<double>(correct) / static_cast<double>(ds.count);
    r.ce = ce_sum / static_cast<double>(ds.count);
    return r;
}

// Trains a float32 model with AdamW and a warmup+cosine schedule; writes
// metrics.jsonl, best.ckpt and last.ckpt under out_dir. Fully determined by
// (config, seed). Throws NumericError with a surrogate-parameter dump if the
// loss goes non-finite.
TrainResult run_training(const TrainConfig& cfg, const std::string& out_dir, const Dataset& train_ds,
                         const Dataset& test_ds);

// Loads the datasets named in the config, then trains.
TrainResult run_training(const TrainConfig& cfg, const std::string& out_dir);

}  // namespace qa
