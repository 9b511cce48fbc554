#include "qa/train.hpp"

#include <filesystem>
#include <fstream>

namespace qa {

namespace {

// Decoupled weight decay; decay applies to matrices only (rank >= 2), the
// usual convention for biases and norm parameters.
class AdamW {
public:
    AdamW(const OptimizerConfig& cfg, const std::vector<typename Model<float>::Param>& params) : cfg_(cfg) {
        for (const auto& p : params) {
            m_.push_back(DenseArray<float>::zeros(p.value.shape));
            v_.push_back(DenseArray<float>::zeros(p.value.shape));
        }
    }

    void step(std::vector<typename Model<float>::Param>& params, const std::vector<const DenseArray<float>*>& grads,
              double lr, const std::vector<double>& lr_scale, const std::vector<bool>& frozen) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (frozen[i] || grads[i] == nullptr) continue;
            DenseArray<float>& p = params[i].value;
            const DenseArray<float>& g = *grads[i];
            DenseArray<float>& m = m_[i];
            DenseArray<float>& v = v_[i];
            const double step_lr = lr * lr_scale[i];
            const bool decay = p.rank() >= 2;
            for (std::int64_t e = 0; e < p.numel(); ++e) {
                const double ge = static_cast<double>(g[e]);
                const double me = cfg_.beta1 * static_cast<double>(m[e]) + (1.0 - cfg_.beta1) * ge;
                const double ve = cfg_.beta2 * static_cast<double>(v[e]) + (1.0 - cfg_.beta2) * ge * ge;
                m[e] = static_cast<float>(me);
                v[e] = static_cast<float>(ve);
                double upd = (me / bc1) / (std::sqrt(ve / bc2) + cfg_.eps);
                if (decay) upd += cfg_.weight_decay * static_cast<double>(p[e]);
                p[e] = static_cast<float>(static_cast<double>(p[e]) - step_lr * upd);
            }
        }
    }

private:
    OptimizerConfig cfg_;
    std::vector<DenseArray<float>> m_, v_;
    std::int64_t t_ = 0;
};

double cosine_lr(double base, std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps) {
    if (warmup_steps > 0 && step < warmup_steps) {
        return base * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    }
    const double denom = static_cast<double>(std::max<std::int64_t>(1, total_steps - warmup_steps));
    const double prog = static_cast<double>(step - warmup_steps) / denom;
    return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::min(1.0, prog)));
}

std::string surrogate_dump(const ForwardResult<float>& res) {
    std::string out = "surrogate parameter statistics per attention layer:";
    for (const auto& tr : res.layers) {
        if (!tr.surrogate.valid()) continue;
        const DenseArray<float>& t = tr.surrogate.value();
        double lo = 1e30, hi = -1e30, sum = 0.0;
        bool finite = true;
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            const double v = static_cast<double>(t[i]);
            if (!std::isfinite(v)) finite = false;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            sum += v;
        }
        out += "\n  stage " + std::to_string(tr.stage) + " layer " + std::to_string(tr.layer) +
               ": mean " + std::to_string(sum / static_cast<double>(t.numel())) + " min " + std::to_string(lo) +
               " max " + std::to_string(hi) + (finite ? "" : " (non-finite!)");
    }
    return out;
}

}  // namespace

TrainResult run_training(const TrainConfig& cfg_in, const std::string& out_dir, const Dataset& train_ds,
                         const Dataset& test_ds) {
    TrainConfig cfg = cfg_in;
    cfg.validate();
    if (cfg.lambda) cfg.model.lambda = *cfg.lambda;
    std::filesystem::create_directories(out_dir);

    Model<float> model(cfg.model, cfg.seed);

    std::vector<double> lr_scale;
    std::vector<bool> frozen;
    for (const auto& p : model.params()) {
        const bool is_quad = p.name.find("attn.quad.") != std::string::npos;
        lr_scale.push_back(is_quad ? cfg.quad_lr_scale : 1.0);
        frozen.push_back(is_quad && cfg.freeze_quad);
    }
    AdamW opt(cfg.optimizer, model.params());

    TrainResult result;
    result.log_path = out_dir + "/metrics.jsonl";
    result.best_ckpt = out_dir + "/best.ckpt";
    result.last_ckpt = out_dir + "/last.ckpt";
    std::ofstream log(result.log_path, std::ios::trunc);
    if (!log) throw IoError("cannot open metrics log: " + result.log_path);
    {
        nlohmann::json head;
        head["schema"] = 1;
        head["event"] = "config";
        nlohmann::json mj;
        to_json(mj, cfg.model);
        head["model"] = mj;
        head["epochs"] = cfg.epochs;
        head["batch_size"] = cfg.batch_size;
        head["warmup_epochs"] = cfg.warmup_epochs;
        head["seed"] = cfg.seed;
        head["freeze_quad"] = cfg.freeze_quad;
        head["quad_lr_scale"] = cfg.quad_lr_scale;
        head["lr"] = cfg.optimizer.lr;
        head["weight_decay"] = cfg.optimizer.weight_decay;
        head["param_scalars"] = model.num_scalars();
        log << head.dump() << "\n";
    }

    const std::int64_t steps_per_epoch = (train_ds.count + cfg.batch_size - 1) / cfg.batch_size;
    const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
    const std::int64_t warmup_steps = steps_per_epoch * cfg.warmup_epochs;

    std::vector<std::int64_t> idx(static_cast<std::size_t>(train_ds.count));
    for (std::int64_t i = 0; i < train_ds.count; ++i) idx[static_cast<std::size_t>(i)] = i;

    std::int64_t step = 0;
    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(cfg.seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(epoch) + 1);
        for (std::int64_t i = train_ds.count - 1; i > 0; --i) {
            const std::int64_t j = static_cast<std::int64_t>(shuffle_rng.below(static_cast<std::uint64_t>(i + 1)));
            std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
        }

        double ce_sum = 0.0, reg_sum = 0.0, lr_last = 0.0;
        std::int64_t correct = 0;
        for (std::int64_t lo = 0; lo < train_ds.count; lo += cfg.batch_size) {
            const std::int64_t hi = std::min(train_ds.count, lo + cfg.batch_size);
            std::vector<std::int64_t> labels;
            DenseArray<float> batch = batch_from<float>(train_ds, idx, lo, hi, &labels);

            Tape<float> tape;
            FwdOpts fwd;
            fwd.train = true;
            fwd.trace = true;
            ForwardResult<float> res = model.forward(tape, batch, fwd);
            Node<float> ce = cross_entropy(res.logits, labels);
            Node<float> loss = add(ce, res.reg);

            const double loss_v = static_cast<double>(loss.value()[0]);
            if (!std::isfinite(loss_v)) {
                throw NumericError("training loss is not finite at epoch " + std::to_string(epoch) + " step " +
                                   std::to_string(step) + "\n" + surrogate_dump(res));
            }
            ce_sum += static_cast<double>(ce.value()[0]) * static_cast<double>(hi - lo);
            reg_sum += static_cast<double>(res.reg.value()[0]) * static_cast<double>(hi - lo);
            const DenseArray<float>& logits = res.logits.value();
            const std::int64_t K = logits.shape[1];
            for (std::int64_t b = 0; b < hi - lo; ++b) {
                std::int64_t best = 0;
                for (std::int64_t k = 1; k < K; ++k) {
                    if (logits[b * K + k] > logits[b * K + best]) best = k;
                }
                if (best == labels[static_cast<std::size_t>(b)]) ++correct;
            }

            tape.backward(loss);
            std::vector<const DenseArray<float>*> grads;
            grads.reserve(res.param_nodes.size());
            for (const Node<float>& n : res.param_nodes) grads.push_back(n.tape->maybe_grad(n.id));
            const double lr = cosine_lr(cfg.optimizer.lr, step, warmup_steps, total_steps);
            lr_last = lr;
            opt.step(model.params(), grads, lr, lr_scale, frozen);
            ++step;
        }

        EvalResult ev = evaluate(model, test_ds, cfg.batch_size);
        EpochMetrics m;
        m.epoch = epoch;
        m.lr = lr_last;
        m.train_ce = ce_sum / static_cast<double>(train_ds.count);
        m.train_reg = reg_sum / static_cast<double>(train_ds.count);
        m.train_acc = static_cast<double>(correct) / static_cast<double>(train_ds.count);
        m.test_ce = ev.ce;
        m.test_acc = ev.acc;
        result.history.push_back(m);

        nlohmann::json line;
        line["schema"] = 1;
        line["event"] = "epoch";
        line["epoch"] = m.epoch;
        line["lr"] = m.lr;
        line["train_ce"] = m.train_ce;
        line["train_reg"] = m.train_reg;
        line["train_acc"] = m.train_acc;
        line["test_ce"] = m.test_ce;
        line["test_acc"] = m.test_acc;
        log << line.dump() << "\n";
        log.flush();

        save_model(model, result.last_ckpt);
        if (m.test_acc > result.best_test_acc || result.best_epoch < 0) {
            result.best_test_acc = m.test_acc;
            result.best_epoch = epoch;
            save_model(model, result.best_ckpt);
        }
    }
    return result;
}

TrainResult run_training(const TrainConfig& cfg, const std::string& out_dir) {
    if (cfg.train_data.empty() || cfg.test_data.empty()) {
        throw ConfigError("train config must name train_data and test_data files");
    }
    Dataset train_ds = load_dataset(cfg.train_data);
    Dataset test_ds = load_dataset(cfg.test_data);
    return run_training(cfg, out_dir, train_ds, test_ds);
}

}  // namespace qa
