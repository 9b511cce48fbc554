#include <CLI11.hpp>

#include "qa/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"quadrangle attention: training, verification and analysis"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "runs/out";
    auto* train = app.add_subcommand("train", "train a model from a JSON config");
    train->add_option("--config", config_path, "train config JSON")->required()->check(CLI::ExistingFile);
    train->add_option("--out", out_dir, "output directory for checkpoints and metrics");

    std::string ckpt, data;
    std::int64_t batch = 64;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval->add_option("--ckpt", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
    eval->add_option("--data", data, "dataset file")->required()->check(CLI::ExistingFile);
    eval->add_option("--batch", batch, "evaluation batch size");

    std::string target = "all";
    std::uint64_t seed = 20240811;
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    gradcheck->add_option("--target", target, "'all', 'ops', 'model' or an op-check name");
    gradcheck->add_option("--seed", seed, "rng seed");

    std::string flops_config, input_size;
    auto* flops = app.add_subcommand("flops", "analytic FLOPs accounting for a model config");
    flops->add_option("--config", flops_config, "model config JSON (or {\"preset\": name})")
        ->required()
        ->check(CLI::ExistingFile);
    flops->add_option("--input", input_size, "input size as HxW (overrides config input_size)");

    std::string image, quad_out;
    std::int64_t index = 0;
    auto* exportq = app.add_subcommand("export-quads", "export learned quadrangle geometry as JSONL");
    exportq->add_option("--ckpt", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
    exportq->add_option("--image", image, "dataset file supplying the input image")->required()->check(CLI::ExistingFile);
    exportq->add_option("--index", index, "image index within the dataset");
    exportq->add_option("--out", quad_out, "output JSONL path (default: stdout)");

    std::int64_t count = 64;
    auto* attnd = app.add_subcommand("attn-distance", "per-layer attention distance (mean and std)");
    attnd->add_option("--ckpt", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
    attnd->add_option("--data", data, "dataset file")->required()->check(CLI::ExistingFile);
    attnd->add_option("--count", count, "number of samples to average over");

    std::string spec_path, gen_out = "data";
    auto* gen = app.add_subcommand("gen-data", "generate the synthetic oriented-bars dataset");
    gen->add_option("--spec", spec_path, "dataset spec JSON")->required()->check(CLI::ExistingFile);
    gen->add_option("--out", gen_out, "output directory");

    CLI11_PARSE(app, argc, argv);

    return qa::cmd::guarded([&]() -> int {
        if (train->parsed()) return qa::cmd::train(config_path, out_dir);
        if (eval->parsed()) return qa::cmd::eval(ckpt, data, batch);
        if (gradcheck->parsed()) return qa::cmd::gradcheck(target, seed);
        if (flops->parsed()) return qa::cmd::flops(flops_config, input_size);
        if (exportq->parsed()) return qa::cmd::export_quads(ckpt, image, index, quad_out);
        if (attnd->parsed()) return qa::cmd::attn_distance(ckpt, data, count);
        if (gen->parsed()) return qa::cmd::gen_data(spec_path, gen_out);
        return 1;
    });
}
