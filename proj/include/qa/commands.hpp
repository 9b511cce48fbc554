#pragma once

#include <functional>
#include <string>

#include "qa/model.hpp"

namespace qa {

struct ModelCheckResult {
    double max_rel_err = 0.0;
    double tol = 1e-3;
    bool pass = false;
};

// Full-model central-difference check of d(total loss)/d(parameter) on a
// handful of randomly chosen parameter entries, in 64-bit. The quadrangle
// head is nudged off its zero initialization first so sampling coordinates
// sit away from the bilinear lattice kinks.
ModelCheckResult model_gradcheck(const ModelConfig& cfg, std::uint64_t seed, int entries = 5, double h = 1e-5);

namespace cmd {

// Each command prints its result to stdout and returns a process exit code:
// 0 ok, 2 config error, 3 numeric failure.
int train(const std::string& config_path, const std::string& out_dir);
int eval(const std::string& ckpt_path, const std::string& data_path, std::int64_t batch_size);
int gradcheck(const std::string& target, std::uint64_t seed);
int flops(const std::string& config_path, const std::string& input_size);
int export_quads(const std::string& ckpt_path, const std::string& image_path, std::int64_t index,
                 const std::string& out_path);
int attn_distance(const std::string& ckpt_path, const std::string& data_path, std::int64_t count);
int gen_data(const std::string& spec_path, const std::string& out_dir);

// Maps qa exceptions onto the documented exit codes, printing the message.
int guarded(const std::function<int()>& fn);

}  // namespace cmd

}  // namespace qa
