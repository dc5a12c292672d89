// SPDX-License-Identifier: Apache-2.0
//
// gflow: desk-scale driver for the communication stack.
//   run             multi-rank training run, metrics CSV + JSON summary
//   bench-allreduce single collective, measured vs predicted traffic
//   predict         analytic per-iteration traffic for a configuration

#include <cstdio>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "gflow/harness.hpp"

namespace {

using nlohmann::json;

std::vector<std::size_t> parse_dims(const std::string& spec) {
    std::vector<std::size_t> dims;
    std::stringstream ss(spec);
    std::string part;
    while (std::getline(ss, part, ',')) dims.push_back(std::stoull(part));
    return dims;
}

std::uint64_t parse_theta(const std::string& s) {
    if (s == "inf") return gflow::kThetaInfinite;
    return std::stoull(s);
}

gflow::Algo parse_algo(const std::string& s) {
    if (s == "ring") return gflow::Algo::kRing;
    if (s == "hier") return gflow::Algo::kHierarchical;
    if (s == "oracle") return gflow::Algo::kOracle;
    throw gflow::ConfigError("unknown algorithm '" + s + "'");
}

gflow::ElementType parse_precision(const std::string& s) {
    if (s == "fp32") return gflow::ElementType::kF32;
    if (s == "fp16") return gflow::ElementType::kF16;
    throw gflow::ConfigError("unknown precision '" + s + "'");
}

int group_size_from_groups(int ranks, int groups) {
    if (groups < 1 || ranks % groups != 0) {
        throw gflow::ConfigError("groups " + std::to_string(groups) +
                                 " must divide ranks " + std::to_string(ranks));
    }
    return ranks / groups;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"GradientFlow-style communication stack driver"};
    app.require_subcommand(1);

    // run
    auto* run = app.add_subcommand("run", "multi-rank training run");
    int ranks = 2, groups = 1, iters = 50, batch = 16;
    std::string transport = "inproc", algo = "ring", precision = "fp32", theta = "inf";
    std::string dims = "64,32,1", task = "linreg", out;
    bool csc = false;
    double sparsity = 0.0, lr = 0.01, momentum = 0.9;
    std::uint64_t warmup = 0, seed = 1;
    std::size_t chunk_size = 1000, examples = 0;
    int worker_rank = -1;
    run->add_option("--ranks", ranks, "number of workers");
    run->add_option("--transport", transport, "inproc | tcp");
    run->add_option("--algo", algo, "ring | hier | oracle");
    run->add_option("--groups", groups, "number of groups for hier");
    run->add_option("--precision", precision, "fp32 | fp16 wire precision");
    run->add_option("--theta", theta, "fusion threshold bytes, or 'inf'");
    run->add_flag("--csc", csc, "coarse-grained sparse communication");
    run->add_option("--sparsity", sparsity, "final sparsity ratio");
    run->add_option("--warmup", warmup, "warm-up iterations");
    run->add_option("--chunk-size", chunk_size, "elements per chunk");
    run->add_option("--batch", batch, "per-rank batch size");
    run->add_option("--iters", iters, "iterations");
    run->add_option("--lr", lr, "learning rate");
    run->add_option("--momentum", momentum, "momentum");
    run->add_option("--seed", seed, "RNG seed");
    run->add_option("--dims", dims, "model dims, comma separated");
    run->add_option("--task", task, "linreg | logistic");
    run->add_option("--examples", examples, "dataset size (default 64*ranks*batch)");
    run->add_option("--out", out, "metrics CSV path");
    run->add_option("--worker-rank", worker_rank)->group("");  // internal, tcp workers

    // bench-allreduce
    auto* bench = app.add_subcommand("bench-allreduce", "single collective benchmark");
    int b_ranks = 4, b_groups = 1;
    std::uint64_t b_bytes = 1 << 20;
    std::string b_algo = "ring", b_transport = "inproc", b_precision = "fp32";
    bench->add_option("--ranks", b_ranks, "number of workers");
    bench->add_option("--bytes", b_bytes, "buffer size in bytes");
    bench->add_option("--algo", b_algo, "ring | hier | oracle");
    bench->add_option("--groups", b_groups, "number of groups for hier");
    bench->add_option("--transport", b_transport, "inproc | tcp");
    bench->add_option("--precision", b_precision, "fp32 | fp16");

    // predict
    auto* predict = app.add_subcommand("predict", "analytic traffic prediction");
    int p_ranks = 2;
    std::uint64_t p_elements = 0;
    std::string p_precision = "fp32";
    bool p_csc = false;
    double p_sparsity = 0.0;
    std::size_t p_chunk = gflow::kDefaultChunkSize;
    std::string p_dims;
    predict->add_option("--ranks", p_ranks, "number of workers");
    predict->add_option("--elements", p_elements, "pool element count");
    predict->add_option("--dims", p_dims, "model dims (alternative to --elements)");
    predict->add_option("--precision", p_precision, "fp32 | fp16");
    predict->add_flag("--csc", p_csc, "sparse communication");
    predict->add_option("--sparsity", p_sparsity, "sparsity ratio");
    predict->add_option("--chunk-size", p_chunk, "elements per chunk");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            gflow::RunConfig config;
            config.ranks = ranks;
            config.transport = transport;
            config.out_path = out;
            auto& t = config.train;
            t.model_dims = parse_dims(dims);
            t.task = task == "logistic" ? gflow::Task::kLogistic
                                        : gflow::Task::kLinearRegression;
            t.batch = static_cast<std::size_t>(batch);
            t.iterations = static_cast<std::uint64_t>(iters);
            t.learning_rate = lr;
            t.momentum = momentum;
            t.seed = seed;
            t.n_examples = examples ? examples
                                    : 64ull * static_cast<std::size_t>(ranks) *
                                          static_cast<std::size_t>(batch);
            t.algorithm = parse_algo(algo);
            t.group_size = group_size_from_groups(ranks, groups);
            t.wire_precision = parse_precision(precision);
            t.theta_bytes = parse_theta(theta);
            t.csc = csc;
            t.final_sparsity = sparsity;
            t.warmup_iters = warmup;
            t.chunk_size = chunk_size;

            const auto summary = gflow::run_experiment(
                config, worker_rank >= 0 ? std::optional<int>(worker_rank) : std::nullopt);
            json j{{"final_loss", summary.final_loss},
                   {"total_payload_bytes", summary.total_payload_bytes},
                   {"grad_bytes_per_iteration", summary.grad_bytes_per_iteration},
                   {"predicted_bytes_per_iteration", summary.predicted_bytes_per_iteration},
                   {"predicted_vs_measured_delta", summary.predicted_vs_measured_delta}};
            std::cout << j.dump(2) << '\n';
            return 0;
        }
        if (bench->parsed()) {
            const auto result = gflow::bench_allreduce(
                b_ranks, b_bytes, parse_algo(b_algo),
                group_size_from_groups(b_ranks, b_groups), b_transport,
                parse_precision(b_precision));
            json j{{"per_rank_payload_sent", result.per_rank_payload_sent},
                   {"predicted_payload", result.predicted_payload},
                   {"phase2_segment_bytes", result.phase2_segment_bytes},
                   {"matches_oracle", result.matches_oracle}};
            std::cout << j.dump(2) << '\n';
            return result.matches_oracle ? 0 : 1;
        }
        if (predict->parsed()) {
            std::uint64_t elements = p_elements;
            if (elements == 0 && !p_dims.empty()) {
                const auto d = parse_dims(p_dims);
                for (std::size_t l = 1; l < d.size(); ++l) {
                    elements += static_cast<std::uint64_t>(d[l]) * d[l - 1] + d[l];
                }
            }
            if (elements == 0) throw gflow::ConfigError("need --elements or --dims");
            const auto p = gflow::predict_traffic(
                elements, gflow::element_size(parse_precision(p_precision)), p_ranks,
                p_sparsity, p_chunk, p_csc);
            json j{{"grad_bytes_per_rank_per_iteration", p.grad_bytes},
                   {"norm_bytes_per_rank_per_iteration", p.norm_bytes},
                   {"total_bytes", p.total()},
                   {"total_mb", p.total() / 1e6}};
            std::cout << j.dump(2) << '\n';
            return 0;
        }
    } catch (const gflow::ConfigError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
