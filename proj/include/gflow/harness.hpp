// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration: run configuration, multi-rank launch (threads
// for the in-process backend, one process per rank for TCP), analytic
// traffic prediction, and metrics/summary reporting.

#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "gflow/trainer.hpp"

namespace gflow {

struct RunConfig {
    int ranks = 2;
    std::string transport = "inproc";  // inproc | tcp
    TrainOptions train;
    std::string out_path;  // metrics CSV; summary JSON at <out>.summary.json
};

// Throws ConfigError on invalid combinations (e.g. groups not dividing N).
void validate(const RunConfig& config);

// Analytic per-iteration gradient payload per rank, in bytes. Dense:
// 2(N-1)/N * pool_bytes. CSC at steady state: the same over selected chunk
// bytes, plus the fp32 norm-vector allreduce.
struct TrafficPrediction {
    double grad_bytes = 0.0;
    double norm_bytes = 0.0;
    double total() const { return grad_bytes + norm_bytes; }
};

TrafficPrediction predict_traffic(std::uint64_t pool_elements, std::size_t element_bytes,
                                  int ranks, double sparsity, std::size_t chunk_size,
                                  bool csc);
TrafficPrediction predict_traffic(const RunConfig& config);

struct RunSummary {
    double final_loss = 0.0;
    std::uint64_t total_payload_bytes = 0;  // rank 0, whole run
    double grad_bytes_per_iteration = 0.0;  // measured mean
    double predicted_bytes_per_iteration = 0.0;
    double predicted_vs_measured_delta = 0.0;
    std::uint64_t iterations = 0;
};

// Spawns ranks, trains, writes metrics CSV and a JSON summary. Returns the
// summary. Set worker_rank when re-invoked as a TCP worker process.
RunSummary run_experiment(const RunConfig& config,
                          std::optional<int> worker_rank = std::nullopt);

struct BenchResult {
    std::uint64_t per_rank_payload_sent = 0;
    std::uint64_t predicted_payload = 0;
    std::size_t phase2_segment_bytes = 0;  // hierarchical only
    bool matches_oracle = false;
};

// One allreduce of `bytes` payload across `ranks`, measured against the
// analytic formula and the oracle result.
BenchResult bench_allreduce(int ranks, std::uint64_t bytes, Algo algo, int group_size,
                            const std::string& transport, ElementType precision);

std::uint16_t port_base_from_env();  // GFLOW_PORT_BASE, default 28500

}  // namespace gflow
