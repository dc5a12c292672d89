// SPDX-License-Identifier: Apache-2.0
//
// Deterministic data-parallel training loop at desk scale: synthetic
// datasets, a small MLP whose per-layer weight/bias tensors map onto the
// gradient pool, and fp32 master-weight updates driving the communication
// stack end to end.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gflow/collectives.hpp"
#include "gflow/fusion.hpp"
#include "gflow/gradient_pool.hpp"
#include "gflow/sparse.hpp"

namespace gflow {

enum class Task { kLinearRegression, kLogistic };

struct Dataset {
    std::uint64_t seed = 0;
    std::size_t n_examples = 0;
    std::size_t input_dim = 0;
    Task task = Task::kLinearRegression;
    std::vector<float> inputs;   // n_examples x input_dim, row major
    std::vector<float> targets;  // n_examples
    std::vector<float> true_weights;  // generator model, for loss-floor checks

    std::span<const float> example(std::size_t i) const {
        return std::span<const float>(inputs).subspan(i * input_dim, input_dim);
    }
};

// Reproducible synthetic dataset; n_examples must be divisible by world_size.
Dataset synth_data(std::uint64_t seed, std::size_t n_examples, std::size_t input_dim,
                   Task task, int world_size = 1);

// Contiguous, disjoint, equal-size shard of the dataset.
struct Shard {
    const Dataset* data;
    std::size_t begin;
    std::size_t size;

    // Per-GPU batch for iteration t: a cyclic contiguous block of the shard.
    void batch(std::uint64_t t, std::size_t batch_size, std::vector<float>& x_out,
               std::vector<float>& y_out) const;
};
Shard shard_of(const Dataset& data, int rank, int world_size);

// MLP with tanh hidden layers. Layer l's weight tensor gets id 2l+1 and its
// bias tensor id 2l+2 (ascending layer order); master weights live in one
// flat fp32 vector laid out exactly like the gradient pool.
class Model {
public:
    Model(std::vector<std::size_t> dims, Task task, std::uint64_t seed);

    const std::vector<std::size_t>& tensor_sizes() const { return tensor_sizes_; }
    int num_tensors() const { return static_cast<int>(tensor_sizes_.size()); }
    std::size_t total_parameters() const { return weights_.size(); }

    std::span<float> weights() { return weights_; }
    std::span<const float> weights() const { return weights_; }
    std::span<float> tensor_weights(int tensor_id);

    // One forward/backward pass over a batch. Gradient tensors are emitted
    // in descending-ID order through `emit`. Returns the batch loss.
    double forward_backward(std::span<const float> x, std::span<const float> y,
                            std::size_t batch,
                            const std::function<void(int, std::span<const float>)>& emit);

    // Loss only, no gradients; the finite-difference oracle uses this.
    double loss(std::span<const float> x, std::span<const float> y, std::size_t batch) const;

    Task task() const { return task_; }
    const std::vector<std::size_t>& dims() const { return dims_; }

private:
    std::size_t tensor_offset(int tensor_id) const;

    std::vector<std::size_t> dims_;
    Task task_;
    std::vector<std::size_t> tensor_sizes_;   // ascending tensor id
    std::vector<std::size_t> tensor_offsets_; // pool layout offsets per id
    std::vector<float> weights_;
};

// Mean loss of the model over a whole dataset.
double dataset_loss(const Model& model, const Dataset& data);

struct TrainOptions {
    std::vector<std::size_t> model_dims = {64, 32, 1};
    Task task = Task::kLinearRegression;
    std::size_t batch = 16;
    std::uint64_t iterations = 50;
    double learning_rate = 0.01;
    double momentum = 0.9;
    std::uint64_t seed = 1;
    std::size_t n_examples = 1024;

    Algo algorithm = Algo::kRing;
    int group_size = 1;  // hierarchical groups of this many ranks
    ElementType wire_precision = ElementType::kF32;
    std::uint64_t theta_bytes = 64ull << 20;

    bool csc = false;
    double final_sparsity = 0.0;
    std::uint64_t warmup_iters = 0;
    std::size_t chunk_size = 1000;
};

struct IterationMetrics {
    std::uint64_t iteration = 0;
    double loss = 0.0;  // allreduced mean loss
    double local_loss = 0.0;
    double sparsity = 0.0;
    std::uint64_t grad_payload_bytes = 0;
    std::uint64_t norm_bytes = 0;
    std::uint64_t collectives_launched = 0;
    double wall_ms_compute = 0.0;
    double wall_ms_comm = 0.0;
};

struct TrainResult {
    std::vector<IterationMetrics> metrics;
    std::vector<float> final_weights;
    double final_loss = 0.0;  // last iteration's mean loss
};

// Runs the full loop on one rank's transport. All ranks must be launched
// with identical options; replica weight checksums are verified every
// iteration.
TrainResult train_worker(const TrainOptions& opts, Transport& transport);

std::string metrics_csv_header();
std::string metrics_csv_line(const IterationMetrics& m);

}  // namespace gflow
