// SPDX-License-Identifier: Apache-2.0

#include "gflow/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

namespace gflow {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

std::uint64_t fnv1a(std::span<const std::byte> bytes) {
    std::uint64_t h = 1469598103934665603ull;
    for (std::byte b : bytes) {
        h ^= std::to_integer<std::uint64_t>(b);
        h *= 1099511628211ull;
    }
    return h;
}

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

}  // namespace

Dataset synth_data(std::uint64_t seed, std::size_t n_examples, std::size_t input_dim,
                   Task task, int world_size) {
    if (world_size < 1 || n_examples % static_cast<std::size_t>(world_size) != 0) {
        throw ConfigError("n_examples must be divisible by world_size");
    }
    Dataset d;
    d.seed = seed;
    d.n_examples = n_examples;
    d.input_dim = input_dim;
    d.task = task;
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> gauss(0.0f, 1.0f);
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);

    d.true_weights.resize(input_dim);
    const float scale = 1.0f / std::sqrt(static_cast<float>(input_dim));
    for (auto& w : d.true_weights) w = gauss(rng) * scale * 3.0f;

    d.inputs.resize(n_examples * input_dim);
    for (auto& x : d.inputs) x = gauss(rng);
    d.targets.resize(n_examples);
    for (std::size_t i = 0; i < n_examples; ++i) {
        double z = 0.0;
        for (std::size_t j = 0; j < input_dim; ++j) {
            z += static_cast<double>(d.inputs[i * input_dim + j]) * d.true_weights[j];
        }
        if (task == Task::kLinearRegression) {
            d.targets[i] = static_cast<float>(z) + 0.1f * gauss(rng);
        } else {
            d.targets[i] = unit(rng) < sigmoid(z) ? 1.0f : 0.0f;
        }
    }
    return d;
}

Shard shard_of(const Dataset& data, int rank, int world_size) {
    const std::size_t size = data.n_examples / static_cast<std::size_t>(world_size);
    return Shard{&data, static_cast<std::size_t>(rank) * size, size};
}

void Shard::batch(std::uint64_t t, std::size_t batch_size, std::vector<float>& x_out,
                  std::vector<float>& y_out) const {
    const std::size_t d = data->input_dim;
    x_out.resize(batch_size * d);
    y_out.resize(batch_size);
    for (std::size_t b = 0; b < batch_size; ++b) {
        const std::size_t idx = begin + (t * batch_size + b) % size;
        std::memcpy(&x_out[b * d], &data->inputs[idx * d], d * sizeof(float));
        y_out[b] = data->targets[idx];
    }
}

Model::Model(std::vector<std::size_t> dims, Task task, std::uint64_t seed)
    : dims_(std::move(dims)), task_(task) {
    if (dims_.size() < 2) throw ConfigError("model needs at least input and output dims");
    const std::size_t layers = dims_.size() - 1;
    tensor_sizes_.reserve(2 * layers);
    for (std::size_t l = 1; l <= layers; ++l) {
        tensor_sizes_.push_back(dims_[l] * dims_[l - 1]);  // weight, id 2l-1
        tensor_sizes_.push_back(dims_[l]);                 // bias, id 2l
    }
    const int m = num_tensors();
    tensor_offsets_.resize(static_cast<std::size_t>(m));
    std::size_t offset = 0;
    std::size_t total = 0;
    for (int id = m; id >= 1; --id) {
        tensor_offsets_[static_cast<std::size_t>(id - 1)] = offset;
        offset += tensor_sizes_[static_cast<std::size_t>(id - 1)];
    }
    total = offset;
    weights_.assign(total, 0.0f);

    // Deterministic fan-in-scaled uniform init, identical on every rank.
    std::mt19937_64 rng(seed ^ 0x517cc1b727220a95ull);
    for (int id = 1; id <= m; ++id) {
        const std::size_t l = static_cast<std::size_t>((id - 1) / 2) + 1;  // layer
        const float r = 1.0f / std::sqrt(static_cast<float>(dims_[l - 1]));
        std::uniform_real_distribution<float> uni(-r, r);
        auto w = tensor_weights(id);
        const bool is_bias = id % 2 == 0;
        for (auto& v : w) v = is_bias ? 0.0f : uni(rng);
    }
}

std::size_t Model::tensor_offset(int tensor_id) const {
    return tensor_offsets_.at(static_cast<std::size_t>(tensor_id - 1));
}

std::span<float> Model::tensor_weights(int tensor_id) {
    return std::span<float>(weights_).subspan(
        tensor_offset(tensor_id), tensor_sizes_.at(static_cast<std::size_t>(tensor_id - 1)));
}

double Model::forward_backward(
    std::span<const float> x, std::span<const float> y, std::size_t batch,
    const std::function<void(int, std::span<const float>)>& emit) {
    const std::size_t layers = dims_.size() - 1;
    // Forward, keeping activations. acts[0] is the input batch.
    std::vector<std::vector<float>> acts(layers + 1);
    acts[0].assign(x.begin(), x.end());
    for (std::size_t l = 1; l <= layers; ++l) {
        const std::size_t din = dims_[l - 1];
        const std::size_t dout = dims_[l];
        const int wid = static_cast<int>(2 * l - 1);
        const int bid = static_cast<int>(2 * l);
        const float* W = weights_.data() + tensor_offset(wid);
        const float* bias = weights_.data() + tensor_offset(bid);
        acts[l].assign(batch * dout, 0.0f);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t o = 0; o < dout; ++o) {
                float z = bias[o];
                const float* row = W + o * din;
                const float* a = acts[l - 1].data() + b * din;
                for (std::size_t i = 0; i < din; ++i) z += row[i] * a[i];
                acts[l][b * dout + o] = (l < layers) ? std::tanh(z) : z;
            }
        }
    }

    // Loss and output delta.
    const std::size_t dout_last = dims_.back();
    std::vector<float> delta(batch * dout_last);
    double loss = 0.0;
    const double inv_b = 1.0 / static_cast<double>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t o = 0; o < dout_last; ++o) {
            const double z = acts[layers][b * dout_last + o];
            const double target = y[b * dout_last + o];
            if (task_ == Task::kLinearRegression) {
                const double e = z - target;
                loss += e * e * inv_b;
                delta[b * dout_last + o] = static_cast<float>(2.0 * e * inv_b);
            } else {
                const double p = sigmoid(z);
                loss += -(target * std::log(std::max(p, 1e-12)) +
                          (1.0 - target) * std::log(std::max(1.0 - p, 1e-12))) *
                        inv_b;
                delta[b * dout_last + o] = static_cast<float>((p - target) * inv_b);
            }
        }
    }
    if (!std::isfinite(loss)) throw TrainingError("non-finite loss");

    // Backward, emitting tensors last layer first: bias then weight.
    for (std::size_t l = layers; l >= 1; --l) {
        const std::size_t din = dims_[l - 1];
        const std::size_t dout = dims_[l];
        const int wid = static_cast<int>(2 * l - 1);
        const int bid = static_cast<int>(2 * l);

        std::vector<float> db(dout, 0.0f);
        std::vector<float> dW(dout * din, 0.0f);
        for (std::size_t b = 0; b < batch; ++b) {
            const float* dl = delta.data() + b * dout;
            const float* a = acts[l - 1].data() + b * din;
            for (std::size_t o = 0; o < dout; ++o) {
                db[o] += dl[o];
                float* dwrow = dW.data() + o * din;
                for (std::size_t i = 0; i < din; ++i) dwrow[i] += dl[o] * a[i];
            }
        }
        emit(bid, db);
        emit(wid, dW);

        if (l > 1) {
            const float* W = weights_.data() + tensor_offset(wid);
            std::vector<float> prev(batch * din, 0.0f);
            for (std::size_t b = 0; b < batch; ++b) {
                const float* dl = delta.data() + b * dout;
                float* pd = prev.data() + b * din;
                const float* a = acts[l - 1].data() + b * din;
                for (std::size_t o = 0; o < dout; ++o) {
                    const float* row = W + o * din;
                    for (std::size_t i = 0; i < din; ++i) pd[i] += dl[o] * row[i];
                }
                for (std::size_t i = 0; i < din; ++i) pd[i] *= 1.0f - a[i] * a[i];
            }
            delta = std::move(prev);
        }
    }
    return loss;
}

double Model::loss(std::span<const float> x, std::span<const float> y,
                   std::size_t batch) const {
    // Forward only; same math as forward_backward.
    const std::size_t layers = dims_.size() - 1;
    std::vector<float> act(x.begin(), x.end());
    for (std::size_t l = 1; l <= layers; ++l) {
        const std::size_t din = dims_[l - 1];
        const std::size_t dout = dims_[l];
        const float* W = weights_.data() + tensor_offset(static_cast<int>(2 * l - 1));
        const float* bias = weights_.data() + tensor_offset(static_cast<int>(2 * l));
        std::vector<float> next(batch * dout);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t o = 0; o < dout; ++o) {
                float z = bias[o];
                const float* row = W + o * din;
                const float* a = act.data() + b * din;
                for (std::size_t i = 0; i < din; ++i) z += row[i] * a[i];
                next[b * dout + o] = (l < layers) ? std::tanh(z) : z;
            }
        }
        act = std::move(next);
    }
    const std::size_t dout_last = dims_.back();
    double loss = 0.0;
    const double inv_b = 1.0 / static_cast<double>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t o = 0; o < dout_last; ++o) {
            const double z = act[b * dout_last + o];
            const double target = y[b * dout_last + o];
            if (task_ == Task::kLinearRegression) {
                const double e = z - target;
                loss += e * e * inv_b;
            } else {
                const double p = sigmoid(z);
                loss += -(target * std::log(std::max(p, 1e-12)) +
                          (1.0 - target) * std::log(std::max(1.0 - p, 1e-12))) *
                        inv_b;
            }
        }
    }
    return loss;
}

double dataset_loss(const Model& model, const Dataset& data) {
    return model.loss(data.inputs, data.targets, data.n_examples);
}

TrainResult train_worker(const TrainOptions& opts, Transport& transport) {
    const int world = transport.world_size();
    const int rank = transport.rank();

    Dataset data = synth_data(opts.seed, opts.n_examples, opts.model_dims.front(),
                              opts.task, world);
    Shard shard = shard_of(data, rank, world);
    Model model(opts.model_dims, opts.task, opts.seed);
    GradientPool pool(model.tensor_sizes(), opts.chunk_size, opts.wire_precision);
    Communicator comm(transport, opts.group_size);
    FusionEngine engine(pool, comm, FusionConfig{opts.theta_bytes, opts.algorithm});
    SparseState sparse(pool, SparseConfig{opts.momentum, opts.learning_rate,
                                          opts.csc ? opts.final_sparsity : 0.0,
                                          opts.csc ? opts.warmup_iters : 0});
    std::vector<float> dense_hu(pool.total_elements(), 0.0f);

    TrainResult result;
    std::vector<float> x, y;
    std::vector<FusedHandle> handles;

    for (std::uint64_t t = 0; t < opts.iterations; ++t) {
        IterationMetrics m;
        m.iteration = t;
        const std::uint64_t sent0 = transport.stats().total().payload_bytes_sent;
        const std::uint64_t check0 = transport.stats().phase("csc_check").payload_bytes_sent;

        pool.begin_iteration();
        engine.begin_iteration();
        if (opts.csc) sparse.begin_iteration(t);
        handles.clear();

        shard.batch(t, opts.batch, x, y);
        const double c0 = now_ms();
        m.local_loss = model.forward_backward(
            x, y, opts.batch, [&](int id, std::span<const float> grad) {
                auto completed = pool.write_tensor(id, grad);
                if (opts.csc) {
                    for (std::size_t c : completed) sparse.correction_pre_allreduce(c);
                } else {
                    for (auto& h : engine.on_tensor_complete(id)) {
                        handles.push_back(std::move(h));
                    }
                }
            });
        const double c1 = now_ms();
        m.wall_ms_compute = c1 - c0;

        if (opts.csc) {
            sparse.sparse_exchange(comm, engine);
        } else {
            if (auto h = engine.finalize_iteration()) handles.push_back(std::move(*h));
            FusionEngine::wait_all(handles);
        }
        const double c2 = now_ms();
        const std::uint64_t sent1 = transport.stats().total().payload_bytes_sent;
        const std::uint64_t check1 = transport.stats().phase("csc_check").payload_bytes_sent;
        m.grad_payload_bytes = (sent1 - sent0) - (check1 - check0);
        m.sparsity = opts.csc ? sparse.current_sparsity() : 0.0;
        m.collectives_launched =
            opts.csc ? sparse.last_exchange_windows() : engine.last_log().window_count();

        if (opts.csc) {
            sparse.select_next_important(comm, t);
        }
        const std::uint64_t sent2 = transport.stats().total().payload_bytes_sent;
        m.norm_bytes = sent2 - sent1;
        m.wall_ms_comm = now_ms() - c2 + 0.0;

        // Update step, strictly after all communication on the pool.
        if (opts.csc) {
            sparse.sgd_update(model.weights(), world);
        } else {
            const float inv_world = 1.0f / static_cast<float>(world);
            ScalarBuffer v = pool.view();
            auto w = model.weights();
            const float mom = static_cast<float>(opts.momentum);
            const float lr = static_cast<float>(opts.learning_rate);
            for (std::size_t i = 0; i < pool.total_elements(); ++i) {
                const float g_avg = v.get(i) * inv_world;
                const float u = mom * dense_hu[i] + lr * g_avg;
                dense_hu[i] = u;
                w[i] -= u;
            }
        }

        // Mean loss across ranks.
        float loss_buf = static_cast<float>(m.local_loss);
        ScalarBuffer lb{ElementType::kF32, reinterpret_cast<std::byte*>(&loss_buf), 1};
        oracle_allreduce(comm, lb);
        m.loss = static_cast<double>(loss_buf) / world;

        // Replica consistency: identical master weights on every rank.
        if (world > 1) {
            const auto wspan = model.weights();
            const std::uint64_t local_sum = fnv1a(std::as_bytes(wspan));
            const std::uint32_t tag = (comm.acquire_collective_id() << 8) | 6;
            std::vector<std::byte> payload(8);
            std::memcpy(payload.data(), &local_sum, 8);
            if (rank == 0) {
                for (int r = 1; r < world; ++r) transport.send(r, tag, payload, "wcheck");
            } else {
                auto ref = transport.recv(0, tag, "wcheck");
                std::uint64_t expected;
                std::memcpy(&expected, ref.data(), 8);
                if (expected != local_sum) {
                    throw ProtocolError("replica weight divergence at rank " +
                                        std::to_string(rank) + ", iteration " +
                                        std::to_string(t));
                }
            }
        }
        result.metrics.push_back(m);
    }

    const auto w = model.weights();
    result.final_weights.assign(w.begin(), w.end());
    result.final_loss = result.metrics.empty() ? 0.0 : result.metrics.back().loss;
    return result;
}

std::string metrics_csv_header() {
    return "iteration,loss,sparsity,grad_payload_bytes,norm_bytes,collectives_launched,"
           "wall_ms_compute,wall_ms_comm";
}

std::string metrics_csv_line(const IterationMetrics& m) {
    std::ostringstream os;
    os << m.iteration << ',' << m.loss << ',' << m.sparsity << ','
       << m.grad_payload_bytes << ',' << m.norm_bytes << ',' << m.collectives_launched
       << ',' << m.wall_ms_compute << ',' << m.wall_ms_comm;
    return os.str();
}

}  // namespace gflow
