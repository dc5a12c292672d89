// SPDX-License-Identifier: Apache-2.0
//
// Python bindings for the main operations: binary16 codec, pool
// partitioning, sparsity schedule and selection sizing, analytic traffic
// prediction, allreduce micro-benchmarks, and in-process training runs.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <thread>

#include "gflow/half.hpp"
#include "gflow/harness.hpp"
#include "gflow/inproc.hpp"
#include "gflow/sparse.hpp"
#include "gflow/trainer.hpp"

namespace py = pybind11;
using namespace gflow;

namespace {

Algo algo_from_name(const std::string& name) {
    if (name == "ring") return Algo::kRing;
    if (name == "hierarchical") return Algo::kHierarchical;
    if (name == "oracle") return Algo::kOracle;
    throw ConfigError("unknown algorithm: " + name);
}

ElementType precision_from_name(const std::string& name) {
    if (name == "fp32") return ElementType::kF32;
    if (name == "fp16") return ElementType::kF16;
    throw ConfigError("unknown precision: " + name);
}

py::dict pool_info(const std::vector<std::size_t>& tensor_sizes,
                   std::size_t chunk_size) {
    GradientPool pool(tensor_sizes, chunk_size, ElementType::kF32);
    py::dict out;
    out["total_elements"] = pool.total_elements();
    out["num_chunks"] = pool.num_chunks();
    py::dict offsets;
    std::vector<std::size_t> chunk_lengths(pool.num_chunks());
    for (std::size_t c = 0; c < pool.num_chunks(); ++c) {
        chunk_lengths[c] = pool.chunk_length(c);
    }
    for (int id = 1; id <= pool.num_tensors(); ++id) {
        offsets[py::int_(id)] = pool.desc(id).pool_offset;
    }
    out["tensor_offsets"] = offsets;
    out["chunk_lengths"] = chunk_lengths;
    return out;
}

py::bytes encode_half_py(const std::vector<float>& values) {
    const auto bytes = encode_half(values);
    return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

std::vector<float> decode_half_py(const py::bytes& raw) {
    std::string s = raw;
    return decode_half(std::span<const std::byte>(
        reinterpret_cast<const std::byte*>(s.data()), s.size()));
}

py::dict predict_traffic_py(std::uint64_t pool_elements, std::size_t element_bytes,
                            int ranks, double sparsity, std::size_t chunk_size,
                            bool csc) {
    const auto p =
        predict_traffic(pool_elements, element_bytes, ranks, sparsity, chunk_size, csc);
    py::dict out;
    out["grad_bytes"] = p.grad_bytes;
    out["norm_bytes"] = p.norm_bytes;
    out["total_bytes"] = p.total();
    return out;
}

py::dict bench_allreduce_py(int ranks, std::uint64_t bytes, const std::string& algo,
                            int group_size, const std::string& precision) {
    const auto r = bench_allreduce(ranks, bytes, algo_from_name(algo), group_size,
                                   "inproc", precision_from_name(precision));
    py::dict out;
    out["per_rank_payload_sent"] = r.per_rank_payload_sent;
    out["predicted_payload"] = r.predicted_payload;
    out["phase2_segment_bytes"] = r.phase2_segment_bytes;
    out["matches_oracle"] = r.matches_oracle;
    return out;
}

py::dict train_inproc(int ranks, const std::vector<std::size_t>& model_dims,
                      const std::string& task, std::uint64_t iterations,
                      std::size_t n_examples, std::size_t batch, double learning_rate,
                      double momentum, std::uint64_t seed, const std::string& algo,
                      int group_size, const std::string& precision,
                      std::uint64_t theta_bytes, bool csc, double final_sparsity,
                      std::uint64_t warmup_iters, std::size_t chunk_size) {
    TrainOptions opts;
    opts.model_dims = model_dims;
    opts.task = task == "logistic" ? Task::kLogistic : Task::kLinearRegression;
    opts.iterations = iterations;
    opts.n_examples = n_examples;
    opts.batch = batch;
    opts.learning_rate = learning_rate;
    opts.momentum = momentum;
    opts.seed = seed;
    opts.algorithm = algo_from_name(algo);
    opts.group_size = group_size;
    opts.wire_precision = precision_from_name(precision);
    opts.theta_bytes = theta_bytes;
    opts.csc = csc;
    opts.final_sparsity = final_sparsity;
    opts.warmup_iters = warmup_iters;
    opts.chunk_size = chunk_size;

    std::vector<TrainResult> results(static_cast<std::size_t>(ranks));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(ranks));
    {
        py::gil_scoped_release release;
        auto world = make_inproc_world(ranks);
        std::vector<std::thread> ts;
        for (int r = 0; r < ranks; ++r) {
            ts.emplace_back([&, r] {
                try {
                    results[static_cast<std::size_t>(r)] =
                        train_worker(opts, *world[static_cast<std::size_t>(r)]);
                } catch (...) {
                    errors[static_cast<std::size_t>(r)] = std::current_exception();
                }
            });
        }
        for (auto& t : ts) t.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    const auto& r0 = results[0];
    py::dict out;
    out["final_loss"] = r0.final_loss;
    out["final_weights"] = r0.final_weights;
    std::vector<double> losses;
    std::vector<std::uint64_t> grad_bytes;
    std::vector<double> sparsity;
    for (const auto& m : r0.metrics) {
        losses.push_back(m.loss);
        grad_bytes.push_back(m.grad_payload_bytes);
        sparsity.push_back(m.sparsity);
    }
    out["loss"] = losses;
    out["grad_payload_bytes"] = grad_bytes;
    out["sparsity"] = sparsity;
    return out;
}

}  // namespace

PYBIND11_MODULE(gflowpy, m) {
    m.doc() = "Desk-scale distributed-training communication stack";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

    m.def("float_to_half_bits", &float_to_half_bits, py::arg("value"));
    m.def("half_bits_to_float", &half_bits_to_float, py::arg("bits"));
    m.def("encode_half", &encode_half_py, py::arg("values"));
    m.def("decode_half", &decode_half_py, py::arg("data"));

    m.def("pool_info", &pool_info, py::arg("tensor_sizes"),
          py::arg("chunk_size") = 32000,
          "Pool layout: chunk partitioning and per-tensor offsets.");

    m.def("sparsity_at", &sparsity_at, py::arg("iteration"), py::arg("warmup_iters"),
          py::arg("final_sparsity"));
    m.def("selection_count", &selection_count, py::arg("sparsity"),
          py::arg("num_chunks"));

    m.def("predict_traffic", &predict_traffic_py, py::arg("pool_elements"),
          py::arg("element_bytes"), py::arg("ranks"), py::arg("sparsity") = 0.0,
          py::arg("chunk_size") = 32000, py::arg("csc") = false,
          "Analytic per-rank, per-iteration gradient payload in bytes.");

    m.def("bench_allreduce", &bench_allreduce_py, py::arg("ranks"), py::arg("bytes"),
          py::arg("algo") = "ring", py::arg("group_size") = 1,
          py::arg("precision") = "fp32",
          "One in-process allreduce, measured against the analytic formula "
          "and the oracle result.");

    m.def("train", &train_inproc, py::arg("ranks") = 2,
          py::arg("model_dims") = std::vector<std::size_t>{64, 32, 1},
          py::arg("task") = "linear", py::arg("iterations") = 50,
          py::arg("n_examples") = 1024, py::arg("batch") = 16,
          py::arg("learning_rate") = 0.01, py::arg("momentum") = 0.9,
          py::arg("seed") = 1, py::arg("algo") = "ring", py::arg("group_size") = 1,
          py::arg("precision") = "fp32", py::arg("theta_bytes") = 64ull << 20,
          py::arg("csc") = false, py::arg("final_sparsity") = 0.0,
          py::arg("warmup_iters") = 0, py::arg("chunk_size") = 1000,
          "Deterministic multi-rank training over the in-process transport; "
          "returns rank 0 metrics and final weights.");
}
