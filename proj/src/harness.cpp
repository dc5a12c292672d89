// SPDX-License-Identifier: Apache-2.0

#include "gflow/harness.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <random>
#include <thread>

#include <json.hpp>

#include "gflow/inproc.hpp"
#include "gflow/tcp.hpp"

namespace gflow {

namespace {

using nlohmann::json;

std::uint64_t model_parameter_count(const std::vector<std::size_t>& dims) {
    std::uint64_t total = 0;
    for (std::size_t l = 1; l < dims.size(); ++l) {
        total += static_cast<std::uint64_t>(dims[l]) * dims[l - 1] + dims[l];
    }
    return total;
}

void write_metrics_csv(const std::string& path, const std::vector<IterationMetrics>& rows) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot write metrics file '" + path + "'");
    os << metrics_csv_header() << '\n';
    for (const auto& m : rows) os << metrics_csv_line(m) << '\n';
}

void write_summary_json(const std::string& path, const RunSummary& s) {
    json j{{"final_loss", s.final_loss},
           {"total_payload_bytes", s.total_payload_bytes},
           {"grad_bytes_per_iteration", s.grad_bytes_per_iteration},
           {"predicted_bytes_per_iteration", s.predicted_bytes_per_iteration},
           {"predicted_vs_measured_delta", s.predicted_vs_measured_delta},
           {"iterations", s.iterations}};
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot write summary file '" + path + "'");
    os << j.dump(2) << '\n';
}

RunSummary summarize(const RunConfig& config, const TrainResult& result,
                     std::uint64_t total_sent) {
    RunSummary s;
    s.final_loss = result.final_loss;
    s.total_payload_bytes = total_sent;
    s.iterations = config.train.iterations;
    // Mean over steady-state iterations only: the warm-up ramp (and the
    // always-dense first iteration) would skew the comparison against the
    // steady-state prediction.
    std::size_t skip = 0;
    if (config.train.csc) {
        skip = static_cast<std::size_t>(
            std::min<std::uint64_t>(config.train.warmup_iters + 1,
                                    config.train.iterations));
    }
    std::uint64_t grad_total = 0;
    std::size_t counted = 0;
    for (std::size_t i = skip; i < result.metrics.size(); ++i) {
        grad_total += result.metrics[i].grad_payload_bytes;
        ++counted;
    }
    s.grad_bytes_per_iteration =
        counted == 0 ? 0.0
                     : static_cast<double>(grad_total) / static_cast<double>(counted);
    s.predicted_bytes_per_iteration = predict_traffic(config).grad_bytes;
    s.predicted_vs_measured_delta =
        s.grad_bytes_per_iteration - s.predicted_bytes_per_iteration;
    return s;
}

void emit_outputs(const RunConfig& config, const TrainResult& result,
                  const RunSummary& summary) {
    if (config.out_path.empty()) return;
    write_metrics_csv(config.out_path, result.metrics);
    write_summary_json(config.out_path + ".summary.json", summary);
}

RunSummary run_tcp_worker(const RunConfig& config, int rank) {
    const auto peers =
        TcpTransport::loopback_addresses(config.ranks, port_base_from_env());
    TcpTransport tp(rank, config.ranks, peers);
    TrainResult result = train_worker(config.train, tp);
    tp.barrier();  // quiescence before sockets close
    RunSummary summary = summarize(config, result, tp.stats().total().payload_bytes_sent);
    if (rank == 0) emit_outputs(config, result, summary);
    return summary;
}

}  // namespace

std::uint16_t port_base_from_env() {
    if (const char* env = std::getenv("GFLOW_PORT_BASE")) {
        const int p = std::atoi(env);
        if (p > 0 && p < 65000) return static_cast<std::uint16_t>(p);
    }
    return 28500;
}

void validate(const RunConfig& config) {
    if (config.ranks < 1) throw ConfigError("ranks must be >= 1");
    if (config.transport != "inproc" && config.transport != "tcp") {
        throw ConfigError("transport must be inproc or tcp");
    }
    const auto& t = config.train;
    if (t.model_dims.size() < 2) throw ConfigError("model needs >= 2 dims");
    if (t.batch < 1) throw ConfigError("batch must be >= 1");
    if (t.group_size < 1 || config.ranks % t.group_size != 0) {
        throw ConfigError("group size " + std::to_string(t.group_size) +
                          " must divide ranks " + std::to_string(config.ranks));
    }
    if (t.chunk_size == 0) throw ConfigError("chunk-size must be positive");
    if (t.csc && (t.final_sparsity < 0.0 || t.final_sparsity >= 1.0)) {
        throw ConfigError("sparsity must be in [0, 1)");
    }
    if (t.n_examples % static_cast<std::size_t>(config.ranks) != 0) {
        throw ConfigError("n_examples must be divisible by ranks");
    }
}

TrafficPrediction predict_traffic(std::uint64_t pool_elements, std::size_t element_bytes,
                                  int ranks, double sparsity, std::size_t chunk_size,
                                  bool csc) {
    TrafficPrediction p;
    const double n = static_cast<double>(ranks);
    const double factor = ranks > 1 ? 2.0 * (n - 1.0) / n : 0.0;
    const double pool_bytes =
        static_cast<double>(pool_elements) * static_cast<double>(element_bytes);
    if (!csc) {
        p.grad_bytes = factor * pool_bytes;
        return p;
    }
    const std::size_t num_chunks = (pool_elements + chunk_size - 1) / chunk_size;
    const std::size_t k = selection_count(sparsity, num_chunks);
    const double selected_bytes =
        std::min(pool_bytes, static_cast<double>(k) * static_cast<double>(chunk_size) *
                                 static_cast<double>(element_bytes));
    p.grad_bytes = factor * selected_bytes;
    p.norm_bytes = factor * static_cast<double>(num_chunks) * 4.0;
    return p;
}

TrafficPrediction predict_traffic(const RunConfig& config) {
    const auto& t = config.train;
    return predict_traffic(model_parameter_count(t.model_dims),
                           element_size(t.wire_precision), config.ranks,
                           t.csc ? t.final_sparsity : 0.0, t.chunk_size, t.csc);
}

RunSummary run_experiment(const RunConfig& config, std::optional<int> worker_rank) {
    validate(config);

    if (worker_rank) {
        if (config.transport != "tcp") {
            throw ConfigError("--worker-rank only applies to the tcp transport");
        }
        return run_tcp_worker(config, *worker_rank);
    }

    if (config.transport == "inproc") {
        auto world = make_inproc_world(config.ranks);
        std::vector<TrainResult> results(static_cast<std::size_t>(config.ranks));
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(config.ranks));
        std::vector<std::thread> workers;
        for (int r = 0; r < config.ranks; ++r) {
            workers.emplace_back([&, r] {
                try {
                    results[static_cast<std::size_t>(r)] =
                        train_worker(config.train, *world[static_cast<std::size_t>(r)]);
                } catch (...) {
                    errors[static_cast<std::size_t>(r)] = std::current_exception();
                }
            });
        }
        for (auto& w : workers) w.join();
        for (int r = 0; r < config.ranks; ++r) {
            if (errors[static_cast<std::size_t>(r)]) {
                std::rethrow_exception(errors[static_cast<std::size_t>(r)]);
            }
        }
        RunSummary summary = summarize(config, results[0],
                                       world[0]->stats().total().payload_bytes_sent);
        emit_outputs(config, results[0], summary);
        return summary;
    }

    // TCP: one process per rank, forked before any worker threads exist.
    std::vector<pid_t> children;
    for (int r = 0; r < config.ranks; ++r) {
        const pid_t pid = ::fork();
        if (pid < 0) throw TransportError("fork failed");
        if (pid == 0) {
            int code = 0;
            try {
                run_tcp_worker(config, r);
            } catch (const std::exception& e) {
                std::fprintf(stderr, "rank %d failed: %s\n", r, e.what());
                code = 1;
            }
            std::_Exit(code);
        }
        children.push_back(pid);
    }
    bool failed = false;
    for (std::size_t r = 0; r < children.size(); ++r) {
        int status = 0;
        ::waitpid(children[r], &status, 0);
        if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
            std::fprintf(stderr, "rank %zu exited abnormally\n", r);
            failed = true;
        }
    }
    if (failed) throw TrainingError("one or more ranks failed");

    // Rank 0 wrote the outputs; read the summary back if it exists.
    RunSummary summary;
    if (!config.out_path.empty()) {
        std::ifstream is(config.out_path + ".summary.json");
        if (is) {
            json j = json::parse(is);
            summary.final_loss = j.value("final_loss", 0.0);
            summary.total_payload_bytes = j.value("total_payload_bytes", std::uint64_t{0});
            summary.grad_bytes_per_iteration = j.value("grad_bytes_per_iteration", 0.0);
            summary.predicted_bytes_per_iteration =
                j.value("predicted_bytes_per_iteration", 0.0);
            summary.predicted_vs_measured_delta =
                j.value("predicted_vs_measured_delta", 0.0);
            summary.iterations = j.value("iterations", std::uint64_t{0});
        }
    }
    return summary;
}

BenchResult bench_allreduce(int ranks, std::uint64_t bytes, Algo algo, int group_size,
                            const std::string& transport, ElementType precision) {
    if (ranks < 1) throw ConfigError("ranks must be >= 1");
    const std::size_t esz = element_size(precision);
    const std::size_t elements = static_cast<std::size_t>(bytes) / esz;
    if (elements == 0) throw ConfigError("buffer too small for element type");

    std::vector<std::unique_ptr<Transport>> transports;
    if (transport == "inproc") {
        for (auto& t : make_inproc_world(ranks)) transports.push_back(std::move(t));
    } else if (transport == "tcp") {
        const auto peers = TcpTransport::loopback_addresses(ranks, port_base_from_env());
        transports.resize(static_cast<std::size_t>(ranks));
        std::vector<std::thread> connectors;
        for (int r = 0; r < ranks; ++r) {
            connectors.emplace_back([&, r] {
                transports[static_cast<std::size_t>(r)] =
                    std::make_unique<TcpTransport>(r, ranks, peers);
            });
        }
        for (auto& c : connectors) c.join();
    } else {
        throw ConfigError("transport must be inproc or tcp");
    }

    BenchResult result;
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(ranks));
    std::vector<std::vector<float>> outputs(static_cast<std::size_t>(ranks));
    std::vector<std::vector<float>> oracle_out(static_cast<std::size_t>(ranks));
    for (int r = 0; r < ranks; ++r) {
        workers.emplace_back([&, r] {
            try {
                Transport& tp = *transports[static_cast<std::size_t>(r)];
                Communicator comm(tp, group_size);
                std::mt19937_64 rng(1234 + static_cast<std::uint64_t>(r));
                std::uniform_real_distribution<float> uni(-1.0f, 1.0f);
                std::vector<float> values(elements);
                for (auto& v : values) v = uni(rng);
                auto buf = OwnedBuffer::from_floats(precision, values);
                auto oracle_buf = OwnedBuffer::from_floats(precision, values);

                switch (algo) {
                    case Algo::kRing: ring_allreduce(comm, buf.view()); break;
                    case Algo::kHierarchical: hierarchical_allreduce(comm, buf.view()); break;
                    case Algo::kOracle: oracle_allreduce(comm, buf.view()); break;
                }
                oracle_allreduce(comm, oracle_buf.view());
                outputs[static_cast<std::size_t>(r)] = buf.to_floats();
                oracle_out[static_cast<std::size_t>(r)] = oracle_buf.to_floats();
                if (r == 0) {
                    const auto snap = tp.stats().snapshot();
                    std::uint64_t sent = 0;
                    for (const auto& [label, c] : snap) {
                        if (label != "oracle") sent += c.payload_bytes_sent;
                    }
                    result.per_rank_payload_sent = sent;
                    const auto segs = comm.phase2_segment_bytes();
                    result.phase2_segment_bytes = segs.empty() ? 0 : segs.front();
                }
            } catch (...) {
                errors[static_cast<std::size_t>(r)] = std::current_exception();
            }
        });
    }
    for (auto& w : workers) w.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    // Analytic ring prediction: rank 0's send segments summed over both passes.
    if (algo == Algo::kRing && ranks > 1) {
        std::uint64_t predicted = 0;
        for (int s = 0; s < ranks - 1; ++s) {
            const auto rs = detail::segment_of(elements, ranks, (0 - s + ranks) % ranks);
            const auto ag = detail::segment_of(elements, ranks, (0 + 1 - s + ranks) % ranks);
            predicted += (rs.length + ag.length) * esz;
        }
        result.predicted_payload = predicted;
    }

    double max_rel = 0.0;
    for (int r = 0; r < ranks; ++r) {
        const auto& got = outputs[static_cast<std::size_t>(r)];
        const auto& want = oracle_out[static_cast<std::size_t>(r)];
        for (std::size_t i = 0; i < got.size(); ++i) {
            // Scale floor of 1: pure relative error is meaningless where the
            // reduced sums cancel to near zero under a different association.
            const double denom = std::max(1.0, std::fabs(static_cast<double>(want[i])));
            max_rel = std::max(max_rel, std::fabs(got[i] - want[i]) / denom);
        }
    }
    result.matches_oracle = max_rel <= (precision == ElementType::kF32 ? 1e-6 : 1e-2);
    return result;
}

}  // namespace gflow
