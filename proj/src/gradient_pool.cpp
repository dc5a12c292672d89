// SPDX-License-Identifier: Apache-2.0

#include "gflow/gradient_pool.hpp"

#include <cmath>
#include <cstring>
#include <string>

namespace gflow {

GradientPool::GradientPool(const std::vector<std::size_t>& layer_tensor_sizes,
                           std::size_t chunk_size, ElementType element_type)
    : chunk_size_(chunk_size), element_type_(element_type) {
    if (layer_tensor_sizes.empty()) {
        throw ConfigError("gradient pool needs at least one tensor");
    }
    if (chunk_size == 0) throw ConfigError("chunk_size must be positive");
    const int m = static_cast<int>(layer_tensor_sizes.size());
    total_elements_ = 0;
    for (std::size_t s : layer_tensor_sizes) {
        if (s == 0) throw ConfigError("tensor sizes must be positive");
        total_elements_ += s;
    }
    // pool_offset(tensor j) = sum of sizes of tensors j+1..m.
    descs_.resize(static_cast<std::size_t>(m));
    std::size_t offset = 0;
    for (int id = m; id >= 1; --id) {
        const std::size_t size = layer_tensor_sizes[static_cast<std::size_t>(id - 1)];
        descs_[static_cast<std::size_t>(id - 1)] = {id, size, offset};
        offset += size;
    }
    // Nearest chunk count, not the ceiling: the pool is partitioned into
    // chunks of ~chunk_size elements and the last chunk absorbs the
    // remainder, so 60.9e6/32000 gives 1903 and 25.5e6/32000 gives 797.
    const double ratio =
        static_cast<double>(total_elements_) / static_cast<double>(chunk_size_);
    num_chunks_ = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(ratio)));
    storage_ = OwnedBuffer(element_type_, total_elements_);
    next_expected_id_ = m;
}

const TensorDesc& GradientPool::desc(int tensor_id) const {
    if (tensor_id < 1 || tensor_id > num_tensors()) {
        throw ConfigError("tensor id " + std::to_string(tensor_id) + " out of range");
    }
    return descs_[static_cast<std::size_t>(tensor_id - 1)];
}

ScalarBuffer GradientPool::tensor_view(int tensor_id) {
    const TensorDesc& d = desc(tensor_id);
    return view().subspan(d.pool_offset, d.element_count);
}

std::size_t GradientPool::chunk_begin(std::size_t chunk_index) const {
    if (chunk_index >= num_chunks_) {
        throw ConfigError("chunk index " + std::to_string(chunk_index) + " out of range");
    }
    return chunk_index * chunk_size_;
}

std::size_t GradientPool::chunk_length(std::size_t chunk_index) const {
    const std::size_t begin = chunk_begin(chunk_index);
    if (chunk_index + 1 == num_chunks_) return total_elements_ - begin;
    return chunk_size_;
}

ScalarBuffer GradientPool::chunk_view(std::size_t chunk_index) {
    return view().subspan(chunk_begin(chunk_index), chunk_length(chunk_index));
}

void GradientPool::begin_iteration() {
    watermark_ = 0;
    chunks_reported_ = 0;
    next_expected_id_ = num_tensors();
}

std::vector<std::size_t> GradientPool::write_tensor(int tensor_id,
                                                    std::span<const float> values) {
    const TensorDesc& d = desc(tensor_id);
    if (tensor_id > next_expected_id_) {
        throw ConfigError("tensor " + std::to_string(tensor_id) +
                          " written twice in one iteration");
    }
    if (tensor_id < next_expected_id_) {
        throw ConfigError("out-of-order tensor write: got " + std::to_string(tensor_id) +
                          ", expected " + std::to_string(next_expected_id_));
    }
    if (values.size() != d.element_count) {
        throw ConfigError("tensor " + std::to_string(tensor_id) + " length mismatch: " +
                          std::to_string(values.size()) + " vs " +
                          std::to_string(d.element_count));
    }
    ScalarBuffer dst = view().subspan(d.pool_offset, d.element_count);
    for (std::size_t i = 0; i < values.size(); ++i) dst.set(i, values[i]);
    next_expected_id_ = tensor_id - 1;
    watermark_ = d.pool_offset + d.element_count;

    std::vector<std::size_t> completed;
    while (chunks_reported_ < num_chunks_ &&
           chunk_begin(chunks_reported_) + chunk_length(chunks_reported_) <= watermark_) {
        completed.push_back(chunks_reported_++);
    }
    return completed;
}

float GradientPool::chunk_l1(std::size_t chunk_index) {
    ScalarBuffer c = chunk_view(chunk_index);
    // Wide accumulator: sequential fp32 summation drifts past the 1e-6
    // relative bound at chunk_size 32000.
    double sum = 0.0;
    for (std::size_t i = 0; i < c.length; ++i) {
        sum += std::fabs(static_cast<double>(c.get(i)));
    }
    return static_cast<float>(sum);
}

void GradientPool::dump_snapshot(std::ostream& os) {
    const std::uint64_t total = total_elements_;
    const std::uint64_t chunk = chunk_size_;
    const std::uint8_t type = static_cast<std::uint8_t>(element_type_);
    os.write(reinterpret_cast<const char*>(&total), 8);
    os.write(reinterpret_cast<const char*>(&chunk), 8);
    os.write(reinterpret_cast<const char*>(&type), 1);
    ScalarBuffer v = view();
    os.write(reinterpret_cast<const char*>(v.data),
             static_cast<std::streamsize>(v.byte_length()));
}

GradientPool build_pool(const std::vector<std::size_t>& layer_tensor_sizes,
                        std::size_t chunk_size, ElementType element_type) {
    return GradientPool(layer_tensor_sizes, chunk_size, element_type);
}

}  // namespace gflow
