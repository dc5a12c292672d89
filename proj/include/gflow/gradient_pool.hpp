// SPDX-License-Identifier: Apache-2.0
//
// Contiguous generation-ordered storage for all gradient tensors of a
// model. Tensor m (the last layer's) sits at offset 0 and tensor 1 at the
// end, matching the order the backward pass produces them, so the written
// region always grows as a contiguous prefix. The pool is partitioned into
// fixed-size chunks, the unit of sparse selection.

#pragma once

#include <cstddef>
#include <ostream>
#include <vector>

#include "gflow/buffer.hpp"
#include "gflow/errors.hpp"

namespace gflow {

inline constexpr std::size_t kDefaultChunkSize = 32000;

struct TensorDesc {
    int tensor_id;              // in [1, m], ascending layer order
    std::size_t element_count;
    std::size_t pool_offset;    // element index; sum of sizes of tensors with higher id
};

class GradientPool {
public:
    GradientPool(const std::vector<std::size_t>& layer_tensor_sizes,
                 std::size_t chunk_size, ElementType element_type);

    std::size_t total_elements() const { return total_elements_; }
    std::size_t chunk_size() const { return chunk_size_; }
    std::size_t num_chunks() const { return num_chunks_; }
    ElementType element_type() const { return element_type_; }
    int num_tensors() const { return static_cast<int>(descs_.size()); }

    const TensorDesc& desc(int tensor_id) const;
    const std::vector<TensorDesc>& descriptors() const { return descs_; }

    ScalarBuffer view() { return storage_.view(); }
    ScalarBuffer tensor_view(int tensor_id);
    ScalarBuffer chunk_view(std::size_t chunk_index);

    std::size_t chunk_begin(std::size_t chunk_index) const;
    std::size_t chunk_length(std::size_t chunk_index) const;

    // Resets per-iteration write tracking; must precede the first
    // write_tensor of each iteration.
    void begin_iteration();

    // Writes one tensor's gradients. Tensors must arrive in descending-ID
    // order, once each per iteration. Returns the chunk indices that this
    // write completed.
    std::vector<std::size_t> write_tensor(int tensor_id, std::span<const float> values);

    std::size_t written_elements() const { return watermark_; }
    bool iteration_complete() const { return watermark_ == total_elements_; }

    float get(std::size_t i) { return view().get(i); }
    void set(std::size_t i, float v) { view().set(i, v); }

    // Sum of |x| over the chunk, accumulated in fp32.
    float chunk_l1(std::size_t chunk_index);

    // Debug snapshot: header (total_elements, chunk_size, element_type) plus
    // raw little-endian scalars.
    void dump_snapshot(std::ostream& os);

private:
    std::vector<TensorDesc> descs_;
    std::size_t total_elements_;
    std::size_t chunk_size_;
    std::size_t num_chunks_;
    ElementType element_type_;
    OwnedBuffer storage_;

    std::size_t watermark_ = 0;        // end of contiguously written prefix
    std::size_t chunks_reported_ = 0;  // chunks already returned as complete
    int next_expected_id_;
};

GradientPool build_pool(const std::vector<std::size_t>& layer_tensor_sizes,
                        std::size_t chunk_size = kDefaultChunkSize,
                        ElementType element_type = ElementType::kF32);

}  // namespace gflow
