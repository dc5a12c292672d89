// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <vector>

#include "gflow/half.hpp"

namespace gflow {

enum class ElementType : std::uint8_t { kF32 = 0, kF16 = 1 };

inline std::size_t element_size(ElementType t) {
    return t == ElementType::kF32 ? 4 : 2;
}

inline const char* element_type_name(ElementType t) {
    return t == ElementType::kF32 ? "fp32" : "fp16";
}

// Non-owning view of contiguous scalars, the unit collectives operate on.
struct ScalarBuffer {
    ElementType type = ElementType::kF32;
    std::byte* data = nullptr;
    std::size_t length = 0;  // element count

    std::size_t byte_length() const { return length * element_size(type); }

    ScalarBuffer subspan(std::size_t offset, std::size_t count) const {
        return {type, data + offset * element_size(type), count};
    }

    float get(std::size_t i) const {
        if (type == ElementType::kF32) {
            float v;
            std::memcpy(&v, data + 4 * i, 4);
            return v;
        }
        std::uint16_t h;
        std::memcpy(&h, data + 2 * i, 2);
        return half_bits_to_float(h);
    }

    void set(std::size_t i, float v) {
        if (type == ElementType::kF32) {
            std::memcpy(data + 4 * i, &v, 4);
        } else {
            const std::uint16_t h = float_to_half_bits(v);
            std::memcpy(data + 2 * i, &h, 2);
        }
    }
};

// Elementwise dst += src, widening fp16 operands to fp32 for the addition
// and rounding back per element.
inline void accumulate(ScalarBuffer dst, std::span<const std::byte> src_bytes) {
    if (dst.type == ElementType::kF32) {
        const std::size_t n = src_bytes.size() / 4;
        for (std::size_t i = 0; i < n; ++i) {
            float a, b;
            std::memcpy(&a, dst.data + 4 * i, 4);
            std::memcpy(&b, src_bytes.data() + 4 * i, 4);
            a += b;
            std::memcpy(dst.data + 4 * i, &a, 4);
        }
    } else {
        const std::size_t n = src_bytes.size() / 2;
        for (std::size_t i = 0; i < n; ++i) {
            std::uint16_t ha, hb;
            std::memcpy(&ha, dst.data + 2 * i, 2);
            std::memcpy(&hb, src_bytes.data() + 2 * i, 2);
            const std::uint16_t h =
                float_to_half_bits(half_bits_to_float(ha) + half_bits_to_float(hb));
            std::memcpy(dst.data + 2 * i, &h, 2);
        }
    }
}

inline std::vector<std::byte> to_bytes(ScalarBuffer buf) {
    std::vector<std::byte> out(buf.byte_length());
    std::memcpy(out.data(), buf.data, out.size());
    return out;
}

inline void from_bytes(ScalarBuffer buf, std::span<const std::byte> bytes) {
    std::memcpy(buf.data, bytes.data(), bytes.size());
}

// Owning fp32/fp16 storage with a ScalarBuffer view.
class OwnedBuffer {
public:
    OwnedBuffer() = default;
    OwnedBuffer(ElementType type, std::size_t length)
        : type_(type), bytes_(length * element_size(type)), length_(length) {}

    static OwnedBuffer from_floats(ElementType type, std::span<const float> values) {
        OwnedBuffer b(type, values.size());
        ScalarBuffer v = b.view();
        for (std::size_t i = 0; i < values.size(); ++i) v.set(i, values[i]);
        return b;
    }

    ScalarBuffer view() { return {type_, bytes_.data(), length_}; }
    std::size_t length() const { return length_; }
    ElementType type() const { return type_; }

    std::vector<float> to_floats() {
        ScalarBuffer v = view();
        std::vector<float> out(length_);
        for (std::size_t i = 0; i < length_; ++i) out[i] = v.get(i);
        return out;
    }

private:
    ElementType type_ = ElementType::kF32;
    std::vector<std::byte> bytes_;
    std::size_t length_ = 0;
};

}  // namespace gflow
