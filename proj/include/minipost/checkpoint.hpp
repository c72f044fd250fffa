#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "minipost/autodiff.hpp"

namespace minipost {

// Flat binary tensor container.
//
// Layout (all integers little-endian):
//   magic     8 bytes  "MPOSTCKP"
//   version   u32      currently 1
//   meta_len  u64      followed by meta_len bytes of UTF-8 metadata (JSON)
//   count     u64      number of tensors
//   per tensor:
//     name_len u32, name bytes
//     dtype    u8      0 = f32, 1 = f64
//     rank     u8
//     dims     u64 x rank
//     payload  row-major scalar data
//
// Round-trips are bit-exact: payloads are raw IEEE-754 bytes.

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

struct TensorBlob {
    std::string name;
    DType dtype = DType::kF64;
    std::vector<std::uint64_t> dims;
    std::vector<std::uint8_t> payload;

    std::uint64_t element_count() const {
        std::uint64_t n = 1;
        for (auto d : dims) n *= d;
        return dims.empty() ? 0 : n;
    }
};

struct Checkpoint {
    std::uint32_t version = 1;
    std::string metadata;  // JSON blob, model config lives here
    std::vector<TensorBlob> tensors;

    const TensorBlob* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename Scalar>
constexpr DType dtype_of() {
    if constexpr (sizeof(Scalar) == 4) {
        return DType::kF32;
    } else {
        return DType::kF64;
    }
}

// Matrix -> blob, row-major payload.
template <typename Scalar>
TensorBlob to_blob(const std::string& name, const MatX<Scalar>& m) {
    TensorBlob b;
    b.name = name;
    b.dtype = dtype_of<Scalar>();
    b.dims = {static_cast<std::uint64_t>(m.rows()),
              static_cast<std::uint64_t>(m.cols())};
    b.payload.resize(static_cast<std::size_t>(m.size()) * sizeof(Scalar));
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
    std::memcpy(b.payload.data(), rm.data(), b.payload.size());
    return b;
}

template <typename Scalar>
MatX<Scalar> from_blob(const TensorBlob& b) {
    if (b.dtype != dtype_of<Scalar>()) {
        throw std::runtime_error("checkpoint tensor '" + b.name +
                                 "' has mismatched dtype");
    }
    if (b.dims.size() != 2) {
        throw std::runtime_error("checkpoint tensor '" + b.name +
                                 "' has rank " + std::to_string(b.dims.size()) +
                                 ", want 2");
    }
    const auto rows = static_cast<Eigen::Index>(b.dims[0]);
    const auto cols = static_cast<Eigen::Index>(b.dims[1]);
    if (b.payload.size() !=
        static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) * sizeof(Scalar)) {
        throw std::runtime_error("checkpoint tensor '" + b.name +
                                 "' payload size mismatch");
    }
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
    std::memcpy(rm.data(), b.payload.data(), b.payload.size());
    return rm;
}

}  // namespace minipost
