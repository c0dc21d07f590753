#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "ptqlab/matrix.hpp"

// Binary tensor container: "QTNS", version 1, dtype, ndim, reserved byte,
// ndim little-endian u64 dims, then the row-major little-endian payload.
namespace ptqlab::io {

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2, i8 = 3 };

inline constexpr std::uint8_t tensor_file_version = 1;
inline constexpr std::size_t max_tensor_ndim = 4;

std::size_t dtype_size(DType d) noexcept;
const char* dtype_name(DType d) noexcept;

/// A tensor held as its raw little-endian payload, so a read/write cycle
/// reproduces the file byte for byte.
struct Tensor {
    DType dtype = DType::f64;
    std::vector<std::uint64_t> dims;
    std::vector<std::uint8_t> payload;

    std::size_t element_count() const;
    // Every element widened to double.
    std::vector<double> values() const;
    // Encodes values into dtype; integer dtypes require in-range integers.
    static Tensor from_values(DType dtype, std::vector<std::uint64_t> dims, const std::vector<double>& values);
    friend bool operator==(const Tensor&, const Tensor&) = default;
};

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
// Throws ValidationError on a malformed header or payload size.
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes);

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

// 1-D tensors become a single row; 2-D map directly; higher ranks fold the
// leading dimensions into rows.
Matrix tensor_to_matrix(const Tensor& t);
Tensor matrix_to_tensor(const Matrix& m, DType dtype);
Tensor vector_to_tensor(const std::vector<double>& v, DType dtype);

}  // namespace ptqlab::io
