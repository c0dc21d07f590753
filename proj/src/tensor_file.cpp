#include "ptqlab/tensor_file.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>

#include "ptqlab/error.hpp"

namespace ptqlab::io {

namespace {

constexpr char magic[4] = {'Q', 'T', 'N', 'S'};
constexpr std::size_t fixed_header = 8;

template <typename T>
T load_le(const std::uint8_t* p) {
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

template <typename T>
void store_le(T v, std::uint8_t* p) {
    std::memcpy(p, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(p, p + sizeof(T));
}

bool valid_dtype(std::uint8_t d) { return d <= static_cast<std::uint8_t>(DType::i8); }

std::size_t checked_count(const std::vector<std::uint64_t>& dims) {
    std::size_t n = 1;
    for (std::uint64_t d : dims) {
        if (d != 0 && n > std::numeric_limits<std::size_t>::max() / d)
            throw ValidationError("tensor: element count overflows");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

}  // namespace

std::size_t dtype_size(DType d) noexcept {
    switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8:
    case DType::i8: return 1;
    }
    return 0;
}

const char* dtype_name(DType d) noexcept {
    switch (d) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::u8: return "u8";
    case DType::i8: return "i8";
    }
    return "?";
}

std::size_t Tensor::element_count() const { return checked_count(dims); }

std::vector<double> Tensor::values() const {
    const std::size_t n = element_count();
    if (payload.size() != n * dtype_size(dtype)) throw ValidationError("tensor: payload size does not match dims");
    std::vector<double> out(n);
    const std::uint8_t* p = payload.data();
    for (std::size_t i = 0; i < n; ++i) {
        switch (dtype) {
        case DType::f32: out[i] = load_le<float>(p + 4 * i); break;
        case DType::f64: out[i] = load_le<double>(p + 8 * i); break;
        case DType::u8: out[i] = p[i]; break;
        case DType::i8: out[i] = static_cast<std::int8_t>(p[i]); break;
        }
    }
    return out;
}

Tensor Tensor::from_values(DType dtype, std::vector<std::uint64_t> dims, const std::vector<double>& values) {
    if (dims.size() > max_tensor_ndim) throw ValidationError("tensor: at most 4 dimensions are supported");
    Tensor t;
    t.dtype = dtype;
    t.dims = std::move(dims);
    const std::size_t n = t.element_count();
    if (values.size() != n) throw ValidationError("tensor: value count does not match dims");
    t.payload.resize(n * dtype_size(dtype));
    std::uint8_t* p = t.payload.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double v = values[i];
        switch (dtype) {
        case DType::f32: store_le(static_cast<float>(v), p + 4 * i); break;
        case DType::f64: store_le(v, p + 8 * i); break;
        case DType::u8:
            if (!(v >= 0 && v <= 255 && v == std::floor(v))) throw ValidationError("tensor: value not representable as u8");
            p[i] = static_cast<std::uint8_t>(v);
            break;
        case DType::i8:
            if (!(v >= -128 && v <= 127 && v == std::floor(v))) throw ValidationError("tensor: value not representable as i8");
            p[i] = static_cast<std::uint8_t>(static_cast<std::int8_t>(v));
            break;
        }
    }
    return t;
}

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
    if (t.dims.size() > max_tensor_ndim) throw ValidationError("tensor: at most 4 dimensions are supported");
    if (t.payload.size() != t.element_count() * dtype_size(t.dtype))
        throw ValidationError("tensor: payload size does not match dims");
    std::vector<std::uint8_t> out(fixed_header + 8 * t.dims.size());
    std::memcpy(out.data(), magic, 4);
    out[4] = tensor_file_version;
    out[5] = static_cast<std::uint8_t>(t.dtype);
    out[6] = static_cast<std::uint8_t>(t.dims.size());
    out[7] = 0;
    for (std::size_t i = 0; i < t.dims.size(); ++i) store_le<std::uint64_t>(t.dims[i], out.data() + fixed_header + 8 * i);
    out.insert(out.end(), t.payload.begin(), t.payload.end());
    return out;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < fixed_header) throw ValidationError("tensor file: truncated header");
    if (std::memcmp(bytes.data(), magic, 4) != 0) throw ValidationError("tensor file: bad magic (expected QTNS)");
    if (bytes[4] != tensor_file_version)
        throw ValidationError("tensor file: unsupported version " + std::to_string(bytes[4]));
    if (!valid_dtype(bytes[5])) throw ValidationError("tensor file: unknown dtype " + std::to_string(bytes[5]));
    const std::size_t ndim = bytes[6];
    if (ndim > max_tensor_ndim) throw ValidationError("tensor file: ndim " + std::to_string(ndim) + " exceeds 4");
    if (bytes[7] != 0) throw ValidationError("tensor file: reserved byte must be 0");
    const std::size_t header = fixed_header + 8 * ndim;
    if (bytes.size() < header) throw ValidationError("tensor file: truncated dims");
    Tensor t;
    t.dtype = static_cast<DType>(bytes[5]);
    for (std::size_t i = 0; i < ndim; ++i) t.dims.push_back(load_le<std::uint64_t>(bytes.data() + fixed_header + 8 * i));
    const std::size_t expected = t.element_count() * dtype_size(t.dtype);
    if (bytes.size() - header != expected) {
        throw ValidationError("tensor file: payload has " + std::to_string(bytes.size() - header) + " bytes, expected " +
                              std::to_string(expected));
    }
    t.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
    return t;
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
    const std::vector<std::uint8_t> bytes = encode_tensor(t);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Tensor read_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("failed reading '" + path.string() + "'");
    try {
        return decode_tensor(bytes);
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

Matrix tensor_to_matrix(const Tensor& t) {
    if (t.dims.empty()) throw ValidationError("tensor: a scalar cannot be read as a matrix");
    std::size_t cols = static_cast<std::size_t>(t.dims.back());
    std::size_t rows = 1;
    for (std::size_t i = 0; i + 1 < t.dims.size(); ++i) rows *= static_cast<std::size_t>(t.dims[i]);
    std::vector<double> v = t.values();
    for (double x : v)
        if (!std::isfinite(x)) throw ValidationError("tensor: contains NaN or Inf");
    return Matrix(rows, cols, std::move(v));
}

Tensor matrix_to_tensor(const Matrix& m, DType dtype) {
    const auto d = m.data();
    return Tensor::from_values(dtype, {m.rows(), m.cols()}, std::vector<double>(d.begin(), d.end()));
}

Tensor vector_to_tensor(const std::vector<double>& v, DType dtype) { return Tensor::from_values(dtype, {v.size()}, v); }

}  // namespace ptqlab::io
