#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ptqlab/matrix.hpp"

// Fake quantization (quantize, then dequantize) for uniform integer grids and
// MXFP4. Everything here works on matrix rows: activations are tokens x
// channels, weights are passed transposed so each output channel is one row.
namespace ptqlab::quant {

enum class Format { uniform_int, mxfp4, none };
enum class Rounding { half_away_from_zero, half_to_even };
// balanced: Q_max = 2^(N-1) - 1.  full: Q_max = 2^N - 1 (the min-max formula
// taken literally for signed data).
enum class SignedRange { balanced, full };

struct Granularity {
    enum class Kind { per_tensor, per_row, per_group };
    Kind kind = Kind::per_row;
    std::size_t group_size = 0;  // per_group only

    static Granularity per_tensor() { return {Kind::per_tensor, 0}; }
    static Granularity per_row() { return {Kind::per_row, 0}; }
    static Granularity per_group(std::size_t g) { return {Kind::per_group, g}; }
    friend bool operator==(const Granularity&, const Granularity&) = default;
};

// Default search grid: 0.50, 0.51, ..., 1.00.
std::vector<double> default_clip_grid();

struct ClipPolicy {
    enum class Kind { fixed, search };
    Kind kind = Kind::fixed;
    double ratio = 1.0;          // fixed only
    std::vector<double> grid;    // search only

    static ClipPolicy fixed(double r) { return {Kind::fixed, r, {}}; }
    static ClipPolicy search(std::vector<double> g = default_clip_grid()) { return {Kind::search, 1.0, std::move(g)}; }
    friend bool operator==(const ClipPolicy&, const ClipPolicy&) = default;
};

struct QuantSpec {
    Format format = Format::uniform_int;
    int bits = 4;
    bool symmetric = true;
    Granularity granularity = Granularity::per_row();
    ClipPolicy clip = ClipPolicy::fixed(1.0);
    Rounding rounding = Rounding::half_away_from_zero;
    SignedRange signed_range = SignedRange::balanced;

    static QuantSpec int_spec(int bits, bool symmetric, Granularity g, ClipPolicy clip = ClipPolicy::fixed(1.0));
    // MXFP4 fixes bits=4, symmetric, group 32.
    static QuantSpec mxfp4(ClipPolicy clip);
    static QuantSpec disabled();

    // Throws ValidationError on inconsistent fields.
    void validate() const;
    std::string describe() const;
    friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

/// How a rows x cols matrix is partitioned into quantization groups. Groups
/// run along rows; a trailing partial group keeps its own parameters.
struct GroupLayout {
    std::size_t rows = 0;
    std::size_t cols = 0;
    bool whole_tensor = false;
    std::size_t width = 0;  // columns per group

    static GroupLayout make(std::size_t rows, std::size_t cols, const QuantSpec& spec);
    std::size_t groups_per_row() const noexcept { return whole_tensor ? 1 : (cols + width - 1) / width; }
    std::size_t group_count() const noexcept { return whole_tensor ? 1 : rows * groups_per_row(); }
    std::size_t group_of(std::size_t r, std::size_t c) const noexcept {
        return whole_tensor ? 0 : r * groups_per_row() + c / width;
    }
    friend bool operator==(const GroupLayout&, const GroupLayout&) = default;
};

struct QuantParams {
    GroupLayout layout;
    std::vector<double> scales;     // Δ per group; powers of two for MXFP4
    std::vector<int> zero_points;   // empty when symmetric
};

struct QuantizedTensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<int> codes;  // integer codes, or 4-bit E2M1 patterns for MXFP4
    QuantParams params;
    QuantSpec spec;
};

// Inclusive integer code range of a uniform-int spec.
struct CodeRange {
    int lo;
    int hi;
};
CodeRange code_range(const QuantSpec& spec);

double round_value(double v, Rounding mode) noexcept;

/// Per-group scales (and zero points) at the spec's clip. A search policy is
/// resolved with clip_search first.
QuantParams compute_params(const Matrix& x, const QuantSpec& spec);
// Same, with an explicit clip ratio overriding the spec's policy.
QuantParams compute_params_at(const Matrix& x, const QuantSpec& spec, double clip_ratio);

QuantizedTensor quantize(const Matrix& x, const QuantSpec& spec, const QuantParams& params);
Matrix dequantize(const QuantizedTensor& q);
Matrix quantize_dequantize(const Matrix& x, const QuantSpec& spec, const QuantParams& params);

// compute_params + quantize_dequantize; identity for Format::none.
Matrix fake_quantize(const Matrix& x, const QuantSpec& spec);
// Weight orientation (C_in x C_out): each output column is quantized as one row.
Matrix fake_quantize_weight(const Matrix& w, const QuantSpec& spec);

/// Grid ratio minimizing the squared round-trip error; ties go to the larger ratio.
double clip_search(const Matrix& x, const QuantSpec& spec, const std::vector<double>& grid);

// ---- MXFP4 ----------------------------------------------------------------

inline constexpr std::size_t mxfp4_group_size = 32;
inline constexpr int e8m0_min_exponent = -127;
inline constexpr int e8m0_max_exponent = 127;

/// Decodes a 4-bit E2M1 pattern (sign, two exponent bits, one mantissa bit,
/// exponent bias 1; E = 0 is the subnormal branch).
double e2m1_decode(std::uint8_t pattern) noexcept;
/// Nearest E2M1 pattern to v (saturating at ±6); ties go to the even mantissa.
std::uint8_t e2m1_encode(double v) noexcept;
// The 15 distinct E2M1 values in increasing order.
std::array<double, 15> e2m1_values() noexcept;

/// Shared exponent e = ceil(log2(clip * group_max / 6)), 0 for an all-zero group.
int mxfp4_group_exponent(double group_max_abs, double clip) noexcept;

QuantizedTensor mxfp4_quantize(const Matrix& x, double clip);
Matrix mxfp4_dequantize(const QuantizedTensor& q);
// Exponent of each group's power-of-two scale.
std::vector<int> mxfp4_exponents(const QuantizedTensor& q);

// ---- scalar access (used by Hessian-aware rounding) ------------------------

/// Quantizer for a single group with fixed parameters.
class ScalarQuantizer {
public:
    ScalarQuantizer(const QuantSpec& spec, double scale, int zero_point);

    int encode(double v) const noexcept;
    double decode(int code) const noexcept;
    double round_trip(double v) const noexcept { return decode(encode(v)); }
    // The grid points immediately below and above v (clamped to the code range).
    std::array<int, 2> neighbors(double v) const noexcept;

private:
    Format format_;
    Rounding rounding_;
    double scale_;
    int zero_;
    CodeRange range_;
};

ScalarQuantizer scalar_quantizer(const QuantSpec& spec, const QuantParams& params, std::size_t group);

// ---- storage overhead --------------------------------------------------------

/// Extra bits per weight spent on per-group parameters: scale_bits / g, plus
/// bits / g for asymmetric zero points. Requires per-group granularity.
double extra_bits_overhead(const QuantSpec& spec, int scale_storage_bits);

/// Overhead for a weight whose rows have `row_length` entries, any granularity.
/// FP16 scales for integer formats, E8M0 for MXFP4; per-tensor counts as zero.
double parameter_bits_per_weight(const QuantSpec& spec, std::size_t row_length);

}  // namespace ptqlab::quant
