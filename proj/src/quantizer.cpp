#include "ptqlab/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ptqlab/error.hpp"

namespace ptqlab::quant {

namespace {

constexpr std::array<double, 8> e2m1_magnitudes = {0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0};
constexpr double e2m1_max = 6.0;

void require_nonempty(const Matrix& x, const char* op) {
    if (x.empty()) throw ValidationError(std::string(op) + ": empty input");
}

double group_scale_power(int exponent) { return std::ldexp(1.0, exponent); }

}  // namespace

std::vector<double> default_clip_grid() {
    std::vector<double> grid;
    for (int k = 50; k <= 100; ++k) grid.push_back(k / 100.0);
    return grid;
}

QuantSpec QuantSpec::int_spec(int bits, bool symmetric, Granularity g, ClipPolicy clip) {
    QuantSpec s;
    s.format = Format::uniform_int;
    s.bits = bits;
    s.symmetric = symmetric;
    s.granularity = g;
    s.clip = std::move(clip);
    return s;
}

QuantSpec QuantSpec::mxfp4(ClipPolicy clip) {
    QuantSpec s;
    s.format = Format::mxfp4;
    s.bits = 4;
    s.symmetric = true;
    s.granularity = Granularity::per_group(mxfp4_group_size);
    s.clip = std::move(clip);
    s.rounding = Rounding::half_to_even;
    return s;
}

QuantSpec QuantSpec::disabled() {
    QuantSpec s;
    s.format = Format::none;
    return s;
}

void QuantSpec::validate() const {
    if (granularity.kind == Granularity::Kind::per_group && granularity.group_size == 0)
        throw ValidationError("quant spec: group size must be positive");
    if (clip.kind == ClipPolicy::Kind::fixed) {
        if (!(clip.ratio > 0.0 && clip.ratio <= 1.0))
            throw ValidationError("quant spec: clip ratio must lie in (0, 1]");
    } else {
        if (clip.grid.empty()) throw ValidationError("quant spec: clip search grid is empty");
        for (double r : clip.grid)
            if (!(r > 0.0 && r <= 1.0)) throw ValidationError("quant spec: clip grid ratios must lie in (0, 1]");
    }
    switch (format) {
    case Format::uniform_int:
        if (bits < 2 || bits > 16) throw ValidationError("quant spec: integer bit-width must be in [2, 16]");
        break;
    case Format::mxfp4:
        if (bits != 4 || !symmetric || granularity != Granularity::per_group(mxfp4_group_size))
            throw ValidationError("quant spec: mxfp4 requires bits=4, symmetric, per-group(32)");
        break;
    case Format::none:
        break;
    }
}

std::string QuantSpec::describe() const {
    std::ostringstream os;
    switch (format) {
    case Format::none: return "fp";
    case Format::mxfp4: os << "mxfp4"; break;
    case Format::uniform_int: os << "int" << bits << (symmetric ? "-sym" : "-asym"); break;
    }
    switch (granularity.kind) {
    case Granularity::Kind::per_tensor: os << "/tensor"; break;
    case Granularity::Kind::per_row: os << "/row"; break;
    case Granularity::Kind::per_group: os << "/g" << granularity.group_size; break;
    }
    if (clip.kind == ClipPolicy::Kind::search) os << "/clip-search";
    else if (clip.ratio != 1.0) os << "/clip" << clip.ratio;
    return os.str();
}

GroupLayout GroupLayout::make(std::size_t rows, std::size_t cols, const QuantSpec& spec) {
    GroupLayout l{rows, cols, false, cols};
    if (spec.format == Format::mxfp4) {
        l.width = mxfp4_group_size;
        return l;
    }
    switch (spec.granularity.kind) {
    case Granularity::Kind::per_tensor: l.whole_tensor = true; break;
    case Granularity::Kind::per_row: break;
    case Granularity::Kind::per_group: l.width = spec.granularity.group_size; break;
    }
    if (l.width == 0) l.width = 1;
    return l;
}

CodeRange code_range(const QuantSpec& spec) {
    if (spec.format == Format::mxfp4) return {0, 15};
    const int levels = (1 << spec.bits) - 1;
    if (!spec.symmetric) return {0, levels};
    const int qmax = spec.signed_range == SignedRange::full ? levels : (1 << (spec.bits - 1)) - 1;
    return {-qmax, qmax};
}

double round_value(double v, Rounding mode) noexcept {
    return mode == Rounding::half_to_even ? std::nearbyint(v) : std::round(v);
}

// ---- MXFP4 ------------------------------------------------------------------

double e2m1_decode(std::uint8_t pattern) noexcept {
    const int sign = (pattern >> 3) & 1;
    const int exponent = (pattern >> 1) & 3;
    const int mantissa = pattern & 1;
    constexpr int bias = 1;
    constexpr int mantissa_bits = 1;
    const double frac = std::ldexp(static_cast<double>(mantissa), -mantissa_bits);
    const double magnitude = exponent == 0 ? std::ldexp(frac, 1 - bias) : std::ldexp(1.0 + frac, exponent - bias);
    return sign ? -magnitude : magnitude;
}

std::uint8_t e2m1_encode(double v) noexcept {
    const double a = std::abs(v);
    std::size_t best = e2m1_magnitudes.size() - 1;
    if (a < e2m1_max) {
        // First magnitude >= a; compare with its lower neighbour.
        const auto it = std::lower_bound(e2m1_magnitudes.begin(), e2m1_magnitudes.end(), a);
        const auto hi = static_cast<std::size_t>(it - e2m1_magnitudes.begin());
        if (hi == 0) {
            best = 0;
        } else {
            const std::size_t lo = hi - 1;
            const double dlo = a - e2m1_magnitudes[lo];
            const double dhi = e2m1_magnitudes[hi] - a;
            if (dlo < dhi) best = lo;
            else if (dhi < dlo) best = hi;
            else best = (lo % 2 == 0) ? lo : hi;  // even mantissa bit wins ties
        }
    }
    auto pattern = static_cast<std::uint8_t>(best);
    if (v < 0.0 && best != 0) pattern |= 0x8;
    return pattern;
}

std::array<double, 15> e2m1_values() noexcept {
    std::array<double, 15> out{};
    std::size_t i = 0;
    for (std::size_t k = e2m1_magnitudes.size() - 1; k > 0; --k) out[i++] = -e2m1_magnitudes[k];
    for (double m : e2m1_magnitudes) out[i++] = m;
    return out;
}

int mxfp4_group_exponent(double group_max_abs, double clip) noexcept {
    const double target = clip * group_max_abs / e2m1_max;
    if (!(target > 0.0)) return 0;
    int p = 0;
    const double frac = std::frexp(target, &p);  // target = frac * 2^p, frac in [0.5, 1)
    const int e = frac == 0.5 ? p - 1 : p;
    return std::clamp(e, e8m0_min_exponent, e8m0_max_exponent);
}

namespace {

QuantParams mxfp4_params(const Matrix& x, double clip) {
    QuantParams p;
    p.layout = GroupLayout::make(x.rows(), x.cols(), QuantSpec::mxfp4(ClipPolicy::fixed(clip)));
    std::vector<double> group_max(p.layout.group_count(), 0.0);
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) {
            double& m = group_max[p.layout.group_of(r, c)];
            m = std::max(m, std::abs(x(r, c)));
        }
    p.scales.reserve(group_max.size());
    for (double m : group_max) p.scales.push_back(group_scale_power(mxfp4_group_exponent(m, clip)));
    return p;
}

QuantParams int_params(const Matrix& x, const QuantSpec& spec, double clip) {
    QuantParams p;
    p.layout = GroupLayout::make(x.rows(), x.cols(), spec);
    const std::size_t groups = p.layout.group_count();
    std::vector<double> lo(groups, 0.0);
    std::vector<double> hi(groups, 0.0);
    std::vector<double> amax(groups, 0.0);
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) {
            const std::size_t g = p.layout.group_of(r, c);
            const double v = x(r, c);
            lo[g] = std::min(lo[g], v);
            hi[g] = std::max(hi[g], v);
            amax[g] = std::max(amax[g], std::abs(v));
        }
    const CodeRange range = code_range(spec);
    p.scales.resize(groups);
    if (spec.symmetric) {
        const double qmax = range.hi;
        for (std::size_t g = 0; g < groups; ++g) {
            const double delta = clip * amax[g] / qmax;
            p.scales[g] = delta > 0.0 ? delta : 1.0;
        }
        return p;
    }
    // Asymmetric grids always include zero, so the zero point stays in range.
    p.zero_points.resize(groups);
    const double levels = range.hi;
    for (std::size_t g = 0; g < groups; ++g) {
        const double delta = clip * (hi[g] - lo[g]) / levels;
        if (!(delta > 0.0)) {
            p.scales[g] = 1.0;
            p.zero_points[g] = 0;
            continue;
        }
        p.scales[g] = delta;
        const double z = std::round(-clip * lo[g] / delta);
        p.zero_points[g] = static_cast<int>(std::clamp(z, static_cast<double>(range.lo), static_cast<double>(range.hi)));
    }
    return p;
}

void require_compatible(const Matrix& x, const QuantSpec& spec, const QuantParams& params) {
    const GroupLayout expected = GroupLayout::make(x.rows(), x.cols(), spec);
    if (!(params.layout == expected) || params.scales.size() != expected.group_count())
        throw ValidationError("quantize: parameters do not match the tensor shape or granularity");
    const bool want_zero = spec.format == Format::uniform_int && !spec.symmetric;
    if (want_zero != !params.zero_points.empty() ||
        (want_zero && params.zero_points.size() != params.scales.size()))
        throw ValidationError("quantize: zero points inconsistent with symmetry");
}

}  // namespace

QuantizedTensor mxfp4_quantize(const Matrix& x, double clip) {
    if (!(clip > 0.0 && clip <= 1.0)) throw ValidationError("mxfp4_quantize: clip ratio must lie in (0, 1]");
    const QuantSpec spec = QuantSpec::mxfp4(ClipPolicy::fixed(clip));
    return quantize(x, spec, mxfp4_params(x, clip));
}

Matrix mxfp4_dequantize(const QuantizedTensor& q) {
    if (q.spec.format != Format::mxfp4) throw ValidationError("mxfp4_dequantize: tensor is not MXFP4");
    return dequantize(q);
}

std::vector<int> mxfp4_exponents(const QuantizedTensor& q) {
    std::vector<int> out;
    out.reserve(q.params.scales.size());
    for (double s : q.params.scales) out.push_back(std::ilogb(s));
    return out;
}

// ---- uniform entry points ------------------------------------------------------

QuantParams compute_params_at(const Matrix& x, const QuantSpec& spec, double clip_ratio) {
    require_nonempty(x, "compute_params");
    spec.validate();
    if (!(clip_ratio > 0.0 && clip_ratio <= 1.0)) throw ValidationError("compute_params: clip ratio must lie in (0, 1]");
    switch (spec.format) {
    case Format::mxfp4: return mxfp4_params(x, clip_ratio);
    case Format::uniform_int: return int_params(x, spec, clip_ratio);
    case Format::none: break;
    }
    throw ValidationError("compute_params: quantization is disabled for this spec");
}

QuantParams compute_params(const Matrix& x, const QuantSpec& spec) {
    spec.validate();
    const double ratio = spec.clip.kind == ClipPolicy::Kind::search ? clip_search(x, spec, spec.clip.grid) : spec.clip.ratio;
    return compute_params_at(x, spec, ratio);
}

ScalarQuantizer::ScalarQuantizer(const QuantSpec& spec, double scale, int zero_point)
    : format_(spec.format), rounding_(spec.rounding), scale_(scale), zero_(zero_point), range_(code_range(spec)) {}

int ScalarQuantizer::encode(double v) const noexcept {
    if (format_ == Format::mxfp4) return e2m1_encode(v / scale_);
    const double code = round_value(v / scale_, rounding_) + zero_;
    return static_cast<int>(std::clamp(code, static_cast<double>(range_.lo), static_cast<double>(range_.hi)));
}

double ScalarQuantizer::decode(int code) const noexcept {
    if (format_ == Format::mxfp4) return e2m1_decode(static_cast<std::uint8_t>(code)) * scale_;
    return (code - zero_) * scale_;
}

std::array<int, 2> ScalarQuantizer::neighbors(double v) const noexcept {
    if (format_ == Format::mxfp4) {
        const auto values = e2m1_values();
        const double y = v / scale_;
        const auto it = std::lower_bound(values.begin(), values.end(), y);
        const std::size_t hi = std::min<std::size_t>(static_cast<std::size_t>(it - values.begin()), values.size() - 1);
        const std::size_t lo = (values[hi] > y && hi > 0) ? hi - 1 : hi;
        return {e2m1_encode(values[lo]), e2m1_encode(values[hi])};
    }
    const double u = v / scale_ + zero_;
    const auto clamp = [&](double c) {
        return static_cast<int>(std::clamp(c, static_cast<double>(range_.lo), static_cast<double>(range_.hi)));
    };
    return {clamp(std::floor(u)), clamp(std::ceil(u))};
}

ScalarQuantizer scalar_quantizer(const QuantSpec& spec, const QuantParams& params, std::size_t group) {
    const int zero = params.zero_points.empty() ? 0 : params.zero_points[group];
    return ScalarQuantizer(spec, params.scales[group], zero);
}

QuantizedTensor quantize(const Matrix& x, const QuantSpec& spec, const QuantParams& params) {
    spec.validate();
    if (spec.format == Format::none) throw ValidationError("quantize: quantization is disabled for this spec");
    require_compatible(x, spec, params);
    QuantizedTensor q{x.rows(), x.cols(), std::vector<int>(x.size()), params, spec};
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) {
            const ScalarQuantizer sq = scalar_quantizer(spec, params, params.layout.group_of(r, c));
            q.codes[r * x.cols() + c] = sq.encode(x(r, c));
        }
    }
    return q;
}

Matrix dequantize(const QuantizedTensor& q) {
    Matrix out(q.rows, q.cols);
    for (std::size_t r = 0; r < q.rows; ++r) {
        for (std::size_t c = 0; c < q.cols; ++c) {
            const ScalarQuantizer sq = scalar_quantizer(q.spec, q.params, q.params.layout.group_of(r, c));
            out(r, c) = sq.decode(q.codes[r * q.cols + c]);
        }
    }
    return out;
}

Matrix quantize_dequantize(const Matrix& x, const QuantSpec& spec, const QuantParams& params) {
    return dequantize(quantize(x, spec, params));
}

Matrix fake_quantize(const Matrix& x, const QuantSpec& spec) {
    spec.validate();
    if (spec.format == Format::none) return x;
    return quantize_dequantize(x, spec, compute_params(x, spec));
}

Matrix fake_quantize_weight(const Matrix& w, const QuantSpec& spec) {
    if (spec.format == Format::none) return w;
    return fake_quantize(w.transposed(), spec).transposed();
}

double clip_search(const Matrix& x, const QuantSpec& spec, const std::vector<double>& grid) {
    require_nonempty(x, "clip_search");
    if (grid.empty()) throw ValidationError("clip_search: empty grid");
    double best_ratio = 0.0;
    double best_err = 0.0;
    bool have = false;
    for (double r : grid) {
        const Matrix y = quantize_dequantize(x, spec, compute_params_at(x, spec, r));
        double err = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            const double d = y.data()[i] - x.data()[i];
            err += d * d;
        }
        if (!have || err < best_err || (err == best_err && r > best_ratio)) {
            best_ratio = r;
            best_err = err;
            have = true;
        }
    }
    return best_ratio;
}

double extra_bits_overhead(const QuantSpec& spec, int scale_storage_bits) {
    if (spec.granularity.kind != Granularity::Kind::per_group || spec.granularity.group_size == 0)
        throw ValidationError("extra_bits_overhead: per-group granularity required");
    if (scale_storage_bits <= 0) throw ValidationError("extra_bits_overhead: scale storage bits must be positive");
    const double g = static_cast<double>(spec.granularity.group_size);
    double bits = scale_storage_bits / g;
    if (spec.format == Format::uniform_int && !spec.symmetric) bits += spec.bits / g;
    return bits;
}

double parameter_bits_per_weight(const QuantSpec& spec, std::size_t row_length) {
    switch (spec.format) {
    case Format::none: return 0.0;
    case Format::mxfp4: return extra_bits_overhead(spec, 8);
    case Format::uniform_int: break;
    }
    switch (spec.granularity.kind) {
    case Granularity::Kind::per_tensor: return 0.0;
    case Granularity::Kind::per_group: return extra_bits_overhead(spec, 16);
    case Granularity::Kind::per_row: break;
    }
    if (row_length == 0) return 0.0;
    const double n = static_cast<double>(row_length);
    return (16.0 + (spec.symmetric ? 0.0 : spec.bits)) / n;
}

}  // namespace ptqlab::quant
