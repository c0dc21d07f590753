#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "oracles.hpp"
#include "ptqlab/error.hpp"
#include "ptqlab/quantizer.hpp"

using namespace ptqlab;
using namespace ptqlab::quant;

namespace {

QuantSpec int4(bool symmetric, Granularity g = Granularity::per_row(), ClipPolicy clip = ClipPolicy::fixed(1.0)) {
    return QuantSpec::int_spec(4, symmetric, g, clip);
}

double sq_error(const Matrix& a, const Matrix& b) { return squared_frobenius(a - b); }

}  // namespace

TEST_SUITE("compute_params") {
    TEST_CASE("symmetric balanced scale") {
        const QuantParams p = compute_params(Matrix{{-1, 0.5, 1}}, int4(true));
        CHECK(p.scales[0] == doctest::Approx(1.0 / 7.0).epsilon(1e-15));
        CHECK(p.zero_points.empty());
    }

    TEST_CASE("symmetric full range uses 2^N - 1") {
        QuantSpec s = int4(true);
        s.signed_range = SignedRange::full;
        CHECK(compute_params(Matrix{{-1, 0.5, 1}}, s).scales[0] == doctest::Approx(1.0 / 15.0));
        CHECK(code_range(s).lo == -15);
        CHECK(code_range(s).hi == 15);
    }

    TEST_CASE("all-zero group") {
        for (bool sym : {true, false}) {
            const QuantParams p = compute_params(Matrix{{0, 0, 0}}, int4(sym));
            CHECK(p.scales[0] == 1.0);
            if (!sym) CHECK(p.zero_points[0] == 0);
        }
    }

    TEST_CASE("asymmetric [0, 3]") {
        const QuantParams p = compute_params(Matrix{{0, 3}}, int4(false));
        CHECK(p.scales[0] == doctest::Approx(0.2).epsilon(1e-15));
        CHECK(p.zero_points[0] == 0);
    }

    TEST_CASE("asymmetric zero point follows the minimum") {
        const QuantParams p = compute_params(Matrix{{-1, 2}}, int4(false));
        CHECK(p.scales[0] == doctest::Approx(0.2));
        CHECK(p.zero_points[0] == 5);
    }

    TEST_CASE("fixed clip multiplies the statistics") {
        QuantSpec s = int4(true, Granularity::per_row(), ClipPolicy::fixed(0.5));
        CHECK(compute_params(Matrix{{-1, 0.5, 1}}, s).scales[0] == doctest::Approx(0.5 / 7.0));
    }

    TEST_CASE("group layout with a trailing partial group") {
        Matrix x(2, 10);
        for (std::size_t c = 0; c < 10; ++c) {
            x(0, c) = static_cast<double>(c + 1);
            x(1, c) = -static_cast<double>(c + 1);
        }
        const QuantParams p = compute_params(x, int4(true, Granularity::per_group(4)));
        REQUIRE(p.scales.size() == 6);
        CHECK(p.scales[0] == doctest::Approx(4.0 / 7.0));
        CHECK(p.scales[1] == doctest::Approx(8.0 / 7.0));
        CHECK(p.scales[2] == doctest::Approx(10.0 / 7.0));
        CHECK(p.scales[5] == doctest::Approx(10.0 / 7.0));
        const QuantParams t = compute_params(x, int4(true, Granularity::per_tensor()));
        CHECK(t.scales.size() == 1);
    }

    TEST_CASE("empty input and invalid specs") {
        CHECK_THROWS_AS(compute_params(Matrix(), int4(true)), ValidationError);
        CHECK_THROWS_AS(compute_params(Matrix{{1}}, int4(true, Granularity::per_group(0))), ValidationError);
        CHECK_THROWS_AS(compute_params(Matrix{{1}}, int4(true, Granularity::per_row(), ClipPolicy::fixed(1.5))),
                        ValidationError);
        CHECK_THROWS_AS(QuantSpec::int_spec(1, true, Granularity::per_row()).validate(), ValidationError);
    }
}

TEST_SUITE("quantize_dequantize") {
    TEST_CASE("grid points round-trip exactly") {
        const double d = 0.125;
        Matrix x(1, 15);
        for (int k = -7; k <= 7; ++k) x(0, static_cast<std::size_t>(k + 7)) = k * d;
        const QuantSpec s = int4(true);
        const QuantParams p = compute_params(x, s);
        CHECK(p.scales[0] == d);
        CHECK(quantize_dequantize(x, s, p) == x);
    }

    TEST_CASE("hand example with half-away-from-zero") {
        const Matrix x{{-1, 0.5, 0.25, 1}};
        const QuantSpec s = int4(true);
        const QuantParams p = compute_params(x, s);
        const QuantizedTensor q = quantize(x, s, p);
        CHECK(q.codes == std::vector<int>{-7, 4, 2, 7});
        const Matrix y = dequantize(q);
        const std::vector<double> expected{-1.0, 4.0 / 7.0, 2.0 / 7.0, 1.0};
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(y(0, i) == doctest::Approx(expected[i]).epsilon(1e-15));
            CHECK(q.codes[i] == oracle::int_code(x(0, i), p.scales[0], 0, -7, 7));
        }
    }

    TEST_CASE("rounding modes differ only at ties") {
        QuantSpec s = int4(true);
        const QuantParams p{GroupLayout::make(1, 2, s), {1.0}, {}};
        CHECK(quantize(Matrix{{2.5, -2.5}}, s, p).codes == std::vector<int>{3, -3});
        s.rounding = Rounding::half_to_even;
        CHECK(quantize(Matrix{{2.5, -2.5}}, s, p).codes == std::vector<int>{2, -2});
    }

    TEST_CASE("values beyond the clip range saturate") {
        const QuantSpec s = int4(true, Granularity::per_row(), ClipPolicy::fixed(0.5));
        const Matrix x{{-4, 1, 4}};
        const QuantParams p = compute_params(x, s);
        const Matrix y = quantize_dequantize(x, s, p);
        CHECK(y(0, 0) == doctest::Approx(-7 * p.scales[0]));
        CHECK(y(0, 2) == doctest::Approx(7 * p.scales[0]));
    }

    TEST_CASE("matches the scalar oracle and the half-step error bound") {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const Matrix x = oracle::gaussian(6, 37, seed);
            for (bool sym : {true, false}) {
                for (Granularity g : {Granularity::per_tensor(), Granularity::per_row(), Granularity::per_group(8)}) {
                    const QuantSpec s = int4(sym, g);
                    const QuantParams p = compute_params(x, s);
                    const QuantizedTensor q = quantize(x, s, p);
                    const Matrix y = dequantize(q);
                    const CodeRange range = code_range(s);
                    for (std::size_t r = 0; r < x.rows(); ++r)
                        for (std::size_t c = 0; c < x.cols(); ++c) {
                            const std::size_t gi = p.layout.group_of(r, c);
                            const int z = sym ? 0 : p.zero_points[gi];
                            const int code = oracle::int_code(x(r, c), p.scales[gi], z, range.lo, range.hi);
                            CHECK(q.codes[r * x.cols() + c] == code);
                            CHECK(std::abs(y(r, c) - x(r, c)) <= p.scales[gi] / 2 + 1e-12);
                        }
                }
            }
        }
    }

    TEST_CASE("finer groups never have a larger scale than the covering tensor scale") {
        const Matrix x = oracle::gaussian(4, 64, 77);
        const double tensor_delta = compute_params(x, int4(true, Granularity::per_tensor())).scales[0];
        for (std::size_t g : {8u, 16u, 32u}) {
            const QuantParams p = compute_params(x, int4(true, Granularity::per_group(g)));
            for (double d : p.scales) CHECK(d <= tensor_delta);
        }
    }

    TEST_CASE("asymmetric beats symmetric on positive data") {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            Matrix x = oracle::gaussian(3, 32, 900 + seed);
            for (double& v : x.data()) v = std::abs(v) + 0.5;
            const QuantSpec sym = int4(true);
            const QuantSpec asym = int4(false);
            CHECK(sq_error(fake_quantize(x, asym), x) <= sq_error(fake_quantize(x, sym), x));
        }
    }

    TEST_CASE("mismatched parameters are rejected") {
        const QuantSpec s = int4(true);
        const QuantParams p = compute_params(Matrix{{1, 2}}, s);
        CHECK_THROWS_AS(quantize(Matrix{{1, 2, 3}}, s, p), ValidationError);
        CHECK_THROWS_AS(quantize(Matrix{{1, 2}}, int4(false), p), ValidationError);
    }

    TEST_CASE("disabled spec is the identity for fake quantization") {
        const Matrix x = oracle::gaussian(3, 5, 1);
        CHECK(fake_quantize(x, QuantSpec::disabled()) == x);
        CHECK(fake_quantize_weight(x, QuantSpec::disabled()) == x);
    }

    TEST_CASE("weight orientation quantizes each output column as a row") {
        const Matrix w = oracle::gaussian(8, 3, 4);
        const QuantSpec s = int4(true);
        CHECK(fake_quantize_weight(w, s) == fake_quantize(w.transposed(), s).transposed());
    }
}

TEST_SUITE("clip_search") {
    TEST_CASE("grid-aligned data keeps ratio 1") {
        Matrix x(1, 15);
        for (int k = -7; k <= 7; ++k) x(0, static_cast<std::size_t>(k + 7)) = k * 0.3;
        CHECK(clip_search(x, int4(true), default_clip_grid()) == 1.0);
    }

    TEST_CASE("search agrees with exhaustive evaluation over the grid") {
        const QuantSpec s = int4(true);
        auto exhaustive = [&](const Matrix& x) {
            double best = INFINITY;
            double best_r = 0.0;
            for (double g : default_clip_grid()) {
                const double e = sq_error(quantize_dequantize(x, s, compute_params_at(x, s, g)), x);
                if (e <= best) {
                    best = e;
                    best_r = g;
                }
            }
            return best_r;
        };
        Matrix spiked = oracle::gaussian(1, 1000, 42);
        spiked(0, 500) = 100.0 * max_abs(spiked);
        CHECK(clip_search(spiked, s, default_clip_grid()) == exhaustive(spiked));

        // A Gaussian bulk gains more resolution from clipping its tail than it loses.
        const Matrix bulk = oracle::gaussian(1, 1000, 43);
        const double r = clip_search(bulk, s, default_clip_grid());
        CHECK(r < 1.0);
        CHECK(r == exhaustive(bulk));
    }

    TEST_CASE("singleton grid") { CHECK(clip_search(oracle::gaussian(2, 9, 1), int4(true), {1.0}) == 1.0); }

    TEST_CASE("search policy resolves inside compute_params") {
        Matrix x = oracle::gaussian(1, 200, 3);
        x(0, 0) = 50.0;
        const QuantSpec s = int4(true, Granularity::per_row(), ClipPolicy::search());
        const double r = clip_search(x, s, default_clip_grid());
        CHECK(compute_params(x, s).scales[0] == compute_params_at(x, s, r).scales[0]);
    }
}

TEST_SUITE("mxfp4") {
    TEST_CASE("all 16 patterns decode to the published value set") {
        std::multiset<double> got;
        for (int p = 0; p < 16; ++p) got.insert(e2m1_decode(static_cast<std::uint8_t>(p)));
        const std::multiset<double> expected{-6, -4, -3, -2, -1.5, -1, -0.5, 0, 0, 0.5, 1, 1.5, 2, 3, 4, 6};
        CHECK(got == expected);
    }

    TEST_CASE("individual fields") {
        CHECK(e2m1_decode(0b0001) == 0.5);  // S=0, E=0, M=1
        CHECK(e2m1_decode(0b1111) == -6.0); // S=1, E=3, M=1
    }

    TEST_CASE("encoding matches the nearest-value oracle") {
        for (int i = -700; i <= 700; ++i) {
            const double v = i / 100.0;
            CHECK(e2m1_decode(e2m1_encode(v)) == oracle::e2m1_nearest(v));
        }
        CHECK(e2m1_decode(e2m1_encode(4.9)) == 4.0);
        CHECK(e2m1_decode(e2m1_encode(5.0)) == 4.0);   // tie -> even mantissa
        CHECK(e2m1_decode(e2m1_encode(2.5)) == 2.0);
        CHECK(e2m1_decode(e2m1_encode(1.25)) == 1.0);
        CHECK(e2m1_decode(e2m1_encode(100.0)) == 6.0);
    }

    TEST_CASE("value list is non-uniform and denser near zero") {
        const auto v = e2m1_values();
        CHECK(v[8] - v[7] == 0.5);
        CHECK(v[14] - v[13] == 2.0);
    }

    TEST_CASE("representable values scaled by powers of two round-trip") {
        const auto values = e2m1_values();
        for (int k = -10; k <= 10; ++k) {
            Matrix x(1, 15);
            for (std::size_t i = 0; i < 15; ++i) x(0, i) = std::ldexp(values[i], k);
            const QuantizedTensor q = mxfp4_quantize(x, 1.0);
            CHECK(mxfp4_exponents(q)[0] == k);
            CHECK(mxfp4_dequantize(q) == x);
        }
    }

    TEST_CASE("zero group") {
        const QuantizedTensor q = mxfp4_quantize(Matrix(1, 40), 1.0);
        for (int c : q.codes) CHECK(c == 0);
        CHECK(mxfp4_exponents(q) == std::vector<int>{0, 0});
    }

    TEST_CASE("exponent uses ceil and never clips the group max at clip 1") {
        CHECK(mxfp4_group_exponent(6.0, 1.0) == 0);
        CHECK(mxfp4_group_exponent(6.1, 1.0) == 1);
        CHECK(mxfp4_group_exponent(3.0, 1.0) == -1);
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const Matrix x = oracle::gaussian(3, 70, seed, 5.0);
            const QuantizedTensor q = mxfp4_quantize(x, 1.0);
            const auto e = mxfp4_exponents(q);
            for (std::size_t r = 0; r < 3; ++r)
                for (std::size_t c = 0; c < 70; ++c) {
                    const std::size_t g = q.params.layout.group_of(r, c);
                    CHECK(std::abs(x(r, c)) <= 6.0 * std::ldexp(1.0, e[g]));
                }
        }
    }

    TEST_CASE("clip 0.75 keeps decoded magnitudes within 6 * 2^e") {
        const Matrix x = oracle::gaussian(4, 96, 8);
        const QuantizedTensor q = mxfp4_quantize(x, 0.75);
        const Matrix y = mxfp4_dequantize(q);
        const auto e = mxfp4_exponents(q);
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t c = 0; c < 96; ++c)
                CHECK(std::abs(y(r, c)) <= 6.0 * std::ldexp(1.0, e[q.params.layout.group_of(r, c)]));
    }

    TEST_CASE("error is bounded by half the local code gap") {
        const Matrix x = oracle::gaussian(2, 64, 9);
        const QuantizedTensor q = mxfp4_quantize(x, 1.0);
        const Matrix y = mxfp4_dequantize(q);
        for (std::size_t r = 0; r < 2; ++r)
            for (std::size_t c = 0; c < 64; ++c) {
                const double scale = q.params.scales[q.params.layout.group_of(r, c)];
                const double a = std::abs(x(r, c)) / scale;
                const double gap = a < 2.0 ? 0.5 : (a < 4.0 ? 1.0 : 2.0);
                CHECK(std::abs(y(r, c) - x(r, c)) <= gap / 2 * scale + 1e-15);
            }
    }

    TEST_CASE("spec form forces the format's fixed fields") {
        QuantSpec s = QuantSpec::mxfp4(ClipPolicy::fixed(1.0));
        s.validate();
        s.bits = 8;
        CHECK_THROWS_AS(s.validate(), ValidationError);
    }
}

TEST_SUITE("bit overhead") {
    TEST_CASE("per-group scale bits") {
        const std::map<std::size_t, double> expected{{32, 0.5}, {64, 0.25}, {128, 0.125}, {256, 0.0625}, {512, 0.03125}};
        for (const auto& [g, bits] : expected) CHECK(extra_bits_overhead(int4(true, Granularity::per_group(g)), 16) == bits);
        CHECK(extra_bits_overhead(int4(true, Granularity::per_group(32)), 8) == 0.25);
        CHECK(extra_bits_overhead(int4(false, Granularity::per_group(32)), 16) == 0.5 + 4.0 / 32);
    }

    TEST_CASE("requires per-group granularity") {
        CHECK_THROWS_AS(extra_bits_overhead(int4(true), 16), ValidationError);
    }

    TEST_CASE("per-weight accounting for other layouts") {
        CHECK(parameter_bits_per_weight(int4(true), 128) == 0.125);
        CHECK(parameter_bits_per_weight(int4(true, Granularity::per_tensor()), 128) == 0.0);
        CHECK(parameter_bits_per_weight(QuantSpec::mxfp4(ClipPolicy::fixed(1.0)), 128) == 0.25);
        CHECK(parameter_bits_per_weight(QuantSpec::disabled(), 128) == 0.0);
    }
}
