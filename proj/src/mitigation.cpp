#include "ptqlab/mitigation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

#include "ptqlab/error.hpp"
#include "ptqlab/linalg.hpp"

namespace ptqlab::mitigation {

namespace {

void require_weight_hessian(const Matrix& w, const Hessian& h, const char* op) {
    if (w.empty()) throw ValidationError(std::string(op) + ": empty weight");
    if (!h.h.is_square() || h.h.rows() != w.rows()) {
        throw ValidationError(std::string(op) + ": Hessian is " + std::to_string(h.h.rows()) + "x" +
                              std::to_string(h.h.cols()) + " but weight has " + std::to_string(w.rows()) +
                              " input channels");
    }
}

double quadratic_form(std::span<const double> d, const Matrix& h) {
    double acc = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (d[i] == 0.0) continue;
        double row = 0.0;
        auto hr = h.row(i);
        for (std::size_t j = 0; j < d.size(); ++j) row += hr[j] * d[j];
        acc += d[i] * row;
    }
    return acc;
}

MitigationResult finish(const Matrix& w, const Hessian& h, quant::QuantizedTensor q) {
    MitigationResult r;
    r.w_dequant = quant::dequantize(q).transposed();
    r.w_q = std::move(q);
    r.row_losses = proxy_row_losses(w, r.w_dequant, h);
    for (double l : r.row_losses) r.proxy_loss += l;
    return r;
}

quant::QuantizedTensor empty_codes(const Matrix& wt, const quant::QuantSpec& spec, quant::QuantParams params) {
    return quant::QuantizedTensor{wt.rows(), wt.cols(), std::vector<int>(wt.size(), 0), std::move(params), spec};
}

void require_quantizing(const quant::QuantSpec& spec, const char* op) {
    spec.validate();
    if (spec.format == quant::Format::none) throw ValidationError(std::string(op) + ": quantization is disabled");
}

}  // namespace

Hessian build_hessian(const Matrix& x, double damping) {
    if (x.empty()) throw ValidationError("build_hessian: need at least one token");
    if (!(damping >= 0.0)) throw ValidationError("build_hessian: damping must be non-negative");
    Matrix h = linalg::matmul_tn(x, x);
    h *= 2.0;
    double mean_diag = 0.0;
    for (std::size_t i = 0; i < h.rows(); ++i) mean_diag += h(i, i);
    mean_diag /= static_cast<double>(h.rows());
    for (std::size_t i = 0; i < h.rows(); ++i) h(i, i) += damping * mean_diag;
    return {std::move(h), damping};
}

Matrix LowRankBranch::product() const { return linalg::matmul(a, b); }

std::vector<double> proxy_row_losses(const Matrix& w, const Matrix& w_hat, const Hessian& h) {
    require_weight_hessian(w, h, "proxy_loss");
    const Matrix delta = (w_hat - w).transposed();
    std::vector<double> out(delta.rows());
    for (std::size_t r = 0; r < delta.rows(); ++r) out[r] = quadratic_form(delta.row(r), h.h);
    return out;
}

quant::QuantParams weight_params(const Matrix& w, const quant::QuantSpec& spec) {
    return quant::compute_params(w.transposed(), spec);
}

MitigationResult rtn_quantize(const Matrix& w, const Hessian& h, const quant::QuantSpec& spec) {
    require_weight_hessian(w, h, "rtn_quantize");
    require_quantizing(spec, "rtn_quantize");
    const Matrix wt = w.transposed();
    return finish(w, h, quant::quantize(wt, spec, quant::compute_params(wt, spec)));
}

MitigationResult gptq_quantize(const Matrix& w, const Hessian& h, const quant::QuantSpec& spec, std::size_t block) {
    require_weight_hessian(w, h, "gptq_quantize");
    require_quantizing(spec, "gptq_quantize");
    if (block == 0) throw ValidationError("gptq_quantize: block size must be positive");
    const std::size_t n = w.rows();
    block = std::min(block, n);

    Matrix wt = w.transposed();
    quant::QuantizedTensor q = empty_codes(wt, spec, quant::compute_params(wt, spec));

    // Upper Cholesky factor of H⁻¹: H⁻¹ = UᵀU.
    const Matrix u = linalg::cholesky(linalg::spd_inverse(h.h)).transposed();

    const std::size_t rows = wt.rows();
    for (std::size_t b0 = 0; b0 < n; b0 += block) {
        const std::size_t b1 = std::min(b0 + block, n);
        Matrix err(rows, b1 - b0);
        for (std::size_t i = b0; i < b1; ++i) {
            const double uii = u(i, i);
            for (std::size_t r = 0; r < rows; ++r) {
                const auto sq = quant::scalar_quantizer(spec, q.params, q.params.layout.group_of(r, i));
                const double v = wt(r, i);
                const int code = sq.encode(v);
                q.codes[r * n + i] = code;
                const double e = (v - sq.decode(code)) / uii;
                for (std::size_t j = i + 1; j < b1; ++j) wt(r, j) -= e * u(i, j);
                err(r, i - b0) = e;
            }
        }
        // Lazy batch update of everything right of the block.
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = b0; i < b1; ++i) {
                const double e = err(r, i - b0);
                if (e == 0.0) continue;
                auto urow = u.row(i);
                auto wrow = wt.row(r);
                for (std::size_t j = b1; j < n; ++j) wrow[j] -= e * urow[j];
            }
        }
    }
    return finish(w, h, std::move(q));
}

MitigationResult ldlq_quantize(const Matrix& w, const Hessian& h, const quant::QuantSpec& spec) {
    require_weight_hessian(w, h, "ldlq_quantize");
    require_quantizing(spec, "ldlq_quantize");
    const std::size_t n = w.rows();

    // LDL of the index-reversed Hessian gives H = (U + I)·D·(U + I)ᵀ with U
    // strictly upper triangular in the original order.
    Matrix reversed(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) reversed(i, j) = h.h(n - 1 - i, n - 1 - j);
    const linalg::LdlFactors f = linalg::ldl_decompose(reversed);
    Matrix feedback(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) feedback(i, j) = f.unit_lower(n - 1 - i, n - 1 - j);

    const Matrix wt = w.transposed();
    quant::QuantizedTensor q = empty_codes(wt, spec, quant::compute_params(wt, spec));
    std::vector<double> residual(n);  // w − ŵ for coordinates already quantized
    for (std::size_t r = 0; r < wt.rows(); ++r) {
        for (std::size_t k = 0; k < n; ++k) {
            double target = wt(r, k);
            for (std::size_t j = 0; j < k; ++j) target += residual[j] * feedback(j, k);
            const auto sq = quant::scalar_quantizer(spec, q.params, q.params.layout.group_of(r, k));
            const int code = sq.encode(target);
            q.codes[r * n + k] = code;
            residual[k] = wt(r, k) - sq.decode(code);
        }
    }
    return finish(w, h, std::move(q));
}

MitigationResult brute_force_round(const Matrix& w, const Hessian& h, const quant::QuantSpec& spec) {
    require_weight_hessian(w, h, "brute_force_round");
    require_quantizing(spec, "brute_force_round");
    const std::size_t n = w.rows();
    if (n > brute_force_max_dim) {
        throw ValidationError("brute_force_round: " + std::to_string(n) + " input channels exceed the enumeration limit of " +
                              std::to_string(brute_force_max_dim));
    }
    const Matrix wt = w.transposed();
    quant::QuantizedTensor q = empty_codes(wt, spec, quant::compute_params(wt, spec));

    std::vector<std::array<int, 2>> options(n);
    std::vector<std::array<double, 2>> deltas(n);
    std::vector<double> delta(n);
    for (std::size_t r = 0; r < wt.rows(); ++r) {
        for (std::size_t k = 0; k < n; ++k) {
            const auto sq = quant::scalar_quantizer(spec, q.params, q.params.layout.group_of(r, k));
            options[k] = sq.neighbors(wt(r, k));
            deltas[k] = {sq.decode(options[k][0]) - wt(r, k), sq.decode(options[k][1]) - wt(r, k)};
        }
        double best = std::numeric_limits<double>::infinity();
        std::uint32_t best_mask = 0;
        for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
            for (std::size_t k = 0; k < n; ++k) delta[k] = deltas[k][(mask >> k) & 1u];
            const double loss = quadratic_form(delta, h.h);
            if (loss < best) {
                best = loss;
                best_mask = mask;
            }
        }
        for (std::size_t k = 0; k < n; ++k) q.codes[r * n + k] = options[k][(best_mask >> k) & 1u];
    }
    return finish(w, h, std::move(q));
}

LowRankBranch lowrank_compensate(const Matrix& w, const Matrix& w_q_dequant, std::size_t k) {
    if (w.rows() != w_q_dequant.rows() || w.cols() != w_q_dequant.cols())
        throw ValidationError("lowrank_compensate: weight and quantized weight shapes differ");
    const linalg::TruncatedSvd svd = linalg::svd_topk(w - w_q_dequant, k);
    LowRankBranch out{svd.u, Matrix(k, w.cols())};
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t c = 0; c < w.cols(); ++c) out.b(i, c) = svd.singular[i] * svd.v(c, i);
    return out;
}

LowRankBranch scaled_lowrank_compensate(const Matrix& w, const Matrix& w_q_dequant, std::size_t k,
                                        const transforms::ScaleVector& s) {
    if (s.s.size() != w.rows()) throw ValidationError("scaled_lowrank_compensate: scale length mismatch");
    for (double v : s.s)
        if (!(v > 0.0) || !std::isfinite(v)) throw ValidationError("scaled_lowrank_compensate: scales must be positive");
    // Scaling W and W_q row-wise scales ΔW identically.
    Matrix ws = w;
    Matrix wqs = w_q_dequant;
    if (ws.rows() != wqs.rows() || ws.cols() != wqs.cols())
        throw ValidationError("scaled_lowrank_compensate: weight and quantized weight shapes differ");
    for (std::size_t j = 0; j < ws.rows(); ++j) {
        for (double& v : ws.row(j)) v *= s.s[j];
        for (double& v : wqs.row(j)) v *= s.s[j];
    }
    LowRankBranch out = lowrank_compensate(ws, wqs, k);
    for (std::size_t j = 0; j < out.a.rows(); ++j)
        for (double& v : out.a.row(j)) v /= s.s[j];
    return out;
}

transforms::ScaleVector activation_saliency(const Matrix& x) {
    if (x.empty()) throw ValidationError("activation_saliency: empty activations");
    transforms::ScaleVector out{std::vector<double>(x.cols(), 0.0)};
    for (std::size_t t = 0; t < x.rows(); ++t)
        for (std::size_t j = 0; j < x.cols(); ++j) out.s[j] = std::max(out.s[j], std::abs(x(t, j)));
    double log_mean = 0.0;
    for (double& v : out.s) {
        if (v == 0.0) v = 1.0;
        log_mean += std::log(v);
    }
    log_mean /= static_cast<double>(out.s.size());
    const double norm = std::exp(log_mean);
    for (double& v : out.s) v /= norm;
    return out;
}

Matrix layer_output(const Matrix& x, const Matrix& w_q_dequant, const std::optional<LowRankBranch>& branch,
                    const std::optional<std::vector<double>>& bias) {
    Matrix y = linear_output(x, w_q_dequant, bias);
    if (branch) y += linalg::matmul(linalg::matmul(x, branch->a), branch->b);
    return y;
}

}  // namespace ptqlab::mitigation
