#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "ptqlab/matrix.hpp"
#include "ptqlab/quantizer.hpp"
#include "ptqlab/transforms.hpp"

// Quantization-error mitigation for a weight matrix W (C_in x C_out).
//
// Each output channel (column of W) is one quantization row over C_in; groups
// run along C_in. Hessian-aware rounding compensates along the same axis.
namespace ptqlab::mitigation {

struct Hessian {
    Matrix h;              // C_in x C_in, damped
    double damping = 0.0;  // fraction of mean diagonal added
};

/// H = 2XᵀX + λ·mean(diag(2XᵀX))·I
Hessian build_hessian(const Matrix& x, double damping);

struct LowRankBranch {
    Matrix a;  // C_in x r
    Matrix b;  // r x C_out
    std::size_t rank() const noexcept { return a.cols(); }
    Matrix product() const;
};

struct MitigationResult {
    quant::QuantizedTensor w_q;          // C_out x C_in codes (rows are output channels)
    Matrix w_dequant;                    // C_in x C_out
    std::optional<LowRankBranch> branch;
    std::vector<double> row_losses;      // δᵀHδ per output channel
    double proxy_loss = 0.0;             // sum of row_losses
};

// Σ over output channels of δᵀHδ with δ = w_hat − w (both C_in x C_out).
std::vector<double> proxy_row_losses(const Matrix& w, const Matrix& w_hat, const Hessian& h);

/// Parameters for weight quantization, fixed from the original weights
/// (clip search included) and laid out over Wᵀ.
quant::QuantParams weight_params(const Matrix& w, const quant::QuantSpec& spec);

/// Round-to-nearest with the parameters from weight_params.
MitigationResult rtn_quantize(const Matrix& w, const Hessian& h, const quant::QuantSpec& spec);

/// Column-blocked Hessian-compensated rounding.
///
/// Coordinates are visited in natural order; the residual of each quantized
/// coordinate is pushed onto the rest of its block through the upper Cholesky
/// factor of H⁻¹, and each finished block updates the remaining columns in one
/// batch. Quantization parameters are computed once from the uncompensated
/// weights; compensated values outside the grid are clamped.
MitigationResult gptq_quantize(const Matrix& w, const Hessian& h, const quant::QuantSpec& spec, std::size_t block = 128);

/// Rounding with linear feedback from H = (U + I)·D·(U + I)ᵀ, U strictly upper
/// triangular. Equivalent to gptq_quantize for every block size.
MitigationResult ldlq_quantize(const Matrix& w, const Hessian& h, const quant::QuantSpec& spec);

inline constexpr std::size_t brute_force_max_dim = 16;

/// Exhaustive search over {floor, ceil} grid neighbours of every coordinate,
/// minimizing δᵀHδ per row. Requires C_in ≤ 16.
MitigationResult brute_force_round(const Matrix& w, const Hessian& h, const quant::QuantSpec& spec);

/// A = U_k, B = Σ_k·V_kᵀ from the SVD of ΔW = W − W_q.
LowRankBranch lowrank_compensate(const Matrix& w, const Matrix& w_q_dequant, std::size_t k);

/// SVD of diag(s)·ΔW, then A = diag(s)⁻¹·U_k and B = Σ_k·V_kᵀ.
LowRankBranch scaled_lowrank_compensate(const Matrix& w, const Matrix& w_q_dequant, std::size_t k,
                                        const transforms::ScaleVector& s);

/// Channel saliency scales max|X_j| normalized to geometric mean 1 (zero
/// channels get 1 before normalization).
transforms::ScaleVector activation_saliency(const Matrix& x);

/// Y = X·W_q + (X·A)·B + bias
Matrix layer_output(const Matrix& x, const Matrix& w_q_dequant, const std::optional<LowRankBranch>& branch,
                    const std::optional<std::vector<double>>& bias);

}  // namespace ptqlab::mitigation
