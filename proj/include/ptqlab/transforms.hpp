#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "ptqlab/layer.hpp"
#include "ptqlab/matrix.hpp"
#include "ptqlab/quantizer.hpp"

// Output-preserving reparameterizations of (X, W, B) applied before
// quantization: per-channel shift, per-channel scale, and orthogonal rotation.
namespace ptqlab::transforms {

struct ShiftVector {
    std::vector<double> t;  // one offset per input channel
};

struct ScaleVector {
    std::vector<double> s;  // one strictly positive factor per input channel
};

/// Orthogonal C_in x C_in matrix. Construction checks ‖OᵀO − I‖_F against
/// the given tolerance.
class RotationMatrix {
public:
    explicit RotationMatrix(Matrix o, double tolerance = 1e-6);
    const Matrix& matrix() const noexcept { return o_; }
    std::size_t dim() const noexcept { return o_.rows(); }

private:
    Matrix o_;
};

// t_j = (min X_j + max X_j) / 2
ShiftVector calibrate_shift(const Matrix& x);
// X̂ = X − t, B̂ = t·W + B. W is unchanged.
LayerBundle apply_shift(const LayerBundle& layer, const ShiftVector& t);

/// s_j = max|X_j|^α / max|W_j|^(1−α), where W_j is row j of W (input channel j).
///
/// Channels whose activation or weight maximum is zero get s_j = 1; their
/// indices are appended to `warnings` as messages when it is non-null.
ScaleVector calibrate_scale(const Matrix& x, const Matrix& w, double alpha, std::vector<std::string>* warnings = nullptr);
// X̂ = X·diag(s)⁻¹, Ŵ = diag(s)·W.
LayerBundle apply_scale(const LayerBundle& layer, const ScaleVector& s);

// X̂ = X·O, Ŵ = Oᵀ·W.
LayerBundle apply_rotation(const LayerBundle& layer, const RotationMatrix& o);

using AppliedTransform = std::variant<ShiftVector, ScaleVector, RotationMatrix>;

LayerBundle apply(const LayerBundle& layer, const AppliedTransform& t);
// Undoes `applied` (in reverse order). Shift inversion assumes the bias it created.
LayerBundle invert(const LayerBundle& layer, std::span<const AppliedTransform> applied);

// ---- learned transforms ------------------------------------------------------

struct OptimizerOptions {
    std::size_t steps = 100;
    double lr = 0.05;
};

/// Quantization noise frozen at one parameter point: q(X̂) − X̂ and q(Ŵ) − Ŵ.
///
/// Treating it as a constant is the straight-through relaxation: rounding acts
/// as the identity for gradients, so the relaxed loss is smooth and its
/// gradient at the freezing point equals the straight-through gradient.
struct QuantNoise {
    Matrix x_noise;
    Matrix w_noise;
};

struct Evaluation {
    double loss = 0.0;
    std::vector<double> gradient;
};

/// Normalized output error ‖q(X̂)·q(Ŵ) − X·W‖² / ‖X·W‖² for a parameterized
/// transform. Bias is excluded; neither rotation nor scaling touches it.
class TransformObjective {
public:
    TransformObjective(Matrix x, Matrix w, quant::QuantSpec w_spec, quant::QuantSpec a_spec);
    virtual ~TransformObjective() = default;

    virtual std::size_t parameter_count() const = 0;

    QuantNoise freeze(std::span<const double> params) const;
    // Loss and gradient with the given noise held constant.
    virtual Evaluation evaluate_relaxed(std::span<const double> params, const QuantNoise& noise) const = 0;
    // True quantized loss with the straight-through gradient.
    Evaluation evaluate(std::span<const double> params) const { return evaluate_relaxed(params, freeze(params)); }

protected:
    struct Transformed {
        Matrix x;  // X̂
        Matrix w;  // Ŵ
    };
    virtual Transformed transform(std::span<const double> params) const = 0;

    // Loss plus dL/dX̂ and dL/dŴ at the transformed point.
    struct OutputGradients {
        double loss;
        Matrix dx;
        Matrix dw;
    };
    OutputGradients output_gradients(const Transformed& t, const QuantNoise& noise) const;

    Matrix x_;
    Matrix w_;
    quant::QuantSpec w_spec_;
    quant::QuantSpec a_spec_;
    Matrix target_;
    double target_power_;
};

/// O = base·cayley(A), A skew-symmetric with its strict upper triangle as the
/// parameter vector (row-major order).
class RotationObjective : public TransformObjective {
public:
    RotationObjective(Matrix x, Matrix w, Matrix base, quant::QuantSpec w_spec, quant::QuantSpec a_spec);

    std::size_t parameter_count() const override;
    Evaluation evaluate_relaxed(std::span<const double> params, const QuantNoise& noise) const override;
    Matrix rotation(std::span<const double> params) const;

private:
    Transformed transform(std::span<const double> params) const override;
    Matrix skew(std::span<const double> params) const;

    Matrix base_;
};

/// s = exp(u) per input channel; X̂ = X·diag(s)⁻¹, Ŵ = diag(s)·W.
class ScaleObjective : public TransformObjective {
public:
    using TransformObjective::TransformObjective;

    std::size_t parameter_count() const override { return x_.cols(); }
    Evaluation evaluate_relaxed(std::span<const double> params, const QuantNoise& noise) const override;

private:
    Transformed transform(std::span<const double> params) const override;
};

/// Gradient descent on Cayley skew parameters starting from `init`.
///
/// Returns the best rotation seen (steps = 0 returns `init`), so the final
/// quantized loss never exceeds the initial one.
RotationMatrix optimize_rotation(const LayerBundle& layer, const quant::QuantSpec& w_spec, const quant::QuantSpec& a_spec,
                                 const OptimizerOptions& options, const RotationMatrix& init);

/// Gradient descent on log-scales initialized from calibrate_scale(α = 0.5).
/// Returns the best iterate.
ScaleVector optimize_scale(const LayerBundle& layer, const quant::QuantSpec& w_spec, const quant::QuantSpec& a_spec,
                           const OptimizerOptions& options);

}  // namespace ptqlab::transforms
