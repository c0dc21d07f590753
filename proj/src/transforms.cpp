#include "ptqlab/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ptqlab/error.hpp"
#include "ptqlab/linalg.hpp"

namespace ptqlab::transforms {

namespace {

void require_channels(const LayerBundle& layer, std::size_t n, const char* op) {
    layer.validate();
    if (n != layer.c_in()) {
        throw ValidationError(std::string(op) + ": parameter length " + std::to_string(n) + " does not match " +
                              std::to_string(layer.c_in()) + " input channels");
    }
}

}  // namespace

RotationMatrix::RotationMatrix(Matrix o, double tolerance) : o_(std::move(o)) {
    if (!o_.is_square()) throw ValidationError("rotation: matrix must be square");
    if (linalg::orthogonality_error(o_) > tolerance) throw ValidationError("rotation: matrix is not orthogonal");
}

ShiftVector calibrate_shift(const Matrix& x) {
    if (x.empty()) throw ValidationError("calibrate_shift: empty activations");
    ShiftVector out{std::vector<double>(x.cols())};
    for (std::size_t j = 0; j < x.cols(); ++j) {
        double lo = x(0, j);
        double hi = x(0, j);
        for (std::size_t t = 1; t < x.rows(); ++t) {
            lo = std::min(lo, x(t, j));
            hi = std::max(hi, x(t, j));
        }
        out.t[j] = 0.5 * (lo + hi);
    }
    return out;
}

LayerBundle apply_shift(const LayerBundle& layer, const ShiftVector& t) {
    require_channels(layer, t.t.size(), "apply_shift");
    LayerBundle out = layer;
    for (std::size_t r = 0; r < out.calib.rows(); ++r)
        for (std::size_t j = 0; j < out.calib.cols(); ++j) out.calib(r, j) -= t.t[j];
    const Matrix tw = linalg::matmul(Matrix::row_vector(t.t), layer.w);
    std::vector<double> bias = layer.bias.value_or(std::vector<double>(layer.c_out(), 0.0));
    for (std::size_t c = 0; c < bias.size(); ++c) bias[c] += tw(0, c);
    out.bias = std::move(bias);
    return out;
}

ScaleVector calibrate_scale(const Matrix& x, const Matrix& w, double alpha, std::vector<std::string>* warnings) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("calibrate_scale: alpha must lie in [0, 1]");
    if (x.cols() != w.rows()) throw ValidationError("calibrate_scale: activation/weight channel mismatch");
    if (x.empty()) throw ValidationError("calibrate_scale: empty activations");
    ScaleVector out{std::vector<double>(x.cols(), 1.0)};
    for (std::size_t j = 0; j < x.cols(); ++j) {
        double xmax = 0.0;
        for (std::size_t t = 0; t < x.rows(); ++t) xmax = std::max(xmax, std::abs(x(t, j)));
        double wmax = 0.0;
        for (double v : w.row(j)) wmax = std::max(wmax, std::abs(v));
        if (xmax == 0.0 || wmax == 0.0) {
            if (warnings) warnings->push_back("scale: channel " + std::to_string(j) + " has zero maximum, using s=1");
            continue;
        }
        out.s[j] = std::pow(xmax, alpha) / std::pow(wmax, 1.0 - alpha);
    }
    return out;
}

LayerBundle apply_scale(const LayerBundle& layer, const ScaleVector& s) {
    require_channels(layer, s.s.size(), "apply_scale");
    for (double v : s.s)
        if (!(v > 0.0) || !std::isfinite(v)) throw ValidationError("apply_scale: scale factors must be positive");
    LayerBundle out = layer;
    for (std::size_t r = 0; r < out.calib.rows(); ++r)
        for (std::size_t j = 0; j < out.calib.cols(); ++j) out.calib(r, j) /= s.s[j];
    for (std::size_t j = 0; j < out.w.rows(); ++j)
        for (double& v : out.w.row(j)) v *= s.s[j];
    return out;
}

LayerBundle apply_rotation(const LayerBundle& layer, const RotationMatrix& o) {
    require_channels(layer, o.dim(), "apply_rotation");
    LayerBundle out = layer;
    if (!layer.calib.empty()) out.calib = linalg::matmul(layer.calib, o.matrix());
    out.w = linalg::matmul_tn(o.matrix(), layer.w);
    return out;
}

LayerBundle apply(const LayerBundle& layer, const AppliedTransform& t) {
    return std::visit(
        [&](const auto& v) -> LayerBundle {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, ShiftVector>) return apply_shift(layer, v);
            else if constexpr (std::is_same_v<T, ScaleVector>) return apply_scale(layer, v);
            else return apply_rotation(layer, v);
        },
        t);
}

LayerBundle invert(const LayerBundle& layer, std::span<const AppliedTransform> applied) {
    LayerBundle out = layer;
    for (auto it = applied.rbegin(); it != applied.rend(); ++it) {
        std::visit(
            [&](const auto& v) {
                using T = std::decay_t<decltype(v)>;
                if constexpr (std::is_same_v<T, ShiftVector>) {
                    ShiftVector neg{v.t};
                    for (double& e : neg.t) e = -e;
                    out = apply_shift(out, neg);
                } else if constexpr (std::is_same_v<T, ScaleVector>) {
                    ScaleVector inv{v.s};
                    for (double& e : inv.s) e = 1.0 / e;
                    out = apply_scale(out, inv);
                } else {
                    out = apply_rotation(out, RotationMatrix(v.matrix().transposed()));
                }
            },
            *it);
    }
    return out;
}

// ---- objectives -----------------------------------------------------------------

TransformObjective::TransformObjective(Matrix x, Matrix w, quant::QuantSpec w_spec, quant::QuantSpec a_spec)
    : x_(std::move(x)), w_(std::move(w)), w_spec_(std::move(w_spec)), a_spec_(std::move(a_spec)) {
    if (x_.empty() || x_.cols() != w_.rows()) throw ValidationError("objective: activation/weight shape mismatch");
    target_ = linalg::matmul(x_, w_);
    target_power_ = squared_frobenius(target_);
    if (!(target_power_ > 0.0)) target_power_ = 1.0;
}

QuantNoise TransformObjective::freeze(std::span<const double> params) const {
    Transformed t = transform(params);
    QuantNoise n{quant::fake_quantize(t.x, a_spec_), quant::fake_quantize_weight(t.w, w_spec_)};
    n.x_noise -= t.x;
    n.w_noise -= t.w;
    return n;
}

TransformObjective::OutputGradients TransformObjective::output_gradients(const Transformed& t,
                                                                         const QuantNoise& noise) const {
    const Matrix xq = t.x + noise.x_noise;
    const Matrix wq = t.w + noise.w_noise;
    Matrix residual = linalg::matmul(xq, wq);
    residual -= target_;
    const double loss = squared_frobenius(residual) / target_power_;
    residual *= 2.0 / target_power_;
    return {loss, linalg::matmul_nt(residual, wq), linalg::matmul_tn(xq, residual)};
}

RotationObjective::RotationObjective(Matrix x, Matrix w, Matrix base, quant::QuantSpec w_spec, quant::QuantSpec a_spec)
    : TransformObjective(std::move(x), std::move(w), std::move(w_spec), std::move(a_spec)), base_(std::move(base)) {
    if (base_.rows() != x_.cols() || !base_.is_square()) throw ValidationError("rotation objective: base has wrong shape");
}

std::size_t RotationObjective::parameter_count() const {
    const std::size_t n = base_.rows();
    return n * (n - 1) / 2;
}

Matrix RotationObjective::skew(std::span<const double> params) const {
    if (params.size() != parameter_count()) throw ValidationError("rotation objective: wrong parameter count");
    const std::size_t n = base_.rows();
    Matrix a(n, n);
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            a(i, j) = params[k];
            a(j, i) = -params[k];
            ++k;
        }
    return a;
}

Matrix RotationObjective::rotation(std::span<const double> params) const {
    return linalg::matmul(base_, linalg::cayley(skew(params)));
}

TransformObjective::Transformed RotationObjective::transform(std::span<const double> params) const {
    const Matrix o = rotation(params);
    return {linalg::matmul(x_, o), linalg::matmul_tn(o, w_)};
}

Evaluation RotationObjective::evaluate_relaxed(std::span<const double> params, const QuantNoise& noise) const {
    const std::size_t n = base_.rows();
    const Matrix a = skew(params);
    const Matrix id = Matrix::identity(n);
    const Matrix m = linalg::solve(id - a, id);  // (I - A)⁻¹
    const Matrix q = linalg::matmul(m, id + a);
    const Matrix o = linalg::matmul(base_, q);

    const Transformed t{linalg::matmul(x_, o), linalg::matmul_tn(o, w_)};
    const OutputGradients g = output_gradients(t, noise);

    // X̂ = X·O and Ŵ = Oᵀ·W give dL/dO = Xᵀ·dX̂ + W·dŴᵀ.
    Matrix grad_o = linalg::matmul_tn(x_, g.dx);
    grad_o += linalg::matmul_nt(w_, g.dw);
    const Matrix grad_q = linalg::matmul_tn(base_, grad_o);
    // dQ = M·dA·(Q + I) gives dL/dA = Mᵀ·G_Q·(Q + I)ᵀ.
    const Matrix grad_a = linalg::matmul_nt(linalg::matmul_tn(m, grad_q), q + id);

    Evaluation out{g.loss, std::vector<double>(parameter_count())};
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) out.gradient[k++] = grad_a(i, j) - grad_a(j, i);
    return out;
}

TransformObjective::Transformed ScaleObjective::transform(std::span<const double> params) const {
    if (params.size() != parameter_count()) throw ValidationError("scale objective: wrong parameter count");
    Transformed t{x_, w_};
    for (std::size_t j = 0; j < params.size(); ++j) {
        const double s = std::exp(params[j]);
        for (std::size_t r = 0; r < t.x.rows(); ++r) t.x(r, j) /= s;
        for (double& v : t.w.row(j)) v *= s;
    }
    return t;
}

Evaluation ScaleObjective::evaluate_relaxed(std::span<const double> params, const QuantNoise& noise) const {
    const Transformed t = transform(params);
    const OutputGradients g = output_gradients(t, noise);
    Evaluation out{g.loss, std::vector<double>(params.size(), 0.0)};
    // dX̂_tj/du_j = -X̂_tj and dŴ_jo/du_j = Ŵ_jo.
    for (std::size_t r = 0; r < t.x.rows(); ++r)
        for (std::size_t j = 0; j < params.size(); ++j) out.gradient[j] -= g.dx(r, j) * t.x(r, j);
    for (std::size_t j = 0; j < params.size(); ++j) {
        auto wr = t.w.row(j);
        auto dr = g.dw.row(j);
        for (std::size_t c = 0; c < wr.size(); ++c) out.gradient[j] += dr[c] * wr[c];
    }
    return out;
}

namespace {

// Plain gradient descent returning the best iterate by true quantized loss.
std::vector<double> descend(const TransformObjective& objective, std::vector<double> params,
                            const OptimizerOptions& options) {
    std::vector<double> best = params;
    double best_loss = std::numeric_limits<double>::infinity();
    for (std::size_t step = 0; step <= options.steps; ++step) {
        const Evaluation e = objective.evaluate(params);
        if (!std::isfinite(e.loss)) break;
        if (e.loss < best_loss) {
            best_loss = e.loss;
            best = params;
        }
        if (step == options.steps) break;
        for (std::size_t i = 0; i < params.size(); ++i) params[i] -= options.lr * e.gradient[i];
    }
    return best;
}

}  // namespace

RotationMatrix optimize_rotation(const LayerBundle& layer, const quant::QuantSpec& w_spec, const quant::QuantSpec& a_spec,
                                 const OptimizerOptions& options, const RotationMatrix& init) {
    require_channels(layer, init.dim(), "optimize_rotation");
    if (options.steps == 0) return init;
    RotationObjective objective(layer.calib, layer.w, init.matrix(), w_spec, a_spec);
    const std::vector<double> best = descend(objective, std::vector<double>(objective.parameter_count(), 0.0), options);
    return RotationMatrix(objective.rotation(best), 1e-8);
}

ScaleVector optimize_scale(const LayerBundle& layer, const quant::QuantSpec& w_spec, const quant::QuantSpec& a_spec,
                           const OptimizerOptions& options) {
    layer.validate();
    const ScaleVector init = calibrate_scale(layer.calib, layer.w, 0.5);
    if (options.steps == 0) return init;
    std::vector<double> log_s(init.s.size());
    std::transform(init.s.begin(), init.s.end(), log_s.begin(), [](double s) { return std::log(s); });
    ScaleObjective objective(layer.calib, layer.w, w_spec, a_spec);
    const std::vector<double> best = descend(objective, std::move(log_s), options);
    ScaleVector out{std::vector<double>(best.size())};
    std::transform(best.begin(), best.end(), out.s.begin(), [](double u) { return std::exp(u); });
    return out;
}

}  // namespace ptqlab::transforms
