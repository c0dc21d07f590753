#include "ptqlab/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>

#include "ptqlab/error.hpp"
#include "ptqlab/linalg.hpp"
#include "ptqlab/mitigation.hpp"

namespace ptqlab::pipeline {

using quant::Format;
using quant::QuantSpec;

// ---- recipe -----------------------------------------------------------------------

TransformStep TransformStep::shift() { return TransformStep{}; }

TransformStep TransformStep::calibrated_scale(double alpha) {
    TransformStep s;
    s.kind = Kind::scale;
    s.source = Source::calibrated;
    s.alpha = alpha;
    return s;
}

TransformStep TransformStep::optimized_scale(transforms::OptimizerOptions opt) {
    TransformStep s;
    s.kind = Kind::scale;
    s.source = Source::optimized;
    s.optimizer = opt;
    return s;
}

TransformStep TransformStep::rotation(Source source, std::uint64_t seed) {
    TransformStep s;
    s.kind = Kind::rotation;
    s.source = source;
    s.seed = seed;
    return s;
}

TransformStep TransformStep::optimized_rotation(transforms::OptimizerOptions opt, Init init, std::uint64_t seed) {
    TransformStep s = rotation(Source::optimized, seed);
    s.optimizer = opt;
    s.init = init;
    return s;
}

std::string TransformStep::describe() const {
    switch (kind) {
    case Kind::shift: return "shift";
    case Kind::scale: return source == Source::optimized ? "opt-scale" : "scale";
    case Kind::rotation:
        switch (source) {
        case Source::identity: return "identity";
        case Source::random: return "random-rotation";
        case Source::optimized: return "opt-rotation";
        default: return "hadamard";
        }
    }
    return "?";
}

std::string MitigationStep::describe() const {
    switch (kind) {
    case Kind::gptq: return "gptq";
    case Kind::lowrank: return "lowrank" + std::to_string(rank);
    case Kind::scaled_lowrank: return "l2qer" + std::to_string(rank);
    }
    return "?";
}

QuantSpec Recipe::default_weight_spec() {
    return QuantSpec::int_spec(4, true, quant::Granularity::per_row(), quant::ClipPolicy::search());
}

QuantSpec Recipe::default_activation_spec() {
    return QuantSpec::int_spec(4, false, quant::Granularity::per_row(), quant::ClipPolicy::fixed(1.0));
}

void Recipe::validate() const {
    w_spec.validate();
    a_spec.validate();
    if (!(damping >= 0.0)) throw ValidationError("recipe: damping must be non-negative");
    std::size_t shifts = 0;
    for (const auto& t : transforms) {
        if (t.kind == TransformStep::Kind::shift) ++shifts;
        if (t.kind == TransformStep::Kind::scale) {
            if (t.source != TransformStep::Source::calibrated && t.source != TransformStep::Source::optimized)
                throw ValidationError("recipe: scale source must be calibrated or optimized");
            if (!(t.alpha >= 0.0 && t.alpha <= 1.0)) throw ValidationError("recipe: alpha must lie in [0, 1]");
        }
        if (t.kind == TransformStep::Kind::rotation && t.source == TransformStep::Source::calibrated)
            throw ValidationError("recipe: rotation source must be identity, hadamard, random or optimized");
        if (t.source == TransformStep::Source::optimized && !(t.optimizer.lr > 0.0))
            throw ValidationError("recipe: optimizer learning rate must be positive");
    }
    if (shifts > 1) throw ValidationError("recipe: at most one shift transform is allowed");

    bool seen_gptq = false;
    bool seen_branch = false;
    for (const auto& m : mitigation) {
        if (m.kind == MitigationStep::Kind::gptq) {
            if (seen_gptq) throw ValidationError("recipe: gptq listed twice");
            if (seen_branch) throw ValidationError("recipe: gptq must precede the low-rank branch");
            if (m.block == 0) throw ValidationError("recipe: gptq block size must be positive");
            seen_gptq = true;
        } else {
            if (seen_branch) throw ValidationError("recipe: at most one of lowrank/scaled_lowrank is allowed");
            if (m.rank == 0) throw ValidationError("recipe: low-rank rank must be positive");
            seen_branch = true;
        }
    }
    if (!mitigation.empty() && w_spec.format == Format::none)
        throw ValidationError("recipe: mitigation requires weight quantization");
}

std::string Recipe::transform_label() const {
    if (transforms.empty()) return "-";
    std::string out;
    for (const auto& t : transforms) out += (out.empty() ? "" : "+") + t.describe();
    return out;
}

std::string Recipe::mitigation_label() const {
    if (mitigation.empty()) return "-";
    std::string out;
    for (const auto& m : mitigation) out += (out.empty() ? "" : "+") + m.describe();
    return out;
}

// ---- metrics ---------------------------------------------------------------------

Flatness flatness_metrics(const Matrix& x) {
    if (x.empty()) throw ValidationError("flatness_metrics: empty input");
    const auto data = x.data();
    const double n = static_cast<double>(data.size());
    double max_abs = 0.0;
    double sum_abs = 0.0;
    double mean = 0.0;
    for (double v : data) {
        max_abs = std::max(max_abs, std::abs(v));
        sum_abs += std::abs(v);
        mean += v;
    }
    mean /= n;
    Flatness f;
    if (sum_abs == 0.0) return f;
    f.max_over_mean = max_abs / (sum_abs / n);
    double m2 = 0.0;
    double m4 = 0.0;
    for (double v : data) {
        const double d = (v - mean) * (v - mean);
        m2 += d;
        m4 += d * d;
    }
    m2 /= n;
    m4 /= n;
    f.kurtosis = m2 > 0.0 ? m4 / (m2 * m2) - 3.0 : 0.0;
    return f;
}

double finite_difference_check(const std::function<double(std::span<const double>)>& objective,
                               std::span<const double> params, std::span<const double> analytic, double epsilon) {
    if (!(epsilon > 0.0)) throw ValidationError("finite_difference_check: epsilon must be positive");
    if (params.size() != analytic.size()) throw ValidationError("finite_difference_check: gradient length mismatch");
    double scale = 0.0;
    for (double g : analytic) scale = std::max(scale, std::abs(g));
    const double floor = std::max(1e-6 * scale, 1e-300);
    std::vector<double> probe(params.begin(), params.end());
    double worst = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double saved = probe[i];
        probe[i] = saved + epsilon;
        const double up = objective(probe);
        probe[i] = saved - epsilon;
        const double down = objective(probe);
        probe[i] = saved;
        const double fd = (up - down) / (2.0 * epsilon);
        const double denom = std::max({std::abs(fd), std::abs(analytic[i]), floor});
        worst = std::max(worst, std::abs(fd - analytic[i]) / denom);
    }
    return worst;
}

double finite_difference_check(const transforms::TransformObjective& objective, std::span<const double> params,
                               double epsilon) {
    const transforms::QuantNoise noise = objective.freeze(params);
    const transforms::Evaluation at = objective.evaluate_relaxed(params, noise);
    return finite_difference_check(
        [&](std::span<const double> p) { return objective.evaluate_relaxed(p, noise).loss; }, params, at.gradient,
        epsilon);
}

// ---- run_recipe ----------------------------------------------------------------------

namespace {

[[noreturn]] void rethrow_annotated(const std::string& layer, const std::string& stage, const Error& e) {
    const std::string msg = "layer '" + layer + "', stage '" + stage + "': " + e.what();
    switch (e.kind()) {
    case ErrorKind::validation: throw ValidationError(msg);
    case ErrorKind::numeric: throw NumericError(msg);
    case ErrorKind::io: throw IoError(msg);
    }
    throw ValidationError(msg);
}

template <typename F>
auto staged(const std::string& layer, const std::string& stage, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const Error& e) {
        rethrow_annotated(layer, stage, e);
    }
}

struct Split {
    std::size_t train = 0;
    std::size_t total = 0;
};

Split split_tokens(std::size_t tokens) {
    if (tokens < 2) throw ValidationError("need at least 2 calibration tokens for the held-out split");
    const std::size_t held = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(tokens * holdout_fraction)));
    return {tokens - held, tokens};
}

transforms::RotationMatrix make_rotation(const TransformStep& step, std::size_t dim, std::size_t layer_index) {
    const Seed seed{step.seed + layer_index};
    switch (step.source) {
    case TransformStep::Source::identity: return transforms::RotationMatrix(Matrix::identity(dim));
    case TransformStep::Source::random: return transforms::RotationMatrix(linalg::random_orthogonal(dim, seed));
    case TransformStep::Source::optimized:
        if (step.init == TransformStep::Init::random)
            return transforms::RotationMatrix(linalg::random_orthogonal(dim, seed));
        return transforms::RotationMatrix(linalg::hadamard(dim));
    default: return transforms::RotationMatrix(linalg::hadamard(dim));
    }
}

LayerMetrics run_layer(const LayerBundle& original, const Recipe& recipe, std::size_t layer_index,
                       LayerArtifacts* artifacts) {
    const std::string& name = original.name;
    staged(name, "load", [&] {
        original.validate();
        if (original.calib.empty()) throw ValidationError("calibration activations are required");
    });
    const Split split = staged(name, "split", [&] { return split_tokens(original.calib.rows()); });

    LayerMetrics m;
    m.name = name;
    LayerBundle current = original;
    auto train_view = [&] {
        return LayerBundle{current.name, current.w, current.bias, current.calib.row_slice(0, split.train)};
    };

    for (const TransformStep& step : recipe.transforms) {
        const std::string stage = step.describe();
        transforms::AppliedTransform applied = staged(name, stage, [&]() -> transforms::AppliedTransform {
            const LayerBundle train = train_view();
            switch (step.kind) {
            case TransformStep::Kind::shift:
                if (recipe.a_spec.format != Format::none && recipe.a_spec.symmetric)
                    m.warnings.push_back("shift paired with symmetric activation quantization");
                return transforms::calibrate_shift(train.calib);
            case TransformStep::Kind::scale:
                if (step.source == TransformStep::Source::optimized)
                    return transforms::optimize_scale(train, recipe.w_spec, recipe.a_spec, step.optimizer);
                return transforms::calibrate_scale(train.calib, train.w, step.alpha, &m.warnings);
            case TransformStep::Kind::rotation: {
                transforms::RotationMatrix o = make_rotation(step, current.c_in(), layer_index);
                if (step.source == TransformStep::Source::optimized)
                    return transforms::optimize_rotation(train, recipe.w_spec, recipe.a_spec, step.optimizer, o);
                return o;
            }
            }
            throw ValidationError("unknown transform");
        });
        current = staged(name, stage, [&] { return transforms::apply(current, applied); });
        if (artifacts) artifacts->transforms.push_back(std::move(applied));
    }

    const Matrix x_train = current.calib.row_slice(0, split.train);
    const Matrix x_eval = current.calib.row_slice(split.train, split.total);
    const mitigation::Hessian h = staged(name, "hessian", [&] { return mitigation::build_hessian(x_train, recipe.damping); });

    Matrix w_q = current.w;
    std::optional<mitigation::LowRankBranch> branch;
    if (recipe.w_spec.format != Format::none) {
        const bool use_gptq = std::any_of(recipe.mitigation.begin(), recipe.mitigation.end(),
                                          [](const MitigationStep& s) { return s.kind == MitigationStep::Kind::gptq; });
        if (use_gptq) {
            const auto it = std::find_if(recipe.mitigation.begin(), recipe.mitigation.end(),
                                         [](const MitigationStep& s) { return s.kind == MitigationStep::Kind::gptq; });
            w_q = staged(name, "gptq",
                         [&] { return mitigation::gptq_quantize(current.w, h, recipe.w_spec, it->block).w_dequant; });
        } else {
            w_q = staged(name, "weight-quant", [&] { return quant::fake_quantize_weight(current.w, recipe.w_spec); });
        }
        for (const MitigationStep& step : recipe.mitigation) {
            if (step.kind == MitigationStep::Kind::lowrank)
                branch = staged(name, "lowrank", [&] { return mitigation::lowrank_compensate(current.w, w_q, step.rank); });
            else if (step.kind == MitigationStep::Kind::scaled_lowrank)
                branch = staged(name, "scaled-lowrank", [&] {
                    return mitigation::scaled_lowrank_compensate(current.w, w_q, step.rank,
                                                                 mitigation::activation_saliency(x_train));
                });
        }
    }

    staged(name, "metrics", [&] {
        Matrix effective = w_q;
        if (branch) effective += branch->product();
        m.weight_frob_err = relative_frobenius_error(effective, current.w);
        for (double l : mitigation::proxy_row_losses(current.w, effective, h)) m.proxy_loss += l;
        m.proxy_loss = std::max(m.proxy_loss, 0.0);

        const Flatness f = flatness_metrics(x_train);
        m.flatness_max_over_mean = f.max_over_mean;
        m.kurtosis = f.kurtosis;
        m.bits_per_weight = quant::parameter_bits_per_weight(recipe.w_spec, current.c_in());

        const Matrix x_q = quant::fake_quantize(x_eval, recipe.a_spec);
        const Matrix y_q = mitigation::layer_output(x_q, w_q, branch, current.bias);
        const Matrix y_fp = linear_output(original.calib.row_slice(split.train, split.total), original.w, original.bias);
        const double power = squared_frobenius(y_fp);
        const double err = squared_frobenius(y_q - y_fp);
        m.output_mse = power > 0.0 ? err / power : err;
        for (double v : {m.weight_frob_err, m.output_mse, m.proxy_loss, m.flatness_max_over_mean, m.kurtosis})
            if (!std::isfinite(v)) throw NumericError("non-finite metric");
    });
    if (artifacts) {
        artifacts->name = name;
        artifacts->w_dequant = w_q;
        artifacts->branch = branch;
        artifacts->bias = current.bias;
    }
    return m;
}

LayerMetrics mean_of(const std::vector<LayerMetrics>& layers) {
    LayerMetrics mean;
    mean.name = "mean";
    if (layers.empty()) return mean;
    for (const auto& l : layers) {
        mean.weight_frob_err += l.weight_frob_err;
        mean.output_mse += l.output_mse;
        mean.proxy_loss += l.proxy_loss;
        mean.flatness_max_over_mean += l.flatness_max_over_mean;
        mean.kurtosis += l.kurtosis;
        mean.bits_per_weight += l.bits_per_weight;
    }
    const double n = static_cast<double>(layers.size());
    mean.weight_frob_err /= n;
    mean.output_mse /= n;
    mean.proxy_loss /= n;
    mean.flatness_max_over_mean /= n;
    mean.kurtosis /= n;
    mean.bits_per_weight /= n;
    return mean;
}

}  // namespace

Report run_recipe(const ModelBundle& model, const Recipe& recipe, std::vector<LayerArtifacts>* artifacts) {
    recipe.validate();
    if (model.empty()) throw ValidationError("run_recipe: model has no layers");
    Report r;
    r.label = recipe.label.empty() ? recipe.transform_label() + " / " + recipe.mitigation_label() : recipe.label;
    r.transforms = recipe.transform_label();
    r.mitigation = recipe.mitigation_label();
    r.w_spec = recipe.w_spec.describe();
    r.a_spec = recipe.a_spec.describe();
    r.layers.reserve(model.size());
    if (artifacts) artifacts->assign(model.size(), LayerArtifacts{});
    for (std::size_t i = 0; i < model.size(); ++i)
        r.layers.push_back(run_layer(model[i], recipe, i, artifacts ? &(*artifacts)[i] : nullptr));
    r.mean = mean_of(r.layers);
    return r;
}

// ---- sweeps -------------------------------------------------------------------------

std::string symmetry_label(SymmetryMode m) {
    switch (m) {
    case SymmetryMode::sym: return "Sym";
    case SymmetryMode::w_asym: return "W-Asym";
    case SymmetryMode::a_asym: return "A-Asym";
    case SymmetryMode::asym: return "Asym";
    }
    return "?";
}

std::string format_label(FormatChoice f) { return f == FormatChoice::int4 ? "INT4" : "MXFP4"; }

SweepAxis SweepAxis::granularity(std::vector<std::size_t> groups) {
    SweepAxis a;
    a.kind = Kind::granularity;
    a.group_sizes = std::move(groups);
    return a;
}

SweepAxis SweepAxis::symmetry(std::vector<SymmetryMode> modes) {
    SweepAxis a;
    a.kind = Kind::symmetry;
    a.symmetries = std::move(modes);
    return a;
}

SweepAxis SweepAxis::format(std::vector<FormatChoice> formats) {
    SweepAxis a;
    a.kind = Kind::format;
    a.formats = std::move(formats);
    return a;
}

namespace {

std::size_t axis_size(const SweepAxis& axis) {
    switch (axis.kind) {
    case SweepAxis::Kind::granularity: return axis.group_sizes.size();
    case SweepAxis::Kind::symmetry: return axis.symmetries.size();
    case SweepAxis::Kind::format: return axis.formats.size();
    }
    return 0;
}

QuantSpec as_int4(const QuantSpec& spec, bool weight) {
    if (spec.format == Format::uniform_int) {
        QuantSpec s = spec;
        s.bits = 4;
        return s;
    }
    return weight ? Recipe::default_weight_spec() : Recipe::default_activation_spec();
}

}  // namespace

Recipe sweep_recipe(const Recipe& base, const SweepAxis& axis, std::size_t index) {
    if (index >= axis_size(axis)) throw ValidationError("sweep: value index out of range");
    Recipe r = base;
    switch (axis.kind) {
    case SweepAxis::Kind::granularity: {
        const std::size_t g = axis.group_sizes[index];
        if (g == 0) throw ValidationError("sweep: group size must be positive");
        if (r.w_spec.format != Format::uniform_int || r.a_spec.format == Format::mxfp4)
            throw ValidationError("sweep: granularity axis needs integer weight and activation formats");
        r.w_spec.granularity = quant::Granularity::per_group(g);
        if (r.a_spec.format == Format::uniform_int) r.a_spec.granularity = quant::Granularity::per_group(g);
        r.label = "group-" + std::to_string(g);
        break;
    }
    case SweepAxis::Kind::symmetry: {
        const SymmetryMode m = axis.symmetries[index];
        if (r.w_spec.format != Format::uniform_int || r.a_spec.format != Format::uniform_int)
            throw ValidationError("sweep: symmetry axis needs integer weight and activation formats");
        r.w_spec.symmetric = !(m == SymmetryMode::w_asym || m == SymmetryMode::asym);
        r.a_spec.symmetric = !(m == SymmetryMode::a_asym || m == SymmetryMode::asym);
        r.label = symmetry_label(m);
        break;
    }
    case SweepAxis::Kind::format: {
        const FormatChoice f = axis.formats[index];
        if (f == FormatChoice::int4) {
            r.w_spec = as_int4(base.w_spec, true);
            r.a_spec = as_int4(base.a_spec, false);
        } else {
            r.w_spec = QuantSpec::mxfp4(quant::ClipPolicy::search());
            r.a_spec = QuantSpec::mxfp4(quant::ClipPolicy::fixed(0.75));
        }
        r.label = format_label(f);
        break;
    }
    }
    return r;
}

std::vector<Report> sweep(const ModelBundle& model, const Recipe& base, const SweepAxis& axis) {
    const std::size_t n = axis_size(axis);
    if (n == 0) throw ValidationError("sweep: no axis values");
    std::vector<Report> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(run_recipe(model, sweep_recipe(base, axis, i)));
    return out;
}

// ---- synthetic model ---------------------------------------------------------------------

ModelBundle gen_synthetic_model(const SyntheticOptions& o) {
    if (o.layers == 0) throw ValidationError("gen: layer count must be positive");
    if (o.tokens < 2) throw ValidationError("gen: need at least 2 tokens");
    if (o.dims.size() != 1 && o.dims.size() != o.layers + 1)
        throw ValidationError("gen: dims must list one width or layers + 1 widths");
    for (std::size_t d : o.dims)
        if (d == 0) throw ValidationError("gen: dimensions must be positive");
    if (!(o.outlier_gain > 0.0) || !std::isfinite(o.outlier_gain)) throw ValidationError("gen: outlier gain must be positive");
    if (!std::isfinite(o.skew)) throw ValidationError("gen: skew must be finite");

    Rng rng(Seed{o.seed});
    ModelBundle model;
    model.reserve(o.layers);
    for (std::size_t l = 0; l < o.layers; ++l) {
        const std::size_t c_in = o.dims.size() == 1 ? o.dims[0] : o.dims[l];
        const std::size_t c_out = o.dims.size() == 1 ? o.dims[0] : o.dims[l + 1];
        if (o.outlier_channels > c_in) throw ValidationError("gen: more outlier channels than input channels");

        LayerBundle layer;
        layer.name = "layer" + std::to_string(l);
        layer.w = rng.gaussian(c_in, c_out, 1.0 / std::sqrt(static_cast<double>(c_in)));
        layer.calib = rng.gaussian(o.tokens, c_in);

        // Partial Fisher-Yates draw of the outlier channels.
        std::vector<std::size_t> channels(c_in);
        std::iota(channels.begin(), channels.end(), 0);
        for (std::size_t i = 0; i < o.outlier_channels; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.next() % (c_in - i));
            std::swap(channels[i], channels[j]);
        }
        for (std::size_t i = 0; i < o.outlier_channels; ++i) {
            const std::size_t c = channels[i];
            for (std::size_t t = 0; t < o.tokens; ++t) layer.calib(t, c) = o.outlier_gain * layer.calib(t, c) + o.skew;
        }
        model.push_back(std::move(layer));
    }
    return model;
}

}  // namespace ptqlab::pipeline
