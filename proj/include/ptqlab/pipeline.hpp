#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ptqlab/layer.hpp"
#include "ptqlab/mitigation.hpp"
#include "ptqlab/quantizer.hpp"
#include "ptqlab/transforms.hpp"

namespace ptqlab::pipeline {

// ---- recipes -------------------------------------------------------------------

struct TransformStep {
    enum class Kind { shift, scale, rotation };
    // scale: calibrated | optimized.  rotation: identity | hadamard | random | optimized.
    enum class Source { calibrated, optimized, identity, hadamard, random };
    // Starting point of an optimized rotation.
    enum class Init { hadamard, random };

    Kind kind = Kind::shift;
    Source source = Source::calibrated;
    double alpha = 0.5;
    Init init = Init::hadamard;
    std::uint64_t seed = 0;
    transforms::OptimizerOptions optimizer;

    static TransformStep shift();
    static TransformStep calibrated_scale(double alpha = 0.5);
    static TransformStep optimized_scale(transforms::OptimizerOptions opt = {});
    static TransformStep rotation(Source source, std::uint64_t seed = 0);
    static TransformStep optimized_rotation(transforms::OptimizerOptions opt = {}, Init init = Init::hadamard,
                                            std::uint64_t seed = 0);

    std::string describe() const;
};

struct MitigationStep {
    enum class Kind { gptq, lowrank, scaled_lowrank };
    Kind kind = Kind::gptq;
    std::size_t block = 128;  // gptq
    std::size_t rank = 32;    // lowrank, scaled_lowrank

    static MitigationStep gptq(std::size_t block = 128) { return {Kind::gptq, block, 32}; }
    static MitigationStep lowrank(std::size_t rank = 32) { return {Kind::lowrank, 128, rank}; }
    static MitigationStep scaled_lowrank(std::size_t rank = 32) { return {Kind::scaled_lowrank, 128, rank}; }

    std::string describe() const;
};

struct Recipe {
    std::string label;
    std::vector<TransformStep> transforms;
    quant::QuantSpec w_spec = default_weight_spec();
    quant::QuantSpec a_spec = default_activation_spec();
    std::vector<MitigationStep> mitigation;
    double damping = 0.01;
    std::uint64_t seed = 0;

    // INT4 symmetric per-output-channel with clip search.
    static quant::QuantSpec default_weight_spec();
    // INT4 asymmetric per-token.
    static quant::QuantSpec default_activation_spec();

    // Throws ValidationError when the step lists break their ordering rules.
    void validate() const;
    // "Data normalization" column, e.g. "scale+rotation", or "-".
    std::string transform_label() const;
    // "Error compensation" column, e.g. "gptq+lowrank32", or "-".
    std::string mitigation_label() const;
};

// ---- reports ---------------------------------------------------------------------

struct LayerMetrics {
    std::string name;
    double weight_frob_err = 0.0;        // ‖Ŵ − (W_q + AB)‖_F / ‖Ŵ‖_F in the transformed basis
    double output_mse = 0.0;             // held-out ‖Y_q − Y‖² / ‖Y‖²
    double proxy_loss = 0.0;             // Σ_rows δᵀHδ of the effective weight
    double flatness_max_over_mean = 0.0; // of the transformed activations
    double kurtosis = 0.0;               // excess kurtosis of the transformed activations
    double bits_per_weight = 0.0;        // extra bits per weight for quantization parameters
    std::vector<std::string> warnings;
};

struct Report {
    std::string label;        // row label (recipe label or sweep value)
    std::string transforms;   // DN column
    std::string mitigation;   // EC column
    std::string w_spec;
    std::string a_spec;
    std::vector<LayerMetrics> layers;
    LayerMetrics mean;        // field-wise mean over layers (name "mean", no warnings)
};

// Intermediate results of one layer, for inspection dumps.
struct LayerArtifacts {
    std::string name;
    std::vector<transforms::AppliedTransform> transforms;
    Matrix w_dequant;  // quantized weight in the transformed basis (C_in x C_out)
    std::optional<mitigation::LowRankBranch> branch;
    std::optional<std::vector<double>> bias;  // transformed bias
};

// Fraction of calibration tokens (taken from the end) held out for metrics.
inline constexpr double holdout_fraction = 0.25;

/// Runs the recipe on every layer independently: transforms (calibrated on the
/// leading 75% of tokens), weight quantization and mitigation, activation
/// fake-quantization, then metrics on the held-out tail. Errors are rethrown
/// with the layer name and stage prepended.
Report run_recipe(const ModelBundle& model, const Recipe& recipe, std::vector<LayerArtifacts>* artifacts = nullptr);

// ---- sweeps ------------------------------------------------------------------------

enum class SymmetryMode { sym, w_asym, a_asym, asym };
std::string symmetry_label(SymmetryMode m);
enum class FormatChoice { int4, mxfp4 };
std::string format_label(FormatChoice f);

struct SweepAxis {
    enum class Kind { granularity, symmetry, format };
    Kind kind = Kind::granularity;
    std::vector<std::size_t> group_sizes;
    std::vector<SymmetryMode> symmetries;
    std::vector<FormatChoice> formats;

    static SweepAxis granularity(std::vector<std::size_t> groups);
    static SweepAxis symmetry(std::vector<SymmetryMode> modes = {SymmetryMode::sym, SymmetryMode::w_asym,
                                                                  SymmetryMode::a_asym, SymmetryMode::asym});
    static SweepAxis format(std::vector<FormatChoice> formats = {FormatChoice::int4, FormatChoice::mxfp4});
};

// The recipe run for one sweep value.
Recipe sweep_recipe(const Recipe& base, const SweepAxis& axis, std::size_t index);
std::vector<Report> sweep(const ModelBundle& model, const Recipe& base, const SweepAxis& axis);

// ---- synthetic data ------------------------------------------------------------------

struct SyntheticOptions {
    std::size_t layers = 4;
    // One entry: every layer is d x d. layers + 1 entries: layer i is dims[i] x dims[i+1].
    std::vector<std::size_t> dims = {128};
    std::size_t tokens = 512;
    std::size_t outlier_channels = 4;
    double outlier_gain = 100.0;
    double skew = 0.0;
    std::uint64_t seed = 0;
};

/// Gaussian weights (std 1/√C_in) and standard-normal activations in which a
/// seeded subset of channels is multiplied by outlier_gain and offset by skew.
ModelBundle gen_synthetic_model(const SyntheticOptions& options);

// ---- metrics ----------------------------------------------------------------------------

struct Flatness {
    double max_over_mean = 0.0;
    double kurtosis = 0.0;  // excess
};

// max|x| / mean|x| and excess kurtosis of all entries; 0 for an all-zero tensor.
Flatness flatness_metrics(const Matrix& x);

/// Largest per-parameter disagreement between central differences and the
/// analytic gradient: max_i |fd_i − g_i| / max(|fd_i|, |g_i|, 1e-6·‖g‖_∞).
double finite_difference_check(const std::function<double(std::span<const double>)>& objective,
                               std::span<const double> params, std::span<const double> analytic, double epsilon);

/// Gradient check of a transform objective under its straight-through
/// relaxation: noise is frozen at `params`, so the relaxed objective is smooth.
double finite_difference_check(const transforms::TransformObjective& objective, std::span<const double> params,
                               double epsilon);

}  // namespace ptqlab::pipeline
