#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ptqlab/matrix.hpp"

namespace ptqlab {

/// One linear layer Y = X·W + B together with its calibration activations.
///
/// w is C_in x C_out, calib is tokens x C_in, bias (when present) has C_out
/// entries and broadcasts over tokens.
struct LayerBundle {
    std::string name;
    Matrix w;
    std::optional<std::vector<double>> bias;
    Matrix calib;

    std::size_t c_in() const noexcept { return w.rows(); }
    std::size_t c_out() const noexcept { return w.cols(); }

    // Throws ValidationError on inconsistent shapes.
    void validate() const;
    // calib·w + bias
    Matrix output() const;
};

using ModelBundle = std::vector<LayerBundle>;

// x·w + bias, with bias broadcast over rows.
Matrix linear_output(const Matrix& x, const Matrix& w, const std::optional<std::vector<double>>& bias);

}  // namespace ptqlab
