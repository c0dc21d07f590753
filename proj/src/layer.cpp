#include "ptqlab/layer.hpp"

#include "ptqlab/error.hpp"
#include "ptqlab/linalg.hpp"

namespace ptqlab {

void LayerBundle::validate() const {
    if (w.empty()) throw ValidationError("layer '" + name + "': empty weight");
    if (!calib.empty() && calib.cols() != w.rows()) {
        throw ValidationError("layer '" + name + "': calibration has " + std::to_string(calib.cols()) +
                              " channels but weight expects " + std::to_string(w.rows()));
    }
    if (bias && bias->size() != w.cols()) {
        throw ValidationError("layer '" + name + "': bias length " + std::to_string(bias->size()) +
                              " does not match " + std::to_string(w.cols()) + " outputs");
    }
}

Matrix LayerBundle::output() const { return linear_output(calib, w, bias); }

Matrix linear_output(const Matrix& x, const Matrix& w, const std::optional<std::vector<double>>& bias) {
    Matrix y = linalg::matmul(x, w);
    if (bias) {
        if (bias->size() != y.cols()) throw ValidationError("linear_output: bias length mismatch");
        for (std::size_t r = 0; r < y.rows(); ++r)
            for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) += (*bias)[c];
    }
    return y;
}

}  // namespace ptqlab
