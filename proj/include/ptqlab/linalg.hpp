#pragma once

#include <cstddef>
#include <vector>

#include "ptqlab/matrix.hpp"

// Dense kernels sized for desk-scale layers (a few thousand per side at most).
// Accumulation is always in double, left to right over the inner index.
namespace ptqlab::linalg {

Matrix matmul(const Matrix& a, const Matrix& b);
// aᵀ·b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// a·bᵀ without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

/// Lower-triangular L with L·Lᵀ = h.
///
/// Throws NumericError when a pivot is not strictly positive; for Hessians this
/// means the damping term must be increased.
Matrix cholesky(const Matrix& h);

struct LdlFactors {
    Matrix unit_lower;          // L, ones on the diagonal
    std::vector<double> diag;   // D
};

/// h = L·diag(D)·Lᵀ with L unit lower triangular.
LdlFactors ldl_decompose(const Matrix& h);

// Inverse of a symmetric positive-definite matrix through its Cholesky factor.
Matrix spd_inverse(const Matrix& h);

// Solves a·x = b by LU with partial pivoting. Throws NumericError if a is singular.
Matrix solve(const Matrix& a, const Matrix& b);

struct TruncatedSvd {
    Matrix u;                       // rows x k, orthonormal columns
    std::vector<double> singular;   // k values, non-increasing
    Matrix v;                       // cols x k, orthonormal columns
};

/// Leading k singular triplets by one-sided Jacobi.
///
/// Columns of U belonging to zero singular values are completed to an
/// orthonormal set, so U and V are always orthonormal.
TruncatedSvd svd_topk(const Matrix& m, std::size_t k);

// All min(rows, cols) singular values, non-increasing.
std::vector<double> singular_values(const Matrix& m);

/// Normalized Sylvester-Hadamard matrix H/√n. n must be a power of two.
Matrix hadamard(std::size_t n);

/// Haar-random orthogonal matrix: QR of a seeded Gaussian matrix with the
/// diagonal of R forced positive.
Matrix random_orthogonal(std::size_t n, Seed seed);

/// Cayley map Q = (I - a)⁻¹(I + a) of a skew-symmetric a.
Matrix cayley(const Matrix& a);

// ||OᵀO - I||_F
double orthogonality_error(const Matrix& o);

bool is_power_of_two(std::size_t n) noexcept;

}  // namespace ptqlab::linalg
