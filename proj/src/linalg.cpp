#include "ptqlab/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ptqlab/error.hpp"

namespace ptqlab::linalg {

namespace {

std::string shape(const Matrix& m) { return std::to_string(m.rows()) + "x" + std::to_string(m.cols()); }

void require_symmetric(const Matrix& h, const char* op) {
    if (!h.is_square()) throw ValidationError(std::string(op) + ": matrix must be square, got " + shape(h));
    const double tol = 1e-8 * std::max(1.0, max_abs(h));
    for (std::size_t i = 0; i < h.rows(); ++i)
        for (std::size_t j = i + 1; j < h.cols(); ++j)
            if (std::abs(h(i, j) - h(j, i)) > tol)
                throw ValidationError(std::string(op) + ": matrix is not symmetric");
}

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

}  // namespace

bool is_power_of_two(std::size_t n) noexcept { return n != 0 && (n & (n - 1)) == 0; }

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw ValidationError("matmul: dimension mismatch " + shape(a) + " x " + shape(b));
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto out = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            auto brow = b.row(k);
            for (std::size_t j = 0; j < out.size(); ++j) out[j] += aik * brow[j];
        }
    }
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw ValidationError("matmul_tn: dimension mismatch " + shape(a) + " x " + shape(b));
    Matrix c(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        auto arow = a.row(k);
        auto brow = b.row(k);
        for (std::size_t i = 0; i < arow.size(); ++i) {
            const double aki = arow[i];
            auto out = c.row(i);
            for (std::size_t j = 0; j < brow.size(); ++j) out[j] += aki * brow[j];
        }
    }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw ValidationError("matmul_nt: dimension mismatch " + shape(a) + " x " + shape(b));
    // Same k-order accumulation as a dot product per entry, but with a
    // contiguous inner loop.
    return matmul(a, b.transposed());
}

Matrix cholesky(const Matrix& h) {
    require_symmetric(h, "cholesky");
    const std::size_t n = h.rows();
    Matrix l(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double d = h(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
        if (!(d > 0.0)) {
            throw NumericError("cholesky: non-positive pivot at index " + std::to_string(j) +
                               "; matrix is not positive definite (increase Hessian damping)");
        }
        const double ljj = std::sqrt(d);
        l(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = h(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / ljj;
        }
    }
    return l;
}

LdlFactors ldl_decompose(const Matrix& h) {
    require_symmetric(h, "ldl_decompose");
    const std::size_t n = h.rows();
    LdlFactors f{Matrix::identity(n), std::vector<double>(n, 0.0)};
    Matrix& l = f.unit_lower;
    for (std::size_t j = 0; j < n; ++j) {
        double d = h(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k) * f.diag[k];
        if (!(d > 0.0)) {
            throw NumericError("ldl_decompose: non-positive pivot at index " + std::to_string(j) +
                               " (increase Hessian damping)");
        }
        f.diag[j] = d;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = h(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k) * f.diag[k];
            l(i, j) = s / d;
        }
    }
    return f;
}

Matrix spd_inverse(const Matrix& h) {
    const Matrix l = cholesky(h);
    const std::size_t n = l.rows();
    // Forward substitution for L⁻¹ (lower triangular).
    Matrix linv(n, n);
    for (std::size_t c = 0; c < n; ++c) {
        linv(c, c) = 1.0 / l(c, c);
        for (std::size_t r = c + 1; r < n; ++r) {
            double s = 0.0;
            for (std::size_t k = c; k < r; ++k) s -= l(r, k) * linv(k, c);
            linv(r, c) = s / l(r, r);
        }
    }
    Matrix inv = matmul_tn(linv, linv);
    // Symmetrize away rounding asymmetry.
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double avg = 0.5 * (inv(i, j) + inv(j, i));
            inv(i, j) = avg;
            inv(j, i) = avg;
        }
    return inv;
}

Matrix solve(const Matrix& a, const Matrix& b) {
    if (!a.is_square() || a.rows() != b.rows())
        throw ValidationError("solve: incompatible shapes " + shape(a) + " and " + shape(b));
    const std::size_t n = a.rows();
    Matrix lu = a;
    Matrix x = b;
    const double tol = 1e-14 * std::max(1.0, max_abs(a));
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t piv = k;
        for (std::size_t i = k + 1; i < n; ++i)
            if (std::abs(lu(i, k)) > std::abs(lu(piv, k))) piv = i;
        if (std::abs(lu(piv, k)) <= tol) throw NumericError("solve: matrix is singular");
        if (piv != k) {
            std::swap_ranges(lu.row(k).begin(), lu.row(k).end(), lu.row(piv).begin());
            std::swap_ranges(x.row(k).begin(), x.row(k).end(), x.row(piv).begin());
        }
        for (std::size_t i = k + 1; i < n; ++i) {
            const double f = lu(i, k) / lu(k, k);
            if (f == 0.0) continue;
            for (std::size_t j = k; j < n; ++j) lu(i, j) -= f * lu(k, j);
            for (std::size_t j = 0; j < x.cols(); ++j) x(i, j) -= f * x(k, j);
        }
    }
    for (std::size_t k = n; k-- > 0;) {
        for (std::size_t j = 0; j < x.cols(); ++j) {
            double s = x(k, j);
            for (std::size_t i = k + 1; i < n; ++i) s -= lu(k, i) * x(i, j);
            x(k, j) = s / lu(k, k);
        }
    }
    return x;
}

namespace {

// One-sided Jacobi on the rows of `work` (the columns of the original matrix).
// On return the rows are mutually orthogonal and `v` holds the accumulated
// rotations (row i of v is column i of V).
void jacobi_orthogonalize(Matrix& work, Matrix& v) {
    const std::size_t n = work.rows();
    constexpr int max_sweeps = 60;
    constexpr double eps = 1e-15;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                auto ap = work.row(p);
                auto aq = work.row(q);
                const double alpha = dot(ap, ap);
                const double beta = dot(aq, aq);
                const double gamma = dot(ap, aq);
                if (std::abs(gamma) <= eps * std::sqrt(alpha * beta) || gamma == 0.0) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < ap.size(); ++i) {
                    const double x = ap[i];
                    const double y = aq[i];
                    ap[i] = c * x - s * y;
                    aq[i] = s * x + c * y;
                }
                auto vp = v.row(p);
                auto vq = v.row(q);
                for (std::size_t i = 0; i < vp.size(); ++i) {
                    const double x = vp[i];
                    const double y = vq[i];
                    vp[i] = c * x - s * y;
                    vq[i] = s * x + c * y;
                }
            }
        }
        if (!rotated) return;
    }
}

// Replaces near-zero rows [from, rows) of `basis` (which has orthonormal rows
// before `from`) by an orthonormal completion drawn from the standard basis.
void complete_orthonormal_rows(Matrix& basis, std::size_t from) {
    const std::size_t dim = basis.cols();
    std::size_t candidate = 0;
    for (std::size_t r = from; r < basis.rows(); ++r) {
        while (candidate < dim) {
            std::vector<double> e(dim, 0.0);
            e[candidate++] = 1.0;
            for (std::size_t k = 0; k < r; ++k) {
                const double proj = dot(basis.row(k), e);
                for (std::size_t i = 0; i < dim; ++i) e[i] -= proj * basis(k, i);
            }
            // Second pass keeps the completion orthogonal to working precision.
            for (std::size_t k = 0; k < r; ++k) {
                const double proj = dot(basis.row(k), e);
                for (std::size_t i = 0; i < dim; ++i) e[i] -= proj * basis(k, i);
            }
            const double norm = std::sqrt(dot(e, e));
            if (norm > 1e-6) {
                for (std::size_t i = 0; i < dim; ++i) basis(r, i) = e[i] / norm;
                break;
            }
        }
    }
}

struct JacobiResult {
    Matrix left;    // rows are left singular vectors (length rows of m)
    std::vector<double> sigma;
    Matrix right;   // rows are right singular vectors (length cols of m)
};

JacobiResult jacobi_svd(const Matrix& m) {
    const bool wide = m.rows() < m.cols();
    // Orthogonalize columns of the tall orientation; rows of `work` are those columns.
    Matrix work = wide ? m : m.transposed();
    const std::size_t n = work.rows();
    Matrix v = Matrix::identity(n);
    jacobi_orthogonalize(work, v);

    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) norms[i] = std::sqrt(dot(work.row(i), work.row(i)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

    JacobiResult r{Matrix(n, work.cols()), std::vector<double>(n), Matrix(n, n)};
    const double tiny = (norms.empty() ? 0.0 : norms[order[0]]) * 1e-13;
    std::size_t nonzero = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t src = order[i];
        const double s = norms[src];
        r.sigma[i] = s;
        for (std::size_t j = 0; j < n; ++j) r.right(i, j) = v(src, j);
        if (s > tiny && s > 0.0) {
            for (std::size_t j = 0; j < work.cols(); ++j) r.left(i, j) = work(src, j) / s;
            nonzero = i + 1;
        }
    }
    complete_orthonormal_rows(r.left, nonzero);
    if (wide) std::swap(r.left, r.right);
    return r;
}

}  // namespace

TruncatedSvd svd_topk(const Matrix& m, std::size_t k) {
    const std::size_t full = std::min(m.rows(), m.cols());
    if (k < 1 || k > full) {
        throw ValidationError("svd_topk: rank " + std::to_string(k) + " outside [1, " + std::to_string(full) + "]");
    }
    JacobiResult j = jacobi_svd(m);
    TruncatedSvd out{Matrix(m.rows(), k), std::vector<double>(j.sigma.begin(), j.sigma.begin() + static_cast<std::ptrdiff_t>(k)),
                     Matrix(m.cols(), k)};
    for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t r = 0; r < m.rows(); ++r) out.u(r, c) = j.left(c, r);
        for (std::size_t r = 0; r < m.cols(); ++r) out.v(r, c) = j.right(c, r);
    }
    return out;
}

std::vector<double> singular_values(const Matrix& m) {
    if (m.empty()) return {};
    return jacobi_svd(m).sigma;
}

Matrix hadamard(std::size_t n) {
    if (!is_power_of_two(n)) {
        throw ValidationError("hadamard: dimension " + std::to_string(n) + " unsupported, power-of-two required");
    }
    Matrix h(n, n);
    h(0, 0) = 1.0;
    for (std::size_t size = 1; size < n; size *= 2) {
        for (std::size_t i = 0; i < size; ++i)
            for (std::size_t j = 0; j < size; ++j) {
                const double v = h(i, j);
                h(i, j + size) = v;
                h(i + size, j) = v;
                h(i + size, j + size) = -v;
            }
    }
    return h * (1.0 / std::sqrt(static_cast<double>(n)));
}

Matrix random_orthogonal(std::size_t n, Seed seed) {
    if (n == 0) throw ValidationError("random_orthogonal: dimension must be at least 1");
    Rng rng(seed);
    Matrix a = rng.gaussian(n, n);

    // Householder QR; reflectors kept for forming Q explicitly.
    std::vector<std::vector<double>> reflectors(n);
    std::vector<double> r_diag(n);
    for (std::size_t k = 0; k < n; ++k) {
        std::vector<double> x(n - k);
        for (std::size_t i = k; i < n; ++i) x[i - k] = a(i, k);
        const double norm = std::sqrt(dot(x, x));
        const double alpha = x[0] >= 0.0 ? -norm : norm;
        r_diag[k] = alpha;
        x[0] -= alpha;
        const double vnorm = std::sqrt(dot(x, x));
        if (vnorm > 0.0)
            for (double& e : x) e /= vnorm;
        for (std::size_t j = k; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = k; i < n; ++i) s += x[i - k] * a(i, j);
            for (std::size_t i = k; i < n; ++i) a(i, j) -= 2.0 * s * x[i - k];
        }
        reflectors[k] = std::move(x);
    }
    Matrix q = Matrix::identity(n);
    for (std::size_t k = n; k-- > 0;) {
        const auto& v = reflectors[k];
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = k; i < n; ++i) s += v[i - k] * q(i, j);
            for (std::size_t i = k; i < n; ++i) q(i, j) -= 2.0 * s * v[i - k];
        }
    }
    // Sign-correct so that R has a positive diagonal.
    for (std::size_t j = 0; j < n; ++j) {
        if (r_diag[j] < 0.0)
            for (std::size_t i = 0; i < n; ++i) q(i, j) = -q(i, j);
    }
    return q;
}

Matrix cayley(const Matrix& a) {
    if (!a.is_square()) throw ValidationError("cayley: matrix must be square, got " + shape(a));
    const std::size_t n = a.rows();
    const double tol = 1e-10 * std::max(1.0, max_abs(a));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j)
            if (std::abs(a(i, j) + a(j, i)) > tol) throw ValidationError("cayley: matrix is not skew-symmetric");
    const Matrix id = Matrix::identity(n);
    return solve(id - a, id + a);
}

double orthogonality_error(const Matrix& o) {
    Matrix g = matmul_tn(o, o);
    for (std::size_t i = 0; i < g.rows(); ++i) g(i, i) -= 1.0;
    return frobenius_norm(g);
}

}  // namespace ptqlab::linalg
