#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

namespace ptqlab {

/// Dense row-major matrix of doubles.
///
/// Every public constructor that accepts caller data rejects NaN/Inf, so a
/// Matrix reaching an algorithm is known to be finite. Algorithms that build
/// results internally use the zero-initialized constructor and fill in place.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(std::size_t n);
    static Matrix diagonal(std::span<const double> d);
    static Matrix row_vector(std::span<const double> v);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }
    bool is_square() const noexcept { return rows_ == cols_; }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }
    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    std::vector<double> column(std::size_t c) const;
    Matrix transposed() const;
    // Rows [begin, end).
    Matrix row_slice(std::size_t begin, std::size_t end) const;

    Matrix& operator+=(const Matrix& other);
    Matrix& operator-=(const Matrix& other);
    Matrix& operator*=(double s) noexcept;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);

double frobenius_norm(const Matrix& m);
double squared_frobenius(const Matrix& m);
// ||a - b||_F / ||b||_F, or the absolute norm when b is zero.
double relative_frobenius_error(const Matrix& a, const Matrix& b);
double max_abs(const Matrix& m);

/// Seed for every randomized operation. Identical seed and parameters give
/// bit-identical output.
struct Seed {
    std::uint64_t value = 0;
};

/// Thin wrapper over mt19937_64 so call sites share one sampling convention.
class Rng {
public:
    explicit Rng(Seed seed) : engine_(seed.value) {}

    double normal() { return normal_(engine_); }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    std::uint64_t next() { return engine_(); }
    std::mt19937_64& engine() noexcept { return engine_; }

    Matrix gaussian(std::size_t rows, std::size_t cols, double stddev = 1.0);

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace ptqlab
