#pragma once

// Dense real matrices (row-major doubles), regularized right-division, and
// null-space projectors. Heavy kernels (gemm, symmetric eigendecomposition)
// are delegated to Eigen inside numerics.cpp; this header stays Eigen-free so
// the rest of the project compiles fast.
//
// Conventions:
//   - matmul(A, B)    = A·B          (shape checks, never broadcasts)
//   - solve_regularized(A, B, λ) = B·(A+λI)⁻¹ for symmetric PSD A
//   - null_space_projector(K, tol): symmetric idempotent P with P·K ≈ 0,
//     projecting onto the orthogonal complement of K's column space.

#include <cstdlib>
#include <initializer_list>
#include <new>
#include <vector>

#include "unierase/common.hpp"

namespace unierase {

// 64-byte aligned storage so vectorized kernels see every buffer identically;
// otherwise reduction order (and thus low bits) would depend on heap addresses
// and re-running the same computation could drift by an ulp.
template <class T>
struct AlignedAlloc {
    using value_type = T;
    static constexpr size_t kAlign = 64;
    AlignedAlloc() = default;
    template <class U>
    AlignedAlloc(const AlignedAlloc<U>&) {}
    T* allocate(size_t n) {
        size_t bytes = (n * sizeof(T) + kAlign - 1) / kAlign * kAlign;
        void* p = std::aligned_alloc(kAlign, bytes);
        if (!p) throw std::bad_alloc();
        return static_cast<T*>(p);
    }
    void deallocate(T* p, size_t) { std::free(p); }
    bool operator==(const AlignedAlloc&) const { return true; }
    bool operator!=(const AlignedAlloc&) const { return false; }
};

class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols) : rows_(rows), cols_(cols),
                                 v_(static_cast<size_t>(rows) * cols, 0.0) {
        if (rows < 0 || cols < 0) throw InputError("Matrix: negative shape");
    }
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix zeros(int r, int c) { return Matrix(r, c); }
    static Matrix identity(int n);
    static Matrix randn(int r, int c, Rng& rng, double stdev = 1.0);
    static Matrix row_vector(const std::vector<double>& v);
    static Matrix col_vector(const std::vector<double>& v);

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    size_t size() const { return v_.size(); }
    bool empty() const { return v_.empty(); }

    double& operator()(int r, int c) { return v_[static_cast<size_t>(r) * cols_ + c]; }
    double operator()(int r, int c) const { return v_[static_cast<size_t>(r) * cols_ + c]; }
    double& at(int r, int c);
    double at(int r, int c) const;

    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }

    Matrix row(int r) const;                    // 1×cols copy
    Matrix col(int c) const;                    // rows×1 copy
    void set_row(int r, const Matrix& v);       // v is 1×cols
    void set_col(int c, const Matrix& v);       // v is rows×1
    Matrix transpose() const;

    Matrix& operator+=(const Matrix& o);
    Matrix& operator-=(const Matrix& o);
    Matrix& operator*=(double s);

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
    bool all_finite() const;
    void check_finite(const char* where) const;  // throws Error on NaN/Inf

private:
    int rows_ = 0, cols_ = 0;
    std::vector<double, AlignedAlloc<double>> v_;
};

// Elementwise / products ----------------------------------------------------
Matrix matmul(const Matrix& a, const Matrix& b);     // A·B
Matrix matmul_nt(const Matrix& a, const Matrix& b);  // A·Bᵀ
Matrix matmul_tn(const Matrix& a, const Matrix& b);  // Aᵀ·B
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
Matrix hadamard(const Matrix& a, const Matrix& b);

double frobenius_norm(const Matrix& a);
double max_abs(const Matrix& a);
double mean_abs(const Matrix& a);
double dot_all(const Matrix& a, const Matrix& b);  // <A,B> summed over entries
double trace(const Matrix& a);

// Fingerprint of shape + raw entry bytes; used for frozen-weight checks.
uint64_t matrix_hash(const Matrix& a);

// Solvers ---------------------------------------------------------------------

// X = B·(A+λI)⁻¹ for symmetric PSD A (B: m×n, A: n×n). With λ=0 the system
// must be numerically invertible (smallest eigenvalue above rank tolerance),
// else SingularSystemError naming that eigenvalue magnitude.
Matrix solve_regularized(const Matrix& A, const Matrix& B, double lambda);

// Ridge value used when a caller wants Eq.-14-style solves to survive
// rank-deficient systems: 1e-6·trace(A)/dim.
double default_ridge(const Matrix& A);

// Symmetric idempotent projector onto the orthogonal complement of K's column
// space, from the spectrum of K·Kᵀ. Directions with singular value
// ≤ tol·(largest singular value) count as null. Full-rank K gives P = 0.
Matrix null_space_projector(const Matrix& K, double tol = 1e-6);

}  // namespace unierase
