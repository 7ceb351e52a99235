#include "unierase/numerics.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>

namespace unierase {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

static ECMap emap(const Matrix& m) { return ECMap(m.data(), m.rows(), m.cols()); }
static EMap emap(Matrix& m) { return EMap(m.data(), m.rows(), m.cols()); }

std::string Fnv1a::hex() const { return to_hex(hash_); }

std::string to_hex(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = static_cast<int>(rows.size());
    cols_ = rows_ ? static_cast<int>(rows.begin()->size()) : 0;
    v_.reserve(static_cast<size_t>(rows_) * cols_);
    for (const auto& r : rows) {
        if (static_cast<int>(r.size()) != cols_)
            throw InputError("Matrix: ragged initializer");
        v_.insert(v_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::randn(int r, int c, Rng& rng, double stdev) {
    Matrix m(r, c);
    for (auto& x : m.v_) x = rng.next_gauss() * stdev;
    return m;
}

Matrix Matrix::row_vector(const std::vector<double>& v) {
    Matrix m(1, static_cast<int>(v.size()));
    m.v_.assign(v.begin(), v.end());
    return m;
}

Matrix Matrix::col_vector(const std::vector<double>& v) {
    Matrix m(static_cast<int>(v.size()), 1);
    m.v_.assign(v.begin(), v.end());
    return m;
}

double& Matrix::at(int r, int c) {
    if (r < 0 || r >= rows_ || c < 0 || c >= cols_)
        throw InputError("Matrix::at: index out of range");
    return (*this)(r, c);
}

double Matrix::at(int r, int c) const {
    if (r < 0 || r >= rows_ || c < 0 || c >= cols_)
        throw InputError("Matrix::at: index out of range");
    return (*this)(r, c);
}

Matrix Matrix::row(int r) const {
    if (r < 0 || r >= rows_) throw InputError("Matrix::row: out of range");
    Matrix out(1, cols_);
    for (int c = 0; c < cols_; ++c) out(0, c) = (*this)(r, c);
    return out;
}

Matrix Matrix::col(int c) const {
    if (c < 0 || c >= cols_) throw InputError("Matrix::col: out of range");
    Matrix out(rows_, 1);
    for (int r = 0; r < rows_; ++r) out(r, 0) = (*this)(r, c);
    return out;
}

void Matrix::set_row(int r, const Matrix& v) {
    if (r < 0 || r >= rows_ || v.rows() != 1 || v.cols() != cols_)
        throw InputError("Matrix::set_row: shape mismatch");
    for (int c = 0; c < cols_; ++c) (*this)(r, c) = v(0, c);
}

void Matrix::set_col(int c, const Matrix& v) {
    if (c < 0 || c >= cols_ || v.cols() != 1 || v.rows() != rows_)
        throw InputError("Matrix::set_col: shape mismatch");
    for (int r = 0; r < rows_; ++r) (*this)(r, c) = v(r, 0);
}

Matrix Matrix::transpose() const {
    Matrix out(cols_, rows_);
    emap(out) = emap(*this).transpose();
    return out;
}

Matrix& Matrix::operator+=(const Matrix& o) {
    if (!same_shape(o)) throw InputError("Matrix+=: shape mismatch");
    for (size_t i = 0; i < v_.size(); ++i) v_[i] += o.v_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& o) {
    if (!same_shape(o)) throw InputError("Matrix-=: shape mismatch");
    for (size_t i = 0; i < v_.size(); ++i) v_[i] -= o.v_[i];
    return *this;
}

Matrix& Matrix::operator*=(double s) {
    for (auto& x : v_) x *= s;
    return *this;
}

bool Matrix::all_finite() const {
    for (double x : v_)
        if (!std::isfinite(x)) return false;
    return true;
}

void Matrix::check_finite(const char* where) const {
    if (!all_finite()) throw Error(std::string(where) + ": non-finite entries");
}

static void check_mm(const Matrix& a, const Matrix& b, int ak, int bk, const char* op) {
    int acols = ak, brows = bk;
    if (acols != brows)
        throw InputError(std::string(op) + ": inner dimensions disagree (" +
                         std::to_string(acols) + " vs " + std::to_string(brows) + ")");
    (void)a; (void)b;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    check_mm(a, b, a.cols(), b.rows(), "matmul");
    Matrix out(a.rows(), b.cols());
    emap(out).noalias() = emap(a) * emap(b);
    out.check_finite("matmul");
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    check_mm(a, b, a.cols(), b.cols(), "matmul_nt");
    Matrix out(a.rows(), b.rows());
    emap(out).noalias() = emap(a) * emap(b).transpose();
    out.check_finite("matmul_nt");
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    check_mm(a, b, a.rows(), b.rows(), "matmul_tn");
    Matrix out(a.cols(), b.cols());
    emap(out).noalias() = emap(a).transpose() * emap(b);
    out.check_finite("matmul_tn");
    return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
    Matrix out = a;
    out += b;
    return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
    Matrix out = a;
    out -= b;
    return out;
}

Matrix scale(const Matrix& a, double s) {
    Matrix out = a;
    out *= s;
    out.check_finite("scale");
    return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw InputError("hadamard: shape mismatch");
    Matrix out = a;
    for (int r = 0; r < a.rows(); ++r)
        for (int c = 0; c < a.cols(); ++c) out(r, c) *= b(r, c);
    return out;
}

double frobenius_norm(const Matrix& a) { return emap(a).norm(); }

double max_abs(const Matrix& a) {
    double m = 0.0;
    for (int r = 0; r < a.rows(); ++r)
        for (int c = 0; c < a.cols(); ++c) m = std::max(m, std::fabs(a(r, c)));
    return m;
}

double mean_abs(const Matrix& a) {
    if (a.empty()) return 0.0;
    double s = 0.0;
    for (int r = 0; r < a.rows(); ++r)
        for (int c = 0; c < a.cols(); ++c) s += std::fabs(a(r, c));
    return s / static_cast<double>(a.size());
}

double dot_all(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw InputError("dot_all: shape mismatch");
    return emap(a).cwiseProduct(emap(b)).sum();
}

double trace(const Matrix& a) {
    if (a.rows() != a.cols()) throw InputError("trace: matrix not square");
    double t = 0.0;
    for (int i = 0; i < a.rows(); ++i) t += a(i, i);
    return t;
}

uint64_t matrix_hash(const Matrix& a) {
    Fnv1a h;
    h.update(static_cast<uint64_t>(a.rows()));
    h.update(static_cast<uint64_t>(a.cols()));
    h.update(a.data(), a.size() * sizeof(double));
    return h.digest();
}

double default_ridge(const Matrix& A) {
    if (A.rows() == 0) return 0.0;
    return 1e-6 * trace(A) / static_cast<double>(A.rows());
}

Matrix solve_regularized(const Matrix& A, const Matrix& B, double lambda) {
    if (A.rows() != A.cols()) throw InputError("solve_regularized: A not square");
    if (B.cols() != A.rows()) throw InputError("solve_regularized: B cols != A dim");
    if (lambda < 0) throw InputError("solve_regularized: negative lambda");
    const int n = A.rows();

    // Symmetrize defensively; callers pass Gram matrices that are symmetric up
    // to roundoff.
    EMat As = 0.5 * (emap(A) + emap(A).transpose());
    for (int i = 0; i < n; ++i) As(i, i) += lambda;

    Eigen::SelfAdjointEigenSolver<EMat> es(As);
    if (es.info() != Eigen::Success)
        throw Error("solve_regularized: eigendecomposition failed");
    const auto& evals = es.eigenvalues();
    double emax = 0.0;
    for (int i = 0; i < n; ++i) emax = std::max(emax, std::fabs(evals[i]));
    double emin = n ? std::fabs(evals[0]) : 0.0;
    for (int i = 0; i < n; ++i) emin = std::min(emin, std::fabs(evals[i]));
    // Numerical invertibility: smallest eigenvalue must clear a scale-relative
    // floor. Gram matrices are PSD so eigenvalues are real and ≥ -roundoff.
    double floor = std::max(emax, 1.0) * 1e-12 * n;
    if (emin <= floor)
        throw SingularSystemError(
            "solve_regularized: system singular (smallest eigenvalue magnitude " +
                std::to_string(emin) + "); pass lambda > 0",
            emin);

    // X = B·(A+λI)⁻¹ via the spectral inverse — A is symmetric so this is
    // exact and keeps the inverse symmetric.
    EMat inv = es.eigenvectors() * evals.cwiseInverse().asDiagonal() *
               es.eigenvectors().transpose();
    Matrix out(B.rows(), n);
    emap(out).noalias() = emap(B) * inv;
    out.check_finite("solve_regularized");
    return out;
}

Matrix null_space_projector(const Matrix& K, double tol) {
    if (K.cols() < 1) throw InputError("null_space_projector: K has no columns");
    if (tol < 0) throw InputError("null_space_projector: negative tol");
    const int d = K.rows();

    EMat gram = emap(K) * emap(K).transpose();
    gram = 0.5 * (gram + gram.transpose().eval());
    Eigen::SelfAdjointEigenSolver<EMat> es(gram);
    if (es.info() != Eigen::Success)
        throw Error("null_space_projector: eigendecomposition failed");

    // Singular values of K are sqrt of KKᵀ eigenvalues (clamped at 0).
    const auto& evals = es.eigenvalues();
    double smax = 0.0;
    for (int i = 0; i < d; ++i) smax = std::max(smax, std::sqrt(std::max(0.0, evals[i])));
    double cut = tol * smax;

    // P = I − Σ_{kept} u uᵀ over directions with σ above the cut.
    Matrix P = Matrix::identity(d);
    EMap pm = emap(P);
    for (int i = 0; i < d; ++i) {
        double sv = std::sqrt(std::max(0.0, evals[i]));
        if (sv > cut) {
            Eigen::VectorXd u = es.eigenvectors().col(i);
            pm.noalias() -= u * u.transpose();
        }
    }
    P.check_finite("null_space_projector");
    return P;
}

}  // namespace unierase
