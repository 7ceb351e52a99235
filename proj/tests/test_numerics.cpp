#include <doctest.h>

#include <cmath>

#include "unierase/numerics.hpp"

using namespace unierase;

namespace {

Matrix mat2(double a, double b, double c, double d) {
    Matrix m(2, 2);
    m(0, 0) = a;
    m(0, 1) = b;
    m(1, 0) = c;
    m(1, 1) = d;
    return m;
}

double rel_err(const Matrix& got, const Matrix& want) {
    double denom = frobenius_norm(want);
    return frobenius_norm(sub(got, want)) / (denom > 0 ? denom : 1.0);
}

}  // namespace

TEST_SUITE("numerics") {

TEST_CASE("matmul hand fixture") {
    // [[1,2],[3,4]]·[[5,6],[7,8]] = [[19,22],[43,50]]
    Matrix c = matmul(mat2(1, 2, 3, 4), mat2(5, 6, 7, 8));
    CHECK(c(0, 0) == doctest::Approx(19).epsilon(1e-12));
    CHECK(c(0, 1) == doctest::Approx(22).epsilon(1e-12));
    CHECK(c(1, 0) == doctest::Approx(43).epsilon(1e-12));
    CHECK(c(1, 1) == doctest::Approx(50).epsilon(1e-12));
}

TEST_CASE("matmul_nt equals matmul with explicit transpose") {
    Rng rng(3);
    Matrix a = Matrix::randn(3, 4, rng);
    Matrix b = Matrix::randn(5, 4, rng);
    CHECK(rel_err(matmul_nt(a, b), matmul(a, b.transpose())) < 1e-14);
}

TEST_CASE("matmul_tn equals matmul with explicit transpose") {
    Rng rng(4);
    Matrix a = Matrix::randn(4, 3, rng);
    Matrix b = Matrix::randn(4, 5, rng);
    CHECK(rel_err(matmul_tn(a, b), matmul(a.transpose(), b)) < 1e-14);
}

TEST_CASE("elementwise helpers") {
    Matrix a = mat2(1, -2, 3, -4), b = mat2(2, 2, 2, 2);
    CHECK(add(a, b)(1, 1) == -2);
    CHECK(sub(a, b)(0, 0) == -1);
    CHECK(scale(a, -1)(0, 1) == 2);
    CHECK(hadamard(a, b)(1, 0) == 6);
    CHECK(frobenius_norm(b) == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(max_abs(a) == 4);
    CHECK(mean_abs(a) == doctest::Approx(2.5).epsilon(1e-12));
    CHECK(dot_all(a, b) == doctest::Approx(2 - 4 + 6 - 8).epsilon(1e-12));
    CHECK(trace(a) == -3);
}

TEST_CASE("identity and zeros") {
    Matrix i = Matrix::identity(3);
    CHECK(i(0, 0) == 1);
    CHECK(i(0, 1) == 0);
    CHECK(trace(i) == 3);
    CHECK(frobenius_norm(Matrix::zeros(4, 5)) == 0);
}

TEST_CASE("randn determinism and distribution sanity") {
    Rng r1(42), r2(42);
    Matrix a = Matrix::randn(8, 8, r1);
    Matrix b = Matrix::randn(8, 8, r2);
    CHECK(rel_err(a, b) == 0.0);
    Rng r3(43);
    Matrix c = Matrix::randn(8, 8, r3);
    CHECK(frobenius_norm(sub(a, c)) > 0.1);
    Rng r4(1);
    Matrix d = Matrix::randn(50, 50, r4, 0.02);
    CHECK(max_abs(d) < 0.2);  // 0.02 stdev: |z| < 10 sigma
    CHECK(mean_abs(d) > 0.005);
}

TEST_CASE("matrix_hash detects single-entry changes") {
    Rng rng(5);
    Matrix a = Matrix::randn(4, 4, rng);
    Matrix b = a;
    CHECK(matrix_hash(a) == matrix_hash(b));
    b(2, 3) += 1e-9;
    CHECK(matrix_hash(a) != matrix_hash(b));
}

TEST_CASE("solve_regularized identity system") {
    // A = I: X·I = B → X = B, any ridge shrinks toward B/(1+λ).
    Rng rng(6);
    Matrix b = Matrix::randn(3, 4, rng);
    Matrix x = solve_regularized(Matrix::identity(4), b, 0.0);
    CHECK(rel_err(x, b) < 1e-12);
    Matrix xr = solve_regularized(Matrix::identity(4), b, 1.0);
    CHECK(rel_err(xr, scale(b, 0.5)) < 1e-12);
}

TEST_CASE("solve_regularized hand 2x2") {
    // A = [[2,0],[0,4]], B = [[2,8]] → X = [[1,2]]
    Matrix a = mat2(2, 0, 0, 4);
    Matrix b(1, 2);
    b(0, 0) = 2;
    b(0, 1) = 8;
    Matrix x = solve_regularized(a, b, 0.0);
    CHECK(x(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(x(0, 1) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("solve_regularized residual property on random SPD systems") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix k = Matrix::randn(6, 10, rng);
        Matrix a = matmul_nt(k, k);  // SPD with prob 1
        Matrix want = Matrix::randn(3, 6, rng);
        Matrix b = matmul(want, a);
        Matrix x = solve_regularized(a, b, 0.0);
        CHECK(rel_err(x, want) < 1e-9);
    }
}

TEST_CASE("solve_regularized singular rejection and ridge rescue") {
    Matrix a = mat2(1, 0, 0, 0);  // rank 1
    Matrix b(1, 2);
    b(0, 0) = 1;
    b(0, 1) = 1;
    CHECK_THROWS_AS(solve_regularized(a, b, 0.0), SingularSystemError);
    Matrix x = solve_regularized(a, b, 1e-3);
    CHECK(x.all_finite());
    try {
        solve_regularized(a, b, 0.0);
        CHECK(false);
    } catch (const SingularSystemError& e) {
        CHECK(e.smallest_eigenvalue == doctest::Approx(0.0).epsilon(1e-12));
    }
}

TEST_CASE("default_ridge is trace-scaled") {
    Matrix a = mat2(2, 0, 0, 4);
    CHECK(default_ridge(a) == doctest::Approx(1e-6 * 6.0 / 2.0).epsilon(1e-12));
}

TEST_CASE("null_space_projector axis fixture") {
    // K = e1 column → P projects onto span{e2}: diag(0,1).
    Matrix k(2, 1);
    k(0, 0) = 1;
    k(1, 0) = 0;
    Matrix p = null_space_projector(k);
    CHECK(std::abs(p(0, 0)) < 1e-12);
    CHECK(std::abs(p(0, 1)) < 1e-12);
    CHECK(std::abs(p(1, 0)) < 1e-12);
    CHECK(p(1, 1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("null_space_projector properties on random keys") {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix k = Matrix::randn(6, 3, rng);
        Matrix p = null_space_projector(k);
        // annihilates K
        CHECK(frobenius_norm(matmul(p, k)) < 1e-8 * frobenius_norm(k));
        // idempotent and symmetric
        CHECK(rel_err(matmul(p, p), p) < 1e-10);
        CHECK(rel_err(p.transpose(), p) < 1e-12);
        // rank deficiency: trace = dim − rank(K) = 3 for generic K
        CHECK(trace(p) == doctest::Approx(3.0).epsilon(1e-8));
    }
}

TEST_CASE("null_space_projector full-rank keys leave nothing") {
    Rng rng(9);
    Matrix k = Matrix::randn(4, 8, rng);  // 8 generic columns span R^4
    Matrix p = null_space_projector(k);
    CHECK(frobenius_norm(p) < 1e-8);
}

TEST_CASE("check_finite rejects NaN") {
    Matrix a = mat2(1, 2, 3, 4);
    CHECK(a.all_finite());
    a(1, 1) = std::nan("");
    CHECK_FALSE(a.all_finite());
    CHECK_THROWS_AS(a.check_finite("test"), Error);
}

TEST_CASE("shape mismatch rejected") {
    Matrix a(2, 3), b(2, 2);
    CHECK_THROWS_AS(matmul(a, b), InputError);
    CHECK_THROWS_AS(add(a, b), InputError);
}

}  // TEST_SUITE
