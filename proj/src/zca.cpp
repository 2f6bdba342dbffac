#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <lapacke.h>

#include "wrn/common.hpp"

namespace wrn::data {

// Builds the ZCA transform W = U diag((lambda + eps)^{-1/2}) U^T from a
// symmetric covariance matrix (row-major, d x d). LAPACK's dsyevd does the
// eigendecomposition; the assembly exploits W = A A^T with
// A = U diag((lambda + eps)^{-1/4}).
std::vector<double> zca_matrix(std::vector<double> cov, std::size_t d, double eps) {
    std::vector<double> eigenvalues(d);
    // The buffer is symmetric, so passing it column-major is free; rows of
    // the row-major view then hold the eigenvectors.
    const lapack_int info = LAPACKE_dsyevd(
        LAPACK_COL_MAJOR, 'V', 'U', static_cast<lapack_int>(d), cov.data(),
        static_cast<lapack_int>(d), eigenvalues.data());
    if (info != 0)
        throw NumericError("eigendecomposition failed to converge (dsyevd info=" +
                           std::to_string(info) + ")");

    std::vector<double> scale(d);
    for (std::size_t k = 0; k < d; ++k) {
        double lam = eigenvalues[k];
        if (lam < 0.0) lam = 0.0;  // symmetric rounding can go slightly negative
        const double denom = lam + eps;
        if (denom <= 0.0)
            throw NumericError("ZCA: eigenvalue " + std::to_string(eigenvalues[k]) +
                               " with epsilon " + std::to_string(eps) +
                               " gives a non-positive whitening denominator");
        scale[k] = std::pow(denom, -0.25);
    }

    // a[i][k] = U[i][k] * scale[k]; the eigenvector components sit at
    // cov[k*d + i] after the column-major call above.
    std::vector<double> a(d * d);
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t k = 0; k < d; ++k) a[i * d + k] = cov[k * d + i] * scale[k];

    // W = A A^T, symmetric: fill the upper triangle with row dots, mirror.
    std::vector<double> w(d * d);
#pragma omp parallel for schedule(dynamic, 16)
    for (std::size_t i = 0; i < d; ++i) {
        const double* ri = a.data() + i * d;
        for (std::size_t j = i; j < d; ++j) {
            const double* rj = a.data() + j * d;
            double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
            std::size_t k = 0;
            for (; k + 4 <= d; k += 4) {
                s0 += ri[k] * rj[k];
                s1 += ri[k + 1] * rj[k + 1];
                s2 += ri[k + 2] * rj[k + 2];
                s3 += ri[k + 3] * rj[k + 3];
            }
            double acc = (s0 + s1) + (s2 + s3);
            for (; k < d; ++k) acc += ri[k] * rj[k];
            w[i * d + j] = acc;
            w[j * d + i] = acc;
        }
    }
    return w;
}

}  // namespace wrn::data
