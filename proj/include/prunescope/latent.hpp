#pragma once

// Latent spaces over weight vectors: multivariate Gaussian and Student-t
// distributions whose mean is a supplied weight vector. Log-densities and
// sampling paths share one cached Cholesky factor; purely diagonal scale
// matrices take an O(d) fast path that is arithmetically identical to the
// dense path (forward substitution with zero off-diagonals degenerates to
// elementwise division).

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "prunescope/errors.hpp"
#include "prunescope/numkernel.hpp"

namespace prunescope::latent {

using numkernel::DenseMatrix;
using numkernel::RngStream;

enum class Family { gaussian_diag, gaussian_nondiag, student };

inline std::string_view family_name(Family f) {
    switch (f) {
        case Family::gaussian_diag: return "gaussian-diag";
        case Family::gaussian_nondiag: return "gaussian-nondiag";
        case Family::student: return "student";
    }
    return "?";
}

inline Family family_from_name(std::string_view name) {
    if (name == "gaussian-diag") return Family::gaussian_diag;
    if (name == "gaussian-nondiag") return Family::gaussian_nondiag;
    if (name == "student") return Family::student;
    throw ParseError("unknown latent family '" + std::string(name) + "'");
}

struct GaussianSpec {
    std::vector<double> mean;
    DenseMatrix cov;
};

struct StudentSpec {
    std::vector<double> mean;
    DenseMatrix scale;  // shape matrix of the t density; covariance = dof/(dof-2) * scale
    double dof = 4.0;
};

// sigma^2 * I, exactly diagonal.
inline DenseMatrix diag_cov(std::size_t d, double sigma) {
    if (d < 1) throw InvalidParameter("diag_cov: dimension must be at least 1");
    if (!(sigma > 0.0)) throw InvalidParameter("diag_cov: sigma must be positive");
    DenseMatrix m(d, d);
    for (std::size_t i = 0; i < d; ++i) m(i, i) = sigma * sigma;
    return m;
}

// beta * V * Lambda * V^T where V diagonalizes R + R^T for a seeded random R
// with i.i.d. uniform(-1,1) entries and Lambda has i.i.d. uniform eigenvalues
// in [eigen_low, eigen_high]. Draw order is frozen: d*d uniforms for R in
// row-major order, then d eigenvalue uniforms.
inline DenseMatrix random_nondiag_cov(std::size_t d, double beta, double eigen_low,
                                      double eigen_high, RngStream& rng) {
    if (d < 1) throw InvalidParameter("random_nondiag_cov: dimension must be at least 1");
    if (!(beta > 0.0)) throw InvalidParameter("random_nondiag_cov: beta must be positive");
    if (!(eigen_low > 0.0) || !(eigen_low <= eigen_high))
        throw InvalidParameter("random_nondiag_cov: need 0 < eigen_low <= eigen_high");

    DenseMatrix r(d, d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) r(i, j) = 2.0 * rng.next_double() - 1.0;
    DenseMatrix s(d, d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) s(i, j) = r(i, j) + r(j, i);

    const numkernel::SymEigen eig = numkernel::sym_eigen(s);
    std::vector<double> lambda(d);
    for (std::size_t i = 0; i < d; ++i)
        lambda[i] = eigen_low + (eigen_high - eigen_low) * rng.next_double();

    DenseMatrix out(d, d);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = i; j < d; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < d; ++k)
                acc += lambda[k] * eig.vectors(i, k) * eig.vectors(j, k);
            out(i, j) = out(j, i) = beta * acc;
        }
    }
    return out;
}

// Immutable distribution spec: family label, mean, scale matrix, cached
// Cholesky factor / log-determinant / normalization constant.
class LatentSpec {
public:
    static LatentSpec gaussian(Family family, GaussianSpec spec) {
        if (family == Family::student)
            throw InvalidParameter("LatentSpec::gaussian: family must be a Gaussian label");
        return LatentSpec(family, std::move(spec.mean), std::move(spec.cov), 0.0);
    }

    static LatentSpec student(StudentSpec spec) {
        if (!(spec.dof > 2.0))
            throw InvalidParameter("LatentSpec::student: dof must exceed 2");
        return LatentSpec(Family::student, std::move(spec.mean), std::move(spec.scale), spec.dof);
    }

    Family family() const { return family_; }
    bool is_gaussian() const { return family_ != Family::student; }
    std::size_t dim() const { return mean_.size(); }
    const std::vector<double>& mean() const { return mean_; }
    const DenseMatrix& scale() const { return scale_; }
    double dof() const { return dof_; }
    double log_det() const { return log_det_; }
    const DenseMatrix& chol() const { return chol_; }
    bool diagonal_scale() const { return diagonal_; }

    DenseMatrix covariance() const {
        if (is_gaussian()) return scale_;
        DenseMatrix c = scale_;
        const double f = dof_ / (dof_ - 2.0);
        for (auto& v : c.data()) v *= f;
        return c;
    }

    double covariance_trace() const {
        const double t = numkernel::trace(scale_);
        return is_gaussian() ? t : dof_ / (dof_ - 2.0) * t;
    }

    // (x - mean)^T Scale^{-1} (x - mean) through the cached factor.
    double mahalanobis_sq(std::span<const double> x) const {
        if (x.size() != dim())
            throw DimensionMismatch("LatentSpec: point dimension " + std::to_string(x.size()) +
                                    " vs spec dimension " + std::to_string(dim()));
        const std::size_t d = dim();
        double acc = 0.0;
        if (diagonal_) {
            for (std::size_t i = 0; i < d; ++i) {
                const double y = (x[i] - mean_[i]) / chol_(i, i);
                acc += y * y;
            }
            return acc;
        }
        std::vector<double> y(d);
        for (std::size_t i = 0; i < d; ++i) y[i] = x[i] - mean_[i];
        numkernel::solve_lower_inplace(chol_, y);
        for (double v : y) acc += v * v;
        return acc;
    }

    double log_density(std::span<const double> x) const {
        const double q = mahalanobis_sq(x);
        if (is_gaussian()) return log_norm_ - 0.5 * q;
        return log_norm_ - 0.5 * (dof_ + static_cast<double>(dim())) * std::log1p(q / dof_);
    }

    // Draws n rows into out (resized to n x d). Per-row draw order is frozen:
    // d standard normals, then (Student only) one chi-square(dof). When
    // log_densities is non-null it receives log p(x_i), computed from the
    // sampler's own z and g (equal to log_density(row) up to rounding).
    void sample(std::size_t n, RngStream& rng, DenseMatrix& out,
                std::vector<double>* log_densities = nullptr) const {
        if (n < 1) throw InvalidParameter("LatentSpec::sample: n must be at least 1");
        const std::size_t d = dim();
        out = DenseMatrix(n, d);
        if (log_densities) log_densities->resize(n);
        std::vector<double> z(d);
        for (std::size_t i = 0; i < n; ++i) {
            double zz = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                z[j] = rng.next_normal();
                zz += z[j] * z[j];
            }
            auto row = out.row(i);
            if (is_gaussian()) {
                if (diagonal_) {
                    for (std::size_t j = 0; j < d; ++j) row[j] = mean_[j] + chol_(j, j) * z[j];
                } else {
                    for (std::size_t j = 0; j < d; ++j) {
                        double acc = mean_[j];
                        for (std::size_t k = 0; k <= j; ++k) acc += chol_(j, k) * z[k];
                        row[j] = acc;
                    }
                }
                if (log_densities) (*log_densities)[i] = log_norm_ - 0.5 * zz;
            } else {
                const double g = rng.next_chi_square(dof_);
                const double t = std::sqrt(dof_ / g);
                if (diagonal_) {
                    for (std::size_t j = 0; j < d; ++j)
                        row[j] = mean_[j] + t * (chol_(j, j) * z[j]);
                } else {
                    for (std::size_t j = 0; j < d; ++j) {
                        double acc = 0.0;
                        for (std::size_t k = 0; k <= j; ++k) acc += chol_(j, k) * z[k];
                        row[j] = mean_[j] + t * acc;
                    }
                }
                if (log_densities)
                    (*log_densities)[i] = log_norm_ - 0.5 * (dof_ + static_cast<double>(d)) *
                                                          std::log1p(zz / g);
            }
        }
    }

    DenseMatrix sample(std::size_t n, RngStream& rng) const {
        DenseMatrix out;
        sample(n, rng, out);
        return out;
    }

private:
    LatentSpec(Family family, std::vector<double> mean, DenseMatrix scale, double dof)
        : family_(family), mean_(std::move(mean)), scale_(std::move(scale)), dof_(dof) {
        if (mean_.empty()) throw InvalidParameter("LatentSpec: dimension must be at least 1");
        if (scale_.rows() != mean_.size() || scale_.cols() != mean_.size())
            throw DimensionMismatch("LatentSpec: mean dimension " + std::to_string(mean_.size()) +
                                    " vs scale " + std::to_string(scale_.rows()) + "x" +
                                    std::to_string(scale_.cols()));
        diagonal_ = true;
        for (std::size_t i = 0; i < scale_.rows() && diagonal_; ++i)
            for (std::size_t j = 0; j < scale_.cols(); ++j)
                if (i != j && scale_(i, j) != 0.0) {
                    diagonal_ = false;
                    break;
                }
        if (family_ == Family::gaussian_diag && !diagonal_)
            throw InvalidParameter("LatentSpec: gaussian-diag label requires exactly zero "
                                   "off-diagonal covariance entries");
        chol_ = numkernel::cholesky(scale_);  // PD gate
        log_det_ = 0.0;
        for (std::size_t i = 0; i < chol_.rows(); ++i) log_det_ += std::log(chol_(i, i));
        log_det_ *= 2.0;

        const double d = static_cast<double>(mean_.size());
        if (family_ == Family::student) {
            log_norm_ = std::lgamma(0.5 * (dof_ + d)) - std::lgamma(0.5 * dof_) -
                        0.5 * d * std::log(dof_ * std::numbers::pi) - 0.5 * log_det_;
        } else {
            log_norm_ = -0.5 * (d * std::log(2.0 * std::numbers::pi) + log_det_);
        }
    }

    Family family_;
    std::vector<double> mean_;
    DenseMatrix scale_;
    double dof_ = 0.0;
    DenseMatrix chol_;
    double log_det_ = 0.0;
    double log_norm_ = 0.0;
    bool diagonal_ = false;
};

}  // namespace prunescope::latent
