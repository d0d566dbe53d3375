#pragma once

// Divergences between latent specs: closed-form Gaussian KL, Monte Carlo KL
// and chi-square estimators, contiguous weight grouping, and the total
// variation / Pinsker lower-bound chain.
//
// Monte Carlo estimators work entirely in log-density space; the only
// exponentiation (chi-square) is guarded at log-ratio 700, just under where
// exp overflows double range.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prunescope/errors.hpp"
#include "prunescope/latent.hpp"
#include "prunescope/numkernel.hpp"

namespace prunescope::divergence {

using latent::LatentSpec;
using numkernel::DenseMatrix;
using numkernel::RngStream;

enum class EstimateMethod { closed_form, monte_carlo };

inline std::string_view estimate_method_name(EstimateMethod m) {
    return m == EstimateMethod::closed_form ? "closed-form" : "monte-carlo";
}

struct DivergenceEstimate {
    double value = 0.0;       // nats
    double std_error = 0.0;   // 0 for closed form
    EstimateMethod method = EstimateMethod::closed_form;
    std::size_t n_samples = 0;  // 0 for closed form
};

namespace detail {

inline void require_equal_dims(const LatentSpec& p, const LatentSpec& q, const char* who) {
    if (p.dim() != q.dim())
        throw DimensionMismatch(std::string(who) + ": dimensions " + std::to_string(p.dim()) +
                                " vs " + std::to_string(q.dim()));
}

// Streaming mean/variance accumulator.
struct Welford {
    std::size_t count = 0;
    double mean = 0.0;
    double m2 = 0.0;

    void add(double x) {
        ++count;
        const double delta = x - mean;
        mean += delta / static_cast<double>(count);
        m2 += delta * (x - mean);
    }

    double std_error() const {
        if (count < 2) return 0.0;
        const double var = m2 / static_cast<double>(count - 1);
        return std::sqrt(var / static_cast<double>(count));
    }
};

}  // namespace detail

// KL(P || Q) for Gaussian latents, standard orientation (the second
// argument's covariance appears inverted):
//   1/2 [ log|S_Q| - log|S_P| + tr(S_Q^{-1} S_P) + (m_P-m_Q)^T S_Q^{-1} (m_P-m_Q) - d ]
inline DivergenceEstimate gaussian_kl(const LatentSpec& p, const LatentSpec& q) {
    if (!p.is_gaussian() || !q.is_gaussian())
        throw InvalidParameter("gaussian_kl: both specs must be Gaussian");
    detail::require_equal_dims(p, q, "gaussian_kl");
    const std::size_t d = p.dim();

    double trace_term = 0.0;
    if (p.diagonal_scale() && q.diagonal_scale()) {
        for (std::size_t i = 0; i < d; ++i) {
            const double r = p.chol()(i, i) / q.chol()(i, i);
            trace_term += r * r;
        }
    } else {
        // tr(S_Q^{-1} S_P) = ||L_Q^{-1} L_P||_F^2, column by column of L_P.
        std::vector<double> col(d);
        for (std::size_t j = 0; j < d; ++j) {
            for (std::size_t i = 0; i < d; ++i) col[i] = p.chol()(i, j);
            numkernel::solve_lower_inplace(q.chol(), col);
            for (double v : col) trace_term += v * v;
        }
    }

    const double quad = q.mahalanobis_sq(p.mean());
    const double value =
        0.5 * (q.log_det() - p.log_det() + trace_term + quad - static_cast<double>(d));
    return {value, 0.0, EstimateMethod::closed_form, 0};
}

inline DivergenceEstimate gaussian_kl(const latent::GaussianSpec& p, const latent::GaussianSpec& q) {
    return gaussian_kl(LatentSpec::gaussian(latent::Family::gaussian_nondiag, p),
                       LatentSpec::gaussian(latent::Family::gaussian_nondiag, q));
}

// Monte Carlo KL(P || Q): mean of log p(x) - log q(x) over x ~ P.
inline DivergenceEstimate mc_kl(const LatentSpec& p, const LatentSpec& q, std::size_t n,
                                RngStream& rng) {
    detail::require_equal_dims(p, q, "mc_kl");
    if (n < 1000) throw InvalidParameter("mc_kl: need at least 1000 samples");

    detail::Welford acc;
    DenseMatrix xs;
    std::vector<double> logps;
    constexpr std::size_t kBatch = 8192;
    for (std::size_t done = 0; done < n; done += xs.rows()) {
        const std::size_t batch = std::min(kBatch, n - done);
        p.sample(batch, rng, xs, &logps);
        for (std::size_t i = 0; i < batch; ++i) {
            const double lq = q.log_density(xs.row(i));
            const double diff = logps[i] - lq;
            if (!std::isfinite(diff))
                throw NonFiniteSample("mc_kl: non-finite log-density difference at sample " +
                                      std::to_string(done + i));
            acc.add(diff);
        }
    }
    return {acc.mean, acc.std_error(), EstimateMethod::monte_carlo, n};
}

// Monte Carlo chi-square divergence: mean of p(x)/q(x) - 1 over x ~ P,
// computed as expm1(log p - log q).
inline DivergenceEstimate mc_chi2(const LatentSpec& p, const LatentSpec& q, std::size_t n,
                                  RngStream& rng) {
    detail::require_equal_dims(p, q, "mc_chi2");
    if (n < 1000) throw InvalidParameter("mc_chi2: need at least 1000 samples");

    detail::Welford acc;
    DenseMatrix xs;
    std::vector<double> logps;
    constexpr std::size_t kBatch = 8192;
    for (std::size_t done = 0; done < n; done += xs.rows()) {
        const std::size_t batch = std::min(kBatch, n - done);
        p.sample(batch, rng, xs, &logps);
        for (std::size_t i = 0; i < batch; ++i) {
            const double lq = q.log_density(xs.row(i));
            const double ratio = logps[i] - lq;
            if (!std::isfinite(ratio))
                throw NonFiniteSample("mc_chi2: non-finite log-ratio at sample " +
                                      std::to_string(done + i));
            if (ratio > 700.0)
                throw OverflowGuard("mc_chi2: log-ratio " + std::to_string(ratio) +
                                    " exceeds 700 (mismatched supports or heavy tails)");
            acc.add(std::expm1(ratio));
        }
    }
    return {acc.mean, acc.std_error(), EstimateMethod::monte_carlo, n};
}

// Contiguous grouping: indices 0..d split into g runs, the first d mod g runs
// one element longer; output is per-run means.
inline std::vector<double> group_average(std::span<const double> w, std::size_t g) {
    const std::size_t d = w.size();
    if (g < 1 || g > d)
        throw InvalidParameter("group_average: need 1 <= groups <= dimension, got groups=" +
                               std::to_string(g) + " for dimension " + std::to_string(d));
    const std::size_t base = d / g;
    const std::size_t rem = d % g;
    std::vector<double> out(g);
    std::size_t pos = 0;
    for (std::size_t j = 0; j < g; ++j) {
        const std::size_t len = base + (j < rem ? 1 : 0);
        double acc = 0.0;
        for (std::size_t k = 0; k < len; ++k) acc += w[pos + k];
        out[j] = acc / static_cast<double>(len);
        pos += len;
    }
    return out;
}

// Mean/trace lower bound on total variation:
//   a^T a / (2 (tr S_P + tr S_Q) + a^T a),  a = mean_P - mean_Q.
inline double tv_lower_bound(std::span<const double> mean_p, std::span<const double> mean_q,
                             const DenseMatrix& cov_p, const DenseMatrix& cov_q) {
    if (mean_p.size() != mean_q.size())
        throw DimensionMismatch("tv_lower_bound: mean dimensions differ");
    if (cov_p.rows() != mean_p.size() || cov_q.rows() != mean_q.size())
        throw DimensionMismatch("tv_lower_bound: covariance dimensions differ from means");
    double ata = 0.0;
    for (std::size_t i = 0; i < mean_p.size(); ++i) {
        const double a = mean_p[i] - mean_q[i];
        ata += a * a;
    }
    if (ata == 0.0) return 0.0;
    return ata / (2.0 * (numkernel::trace(cov_p) + numkernel::trace(cov_q)) + ata);
}

// Pinsker chain: KL >= 2 d_TV^2 >= 2 (tv_lower_bound)^2.
inline double pinsker_kl_lower_bound(std::span<const double> mean_p, std::span<const double> mean_q,
                                     const DenseMatrix& cov_p, const DenseMatrix& cov_q) {
    const double tv = tv_lower_bound(mean_p, mean_q, cov_p, cov_q);
    return 2.0 * tv * tv;
}

}  // namespace prunescope::divergence
