#pragma once

// Pattern metrics over weight vectors (AP2, AP3), the performance-difference
// metric, closed-form bound evaluators, layer-wise epsilon propagation, and
// the fine-tuning trajectory analysis.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "prunescope/divergence.hpp"
#include "prunescope/errors.hpp"
#include "prunescope/latent.hpp"
#include "prunescope/micronet.hpp"
#include "prunescope/pruning.hpp"

namespace prunescope::patterns {

using divergence::DivergenceEstimate;
using latent::LatentSpec;
using micronet::EvalResult;
using numkernel::DenseMatrix;
using numkernel::RngStream;
using pruning::WeightVector;

// How a weight vector is projected into a latent distribution. Exactly the
// fields its family consumes are honored: sigma for gaussian-diag; cov for
// gaussian-nondiag (required) and student (optional, defaults to identity
// scale); dof/groups/mc_samples/seed for student.
struct LatentConfig {
    latent::Family family = latent::Family::gaussian_diag;
    double sigma = 1.0;
    std::optional<DenseMatrix> cov;
    double dof = 4.0;
    std::size_t groups = 100;
    std::size_t mc_samples = 600000;
    std::uint64_t seed = 0;
};

struct LatentPair {
    LatentSpec p;
    LatentSpec q;
};

// Squared L2 distance under the identity projection.
inline double ap2(const WeightVector& w, const WeightVector& w_tilde) {
    if (w.dim() != w_tilde.dim())
        throw DimensionMismatch("ap2: dimensions " + std::to_string(w.dim()) + " vs " +
                                std::to_string(w_tilde.dim()));
    double acc = 0.0;
    for (std::size_t i = 0; i < w.dim(); ++i) {
        const double d = w.values[i] - w_tilde.values[i];
        acc += d * d;
    }
    return acc;
}

// Builds the latent pair (P from w, Q from w_tilde) sharing one covariance.
// The student family first group-averages both means (clamping the group
// count to the dimension, where grouping degenerates to the identity).
inline LatentPair build_latent_pair(const WeightVector& w, const WeightVector& w_tilde,
                                    const LatentConfig& cfg) {
    if (w.dim() != w_tilde.dim())
        throw DimensionMismatch("build_latent_pair: dimensions " + std::to_string(w.dim()) +
                                " vs " + std::to_string(w_tilde.dim()));
    if (w.dim() == 0) throw InvalidParameter("build_latent_pair: empty weight vectors");

    if (cfg.family == latent::Family::student) {
        if (cfg.groups < 1) throw InvalidParameter("build_latent_pair: groups must be positive");
        const std::size_t g = std::min(cfg.groups, w.dim());
        std::vector<double> mp = divergence::group_average(w.values, g);
        std::vector<double> mq = divergence::group_average(w_tilde.values, g);
        DenseMatrix scale = cfg.cov ? *cfg.cov : latent::diag_cov(g, 1.0);
        if (scale.rows() != g)
            throw DimensionMismatch("build_latent_pair: shared scale is " +
                                    std::to_string(scale.rows()) + "x" +
                                    std::to_string(scale.cols()) + ", grouped dimension is " +
                                    std::to_string(g));
        return {LatentSpec::student({std::move(mp), scale, cfg.dof}),
                LatentSpec::student({std::move(mq), std::move(scale), cfg.dof})};
    }

    DenseMatrix cov;
    if (cfg.family == latent::Family::gaussian_diag) {
        cov = latent::diag_cov(w.dim(), cfg.sigma);
    } else {
        if (!cfg.cov)
            throw InvalidParameter("build_latent_pair: gaussian-nondiag requires a shared "
                                   "covariance matrix");
        cov = *cfg.cov;
        if (cov.rows() != w.dim())
            throw DimensionMismatch("build_latent_pair: shared covariance is " +
                                    std::to_string(cov.rows()) + "x" + std::to_string(cov.cols()) +
                                    ", weight dimension is " + std::to_string(w.dim()));
    }
    return {LatentSpec::gaussian(cfg.family, {w.values, cov}),
            LatentSpec::gaussian(cfg.family, {w_tilde.values, std::move(cov)})};
}

// KL divergence between the latent projections of w and w_tilde: closed form
// for Gaussian families, Monte Carlo (cfg.mc_samples, cfg.seed) for Student.
inline DivergenceEstimate ap3(const WeightVector& w, const WeightVector& w_tilde,
                              const LatentConfig& cfg) {
    const LatentPair pair = build_latent_pair(w, w_tilde, cfg);
    if (cfg.family == latent::Family::student) {
        RngStream rng(cfg.seed);
        return divergence::mc_kl(pair.p, pair.q, cfg.mc_samples, rng);
    }
    return divergence::gaussian_kl(pair.p, pair.q);
}

enum class PdMode { loss, accuracy };

// |metric difference| between two evaluations of the same dataset and split.
inline double pd_metric(const EvalResult& eval_orig, const EvalResult& eval_pruned, PdMode mode) {
    if (eval_orig.dataset_id != eval_pruned.dataset_id)
        throw SplitMismatch("pd_metric: datasets '" + eval_orig.dataset_id + "' and '" +
                            eval_pruned.dataset_id + "' differ");
    if (eval_orig.split != eval_pruned.split)
        throw SplitMismatch("pd_metric: evaluations come from different splits");
    const double a = mode == PdMode::loss ? eval_orig.loss : eval_orig.accuracy;
    const double b = mode == PdMode::loss ? eval_pruned.loss : eval_pruned.accuracy;
    return std::abs(a - b);
}

// Inputs to the closed-form bounds. Only the fields a given bound reads need
// to be meaningful for that call.
struct BoundInputs {
    double epsilon = 0.0;
    double lambda_max = 1.0;
    double lambda_min = 1.0;
    double trace_p = 0.0;
    double trace_q = 0.0;
    double expectation_y = 1.0;
    double c1 = 0.0;
    double k_const = 0.0;
    double c_sigma = 1.0;
};

namespace detail {

inline void require_spectrum(const BoundInputs& b, const char* who) {
    if (!(b.lambda_max > 0.0) || !(b.lambda_min > 0.0))
        throw InvalidParameter(std::string(who) + ": eigenvalue bounds must be positive");
    if (b.lambda_min > b.lambda_max)
        throw InvalidParameter(std::string(who) + ": lambda_min exceeds lambda_max");
    if (b.trace_p < 0.0 || b.trace_q < 0.0)
        throw InvalidParameter(std::string(who) + ": traces must be nonnegative");
}

}  // namespace detail

// E_Y * [lambda_max * sqrt(eps/2) * (trace_P + trace_Q)] / [2 (1 - sqrt(eps/2))],
// valid on 0 < eps < 2.
inline double lemma1_bound(const BoundInputs& b) {
    detail::require_spectrum(b, "lemma1_bound");
    if (!(b.epsilon > 0.0 && b.epsilon < 2.0))
        throw InvalidParameter("lemma1_bound: epsilon must lie in (0, 2), got " +
                               std::to_string(b.epsilon));
    const double root = std::sqrt(b.epsilon / 2.0);
    const double c = b.trace_p + b.trace_q;
    return b.expectation_y * (b.lambda_max * root * c) / (2.0 * (1.0 - root));
}

// E_Y * (lambda_max / 2) * sqrt(2 eps / lambda_min).
inline double corollary1_bound(const BoundInputs& b) {
    detail::require_spectrum(b, "corollary1_bound");
    if (b.epsilon < 0.0)
        throw InvalidParameter("corollary1_bound: epsilon must be nonnegative");
    return b.expectation_y * (b.lambda_max / 2.0) * std::sqrt(2.0 * b.epsilon / b.lambda_min);
}

// c_l1 * ( sqrt(2 eps_l) / (c_l * vol_z) + c_sig ).
inline double epsilon_propagate_general(double eps_l, double c_l, double c_l1, double c_sig,
                                        double vol_z) {
    if (eps_l < 0.0) throw InvalidParameter("epsilon_propagate_general: eps_l must be nonnegative");
    if (!(c_l > 0.0) || !(c_l1 > 0.0) || !(vol_z > 0.0))
        throw InvalidParameter("epsilon_propagate_general: constants must be positive");
    if (c_sig < 0.0)
        throw InvalidParameter("epsilon_propagate_general: c_sig must be nonnegative");
    return c_l1 * (std::sqrt(2.0 * eps_l) / (c_l * vol_z) + c_sig);
}

// 1/2 * ( c1 + lambda_max * c_sigma^2 * (2 eps_l - k_const) / lambda_min ),
// valid when 2 eps_l >= k_const.
inline double epsilon_propagate_gaussian(double eps_l, const BoundInputs& b) {
    detail::require_spectrum(b, "epsilon_propagate_gaussian");
    if (2.0 * eps_l < b.k_const)
        throw InvalidParameter("epsilon_propagate_gaussian: need 2*eps_l >= k_const, got 2*" +
                               std::to_string(eps_l) + " < " + std::to_string(b.k_const));
    return 0.5 * (b.c1 + b.lambda_max * b.c_sigma * b.c_sigma * (2.0 * eps_l - b.k_const) /
                             b.lambda_min);
}

// Per-snapshot trajectory record. Both gap variants are reported because the
// two definitions in play disagree on the second divergence's base point:
//   gap_vs_orig  = |KL(P_w*||P_wt*) - KL(P_w*  ||P_wt_t)|
//   gap_vs_tuned = |KL(P_w*||P_wt*) - KL(P_wt* ||P_wt_t)|
struct TrajectoryPoint {
    std::size_t index = 0;
    DivergenceEstimate kl_orig_to_snapshot;   // KL(P_w* || P_wt_t)
    DivergenceEstimate kl_tuned_to_snapshot;  // KL(P_wt* || P_wt_t)
    double gap_vs_orig = 0.0;
    double gap_vs_tuned = 0.0;
};

struct Trajectory {
    DivergenceEstimate kl_star;  // KL(P_w* || P_wt*)
    std::vector<TrajectoryPoint> points;
};

// Evaluates both gap variants along an ordered list of fine-tuning
// snapshots. Student-family Monte Carlo estimates draw from deterministic
// child seeds: (cfg.seed, "star"), and per snapshot t ("orig", t) and
// ("tuned", t), so inserting snapshots never shifts other estimates.
inline Trajectory ap3_trajectory(const WeightVector& w_star, const WeightVector& w_tilde_star,
                                 const std::vector<WeightVector>& snapshots,
                                 const LatentConfig& cfg) {
    using numkernel::child_seed;
    using numkernel::fnv1a64;

    Trajectory out;
    LatentConfig star_cfg = cfg;
    star_cfg.seed = child_seed(cfg.seed, fnv1a64("star"));
    out.kl_star = ap3(w_star, w_tilde_star, star_cfg);

    const std::uint64_t orig_base = child_seed(cfg.seed, fnv1a64("orig"));
    const std::uint64_t tuned_base = child_seed(cfg.seed, fnv1a64("tuned"));
    out.points.reserve(snapshots.size());
    for (std::size_t t = 0; t < snapshots.size(); ++t) {
        TrajectoryPoint pt;
        pt.index = t;
        LatentConfig cfg_orig = cfg;
        cfg_orig.seed = child_seed(orig_base, t);
        pt.kl_orig_to_snapshot = ap3(w_star, snapshots[t], cfg_orig);
        LatentConfig cfg_tuned = cfg;
        cfg_tuned.seed = child_seed(tuned_base, t);
        pt.kl_tuned_to_snapshot = ap3(w_tilde_star, snapshots[t], cfg_tuned);
        pt.gap_vs_orig = std::abs(out.kl_star.value - pt.kl_orig_to_snapshot.value);
        pt.gap_vs_tuned = std::abs(out.kl_star.value - pt.kl_tuned_to_snapshot.value);
        out.points.push_back(std::move(pt));
    }
    return out;
}

}  // namespace prunescope::patterns
