#pragma once

// Dense linear algebra and deterministic random streams.
//
// Everything here is written against two hard requirements:
//   1. Bit-reproducibility: the same seed yields the same bytes on every run,
//      so algorithms with unspecified iteration order or platform-dependent
//      shortcuts are off the table.
//   2. Honest failure: ill-posed inputs throw typed errors instead of
//      returning NaN-laced results.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "prunescope/errors.hpp"

namespace prunescope::numkernel {

// ---------------------------------------------------------------------------
// DenseMatrix: row-major, owning, no views. Sized for d <= a few hundred.
// ---------------------------------------------------------------------------

class DenseMatrix {
public:
    DenseMatrix() = default;

    DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static DenseMatrix identity(std::size_t n) {
        DenseMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static DenseMatrix diagonal(std::span<const double> d) {
        DenseMatrix m(d.size(), d.size());
        for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const DenseMatrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline DenseMatrix transpose(const DenseMatrix& m) {
    DenseMatrix t(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
    return t;
}

inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.rows())
        throw DimensionMismatch("matmul: " + std::to_string(a.cols()) + " columns vs " +
                                std::to_string(b.rows()) + " rows");
    DenseMatrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
        }
    }
    return c;
}

inline std::vector<double> matvec(const DenseMatrix& m, std::span<const double> x) {
    if (m.cols() != x.size())
        throw DimensionMismatch("matvec: " + std::to_string(m.cols()) + " columns vs vector of " +
                                std::to_string(x.size()));
    std::vector<double> y(m.rows(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        double acc = 0.0;
        auto r = m.row(i);
        for (std::size_t j = 0; j < x.size(); ++j) acc += r[j] * x[j];
        y[i] = acc;
    }
    return y;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw DimensionMismatch("dot: vectors of length " + std::to_string(a.size()) + " and " +
                                std::to_string(b.size()));
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

inline double squared_norm(std::span<const double> a) {
    double acc = 0.0;
    for (double v : a) acc += v * v;
    return acc;
}

inline double norm(std::span<const double> a) { return std::sqrt(squared_norm(a)); }

inline double trace(const DenseMatrix& m) {
    if (m.rows() != m.cols()) throw DimensionMismatch("trace: matrix is not square");
    double acc = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i) acc += m(i, i);
    return acc;
}

// Symmetry gate shared by every routine that requires a symmetric input.
// Tolerance: |M[i][j] - M[j][i]| <= 1e-9 * max(1, |M[i][j]|).
inline void require_symmetric(const DenseMatrix& m, const char* who) {
    if (m.rows() != m.cols())
        throw DimensionMismatch(std::string(who) + ": matrix is not square");
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = i + 1; j < m.cols(); ++j) {
            const double a = m(i, j);
            const double b = m(j, i);
            if (std::abs(a - b) > 1e-9 * std::max(1.0, std::abs(a)))
                throw InvalidParameter(std::string(who) + ": matrix is not symmetric at (" +
                                       std::to_string(i) + "," + std::to_string(j) + ")");
        }
    }
}

// ---------------------------------------------------------------------------
// Cholesky factorization and friends.
// ---------------------------------------------------------------------------

// Lower-triangular L with L * L^T = M. Pivots at or below 1e-12 reject the
// matrix as not positive definite rather than producing a garbage factor.
inline DenseMatrix cholesky(const DenseMatrix& m) {
    require_symmetric(m, "cholesky");
    const std::size_t n = m.rows();
    DenseMatrix l(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double diag = m(j, j);
        for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
        if (!(diag > 1e-12))
            throw NotPositiveDefinite("cholesky: pivot " + std::to_string(j) + " is " +
                                      std::to_string(diag));
        const double ljj = std::sqrt(diag);
        l(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double acc = m(i, j);
            for (std::size_t k = 0; k < j; ++k) acc -= l(i, k) * l(j, k);
            l(i, j) = acc / ljj;
        }
    }
    return l;
}

// Solves L y = b in place for lower-triangular L.
inline void solve_lower_inplace(const DenseMatrix& l, std::span<double> b) {
    const std::size_t n = l.rows();
    if (b.size() != n) throw DimensionMismatch("solve_lower_inplace: size mismatch");
    for (std::size_t i = 0; i < n; ++i) {
        double acc = b[i];
        auto li = l.row(i);
        for (std::size_t k = 0; k < i; ++k) acc -= li[k] * b[k];
        b[i] = acc / li[i];
    }
}

// Solves L^T y = b in place for lower-triangular L.
inline void solve_lower_transpose_inplace(const DenseMatrix& l, std::span<double> b) {
    const std::size_t n = l.rows();
    if (b.size() != n) throw DimensionMismatch("solve_lower_transpose_inplace: size mismatch");
    for (std::size_t ii = n; ii-- > 0;) {
        double acc = b[ii];
        for (std::size_t k = ii + 1; k < n; ++k) acc -= l(k, ii) * b[k];
        b[ii] = acc / l(ii, ii);
    }
}

// log|M| for symmetric positive definite M, via the Cholesky diagonal:
// log|M| = 2 * sum_i log L_ii. Stable where naive determinants under/overflow.
inline double log_det_pd(const DenseMatrix& m) {
    const DenseMatrix l = cholesky(m);
    double acc = 0.0;
    for (std::size_t i = 0; i < l.rows(); ++i) acc += std::log(l(i, i));
    return 2.0 * acc;
}

// ---------------------------------------------------------------------------
// Symmetric eigensolver: cyclic Jacobi rotations.
// ---------------------------------------------------------------------------

struct SymEigen {
    std::vector<double> values;  // ascending
    DenseMatrix vectors;         // orthonormal columns, vectors.col(i) pairs values[i]
};

// Cyclic-by-row Jacobi. Quadratic convergence makes the sweep cap generous;
// hitting it means the input was pathological, so that is surfaced.
inline SymEigen sym_eigen(const DenseMatrix& m) {
    require_symmetric(m, "sym_eigen");
    const std::size_t n = m.rows();
    DenseMatrix a = m;
    DenseMatrix v = DenseMatrix::identity(n);

    double frob = 0.0;
    for (double x : a.data()) frob += x * x;
    frob = std::sqrt(frob);
    const double stop = 1e-14 * std::max(1.0, frob);

    constexpr std::size_t kMaxSweeps = 64;
    bool converged = (n <= 1);
    for (std::size_t sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += 2.0 * a(i, j) * a(i, j);
        if (std::sqrt(off) <= stop) {
            converged = true;
            break;
        }
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (std::abs(apq) <= 1e-300) {
                    a(p, q) = a(q, p) = 0.0;
                    continue;
                }
                const double app = a(p, p);
                const double aqq = a(q, q);
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;

                a(p, p) = app - t * apq;
                a(q, q) = aqq + t * apq;
                a(p, q) = a(q, p) = 0.0;
                for (std::size_t k = 0; k < n; ++k) {
                    if (k == p || k == q) continue;
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = a(p, k) = c * akp - s * akq;
                    a(k, q) = a(q, k) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p);
                    const double vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    if (!converged) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += 2.0 * a(i, j) * a(i, j);
        if (std::sqrt(off) > stop)
            throw ConvergenceFailure("sym_eigen: off-diagonal norm " +
                                     std::to_string(std::sqrt(off)) + " after " +
                                     std::to_string(kMaxSweeps) + " sweeps");
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return a(x, x) < a(y, y); });

    SymEigen out;
    out.values.resize(n);
    out.vectors = DenseMatrix(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        out.values[j] = a(order[j], order[j]);
        for (std::size_t i = 0; i < n; ++i) out.vectors(i, j) = v(i, order[j]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Deterministic random streams.
// ---------------------------------------------------------------------------

namespace detail {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

// splitmix64 finalizer as a stateless mixer.
inline std::uint64_t mix64(std::uint64_t z) {
    z += kGolden;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace detail

// Deterministic child-seed derivation: children are decorrelated from the
// parent and from each other, and inserting a new child index never shifts
// the streams of existing indices.
inline std::uint64_t child_seed(std::uint64_t seed, std::uint64_t index) {
    return detail::mix64(detail::mix64(seed) ^ (detail::kGolden * (index + 1)));
}

// FNV-1a, for deriving child indices from string tags.
inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

// Counter-based stream: xoshiro256++ seeded through splitmix64. The
// generation algorithms (53-bit uniforms, Marsaglia polar normals,
// Marsaglia-Tsang gamma) are frozen; changing any of them is a format break
// for every golden value downstream.
class RngStream {
public:
    static constexpr std::string_view kAlgorithm = "xoshiro256++/splitmix64";

    explicit RngStream(std::uint64_t seed) : seed_(seed) {
        std::uint64_t sm = seed;
        for (auto& s : state_) {
            sm += detail::kGolden;
            std::uint64_t z = sm;
            z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
            z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
            s = z ^ (z >> 31);
        }
        if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
    }

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() {
        const std::uint64_t result = detail::rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = detail::rotl(state_[3], 45);
        return result;
    }

    // Uniform on [0, 1) with 53 significant bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via the Marsaglia polar method; the spare deviate is
    // cached so consumption stays one-draw-per-call deterministic.
    double next_normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * next_double() - 1.0;
            v = 2.0 * next_double() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        has_spare_ = true;
        return u * f;
    }

    // Gamma(shape, 1) via Marsaglia-Tsang; shape < 1 boosts through shape + 1.
    double next_gamma(double shape) {
        if (!(shape > 0.0)) throw InvalidParameter("next_gamma: shape must be positive");
        if (shape < 1.0) {
            const double u = 1.0 - next_double();  // (0, 1]
            return next_gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x, v;
            do {
                x = next_normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = next_double();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    double next_chi_square(double dof) {
        if (!(dof > 0.0)) throw InvalidParameter("next_chi_square: dof must be positive");
        return 2.0 * next_gamma(0.5 * dof);
    }

    // Uniform index in [0, bound); modulo mapping, frozen with the rest.
    std::uint64_t next_index(std::uint64_t bound) {
        if (bound == 0) throw InvalidParameter("next_index: bound must be positive");
        return next_u64() % bound;
    }

    RngStream child(std::uint64_t index) const { return RngStream(child_seed(seed_, index)); }

private:
    std::uint64_t seed_;
    std::array<std::uint64_t, 4> state_{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Power iteration on a matrix-free symmetric operator.
// ---------------------------------------------------------------------------

struct PowerResult {
    double value = 0.0;            // dominant eigenvalue (largest magnitude)
    std::vector<double> vector;    // unit-norm eigenvector estimate
    std::size_t iterations = 0;
};

// apply must be (a discretization of) a symmetric linear operator; the
// Rayleigh quotient then converges to the dominant eigenvalue. Convergence
// test: ||A v - lambda v|| <= tol * |lambda|.
inline PowerResult power_iteration(const std::function<std::vector<double>(std::span<const double>)>& apply,
                                   std::size_t dim, double tol, std::size_t max_iter,
                                   RngStream& rng) {
    if (dim == 0) throw InvalidParameter("power_iteration: dim must be positive");
    if (!(tol > 0.0)) throw InvalidParameter("power_iteration: tol must be positive");
    if (max_iter == 0) throw InvalidParameter("power_iteration: max_iter must be positive");

    std::vector<double> v(dim);
    for (auto& x : v) x = rng.next_normal();
    double nv = norm(v);
    if (nv == 0.0) {
        v[0] = 1.0;
        nv = 1.0;
    }
    for (auto& x : v) x /= nv;

    double lambda = 0.0;
    for (std::size_t it = 1; it <= max_iter; ++it) {
        std::vector<double> w = apply(v);
        if (w.size() != dim) throw DimensionMismatch("power_iteration: operator changed dimension");
        lambda = dot(v, w);
        double resid = 0.0;
        for (std::size_t i = 0; i < dim; ++i) {
            const double r = w[i] - lambda * v[i];
            resid += r * r;
        }
        resid = std::sqrt(resid);
        const double wn = norm(w);
        if (wn <= 1e-300) return {0.0, std::move(v), it};  // operator is (numerically) zero
        if (resid <= tol * std::abs(lambda)) {
            for (auto& x : w) x /= wn;
            return {lambda, std::move(w), it};
        }
        for (auto& x : w) x /= wn;
        v = std::move(w);
    }
    throw ConvergenceFailure("power_iteration: no convergence after " + std::to_string(max_iter) +
                             " iterations");
}

}  // namespace prunescope::numkernel
