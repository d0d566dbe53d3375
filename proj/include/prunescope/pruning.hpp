#pragma once

// Magnitude-based pruning masks and their application to weight vectors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "prunescope/errors.hpp"
#include "prunescope/numkernel.hpp"

namespace prunescope::pruning {

using numkernel::RngStream;

enum class PruneMethod { lowest, highest, random };

inline std::string_view prune_method_name(PruneMethod m) {
    switch (m) {
        case PruneMethod::lowest: return "lowest";
        case PruneMethod::highest: return "highest";
        case PruneMethod::random: return "random";
    }
    return "?";
}

inline PruneMethod prune_method_from_name(std::string_view name) {
    if (name == "lowest") return PruneMethod::lowest;
    if (name == "highest") return PruneMethod::highest;
    if (name == "random") return PruneMethod::random;
    throw ParseError("unknown pruning method '" + std::string(name) + "'");
}

struct WeightVector {
    std::vector<double> values;
    std::string origin;

    std::size_t dim() const { return values.size(); }

    void validate() const {
        if (values.empty()) throw InvalidParameter("WeightVector: dimension must be at least 1");
        for (double v : values)
            if (!std::isfinite(v))
                throw InvalidParameter("WeightVector: non-finite entry in '" + origin + "'");
    }
};

struct PruneMask {
    std::vector<std::uint8_t> bits;  // 1 keeps, 0 prunes
    double fraction = 0.0;
    PruneMethod method = PruneMethod::lowest;
    std::optional<std::uint64_t> seed;  // present iff method == random

    std::size_t dim() const { return bits.size(); }

    std::size_t zero_count() const {
        std::size_t z = 0;
        for (auto b : bits) z += (b == 0);
        return z;
    }
};

// Number of entries a fraction prunes. floor(fraction * d) up to a one-ulp
// nudge: 0.3 * 1000 rounds to 299.99999999999994 in binary, and the contract
// counts {100, 300, 500, 800} for d = 1000 are exact.
inline std::size_t pruned_count(double fraction, std::size_t d) {
    return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(d) + 1e-9));
}

// Builds the mask zeroing k = floor(fraction * d) entries. lowest/highest
// rank by |w| with ties broken by ascending index; random chooses k indices
// without replacement from the supplied stream.
inline PruneMask magnitude_mask(const WeightVector& w, double fraction, PruneMethod method,
                                RngStream* rng = nullptr) {
    w.validate();
    if (!(fraction >= 0.0 && fraction <= 1.0))
        throw InvalidParameter("magnitude_mask: fraction must lie in [0, 1], got " +
                               std::to_string(fraction));
    if (method == PruneMethod::random && rng == nullptr)
        throw InvalidParameter("magnitude_mask: random method requires an RngStream");
    if (method != PruneMethod::random && rng != nullptr)
        throw InvalidParameter("magnitude_mask: rng is only meaningful for the random method");

    const std::size_t d = w.dim();
    const std::size_t k = pruned_count(fraction, d);

    PruneMask mask;
    mask.bits.assign(d, 1);
    mask.fraction = fraction;
    mask.method = method;

    if (method == PruneMethod::random) {
        mask.seed = rng->seed();
        // Partial Fisher-Yates: the first k slots of a shuffled index array.
        std::vector<std::size_t> idx(d);
        std::iota(idx.begin(), idx.end(), 0);
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng->next_index(d - i));
            std::swap(idx[i], idx[j]);
        }
        for (std::size_t i = 0; i < k; ++i) mask.bits[idx[i]] = 0;
        return mask;
    }

    // Stable sort so ties in |w| resolve to the ascending index for both
    // selection directions.
    std::vector<std::size_t> order(d);
    std::iota(order.begin(), order.end(), 0);
    if (method == PruneMethod::lowest) {
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return std::abs(w.values[a]) < std::abs(w.values[b]);
        });
    } else {
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return std::abs(w.values[a]) > std::abs(w.values[b]);
        });
    }
    for (std::size_t i = 0; i < k; ++i) mask.bits[order[i]] = 0;
    return mask;
}

// Elementwise product m . w. Pruned coordinates are written as literal 0.0
// (a multiply would turn negative weights into -0.0 and break bit-level
// comparisons downstream).
inline WeightVector apply_mask(const WeightVector& w, const PruneMask& m) {
    if (w.dim() != m.dim())
        throw DimensionMismatch("apply_mask: weights dimension " + std::to_string(w.dim()) +
                                " vs mask dimension " + std::to_string(m.dim()));
    WeightVector out;
    out.values.resize(w.dim());
    for (std::size_t i = 0; i < w.dim(); ++i) out.values[i] = m.bits[i] ? w.values[i] : 0.0;
    char frac[32];
    std::snprintf(frac, sizeof frac, "%g", m.fraction);
    out.origin = (w.origin.empty() ? std::string() : w.origin + " ") + "pruned(method=" +
                 std::string(prune_method_name(m.method)) + ",fraction=" + frac + ")";
    return out;
}

}  // namespace prunescope::pruning
