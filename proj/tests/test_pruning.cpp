#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <vector>

#include "prunescope/pruning.hpp"

using namespace prunescope;
using namespace prunescope::pruning;
using numkernel::RngStream;

namespace {

WeightVector make_weights(std::vector<double> values) {
    WeightVector w;
    w.values = std::move(values);
    w.origin = "test";
    return w;
}

double zeroed_sum_of_squares(const WeightVector& w, const PruneMask& mask) {
    double acc = 0.0;
    for (std::size_t i = 0; i < w.dim(); ++i)
        if (mask.bits[i] == 0) acc += w.values[i] * w.values[i];
    return acc;
}

}  // namespace

TEST_CASE("method names round-trip") {
    REQUIRE(prune_method_name(PruneMethod::lowest) == "lowest");
    REQUIRE(prune_method_name(PruneMethod::highest) == "highest");
    REQUIRE(prune_method_name(PruneMethod::random) == "random");
    REQUIRE(prune_method_from_name("highest") == PruneMethod::highest);
    REQUIRE_THROWS_AS(prune_method_from_name("middle"), ParseError);
}

TEST_CASE("pruned count uses floor with a rounding-safe nudge") {
    REQUIRE(pruned_count(0.0, 5) == 0);
    REQUIRE(pruned_count(1.0, 5) == 5);
    REQUIRE(pruned_count(1.0 / 3.0, 3) == 1);
    // 0.3 * 1000 is 299.999... in binary; the count must still be 300.
    REQUIRE(pruned_count(0.1, 1000) == 100);
    REQUIRE(pruned_count(0.3, 1000) == 300);
    REQUIRE(pruned_count(0.5, 1000) == 500);
    REQUIRE(pruned_count(0.8, 1000) == 800);
}

TEST_CASE("lowest mask zeroes the smallest magnitude") {
    const WeightVector w = make_weights({1.0, -3.0, 2.0});
    const PruneMask m = magnitude_mask(w, 1.0 / 3.0, PruneMethod::lowest);
    REQUIRE(m.bits == std::vector<std::uint8_t>{0, 1, 1});
    REQUIRE(m.zero_count() == 1);
    REQUIRE(m.method == PruneMethod::lowest);
    REQUIRE_FALSE(m.seed.has_value());
}

TEST_CASE("highest mask zeroes the largest magnitude") {
    const WeightVector w = make_weights({1.0, -3.0, 2.0});
    const PruneMask m = magnitude_mask(w, 1.0 / 3.0, PruneMethod::highest);
    REQUIRE(m.bits == std::vector<std::uint8_t>{1, 0, 1});
}

TEST_CASE("zero fraction leaves everything untouched for every method") {
    const WeightVector w = make_weights({0.5, -0.25, 4.0, 1.0});
    RngStream rng(5);
    for (PruneMethod method : {PruneMethod::lowest, PruneMethod::highest, PruneMethod::random}) {
        RngStream* r = method == PruneMethod::random ? &rng : nullptr;
        const PruneMask m = magnitude_mask(w, 0.0, method, r);
        REQUIRE(m.zero_count() == 0);
        for (auto b : m.bits) REQUIRE(b == 1);
    }
}

TEST_CASE("full fraction removes everything") {
    const WeightVector w = make_weights({0.5, -0.25, 4.0});
    const PruneMask m = magnitude_mask(w, 1.0, PruneMethod::lowest);
    REQUIRE(m.zero_count() == 3);
}

TEST_CASE("paper fractions on a thousand weights") {
    RngStream rng(77);
    std::vector<double> values(1000);
    for (auto& v : values) v = rng.next_normal();
    const WeightVector w = make_weights(values);
    const std::array<double, 4> fractions = {0.1, 0.3, 0.5, 0.8};
    const std::array<std::size_t, 4> expected = {100, 300, 500, 800};
    for (std::size_t i = 0; i < 4; ++i) {
        const PruneMask m = magnitude_mask(w, fractions[i], PruneMethod::lowest);
        REQUIRE(m.zero_count() == expected[i]);
    }
}

TEST_CASE("ties break by ascending index") {
    const WeightVector w = make_weights({1.0, 1.0, 1.0});
    const PruneMask low = magnitude_mask(w, 1.0 / 3.0, PruneMethod::lowest);
    REQUIRE(low.bits == std::vector<std::uint8_t>{0, 1, 1});
    const PruneMask high = magnitude_mask(w, 1.0 / 3.0, PruneMethod::highest);
    REQUIRE(high.bits == std::vector<std::uint8_t>{0, 1, 1});

    const WeightVector w2 = make_weights({-2.0, 1.0, 2.0, 1.0});
    const PruneMask low2 = magnitude_mask(w2, 0.5, PruneMethod::lowest);
    REQUIRE(low2.bits == std::vector<std::uint8_t>{1, 0, 1, 0});
    const PruneMask high2 = magnitude_mask(w2, 0.5, PruneMethod::highest);
    REQUIRE(high2.bits == std::vector<std::uint8_t>{0, 1, 0, 1});
}

TEST_CASE("rng is required exactly for random pruning") {
    const WeightVector w = make_weights({1.0, 2.0, 3.0});
    RngStream rng(9);
    REQUIRE_THROWS_AS(magnitude_mask(w, 0.5, PruneMethod::random, nullptr), InvalidParameter);
    REQUIRE_THROWS_AS(magnitude_mask(w, 0.5, PruneMethod::lowest, &rng), InvalidParameter);
    REQUIRE_NOTHROW(magnitude_mask(w, 0.5, PruneMethod::random, &rng));
    REQUIRE_NOTHROW(magnitude_mask(w, 0.5, PruneMethod::highest, nullptr));
}

TEST_CASE("fraction bounds are enforced") {
    const WeightVector w = make_weights({1.0, 2.0});
    REQUIRE_THROWS_AS(magnitude_mask(w, -0.1, PruneMethod::lowest), InvalidParameter);
    REQUIRE_THROWS_AS(magnitude_mask(w, 1.1, PruneMethod::lowest), InvalidParameter);
}

TEST_CASE("random masks record their seed and reproduce exactly") {
    const WeightVector w = make_weights({1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
    RngStream a(123), b(123), c(124);
    const PruneMask ma = magnitude_mask(w, 0.5, PruneMethod::random, &a);
    const PruneMask mb = magnitude_mask(w, 0.5, PruneMethod::random, &b);
    const PruneMask mc = magnitude_mask(w, 0.5, PruneMethod::random, &c);
    REQUIRE(ma.bits == mb.bits);
    REQUIRE(ma.seed.has_value());
    REQUIRE(*ma.seed == 123);
    REQUIRE(*mc.seed == 124);
    REQUIRE(ma.zero_count() == 3);
    REQUIRE(mc.zero_count() == 3);
}

TEST_CASE("random mask zero positions are uniform across seeds") {
    const std::size_t d = 10;
    const std::size_t draws = 10000;
    const double fraction = 0.3;
    const WeightVector w = make_weights(std::vector<double>(d, 1.0));
    std::vector<std::size_t> zero_counts(d, 0);
    for (std::size_t s = 0; s < draws; ++s) {
        RngStream rng(s);
        const PruneMask m = magnitude_mask(w, fraction, PruneMethod::random, &rng);
        for (std::size_t i = 0; i < d; ++i)
            if (m.bits[i] == 0) ++zero_counts[i];
    }
    // Each position is zeroed with probability 3/10; binomial 4-sigma band.
    const double p = 0.3;
    const double sigma = std::sqrt(draws * p * (1.0 - p));
    for (std::size_t i = 0; i < d; ++i)
        REQUIRE(std::abs(static_cast<double>(zero_counts[i]) - draws * p) <= 4.0 * sigma);
}

TEST_CASE("apply_mask zeroes exactly the masked entries") {
    const WeightVector w = make_weights({1.0, -3.0, 2.0});
    PruneMask m;
    m.bits = {0, 1, 1};
    m.fraction = 1.0 / 3.0;
    m.method = PruneMethod::lowest;
    const WeightVector out = apply_mask(w, m);
    REQUIRE(out.values == std::vector<double>{0.0, -3.0, 2.0});
    REQUIRE(out.origin.find("lowest") != std::string::npos);
    REQUIRE(out.origin.find("test") != std::string::npos);
}

TEST_CASE("masked negative weights become positive zero") {
    const WeightVector w = make_weights({-1.0, -2.0});
    PruneMask m;
    m.bits = {0, 0};
    m.fraction = 1.0;
    m.method = PruneMethod::lowest;
    const WeightVector out = apply_mask(w, m);
    for (double v : out.values) {
        REQUIRE(v == 0.0);
        REQUIRE_FALSE(std::signbit(v));
    }
}

TEST_CASE("all-ones and all-zeros masks behave like identity and annihilator") {
    const WeightVector w = make_weights({0.5, -0.25, 4.0});
    PruneMask ones;
    ones.bits = {1, 1, 1};
    ones.fraction = 0.0;
    ones.method = PruneMethod::lowest;
    REQUIRE(apply_mask(w, ones).values == w.values);

    PruneMask zeros;
    zeros.bits = {0, 0, 0};
    zeros.fraction = 1.0;
    zeros.method = PruneMethod::highest;
    REQUIRE(apply_mask(w, zeros).values == std::vector<double>{0.0, 0.0, 0.0});
}

TEST_CASE("applying a mask twice equals applying it once") {
    RngStream rng(31);
    std::vector<double> values(64);
    for (auto& v : values) v = rng.next_normal();
    const WeightVector w = make_weights(values);
    const PruneMask m = magnitude_mask(w, 0.5, PruneMethod::lowest);
    const WeightVector once = apply_mask(w, m);
    const WeightVector twice = apply_mask(once, m);
    REQUIRE(once.values == twice.values);
}

TEST_CASE("apply_mask rejects mismatched dimensions") {
    const WeightVector w = make_weights({1.0, 2.0});
    PruneMask m;
    m.bits = {1, 1, 1};
    m.fraction = 0.0;
    m.method = PruneMethod::lowest;
    REQUIRE_THROWS_AS(apply_mask(w, m), DimensionMismatch);
}

TEST_CASE("weight vectors reject empty and non-finite input") {
    WeightVector empty;
    REQUIRE_THROWS_AS(empty.validate(), InvalidParameter);
    WeightVector bad = make_weights({1.0, std::nan("")});
    REQUIRE_THROWS_AS(bad.validate(), InvalidParameter);
}

TEST_CASE("mask cardinality holds across random inputs") {
    RngStream rng(41);
    for (int rep = 0; rep < 200; ++rep) {
        const std::size_t d = 1 + rng.next_index(97);
        std::vector<double> values(d);
        for (auto& v : values) v = rng.next_normal();
        const WeightVector w = make_weights(values);
        const double fraction = rng.next_double();
        for (PruneMethod method :
             {PruneMethod::lowest, PruneMethod::highest, PruneMethod::random}) {
            RngStream mask_rng(rep);
            RngStream* r = method == PruneMethod::random ? &mask_rng : nullptr;
            const PruneMask m = magnitude_mask(w, fraction, method, r);
            REQUIRE(m.zero_count() == pruned_count(fraction, d));
        }
    }
}

TEST_CASE("lowest and highest bracket random in zeroed mass") {
    RngStream rng(51);
    const std::array<double, 4> fractions = {0.1, 0.3, 0.5, 0.8};
    for (int rep = 0; rep < 1000; ++rep) {
        std::vector<double> values(512);
        for (auto& v : values) v = rng.next_normal();
        const WeightVector w = make_weights(values);
        for (double fraction : fractions) {
            const PruneMask low = magnitude_mask(w, fraction, PruneMethod::lowest);
            const PruneMask high = magnitude_mask(w, fraction, PruneMethod::highest);
            RngStream mask_rng(static_cast<std::uint64_t>(rep) * 7919 + 1);
            const PruneMask rand = magnitude_mask(w, fraction, PruneMethod::random, &mask_rng);
            const double lo = zeroed_sum_of_squares(w, low);
            const double mid = zeroed_sum_of_squares(w, rand);
            const double hi = zeroed_sum_of_squares(w, high);
            REQUIRE(lo <= mid);
            REQUIRE(mid <= hi);
        }
    }
}
