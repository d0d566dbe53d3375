#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "prunescope/micronet.hpp"
#include "prunescope/numkernel.hpp"
#include "prunescope/pruning.hpp"

using namespace prunescope;
using micronet::Activation;
using micronet::Dataset;
using micronet::LossKind;
using micronet::MlpModel;
using micronet::Split;
using micronet::TrainConfig;
using numkernel::DenseMatrix;
using numkernel::RngStream;

namespace {

// Content digest over formatted features, labels, and split tags; any change
// to values, ordering, or split assignment changes the hash.
std::uint64_t dataset_checksum(const Dataset& d) {
    std::string blob;
    char buf[48];
    for (std::size_t r = 0; r < d.size(); ++r) {
        for (std::size_t c = 0; c < d.features.cols(); ++c) {
            std::snprintf(buf, sizeof buf, "%.17g,", d.features(r, c));
            blob += buf;
        }
        std::snprintf(buf, sizeof buf, "%d,%d;", d.labels[r], static_cast<int>(d.split_tags[r]));
        blob += buf;
    }
    return numkernel::fnv1a64(blob);
}

// Straight-line forward pass written independently of the library: per row,
// per layer, explicit affine then activation.
std::vector<double> naive_forward_row(const MlpModel& m, std::span<const double> x) {
    std::vector<double> a(x.begin(), x.end());
    for (std::size_t l = 0; l < m.layer_count(); ++l) {
        const DenseMatrix& w = m.weights[l];
        const std::size_t d_out = w.cols();
        std::vector<double> z(d_out);
        for (std::size_t k = 0; k < d_out; ++k) {
            double acc = 0.0;
            for (std::size_t j = 0; j < a.size(); ++j) acc += a[j] * w(j, k);
            z[k] = acc + w(a.size(), k);
        }
        if (l + 1 < m.layer_count()) {
            for (auto& v : z)
                v = m.activation == Activation::relu ? (v > 0.0 ? v : 0.0) : std::tanh(v);
        }
        a = std::move(z);
    }
    return a;
}

double naive_ce_row_loss(std::span<const double> z, int label) {
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    return mx + std::log(sum) - z[static_cast<std::size_t>(label)];
}

Dataset tiny_dataset(std::size_t n, std::size_t dim, std::size_t classes, std::uint64_t seed) {
    Dataset d;
    d.features = DenseMatrix(n, dim);
    d.labels.resize(n);
    d.split_tags.assign(n, Split::train);
    d.classes = classes;
    d.generator = "tiny(seed=" + std::to_string(seed) + ")";
    RngStream rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < dim; ++j) d.features(i, j) = rng.next_normal();
        d.labels[i] = static_cast<int>(i % classes);
    }
    return d;
}

DenseMatrix batch_of(const Dataset& d) {
    DenseMatrix x(d.size(), d.features.cols());
    for (std::size_t i = 0; i < d.size(); ++i)
        for (std::size_t j = 0; j < d.features.cols(); ++j) x(i, j) = d.features(i, j);
    return x;
}

// Central finite difference of the batch loss with respect to every weight.
double fd_gradient_max_rel_err(MlpModel model, const DenseMatrix& x, std::span<const int> y,
                               LossKind kind) {
    const micronet::LossGrad lg = micronet::loss_and_grad(model, x, y, kind);
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t l = 0; l < model.layer_count(); ++l) {
        DenseMatrix& w = model.weights[l];
        for (double& wi : w.data()) {
            const double keep = wi;
            wi = keep + h;
            const double up = micronet::loss_and_grad(model, x, y, kind).loss;
            wi = keep - h;
            const double dn = micronet::loss_and_grad(model, x, y, kind).loss;
            wi = keep;
            const double fd = (up - dn) / (2.0 * h);
            const double an = lg.grads[l].data()[static_cast<std::size_t>(&wi - w.data().data())];
            const double rel = std::abs(fd - an) / std::max({std::abs(an), std::abs(fd), 1e-3});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("make_blobs shapes, counts, and split sizes", "[micronet][dataset]") {
    RngStream rng(7);
    Dataset d = micronet::make_blobs(4, 25, 0.5, 3, rng);
    REQUIRE(d.size() == 100);
    REQUIRE(d.features.rows() == 100);
    REQUIRE(d.features.cols() == 3);
    REQUIRE(d.classes == 4);
    std::vector<std::size_t> per_class(4, 0);
    for (int y : d.labels) per_class[static_cast<std::size_t>(y)]++;
    for (std::size_t c = 0; c < 4; ++c) REQUIRE(per_class[c] == 25);
    REQUIRE(d.indices_of(Split::test).size() == 20);
    REQUIRE(d.indices_of(Split::train).size() == 80);
    REQUIRE_NOTHROW(d.validate());
}

TEST_CASE("make_blobs is deterministic and records its generator", "[micronet][dataset]") {
    RngStream a(1001), b(1001);
    Dataset da = micronet::make_blobs(3, 10, 0.9, 2, a);
    Dataset db = micronet::make_blobs(3, 10, 0.9, 2, b);
    REQUIRE(da.features.data() == db.features.data());
    REQUIRE(da.labels == db.labels);
    REQUIRE(da.split_tags == db.split_tags);
    REQUIRE(da.generator == "blobs(classes=3,n_per_class=10,spread=0.9,dim=2,seed=1001)");

    RngStream c(1002);
    Dataset dc = micronet::make_blobs(3, 10, 0.9, 2, c);
    REQUIRE(da.features.data() != dc.features.data());
}

TEST_CASE("make_blobs golden checksum for the reference dataset", "[micronet][dataset][golden]") {
    RngStream rng(1001);
    Dataset d = micronet::make_blobs(3, 800, 0.9, 2, rng);
    REQUIRE(dataset_checksum(d) == 0xa79d9ce698ca0ab9ULL);
}

TEST_CASE("make_blobs with zero spread is nearest-centroid separable", "[micronet][dataset]") {
    RngStream rng(99);
    Dataset d = micronet::make_blobs(3, 40, 0.0, 2, rng);
    // Class centroids estimated from the train split classify the test split.
    DenseMatrix centroids(3, 2);
    std::vector<double> counts(3, 0.0);
    for (std::size_t i : d.indices_of(Split::train)) {
        const auto c = static_cast<std::size_t>(d.labels[i]);
        counts[c] += 1.0;
        for (std::size_t j = 0; j < 2; ++j) centroids(c, j) += d.features(i, j);
    }
    for (std::size_t c = 0; c < 3; ++c) {
        REQUIRE(counts[c] > 0.0);
        for (std::size_t j = 0; j < 2; ++j) centroids(c, j) /= counts[c];
    }
    for (std::size_t i : d.indices_of(Split::test)) {
        std::size_t best = 0;
        double best_d2 = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < 3; ++c) {
            double d2 = 0.0;
            for (std::size_t j = 0; j < 2; ++j) {
                const double delta = d.features(i, j) - centroids(c, j);
                d2 += delta * delta;
            }
            if (d2 < best_d2) {
                best_d2 = d2;
                best = c;
            }
        }
        REQUIRE(static_cast<int>(best) == d.labels[i]);
    }
}

TEST_CASE("make_blobs rejects bad parameters", "[micronet][dataset][errors]") {
    RngStream rng(1);
    REQUIRE_THROWS_AS(micronet::make_blobs(1, 10, 0.5, 2, rng), InvalidParameter);
    REQUIRE_THROWS_AS(micronet::make_blobs(2, 0, 0.5, 2, rng), InvalidParameter);
    REQUIRE_THROWS_AS(micronet::make_blobs(2, 10, -0.5, 2, rng), InvalidParameter);
    REQUIRE_THROWS_AS(micronet::make_blobs(2, 10, 0.5, 0, rng), InvalidParameter);
}

TEST_CASE("assign_split carves floor(fraction * n) rows deterministically", "[micronet][dataset]") {
    Dataset d = tiny_dataset(10, 2, 2, 5);
    micronet::assign_split(d, 0.3, 42);
    REQUIRE(d.indices_of(Split::test).size() == 3);
    REQUIRE(d.indices_of(Split::train).size() == 7);

    Dataset d2 = tiny_dataset(10, 2, 2, 5);
    micronet::assign_split(d2, 0.3, 42);
    REQUIRE(d.split_tags == d2.split_tags);

    micronet::assign_split(d, 0.0, 42);
    REQUIRE(d.indices_of(Split::test).empty());

    REQUIRE_THROWS_AS(micronet::assign_split(d, 1.0, 42), InvalidParameter);
    REQUIRE_THROWS_AS(micronet::assign_split(d, -0.1, 42), InvalidParameter);
}

TEST_CASE("load_csv parses a hand-written file exactly", "[micronet][csv]") {
    const std::string path = temp_path("prunescope_csv_hand.csv");
    {
        std::ofstream out(path, std::ios::binary);
        out << "a,b,label\n"
            << "1.5,-2,0\n"
            << "0.25,3.5,1\n"
            << "-1,0.125,2\n";
    }
    Dataset d = micronet::load_csv(path, "label");
    REQUIRE(d.size() == 3);
    REQUIRE(d.features.cols() == 2);
    REQUIRE(d.classes == 3);
    REQUIRE(d.features(0, 0) == 1.5);
    REQUIRE(d.features(0, 1) == -2.0);
    REQUIRE(d.features(1, 0) == 0.25);
    REQUIRE(d.features(1, 1) == 3.5);
    REQUIRE(d.features(2, 0) == -1.0);
    REQUIRE(d.features(2, 1) == 0.125);
    REQUIRE(d.labels == std::vector<int>{0, 1, 2});
    for (Split s : d.split_tags) REQUIRE(s == Split::train);
    std::filesystem::remove(path);
}

TEST_CASE("load_csv accepts headerless files with a column index", "[micronet][csv]") {
    const std::string path = temp_path("prunescope_csv_noheader.csv");
    {
        std::ofstream out(path, std::ios::binary);
        out << "1,0.5,2.5\n"
            << "0,1.5,-2.5\n";
    }
    Dataset d = micronet::load_csv(path, "0");
    REQUIRE(d.features.cols() == 2);
    REQUIRE(d.labels == std::vector<int>{1, 0});
    REQUIRE(d.features(0, 0) == 0.5);
    REQUIRE(d.features(1, 1) == -2.5);
    std::filesystem::remove(path);
}

TEST_CASE("load_csv error positions and kinds", "[micronet][csv][errors]") {
    const std::string path = temp_path("prunescope_csv_bad.csv");

    SECTION("missing file") {
        REQUIRE_THROWS_AS(micronet::load_csv(temp_path("prunescope_none.csv"), "label"),
                          ParseError);
    }
    SECTION("missing label column names the column") {
        std::ofstream(path, std::ios::binary) << "a,b\n1,2\n";
        REQUIRE_THROWS_WITH(micronet::load_csv(path, "label"),
                            Catch::Matchers::ContainsSubstring("label"));
    }
    SECTION("ragged rows name the offending row") {
        std::ofstream(path, std::ios::binary) << "a,b,label\n1,2,0\n1,2\n";
        REQUIRE_THROWS_AS(micronet::load_csv(path, "label"), RaggedRows);
        REQUIRE_THROWS_WITH(micronet::load_csv(path, "label"),
                            Catch::Matchers::ContainsSubstring("row 2"));
    }
    SECTION("non-numeric cell names row and column") {
        std::ofstream(path, std::ios::binary) << "a,b,label\n1,oops,0\n";
        REQUIRE_THROWS_AS(micronet::load_csv(path, "label"), NonNumericCell);
        REQUIRE_THROWS_WITH(micronet::load_csv(path, "label"),
                            Catch::Matchers::ContainsSubstring("column 1"));
    }
    SECTION("fractional or negative labels are rejected") {
        std::ofstream(path, std::ios::binary) << "a,label\n1,1.5\n";
        REQUIRE_THROWS_AS(micronet::load_csv(path, "label"), InvalidLabel);
        std::ofstream(path, std::ios::binary) << "a,label\n1,-1\n";
        REQUIRE_THROWS_AS(micronet::load_csv(path, "label"), InvalidLabel);
    }
    SECTION("empty file") {
        std::ofstream(path, std::ios::binary);
        REQUIRE_THROWS_AS(micronet::load_csv(path, "label"), ParseError);
    }
    std::filesystem::remove(path);
}

TEST_CASE("csv write then read is the identity on features and labels", "[micronet][csv]") {
    RngStream rng(314);
    Dataset d = micronet::make_blobs(3, 20, 1.3, 4, rng);
    const std::string path = temp_path("prunescope_csv_roundtrip.csv");
    micronet::write_csv(d, path);
    Dataset back = micronet::load_csv(path, "label");
    REQUIRE(back.size() == d.size());
    REQUIRE(back.features.cols() == d.features.cols());
    REQUIRE(back.features.data() == d.features.data());
    REQUIRE(back.labels == d.labels);
    REQUIRE(back.classes == d.classes);
    // Split tags are not persisted; everything returns as train.
    for (Split s : back.split_tags) REQUIRE(s == Split::train);
    std::filesystem::remove(path);
}

TEST_CASE("init_model seeds deterministically with zero bias rows", "[micronet][model]") {
    RngStream a(11), b(11);
    MlpModel ma = micronet::init_model({4, 8, 3}, Activation::relu, a);
    MlpModel mb = micronet::init_model({4, 8, 3}, Activation::relu, b);
    REQUIRE(ma.layer_count() == 2);
    REQUIRE(ma.weights[0].rows() == 5);
    REQUIRE(ma.weights[0].cols() == 8);
    REQUIRE(ma.weights[1].rows() == 9);
    REQUIRE(ma.weights[1].cols() == 3);
    for (std::size_t l = 0; l < 2; ++l) {
        REQUIRE(ma.weights[l].data() == mb.weights[l].data());
        const std::size_t bias_row = ma.weights[l].rows() - 1;
        for (std::size_t k = 0; k < ma.weights[l].cols(); ++k)
            REQUIRE(ma.weights[l](bias_row, k) == 0.0);
    }
    REQUIRE_NOTHROW(ma.validate());

    RngStream c(1);
    REQUIRE_THROWS_AS(micronet::init_model({4}, Activation::relu, c), InvalidParameter);
    REQUIRE_THROWS_AS(micronet::init_model({4, 0, 3}, Activation::relu, c), InvalidParameter);
}

TEST_CASE("forward: zero weights and pure linear layers", "[micronet][forward]") {
    MlpModel zero;
    zero.layer_dims = {3, 4, 2};
    zero.weights = {DenseMatrix(4, 4), DenseMatrix(5, 2)};
    zero.activation = Activation::relu;
    DenseMatrix x(2, 3);
    x(0, 0) = 1.0;
    x(1, 2) = -2.0;
    DenseMatrix z = micronet::forward(zero, x);
    for (double v : z.data()) REQUIRE(v == 0.0);

    // Single affine layer: logits = X W + b exactly.
    MlpModel lin;
    lin.layer_dims = {2, 2};
    lin.weights = {DenseMatrix(3, 2)};
    lin.weights[0](0, 0) = 1.0;
    lin.weights[0](0, 1) = -1.0;
    lin.weights[0](1, 0) = 2.0;
    lin.weights[0](1, 1) = 0.5;
    lin.weights[0](2, 0) = 0.25;
    lin.weights[0](2, 1) = -0.25;
    DenseMatrix x2(1, 2);
    x2(0, 0) = 3.0;
    x2(0, 1) = -2.0;
    DenseMatrix z2 = micronet::forward(lin, x2);
    REQUIRE(z2(0, 0) == 3.0 * 1.0 + (-2.0) * 2.0 + 0.25);
    REQUIRE(z2(0, 1) == 3.0 * (-1.0) + (-2.0) * 0.5 - 0.25);

    DenseMatrix wrong(1, 3);
    REQUIRE_THROWS_AS(micronet::forward(lin, wrong), DimensionMismatch);
}

TEST_CASE("forward matches an independent re-implementation", "[micronet][forward][oracle]") {
    for (Activation act : {Activation::relu, Activation::tanh}) {
        RngStream rng(act == Activation::relu ? 501 : 502);
        MlpModel m = micronet::init_model({5, 7, 6, 4}, act, rng);
        // Give the bias rows nonzero values so they participate.
        for (auto& w : m.weights) {
            auto bias = w.row(w.rows() - 1);
            for (auto& v : bias) v = 0.1 * rng.next_normal();
        }
        DenseMatrix x(9, 5);
        for (auto& v : x.data()) v = rng.next_normal();
        DenseMatrix z = micronet::forward(m, x);
        for (std::size_t i = 0; i < x.rows(); ++i) {
            std::vector<double> row(x.row(i).begin(), x.row(i).end());
            const std::vector<double> naive = naive_forward_row(m, row);
            for (std::size_t k = 0; k < naive.size(); ++k)
                REQUIRE(std::abs(z(i, k) - naive[k]) < 1e-12);
        }
    }
}

TEST_CASE("cross-entropy of uniform logits is ln k", "[micronet][loss]") {
    MlpModel zero;
    zero.layer_dims = {2, 3};
    zero.weights = {DenseMatrix(3, 3)};
    DenseMatrix x(4, 2);
    for (auto& v : x.data()) v = 1.0;
    std::vector<int> y{0, 1, 2, 1};
    const micronet::LossGrad lg = micronet::loss_and_grad(zero, x, y, LossKind::cross_entropy);
    REQUIRE(lg.loss == Catch::Approx(std::log(3.0)).epsilon(1e-15));
}

TEST_CASE("correlation loss is minus the signed score", "[micronet][loss]") {
    MlpModel m;
    m.layer_dims = {1, 1};
    m.weights = {DenseMatrix(2, 1)};
    m.weights[0](0, 0) = 2.0;  // score = 2 x
    DenseMatrix x(1, 1);
    x(0, 0) = 1.0;
    std::vector<int> pos{1};
    REQUIRE(micronet::loss_and_grad(m, x, pos, LossKind::correlation).loss == -2.0);
    std::vector<int> neg{0};
    REQUIRE(micronet::loss_and_grad(m, x, neg, LossKind::correlation).loss == 2.0);

    std::vector<int> bad{2};
    REQUIRE_THROWS_AS(micronet::loss_and_grad(m, x, bad, LossKind::correlation), InvalidLabel);

    MlpModel two;
    two.layer_dims = {1, 2};
    two.weights = {DenseMatrix(2, 2)};
    REQUIRE_THROWS_AS(micronet::loss_and_grad(two, x, pos, LossKind::correlation),
                      InvalidParameter);
}

TEST_CASE("loss_and_grad rejects bad labels and empty batches", "[micronet][loss][errors]") {
    RngStream rng(77);
    MlpModel m = micronet::init_model({2, 3}, Activation::relu, rng);
    DenseMatrix x(1, 2);
    std::vector<int> bad{5};
    REQUIRE_THROWS_AS(micronet::loss_and_grad(m, x, bad, LossKind::cross_entropy), InvalidLabel);
    DenseMatrix empty(0, 2);
    std::vector<int> none;
    REQUIRE_THROWS_AS(micronet::loss_and_grad(m, empty, none, LossKind::cross_entropy),
                      InvalidParameter);
}

TEST_CASE("analytic gradients match central finite differences", "[micronet][loss][oracle]") {
    SECTION("cross-entropy, tanh hidden layers") {
        RngStream rng(601);
        MlpModel m = micronet::init_model({3, 5, 4}, Activation::tanh, rng);
        Dataset d = tiny_dataset(12, 3, 4, 602);
        REQUIRE(fd_gradient_max_rel_err(m, batch_of(d), d.labels, LossKind::cross_entropy) < 1e-4);
    }
    SECTION("cross-entropy, relu hidden layers") {
        RngStream rng(603);
        MlpModel m = micronet::init_model({3, 6, 3}, Activation::relu, rng);
        Dataset d = tiny_dataset(10, 3, 3, 604);
        REQUIRE(fd_gradient_max_rel_err(m, batch_of(d), d.labels, LossKind::cross_entropy) < 1e-4);
    }
    SECTION("correlation, tanh hidden layers") {
        RngStream rng(605);
        MlpModel m = micronet::init_model({4, 5, 1}, Activation::tanh, rng);
        Dataset d = tiny_dataset(14, 4, 2, 606);
        REQUIRE(fd_gradient_max_rel_err(m, batch_of(d), d.labels, LossKind::correlation) < 1e-4);
    }
}

TEST_CASE("evaluate: exact sweep semantics", "[micronet][evaluate]") {
    RngStream rng(71);
    Dataset d = micronet::make_blobs(3, 30, 1.0, 2, rng);
    RngStream mrng(72);
    MlpModel m = micronet::init_model({2, 8, 3}, Activation::relu, mrng);

    const micronet::EvalResult r = micronet::evaluate(m, d, Split::train);
    REQUIRE(r.n == d.indices_of(Split::train).size());
    REQUIRE(r.dataset_id == d.generator);

    // Summation-order oracle: mean of per-row losses recomputed one by one.
    double loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t i : d.indices_of(Split::train)) {
        DenseMatrix x(1, 2);
        x(0, 0) = d.features(i, 0);
        x(0, 1) = d.features(i, 1);
        const DenseMatrix z = micronet::forward(m, x);
        std::vector<double> zi(z.row(0).begin(), z.row(0).end());
        loss += naive_ce_row_loss(zi, d.labels[i]);
        std::size_t arg = 0;
        for (std::size_t k = 1; k < zi.size(); ++k)
            if (zi[k] > zi[arg]) arg = k;
        if (static_cast<int>(arg) == d.labels[i]) ++correct;
    }
    REQUIRE(r.loss == Catch::Approx(loss / static_cast<double>(r.n)).epsilon(1e-12));
    REQUIRE(r.accuracy == static_cast<double>(correct) / static_cast<double>(r.n));
}

TEST_CASE("evaluate: perfect separator reaches accuracy 1", "[micronet][evaluate]") {
    // 1-D two-class data at -2 and +2 with a hand-built sign readout.
    Dataset d;
    d.features = DenseMatrix(40, 1);
    d.labels.resize(40);
    d.split_tags.assign(40, Split::train);
    d.classes = 2;
    d.generator = "separable";
    for (std::size_t i = 0; i < 40; ++i) {
        d.labels[i] = static_cast<int>(i % 2);
        d.features(i, 0) = d.labels[i] == 0 ? -2.0 : 2.0;
    }
    for (std::size_t i = 0; i < 8; ++i) d.split_tags[i] = Split::test;

    MlpModel m;
    m.layer_dims = {1, 2};
    m.weights = {DenseMatrix(2, 2)};
    m.weights[0](0, 0) = -1.0;
    m.weights[0](0, 1) = 1.0;
    REQUIRE(micronet::evaluate(m, d, Split::train).accuracy == 1.0);
    REQUIRE(micronet::evaluate(m, d, Split::test).accuracy == 1.0);
}

TEST_CASE("evaluate: random logits sit at chance level", "[micronet][evaluate]") {
    const std::size_t k = 4;
    const std::size_t n = 4000;
    Dataset d = tiny_dataset(n, 3, k, 811);
    RngStream rng(812);
    MlpModel m = micronet::init_model({3, 8, k}, Activation::tanh, rng);
    const double acc = micronet::evaluate(m, d, Split::train).accuracy;
    const double p = 1.0 / static_cast<double>(k);
    const double sigma = std::sqrt(p * (1.0 - p) / static_cast<double>(n));
    REQUIRE(std::abs(acc - p) < 4.0 * sigma);
}

TEST_CASE("evaluate rejects empty splits", "[micronet][evaluate][errors]") {
    Dataset d = tiny_dataset(6, 2, 2, 90);
    RngStream rng(91);
    MlpModel m = micronet::init_model({2, 2}, Activation::relu, rng);
    REQUIRE_THROWS_AS(micronet::evaluate(m, d, Split::test), EmptySplit);
}

TEST_CASE("lr schedules and config validation", "[micronet][train]") {
    micronet::LrSchedule constant;
    REQUIRE(constant.rate_at(0.05, 0) == 0.05);
    REQUIRE(constant.rate_at(0.05, 99) == 0.05);

    micronet::LrSchedule step;
    step.kind = micronet::LrSchedule::Kind::step;
    step.gamma = 0.5;
    step.every = 2;
    REQUIRE(step.rate_at(0.1, 0) == 0.1);
    REQUIRE(step.rate_at(0.1, 1) == 0.1);
    REQUIRE(step.rate_at(0.1, 2) == Catch::Approx(0.05));
    REQUIRE(step.rate_at(0.1, 5) == Catch::Approx(0.025));
    step.every = 0;
    REQUIRE_THROWS_AS(step.rate_at(0.1, 0), InvalidParameter);

    TrainConfig bad;
    bad.learning_rate = 0.0;
    REQUIRE_THROWS_AS(bad.validate(), InvalidParameter);
    bad.learning_rate = 0.1;
    bad.momentum = 1.0;
    REQUIRE_THROWS_AS(bad.validate(), InvalidParameter);
    bad.momentum = 0.9;
    bad.batch_size = 0;
    REQUIRE_THROWS_AS(bad.validate(), InvalidParameter);
}

TEST_CASE("sgd_train: zero epochs leaves the model untouched", "[micronet][train]") {
    RngStream rng(21);
    Dataset d = micronet::make_blobs(2, 20, 0.7, 2, rng);
    RngStream mrng(22);
    MlpModel m = micronet::init_model({2, 4, 2}, Activation::relu, mrng);
    TrainConfig cfg;
    cfg.epochs = 0;
    const micronet::TrainResult tr = micronet::sgd_train(m, d, cfg);
    REQUIRE(tr.history.empty());
    for (std::size_t l = 0; l < m.layer_count(); ++l)
        REQUIRE(tr.model.weights[l].data() == m.weights[l].data());
}

TEST_CASE("sgd_train is bit-deterministic in (config, seed)", "[micronet][train]") {
    RngStream rng(31);
    Dataset d = micronet::make_blobs(3, 30, 0.8, 2, rng);
    RngStream mrng(32);
    MlpModel m = micronet::init_model({2, 6, 3}, Activation::relu, mrng);
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.seed = 555;

    const micronet::TrainResult a = micronet::sgd_train(m, d, cfg);
    const micronet::TrainResult b = micronet::sgd_train(m, d, cfg);
    REQUIRE(a.history.size() == 4);
    for (std::size_t l = 0; l < m.layer_count(); ++l)
        REQUIRE(a.model.weights[l].data() == b.model.weights[l].data());
    for (std::size_t e = 0; e < 4; ++e) {
        REQUIRE(a.history[e].epoch == e + 1);
        REQUIRE(a.history[e].train.loss == b.history[e].train.loss);
        REQUIRE(a.history[e].test.accuracy == b.history[e].test.accuracy);
        REQUIRE(a.history[e].learning_rate == cfg.learning_rate);
    }

    cfg.seed = 556;
    const micronet::TrainResult c = micronet::sgd_train(m, d, cfg);
    REQUIRE(a.model.weights[0].data() != c.model.weights[0].data());
}

TEST_CASE("sgd_train records schedule rates in the history", "[micronet][train]") {
    RngStream rng(41);
    Dataset d = micronet::make_blobs(2, 15, 0.6, 2, rng);
    RngStream mrng(42);
    MlpModel m = micronet::init_model({2, 3, 2}, Activation::tanh, mrng);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.learning_rate = 0.1;
    cfg.schedule.kind = micronet::LrSchedule::Kind::step;
    cfg.schedule.gamma = 0.5;
    cfg.schedule.every = 2;
    const micronet::TrainResult tr = micronet::sgd_train(m, d, cfg);
    REQUIRE(tr.history[0].learning_rate == 0.1);
    REQUIRE(tr.history[1].learning_rate == 0.1);
    REQUIRE(tr.history[2].learning_rate == Catch::Approx(0.05));
    REQUIRE(tr.history[3].learning_rate == Catch::Approx(0.05));
    REQUIRE(tr.history[4].learning_rate == Catch::Approx(0.025));
}

TEST_CASE("sgd_train keeps masked coordinates at literal zero", "[micronet][train][mask]") {
    RngStream rng(51);
    Dataset d = micronet::make_blobs(3, 40, 0.9, 2, rng);
    RngStream mrng(52);
    MlpModel m = micronet::init_model({2, 10, 3}, Activation::relu, mrng);

    const std::size_t layer = 1;
    pruning::WeightVector w = micronet::layer_weight_vector(m, layer);
    RngStream prng(53);
    const pruning::PruneMask mask =
        pruning::magnitude_mask(w, 0.5, pruning::PruneMethod::random, &prng);
    micronet::MaskSet masks;
    masks.emplace(layer, mask);

    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.seed = 54;
    const micronet::TrainResult tr = micronet::sgd_train(m, d, cfg, &masks);
    const pruning::WeightVector after = micronet::layer_weight_vector(tr.model, layer);
    std::size_t zeros = 0;
    for (std::size_t i = 0; i < mask.dim(); ++i) {
        if (mask.bits[i] == 0) {
            REQUIRE(after.values[i] == 0.0);
            REQUIRE(!std::signbit(after.values[i]));
            ++zeros;
        } else {
            REQUIRE(after.values[i] != 0.0);
        }
    }
    REQUIRE(zeros == pruning::pruned_count(0.5, mask.dim()));
}

TEST_CASE("sgd_train surfaces divergence as NonFiniteLoss", "[micronet][train][errors]") {
    Dataset d;
    d.features = DenseMatrix(4, 1);
    for (auto& v : d.features.data()) v = 1e150;
    d.labels = {0, 1, 0, 1};
    d.split_tags.assign(4, Split::train);
    d.classes = 2;
    d.generator = "diverge";
    RngStream mrng(61);
    MlpModel m = micronet::init_model({1, 2}, Activation::relu, mrng);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 1;
    cfg.learning_rate = 1e308;
    REQUIRE_THROWS_AS(micronet::sgd_train(m, d, cfg), NonFiniteLoss);
}

TEST_CASE("sgd_train golden: reference blobs run", "[micronet][train][golden]") {
    RngStream rng(1001);
    Dataset data = micronet::make_blobs(3, 800, 0.9, 2, rng);
    RngStream mrng(2002);
    MlpModel model = micronet::init_model({2, 16, 3}, Activation::relu, mrng);
    const double initial_loss = micronet::evaluate(model, data, Split::train).loss;

    TrainConfig cfg;
    cfg.learning_rate = 0.05;
    cfg.epochs = 30;
    cfg.seed = 3003;
    const micronet::TrainResult tr = micronet::sgd_train(model, data, cfg);
    REQUIRE(tr.history.size() == 30);
    // Net decrease across the first five epochs; the run converges fast, so
    // per-epoch monotonicity is not asserted.
    for (std::size_t e = 0; e < 5; ++e) REQUIRE(tr.history[e].train.loss < initial_loss);
    REQUIRE(tr.history[4].train.loss < tr.history[0].train.loss);
    REQUIRE(tr.history.back().train.accuracy == 0.9838541666666667);
    REQUIRE(tr.history.back().test.accuracy == 0.99375);
}

TEST_CASE("fine_tune equals masked sgd_train and snapshots every epoch",
          "[micronet][fine_tune]") {
    RngStream rng(71);
    Dataset d = micronet::make_blobs(3, 40, 0.9, 2, rng);
    RngStream mrng(72);
    MlpModel m = micronet::init_model({2, 8, 3}, Activation::relu, mrng);

    const std::size_t layer = m.last_layer();
    pruning::WeightVector w = micronet::layer_weight_vector(m, layer);
    const pruning::PruneMask mask = pruning::magnitude_mask(w, 0.5, pruning::PruneMethod::lowest);
    micronet::MaskSet masks;
    masks.emplace(layer, mask);
    MlpModel pruned = m;
    micronet::enforce_masks(pruned, masks);

    TrainConfig cfg;
    cfg.epochs = 6;
    cfg.seed = 73;
    const micronet::FineTuneResult ft = micronet::fine_tune(pruned, masks, d, cfg, layer);
    const micronet::TrainResult direct = micronet::sgd_train(pruned, d, cfg, &masks);

    for (std::size_t l = 0; l < m.layer_count(); ++l)
        REQUIRE(ft.model.weights[l].data() == direct.model.weights[l].data());
    REQUIRE(ft.history.size() == direct.history.size());
    for (std::size_t e = 0; e < ft.history.size(); ++e)
        REQUIRE(ft.history[e].train.loss == direct.history[e].train.loss);

    REQUIRE(ft.snapshots.size() == 6);
    for (std::size_t e = 0; e < 6; ++e) {
        REQUIRE(ft.snapshots[e].dim() == mask.dim());
        REQUIRE(ft.snapshots[e].origin.find("@epoch" + std::to_string(e + 1)) !=
                std::string::npos);
        for (std::size_t i = 0; i < mask.dim(); ++i)
            if (mask.bits[i] == 0) REQUIRE(ft.snapshots[e].values[i] == 0.0);
    }
    const pruning::WeightVector last = micronet::layer_weight_vector(ft.model, layer);
    REQUIRE(ft.snapshots.back().values == last.values);
}

TEST_CASE("fine_tune: zero epochs produce no snapshots and no movement",
          "[micronet][fine_tune]") {
    RngStream rng(81);
    Dataset d = micronet::make_blobs(2, 20, 0.6, 2, rng);
    RngStream mrng(82);
    MlpModel m = micronet::init_model({2, 4, 2}, Activation::relu, mrng);
    const std::size_t layer = 0;
    pruning::WeightVector w = micronet::layer_weight_vector(m, layer);
    const pruning::PruneMask mask = pruning::magnitude_mask(w, 0.3, pruning::PruneMethod::highest);
    micronet::MaskSet masks;
    masks.emplace(layer, mask);
    micronet::enforce_masks(m, masks);

    TrainConfig cfg;
    cfg.epochs = 0;
    const micronet::FineTuneResult ft = micronet::fine_tune(m, masks, d, cfg, layer);
    REQUIRE(ft.snapshots.empty());
    REQUIRE(ft.history.empty());
    for (std::size_t l = 0; l < m.layer_count(); ++l)
        REQUIRE(ft.model.weights[l].data() == m.weights[l].data());

    REQUIRE_THROWS_AS(micronet::fine_tune(m, masks, d, cfg, 7), InvalidParameter);
}

TEST_CASE("mask plumbing validates layers and bit counts", "[micronet][mask][errors]") {
    RngStream rng(91);
    MlpModel m = micronet::init_model({2, 4, 2}, Activation::relu, rng);
    micronet::MaskSet missing;
    pruning::PruneMask stray;
    stray.bits.assign(8, 1);
    missing.emplace(5, stray);
    REQUIRE_THROWS_AS(micronet::require_masks_fit(m, missing), InvalidParameter);

    micronet::MaskSet wrong;
    pruning::PruneMask short_mask;
    short_mask.bits.assign(7, 1);
    wrong.emplace(0, short_mask);
    REQUIRE_THROWS_AS(micronet::require_masks_fit(m, wrong), DimensionMismatch);
}

TEST_CASE("layer_weight_vector round-trips with and without bias", "[micronet][model]") {
    RngStream rng(95);
    MlpModel m = micronet::init_model({3, 4, 2}, Activation::tanh, rng);
    for (auto& w : m.weights)
        for (auto& v : w.data())
            if (v == 0.0) v = 0.5;

    pruning::WeightVector no_bias = micronet::layer_weight_vector(m, 0, false);
    REQUIRE(no_bias.dim() == 3 * 4);
    pruning::WeightVector with_bias = micronet::layer_weight_vector(m, 0, true);
    REQUIRE(with_bias.dim() == 4 * 4);
    REQUIRE(no_bias.origin == "layer0");

    std::vector<double> replacement(no_bias.dim());
    for (std::size_t i = 0; i < replacement.size(); ++i)
        replacement[i] = static_cast<double>(i) + 0.25;
    micronet::set_layer_from_vector(m, 0, replacement, false);
    const pruning::WeightVector back = micronet::layer_weight_vector(m, 0, false);
    REQUIRE(back.values == replacement);
    // The bias row is untouched by a non-bias write.
    REQUIRE(m.weights[0](3, 0) == with_bias.values[3 * 4]);

    REQUIRE_THROWS_AS(micronet::set_layer_from_vector(m, 0, std::vector<double>(5), false),
                      DimensionMismatch);
    REQUIRE_THROWS_AS(micronet::layer_weight_vector(m, 9), InvalidParameter);
}

TEST_CASE("hessian_lambda_max_of recovers a quadratic's curvature exactly",
          "[micronet][hessian]") {
    const double lambda = 3.75;
    const std::function<std::vector<double>(std::span<const double>)> grad =
        [&](std::span<const double> w) {
            std::vector<double> g(w.size());
            for (std::size_t i = 0; i < w.size(); ++i) g[i] = lambda * w[i];
            return g;
        };
    std::vector<double> w0{0.4, -1.2, 2.0};
    RngStream rng(101);
    const double est = micronet::hessian_lambda_max_of(grad, w0, 1e-12, 500, rng);
    REQUIRE(est == Catch::Approx(lambda).epsilon(1e-9));
}

TEST_CASE("hessian_lambda_max dominates probe Rayleigh quotients", "[micronet][hessian]") {
    RngStream rng(111);
    Dataset d = micronet::make_blobs(3, 40, 0.9, 2, rng);
    RngStream mrng(112);
    MlpModel m = micronet::init_model({2, 4, 3}, Activation::tanh, mrng);
    const std::size_t layer = m.last_layer();

    RngStream hrng(113);
    const double est =
        micronet::hessian_lambda_max(m, d, layer, LossKind::cross_entropy, 1e-10, 2000, hrng);

    // Hessian-vector products for the probes, same finite-difference scheme.
    const std::vector<std::size_t> idx = d.indices_of(Split::train);
    DenseMatrix x(idx.size(), 2);
    std::vector<int> y(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        x(i, 0) = d.features(idx[i], 0);
        x(i, 1) = d.features(idx[i], 1);
        y[i] = d.labels[idx[i]];
    }
    MlpModel probe_model = m;
    const std::vector<double> w0 = m.weights[layer].data();
    auto grad_at = [&](const std::vector<double>& w) {
        probe_model.weights[layer].data() = w;
        return micronet::loss_and_grad(probe_model, x, y, LossKind::cross_entropy)
            .grads[layer]
            .data();
    };
    const double h = 1e-4 * (1.0 + numkernel::norm(w0));
    RngStream prng(114);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<double> v(w0.size()), wp(w0.size()), wm(w0.size());
        double vn = 0.0;
        for (auto& vi : v) {
            vi = prng.next_normal();
            vn += vi * vi;
        }
        for (std::size_t i = 0; i < w0.size(); ++i) {
            wp[i] = w0[i] + h * v[i];
            wm[i] = w0[i] - h * v[i];
        }
        const std::vector<double> gp = grad_at(wp);
        const std::vector<double> gm = grad_at(wm);
        double rayleigh = 0.0;
        for (std::size_t i = 0; i < w0.size(); ++i)
            rayleigh += v[i] * (gp[i] - gm[i]) / (2.0 * h);
        rayleigh /= vn;
        REQUIRE(est >= rayleigh - 1e-6);
    }
}

TEST_CASE("hessian_lambda_max matches a dense finite-difference Hessian",
          "[micronet][hessian][oracle]") {
    RngStream rng(121);
    Dataset d = micronet::make_blobs(3, 30, 0.8, 2, rng);
    RngStream mrng(122);
    MlpModel m = micronet::init_model({2, 4, 3}, Activation::tanh, mrng);
    const std::size_t layer = m.last_layer();  // (4 + 1) x 3 = 15 parameters

    const std::vector<std::size_t> idx = d.indices_of(Split::train);
    DenseMatrix x(idx.size(), 2);
    std::vector<int> y(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        x(i, 0) = d.features(idx[i], 0);
        x(i, 1) = d.features(idx[i], 1);
        y[i] = d.labels[idx[i]];
    }

    MlpModel probe = m;
    auto grad_at = [&](const std::vector<double>& w) {
        probe.weights[layer].data() = w;
        return micronet::loss_and_grad(probe, x, y, LossKind::cross_entropy)
            .grads[layer]
            .data();
    };
    const std::vector<double> w0 = m.weights[layer].data();
    const std::size_t dim = w0.size();
    REQUIRE(dim == 15);

    // Column i of the Hessian by central differences of the analytic gradient,
    // with a step independent of the estimator's.
    const double h = 1e-5 * (1.0 + numkernel::norm(w0));
    DenseMatrix hess(dim, dim);
    for (std::size_t i = 0; i < dim; ++i) {
        std::vector<double> wp = w0, wm = w0;
        wp[i] += h;
        wm[i] -= h;
        const std::vector<double> gp = grad_at(wp);
        const std::vector<double> gm = grad_at(wm);
        for (std::size_t j = 0; j < dim; ++j) hess(j, i) = (gp[j] - gm[j]) / (2.0 * h);
    }
    for (std::size_t i = 0; i < dim; ++i)
        for (std::size_t j = i + 1; j < dim; ++j) {
            const double s = 0.5 * (hess(i, j) + hess(j, i));
            hess(i, j) = s;
            hess(j, i) = s;
        }
    const numkernel::SymEigen eig = numkernel::sym_eigen(hess);
    double dominant = 0.0;
    for (double v : eig.values)
        if (std::abs(v) > std::abs(dominant)) dominant = v;
    // Cross-entropy restricted to the output layer is convex, so the dominant
    // eigenvalue is the top one.
    REQUIRE(dominant > 0.0);
    REQUIRE(dominant == Catch::Approx(eig.values.back()));

    RngStream hrng(123);
    const double est =
        micronet::hessian_lambda_max(m, d, layer, LossKind::cross_entropy, 1e-10, 2000, hrng);
    REQUIRE(est == Catch::Approx(dominant).epsilon(1e-3));

    REQUIRE_THROWS_AS(
        micronet::hessian_lambda_max(m, d, 9, LossKind::cross_entropy, 1e-10, 100, hrng),
        InvalidParameter);
}
