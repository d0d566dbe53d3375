#pragma once

// Minimal deterministic feedforward trainer: forward/backward passes, SGD
// with momentum, masked fine-tuning, exact evaluation, Hessian spectral
// estimation, and desk-scale datasets.
//
// Determinism contract: every routine here is single-threaded and consumes
// randomness only from explicitly passed RngStream objects, so a (config,
// seed) pair fixes the final weights bit-for-bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "prunescope/errors.hpp"
#include "prunescope/numkernel.hpp"
#include "prunescope/pruning.hpp"

namespace prunescope::micronet {

using numkernel::DenseMatrix;
using numkernel::RngStream;
using pruning::PruneMask;
using pruning::WeightVector;

enum class Activation { relu, tanh };
enum class LossKind { cross_entropy, correlation };
enum class Split : std::uint8_t { train = 0, test = 1 };

inline std::string_view activation_name(Activation a) {
    return a == Activation::relu ? "relu" : "tanh";
}

inline Activation activation_from_name(std::string_view name) {
    if (name == "relu") return Activation::relu;
    if (name == "tanh") return Activation::tanh;
    throw ParseError("unknown activation '" + std::string(name) + "'");
}

inline std::string_view loss_kind_name(LossKind k) {
    return k == LossKind::cross_entropy ? "cross-entropy" : "correlation";
}

inline LossKind loss_kind_from_name(std::string_view name) {
    if (name == "cross-entropy") return LossKind::cross_entropy;
    if (name == "correlation") return LossKind::correlation;
    throw ParseError("unknown loss '" + std::string(name) + "'");
}

inline std::string_view split_name(Split s) { return s == Split::train ? "train" : "test"; }

// ---------------------------------------------------------------------------
// Configs and results.
// ---------------------------------------------------------------------------

struct LrSchedule {
    enum class Kind { constant, step } kind = Kind::constant;
    double gamma = 0.5;       // step: multiplier applied every `every` epochs
    std::size_t every = 10;

    double rate_at(double base, std::size_t epoch) const {
        if (kind == Kind::constant) return base;
        if (every == 0) throw InvalidParameter("LrSchedule: step period must be positive");
        return base * std::pow(gamma, static_cast<double>(epoch / every));
    }
};

struct TrainConfig {
    double learning_rate = 0.05;
    double momentum = 0.9;
    std::size_t epochs = 0;
    std::size_t batch_size = 32;
    LrSchedule schedule{};
    std::uint64_t seed = 0;
    LossKind loss = LossKind::cross_entropy;

    void validate() const {
        if (!(learning_rate > 0.0)) throw InvalidParameter("TrainConfig: learning_rate must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0))
            throw InvalidParameter("TrainConfig: momentum must lie in [0, 1)");
        if (batch_size < 1) throw InvalidParameter("TrainConfig: batch_size must be positive");
    }
};

struct EvalResult {
    std::string dataset_id;
    Split split = Split::train;
    double loss = 0.0;
    double accuracy = 0.0;
    std::size_t n = 0;
};

// ---------------------------------------------------------------------------
// Datasets.
// ---------------------------------------------------------------------------

struct Dataset {
    DenseMatrix features;            // n x d0
    std::vector<int> labels;         // values in [0, classes)
    std::vector<Split> split_tags;   // per row
    std::size_t classes = 0;
    std::string generator;           // provenance descriptor, doubles as dataset id

    std::size_t size() const { return labels.size(); }

    std::vector<std::size_t> indices_of(Split s) const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < split_tags.size(); ++i)
            if (split_tags[i] == s) idx.push_back(i);
        return idx;
    }

    void validate() const {
        if (features.rows() != labels.size() || features.rows() != split_tags.size())
            throw DimensionMismatch("Dataset: row counts disagree");
        for (int y : labels)
            if (y < 0 || static_cast<std::size_t>(y) >= classes)
                throw InvalidLabel("Dataset: label " + std::to_string(y) + " outside [0, " +
                                   std::to_string(classes) + ")");
    }
};

// Reassigns split tags: a seeded shuffle sends floor(test_fraction * n) rows
// to test, the rest to train.
inline void assign_split(Dataset& data, double test_fraction, std::uint64_t seed) {
    if (!(test_fraction >= 0.0 && test_fraction < 1.0))
        throw InvalidParameter("assign_split: test_fraction must lie in [0, 1)");
    const std::size_t n = data.size();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    RngStream rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.next_index(i));
        std::swap(perm[i - 1], perm[j]);
    }
    const std::size_t n_test =
        static_cast<std::size_t>(std::floor(test_fraction * static_cast<double>(n) + 1e-9));
    data.split_tags.assign(n, Split::train);
    for (std::size_t i = 0; i < n_test; ++i) data.split_tags[perm[i]] = Split::test;
}

// Gaussian clusters around seeded uniform centers in [-4, 4]^dim, class-major
// row order, then a seeded 80/20 split. Draw order is frozen: centers
// row-major, then per-row normals, then the split shuffle.
inline Dataset make_blobs(std::size_t classes, std::size_t n_per_class, double spread,
                          std::size_t dim, RngStream& rng) {
    if (classes < 2) throw InvalidParameter("make_blobs: need at least 2 classes");
    if (n_per_class < 1) throw InvalidParameter("make_blobs: need at least 1 sample per class");
    if (dim < 1) throw InvalidParameter("make_blobs: dimension must be at least 1");
    if (!(spread >= 0.0)) throw InvalidParameter("make_blobs: spread must be nonnegative");

    DenseMatrix centers(classes, dim);
    for (std::size_t c = 0; c < classes; ++c)
        for (std::size_t j = 0; j < dim; ++j) centers(c, j) = -4.0 + 8.0 * rng.next_double();

    const std::size_t n = classes * n_per_class;
    Dataset data;
    data.features = DenseMatrix(n, dim);
    data.labels.resize(n);
    data.classes = classes;
    std::size_t row = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t i = 0; i < n_per_class; ++i, ++row) {
            for (std::size_t j = 0; j < dim; ++j)
                data.features(row, j) = centers(c, j) + spread * rng.next_normal();
            data.labels[row] = static_cast<int>(c);
        }
    }
    data.split_tags.assign(n, Split::train);
    {
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = n; i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(rng.next_index(i));
            std::swap(perm[i - 1], perm[j]);
        }
        const std::size_t n_test = n / 5;
        for (std::size_t i = 0; i < n_test; ++i) data.split_tags[perm[i]] = Split::test;
    }
    char desc[160];
    std::snprintf(desc, sizeof desc, "blobs(classes=%zu,n_per_class=%zu,spread=%g,dim=%zu,seed=%llu)",
                  classes, n_per_class, spread, dim,
                  static_cast<unsigned long long>(rng.seed()));
    data.generator = desc;
    return data;
}

namespace detail {

inline double parse_cell(const std::string& cell, std::size_t row, std::size_t col) {
    const char* begin = cell.c_str();
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end == begin || *end != '\0')
        throw NonNumericCell("cell '" + cell + "' at row " + std::to_string(row) + ", column " +
                             std::to_string(col) + " is not numeric");
    return v;
}

inline std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    cells.push_back(cur);
    return cells;
}

}  // namespace detail

// Parses a rectangular numeric CSV. label_column names a header column or is
// a 0-based index when the file has no header (or the name is numeric). All
// rows land in the train split; call assign_split to carve out a test set.
inline Dataset load_csv(const std::string& path, const std::string& label_column) {
    std::ifstream in(path);
    if (!in) throw ParseError("load_csv: cannot open '" + path + "'");

    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() && in.peek() == std::char_traits<char>::eof()) break;
        rows.push_back(detail::split_line(line));
    }
    if (rows.empty()) throw ParseError("load_csv: '" + path + "' is empty");

    const std::size_t width = rows[0].size();
    for (std::size_t r = 1; r < rows.size(); ++r)
        if (rows[r].size() != width)
            throw RaggedRows("row " + std::to_string(r) + " has " + std::to_string(rows[r].size()) +
                             " cells, expected " + std::to_string(width));

    bool has_header = false;
    for (const auto& cell : rows[0]) {
        const char* begin = cell.c_str();
        char* end = nullptr;
        std::strtod(begin, &end);
        if (end == begin || *end != '\0') {
            has_header = true;
            break;
        }
    }

    std::size_t label_idx = width;
    if (has_header) {
        for (std::size_t c = 0; c < width; ++c)
            if (rows[0][c] == label_column) label_idx = c;
    }
    if (label_idx == width) {
        char* end = nullptr;
        const long v = std::strtol(label_column.c_str(), &end, 10);
        if (end != label_column.c_str() && *end == '\0' && v >= 0 &&
            static_cast<std::size_t>(v) < width)
            label_idx = static_cast<std::size_t>(v);
    }
    if (label_idx == width)
        throw ParseError("load_csv: label column '" + label_column + "' not found in '" + path +
                         "'");

    const std::size_t first_data = has_header ? 1 : 0;
    const std::size_t n = rows.size() - first_data;
    if (n == 0) throw ParseError("load_csv: '" + path + "' has no data rows");

    Dataset data;
    data.features = DenseMatrix(n, width - 1);
    data.labels.resize(n);
    int max_label = 0;
    for (std::size_t r = 0; r < n; ++r) {
        const auto& cells = rows[r + first_data];
        std::size_t fcol = 0;
        for (std::size_t c = 0; c < width; ++c) {
            const double v = detail::parse_cell(cells[c], r + first_data, c);
            if (c == label_idx) {
                const double rounded = std::nearbyint(v);
                if (std::abs(v - rounded) > 1e-9 || rounded < 0.0)
                    throw InvalidLabel("label '" + cells[c] + "' at row " +
                                       std::to_string(r + first_data) +
                                       " is not a nonnegative integer");
                data.labels[r] = static_cast<int>(rounded);
                max_label = std::max(max_label, data.labels[r]);
            } else {
                data.features(r, fcol++) = v;
            }
        }
    }
    data.classes = static_cast<std::size_t>(max_label) + 1;
    data.split_tags.assign(n, Split::train);
    data.generator = "csv(" + path + ",label=" + label_column + ")";
    return data;
}

// Writes features plus a trailing `label` column; floats are emitted with 17
// significant digits so a read-back reproduces them exactly. Split tags are
// not persisted.
inline void write_csv(const Dataset& data, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("write_csv: cannot open '" + path + "' for writing");
    const std::size_t d = data.features.cols();
    for (std::size_t c = 0; c < d; ++c) out << "f" << c << ",";
    out << "label\n";
    char buf[40];
    for (std::size_t r = 0; r < data.size(); ++r) {
        for (std::size_t c = 0; c < d; ++c) {
            std::snprintf(buf, sizeof buf, "%.17g", data.features(r, c));
            out << buf << ",";
        }
        out << data.labels[r] << "\n";
    }
}

// ---------------------------------------------------------------------------
// Model.
// ---------------------------------------------------------------------------

// weights[l] is (dims[l] + 1) x dims[l+1]; the extra last row is the bias.
struct MlpModel {
    std::vector<std::size_t> layer_dims;
    std::vector<DenseMatrix> weights;
    Activation activation = Activation::relu;

    std::size_t layer_count() const { return weights.size(); }
    std::size_t last_layer() const { return weights.size() - 1; }

    void validate() const {
        if (layer_dims.size() < 2) throw InvalidParameter("MlpModel: need at least one layer");
        if (weights.size() != layer_dims.size() - 1)
            throw DimensionMismatch("MlpModel: weight count does not match layer dims");
        for (std::size_t l = 0; l < weights.size(); ++l) {
            if (weights[l].rows() != layer_dims[l] + 1 || weights[l].cols() != layer_dims[l + 1])
                throw DimensionMismatch("MlpModel: layer " + std::to_string(l) + " shape mismatch");
            for (double v : weights[l].data())
                if (!std::isfinite(v))
                    throw InvalidParameter("MlpModel: non-finite weight in layer " +
                                           std::to_string(l));
        }
    }
};

// Seeded init: non-bias entries ~ normal * sqrt(1 / fan_in) drawn row-major
// per layer; bias rows start at zero.
inline MlpModel init_model(std::vector<std::size_t> dims, Activation act, RngStream& rng) {
    if (dims.size() < 2) throw InvalidParameter("init_model: need input and output dims");
    for (std::size_t d : dims)
        if (d < 1) throw InvalidParameter("init_model: all layer dims must be positive");
    MlpModel m;
    m.layer_dims = std::move(dims);
    m.activation = act;
    m.weights.reserve(m.layer_dims.size() - 1);
    for (std::size_t l = 0; l + 1 < m.layer_dims.size(); ++l) {
        const std::size_t fan_in = m.layer_dims[l];
        const std::size_t fan_out = m.layer_dims[l + 1];
        DenseMatrix w(fan_in + 1, fan_out);
        const double scale = std::sqrt(1.0 / static_cast<double>(fan_in));
        for (std::size_t j = 0; j < fan_in; ++j)
            for (std::size_t k = 0; k < fan_out; ++k) w(j, k) = scale * rng.next_normal();
        m.weights.push_back(std::move(w));
    }
    return m;
}

// Flattens a layer's weight matrix row-major; by default the bias row is
// excluded (masks cover only true weights).
inline WeightVector layer_weight_vector(const MlpModel& m, std::size_t layer,
                                        bool include_bias = false) {
    if (layer >= m.layer_count()) throw InvalidParameter("layer_weight_vector: no such layer");
    const DenseMatrix& w = m.weights[layer];
    const std::size_t rows = include_bias ? w.rows() : w.rows() - 1;
    WeightVector out;
    out.values.reserve(rows * w.cols());
    for (std::size_t j = 0; j < rows; ++j)
        for (std::size_t k = 0; k < w.cols(); ++k) out.values.push_back(w(j, k));
    out.origin = "layer" + std::to_string(layer);
    return out;
}

inline void set_layer_from_vector(MlpModel& m, std::size_t layer, std::span<const double> v,
                                  bool include_bias = false) {
    if (layer >= m.layer_count()) throw InvalidParameter("set_layer_from_vector: no such layer");
    DenseMatrix& w = m.weights[layer];
    const std::size_t rows = include_bias ? w.rows() : w.rows() - 1;
    if (v.size() != rows * w.cols())
        throw DimensionMismatch("set_layer_from_vector: expected " +
                                std::to_string(rows * w.cols()) + " values, got " +
                                std::to_string(v.size()));
    std::size_t pos = 0;
    for (std::size_t j = 0; j < rows; ++j)
        for (std::size_t k = 0; k < w.cols(); ++k) w(j, k) = v[pos++];
}

// Per-layer masks over the non-bias weight block, row-major.
using MaskSet = std::map<std::size_t, PruneMask>;

inline void require_masks_fit(const MlpModel& m, const MaskSet& masks) {
    for (const auto& [layer, mask] : masks) {
        if (layer >= m.layer_count())
            throw InvalidParameter("mask refers to missing layer " + std::to_string(layer));
        const std::size_t want = m.layer_dims[layer] * m.layer_dims[layer + 1];
        if (mask.dim() != want)
            throw DimensionMismatch("mask for layer " + std::to_string(layer) + " has " +
                                    std::to_string(mask.dim()) + " bits, expected " +
                                    std::to_string(want));
    }
}

// Writes literal zeros into every masked coordinate.
inline void enforce_masks(MlpModel& m, const MaskSet& masks) {
    for (const auto& [layer, mask] : masks) {
        DenseMatrix& w = m.weights[layer];
        const std::size_t cols = w.cols();
        for (std::size_t b = 0; b < mask.bits.size(); ++b)
            if (mask.bits[b] == 0) w(b / cols, b % cols) = 0.0;
    }
}

// ---------------------------------------------------------------------------
// Forward / loss / gradients.
// ---------------------------------------------------------------------------

namespace detail {

struct ForwardTrace {
    std::vector<DenseMatrix> post;  // post[0] = input, post[l+1] = activation of layer l
};

// Affine layer: out = [a | 1] * W  (bias row last).
inline DenseMatrix affine(const DenseMatrix& a, const DenseMatrix& w) {
    const std::size_t n = a.rows();
    const std::size_t d_in = a.cols();
    const std::size_t d_out = w.cols();
    DenseMatrix out(n, d_out);
    for (std::size_t i = 0; i < n; ++i) {
        auto o = out.row(i);
        auto bias = w.row(d_in);
        for (std::size_t k = 0; k < d_out; ++k) o[k] = bias[k];
        auto ai = a.row(i);
        for (std::size_t j = 0; j < d_in; ++j) {
            const double aij = ai[j];
            if (aij == 0.0) continue;
            auto wj = w.row(j);
            for (std::size_t k = 0; k < d_out; ++k) o[k] += aij * wj[k];
        }
    }
    return out;
}

inline DenseMatrix forward_trace(const MlpModel& m, const DenseMatrix& x, ForwardTrace* trace) {
    if (x.cols() != m.layer_dims[0])
        throw DimensionMismatch("forward: input has " + std::to_string(x.cols()) +
                                " features, model expects " + std::to_string(m.layer_dims[0]));
    if (trace) {
        trace->post.clear();
        trace->post.push_back(x);
    }
    DenseMatrix cur = x;
    for (std::size_t l = 0; l < m.layer_count(); ++l) {
        DenseMatrix z = affine(cur, m.weights[l]);
        if (l + 1 < m.layer_count()) {
            if (m.activation == Activation::relu) {
                for (auto& v : z.data()) v = v > 0.0 ? v : 0.0;
            } else {
                for (auto& v : z.data()) v = std::tanh(v);
            }
            if (trace) trace->post.push_back(z);
        }
        cur = std::move(z);
    }
    return cur;
}

// Per-row loss and correctness for precomputed logits.
inline double row_loss(std::span<const double> logits, int label, LossKind kind, bool* correct) {
    if (kind == LossKind::cross_entropy) {
        const std::size_t k = logits.size();
        if (label < 0 || static_cast<std::size_t>(label) >= k)
            throw InvalidLabel("label " + std::to_string(label) + " outside [0, " +
                               std::to_string(k) + ")");
        double m = logits[0];
        for (double v : logits) m = std::max(m, v);
        double sum = 0.0;
        for (double v : logits) sum += std::exp(v - m);
        const double lse = m + std::log(sum);
        if (correct) {
            std::size_t arg = 0;
            for (std::size_t j = 1; j < k; ++j)
                if (logits[j] > logits[arg]) arg = j;
            *correct = (arg == static_cast<std::size_t>(label));
        }
        return lse - logits[static_cast<std::size_t>(label)];
    }
    if (logits.size() != 1)
        throw InvalidParameter("correlation loss requires a single output score");
    if (label != 0 && label != 1)
        throw InvalidLabel("correlation loss requires binary labels, got " + std::to_string(label));
    const double y_signed = label == 1 ? 1.0 : -1.0;
    if (correct) *correct = (logits[0] > 0.0) == (label == 1);
    return -y_signed * logits[0];
}

}  // namespace detail

inline DenseMatrix forward(const MlpModel& m, const DenseMatrix& x) {
    return detail::forward_trace(m, x, nullptr);
}

struct LossGrad {
    double loss = 0.0;
    std::vector<DenseMatrix> grads;  // same shapes as model weights
};

// Mean loss over the batch plus exact analytic gradients.
//   cross-entropy: softmax cross-entropy over the output logits.
//   correlation:   -mean(y_signed * score), two classes, single output score.
inline LossGrad loss_and_grad(const MlpModel& m, const DenseMatrix& x, std::span<const int> labels,
                              LossKind kind) {
    if (x.rows() == 0) throw InvalidParameter("loss_and_grad: batch is empty");
    if (x.rows() != labels.size())
        throw DimensionMismatch("loss_and_grad: " + std::to_string(x.rows()) + " rows vs " +
                                std::to_string(labels.size()) + " labels");
    detail::ForwardTrace trace;
    DenseMatrix logits = detail::forward_trace(m, x, &trace);
    const std::size_t n = x.rows();
    const double inv_n = 1.0 / static_cast<double>(n);

    LossGrad out;
    out.grads.reserve(m.layer_count());
    for (const auto& w : m.weights) out.grads.emplace_back(w.rows(), w.cols());

    // dZ for the output layer; per-row losses accumulate left to right.
    DenseMatrix dz(n, logits.cols());
    double loss = 0.0;
    if (kind == LossKind::cross_entropy) {
        for (std::size_t i = 0; i < n; ++i) {
            auto zi = logits.row(i);
            loss += detail::row_loss(zi, labels[i], kind, nullptr);
            double mx = zi[0];
            for (double v : zi) mx = std::max(mx, v);
            double sum = 0.0;
            for (double v : zi) sum += std::exp(v - mx);
            auto di = dz.row(i);
            for (std::size_t j = 0; j < zi.size(); ++j) di[j] = std::exp(zi[j] - mx) / sum * inv_n;
            di[static_cast<std::size_t>(labels[i])] -= inv_n;
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            auto zi = logits.row(i);
            loss += detail::row_loss(zi, labels[i], kind, nullptr);
            dz(i, 0) = (labels[i] == 1 ? -1.0 : 1.0) * inv_n;
        }
    }
    out.loss = loss * inv_n;

    // Backward sweep. grads[l] = [post_l | 1]^T dZ_{l+1}; then push dZ down
    // through W and the activation derivative.
    for (std::size_t li = m.layer_count(); li-- > 0;) {
        const DenseMatrix& a = trace.post[li];
        DenseMatrix& g = out.grads[li];
        const std::size_t d_in = a.cols();
        const std::size_t d_out = dz.cols();
        for (std::size_t i = 0; i < n; ++i) {
            auto ai = a.row(i);
            auto di = dz.row(i);
            for (std::size_t j = 0; j < d_in; ++j) {
                const double aij = ai[j];
                if (aij == 0.0) continue;
                auto gj = g.row(j);
                for (std::size_t k = 0; k < d_out; ++k) gj[k] += aij * di[k];
            }
            auto gb = g.row(d_in);
            for (std::size_t k = 0; k < d_out; ++k) gb[k] += di[k];
        }
        if (li == 0) break;
        const DenseMatrix& w = m.weights[li];
        DenseMatrix dprev(n, d_in);
        for (std::size_t i = 0; i < n; ++i) {
            auto di = dz.row(i);
            auto dp = dprev.row(i);
            for (std::size_t j = 0; j < d_in; ++j) {
                double acc = 0.0;
                auto wj = w.row(j);
                for (std::size_t k = 0; k < d_out; ++k) acc += wj[k] * di[k];
                dp[j] = acc;
            }
            auto ai = a.row(i);
            if (m.activation == Activation::relu) {
                for (std::size_t j = 0; j < d_in; ++j)
                    if (ai[j] <= 0.0) dp[j] = 0.0;
            } else {
                for (std::size_t j = 0; j < d_in; ++j) dp[j] *= 1.0 - ai[j] * ai[j];
            }
        }
        dz = std::move(dprev);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

// Exact sweep over one split, accumulating per-row losses in row order.
inline EvalResult evaluate(const MlpModel& m, const Dataset& data, Split split,
                           LossKind kind = LossKind::cross_entropy) {
    const std::vector<std::size_t> idx = data.indices_of(split);
    if (idx.empty())
        throw EmptySplit("evaluate: split '" + std::string(split_name(split)) + "' of '" +
                         data.generator + "' is empty");
    const std::size_t d0 = data.features.cols();
    constexpr std::size_t kBatch = 256;
    double loss = 0.0;
    std::size_t correct = 0;
    DenseMatrix x(std::min(kBatch, idx.size()), d0);
    for (std::size_t at = 0; at < idx.size();) {
        const std::size_t batch = std::min(kBatch, idx.size() - at);
        if (x.rows() != batch) x = DenseMatrix(batch, d0);
        for (std::size_t i = 0; i < batch; ++i)
            for (std::size_t j = 0; j < d0; ++j) x(i, j) = data.features(idx[at + i], j);
        const DenseMatrix logits = forward(m, x);
        for (std::size_t i = 0; i < batch; ++i) {
            bool ok = false;
            loss += detail::row_loss(logits.row(i), data.labels[idx[at + i]], kind, &ok);
            correct += ok ? 1 : 0;
        }
        at += batch;
    }
    EvalResult r;
    r.dataset_id = data.generator;
    r.split = split;
    r.n = idx.size();
    r.loss = loss / static_cast<double>(idx.size());
    r.accuracy = static_cast<double>(correct) / static_cast<double>(idx.size());
    if (!std::isfinite(r.loss))
        throw NonFiniteLoss("evaluate: non-finite mean loss on '" + data.generator + "'");
    return r;
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

struct EpochEval {
    std::size_t epoch = 0;  // 1-based: recorded after the epoch's updates
    EvalResult train;
    EvalResult test;
    double learning_rate = 0.0;
};

struct TrainResult {
    MlpModel model;
    std::vector<EpochEval> history;
};

// Called after each epoch's updates with the 1-based epoch number.
using EpochHook = std::function<void(std::size_t, const MlpModel&)>;

// Minibatch SGD with momentum (v = mu v - lr g; w += v). When masks are
// present, masked weight and velocity entries are re-zeroed after every
// update, so pruned coordinates stay exactly 0.0 through training.
inline TrainResult sgd_train(MlpModel model, const Dataset& data, const TrainConfig& cfg,
                             const MaskSet* masks = nullptr, const EpochHook* hook = nullptr) {
    cfg.validate();
    model.validate();
    data.validate();
    if (masks) {
        require_masks_fit(model, *masks);
        enforce_masks(model, *masks);
    }
    const std::vector<std::size_t> train_idx = data.indices_of(Split::train);
    if (train_idx.empty()) throw EmptySplit("sgd_train: train split is empty");

    std::vector<DenseMatrix> velocity;
    velocity.reserve(model.layer_count());
    for (const auto& w : model.weights) velocity.emplace_back(w.rows(), w.cols());

    RngStream rng(cfg.seed);
    std::vector<std::size_t> order = train_idx;
    TrainResult out;
    const std::size_t d0 = data.features.cols();

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.schedule.rate_at(cfg.learning_rate, epoch);
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(rng.next_index(i));
            std::swap(order[i - 1], order[j]);
        }
        for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
            const std::size_t batch = std::min(cfg.batch_size, order.size() - at);
            DenseMatrix x(batch, d0);
            std::vector<int> y(batch);
            for (std::size_t i = 0; i < batch; ++i) {
                for (std::size_t j = 0; j < d0; ++j) x(i, j) = data.features(order[at + i], j);
                y[i] = data.labels[order[at + i]];
            }
            const LossGrad lg = loss_and_grad(model, x, y, cfg.loss);
            if (!std::isfinite(lg.loss))
                throw NonFiniteLoss("sgd_train: loss diverged at epoch " + std::to_string(epoch) +
                                    " (lower the learning rate)");
            for (std::size_t l = 0; l < model.layer_count(); ++l) {
                auto& w = model.weights[l].data();
                auto& v = velocity[l].data();
                const auto& g = lg.grads[l].data();
                for (std::size_t t = 0; t < w.size(); ++t) {
                    v[t] = cfg.momentum * v[t] - lr * g[t];
                    w[t] += v[t];
                }
            }
            if (masks) {
                for (const auto& [layer, mask] : *masks) {
                    DenseMatrix& w = model.weights[layer];
                    DenseMatrix& v = velocity[layer];
                    const std::size_t cols = w.cols();
                    for (std::size_t b = 0; b < mask.bits.size(); ++b) {
                        if (mask.bits[b] == 0) {
                            w(b / cols, b % cols) = 0.0;
                            v(b / cols, b % cols) = 0.0;
                        }
                    }
                }
            }
        }
        EpochEval ev;
        ev.epoch = epoch + 1;
        ev.learning_rate = lr;
        ev.train = evaluate(model, data, Split::train, cfg.loss);
        ev.test = evaluate(model, data, Split::test, cfg.loss);
        out.history.push_back(std::move(ev));
        if (hook) (*hook)(epoch + 1, model);
    }
    out.model = std::move(model);
    return out;
}

struct FineTuneResult {
    MlpModel model;
    std::vector<EpochEval> history;
    std::vector<WeightVector> snapshots;  // tracked layer after each epoch
};

// Masked fine-tuning that additionally snapshots one layer's flattened
// weights after every epoch (for trajectory analysis). Snapshots exclude the
// bias row by default, matching the mask coverage.
inline FineTuneResult fine_tune(MlpModel pruned, const MaskSet& masks, const Dataset& data,
                                const TrainConfig& cfg, std::size_t tracked_layer,
                                bool include_bias = false) {
    if (tracked_layer >= pruned.layer_count())
        throw InvalidParameter("fine_tune: tracked layer " + std::to_string(tracked_layer) +
                               " does not exist");
    require_masks_fit(pruned, masks);
    FineTuneResult out;
    EpochHook hook = [&](std::size_t epoch, const MlpModel& m) {
        WeightVector snap = layer_weight_vector(m, tracked_layer, include_bias);
        snap.origin += "@epoch" + std::to_string(epoch);
        out.snapshots.push_back(std::move(snap));
    };
    TrainResult tr = sgd_train(std::move(pruned), data, cfg, &masks, &hook);
    out.model = std::move(tr.model);
    out.history = std::move(tr.history);
    return out;
}

// ---------------------------------------------------------------------------
// Hessian spectral estimation.
// ---------------------------------------------------------------------------

// Dominant eigenvalue (in magnitude) of the symmetric Jacobian of `grad` at
// w0. Hessian-vector products are central finite differences of grad with
// step h = 1e-4 * (1 + ||w0||).
inline double hessian_lambda_max_of(
    const std::function<std::vector<double>(std::span<const double>)>& grad,
    std::span<const double> w0, double tol, std::size_t max_iter, RngStream& rng) {
    const std::size_t dim = w0.size();
    const double h = 1e-4 * (1.0 + numkernel::norm(w0));
    std::vector<double> wp(dim), wm(dim);
    auto hvp = [&](std::span<const double> v) {
        for (std::size_t i = 0; i < dim; ++i) {
            wp[i] = w0[i] + h * v[i];
            wm[i] = w0[i] - h * v[i];
        }
        std::vector<double> gp = grad(wp);
        const std::vector<double> gm = grad(wm);
        for (std::size_t i = 0; i < dim; ++i) gp[i] = (gp[i] - gm[i]) / (2.0 * h);
        return gp;
    };
    return numkernel::power_iteration(hvp, dim, tol, max_iter, rng).value;
}

// lambda_max of the train-split loss Hessian restricted to one layer's
// weights (bias row included).
inline double hessian_lambda_max(const MlpModel& model, const Dataset& data,
                                 std::size_t layer_index, LossKind kind, double tol,
                                 std::size_t max_iter, RngStream& rng) {
    if (layer_index >= model.layer_count())
        throw InvalidParameter("hessian_lambda_max: no such layer");
    const std::vector<std::size_t> idx = data.indices_of(Split::train);
    if (idx.empty()) throw EmptySplit("hessian_lambda_max: train split is empty");
    const std::size_t d0 = data.features.cols();
    DenseMatrix x(idx.size(), d0);
    std::vector<int> y(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t j = 0; j < d0; ++j) x(i, j) = data.features(idx[i], j);
        y[i] = data.labels[idx[i]];
    }

    const DenseMatrix& w = model.weights[layer_index];
    std::vector<double> w0;
    w0.reserve(w.rows() * w.cols());
    for (double v : w.data()) w0.push_back(v);

    MlpModel probe = model;
    auto grad = [&](std::span<const double> vec) {
        std::copy(vec.begin(), vec.end(), probe.weights[layer_index].data().begin());
        const LossGrad lg = loss_and_grad(probe, x, y, kind);
        return lg.grads[layer_index].data();
    };
    return hessian_lambda_max_of(grad, w0, tol, max_iter, rng);
}

}  // namespace prunescope::micronet
