#pragma once

// Experiment orchestration: sweep configuration, deterministic cell seeding,
// worker-pool execution, records.csv / manifest.json / WTNS persistence,
// rank correlations, and SVG report rendering.
//
// Determinism: every random draw in a sweep descends from master_seed through
// documented child_seed chains keyed by purpose strings and cell coordinates,
// so records.csv is byte-identical across reruns and across thread counts.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <bit>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "prunescope/detail/svg.hpp"
#include "prunescope/divergence.hpp"
#include "prunescope/errors.hpp"
#include "prunescope/latent.hpp"
#include "prunescope/micronet.hpp"
#include "prunescope/numkernel.hpp"
#include "prunescope/patterns.hpp"
#include "prunescope/pruning.hpp"
#include "prunescope/wtns.hpp"

namespace prunescope::harness {

using divergence::DivergenceEstimate;
using micronet::Dataset;
using micronet::MlpModel;
using numkernel::child_seed;
using numkernel::DenseMatrix;
using numkernel::fnv1a64;
using numkernel::RngStream;
using pruning::PruneMask;
using pruning::PruneMethod;
using pruning::WeightVector;

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

struct DatasetConfig {
    enum class Kind { blobs, csv } kind = Kind::blobs;
    // blobs
    std::size_t classes = 3;
    std::size_t n_per_class = 800;
    double spread = 0.9;
    std::size_t dim = 2;
    // csv
    std::string path;
    std::string label_column = "label";
    double test_fraction = 0.2;
};

// JSON-facing latent description; `name` keys the records.csv columns.
struct LatentChoice {
    std::string name;
    latent::Family family = latent::Family::gaussian_diag;
    double sigma = 1.0;
    double dof = 4.0;
    std::size_t groups = 100;
    std::size_t mc_samples = 600000;
    // gaussian-nondiag shared-covariance construction
    double beta = 1.0;
    double eigen_low = 0.5;
    double eigen_high = 2.0;
};

struct ExperimentConfig {
    DatasetConfig dataset;
    std::vector<std::size_t> hidden_dims = {16};
    micronet::Activation activation = micronet::Activation::relu;
    micronet::TrainConfig train;             // baseline training (epochs > 0)
    std::size_t fine_tune_epochs = 20;
    std::vector<std::size_t> pruned_layers;  // empty = last layer only
    std::vector<PruneMethod> methods = {PruneMethod::lowest, PruneMethod::highest,
                                        PruneMethod::random};
    std::vector<double> fractions = {0.1, 0.3, 0.5, 0.8};
    std::vector<LatentChoice> latents = {LatentChoice{.name = "gaussian-diag"}};
    std::size_t trials = 3;
    std::uint64_t master_seed = 1;
    std::string out_dir = "out";

    void validate() const {
        if (train.epochs < 1) throw InvalidParameter("ExperimentConfig: baseline epochs must be positive");
        train.validate();
        if (methods.empty()) throw InvalidParameter("ExperimentConfig: need at least one method");
        if (latents.empty()) throw InvalidParameter("ExperimentConfig: need at least one latent config");
        if (fractions.empty()) throw InvalidParameter("ExperimentConfig: need at least one fraction");
        for (double f : fractions)
            if (!(f > 0.0 && f <= 1.0))
                throw InvalidParameter("ExperimentConfig: fractions must lie in (0, 1], got " +
                                       std::to_string(f));
        if (trials < 1) throw InvalidParameter("ExperimentConfig: trials must be positive");
        if (dataset.kind == DatasetConfig::Kind::csv && dataset.path.empty())
            throw InvalidParameter("ExperimentConfig: csv dataset needs a path");
        std::set<std::string> names;
        for (const auto& l : latents)
            if (!names.insert(l.name.empty() ? std::string(latent::family_name(l.family)) : l.name)
                     .second)
                throw InvalidParameter("ExperimentConfig: duplicate latent name");
    }
};

inline ExperimentConfig config_from_json(const nlohmann::json& j);
inline nlohmann::json config_to_json(const ExperimentConfig& cfg);

namespace detail {

inline std::string latent_name(const LatentChoice& l) {
    return l.name.empty() ? std::string(latent::family_name(l.family)) : l.name;
}

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string fmt_short(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    try {
        ExperimentConfig cfg;
        if (j.contains("dataset")) {
            const auto& d = j["dataset"];
            const std::string kind = d.value("kind", "blobs");
            if (kind == "blobs") {
                cfg.dataset.kind = DatasetConfig::Kind::blobs;
            } else if (kind == "csv") {
                cfg.dataset.kind = DatasetConfig::Kind::csv;
            } else {
                throw ParseError("config: unknown dataset kind '" + kind + "'");
            }
            cfg.dataset.classes = d.value("classes", cfg.dataset.classes);
            cfg.dataset.n_per_class = d.value("n_per_class", cfg.dataset.n_per_class);
            cfg.dataset.spread = d.value("spread", cfg.dataset.spread);
            cfg.dataset.dim = d.value("dim", cfg.dataset.dim);
            cfg.dataset.path = d.value("path", cfg.dataset.path);
            cfg.dataset.label_column = d.value("label_column", cfg.dataset.label_column);
            cfg.dataset.test_fraction = d.value("test_fraction", cfg.dataset.test_fraction);
        }
        if (j.contains("model")) {
            const auto& m = j["model"];
            if (m.contains("hidden_dims"))
                cfg.hidden_dims = m["hidden_dims"].get<std::vector<std::size_t>>();
            if (m.contains("activation"))
                cfg.activation = micronet::activation_from_name(m["activation"].get<std::string>());
        }
        if (j.contains("train")) {
            const auto& t = j["train"];
            cfg.train.learning_rate = t.value("learning_rate", cfg.train.learning_rate);
            cfg.train.momentum = t.value("momentum", cfg.train.momentum);
            cfg.train.epochs = t.value("epochs", std::size_t{30});
            cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
            if (t.contains("loss"))
                cfg.train.loss = micronet::loss_kind_from_name(t["loss"].get<std::string>());
            if (t.contains("schedule")) {
                const auto& s = t["schedule"];
                const std::string kind = s.value("kind", "constant");
                if (kind == "constant") {
                    cfg.train.schedule.kind = micronet::LrSchedule::Kind::constant;
                } else if (kind == "step") {
                    cfg.train.schedule.kind = micronet::LrSchedule::Kind::step;
                } else {
                    throw ParseError("config: unknown schedule kind '" + kind + "'");
                }
                cfg.train.schedule.gamma = s.value("gamma", cfg.train.schedule.gamma);
                cfg.train.schedule.every = s.value("every", cfg.train.schedule.every);
            }
        } else {
            cfg.train.epochs = 30;
        }
        cfg.fine_tune_epochs = j.value("fine_tune_epochs", cfg.fine_tune_epochs);
        if (j.contains("pruned_layers"))
            cfg.pruned_layers = j["pruned_layers"].get<std::vector<std::size_t>>();
        if (j.contains("methods")) {
            cfg.methods.clear();
            for (const auto& m : j["methods"])
                cfg.methods.push_back(pruning::prune_method_from_name(m.get<std::string>()));
        }
        if (j.contains("fractions")) cfg.fractions = j["fractions"].get<std::vector<double>>();
        if (j.contains("latents")) {
            cfg.latents.clear();
            for (const auto& l : j["latents"]) {
                LatentChoice c;
                c.family = latent::family_from_name(l.value("family", "gaussian-diag"));
                c.name = l.value("name", std::string(latent::family_name(c.family)));
                c.sigma = l.value("sigma", c.sigma);
                c.dof = l.value("dof", c.dof);
                c.groups = l.value("groups", c.groups);
                c.mc_samples = l.value("mc_samples", c.mc_samples);
                c.beta = l.value("beta", c.beta);
                c.eigen_low = l.value("eigen_low", c.eigen_low);
                c.eigen_high = l.value("eigen_high", c.eigen_high);
                cfg.latents.push_back(std::move(c));
            }
        }
        cfg.trials = j.value("trials", cfg.trials);
        cfg.master_seed = j.value("master_seed", cfg.master_seed);
        cfg.out_dir = j.value("out_dir", cfg.out_dir);
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("config: ") + e.what());
    }
}

inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
    nlohmann::json j;
    auto& d = j["dataset"];
    if (cfg.dataset.kind == DatasetConfig::Kind::blobs) {
        d["kind"] = "blobs";
        d["classes"] = cfg.dataset.classes;
        d["n_per_class"] = cfg.dataset.n_per_class;
        d["spread"] = cfg.dataset.spread;
        d["dim"] = cfg.dataset.dim;
    } else {
        d["kind"] = "csv";
        d["path"] = cfg.dataset.path;
        d["label_column"] = cfg.dataset.label_column;
        d["test_fraction"] = cfg.dataset.test_fraction;
    }
    j["model"]["hidden_dims"] = cfg.hidden_dims;
    j["model"]["activation"] = std::string(micronet::activation_name(cfg.activation));
    auto& t = j["train"];
    t["learning_rate"] = cfg.train.learning_rate;
    t["momentum"] = cfg.train.momentum;
    t["epochs"] = cfg.train.epochs;
    t["batch_size"] = cfg.train.batch_size;
    t["loss"] = std::string(micronet::loss_kind_name(cfg.train.loss));
    t["schedule"]["kind"] =
        cfg.train.schedule.kind == micronet::LrSchedule::Kind::constant ? "constant" : "step";
    t["schedule"]["gamma"] = cfg.train.schedule.gamma;
    t["schedule"]["every"] = cfg.train.schedule.every;
    j["fine_tune_epochs"] = cfg.fine_tune_epochs;
    if (!cfg.pruned_layers.empty()) j["pruned_layers"] = cfg.pruned_layers;
    j["methods"] = nlohmann::json::array();
    for (auto m : cfg.methods) j["methods"].push_back(std::string(pruning::prune_method_name(m)));
    j["fractions"] = cfg.fractions;
    j["latents"] = nlohmann::json::array();
    for (const auto& l : cfg.latents) {
        nlohmann::json jl;
        jl["name"] = detail::latent_name(l);
        jl["family"] = std::string(latent::family_name(l.family));
        if (l.family == latent::Family::gaussian_diag) jl["sigma"] = l.sigma;
        if (l.family == latent::Family::student) {
            jl["dof"] = l.dof;
            jl["groups"] = l.groups;
            jl["mc_samples"] = l.mc_samples;
        }
        if (l.family == latent::Family::gaussian_nondiag) {
            jl["beta"] = l.beta;
            jl["eigen_low"] = l.eigen_low;
            jl["eigen_high"] = l.eigen_high;
        }
        j["latents"].push_back(std::move(jl));
    }
    j["trials"] = cfg.trials;
    j["master_seed"] = cfg.master_seed;
    j["out_dir"] = cfg.out_dir;
    return j;
}

// ---------------------------------------------------------------------------
// Model / mask containers.
// ---------------------------------------------------------------------------

inline wtns::Container model_to_container(const MlpModel& m) {
    wtns::Container c;
    for (std::size_t l = 0; l < m.layer_count(); ++l) {
        wtns::Tensor t;
        t.name = "layer" + std::to_string(l);
        t.dims = {m.weights[l].rows(), m.weights[l].cols()};
        t.dtype = wtns::Dtype::f64;
        t.f64 = m.weights[l].data();
        c.tensors.push_back(std::move(t));
    }
    c.meta["model"]["layer_dims"] = m.layer_dims;
    c.meta["model"]["activation"] = std::string(micronet::activation_name(m.activation));
    return c;
}

inline MlpModel model_from_container(const wtns::Container& c) {
    MlpModel m;
    for (std::size_t l = 0;; ++l) {
        const wtns::Tensor* t = c.find("layer" + std::to_string(l));
        if (!t) break;
        if (t->dtype != wtns::Dtype::f64 || t->dims.size() != 2)
            throw ParseError("model container: layer" + std::to_string(l) +
                             " must be a 2-d f64 tensor");
        DenseMatrix w(t->dims[0], t->dims[1]);
        w.data() = t->f64;
        m.weights.push_back(std::move(w));
    }
    if (m.weights.empty()) throw ParseError("model container: no layer tensors found");
    m.layer_dims.clear();
    m.layer_dims.push_back(m.weights[0].rows() - 1);
    for (const auto& w : m.weights) m.layer_dims.push_back(w.cols());
    if (c.meta.contains("model") && c.meta["model"].contains("activation"))
        m.activation =
            micronet::activation_from_name(c.meta["model"]["activation"].get<std::string>());
    m.validate();
    return m;
}

inline void add_mask_tensor(wtns::Container& c, std::size_t layer, const PruneMask& mask) {
    wtns::Tensor t;
    t.name = "mask_layer" + std::to_string(layer);
    t.dims = {mask.bits.size()};
    t.dtype = wtns::Dtype::u8;
    t.u8 = mask.bits;
    c.tensors.push_back(std::move(t));
    auto& jm = c.meta["masks"]["layer" + std::to_string(layer)];
    jm["method"] = std::string(pruning::prune_method_name(mask.method));
    jm["fraction"] = mask.fraction;
    if (mask.seed) jm["seed"] = *mask.seed;
}

// Pulls the weight vector a container represents: the tensor named "weights"
// if present, else the last (or requested) layer of a model container with
// its bias row dropped, else the single f64 tensor.
inline WeightVector extract_weight_vector(const wtns::Container& c,
                                          std::optional<std::size_t> layer = std::nullopt) {
    if (const wtns::Tensor* t = c.find("weights")) {
        WeightVector w;
        w.values = t->f64;
        w.origin = "weights";
        return w;
    }
    if (c.find("layer0")) {
        const MlpModel m = model_from_container(c);
        const std::size_t l = layer.value_or(m.last_layer());
        return micronet::layer_weight_vector(m, l, false);
    }
    const wtns::Tensor* only = nullptr;
    for (const auto& t : c.tensors) {
        if (t.dtype != wtns::Dtype::f64) continue;
        if (only) throw ParseError("container holds several f64 tensors; name one 'weights'");
        only = &t;
    }
    if (!only) throw ParseError("container holds no f64 weight tensor");
    WeightVector w;
    w.values = only->f64;
    w.origin = only->name;
    return w;
}

// ---------------------------------------------------------------------------
// Records.
// ---------------------------------------------------------------------------

struct EpochRecord {
    std::size_t trial = 0;
    PruneMethod method = PruneMethod::lowest;
    double fraction = 0.0;
    std::size_t epoch = 0;  // 0 = freshly pruned, before fine-tuning
    double ap2 = 0.0;
    double pd_accuracy = 0.0;
    double pd_loss = 0.0;
    std::vector<DivergenceEstimate> ap3;  // parallel to the configured latents
    std::vector<double> gap_vs_orig;      // |KL* - KL(P_w*||P_wt_t)| per latent
    std::vector<double> gap_vs_tuned;     // |KL* - KL(P_wt*||P_wt_t)| per latent
    double wall_time = 0.0;               // not serialized: records.csv is byte-stable
};

inline void write_records_csv(const std::string& path, const std::vector<EpochRecord>& records,
                              const std::vector<std::string>& latent_names) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("cannot open '" + path + "' for writing");
    out << "trial,method,fraction,epoch,ap2,pd_accuracy,pd_loss";
    for (const auto& name : latent_names)
        out << ",ap3_" << name << ",ap3_" << name << "_stderr"
            << ",gap_vs_orig_" << name << ",gap_vs_tuned_" << name;
    out << "\n";
    for (const auto& r : records) {
        out << r.trial << "," << pruning::prune_method_name(r.method) << ","
            << detail::fmt_double(r.fraction) << "," << r.epoch << ","
            << detail::fmt_double(r.ap2) << "," << detail::fmt_double(r.pd_accuracy) << ","
            << detail::fmt_double(r.pd_loss);
        for (std::size_t i = 0; i < latent_names.size(); ++i) {
            out << "," << detail::fmt_double(r.ap3[i].value) << ","
                << detail::fmt_double(r.ap3[i].std_error) << ","
                << detail::fmt_double(r.gap_vs_orig[i]) << ","
                << detail::fmt_double(r.gap_vs_tuned[i]);
        }
        out << "\n";
    }
}

struct RecordsFile {
    std::vector<EpochRecord> records;
    std::vector<std::string> latent_names;
};

inline RecordsFile read_records_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw ParseError("'" + path + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::vector<std::string> header = micronet::detail::split_line(line);
    const std::vector<std::string> fixed = {"trial",        "method",  "fraction", "epoch",
                                            "ap2",          "pd_accuracy", "pd_loss"};
    if (header.size() < fixed.size())
        throw ParseError("'" + path + "' header lacks the record columns");
    for (std::size_t i = 0; i < fixed.size(); ++i)
        if (header[i] != fixed[i])
            throw ParseError("'" + path + "' header column " + std::to_string(i) + " is '" +
                             header[i] + "', expected '" + fixed[i] + "'");
    RecordsFile out;
    for (std::size_t i = fixed.size(); i + 3 < header.size(); i += 4) {
        const std::string& h = header[i];
        if (h.rfind("ap3_", 0) != 0)
            throw ParseError("'" + path + "' unexpected column '" + h + "'");
        out.latent_names.push_back(h.substr(4));
    }
    std::size_t row = 1;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::vector<std::string> cells = micronet::detail::split_line(line);
        if (cells.size() != header.size())
            throw RaggedRows("'" + path + "' row " + std::to_string(row) + " has " +
                             std::to_string(cells.size()) + " cells, expected " +
                             std::to_string(header.size()));
        EpochRecord r;
        r.trial = static_cast<std::size_t>(micronet::detail::parse_cell(cells[0], row, 0));
        r.method = pruning::prune_method_from_name(cells[1]);
        r.fraction = micronet::detail::parse_cell(cells[2], row, 2);
        r.epoch = static_cast<std::size_t>(micronet::detail::parse_cell(cells[3], row, 3));
        r.ap2 = micronet::detail::parse_cell(cells[4], row, 4);
        r.pd_accuracy = micronet::detail::parse_cell(cells[5], row, 5);
        r.pd_loss = micronet::detail::parse_cell(cells[6], row, 6);
        for (std::size_t i = 0; i < out.latent_names.size(); ++i) {
            const std::size_t base = 7 + 4 * i;
            DivergenceEstimate e;
            e.value = micronet::detail::parse_cell(cells[base], row, base);
            e.std_error = micronet::detail::parse_cell(cells[base + 1], row, base + 1);
            e.method = e.std_error == 0.0 ? divergence::EstimateMethod::closed_form
                                          : divergence::EstimateMethod::monte_carlo;
            r.ap3.push_back(e);
            r.gap_vs_orig.push_back(micronet::detail::parse_cell(cells[base + 2], row, base + 2));
            r.gap_vs_tuned.push_back(micronet::detail::parse_cell(cells[base + 3], row, base + 3));
        }
        out.records.push_back(std::move(r));
        ++row;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rank correlation.
// ---------------------------------------------------------------------------

namespace detail {

// Average ranks (1-based); tied values share the mean of their rank run.
inline std::vector<double> average_ranks(std::span<const double> v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 3)
        throw InsufficientData("spearman: need at least 3 paired observations");
    const std::vector<double> rx = average_ranks(x);
    const std::vector<double> ry = average_ranks(y);
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = rx[i] - mx;
        const double dy = ry[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0)
        throw InsufficientData("spearman: a variable is constant across cells");
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace detail

enum class ApMetric { ap2, ap3 };

// Spearman rank correlation between an AP metric at `at_epoch` and PD at
// `pd_epoch` (same epoch when omitted), across (method, fraction) cells,
// averaged over trials.
inline double rank_correlation(const std::vector<EpochRecord>& records, std::size_t at_epoch,
                               ApMetric metric, std::size_t latent_index,
                               patterns::PdMode pd_mode,
                               std::optional<std::size_t> pd_epoch = std::nullopt) {
    const std::size_t pd_at = pd_epoch.value_or(at_epoch);
    struct CellPair {
        std::optional<double> ap;
        std::optional<double> pd;
    };
    std::map<std::size_t, std::map<std::pair<int, double>, CellPair>> trials;
    for (const auto& r : records) {
        const std::pair<int, double> key{static_cast<int>(r.method), r.fraction};
        CellPair& cell = trials[r.trial][key];
        if (r.epoch == at_epoch) {
            if (metric == ApMetric::ap2) {
                cell.ap = r.ap2;
            } else {
                if (latent_index >= r.ap3.size())
                    throw InvalidParameter("rank_correlation: latent index out of range");
                cell.ap = r.ap3[latent_index].value;
            }
        }
        if (r.epoch == pd_at)
            cell.pd = pd_mode == patterns::PdMode::accuracy ? r.pd_accuracy : r.pd_loss;
    }
    if (trials.empty()) throw InsufficientData("rank_correlation: no records");
    double acc = 0.0;
    std::size_t used = 0;
    for (const auto& [trial, cells] : trials) {
        std::vector<double> ap, pd;
        for (const auto& [key, cell] : cells) {
            if (cell.ap && cell.pd) {
                ap.push_back(*cell.ap);
                pd.push_back(*cell.pd);
            }
        }
        if (ap.size() < 3)
            throw InsufficientData("rank_correlation: trial " + std::to_string(trial) +
                                   " has fewer than 3 complete cells at the requested epochs");
        acc += detail::spearman(ap, pd);
        ++used;
    }
    return acc / static_cast<double>(used);
}

// ---------------------------------------------------------------------------
// Plot rendering.
// ---------------------------------------------------------------------------

namespace detail {

inline void append_metric_series(svg::Chart& chart, const std::vector<EpochRecord>& records,
                                 PruneMethod method, double fraction,
                                 const std::vector<std::size_t>& trials, std::size_t metric_index,
                                 const std::string& label_base) {
    // metric_index: 0 = ap2, i >= 1 = ap3 latent i-1.
    auto metric_of = [&](const EpochRecord& r) {
        return metric_index == 0 ? r.ap2 : r.ap3[metric_index - 1].value;
    };
    std::map<std::size_t, std::pair<double, double>> mean_ap;  // epoch -> (sum, count)
    std::map<std::size_t, std::pair<double, double>> mean_pd;
    for (std::size_t trial : trials) {
        svg::Series ap_series, pd_series;
        for (const auto& r : records) {
            if (r.trial != trial || r.method != method || r.fraction != fraction) continue;
            const double x = static_cast<double>(r.epoch);
            ap_series.points.emplace_back(x, metric_of(r));
            pd_series.points.emplace_back(x, r.pd_accuracy);
            auto& ma = mean_ap[r.epoch];
            ma.first += metric_of(r);
            ma.second += 1.0;
            auto& mp = mean_pd[r.epoch];
            mp.first += r.pd_accuracy;
            mp.second += 1.0;
        }
        if (ap_series.points.empty()) continue;
        const std::string tag = trials.size() > 1 ? " t" + std::to_string(trial) : "";
        ap_series.label = label_base + tag + " AP";
        pd_series.label = label_base + tag + " PD";
        pd_series.right_axis = true;
        pd_series.dashed = true;
        chart.series.push_back(std::move(ap_series));
        chart.series.push_back(std::move(pd_series));
    }
    if (trials.size() > 1 && !mean_ap.empty()) {
        svg::Series ap_series, pd_series;
        for (const auto& [epoch, sc] : mean_ap)
            ap_series.points.emplace_back(static_cast<double>(epoch), sc.first / sc.second);
        for (const auto& [epoch, sc] : mean_pd)
            pd_series.points.emplace_back(static_cast<double>(epoch), sc.first / sc.second);
        ap_series.label = label_base + " mean AP";
        pd_series.label = label_base + " mean PD";
        pd_series.right_axis = true;
        pd_series.dashed = true;
        chart.series.push_back(std::move(ap_series));
        chart.series.push_back(std::move(pd_series));
    }
}

}  // namespace detail

// One SVG per (method, metric) comparing fractions and one per (fraction,
// metric) comparing methods; AP series on the left axis, PD (test accuracy)
// on the right. Returns the written paths; no records means no files.
inline std::vector<std::string> render_plots(const std::vector<EpochRecord>& records,
                                             const std::vector<std::string>& latent_names,
                                             const std::string& out_dir) {
    std::vector<std::string> written;
    if (records.empty()) return written;
    std::filesystem::create_directories(out_dir);

    std::vector<PruneMethod> methods;
    std::vector<double> fractions;
    std::vector<std::size_t> trials;
    for (const auto& r : records) {
        if (std::find(methods.begin(), methods.end(), r.method) == methods.end())
            methods.push_back(r.method);
        if (std::find(fractions.begin(), fractions.end(), r.fraction) == fractions.end())
            fractions.push_back(r.fraction);
        if (std::find(trials.begin(), trials.end(), r.trial) == trials.end())
            trials.push_back(r.trial);
    }
    std::sort(fractions.begin(), fractions.end());
    std::sort(trials.begin(), trials.end());

    std::vector<std::string> metric_labels = {"ap2"};
    for (const auto& name : latent_names) metric_labels.push_back("ap3_" + name);

    auto write_file = [&](const std::string& name, const svg::Chart& chart) {
        const std::string path = out_dir + "/" + name;
        std::ofstream out(path, std::ios::binary);
        if (!out) throw ParseError("cannot open '" + path + "' for writing");
        out << svg::render_chart(chart);
        written.push_back(path);
    };

    for (std::size_t mi = 0; mi < metric_labels.size(); ++mi) {
        for (PruneMethod method : methods) {
            svg::Chart chart;
            chart.title = metric_labels[mi] + " and PD per epoch, method " +
                          std::string(pruning::prune_method_name(method));
            chart.x_label = "epoch";
            chart.y_left_label = metric_labels[mi];
            chart.y_right_label = "PD (test accuracy)";
            for (double f : fractions)
                detail::append_metric_series(chart, records, method, f, trials, mi,
                                             "f=" + detail::fmt_short(f));
            write_file("method_" + std::string(pruning::prune_method_name(method)) + "_" +
                           metric_labels[mi] + ".svg",
                       chart);
        }
        for (double f : fractions) {
            svg::Chart chart;
            chart.title =
                metric_labels[mi] + " and PD per epoch, fraction " + detail::fmt_short(f);
            chart.x_label = "epoch";
            chart.y_left_label = metric_labels[mi];
            chart.y_right_label = "PD (test accuracy)";
            for (PruneMethod method : methods)
                detail::append_metric_series(chart, records, method, f, trials, mi,
                                             std::string(pruning::prune_method_name(method)));
            write_file("fraction_" + detail::fmt_short(f) + "_" + metric_labels[mi] + ".svg",
                       chart);
        }
    }
    return written;
}

// ---------------------------------------------------------------------------
// Experiment runner.
// ---------------------------------------------------------------------------

struct CellStatus {
    std::size_t trial = 0;
    PruneMethod method = PruneMethod::lowest;
    double fraction = 0.0;
    std::uint64_t seed = 0;
    double wall_time = 0.0;
    std::string error;  // empty on success
};

struct RunReport {
    std::vector<EpochRecord> records;
    std::vector<std::string> latent_names;
    std::vector<CellStatus> cells;
    std::vector<std::string> deviations;
    double spearman_ap2_final_pd = std::numeric_limits<double>::quiet_NaN();
    std::string records_path;
    std::string manifest_path;
    std::vector<std::string> plot_paths;
};

// Documented cell-seed derivation: a child chain keyed by a purpose tag and
// the cell coordinates, so adding or removing cells never shifts the
// randomness of other cells.
inline std::uint64_t cell_seed(std::uint64_t master_seed, std::size_t trial, PruneMethod method,
                               double fraction) {
    std::uint64_t s = child_seed(master_seed, fnv1a64("cell"));
    s = child_seed(s, trial);
    s = child_seed(s, fnv1a64(pruning::prune_method_name(method)));
    s = child_seed(s, std::bit_cast<std::uint64_t>(fraction));
    return s;
}

inline std::size_t worker_count() {
    if (const char* env = std::getenv("PRUNESCOPE_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v >= 1) return static_cast<std::size_t>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? hw : 1;
}

inline Dataset build_dataset(const ExperimentConfig& cfg) {
    if (cfg.dataset.kind == DatasetConfig::Kind::blobs) {
        RngStream rng(child_seed(cfg.master_seed, fnv1a64("dataset")));
        return micronet::make_blobs(cfg.dataset.classes, cfg.dataset.n_per_class,
                                    cfg.dataset.spread, cfg.dataset.dim, rng);
    }
    Dataset data = micronet::load_csv(cfg.dataset.path, cfg.dataset.label_column);
    micronet::assign_split(data, cfg.dataset.test_fraction,
                           child_seed(cfg.master_seed, fnv1a64("split")));
    return data;
}

inline std::vector<std::size_t> resolve_model_dims(const ExperimentConfig& cfg,
                                                   const Dataset& data) {
    std::vector<std::size_t> dims;
    dims.push_back(data.features.cols());
    for (std::size_t h : cfg.hidden_dims) dims.push_back(h);
    dims.push_back(cfg.train.loss == micronet::LossKind::correlation ? 1 : data.classes);
    return dims;
}

namespace detail {

struct TrialBaseline {
    MlpModel model;
    WeightVector w_star;
    micronet::EvalResult test_eval;
};

struct CellOutput {
    std::vector<EpochRecord> records;
    CellStatus status;
};

}  // namespace detail

inline RunReport run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    namespace fs = std::filesystem;
    const auto t_start = std::chrono::steady_clock::now();
    fs::create_directories(cfg.out_dir);
    fs::create_directories(cfg.out_dir + "/weights");
    fs::create_directories(cfg.out_dir + "/plots");

    const Dataset data = build_dataset(cfg);
    const std::vector<std::size_t> dims = resolve_model_dims(cfg, data);
    std::vector<std::size_t> pruned_layers = cfg.pruned_layers;
    if (pruned_layers.empty()) pruned_layers = {dims.size() - 2};
    for (std::size_t l : pruned_layers)
        if (l + 1 >= dims.size())
            throw InvalidParameter("run_experiment: pruned layer " + std::to_string(l) +
                                   " does not exist");
    const std::size_t tracked_layer = pruned_layers.back();
    const std::size_t tracked_dim = dims[tracked_layer] * dims[tracked_layer + 1];

    RunReport report;
    for (const auto& l : cfg.latents) report.latent_names.push_back(detail::latent_name(l));

    // Shared latent configs: one covariance object per latent family,
    // constant across all cells and trials.
    std::vector<patterns::LatentConfig> latent_cfgs;
    for (std::size_t i = 0; i < cfg.latents.size(); ++i) {
        const LatentChoice& l = cfg.latents[i];
        patterns::LatentConfig pc;
        pc.family = l.family;
        pc.sigma = l.sigma;
        pc.dof = l.dof;
        pc.groups = l.groups;
        pc.mc_samples = l.mc_samples;
        if (l.family == latent::Family::gaussian_nondiag) {
            RngStream rng(child_seed(child_seed(cfg.master_seed, fnv1a64("latent-cov")), i));
            pc.cov = latent::random_nondiag_cov(tracked_dim, l.beta, l.eigen_low, l.eigen_high,
                                                rng);
        }
        latent_cfgs.push_back(std::move(pc));
    }

    // Baselines: one seeded training run per trial, executed in trial order.
    std::vector<detail::TrialBaseline> baselines;
    baselines.reserve(cfg.trials);
    for (std::size_t trial = 0; trial < cfg.trials; ++trial) {
        const std::uint64_t trial_seed =
            child_seed(child_seed(cfg.master_seed, fnv1a64("trial")), trial);
        RngStream init_rng(child_seed(trial_seed, fnv1a64("init")));
        MlpModel model = micronet::init_model(dims, cfg.activation, init_rng);
        micronet::TrainConfig tc = cfg.train;
        tc.seed = child_seed(trial_seed, fnv1a64("train"));
        micronet::TrainResult tr = micronet::sgd_train(std::move(model), data, tc);
        detail::TrialBaseline b;
        b.model = std::move(tr.model);
        b.w_star = micronet::layer_weight_vector(b.model, tracked_layer, false);
        b.w_star.origin = "trial" + std::to_string(trial) + "/" + b.w_star.origin;
        b.test_eval = micronet::evaluate(b.model, data, micronet::Split::test, cfg.train.loss);
        wtns::Container c = model_to_container(b.model);
        c.meta["trial"] = trial;
        wtns::write(cfg.out_dir + "/weights/trial" + std::to_string(trial) + "_baseline.wtns", c);
        baselines.push_back(std::move(b));
    }

    // Cells.
    struct CellKey {
        std::size_t trial;
        std::size_t method_index;
        double fraction;
    };
    std::vector<CellKey> keys;
    for (std::size_t trial = 0; trial < cfg.trials; ++trial)
        for (std::size_t mi = 0; mi < cfg.methods.size(); ++mi)
            for (double f : cfg.fractions) keys.push_back({trial, mi, f});

    std::vector<detail::CellOutput> outputs(keys.size());
    std::atomic<std::size_t> next{0};

    auto run_cell = [&](std::size_t idx) {
        const CellKey key = keys[idx];
        const PruneMethod method = cfg.methods[key.method_index];
        const std::uint64_t seed = cell_seed(cfg.master_seed, key.trial, method, key.fraction);
        detail::CellOutput& out = outputs[idx];
        out.status.trial = key.trial;
        out.status.method = method;
        out.status.fraction = key.fraction;
        out.status.seed = seed;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            const detail::TrialBaseline& base = baselines[key.trial];

            MlpModel pruned = base.model;
            micronet::MaskSet masks;
            for (std::size_t layer : pruned_layers) {
                WeightVector wv = micronet::layer_weight_vector(pruned, layer, false);
                RngStream mask_rng(child_seed(child_seed(seed, fnv1a64("mask")), layer));
                PruneMask mask =
                    method == PruneMethod::random
                        ? pruning::magnitude_mask(wv, key.fraction, method, &mask_rng)
                        : pruning::magnitude_mask(wv, key.fraction, method, nullptr);
                const WeightVector wt = pruning::apply_mask(wv, mask);
                micronet::set_layer_from_vector(pruned, layer, wt.values, false);
                masks.emplace(layer, std::move(mask));
            }

            std::vector<WeightVector> snapshots;
            snapshots.push_back(micronet::layer_weight_vector(pruned, tracked_layer, false));
            std::vector<micronet::EvalResult> test_evals;
            test_evals.push_back(
                micronet::evaluate(pruned, data, micronet::Split::test, cfg.train.loss));

            micronet::TrainConfig ft = cfg.train;
            ft.epochs = cfg.fine_tune_epochs;
            ft.seed = child_seed(seed, fnv1a64("finetune"));
            micronet::FineTuneResult fr =
                micronet::fine_tune(std::move(pruned), masks, data, ft, tracked_layer, false);
            for (auto& s : fr.snapshots) snapshots.push_back(std::move(s));
            for (const auto& h : fr.history) test_evals.push_back(h.test);

            const WeightVector w_tilde_star = snapshots.back();

            // One trajectory per latent config; index t matches epoch t.
            std::vector<patterns::Trajectory> trajectories;
            for (std::size_t li = 0; li < latent_cfgs.size(); ++li) {
                patterns::LatentConfig lc = latent_cfgs[li];
                lc.seed = child_seed(child_seed(seed, fnv1a64("latent")), li);
                trajectories.push_back(
                    patterns::ap3_trajectory(base.w_star, w_tilde_star, snapshots, lc));
            }

            for (std::size_t epoch = 0; epoch < snapshots.size(); ++epoch) {
                EpochRecord r;
                r.trial = key.trial;
                r.method = method;
                r.fraction = key.fraction;
                r.epoch = epoch;
                r.ap2 = patterns::ap2(base.w_star, snapshots[epoch]);
                r.pd_accuracy = patterns::pd_metric(base.test_eval, test_evals[epoch],
                                                    patterns::PdMode::accuracy);
                r.pd_loss =
                    patterns::pd_metric(base.test_eval, test_evals[epoch], patterns::PdMode::loss);
                for (const auto& traj : trajectories) {
                    r.ap3.push_back(traj.points[epoch].kl_orig_to_snapshot);
                    r.gap_vs_orig.push_back(traj.points[epoch].gap_vs_orig);
                    r.gap_vs_tuned.push_back(traj.points[epoch].gap_vs_tuned);
                }
                out.records.push_back(std::move(r));
            }

            wtns::Container c = model_to_container(fr.model);
            for (const auto& [layer, mask] : masks) add_mask_tensor(c, layer, mask);
            c.meta["cell"]["trial"] = key.trial;
            c.meta["cell"]["method"] = std::string(pruning::prune_method_name(method));
            c.meta["cell"]["fraction"] = key.fraction;
            c.meta["cell"]["seed"] = seed;
            wtns::write(cfg.out_dir + "/weights/trial" + std::to_string(key.trial) + "_" +
                            std::string(pruning::prune_method_name(method)) + "_f" +
                            detail::fmt_short(key.fraction) + ".wtns",
                        c);
        } catch (const std::exception& e) {
            out.records.clear();
            out.status.error = e.what();
        }
        out.status.wall_time =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        for (auto& r : out.records) r.wall_time = out.status.wall_time;
    };

    const std::size_t workers = std::min(worker_count(), keys.size());
    if (workers <= 1) {
        for (std::size_t i = 0; i < keys.size(); ++i) run_cell(i);
    } else {
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (;;) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= keys.size()) return;
                    run_cell(i);
                }
            });
        }
        for (auto& t : pool) t.join();
    }

    for (auto& out : outputs) {
        report.cells.push_back(out.status);
        for (auto& r : out.records) report.records.push_back(std::move(r));
    }
    // Row order is fixed by cell coordinates, not completion order.
    auto method_rank = [&](PruneMethod m) {
        for (std::size_t i = 0; i < cfg.methods.size(); ++i)
            if (cfg.methods[i] == m) return i;
        return cfg.methods.size();
    };
    std::sort(report.records.begin(), report.records.end(),
              [&](const EpochRecord& a, const EpochRecord& b) {
                  if (a.trial != b.trial) return a.trial < b.trial;
                  const std::size_t ma = method_rank(a.method), mb = method_rank(b.method);
                  if (ma != mb) return ma < mb;
                  if (a.fraction != b.fraction) return a.fraction < b.fraction;
                  return a.epoch < b.epoch;
              });

    report.records_path = cfg.out_dir + "/records.csv";
    write_records_csv(report.records_path, report.records, report.latent_names);
    report.plot_paths =
        render_plots(report.records, report.latent_names, cfg.out_dir + "/plots");

    // Epoch-0 AP2 against final-epoch PD(accuracy): the headline comparative
    // statistic. A nonpositive correlation is surfaced as a deviation rather
    // than hidden.
    try {
        report.spearman_ap2_final_pd =
            rank_correlation(report.records, 0, ApMetric::ap2, 0, patterns::PdMode::accuracy,
                             cfg.fine_tune_epochs);
        if (!(report.spearman_ap2_final_pd > 0.0))
            report.deviations.push_back(
                "spearman(ap2@0, pd_accuracy@final) = " +
                detail::fmt_short(report.spearman_ap2_final_pd) +
                " is not positive: lower AP2 did not track lower PD in this run");
    } catch (const InsufficientData&) {
        // Too few cells for a correlation; leave NaN.
    }

    nlohmann::json manifest;
    manifest["format"] = {{"records", "v1"}, {"wtns", "WTNS0001"}};
    manifest["config"] = config_to_json(cfg);
    manifest["dataset"] = data.generator;
    manifest["model_dims"] = dims;
    manifest["tracked_layer"] = tracked_layer;
    manifest["latent_names"] = report.latent_names;
    manifest["cells"] = nlohmann::json::array();
    for (const auto& s : report.cells) {
        nlohmann::json js;
        js["trial"] = s.trial;
        js["method"] = std::string(pruning::prune_method_name(s.method));
        js["fraction"] = s.fraction;
        js["seed"] = s.seed;
        js["wall_time_s"] = s.wall_time;
        if (!s.error.empty()) js["error"] = s.error;
        manifest["cells"].push_back(std::move(js));
    }
    if (!std::isnan(report.spearman_ap2_final_pd))
        manifest["spearman_ap2_final_pd"] = report.spearman_ap2_final_pd;
    manifest["deviations"] = report.deviations;
    manifest["wall_time_s"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

    report.manifest_path = cfg.out_dir + "/manifest.json";
    std::ofstream mout(report.manifest_path, std::ios::binary);
    if (!mout) throw ParseError("cannot open '" + report.manifest_path + "' for writing");
    mout << manifest.dump(2) << "\n";
    return report;
}

}  // namespace prunescope::harness
