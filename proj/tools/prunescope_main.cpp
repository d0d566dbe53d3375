// prunescope command-line front end.
//
// Exit codes: 0 success, 1 usage error, 2 data or configuration error,
// 3 numerical failure. Diagnostics go to standard error; `analyze` and
// `report` print machine-readable JSON to standard output.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "prunescope/prunescope.hpp"

namespace {

using nlohmann::json;
using namespace prunescope;

int fail(int code, const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return code;
}

template <typename Fn>
int guarded(Fn&& fn) {
    try {
        fn();
        return 0;
    } catch (const NotPositiveDefinite& e) {
        return fail(3, e);
    } catch (const ConvergenceFailure& e) {
        return fail(3, e);
    } catch (const NonFiniteSample& e) {
        return fail(3, e);
    } catch (const NonFiniteLoss& e) {
        return fail(3, e);
    } catch (const OverflowGuard& e) {
        return fail(3, e);
    } catch (const std::exception& e) {
        return fail(2, e);
    }
}

json load_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open '" + path + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError("'" + path + "': " + e.what());
    }
}

json estimate_to_json(const divergence::DivergenceEstimate& e) {
    json j;
    j["value"] = e.value;
    j["std_error"] = e.std_error;
    j["method"] = std::string(divergence::estimate_method_name(e.method));
    j["n_samples"] = e.n_samples;
    return j;
}

struct TrainArgs {
    std::string config_path;
    std::string out_dir;
};

int run_train(const TrainArgs& args) {
    const harness::ExperimentConfig cfg = harness::config_from_json(load_json_file(args.config_path));
    const micronet::Dataset data = harness::build_dataset(cfg);
    const std::vector<std::size_t> dims = harness::resolve_model_dims(cfg, data);

    // Matches trial 0 of `experiment` so a baseline trained here is the same
    // model the sweep would start from.
    const std::uint64_t trial_seed =
        numkernel::child_seed(numkernel::child_seed(cfg.master_seed, numkernel::fnv1a64("trial")), 0);
    numkernel::RngStream init_rng(numkernel::child_seed(trial_seed, numkernel::fnv1a64("init")));
    micronet::MlpModel model = micronet::init_model(dims, cfg.activation, init_rng);
    micronet::TrainConfig tc = cfg.train;
    tc.seed = numkernel::child_seed(trial_seed, numkernel::fnv1a64("train"));
    micronet::TrainResult result = micronet::sgd_train(std::move(model), data, tc);

    std::filesystem::create_directories(args.out_dir);
    wtns::Container c = harness::model_to_container(result.model);
    c.meta["dataset"] = data.generator;
    c.meta["seed"] = cfg.master_seed;
    const std::string weights_path = args.out_dir + "/baseline.wtns";
    wtns::write(weights_path, c);

    const micronet::EvalResult train_eval =
        micronet::evaluate(result.model, data, micronet::Split::train, cfg.train.loss);
    const micronet::EvalResult test_eval =
        micronet::evaluate(result.model, data, micronet::Split::test, cfg.train.loss);
    json out;
    out["weights"] = weights_path;
    out["epochs"] = cfg.train.epochs;
    out["train"] = {{"loss", train_eval.loss}, {"accuracy", train_eval.accuracy}, {"n", train_eval.n}};
    out["test"] = {{"loss", test_eval.loss}, {"accuracy", test_eval.accuracy}, {"n", test_eval.n}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

struct PruneArgs {
    std::string weights_path;
    std::string method = "lowest";
    double fraction = 0.0;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> layer;
    std::string out_path;
};

int run_prune(const PruneArgs& args) {
    const wtns::Container in = wtns::read(args.weights_path);
    const pruning::PruneMethod method = pruning::prune_method_from_name(args.method);

    numkernel::RngStream rng(args.seed.value_or(0));
    numkernel::RngStream* rng_ptr = method == pruning::PruneMethod::random ? &rng : nullptr;
    if (method == pruning::PruneMethod::random && !args.seed)
        std::cerr << "note: --seed not given for random pruning, using 0\n";

    wtns::Container out;
    if (in.find("layer0") && !in.find("weights")) {
        // Model container: prune one layer in place, keep the rest.
        micronet::MlpModel model = harness::model_from_container(in);
        const std::size_t layer = args.layer.value_or(model.last_layer());
        pruning::WeightVector wv = micronet::layer_weight_vector(model, layer, false);
        const pruning::PruneMask mask = pruning::magnitude_mask(wv, args.fraction, method, rng_ptr);
        const pruning::WeightVector pruned = pruning::apply_mask(wv, mask);
        micronet::set_layer_from_vector(model, layer, pruned.values, false);
        out = harness::model_to_container(model);
        harness::add_mask_tensor(out, layer, mask);
        out.meta["pruned"] = {{"layer", layer},
                              {"method", args.method},
                              {"fraction", args.fraction},
                              {"origin", pruned.origin}};
    } else {
        pruning::WeightVector wv = harness::extract_weight_vector(in, args.layer);
        const pruning::PruneMask mask = pruning::magnitude_mask(wv, args.fraction, method, rng_ptr);
        const pruning::WeightVector pruned = pruning::apply_mask(wv, mask);
        wtns::Tensor tw;
        tw.name = "weights";
        tw.dims = {pruned.values.size()};
        tw.dtype = wtns::Dtype::f64;
        tw.f64 = pruned.values;
        out.tensors.push_back(std::move(tw));
        wtns::Tensor tm;
        tm.name = "mask";
        tm.dims = {mask.bits.size()};
        tm.dtype = wtns::Dtype::u8;
        tm.u8 = mask.bits;
        out.tensors.push_back(std::move(tm));
        out.meta["pruned"] = {{"method", args.method},
                              {"fraction", args.fraction},
                              {"origin", pruned.origin}};
    }
    if (args.seed) out.meta["pruned"]["seed"] = *args.seed;
    wtns::write(args.out_path, out);
    return 0;
}

struct AnalyzeArgs {
    std::string orig_path;
    std::string pruned_path;
    std::string latent = "gaussian-diag";
    double sigma = 1.0;
    double dof = 4.0;
    std::size_t groups = 100;
    std::size_t samples = 600000;
    std::uint64_t seed = 0;
    double beta = 1.0;
    double eigen_low = 0.5;
    double eigen_high = 2.0;
    std::optional<std::size_t> layer;
};

int run_analyze(const AnalyzeArgs& args) {
    const pruning::WeightVector orig =
        harness::extract_weight_vector(wtns::read(args.orig_path), args.layer);
    const pruning::WeightVector pruned =
        harness::extract_weight_vector(wtns::read(args.pruned_path), args.layer);

    patterns::LatentConfig cfg;
    cfg.family = latent::family_from_name(args.latent);
    cfg.sigma = args.sigma;
    cfg.dof = args.dof;
    cfg.groups = args.groups;
    cfg.mc_samples = args.samples;
    cfg.seed = args.seed;
    if (cfg.family == latent::Family::gaussian_nondiag) {
        numkernel::RngStream rng(numkernel::child_seed(args.seed, numkernel::fnv1a64("cov")));
        cfg.cov = latent::random_nondiag_cov(orig.dim(), args.beta, args.eigen_low,
                                             args.eigen_high, rng);
    }

    const double ap2 = patterns::ap2(orig, pruned);
    const divergence::DivergenceEstimate ap3 = patterns::ap3(orig, pruned, cfg);
    const patterns::LatentPair pair = patterns::build_latent_pair(orig, pruned, cfg);
    const numkernel::DenseMatrix cov_p = pair.p.covariance();
    const numkernel::DenseMatrix cov_q = pair.q.covariance();
    const double tv = divergence::tv_lower_bound(pair.p.mean(), pair.q.mean(), cov_p, cov_q);
    const double pinsker =
        divergence::pinsker_kl_lower_bound(pair.p.mean(), pair.q.mean(), cov_p, cov_q);

    json out;
    out["ap2"] = ap2;
    out["ap3"] = estimate_to_json(ap3);
    out["latent"] = args.latent;
    out["dim"] = orig.dim();
    out["latent_dim"] = pair.p.dim();
    out["tv_lower_bound"] = tv;
    out["pinsker_lower_bound"] = pinsker;
    std::cout << out.dump(2) << "\n";
    return 0;
}

int run_experiment_cmd(const std::string& config_path) {
    json j = load_json_file(config_path);
    if (j.contains("config")) j = j["config"];  // manifest.json reruns the run it records
    const harness::ExperimentConfig cfg = harness::config_from_json(j);
    const harness::RunReport report = harness::run_experiment(cfg);
    std::size_t failed = 0;
    for (const auto& c : report.cells)
        if (!c.error.empty()) ++failed;
    if (failed > 0)
        std::cerr << failed << " of " << report.cells.size()
                  << " cells failed; see " << report.manifest_path << "\n";
    json out;
    out["records"] = report.records_path;
    out["manifest"] = report.manifest_path;
    out["rows"] = report.records.size();
    out["plots"] = report.plot_paths.size();
    if (!std::isnan(report.spearman_ap2_final_pd))
        out["spearman_ap2_final_pd"] = report.spearman_ap2_final_pd;
    if (!report.deviations.empty()) out["deviations"] = report.deviations;
    std::cout << out.dump(2) << "\n";
    return 0;
}

struct ReportArgs {
    std::string records_path;
    std::string out_dir;
};

int run_report(const ReportArgs& args) {
    const harness::RecordsFile rf = harness::read_records_csv(args.records_path);
    if (rf.records.empty()) throw InsufficientData("'" + args.records_path + "' holds no rows");

    const std::vector<std::string> plots =
        harness::render_plots(rf.records, rf.latent_names, args.out_dir);

    std::size_t final_epoch = 0;
    for (const auto& r : rf.records) final_epoch = std::max(final_epoch, r.epoch);

    auto rho_or_null = [&](harness::ApMetric metric, std::size_t latent_index) -> json {
        try {
            return harness::rank_correlation(rf.records, 0, metric, latent_index,
                                             patterns::PdMode::accuracy, final_epoch);
        } catch (const InsufficientData&) {
            return nullptr;
        }
    };

    json out;
    out["plots"] = plots;
    out["final_epoch"] = final_epoch;
    auto& sp = out["spearman_epoch0_vs_final_pd_accuracy"];
    sp["ap2"] = rho_or_null(harness::ApMetric::ap2, 0);
    for (std::size_t i = 0; i < rf.latent_names.size(); ++i)
        sp["ap3_" + rf.latent_names[i]] = rho_or_null(harness::ApMetric::ap3, i);
    std::cout << out.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"prunescope: pruning pattern analysis toolkit"};
    app.require_subcommand(1);
    int rc = 0;

    TrainArgs train_args;
    CLI::App* train = app.add_subcommand("train", "Train a baseline model from a config");
    train->add_option("--config", train_args.config_path, "Experiment config JSON")->required();
    train->add_option("--out", train_args.out_dir, "Output directory")->required();
    train->callback([&] { rc = guarded([&] { run_train(train_args); }); });

    PruneArgs prune_args;
    CLI::App* prune = app.add_subcommand("prune", "Prune a weight container");
    prune->add_option("--weights", prune_args.weights_path, "Input WTNS file")->required();
    prune->add_option("--method", prune_args.method, "Pruning method")
        ->required()
        ->check(CLI::IsMember({"lowest", "highest", "random"}));
    prune->add_option("--fraction", prune_args.fraction, "Fraction of weights to zero")
        ->required();
    prune->add_option("--seed", prune_args.seed, "Seed for random pruning");
    prune->add_option("--layer", prune_args.layer, "Layer index for model containers");
    prune->add_option("--out", prune_args.out_path, "Output WTNS file")->required();
    prune->callback([&] { rc = guarded([&] { run_prune(prune_args); }); });

    AnalyzeArgs analyze_args;
    CLI::App* analyze = app.add_subcommand("analyze", "Compare two weight containers");
    analyze->add_option("--orig", analyze_args.orig_path, "Original weights WTNS")->required();
    analyze->add_option("--pruned", analyze_args.pruned_path, "Pruned weights WTNS")->required();
    analyze->add_option("--latent", analyze_args.latent, "Latent family")
        ->required()
        ->check(CLI::IsMember({"gaussian-diag", "gaussian-nondiag", "student"}));
    analyze->add_option("--sigma", analyze_args.sigma, "Isotropic std deviation (gaussian-diag)");
    analyze->add_option("--dof", analyze_args.dof, "Degrees of freedom (student)");
    analyze->add_option("--groups", analyze_args.groups, "Group count (student)");
    analyze->add_option("--samples", analyze_args.samples, "Monte Carlo sample count (student)");
    analyze->add_option("--seed", analyze_args.seed, "Seed for sampling / covariance draw");
    analyze->add_option("--beta", analyze_args.beta, "Covariance scale (gaussian-nondiag)");
    analyze->add_option("--eigen-low", analyze_args.eigen_low,
                        "Covariance eigenvalue lower bound (gaussian-nondiag)");
    analyze->add_option("--eigen-high", analyze_args.eigen_high,
                        "Covariance eigenvalue upper bound (gaussian-nondiag)");
    analyze->add_option("--layer", analyze_args.layer, "Layer index for model containers");
    analyze->callback([&] { rc = guarded([&] { run_analyze(analyze_args); }); });

    std::string experiment_config;
    CLI::App* experiment = app.add_subcommand("experiment", "Run a full pruning sweep");
    experiment->add_option("--config", experiment_config, "Experiment config or manifest JSON")
        ->required();
    experiment->callback([&] { rc = guarded([&] { run_experiment_cmd(experiment_config); }); });

    ReportArgs report_args;
    CLI::App* report = app.add_subcommand("report", "Render plots and correlations from records");
    report->add_option("--records", report_args.records_path, "records.csv path")->required();
    report->add_option("--out", report_args.out_dir, "Output directory for SVG files")->required();
    report->callback([&] { rc = guarded([&] { run_report(report_args); }); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << std::flush;
        return 1;
    }
    return rc;
}
