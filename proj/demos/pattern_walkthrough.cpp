// End-to-end walkthrough: train a small classifier on synthetic blobs, prune
// its output layer three ways, and print how AP2 / AP3 / PD respond before
// and after fine-tuning.

#include <cstdio>

#include "prunescope/prunescope.hpp"

using namespace prunescope;

int main() {
    numkernel::RngStream data_rng(7);
    micronet::Dataset data = micronet::make_blobs(3, 200, 0.9, 2, data_rng);

    numkernel::RngStream init_rng(11);
    micronet::MlpModel model = micronet::init_model({2, 16, 3}, micronet::Activation::relu, init_rng);

    micronet::TrainConfig tc;
    tc.epochs = 30;
    tc.seed = 13;
    micronet::TrainResult base = micronet::sgd_train(std::move(model), data, tc);
    const micronet::EvalResult base_eval =
        micronet::evaluate(base.model, data, micronet::Split::test);
    std::printf("baseline test accuracy %.3f, loss %.4f\n", base_eval.accuracy, base_eval.loss);

    const std::size_t layer = base.model.last_layer();
    const pruning::WeightVector w_star = micronet::layer_weight_vector(base.model, layer, false);

    patterns::LatentConfig latent_cfg;
    latent_cfg.family = latent::Family::gaussian_diag;
    latent_cfg.sigma = 1.0;

    for (pruning::PruneMethod method : {pruning::PruneMethod::lowest, pruning::PruneMethod::highest,
                                        pruning::PruneMethod::random}) {
        numkernel::RngStream mask_rng(17);
        numkernel::RngStream* rng = method == pruning::PruneMethod::random ? &mask_rng : nullptr;
        const pruning::PruneMask mask = pruning::magnitude_mask(w_star, 0.5, method, rng);
        const pruning::WeightVector w_tilde = pruning::apply_mask(w_star, mask);

        micronet::MlpModel pruned = base.model;
        micronet::set_layer_from_vector(pruned, layer, w_tilde.values, false);
        const micronet::EvalResult pruned_eval =
            micronet::evaluate(pruned, data, micronet::Split::test);

        micronet::TrainConfig ft = tc;
        ft.epochs = 10;
        ft.seed = 19;
        micronet::MaskSet masks;
        masks.emplace(layer, mask);
        micronet::FineTuneResult tuned =
            micronet::fine_tune(std::move(pruned), masks, data, ft, layer, false);
        const micronet::EvalResult tuned_eval =
            micronet::evaluate(tuned.model, data, micronet::Split::test);

        const double ap2 = patterns::ap2(w_star, w_tilde);
        const divergence::DivergenceEstimate ap3 = patterns::ap3(w_star, w_tilde, latent_cfg);
        std::printf(
            "%-7s  ap2 %8.4f  ap3 %8.4f  pd(acc) pruned %.3f -> tuned %.3f\n",
            std::string(pruning::prune_method_name(method)).c_str(), ap2, ap3.value,
            patterns::pd_metric(base_eval, pruned_eval, patterns::PdMode::accuracy),
            patterns::pd_metric(base_eval, tuned_eval, patterns::PdMode::accuracy));
    }
    return 0;
}
