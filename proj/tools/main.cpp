#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "capsprune/commands.hpp"
#include "capsprune/error.hpp"

namespace {

void add_common_options(CLI::App* cmd, capsprune::ExperimentConfig& cfg,
                        std::string& config_path) {
    cmd->add_option("--config", config_path, "flat JSON config file, flags override it");
    cmd->add_option("--seed", cfg.seed, "PRNG seed")->capture_default_str();
    cmd->add_option("--out", cfg.out, "output directory")->capture_default_str();
    cmd->add_option("--dataset", cfg.dataset, "synth | idx | cifar10")
        ->capture_default_str();
    cmd->add_option("--synth_n", cfg.synth_n)->capture_default_str();
    cmd->add_option("--synth_test_n", cfg.synth_test_n)->capture_default_str();
    cmd->add_option("--idx_images", cfg.idx_images);
    cmd->add_option("--idx_labels", cfg.idx_labels);
    cmd->add_option("--idx_test_images", cfg.idx_test_images);
    cmd->add_option("--idx_test_labels", cfg.idx_test_labels);
    cmd->add_option("--cifar_train", cfg.cifar_train, "comma-separated batch files");
    cmd->add_option("--cifar_test", cfg.cifar_test, "comma-separated batch files");

    cmd->add_option("--image_size", cfg.model.image_size)->capture_default_str();
    cmd->add_option("--image_channels", cfg.model.image_channels)->capture_default_str();
    cmd->add_option("--conv1_filters", cfg.model.conv1_filters)->capture_default_str();
    cmd->add_option("--kernel", cfg.model.kernel)->capture_default_str();
    cmd->add_option("--conv2_capsule_types", cfg.model.conv2_capsule_types)
        ->capture_default_str();
    cmd->add_option("--pc_dim", cfg.model.pc_dim)->capture_default_str();
    cmd->add_option("--out_caps_dim", cfg.model.out_caps_dim)->capture_default_str();
    cmd->add_option("--num_classes", cfg.model.num_classes)->capture_default_str();
    cmd->add_option("--routing_iters", cfg.model.routing_iters)->capture_default_str();
    cmd->add_option("--m_plus", cfg.model.m_plus)->capture_default_str();
    cmd->add_option("--m_minus", cfg.model.m_minus)->capture_default_str();
    cmd->add_option("--lambda_down", cfg.model.lambda_down)->capture_default_str();
    cmd->add_option("--recon_weight", cfg.model.recon_weight)->capture_default_str();
    cmd->add_option("--decoder_hidden", cfg.model.decoder_hidden, "hidden layer widths");

    cmd->add_option("--epochs", cfg.epochs)->capture_default_str();
    cmd->add_option("--batch_size", cfg.batch_size)->capture_default_str();
    cmd->add_option("--lr", cfg.lr)->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
    using namespace capsprune;

    // The config file provides the defaults; flags parsed afterwards override.
    std::string config_path;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--config" && i + 1 < argc) config_path = argv[i + 1];
        else if (a.rfind("--config=", 0) == 0) config_path = a.substr(9);
    }

    ExperimentConfig cfg;
    try {
        if (!config_path.empty()) cfg = config_from_file(config_path);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    CLI::App app{"capsule network training and structured primary-capsule pruning"};
    app.require_subcommand(1);
    std::string config_opt;  // --config is consumed by the prescan above

    auto* train = app.add_subcommand("train", "train a baseline model and checkpoint it");
    add_common_options(train, cfg, config_opt);

    auto* prune = app.add_subcommand("prune", "staged prune/fine-tune from a checkpoint");
    add_common_options(prune, cfg, config_opt);
    prune->add_option("--checkpoint", cfg.checkpoint, "input PCPR checkpoint");
    prune->add_option("--criterion", cfg.criterion, "taylor | min_weight | activation")
        ->capture_default_str();
    prune->add_option("--schedule", cfg.schedule, "step:floor phases, e.g. 100:52,10:2")
        ->capture_default_str();
    prune->add_option("--finetune_epochs", cfg.finetune_epochs)->capture_default_str();
    prune->add_option("--warmup_epochs", cfg.warmup_epochs)->capture_default_str();
    prune->add_flag("--update_during_scoring", cfg.update_during_scoring,
                    "apply optimizer steps during the scoring epoch");
    prune->add_option("--scoring_loss", cfg.scoring_loss, "total | margin")
        ->capture_default_str();

    auto* flops = app.add_subcommand("flops", "analytic FLOPS report");
    add_common_options(flops, cfg, config_opt);
    int n_remaining = -1;
    flops->add_option("--n_remaining", n_remaining,
                      "surviving capsule count (default: all)");

    auto* bench = app.add_subcommand("bench", "forward-pass latency benchmark");
    add_common_options(bench, cfg, config_opt);
    bench->add_option("--checkpoint", cfg.checkpoints, "PCPR checkpoints to time")
        ->take_all();
    bench->add_option("--repeats", cfg.repeats, "timed passes per checkpoint (>= 3)")
        ->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(cfg);
        if (prune->parsed()) return cmd_prune(cfg);
        if (flops->parsed()) return cmd_flops(cfg, n_remaining);
        if (bench->parsed()) return cmd_bench(cfg);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
