#include "capsprune/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "capsprune/checkpoint.hpp"
#include "capsprune/error.hpp"
#include "capsprune/flops.hpp"
#include "capsprune/pruning.hpp"
#include "capsprune/train.hpp"

namespace capsprune {

namespace fs = std::filesystem;
using nlohmann::json;

void ExperimentConfig::validate() const {
    if (dataset != "synth" && dataset != "idx" && dataset != "cifar10")
        throw ArgumentError("dataset must be synth, idx or cifar10");
    parse_criterion(criterion);
    if (scoring_loss != "total" && scoring_loss != "margin")
        throw ArgumentError("scoring_loss must be total or margin");
    if (epochs < 0) throw ArgumentError("epochs must be non-negative");
    if (batch_size < 1) throw ArgumentError("batch_size must be positive");
    if (lr <= 0.0f) throw ArgumentError("lr must be positive");
    if (out.empty()) throw ArgumentError("out directory must be set");
    model.validate();
    const auto sched = parse_schedule(schedule, finetune_epochs, warmup_epochs);
    for (const auto& phase : sched.phases)
        if (phase.floor >= model.pc_total())
            throw ArgumentError("schedule floor " + std::to_string(phase.floor) +
                                " must be below the capsule count " +
                                std::to_string(model.pc_total()));
}

nlohmann::json experiment_to_json(const ExperimentConfig& c) {
    json j = config_to_json(c.model);
    j["dataset"] = c.dataset;
    j["synth_n"] = c.synth_n;
    j["synth_test_n"] = c.synth_test_n;
    j["idx_images"] = c.idx_images;
    j["idx_labels"] = c.idx_labels;
    j["idx_test_images"] = c.idx_test_images;
    j["idx_test_labels"] = c.idx_test_labels;
    j["cifar_train"] = c.cifar_train;
    j["cifar_test"] = c.cifar_test;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["lr"] = c.lr;
    j["criterion"] = c.criterion;
    j["schedule"] = c.schedule;
    j["finetune_epochs"] = c.finetune_epochs;
    j["warmup_epochs"] = c.warmup_epochs;
    j["update_during_scoring"] = c.update_during_scoring;
    j["scoring_loss"] = c.scoring_loss;
    j["repeats"] = c.repeats;
    j["seed"] = c.seed;
    j["out"] = c.out;
    j["checkpoint"] = c.checkpoint;
    return j;
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    if (!j.is_object()) throw ParseError("experiment config must be a JSON object");
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "dataset") c.dataset = value.get<std::string>();
            else if (key == "synth_n") c.synth_n = value.get<int>();
            else if (key == "synth_test_n") c.synth_test_n = value.get<int>();
            else if (key == "idx_images") c.idx_images = value.get<std::string>();
            else if (key == "idx_labels") c.idx_labels = value.get<std::string>();
            else if (key == "idx_test_images") c.idx_test_images = value.get<std::string>();
            else if (key == "idx_test_labels") c.idx_test_labels = value.get<std::string>();
            else if (key == "cifar_train") c.cifar_train = value.get<std::string>();
            else if (key == "cifar_test") c.cifar_test = value.get<std::string>();
            else if (key == "image_size") c.model.image_size = value.get<int>();
            else if (key == "image_channels") c.model.image_channels = value.get<int>();
            else if (key == "conv1_filters") c.model.conv1_filters = value.get<int>();
            else if (key == "kernel") c.model.kernel = value.get<int>();
            else if (key == "conv2_capsule_types")
                c.model.conv2_capsule_types = value.get<int>();
            else if (key == "pc_dim") c.model.pc_dim = value.get<int>();
            else if (key == "out_caps_dim") c.model.out_caps_dim = value.get<int>();
            else if (key == "num_classes") c.model.num_classes = value.get<int>();
            else if (key == "routing_iters") c.model.routing_iters = value.get<int>();
            else if (key == "m_plus") c.model.m_plus = value.get<float>();
            else if (key == "m_minus") c.model.m_minus = value.get<float>();
            else if (key == "lambda_down") c.model.lambda_down = value.get<float>();
            else if (key == "recon_weight") c.model.recon_weight = value.get<float>();
            else if (key == "decoder_hidden")
                c.model.decoder_hidden = value.get<std::vector<int>>();
            else if (key == "epochs") c.epochs = value.get<int>();
            else if (key == "batch_size") c.batch_size = value.get<int>();
            else if (key == "lr") c.lr = value.get<float>();
            else if (key == "criterion") c.criterion = value.get<std::string>();
            else if (key == "schedule") c.schedule = value.get<std::string>();
            else if (key == "finetune_epochs") c.finetune_epochs = value.get<int>();
            else if (key == "warmup_epochs") c.warmup_epochs = value.get<int>();
            else if (key == "update_during_scoring")
                c.update_during_scoring = value.get<bool>();
            else if (key == "scoring_loss") c.scoring_loss = value.get<std::string>();
            else if (key == "repeats") c.repeats = value.get<int>();
            else if (key == "seed") c.seed = value.get<std::uint64_t>();
            else if (key == "out") c.out = value.get<std::string>();
            else if (key == "checkpoint") c.checkpoint = value.get<std::string>();
            else
                throw ParseError("unknown config key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw ParseError(std::string("bad config value: ") + e.what());
    }
    return c;
}

ExperimentConfig config_from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    return experiment_from_json(j);
}

namespace {

std::vector<std::string> split_commas(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

void check_images_match(const DatasetSplit& split, const CapsNetConfig& model,
                        const std::string& which) {
    if (split.size() == 0) throw ArgumentError(which + " dataset is empty");
    if (split.images->shape[1] != model.image_channels ||
        split.images->shape[2] != model.image_size)
        throw ArgumentError(which + " dataset shape " + shape_str(split.images->shape) +
                            " does not match the configured model geometry");
}

std::ofstream open_log(const std::string& dir, const std::string& name) {
    fs::create_directories(dir);
    std::ofstream f(fs::path(dir) / name);
    if (!f) throw IoError("cannot open " + (fs::path(dir) / name).string());
    return f;
}

}  // namespace

std::pair<DatasetSplit, DatasetSplit> load_dataset(const ExperimentConfig& cfg) {
    DatasetSplit train, test;
    if (cfg.dataset == "synth") {
        train = synth_dataset(cfg.synth_n, cfg.model.image_size, cfg.model.num_classes,
                              cfg.seed);
        test = synth_dataset(cfg.synth_test_n, cfg.model.image_size, cfg.model.num_classes,
                             cfg.seed + 1);
    } else if (cfg.dataset == "idx") {
        train = load_idx(cfg.idx_images, cfg.idx_labels);
        test = load_idx(cfg.idx_test_images, cfg.idx_test_labels);
        train.num_classes = cfg.model.num_classes;
        test.num_classes = cfg.model.num_classes;
    } else if (cfg.dataset == "cifar10") {
        train = load_cifar10(split_commas(cfg.cifar_train));
        test = load_cifar10(split_commas(cfg.cifar_test));
    } else {
        throw ArgumentError("dataset must be synth, idx or cifar10");
    }
    check_images_match(train, cfg.model, "train");
    check_images_match(test, cfg.model, "test");
    train.validate();
    test.validate();
    return {std::move(train), std::move(test)};
}

int cmd_train(const ExperimentConfig& cfg) {
    cfg.validate();
    auto [train, test] = load_dataset(cfg);

    Rng rng(cfg.seed);
    auto model = CapsNetModel::init(cfg.model, rng);

    auto log = open_log(cfg.out, "train_log.txt");
    TrainOptions opts;
    opts.epochs = cfg.epochs;
    opts.batch_size = cfg.batch_size;
    opts.adam.lr = cfg.lr;
    opts.seed = cfg.seed;
    opts.restore_best = true;
    opts.log = &log;

    const auto result = train_epochs(model, train, test, opts);

    auto hist = open_log(cfg.out, "train_history.csv");
    hist << "epoch,train_loss,train_accuracy,test_accuracy,seconds\n";
    for (const auto& s : result.history) {
        char line[160];
        std::snprintf(line, sizeof(line), "%d,%.9g,%.9g,%.9g,%.6f\n", s.epoch,
                      static_cast<double>(s.train_loss),
                      static_cast<double>(s.train_accuracy),
                      static_cast<double>(s.test_accuracy), s.seconds);
        hist << line;
    }

    const std::string ckpt = (fs::path(cfg.out) / "baseline.pcpr").string();
    save_checkpoint(model, ckpt, result.best_epoch, result.best_test_accuracy);
    std::cout << "trained " << cfg.epochs << " epochs, best test accuracy "
              << result.best_test_accuracy << " (epoch " << result.best_epoch << ")\n"
              << "checkpoint: " << ckpt << "\n";
    log << "best test accuracy " << result.best_test_accuracy << " at epoch "
        << result.best_epoch << "\n";
    return 0;
}

int cmd_prune(const ExperimentConfig& cfg) {
    cfg.validate();
    if (cfg.checkpoint.empty()) throw ArgumentError("prune requires --checkpoint");
    auto loaded = load_checkpoint(cfg.checkpoint);
    auto& model = loaded.model;

    ExperimentConfig data_cfg = cfg;
    data_cfg.model = model.config;
    auto [train, test] = load_dataset(data_cfg);

    PruneLoopOptions opts;
    opts.schedule = parse_schedule(cfg.schedule, cfg.finetune_epochs, cfg.warmup_epochs);
    opts.criterion = parse_criterion(cfg.criterion);
    opts.scoring.batch_size = cfg.batch_size;
    opts.scoring.update_weights = cfg.update_during_scoring;
    opts.scoring.margin_only = cfg.scoring_loss == "margin";
    opts.scoring.adam.lr = cfg.lr;
    opts.finetune.batch_size = cfg.batch_size;
    opts.finetune.adam.lr = cfg.lr;
    opts.finetune.seed = cfg.seed;

    // Reject schedules that can never fire or that would empty the network.
    {
        int n = model.n_surviving();
        int events = 0;
        for (const auto& phase : opts.schedule.phases)
            while (n - phase.step_size >= phase.floor) {
                n -= phase.step_size;
                ++events;
            }
        if (events == 0)
            throw ArgumentError("schedule '" + cfg.schedule + "' prunes nothing from " +
                                std::to_string(model.n_surviving()) + " capsules");
    }

    auto log = open_log(cfg.out, "prune_log.txt");
    opts.log = &log;
    int event_no = 0;
    opts.on_event = [&cfg, &event_no](const CapsNetModel& m, const PruneEvent& e) {
        ++event_no;
        const std::string path =
            (fs::path(cfg.out) / ("pc_" + std::to_string(e.n_remaining) + ".pcpr")).string();
        save_checkpoint(m, path, event_no, e.best_accuracy);
    };

    const auto records = prune_loop(model, train, test, opts);
    const std::string curve = (fs::path(cfg.out) / "curve.csv").string();
    emit_curve(records, curve);
    std::cout << "pruned " << records.front().n_remaining << " -> "
              << records.back().n_remaining << " capsules over " << records.size() - 1
              << " events\ncurve: " << curve << "\n";
    return 0;
}

int cmd_flops(const ExperimentConfig& cfg, int n_remaining) {
    cfg.model.validate();
    const int n = n_remaining < 0 ? cfg.model.pc_total() : n_remaining;
    const auto report = flops_report(cfg.model, n);
    std::cout << render_flops_table(report);

    json j{{"n_pcs", report.n_pcs},
           {"baseline_pcs", report.baseline_pcs},
           {"pc_transform_flops", report.pc_transform_flops},
           {"routing_flops", report.routing_flops},
           {"routing_iters", report.routing_iters},
           {"classes", report.classes},
           {"caps_dim", report.caps_dim},
           {"pc_transform_reduction", report.pc_transform_reduction},
           {"routing_reduction", report.routing_reduction},
           {"conv_flops", report.conv_flops},
           {"decoder_flops", report.decoder_flops}};
    auto out = open_log(cfg.out, "flops.json");
    out << j.dump(2) << "\n";
    return 0;
}

int cmd_bench(const ExperimentConfig& cfg) {
    if (cfg.repeats < 3) throw ArgumentError("bench requires at least 3 repeats");
    std::vector<std::string> paths = cfg.checkpoints;
    if (paths.empty() && !cfg.checkpoint.empty()) paths.push_back(cfg.checkpoint);
    if (paths.empty()) throw ArgumentError("bench requires --checkpoint");

    struct Row {
        int n_pcs;
        double median_s;
        double samples_per_s;
    };
    std::vector<Row> rows;

    for (const auto& path : paths) {
        auto loaded = load_checkpoint(path);
        const auto& model = loaded.model;

        ExperimentConfig data_cfg = cfg;
        data_cfg.model = model.config;
        auto [train, test] = load_dataset(data_cfg);
        (void)train;
        if (test.size() == 0) throw ArgumentError("bench requires a non-empty test set");

        auto pass = [&model, &test, &cfg] {
            std::vector<int> idx(cfg.batch_size);
            for (int start = 0; start < test.size(); start += cfg.batch_size) {
                const int count = std::min(cfg.batch_size, test.size() - start);
                for (int i = 0; i < count; ++i) idx[i] = start + i;
                auto [images, labels] = make_batch(test, idx.data(), count);
                (void)labels;
                forward(nullptr, model, images, nullptr, false);
            }
        };

        pass();  // warm-up, untimed
        std::vector<double> times(cfg.repeats);
        for (int r = 0; r < cfg.repeats; ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            pass();
            times[r] =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        }
        std::sort(times.begin(), times.end());
        const double median = times[times.size() / 2];
        rows.push_back({model.n_surviving(), median, test.size() / median});
    }

    auto csv = open_log(cfg.out, "bench.csv");
    csv << "n_pcs,median_s,samples_per_s\n";
    std::cout << "n_pcs  median_s  samples_per_s\n";
    for (const auto& r : rows) {
        char line[128];
        std::snprintf(line, sizeof(line), "%d,%.6f,%.2f\n", r.n_pcs, r.median_s,
                      r.samples_per_s);
        csv << line;
        std::printf("%5d  %8.4f  %10.1f\n", r.n_pcs, r.median_s, r.samples_per_s);
    }
    return 0;
}

}  // namespace capsprune
