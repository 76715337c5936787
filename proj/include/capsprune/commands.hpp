#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "capsprune/capsnet.hpp"
#include "capsprune/data.hpp"

namespace capsprune {

// Flat configuration surface: one JSON object, every field also a CLI flag of
// the same name.
struct ExperimentConfig {
    // dataset
    std::string dataset = "synth";  // synth | idx | cifar10
    int synth_n = 2000;
    int synth_test_n = 500;
    std::string idx_images, idx_labels, idx_test_images, idx_test_labels;
    std::string cifar_train, cifar_test;  // comma-separated batch files

    CapsNetConfig model;

    // training
    int epochs = 50;
    int batch_size = 64;
    float lr = 1e-3f;

    // pruning
    std::string criterion = "taylor";
    std::string schedule = "100:52,10:2";
    int finetune_epochs = 50;
    int warmup_epochs = 1;
    bool update_during_scoring = false;
    std::string scoring_loss = "total";  // total | margin

    // bench
    int repeats = 5;
    std::vector<std::string> checkpoints;

    std::uint64_t seed = 1;
    std::string out = "out";
    std::string checkpoint;

    void validate() const;
};

nlohmann::json experiment_to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig config_from_file(const std::string& path);

std::pair<DatasetSplit, DatasetSplit> load_dataset(const ExperimentConfig& cfg);

int cmd_train(const ExperimentConfig& cfg);
int cmd_prune(const ExperimentConfig& cfg);
int cmd_flops(const ExperimentConfig& cfg, int n_remaining);
int cmd_bench(const ExperimentConfig& cfg);

}  // namespace capsprune
