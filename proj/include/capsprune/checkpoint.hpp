#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "capsprune/capsnet.hpp"
#include "capsprune/pruning.hpp"

namespace capsprune {

constexpr std::uint32_t kCheckpointVersion = 1;

struct LoadedCheckpoint {
    CapsNetModel model;
    int epoch = 0;
    float accuracy = 0.0f;
};

nlohmann::json config_to_json(const CapsNetConfig& config);
CapsNetConfig config_from_json(const nlohmann::json& j);

// "PCPR" | version | metadata JSON | named tensors, all little-endian.
void save_checkpoint(const CapsNetModel& model, const std::string& path, int epoch,
                     float accuracy);
LoadedCheckpoint load_checkpoint(const std::string& path);

// CSV with one row per record, ordered by descending n_remaining.
void emit_curve(const std::vector<PruneEvent>& records, const std::string& path);
std::vector<PruneEvent> read_curve(const std::string& path);

}  // namespace capsprune
