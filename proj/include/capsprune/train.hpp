#pragma once

#include <cstdint>
#include <ostream>
#include <vector>

#include "capsprune/capsnet.hpp"
#include "capsprune/data.hpp"

namespace capsprune {

struct AdamOptions {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

class Adam {
  public:
    explicit Adam(std::vector<TensorPtr> params, AdamOptions opts = {});

    void zero_grad();
    void step();
    std::int64_t steps() const { return t_; }

  private:
    std::vector<TensorPtr> params_;
    AdamOptions opts_;
    std::vector<std::vector<float>> m_, v_;
    std::int64_t t_ = 0;
};

struct TrainOptions {
    int epochs = 50;
    int batch_size = 64;
    AdamOptions adam;
    std::uint64_t seed = 1;  // shuffle order
    bool restore_best = false;
    std::ostream* log = nullptr;
};

struct EpochStats {
    int epoch = 0;
    float train_loss = 0.0f;
    float train_accuracy = 0.0f;
    float test_accuracy = 0.0f;
    double seconds = 0.0;
};

struct TrainResult {
    std::vector<EpochStats> history;
    float best_test_accuracy = 0.0f;
    int best_epoch = -1;
};

// Top-1 accuracy on a split, batched, without recording gradients.
float evaluate(const CapsNetModel& model, const DatasetSplit& split, int batch_size = 64);

// Adam on the total loss with per-epoch seeded shuffles. Tracks the best test
// accuracy seen; with restore_best the weights from that epoch are copied back
// into the model before returning.
TrainResult train_epochs(CapsNetModel& model, const DatasetSplit& train,
                         const DatasetSplit& test, const TrainOptions& opts);

}  // namespace capsprune
