#pragma once

#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "capsprune/capsnet.hpp"
#include "capsprune/data.hpp"
#include "capsprune/train.hpp"

namespace capsprune {

enum class PruneCriterion { taylor, min_weight, activation };

PruneCriterion parse_criterion(const std::string& name);
std::string to_string(PruneCriterion c);

struct PruneRanking {
    std::map<int, float> scores;  // original PC index -> accumulated score
    int batches_seen = 0;
    int n_remaining = 0;

    void validate() const;
};

PruneRanking make_ranking(const std::vector<int>& survivors);

// Mean over samples of |sum_d a*g| per capsule. Gradients must come from a
// backward pass of the batch loss against these activations.
std::vector<float> taylor_score_batch(const Tensor& pc_activations, const Tensor& pc_grads);

// l2 norm of one bank row (all classes) by row position.
float min_weight_score(const Tensor& transform_bank, int row);

// Mean absolute activation per capsule over samples and dims.
std::vector<float> activation_score_batch(const Tensor& pc_activations);

void accumulate(PruneRanking& ranking, const std::vector<int>& survivors,
                const std::vector<float>& batch_scores);

// Accumulated scores divided by n_remaining * batches_seen. Order-preserving.
std::map<int, float> normalize(const PruneRanking& ranking);

// The k lowest-valued capsules; ties broken by smaller original index.
// Returned ascending.
std::vector<int> select_prune_targets(const std::map<int, float>& values, int k);

// Physically drops the targets' bank rows and survivor entries. Conv layers
// and decoder are untouched.
void apply_prune(CapsNetModel& model, const std::vector<int>& targets);

struct PrunePhase {
    int step_size = 0;
    int floor = 0;
};

struct PruneSchedule {
    std::vector<PrunePhase> phases;
    int finetune_epochs = 50;
    int warmup_epochs = 1;

    void validate() const;
};

PruneSchedule default_schedule();

// "step:floor,step:floor" compact form, e.g. "100:52,10:2".
PruneSchedule parse_schedule(const std::string& text, int finetune_epochs, int warmup_epochs);
std::string schedule_str(const PruneSchedule& schedule);

struct ScoreOptions {
    int batch_size = 64;
    bool update_weights = false;  // apply optimizer steps during the scoring epoch
    bool margin_only = false;     // score against the margin term alone
    AdamOptions adam;
    std::uint64_t seed = 1;
};

// One pass over the data accumulating criterion scores for every surviving
// capsule. Weights are frozen unless update_weights is set.
PruneRanking score_epoch(CapsNetModel& model, const DatasetSplit& data, PruneCriterion criterion,
                         const ScoreOptions& opts);

// Post-prune training that returns the best test accuracy over the epochs and
// leaves the best-epoch weights in the model. epochs == 0 evaluates only.
float fine_tune(CapsNetModel& model, const DatasetSplit& train, const DatasetSplit& test,
                int epochs, const TrainOptions& base);

struct PruneEvent {
    int n_remaining = 0;
    float best_accuracy = 0.0f;
    long long flops_pc = 0;
    long long flops_routing = 0;
    double wall_time_s = 0.0;
};

struct PruneLoopOptions {
    PruneSchedule schedule;
    PruneCriterion criterion = PruneCriterion::taylor;
    ScoreOptions scoring;
    TrainOptions finetune;
    std::ostream* log = nullptr;
    // Called after each prune event, e.g. to drop a per-stage checkpoint.
    std::function<void(const CapsNetModel&, const PruneEvent&)> on_event;
};

// Staged prune/fine-tune driver. The first record is the pre-prune baseline;
// each later record follows one {score, select, prune, fine-tune} event.
std::vector<PruneEvent> prune_loop(CapsNetModel& model, const DatasetSplit& train,
                                   const DatasetSplit& test, const PruneLoopOptions& opts);

}  // namespace capsprune
