#include "capsprune/pruning.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "capsprune/error.hpp"
#include "capsprune/flops.hpp"
#include "capsprune/tape.hpp"

namespace capsprune {

PruneCriterion parse_criterion(const std::string& name) {
    if (name == "taylor") return PruneCriterion::taylor;
    if (name == "min_weight") return PruneCriterion::min_weight;
    if (name == "activation") return PruneCriterion::activation;
    throw ArgumentError("unknown criterion '" + name +
                        "' (expected taylor, min_weight or activation)");
}

std::string to_string(PruneCriterion c) {
    switch (c) {
        case PruneCriterion::taylor: return "taylor";
        case PruneCriterion::min_weight: return "min_weight";
        case PruneCriterion::activation: return "activation";
    }
    throw ArgumentError("invalid criterion value");
}

void PruneRanking::validate() const {
    if (static_cast<int>(scores.size()) != n_remaining)
        throw InvariantError("ranking must hold exactly one score per surviving capsule");
    if (batches_seen < 0) throw InvariantError("batches_seen must be non-negative");
    for (const auto& [idx, s] : scores) {
        if (idx < 0) throw InvariantError("ranking key must be a valid capsule index");
        if (!(s >= 0.0f)) throw InvariantError("ranking scores must be non-negative");
    }
}

PruneRanking make_ranking(const std::vector<int>& survivors) {
    PruneRanking r;
    r.n_remaining = static_cast<int>(survivors.size());
    for (int idx : survivors) r.scores.emplace(idx, 0.0f);
    r.validate();
    return r;
}

std::vector<float> taylor_score_batch(const Tensor& pc_activations, const Tensor& pc_grads) {
    if (pc_activations.rank() != 3)
        throw DimensionError("taylor_score_batch: activations must be [N,n,d]");
    if (!same_shape(pc_activations, pc_grads))
        throw DimensionError("taylor_score_batch: activation/gradient shape mismatch");
    const int n = pc_activations.shape[0];
    const int caps = pc_activations.shape[1];
    const int d = pc_activations.shape[2];

    std::vector<float> scores(caps, 0.0f);
    for (int i = 0; i < caps; ++i) {
        double acc = 0.0;
        for (int b = 0; b < n; ++b) {
            const size_t off = (static_cast<size_t>(b) * caps + i) * d;
            double dot = 0.0;
            for (int q = 0; q < d; ++q)
                dot += static_cast<double>(pc_activations.data[off + q]) *
                       static_cast<double>(pc_grads.data[off + q]);
            acc += std::fabs(dot);
        }
        scores[i] = static_cast<float>(acc / n);
    }
    return scores;
}

float min_weight_score(const Tensor& transform_bank, int row) {
    if (transform_bank.rank() != 4)
        throw DimensionError("min_weight_score: bank must be [n,K,dOut,dIn]");
    if (row < 0 || row >= transform_bank.shape[0])
        throw ArgumentError("min_weight_score: row " + std::to_string(row) + " out of range");
    const size_t per = transform_bank.size() / transform_bank.shape[0];
    const float* p = transform_bank.data.data() + per * row;
    double acc = 0.0;
    for (size_t i = 0; i < per; ++i) acc += static_cast<double>(p[i]) * p[i];
    return static_cast<float>(std::sqrt(acc));
}

std::vector<float> activation_score_batch(const Tensor& pc_activations) {
    if (pc_activations.rank() != 3)
        throw DimensionError("activation_score_batch: activations must be [N,n,d]");
    const int n = pc_activations.shape[0];
    const int caps = pc_activations.shape[1];
    const int d = pc_activations.shape[2];

    std::vector<float> scores(caps, 0.0f);
    for (int i = 0; i < caps; ++i) {
        double acc = 0.0;
        for (int b = 0; b < n; ++b) {
            const size_t off = (static_cast<size_t>(b) * caps + i) * d;
            for (int q = 0; q < d; ++q) acc += std::fabs(pc_activations.data[off + q]);
        }
        scores[i] = static_cast<float>(acc / (static_cast<double>(n) * d));
    }
    return scores;
}

void accumulate(PruneRanking& ranking, const std::vector<int>& survivors,
                const std::vector<float>& batch_scores) {
    if (survivors.size() != batch_scores.size() ||
        static_cast<int>(survivors.size()) != ranking.n_remaining)
        throw InvariantError("accumulate: batch scores are not keyed like the ranking");
    for (size_t i = 0; i < survivors.size(); ++i) {
        auto it = ranking.scores.find(survivors[i]);
        if (it == ranking.scores.end())
            throw InvariantError("accumulate: capsule " + std::to_string(survivors[i]) +
                                 " missing from ranking");
        if (!(batch_scores[i] >= 0.0f))
            throw InvariantError("accumulate: scores must be non-negative");
        it->second += batch_scores[i];
    }
    ++ranking.batches_seen;
}

std::map<int, float> normalize(const PruneRanking& ranking) {
    ranking.validate();
    if (ranking.batches_seen < 1)
        throw InvariantError("normalize: no batches accumulated");
    const float div = static_cast<float>(ranking.n_remaining) *
                      static_cast<float>(ranking.batches_seen);
    std::map<int, float> out;
    for (const auto& [idx, s] : ranking.scores) out.emplace(idx, s / div);
    return out;
}

std::vector<int> select_prune_targets(const std::map<int, float>& values, int k) {
    if (k < 0) throw ArgumentError("select_prune_targets: k must be non-negative");
    if (k >= static_cast<int>(values.size()))
        throw ArgumentError("select_prune_targets: k must leave at least one survivor");
    if (k == 0) return {};

    std::vector<std::pair<float, int>> order;
    order.reserve(values.size());
    for (const auto& [idx, s] : values) order.emplace_back(s, idx);
    std::sort(order.begin(), order.end());  // score, then original index

    std::vector<int> targets(k);
    for (int i = 0; i < k; ++i) targets[i] = order[i].second;
    std::sort(targets.begin(), targets.end());
    return targets;
}

void apply_prune(CapsNetModel& model, const std::vector<int>& targets) {
    if (targets.empty()) return;
    for (size_t i = 1; i < targets.size(); ++i)
        if (targets[i] <= targets[i - 1])
            throw ArgumentError("apply_prune: targets must be strictly increasing");
    for (int t : targets)
        if (!std::binary_search(model.survivors.begin(), model.survivors.end(), t))
            throw ArgumentError("apply_prune: capsule " + std::to_string(t) +
                                " is not surviving");

    const auto& bank = *model.transform_bank;
    const size_t per = bank.size() / bank.shape[0];
    const int kept = model.n_surviving() - static_cast<int>(targets.size());

    auto new_bank = Tensor::make(
        {kept, bank.shape[1], bank.shape[2], bank.shape[3]});
    new_bank->requires_grad = bank.requires_grad;
    std::vector<int> new_survivors;
    new_survivors.reserve(kept);

    size_t out_row = 0;
    for (int row = 0; row < model.n_surviving(); ++row) {
        const int original = model.survivors[row];
        if (std::binary_search(targets.begin(), targets.end(), original)) continue;
        std::copy_n(bank.data.begin() + per * row, per,
                    new_bank->data.begin() + per * out_row);
        new_survivors.push_back(original);
        ++out_row;
    }

    model.transform_bank = new_bank;
    model.survivors = std::move(new_survivors);
    model.validate();
}

void PruneSchedule::validate() const {
    if (phases.empty()) throw ArgumentError("schedule must have at least one phase");
    int prev_floor = -1;
    for (size_t i = 0; i < phases.size(); ++i) {
        if (phases[i].step_size < 1)
            throw ArgumentError("schedule step sizes must be positive");
        if (phases[i].floor < 1)
            throw ArgumentError("schedule floors must keep at least one capsule");
        if (i > 0 && phases[i].floor >= prev_floor)
            throw ArgumentError("schedule floors must be decreasing");
        prev_floor = phases[i].floor;
    }
    if (finetune_epochs < 0) throw ArgumentError("finetune_epochs must be non-negative");
    if (warmup_epochs < 1) throw ArgumentError("warmup_epochs must be at least 1");
}

PruneSchedule default_schedule() {
    PruneSchedule s;
    s.phases = {{100, 52}, {10, 2}};
    s.finetune_epochs = 50;
    s.warmup_epochs = 1;
    return s;
}

PruneSchedule parse_schedule(const std::string& text, int finetune_epochs, int warmup_epochs) {
    PruneSchedule s;
    s.finetune_epochs = finetune_epochs;
    s.warmup_epochs = warmup_epochs;

    size_t pos = 0;
    while (pos < text.size()) {
        size_t comma = text.find(',', pos);
        if (comma == std::string::npos) comma = text.size();
        const std::string part = text.substr(pos, comma - pos);
        const size_t colon = part.find(':');
        if (colon == std::string::npos)
            throw ParseError("schedule phase '" + part + "' is not step:floor");
        try {
            PrunePhase phase;
            phase.step_size = std::stoi(part.substr(0, colon));
            phase.floor = std::stoi(part.substr(colon + 1));
            s.phases.push_back(phase);
        } catch (const std::logic_error&) {
            throw ParseError("schedule phase '" + part + "' has non-numeric fields");
        }
        pos = comma + 1;
    }
    s.validate();
    return s;
}

std::string schedule_str(const PruneSchedule& s) {
    std::string out;
    for (size_t i = 0; i < s.phases.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s.phases[i].step_size) + ":" + std::to_string(s.phases[i].floor);
    }
    return out;
}

PruneRanking score_epoch(CapsNetModel& model, const DatasetSplit& data, PruneCriterion criterion,
                         const ScoreOptions& opts) {
    model.validate();
    if (data.size() == 0) throw ArgumentError("score_epoch: empty dataset");
    if (opts.batch_size < 1) throw ArgumentError("score_epoch: batch_size must be positive");

    PruneRanking ranking = make_ranking(model.survivors);

    if (criterion == PruneCriterion::min_weight) {
        std::vector<float> scores(model.n_surviving());
        for (int row = 0; row < model.n_surviving(); ++row)
            scores[row] = min_weight_score(*model.transform_bank, row);
        accumulate(ranking, model.survivors, scores);
        return ranking;
    }

    auto params = model.parameters();
    Adam opt(params, opts.adam);
    const int n = data.size();
    std::vector<int> idx(opts.batch_size);

    for (int start = 0; start < n; start += opts.batch_size) {
        const int count = std::min(opts.batch_size, n - start);
        for (int i = 0; i < count; ++i) idx[i] = start + i;
        auto [images, labels] = make_batch(data, idx.data(), count);

        if (criterion == PruneCriterion::activation) {
            auto acts = primary_capsules(nullptr, model, images);
            accumulate(ranking, model.survivors, activation_score_batch(*acts));
            continue;
        }

        Tape tape;
        auto res = forward(&tape, model, images, &labels, true);
        opt.zero_grad();
        tape.backward(opts.margin_only ? res.margin : res.loss);

        const auto& acts = *res.pc_activations;
        Tensor grads(acts.shape,
                     acts.grad.empty() ? std::vector<float>(acts.data.size(), 0.0f)
                                       : acts.grad);
        accumulate(ranking, model.survivors, taylor_score_batch(acts, grads));
        if (opts.update_weights) opt.step();
    }
    return ranking;
}

float fine_tune(CapsNetModel& model, const DatasetSplit& train, const DatasetSplit& test,
                int epochs, const TrainOptions& base) {
    if (epochs < 0) throw ArgumentError("fine_tune: epochs must be non-negative");
    if (epochs == 0) return evaluate(model, test, base.batch_size);
    TrainOptions opts = base;
    opts.epochs = epochs;
    opts.restore_best = true;
    return train_epochs(model, train, test, opts).best_test_accuracy;
}

std::vector<PruneEvent> prune_loop(CapsNetModel& model, const DatasetSplit& train,
                                   const DatasetSplit& test, const PruneLoopOptions& opts) {
    opts.schedule.validate();
    model.validate();
    if (train.size() == 0 || test.size() == 0) throw ArgumentError("prune_loop: empty dataset");

    const auto& cfg = model.config;
    auto record_for = [&cfg](int remaining, float accuracy, double seconds) {
        PruneEvent e;
        e.n_remaining = remaining;
        e.best_accuracy = accuracy;
        e.flops_pc = flops_pc_transform(remaining, cfg.pc_dim, cfg.out_caps_dim);
        e.flops_routing =
            flops_routing(remaining, cfg.num_classes, cfg.out_caps_dim, cfg.routing_iters);
        e.wall_time_s = seconds;
        return e;
    };

    std::vector<PruneEvent> records;
    records.push_back(record_for(model.n_surviving(),
                                 evaluate(model, test, opts.finetune.batch_size), 0.0));
    if (opts.log)
        *opts.log << "baseline " << records.back().n_remaining << " pcs, accuracy "
                  << records.back().best_accuracy << "\n";

    for (const auto& phase : opts.schedule.phases) {
        while (model.n_surviving() - phase.step_size >= phase.floor) {
            const auto t0 = std::chrono::steady_clock::now();

            PruneRanking ranking = make_ranking(model.survivors);
            for (int w = 0; w < opts.schedule.warmup_epochs; ++w) {
                PruneRanking epoch = score_epoch(model, train, opts.criterion, opts.scoring);
                for (const auto& [idx, s] : epoch.scores) ranking.scores.at(idx) += s;
                ranking.batches_seen += epoch.batches_seen;
            }

            auto targets = select_prune_targets(normalize(ranking), phase.step_size);
            apply_prune(model, targets);
            const float best =
                fine_tune(model, train, test, opts.schedule.finetune_epochs, opts.finetune);

            const double seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            records.push_back(record_for(model.n_surviving(), best, seconds));
            if (opts.log)
                *opts.log << "pruned to " << model.n_surviving() << " pcs, best accuracy "
                          << best << " (" << seconds << "s)\n";
            if (opts.on_event) opts.on_event(model, records.back());
        }
    }
    return records;
}

}  // namespace capsprune
