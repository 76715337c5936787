#include "capsprune/train.hpp"

#include <chrono>
#include <cmath>

#include "capsprune/error.hpp"
#include "capsprune/tape.hpp"

namespace capsprune {

Adam::Adam(std::vector<TensorPtr> params, AdamOptions opts)
    : params_(std::move(params)), opts_(opts) {
    if (opts_.lr <= 0.0f) throw ArgumentError("Adam: lr must be positive");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(p->size(), 0.0f);
        v_.emplace_back(p->size(), 0.0f);
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p->zero_grad();
}

void Adam::step() {
    ++t_;
    const float b1 = opts_.beta1, b2 = opts_.beta2;
    const float c1 = 1.0f - std::pow(b1, static_cast<float>(t_));
    const float c2 = 1.0f - std::pow(b2, static_cast<float>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& p = *params_[i];
        if (p.grad.empty()) continue;
        auto& m = m_[i];
        auto& v = v_[i];
        for (size_t j = 0; j < p.data.size(); ++j) {
            const float g = p.grad[j];
            m[j] = b1 * m[j] + (1.0f - b1) * g;
            v[j] = b2 * v[j] + (1.0f - b2) * g * g;
            const float mh = m[j] / c1;
            const float vh = v[j] / c2;
            p.data[j] -= opts_.lr * mh / (std::sqrt(vh) + opts_.eps);
        }
    }
}

float evaluate(const CapsNetModel& model, const DatasetSplit& split, int batch_size) {
    if (batch_size < 1) throw ArgumentError("evaluate: batch_size must be positive");
    const int n = split.size();
    if (n == 0) throw ArgumentError("evaluate: empty split");

    int correct = 0;
    std::vector<int> idx(batch_size);
    for (int start = 0; start < n; start += batch_size) {
        const int count = std::min(batch_size, n - start);
        for (int i = 0; i < count; ++i) idx[i] = start + i;
        auto [images, labels] = make_batch(split, idx.data(), count);
        auto res = forward(nullptr, model, images, nullptr, false);
        for (int i = 0; i < count; ++i)
            if (res.predicted[i] == labels[i]) ++correct;
    }
    return static_cast<float>(correct) / static_cast<float>(n);
}

TrainResult train_epochs(CapsNetModel& model, const DatasetSplit& train,
                         const DatasetSplit& test, const TrainOptions& opts) {
    if (opts.epochs < 0) throw ArgumentError("train_epochs: epochs must be non-negative");
    if (opts.batch_size < 1) throw ArgumentError("train_epochs: batch_size must be positive");
    model.validate();
    train.validate();
    test.validate();

    auto params = model.parameters();
    Adam opt(params, opts.adam);
    Rng shuffle_rng(opts.seed);

    TrainResult result;
    std::vector<TensorPtr> best_params;
    const int n = train.size();
    std::vector<int> order(n);

    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        for (int i = 0; i < n; ++i) order[i] = i;
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        int correct = 0;
        for (int start = 0; start < n; start += opts.batch_size) {
            const int count = std::min(opts.batch_size, n - start);
            auto [images, labels] = make_batch(train, order.data() + start, count);
            Tape tape;
            auto res = forward(&tape, model, images, &labels, true);
            opt.zero_grad();
            tape.backward(res.loss);
            opt.step();
            loss_sum += static_cast<double>(res.loss->data[0]) * count;
            for (int i = 0; i < count; ++i)
                if (res.predicted[i] == labels[i]) ++correct;
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = static_cast<float>(loss_sum / n);
        stats.train_accuracy = static_cast<float>(correct) / static_cast<float>(n);
        stats.test_accuracy = evaluate(model, test, opts.batch_size);
        stats.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back(stats);

        if (stats.test_accuracy > result.best_test_accuracy || result.best_epoch < 0) {
            result.best_test_accuracy = stats.test_accuracy;
            result.best_epoch = epoch;
            if (opts.restore_best) {
                best_params.clear();
                for (const auto& p : params) best_params.push_back(p->clone());
            }
        }
        if (opts.log)
            *opts.log << "epoch " << epoch << " loss " << stats.train_loss << " train_acc "
                      << stats.train_accuracy << " test_acc " << stats.test_accuracy << "\n";
    }

    if (opts.restore_best && !best_params.empty()) {
        for (size_t i = 0; i < params.size(); ++i) params[i]->data = best_params[i]->data;
    }
    if (result.best_epoch < 0) result.best_test_accuracy = evaluate(model, test, opts.batch_size);
    return result;
}

}  // namespace capsprune
