#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include "capsprune/capsnet.hpp"
#include "capsprune/data.hpp"
#include "capsprune/kernels.hpp"
#include "capsprune/ops.hpp"
#include "capsprune/rng.hpp"
#include "capsprune/tape.hpp"

namespace testsupport {

using namespace capsprune;

inline TensorPtr random_tensor(std::vector<int> shape, Rng& rng, float bound = 1.0f,
                               bool requires_grad = true) {
    auto t = Tensor::make(std::move(shape));
    t->requires_grad = requires_grad;
    fill_uniform(*t, rng, bound);
    return t;
}

// Scalar sink: loss = sum_i w[i] * x[i], so every output element receives a
// distinct upstream gradient.
inline TensorPtr weighted_sum(Tape* tape, const TensorPtr& x, const std::vector<float>& w) {
    double acc = 0.0;
    for (size_t i = 0; i < x->data.size(); ++i)
        acc += static_cast<double>(x->data[i]) * w[i];
    auto out = Tensor::scalar(static_cast<float>(acc));
    auto wp = std::make_shared<std::vector<float>>(w);
    if (should_record(tape, {&x})) {
        tape->record({x}, out, [x, out, wp] {
            if (!x->requires_grad) return;
            x->ensure_grad();
            const float g = out->grad[0];
            for (size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += g * (*wp)[i];
        });
    }
    return out;
}

// Maps double copies of the inputs (same order) to the op's flat output.
using DoubleForward =
    std::function<std::vector<double>(const std::vector<std::vector<double>>&)>;

// Runs the float op under the tape, then compares analytic input gradients
// against central finite differences of a double-precision replay of the same
// arithmetic. Returns the worst per-tensor relative error.
inline double gradcheck(const std::vector<TensorPtr>& inputs,
                        const std::function<TensorPtr(Tape*)>& forward_float,
                        const DoubleForward& forward_double, Rng& rng, double h = 1e-5) {
    Tape tape;
    auto out = forward_float(&tape);
    std::vector<float> w(out->data.size());
    for (auto& v : w) v = rng.uniform_f(-1.0f, 1.0f);
    auto loss = weighted_sum(&tape, out, w);
    for (const auto& t : inputs) t->zero_grad();  // inputs may be reused across checks
    tape.backward(loss);

    std::vector<std::vector<double>> xs;
    for (const auto& t : inputs) xs.emplace_back(t->data.begin(), t->data.end());

    auto eval = [&] {
        const auto y = forward_double(xs);
        double acc = 0.0;
        for (size_t i = 0; i < y.size(); ++i) acc += y[i] * w[i];
        return acc;
    };

    double worst = 0.0;
    for (size_t t = 0; t < inputs.size(); ++t) {
        double max_diff = 0.0, max_fd = 0.0;
        for (size_t j = 0; j < xs[t].size(); ++j) {
            const double orig = xs[t][j];
            xs[t][j] = orig + h;
            const double lp = eval();
            xs[t][j] = orig - h;
            const double lm = eval();
            xs[t][j] = orig;
            const double fd = (lp - lm) / (2.0 * h);
            const double an = inputs[t]->grad.empty()
                                  ? 0.0
                                  : static_cast<double>(inputs[t]->grad[j]);
            max_diff = std::max(max_diff, std::fabs(an - fd));
            max_fd = std::max(max_fd, std::fabs(fd));
        }
        worst = std::max(worst, max_diff / std::max(max_fd, 1e-6));
    }
    return worst;
}

// Independent convolution oracle: direct index arithmetic, double accumulation.
inline std::vector<double> conv_oracle(const std::vector<float>& in,
                                       const std::vector<float>& ker, int N, int C, int H,
                                       int W, int F, int kh, int kw, int stride) {
    const int OH = (H - kh) / stride + 1;
    const int OW = (W - kw) / stride + 1;
    std::vector<double> out(static_cast<size_t>(N) * F * OH * OW, 0.0);
    for (int n = 0; n < N; ++n)
        for (int f = 0; f < F; ++f)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow) {
                    double acc = 0.0;
                    for (int c = 0; c < C; ++c)
                        for (int i = 0; i < kh; ++i)
                            for (int j = 0; j < kw; ++j) {
                                const size_t ii =
                                    ((static_cast<size_t>(n) * C + c) * H + oh * stride + i) *
                                        W +
                                    ow * stride + j;
                                const size_t ki =
                                    ((static_cast<size_t>(f) * C + c) * kh + i) * kw + j;
                                acc += static_cast<double>(in[ii]) * ker[ki];
                            }
                    out[((static_cast<size_t>(n) * F + f) * OH + oh) * OW + ow] = acc;
                }
    return out;
}

// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<float>& a, const std::vector<float>& b) {
    auto ranks = [](const std::vector<float>& x) {
        const size_t n = x.size();
        std::vector<size_t> idx(n);
        std::iota(idx.begin(), idx.end(), size_t{0});
        std::sort(idx.begin(), idx.end(), [&x](size_t i, size_t j) { return x[i] < x[j]; });
        std::vector<double> r(n);
        size_t i = 0;
        while (i < n) {
            size_t j = i;
            while (j + 1 < n && x[idx[j + 1]] == x[idx[i]]) ++j;
            const double avg = (static_cast<double>(i) + j) / 2.0 + 1.0;
            for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto ra = ranks(a), rb = ranks(b);
    const size_t n = ra.size();
    double ma = 0, mb = 0;
    for (size_t i = 0; i < n; ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double num = 0, da = 0, db = 0;
    for (size_t i = 0; i < n; ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    return num / std::sqrt(da * db);
}

struct MaskedForward {
    TensorPtr logits;
    float margin = 0.0f;
};

// Dense forward with post-squash activations of the masked-out capsules set to
// zero. `keep[i]` refers to the model's i-th surviving capsule.
inline MaskedForward masked_forward(const CapsNetModel& model, const TensorPtr& images,
                                    const std::vector<int>* labels,
                                    const std::vector<char>& keep) {
    auto acts = primary_capsules(nullptr, model, images);
    const int n = acts->shape[0], caps = acts->shape[1], d = acts->shape[2];
    for (int b = 0; b < n; ++b)
        for (int i = 0; i < caps; ++i)
            if (!keep[i])
                for (int q = 0; q < d; ++q)
                    acts->data[(static_cast<size_t>(b) * caps + i) * d + q] = 0.0f;

    auto uhat = matvec_bank(nullptr, model.transform_bank, acts);
    auto routing = dynamic_routing(nullptr, uhat, model.config.routing_iters);

    MaskedForward out;
    const auto& v = routing.output_caps;
    out.logits = Tensor::make({n, model.config.num_classes});
    kernels::row_norms(v->data.data(), out.logits->data.data(),
                       static_cast<size_t>(n) * model.config.num_classes,
                       model.config.out_caps_dim, 1e-9f);
    if (labels) {
        auto onehot = one_hot(*labels, model.config.num_classes);
        out.margin = margin_loss(nullptr, v, onehot, model.config)->data[0];
    }
    return out;
}

// Multinomial logistic regression on raw pixels, plain gradient descent.
// Returns test accuracy; the capsule model should beat this comfortably.
inline double linear_baseline(const DatasetSplit& train, const DatasetSplit& test, int epochs,
                              double lr) {
    const int n = train.size();
    const int p = static_cast<int>(train.images->size() / n);
    const int k = train.num_classes;
    std::vector<double> w(static_cast<size_t>(k) * p, 0.0), b(k, 0.0);

    std::vector<double> logits(k), probs(k), gw(w.size()), gb(k);
    for (int e = 0; e < epochs; ++e) {
        std::fill(gw.begin(), gw.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (int s = 0; s < n; ++s) {
            const float* x = train.images->data.data() + static_cast<size_t>(s) * p;
            double mx = -1e300;
            for (int c = 0; c < k; ++c) {
                double acc = b[c];
                const double* row = w.data() + static_cast<size_t>(c) * p;
                for (int i = 0; i < p; ++i) acc += row[i] * x[i];
                logits[c] = acc;
                mx = std::max(mx, acc);
            }
            double sum = 0.0;
            for (int c = 0; c < k; ++c) {
                probs[c] = std::exp(logits[c] - mx);
                sum += probs[c];
            }
            for (int c = 0; c < k; ++c) {
                const double err = probs[c] / sum - (c == train.labels[s] ? 1.0 : 0.0);
                gb[c] += err;
                double* row = gw.data() + static_cast<size_t>(c) * p;
                for (int i = 0; i < p; ++i) row[i] += err * x[i];
            }
        }
        for (size_t i = 0; i < w.size(); ++i) w[i] -= lr * gw[i] / n;
        for (int c = 0; c < k; ++c) b[c] -= lr * gb[c] / n;
    }

    int correct = 0;
    for (int s = 0; s < test.size(); ++s) {
        const float* x = test.images->data.data() + static_cast<size_t>(s) * p;
        int best = 0;
        double best_v = -1e300;
        for (int c = 0; c < k; ++c) {
            double acc = b[c];
            const double* row = w.data() + static_cast<size_t>(c) * p;
            for (int i = 0; i < p; ++i) acc += row[i] * x[i];
            if (acc > best_v) {
                best_v = acc;
                best = c;
            }
        }
        if (best == test.labels[s]) ++correct;
    }
    return static_cast<double>(correct) / test.size();
}

}  // namespace testsupport
