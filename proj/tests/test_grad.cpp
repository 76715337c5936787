#include <doctest.h>

#include <cmath>
#include <vector>

#include "capsprune/capsnet.hpp"
#include "capsprune/kernels.hpp"
#include "capsprune/ops.hpp"

#include "support/helpers.hpp"

using namespace capsprune;
using namespace testsupport;

namespace {

constexpr double kEps = static_cast<double>(1e-9f);
constexpr double kTolOp = 2e-4;
constexpr double kTolModel = 2e-3;

std::vector<double> to_d(const std::vector<float>& v) {
    return std::vector<double>(v.begin(), v.end());
}

}  // namespace

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(101);
    auto in = random_tensor({1, 2, 5, 5}, rng);
    auto ker = random_tensor({3, 2, 2, 2}, rng);
    for (int stride : {1, 2}) {
        const int OH = (5 - 2) / stride + 1;
        auto err = gradcheck(
            {in, ker}, [&](Tape* t) { return conv2d(t, in, ker, stride); },
            [&, OH](const std::vector<std::vector<double>>& xs) {
                std::vector<double> out(static_cast<size_t>(3) * OH * OH);
                kernels::conv2d(xs[0].data(), xs[1].data(), out.data(), 1, 2, 5, 5, 3, 2, 2,
                                stride);
                return out;
            },
            rng);
        CHECK(err < kTolOp);
    }
}

TEST_CASE("bias_channel gradients match finite differences") {
    Rng rng(102);
    auto x = random_tensor({2, 3, 4}, rng);
    auto b = random_tensor({3}, rng);
    auto err = gradcheck(
        {x, b}, [&](Tape* t) { return bias_channel(t, x, b); },
        [&](const std::vector<std::vector<double>>& xs) {
            std::vector<double> out(xs[0].size());
            kernels::bias_channel(xs[0].data(), xs[1].data(), out.data(), 2, 3, 4);
            return out;
        },
        rng);
    CHECK(err < kTolOp);
}

TEST_CASE("relu gradients match finite differences away from the kink") {
    Rng rng(103);
    auto x = random_tensor({3, 5}, rng);
    for (auto& v : x->data)
        if (std::fabs(v) < 1e-3f) v = 0.1f;
    auto err = gradcheck(
        {x}, [&](Tape* t) { return relu(t, x); },
        [](const std::vector<std::vector<double>>& xs) {
            std::vector<double> out(xs[0].size());
            kernels::relu(xs[0].data(), out.data(), static_cast<int64_t>(xs[0].size()));
            return out;
        },
        rng);
    CHECK(err < kTolOp);
}

TEST_CASE("softmax gradients match finite differences on every axis") {
    Rng rng(104);
    auto x = random_tensor({2, 3, 2}, rng, 2.0f);
    const int64_t dims[3] = {2, 3, 2};
    for (int axis = 0; axis < 3; ++axis) {
        int64_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= dims[i];
        for (int i = axis + 1; i < 3; ++i) inner *= dims[i];
        const int64_t axis_n = dims[axis];
        auto err = gradcheck(
            {x}, [&](Tape* t) { return softmax(t, x, axis); },
            [outer, axis_n, inner](const std::vector<std::vector<double>>& xs) {
                std::vector<double> out(xs[0].size());
                kernels::softmax(xs[0].data(), out.data(), outer, axis_n, inner);
                return out;
            },
            rng);
        CHECK(err < kTolOp);
    }
}

TEST_CASE("matvec_bank gradients match finite differences") {
    Rng rng(105);
    auto w = random_tensor({2, 3, 4, 2}, rng);

    SUBCASE("batched vectors") {
        auto v = random_tensor({2, 2, 2}, rng);
        auto err = gradcheck(
            {w, v}, [&](Tape* t) { return matvec_bank(t, w, v); },
            [](const std::vector<std::vector<double>>& xs) {
                std::vector<double> out(2 * 2 * 3 * 4);
                kernels::matvec_bank(xs[0].data(), xs[1].data(), out.data(), 2, 2, 3, 4, 2);
                return out;
            },
            rng);
        CHECK(err < kTolOp);
    }

    SUBCASE("single vector set") {
        auto v = random_tensor({2, 2}, rng);
        auto err = gradcheck(
            {w, v}, [&](Tape* t) { return matvec_bank(t, w, v); },
            [](const std::vector<std::vector<double>>& xs) {
                std::vector<double> out(2 * 3 * 4);
                kernels::matvec_bank(xs[0].data(), xs[1].data(), out.data(), 1, 2, 3, 4, 2);
                return out;
            },
            rng);
        CHECK(err < kTolOp);
    }
}

TEST_CASE("capsule_reshape gradients match finite differences") {
    Rng rng(106);
    auto x = random_tensor({2, 4, 3, 3}, rng);
    auto err = gradcheck(
        {x}, [&](Tape* t) { return capsule_reshape(t, x, 2, 2); },
        [](const std::vector<std::vector<double>>& xs) {
            std::vector<double> out(xs[0].size());
            kernels::capsule_reshape(xs[0].data(), out.data(), 2, 2, 2, 3);
            return out;
        },
        rng);
    CHECK(err < kTolOp);
}

TEST_CASE("gather_rows accumulates gradients through duplicate indices") {
    Rng rng(107);
    auto x = random_tensor({2, 4, 3}, rng);
    const std::vector<int> idx{1, 1, 3};
    auto err = gradcheck(
        {x}, [&](Tape* t) { return gather_rows(t, x, idx); },
        [&idx](const std::vector<std::vector<double>>& xs) {
            std::vector<double> out(static_cast<size_t>(2) * idx.size() * 3);
            kernels::gather_rows(xs[0].data(), out.data(), 2, 4, 3, idx.data(),
                                 static_cast<int>(idx.size()));
            return out;
        },
        rng);
    CHECK(err < kTolOp);
}

TEST_CASE("pc_conv_gather gradients match finite differences") {
    Rng rng(108);
    const int types = 2, d = 2, g = 3;
    auto features = random_tensor({1, 2, 7, 7}, rng);
    auto kernel = random_tensor({types * d, 2, 3, 3}, rng);
    auto bias = random_tensor({types * d}, rng);
    const std::vector<int> surv{0, 5, 17};
    auto err = gradcheck(
        {features, kernel, bias},
        [&](Tape* t) { return pc_conv_gather(t, features, kernel, bias, 2, surv, types, d); },
        [&surv](const std::vector<std::vector<double>>& xs) {
            std::vector<double> out(static_cast<size_t>(surv.size()) * 2);
            kernels::pc_conv_gather(xs[0].data(), xs[1].data(), xs[2].data(), out.data(), 1, 2,
                                    7, 7, types, d, 3, 3, 2, surv.data(),
                                    static_cast<int>(surv.size()), g);
            return out;
        },
        rng);
    CHECK(err < kTolOp);
}

TEST_CASE("linear gradients match finite differences") {
    Rng rng(109);
    auto x = random_tensor({2, 3}, rng);
    auto w = random_tensor({4, 3}, rng);
    auto b = random_tensor({4}, rng);
    auto err = gradcheck(
        {x, w, b}, [&](Tape* t) { return linear(t, x, w, b); },
        [](const std::vector<std::vector<double>>& xs) {
            std::vector<double> out(2 * 4);
            kernels::linear(xs[0].data(), xs[1].data(), xs[2].data(), out.data(), 2, 3, 4);
            return out;
        },
        rng);
    CHECK(err < kTolOp);
}

TEST_CASE("sigmoid gradients match finite differences") {
    Rng rng(110);
    auto x = random_tensor({3, 4}, rng, 3.0f);
    auto err = gradcheck(
        {x}, [&](Tape* t) { return sigmoid(t, x); },
        [](const std::vector<std::vector<double>>& xs) {
            std::vector<double> out(xs[0].size());
            kernels::sigmoid(xs[0].data(), out.data(), static_cast<int64_t>(xs[0].size()));
            return out;
        },
        rng);
    CHECK(err < kTolOp);
}

TEST_CASE("mask_flatten gradients match finite differences") {
    Rng rng(111);
    auto v = random_tensor({2, 3, 2}, rng);
    const std::vector<int> cls{2, 0};
    auto err = gradcheck(
        {v}, [&](Tape* t) { return mask_flatten(t, v, cls); },
        [&cls](const std::vector<std::vector<double>>& xs) {
            std::vector<double> out(2 * 3 * 2);
            kernels::mask_flatten(xs[0].data(), cls.data(), out.data(), 2, 3, 2);
            return out;
        },
        rng);
    CHECK(err < kTolOp);
}

TEST_CASE("reshape, add and scale gradients match finite differences") {
    Rng rng(112);
    auto a = random_tensor({2, 3}, rng);
    auto b = random_tensor({2, 3}, rng);
    auto err = gradcheck(
        {a, b},
        [&](Tape* t) { return scale(t, add(t, reshape(t, a, {3, 2}), reshape(t, b, {3, 2})), 0.7f); },
        [](const std::vector<std::vector<double>>& xs) {
            std::vector<double> out(xs[0].size());
            for (size_t i = 0; i < out.size(); ++i)
                out[i] = (xs[0][i] + xs[1][i]) * static_cast<double>(0.7f);
            return out;
        },
        rng);
    CHECK(err < kTolOp);
}

TEST_CASE("squash gradients match finite differences") {
    Rng rng(113);
    auto s = random_tensor({3, 4}, rng);
    auto err = gradcheck(
        {s}, [&](Tape* t) { return squash(t, s); },
        [](const std::vector<std::vector<double>>& xs) {
            std::vector<double> out(xs[0].size());
            kernels::squash(xs[0].data(), out.data(), 3, 4, kEps);
            return out;
        },
        rng);
    CHECK(err < kTolOp);
}

TEST_CASE("routing final iteration gradients match finite differences at fixed couplings") {
    Rng rng(114);
    const int N = 2, I = 3, K = 2, d = 4;
    auto uhat = random_tensor({N, I, K, d}, rng);
    auto logits = random_tensor({N, I, K}, rng, 1.5f, false);
    auto couplings = softmax(nullptr, logits, 2);
    const auto c_d = to_d(couplings->data);
    auto err = gradcheck(
        {uhat},
        [&](Tape* t) { return squash(t, routing_weighted_sum(t, uhat, couplings)); },
        [&c_d](const std::vector<std::vector<double>>& xs) {
            std::vector<double> s(static_cast<size_t>(N) * K * d);
            kernels::routing_weighted_sum(xs[0].data(), c_d.data(), s.data(), N, I, K, d);
            std::vector<double> v(s.size());
            kernels::squash(s.data(), v.data(), static_cast<int64_t>(N) * K, d, kEps);
            return v;
        },
        rng);
    CHECK(err < kTolOp);
}

TEST_CASE("multi-iteration routing backward uses the final couplings as constants") {
    Rng rng(115);
    const int N = 1, I = 4, K = 3, d = 2;
    auto uhat = random_tensor({N, I, K, d}, rng);

    // Reference couplings from an untaped run; identical inputs give identical
    // couplings inside gradcheck's taped run.
    auto ref = dynamic_routing(nullptr, uhat, 3);
    const auto c_d = to_d(ref.couplings->data);

    auto err = gradcheck(
        {uhat}, [&](Tape* t) { return dynamic_routing(t, uhat, 3).output_caps; },
        [&c_d](const std::vector<std::vector<double>>& xs) {
            std::vector<double> s(static_cast<size_t>(N) * K * d);
            kernels::routing_weighted_sum(xs[0].data(), c_d.data(), s.data(), N, I, K, d);
            std::vector<double> v(s.size());
            kernels::squash(s.data(), v.data(), static_cast<int64_t>(N) * K, d, kEps);
            return v;
        },
        rng);
    CHECK(err < kTolOp);
}

TEST_CASE("margin loss gradients match finite differences") {
    Rng rng(116);
    CapsNetConfig cfg;
    const int N = 2, K = 3, d = 4;
    auto v = random_tensor({N, K, d}, rng);
    auto onehot = one_hot({0, 2}, K);
    auto err = gradcheck(
        {v}, [&](Tape* t) { return margin_loss(t, v, onehot, cfg); },
        [&](const std::vector<std::vector<double>>& xs) {
            const auto oh = to_d(onehot->data);
            return std::vector<double>{kernels::margin_loss(
                xs[0].data(), oh.data(), N, K, d, static_cast<double>(cfg.m_plus),
                static_cast<double>(cfg.m_minus), static_cast<double>(cfg.lambda_down), kEps)};
        },
        rng);
    CHECK(err < kTolOp);
}

TEST_CASE("reconstruction loss gradients match finite differences") {
    Rng rng(117);
    auto decoded = random_tensor({2, 5}, rng);
    auto target = random_tensor({2, 5}, rng);
    auto err = gradcheck(
        {decoded, target}, [&](Tape* t) { return reconstruction_loss(t, decoded, target); },
        [](const std::vector<std::vector<double>>& xs) {
            return std::vector<double>{kernels::sse_mean(xs[0].data(), xs[1].data(), 2, 5)};
        },
        rng);
    CHECK(err < kTolOp);
}

namespace {

CapsNetConfig tiny_config() {
    CapsNetConfig cfg;
    cfg.image_size = 9;
    cfg.conv1_filters = 2;
    cfg.kernel = 3;
    cfg.conv2_capsule_types = 2;
    cfg.pc_dim = 2;
    cfg.out_caps_dim = 3;
    cfg.num_classes = 2;
    cfg.routing_iters = 1;
    cfg.decoder_hidden = {4};
    return cfg;
}

// Double-precision replay of the full training-mode forward pass; couplings at
// routing_iters = 1 are exactly uniform, so the replay is exact.
// xs layout: conv1_kernel, conv1_bias, pc_kernel, pc_bias, transform_bank,
// then decoder weight/bias pairs. `image_d` is the single input image.
std::vector<double> full_forward_double(const CapsNetConfig& cfg,
                                        const std::vector<int>& survivors,
                                        const std::vector<std::vector<double>>& xs,
                                        const std::vector<double>& image_d, int label) {
    const int g1 = cfg.grid1(), g2 = cfg.grid2();
    const int f1 = cfg.conv1_filters, f2 = cfg.pc_conv_filters();
    const int n_surv = static_cast<int>(survivors.size());
    const int K = cfg.num_classes, dv = cfg.out_caps_dim, dp = cfg.pc_dim;

    std::vector<double> c1(static_cast<size_t>(f1) * g1 * g1);
    kernels::conv2d(image_d.data(), xs[0].data(), c1.data(), 1, cfg.image_channels,
                    cfg.image_size, cfg.image_size, f1, cfg.kernel, cfg.kernel, 1);
    std::vector<double> c1b(c1.size());
    kernels::bias_channel(c1.data(), xs[1].data(), c1b.data(), 1, f1, g1 * g1);
    std::vector<double> r1(c1.size());
    kernels::relu(c1b.data(), r1.data(), static_cast<int64_t>(c1b.size()));

    std::vector<double> u(static_cast<size_t>(n_surv) * dp);
    kernels::pc_conv_gather(r1.data(), xs[2].data(), xs[3].data(), u.data(), 1, f1, g1, g1,
                            cfg.conv2_capsule_types, dp, cfg.kernel, cfg.kernel, 2,
                            survivors.data(), n_surv, g2);
    (void)f2;
    std::vector<double> acts(u.size());
    kernels::squash(u.data(), acts.data(), n_surv, dp, kEps);

    std::vector<double> uhat(static_cast<size_t>(n_surv) * K * dv);
    kernels::matvec_bank(xs[4].data(), acts.data(), uhat.data(), 1, n_surv, K, dv, dp);

    std::vector<double> couplings(static_cast<size_t>(n_surv) * K, 1.0 / K);
    std::vector<double> s(static_cast<size_t>(K) * dv);
    kernels::routing_weighted_sum(uhat.data(), couplings.data(), s.data(), 1, n_surv, K, dv);
    std::vector<double> v(s.size());
    kernels::squash(s.data(), v.data(), K, dv, kEps);

    std::vector<double> onehot(K, 0.0);
    onehot[label] = 1.0;
    double loss = kernels::margin_loss(v.data(), onehot.data(), 1, K, dv,
                                       static_cast<double>(cfg.m_plus),
                                       static_cast<double>(cfg.m_minus),
                                       static_cast<double>(cfg.lambda_down), kEps);

    if (cfg.recon_weight > 0.0f) {
        std::vector<double> x(static_cast<size_t>(K) * dv);
        kernels::mask_flatten(v.data(), &label, x.data(), 1, K, dv);
        int in = K * dv;
        std::vector<int> widths = cfg.decoder_hidden;
        widths.push_back(cfg.pixels());
        for (size_t i = 0; i < widths.size(); ++i) {
            std::vector<double> y(widths[i]);
            kernels::linear(x.data(), xs[5 + 2 * i].data(), xs[6 + 2 * i].data(), y.data(), 1,
                            in, widths[i]);
            if (i + 1 < widths.size())
                kernels::relu(y.data(), y.data(), static_cast<int64_t>(y.size()));
            else
                kernels::sigmoid(y.data(), y.data(), static_cast<int64_t>(y.size()));
            x = std::move(y);
            in = widths[i];
        }
        loss += static_cast<double>(cfg.recon_weight) *
                kernels::sse_mean(x.data(), image_d.data(), 1, cfg.pixels());
    }
    return {loss};
}

}  // namespace

TEST_CASE("full model parameter gradients match finite differences") {
    Rng rng(118);
    auto cfg = tiny_config();
    auto model = CapsNetModel::init(cfg, rng);
    auto images = random_tensor({1, 1, 9, 9}, rng, 1.0f, false);
    const std::vector<int> labels{1};
    const auto image_d = to_d(images->data);

    auto err = gradcheck(
        model.parameters(),
        [&](Tape* t) { return forward(t, model, images, &labels, true).loss; },
        [&](const std::vector<std::vector<double>>& xs) {
            return full_forward_double(cfg, model.survivors, xs, image_d, labels[0]);
        },
        rng);
    CHECK(err < kTolModel);
}

TEST_CASE("image gradients match finite differences with reconstruction disabled") {
    Rng rng(119);
    auto cfg = tiny_config();
    cfg.recon_weight = 0.0f;
    auto model = CapsNetModel::init(cfg, rng);
    auto images = random_tensor({1, 1, 9, 9}, rng);
    const std::vector<int> labels{0};

    std::vector<std::vector<double>> params_d;
    for (const auto& p : model.parameters()) params_d.push_back(to_d(p->data));

    auto err = gradcheck(
        {images}, [&](Tape* t) { return forward(t, model, images, &labels, true).loss; },
        [&](const std::vector<std::vector<double>>& xs) {
            std::vector<std::vector<double>> all = params_d;
            return full_forward_double(cfg, model.survivors, all, xs[0], labels[0]);
        },
        rng);
    CHECK(err < kTolModel);
}

TEST_CASE("pruned survivor sets stay differentiable end to end") {
    Rng rng(120);
    auto cfg = tiny_config();
    auto model = CapsNetModel::init(cfg, rng);

    // keep 5 of the 18 capsules
    model.survivors = {0, 3, 7, 11, 16};
    const int n_surv = 5;
    auto bank = Tensor::make(
        {n_surv, cfg.num_classes, cfg.out_caps_dim, cfg.pc_dim}, 0.0f, false);
    bank->requires_grad = true;
    fill_uniform(*bank, rng, 0.35f);
    model.transform_bank = bank;
    model.validate();

    auto images = random_tensor({1, 1, 9, 9}, rng, 1.0f, false);
    const std::vector<int> labels{0};
    const auto image_d = to_d(images->data);

    auto err = gradcheck(
        model.parameters(),
        [&](Tape* t) { return forward(t, model, images, &labels, true).loss; },
        [&](const std::vector<std::vector<double>>& xs) {
            return full_forward_double(cfg, model.survivors, xs, image_d, labels[0]);
        },
        rng);
    CHECK(err < kTolModel);
}
