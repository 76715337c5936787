#include "capsprune/capsnet.hpp"

#include <algorithm>
#include <cmath>

#include "capsprune/error.hpp"
#include "capsprune/kernels.hpp"

namespace capsprune {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw DimensionError(msg);
}

constexpr float kSquashEps = 1e-9f;

}  // namespace

void CapsNetConfig::validate() const {
    if (image_size < 2 * kernel + 1)
        throw ArgumentError("image_size " + std::to_string(image_size) +
                            " too small for two " + std::to_string(kernel) + "x" +
                            std::to_string(kernel) + " valid convolutions");
    if (image_channels < 1) throw ArgumentError("image_channels must be positive");
    if (conv1_filters < 1) throw ArgumentError("conv1_filters must be positive");
    if (kernel < 1 || kernel % 2 == 0) throw ArgumentError("kernel must be odd and positive");
    if (conv2_capsule_types < 1) throw ArgumentError("conv2_capsule_types must be positive");
    if (pc_dim < 1) throw ArgumentError("pc_dim must be positive");
    if (out_caps_dim < 1) throw ArgumentError("out_caps_dim must be positive");
    if (num_classes < 2) throw ArgumentError("num_classes must be at least 2");
    if (routing_iters < 1) throw ArgumentError("routing_iters must be at least 1");
    if (!(m_minus >= 0.0f && m_minus < m_plus && m_plus <= 1.0f))
        throw ArgumentError("margins must satisfy 0 <= m_minus < m_plus <= 1");
    if (lambda_down < 0.0f) throw ArgumentError("lambda_down must be non-negative");
    if (recon_weight < 0.0f) throw ArgumentError("recon_weight must be non-negative");
    for (int w : decoder_hidden)
        if (w < 1) throw ArgumentError("decoder widths must be positive");
}

int pc_count(int image_size) {
    CapsNetConfig cfg;
    cfg.image_size = image_size;
    cfg.validate();
    return cfg.pc_total();
}

CapsNetModel CapsNetModel::init(const CapsNetConfig& config, Rng& rng) {
    config.validate();
    CapsNetModel m;
    m.config = config;

    auto param = [&](std::vector<int> shape, int fan_in) {
        auto t = Tensor::make(std::move(shape));
        t->requires_grad = true;
        fill_uniform(*t, rng, std::sqrt(1.0f / static_cast<float>(fan_in)));
        return t;
    };
    auto zero_param = [](std::vector<int> shape) {
        auto t = Tensor::make(std::move(shape));
        t->requires_grad = true;
        return t;
    };

    const int c = config.image_channels;
    const int k = config.kernel;
    const int f1 = config.conv1_filters;
    const int f2 = config.pc_conv_filters();
    m.conv1_kernel = param({f1, c, k, k}, c * k * k);
    m.conv1_bias = zero_param({f1});
    m.pc_kernel = param({f2, f1, k, k}, f1 * k * k);
    m.pc_bias = zero_param({f2});

    const int n = config.pc_total();
    m.transform_bank =
        param({n, config.num_classes, config.out_caps_dim, config.pc_dim}, config.pc_dim);
    m.survivors.resize(n);
    for (int i = 0; i < n; ++i) m.survivors[i] = i;

    int in = config.num_classes * config.out_caps_dim;
    std::vector<int> widths = config.decoder_hidden;
    widths.push_back(config.pixels());
    for (size_t i = 0; i < widths.size(); ++i) {
        const int w = widths[i];
        m.decoder_weights.push_back(param({w, in}, in));
        auto b = zero_param({w});
        // small positive bias keeps hidden rectifiers alive while capsule
        // outputs are still near zero
        if (i + 1 < widths.size()) std::fill(b->data.begin(), b->data.end(), 0.1f);
        m.decoder_biases.push_back(b);
        in = w;
    }
    return m;
}

std::vector<TensorPtr> CapsNetModel::parameters() const {
    std::vector<TensorPtr> out = {conv1_kernel, conv1_bias, pc_kernel, pc_bias, transform_bank};
    for (size_t i = 0; i < decoder_weights.size(); ++i) {
        out.push_back(decoder_weights[i]);
        out.push_back(decoder_biases[i]);
    }
    return out;
}

std::vector<std::pair<std::string, TensorPtr>> CapsNetModel::named_parameters() const {
    std::vector<std::pair<std::string, TensorPtr>> out = {
        {"conv1.kernel", conv1_kernel},
        {"conv1.bias", conv1_bias},
        {"pc_conv.kernel", pc_kernel},
        {"pc_conv.bias", pc_bias},
        {"transform_bank", transform_bank},
    };
    for (size_t i = 0; i < decoder_weights.size(); ++i) {
        out.emplace_back("decoder." + std::to_string(i) + ".weight", decoder_weights[i]);
        out.emplace_back("decoder." + std::to_string(i) + ".bias", decoder_biases[i]);
    }
    return out;
}

CapsNetModel CapsNetModel::clone() const {
    CapsNetModel m;
    m.config = config;
    m.survivors = survivors;
    m.conv1_kernel = conv1_kernel->clone();
    m.conv1_bias = conv1_bias->clone();
    m.pc_kernel = pc_kernel->clone();
    m.pc_bias = pc_bias->clone();
    m.transform_bank = transform_bank->clone();
    for (const auto& w : decoder_weights) m.decoder_weights.push_back(w->clone());
    for (const auto& b : decoder_biases) m.decoder_biases.push_back(b->clone());
    return m;
}

void CapsNetModel::validate() const {
    config.validate();
    const int total = config.pc_total();
    if (survivors.empty()) throw InvariantError("model has no surviving capsules");
    for (size_t i = 0; i < survivors.size(); ++i) {
        if (survivors[i] < 0 || survivors[i] >= total)
            throw InvariantError("survivor index out of range");
        if (i > 0 && survivors[i] <= survivors[i - 1])
            throw InvariantError("survivors must be strictly increasing");
    }
    const auto& bs = transform_bank->shape;
    if (bs.size() != 4 || bs[0] != n_surviving() || bs[1] != config.num_classes ||
        bs[2] != config.out_caps_dim || bs[3] != config.pc_dim)
        throw InvariantError("transform_bank shape does not match survivors and config");
    if (decoder_weights.size() != config.decoder_hidden.size() + 1 ||
        decoder_biases.size() != decoder_weights.size())
        throw InvariantError("decoder layer count does not match config");
}

TensorPtr squash(Tape* tape, const TensorPtr& s) {
    require(s->rank() >= 1, "squash: input must have at least one axis");
    const int d = s->shape.back();
    const int rows = static_cast<int>(s->size() / d);

    auto out = Tensor::make(s->shape);
    std::vector<float> sq(rows);
    kernels::squash(s->data.data(), out->data.data(), rows, d, kSquashEps, sq.data());
    check_finite(*out, "squash");

    if (should_record(tape, {&s})) {
        auto sqv = std::make_shared<std::vector<float>>(std::move(sq));
        tape->record({s}, out, [s, out, sqv, rows, d] {
            if (!s->requires_grad) return;
            s->ensure_grad();
            for (int r = 0; r < rows; ++r) {
                const float* sv = s->data.data() + static_cast<size_t>(r) * d;
                const float* gy = out->grad.data() + static_cast<size_t>(r) * d;
                float* gs = s->grad.data() + static_cast<size_t>(r) * d;
                const float q = (*sqv)[r];
                const float rt = std::sqrt(q + kSquashEps);
                const float u = (1.0f + q) * rt;
                const float g = q / u;
                const float dg = (q + 2.0f * kSquashEps - q * q) / (2.0f * rt * u * u);
                float dot = 0.0f;
                for (int a = 0; a < d; ++a) dot += gy[a] * sv[a];
                for (int b = 0; b < d; ++b) gs[b] += g * gy[b] + 2.0f * sv[b] * dg * dot;
            }
        });
    }
    return out;
}

TensorPtr routing_weighted_sum(Tape* tape, const TensorPtr& uhat, const TensorPtr& couplings) {
    require(uhat->rank() == 4, "routing_weighted_sum: uhat must be [N,I,K,d]");
    const int n = uhat->shape[0], i = uhat->shape[1], k = uhat->shape[2], d = uhat->shape[3];
    require(couplings->shape == std::vector<int>{n, i, k},
            "routing_weighted_sum: couplings must be [N,I,K]");

    auto out = Tensor::make({n, k, d});
    kernels::routing_weighted_sum(uhat->data.data(), couplings->data.data(), out->data.data(), n,
                                  i, k, d);
    check_finite(*out, "routing_weighted_sum");

    if (should_record(tape, {&uhat})) {
        tape->record({uhat}, out, [uhat, couplings, out, n, i, k, d] {
            if (!uhat->requires_grad) return;
            uhat->ensure_grad();
            for (int b = 0; b < n; ++b)
                for (int cap = 0; cap < i; ++cap)
                    for (int cls = 0; cls < k; ++cls) {
                        const float c = couplings->data[(static_cast<size_t>(b) * i + cap) * k + cls];
                        const float* gs = out->grad.data() + (static_cast<size_t>(b) * k + cls) * d;
                        float* gu =
                            uhat->grad.data() +
                            ((static_cast<size_t>(b) * i + cap) * k + cls) * d;
                        for (int q = 0; q < d; ++q) gu[q] += c * gs[q];
                    }
        });
    }
    return out;
}

RoutingState dynamic_routing(Tape* tape, const TensorPtr& uhat, int iters) {
    if (iters < 1) throw ArgumentError("dynamic_routing: iters must be at least 1");
    require(uhat->rank() == 4, "dynamic_routing: uhat must be [N,I,K,d]");
    const int n = uhat->shape[0], i = uhat->shape[1], k = uhat->shape[2], d = uhat->shape[3];
    const size_t rows = static_cast<size_t>(n) * i;

    auto b = Tensor::make({n, i, k});
    std::vector<float> s(static_cast<size_t>(n) * k * d);
    std::vector<float> v(s.size());

    for (int it = 0; it + 1 < iters; ++it) {
        std::vector<float> c(b->size());
        kernels::softmax(b->data.data(), c.data(), rows, k, 1);
        kernels::routing_weighted_sum(uhat->data.data(), c.data(), s.data(), n, i, k, d);
        kernels::squash(s.data(), v.data(), static_cast<size_t>(n) * k, d, kSquashEps);
        kernels::routing_agreement(uhat->data.data(), v.data(), b->data.data(), n, i, k, d);
    }

    auto c = Tensor::make({n, i, k});
    kernels::softmax(b->data.data(), c->data.data(), rows, k, 1);
    auto s_final = routing_weighted_sum(tape, uhat, c);
    auto v_final = squash(tape, s_final);

    RoutingState state;
    state.logits = b;
    state.couplings = c;
    state.output_caps = v_final;
    return state;
}

TensorPtr margin_loss(Tape* tape, const TensorPtr& v, const TensorPtr& labels_onehot,
                      const CapsNetConfig& config) {
    require(v->rank() == 3, "margin_loss: v must be [N,K,d]");
    const int n = v->shape[0], k = v->shape[1], d = v->shape[2];
    require(labels_onehot->shape == std::vector<int>{n, k},
            "margin_loss: labels must be [N,K]");
    for (int b = 0; b < n; ++b) {
        int ones = 0;
        for (int c = 0; c < k; ++c) {
            float t = labels_onehot->data[static_cast<size_t>(b) * k + c];
            if (t == 1.0f)
                ++ones;
            else if (t != 0.0f)
                throw ArgumentError("margin_loss: labels must contain only 0 and 1");
        }
        if (ones != 1) throw ArgumentError("margin_loss: each label row must be one-hot");
    }

    auto norms = std::make_shared<std::vector<float>>(static_cast<size_t>(n) * k);
    const float total = kernels::margin_loss(v->data.data(), labels_onehot->data.data(), n, k, d,
                                             config.m_plus, config.m_minus, config.lambda_down,
                                             kSquashEps, norms->data());
    auto out = Tensor::scalar(total);
    check_finite(*out, "margin_loss");

    const float mp = config.m_plus, mm = config.m_minus, lam = config.lambda_down;
    if (should_record(tape, {&v})) {
        tape->record({v}, out, [v, labels_onehot, out, norms, n, k, d, mp, mm, lam] {
            if (!v->requires_grad) return;
            v->ensure_grad();
            const float gl = out->grad[0];
            if (gl == 0.0f) return;
            for (int b = 0; b < n; ++b)
                for (int c = 0; c < k; ++c) {
                    const size_t row = static_cast<size_t>(b) * k + c;
                    const float t = labels_onehot->data[row];
                    const float nm = (*norms)[row];
                    float dnorm = 0.0f;
                    if (t == 1.0f) {
                        const float h = mp - nm;
                        if (h > 0.0f) dnorm -= 2.0f * h;
                    } else {
                        const float h = nm - mm;
                        if (h > 0.0f) dnorm += 2.0f * lam * h;
                    }
                    if (dnorm == 0.0f) continue;
                    const float scale = gl * dnorm / (static_cast<float>(n) * nm);
                    const float* vv = v->data.data() + row * d;
                    float* gv = v->grad.data() + row * d;
                    for (int q = 0; q < d; ++q) gv[q] += scale * vv[q];
                }
        });
    }
    return out;
}

TensorPtr reconstruction_loss(Tape* tape, const TensorPtr& decoded, const TensorPtr& target) {
    require(same_shape(*decoded, *target), "reconstruction_loss: shape mismatch");
    require(decoded->rank() == 2, "reconstruction_loss: inputs must be [N,P]");
    const int n = decoded->shape[0];

    auto out = Tensor::scalar(kernels::sse_mean(decoded->data.data(), target->data.data(), n,
                                                decoded->shape[1]));
    check_finite(*out, "reconstruction_loss");

    if (should_record(tape, {&decoded, &target})) {
        tape->record({decoded, target}, out, [decoded, target, out, n] {
            const float gl = out->grad[0];
            if (gl == 0.0f) return;
            const float scale = 2.0f * gl / static_cast<float>(n);
            if (decoded->requires_grad) {
                decoded->ensure_grad();
                for (size_t i = 0; i < decoded->data.size(); ++i)
                    decoded->grad[i] += scale * (decoded->data[i] - target->data[i]);
            }
            if (target->requires_grad) {
                target->ensure_grad();
                for (size_t i = 0; i < target->data.size(); ++i)
                    target->grad[i] -= scale * (decoded->data[i] - target->data[i]);
            }
        });
    }
    return out;
}

TensorPtr primary_capsules(Tape* tape, const CapsNetModel& model, const TensorPtr& images) {
    const auto& cfg = model.config;
    require(images->rank() == 4, "primary_capsules: images must be [N,C,H,W]");
    require(images->shape[1] == cfg.image_channels && images->shape[2] == cfg.image_size &&
                images->shape[3] == cfg.image_size,
            "primary_capsules: image shape does not match config");

    auto x = conv2d(tape, images, model.conv1_kernel, 1);
    x = bias_channel(tape, x, model.conv1_bias);
    x = relu(tape, x);
    auto u = pc_conv_gather(tape, x, model.pc_kernel, model.pc_bias, 2, model.survivors,
                            cfg.conv2_capsule_types, cfg.pc_dim);
    return squash(tape, u);
}

TensorPtr one_hot(const std::vector<int>& labels, int num_classes) {
    auto out = Tensor::make({static_cast<int>(labels.size()), num_classes});
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes)
            throw ArgumentError("one_hot: label " + std::to_string(labels[i]) +
                                " outside [0, " + std::to_string(num_classes) + ")");
        out->data[i * num_classes + labels[i]] = 1.0f;
    }
    return out;
}

ForwardResult forward(Tape* tape, const CapsNetModel& model, const TensorPtr& images,
                      const std::vector<int>* labels, bool training) {
    const auto& cfg = model.config;
    const int n = images->shape[0];
    if (labels && static_cast<int>(labels->size()) != n)
        throw ArgumentError("forward: label count does not match batch size");

    ForwardResult res;
    res.pc_activations = primary_capsules(tape, model, images);
    auto uhat = matvec_bank(tape, model.transform_bank, res.pc_activations);
    res.routing = dynamic_routing(tape, uhat, cfg.routing_iters);
    const auto& v = res.routing.output_caps;

    res.logits = Tensor::make({n, cfg.num_classes});
    kernels::row_norms(v->data.data(), res.logits->data.data(),
                       static_cast<size_t>(n) * cfg.num_classes, cfg.out_caps_dim, kSquashEps);
    res.predicted.resize(n);
    for (int b = 0; b < n; ++b) {
        const float* row = res.logits->data.data() + static_cast<size_t>(b) * cfg.num_classes;
        res.predicted[b] =
            static_cast<int>(std::max_element(row, row + cfg.num_classes) - row);
    }

    if (!labels) return res;

    auto onehot = one_hot(*labels, cfg.num_classes);
    res.margin = margin_loss(tape, v, onehot, cfg);
    res.loss = res.margin;

    if (cfg.recon_weight > 0.0f) {
        const std::vector<int>& mask_classes = training ? *labels : res.predicted;
        auto x = mask_flatten(tape, v, mask_classes);
        const size_t layers = model.decoder_weights.size();
        for (size_t i = 0; i < layers; ++i) {
            x = linear(tape, x, model.decoder_weights[i], model.decoder_biases[i]);
            x = (i + 1 < layers) ? relu(tape, x) : sigmoid(tape, x);
        }
        auto target = Tensor::make({n, cfg.pixels()}, images->data);
        res.reconstruction = reconstruction_loss(tape, x, target);
        res.loss = add(tape, res.margin, scale(tape, res.reconstruction, cfg.recon_weight));
    }
    return res;
}

}  // namespace capsprune
