#include "capsprune/ops.hpp"

#include <cstdint>

#include "capsprune/kernels.hpp"

namespace capsprune {

namespace {

void require(bool cond, const char* msg) {
    if (!cond) throw DimensionError(msg);
}

}  // namespace

TensorPtr conv2d(Tape* tape, const TensorPtr& input, const TensorPtr& kernel, int stride) {
    if (stride <= 0) throw ArgumentError("conv2d: stride must be positive");
    require(input->rank() == 4, "conv2d: input must be [N,C,H,W]");
    require(kernel->rank() == 4, "conv2d: kernel must be [F,C,kh,kw]");
    const int N = input->dim(0), C = input->dim(1), H = input->dim(2), W = input->dim(3);
    const int F = kernel->dim(0), kh = kernel->dim(2), kw = kernel->dim(3);
    require(kernel->dim(1) == C, "conv2d: channel mismatch between input and kernel");
    require(kh <= H && kw <= W, "conv2d: kernel larger than input");
    const int OH = (H - kh) / stride + 1;
    const int OW = (W - kw) / stride + 1;

    auto out = Tensor::make({N, F, OH, OW});
    kernels::conv2d(input->data.data(), kernel->data.data(), out->data.data(), N, C, H, W, F, kh,
                    kw, stride);
    check_finite(*out, "conv2d");

    if (should_record(tape, {&input, &kernel})) {
        tape->record({input, kernel}, out, [=] {
            const float* go = out->grad.data();
            if (input->requires_grad) input->ensure_grad();
            if (kernel->requires_grad) kernel->ensure_grad();
            for (int n = 0; n < N; ++n) {
                for (int f = 0; f < F; ++f) {
                    for (int oh = 0; oh < OH; ++oh) {
                        for (int ow = 0; ow < OW; ++ow) {
                            const float g =
                                go[((static_cast<int64_t>(n) * F + f) * OH + oh) * OW + ow];
                            if (g == 0.0f) continue;
                            for (int c = 0; c < C; ++c) {
                                for (int i = 0; i < kh; ++i) {
                                    for (int j = 0; j < kw; ++j) {
                                        const int64_t in_idx =
                                            ((static_cast<int64_t>(n) * C + c) * H + oh * stride +
                                             i) * W +
                                            ow * stride + j;
                                        const int64_t k_idx =
                                            ((static_cast<int64_t>(f) * C + c) * kh + i) * kw + j;
                                        if (input->requires_grad)
                                            input->grad[in_idx] += g * kernel->data[k_idx];
                                        if (kernel->requires_grad)
                                            kernel->grad[k_idx] += g * input->data[in_idx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

TensorPtr bias_channel(Tape* tape, const TensorPtr& x, const TensorPtr& bias) {
    require(x->rank() >= 2, "bias_channel: x must have a channel axis");
    require(bias->rank() == 1, "bias_channel: bias must be rank 1");
    const int N = x->dim(0), F = x->dim(1);
    require(bias->dim(0) == F, "bias_channel: bias length must match channel count");
    int64_t hw = 1;
    for (int i = 2; i < x->rank(); ++i) hw *= x->dim(i);

    auto out = Tensor::make(x->shape);
    kernels::bias_channel(x->data.data(), bias->data.data(), out->data.data(), N, F,
                          static_cast<int>(hw));
    check_finite(*out, "bias_channel");

    if (should_record(tape, {&x, &bias})) {
        tape->record({x, bias}, out, [=] {
            const float* go = out->grad.data();
            if (x->requires_grad) {
                x->ensure_grad();
                for (int64_t i = 0; i < out->size(); ++i) x->grad[i] += go[i];
            }
            if (bias->requires_grad) {
                bias->ensure_grad();
                int64_t idx = 0;
                for (int n = 0; n < N; ++n)
                    for (int f = 0; f < F; ++f)
                        for (int64_t i = 0; i < hw; ++i) bias->grad[f] += go[idx++];
            }
        });
    }
    return out;
}

TensorPtr relu(Tape* tape, const TensorPtr& x) {
    auto out = Tensor::make(x->shape);
    kernels::relu(x->data.data(), out->data.data(), x->size());

    if (should_record(tape, {&x})) {
        tape->record({x}, out, [=] {
            x->ensure_grad();
            // gradient at exactly 0 is defined as 0
            for (int64_t i = 0; i < x->size(); ++i)
                if (x->data[i] > 0.0f) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

TensorPtr softmax(Tape* tape, const TensorPtr& x, int axis) {
    if (axis < 0 || axis >= x->rank()) throw ArgumentError("softmax: axis out of range");
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x->dim(i);
    const int64_t axis_n = x->dim(axis);
    for (int i = axis + 1; i < x->rank(); ++i) inner *= x->dim(i);

    auto out = Tensor::make(x->shape);
    kernels::softmax(x->data.data(), out->data.data(), outer, axis_n, inner);
    check_finite(*out, "softmax");

    if (should_record(tape, {&x})) {
        tape->record({x}, out, [=] {
            x->ensure_grad();
            const float* y = out->data.data();
            const float* gy = out->grad.data();
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t in = 0; in < inner; ++in) {
                    const int64_t base = o * axis_n * inner + in;
                    float dot = 0.0f;
                    for (int64_t k = 0; k < axis_n; ++k)
                        dot += gy[base + k * inner] * y[base + k * inner];
                    for (int64_t k = 0; k < axis_n; ++k) {
                        const int64_t idx = base + k * inner;
                        x->grad[idx] += y[idx] * (gy[idx] - dot);
                    }
                }
            }
        });
    }
    return out;
}

TensorPtr matvec_bank(Tape* tape, const TensorPtr& weights, const TensorPtr& vectors) {
    require(weights->rank() == 4, "matvec_bank: weights must be [I,J,dout,din]");
    const int I = weights->dim(0), J = weights->dim(1), dout = weights->dim(2),
              din = weights->dim(3);
    const bool batched = vectors->rank() == 3;
    require(batched || vectors->rank() == 2, "matvec_bank: vectors must be [I,din] or [N,I,din]");
    const int N = batched ? vectors->dim(0) : 1;
    require(vectors->dim(batched ? 1 : 0) == I && vectors->dim(batched ? 2 : 1) == din,
            "matvec_bank: vectors shape does not match weight bank");

    auto out = batched ? Tensor::make({N, I, J, dout}) : Tensor::make({I, J, dout});
    kernels::matvec_bank(weights->data.data(), vectors->data.data(), out->data.data(), N, I, J,
                         dout, din);
    check_finite(*out, "matvec_bank");

    if (should_record(tape, {&weights, &vectors})) {
        tape->record({weights, vectors}, out, [=] {
            if (weights->requires_grad) weights->ensure_grad();
            if (vectors->requires_grad) vectors->ensure_grad();
            const float* go = out->grad.data();
            for (int n = 0; n < N; ++n) {
                for (int i = 0; i < I; ++i) {
                    const int64_t vbase = (static_cast<int64_t>(n) * I + i) * din;
                    for (int j = 0; j < J; ++j) {
                        const int64_t wbase = (static_cast<int64_t>(i) * J + j) * dout * din;
                        const int64_t obase =
                            ((static_cast<int64_t>(n) * I + i) * J + j) * dout;
                        for (int o = 0; o < dout; ++o) {
                            const float g = go[obase + o];
                            if (g == 0.0f) continue;
                            for (int k = 0; k < din; ++k) {
                                if (weights->requires_grad)
                                    weights->grad[wbase + o * din + k] +=
                                        g * vectors->data[vbase + k];
                                if (vectors->requires_grad)
                                    vectors->grad[vbase + k] +=
                                        g * weights->data[wbase + o * din + k];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

TensorPtr capsule_reshape(Tape* tape, const TensorPtr& x, int types, int d) {
    require(x->rank() == 4, "capsule_reshape: x must be [N,types*d,g,g]");
    const int N = x->dim(0), C = x->dim(1), g = x->dim(2);
    require(x->dim(3) == g, "capsule_reshape: spatial grid must be square");
    require(C == types * d, "capsule_reshape: channels must equal types*d");

    auto out = Tensor::make({N, g * g * types, d});
    kernels::capsule_reshape(x->data.data(), out->data.data(), N, types, d, g);

    if (should_record(tape, {&x})) {
        tape->record({x}, out, [=] {
            x->ensure_grad();
            const float* go = out->grad.data();
            const int64_t chw = static_cast<int64_t>(C) * g * g;
            int64_t src = 0;
            for (int n = 0; n < N; ++n) {
                float* gx = x->grad.data() + n * chw;
                for (int h = 0; h < g; ++h)
                    for (int w = 0; w < g; ++w)
                        for (int t = 0; t < types; ++t)
                            for (int k = 0; k < d; ++k)
                                gx[(static_cast<int64_t>(t * d + k) * g + h) * g + w] +=
                                    go[src++];
            }
        });
    }
    return out;
}

TensorPtr gather_rows(Tape* tape, const TensorPtr& x, const std::vector<int>& indices) {
    require(x->rank() == 3, "gather_rows: x must be [N,R,d]");
    const int N = x->dim(0), R = x->dim(1), d = x->dim(2);
    for (int idx : indices)
        if (idx < 0 || idx >= R) throw ArgumentError("gather_rows: index out of range");
    const int n_idx = static_cast<int>(indices.size());

    auto out = Tensor::make({N, n_idx, d});
    kernels::gather_rows(x->data.data(), out->data.data(), N, R, d, indices.data(), n_idx);

    if (should_record(tape, {&x})) {
        auto idx_copy = indices;
        tape->record({x}, out, [=] {
            x->ensure_grad();
            const float* go = out->grad.data();
            int64_t src = 0;
            for (int n = 0; n < N; ++n) {
                float* gx = x->grad.data() + static_cast<int64_t>(n) * R * d;
                for (int j = 0; j < n_idx; ++j) {
                    float* row = gx + static_cast<int64_t>(idx_copy[j]) * d;
                    for (int k = 0; k < d; ++k) row[k] += go[src++];
                }
            }
        });
    }
    return out;
}

TensorPtr pc_conv_gather(Tape* tape, const TensorPtr& features, const TensorPtr& kernel,
                         const TensorPtr& bias, int stride, const std::vector<int>& survivors,
                         int types, int d) {
    if (stride <= 0) throw ArgumentError("pc_conv_gather: stride must be positive");
    require(features->rank() == 4, "pc_conv_gather: features must be [N,C,H,W]");
    require(kernel->rank() == 4, "pc_conv_gather: kernel must be [F,C,kh,kw]");
    const int N = features->dim(0), C = features->dim(1), H = features->dim(2),
              W = features->dim(3);
    const int F = kernel->dim(0), kh = kernel->dim(2), kw = kernel->dim(3);
    require(kernel->dim(1) == C, "pc_conv_gather: channel mismatch");
    require(F == types * d, "pc_conv_gather: kernel count must equal types*d");
    require(bias->rank() == 1 && bias->dim(0) == F, "pc_conv_gather: bias length mismatch");
    require(kh <= H && kw <= W, "pc_conv_gather: kernel larger than input");
    const int g = (H - kh) / stride + 1;
    require((W - kw) / stride + 1 == g, "pc_conv_gather: grid must be square");
    const int pc_total = g * g * types;
    for (int pc : survivors)
        if (pc < 0 || pc >= pc_total)
            throw ArgumentError("pc_conv_gather: survivor index out of range");
    const int n_surv = static_cast<int>(survivors.size());

    auto out = Tensor::make({N, n_surv, d});
    kernels::pc_conv_gather(features->data.data(), kernel->data.data(), bias->data.data(),
                            out->data.data(), N, C, H, W, types, d, kh, kw, stride,
                            survivors.data(), n_surv, g);
    check_finite(*out, "pc_conv_gather");

    if (should_record(tape, {&features, &kernel, &bias})) {
        auto surv = survivors;
        tape->record({features, kernel, bias}, out, [=] {
            if (features->requires_grad) features->ensure_grad();
            if (kernel->requires_grad) kernel->ensure_grad();
            if (bias->requires_grad) bias->ensure_grad();
            const float* go = out->grad.data();
            for (int n = 0; n < N; ++n) {
                for (int j = 0; j < n_surv; ++j) {
                    const int pc = surv[j];
                    const int t = pc % types;
                    const int cell = pc / types;
                    const int oh = cell / g;
                    const int ow = cell % g;
                    for (int k = 0; k < d; ++k) {
                        const float gv =
                            go[(static_cast<int64_t>(n) * n_surv + j) * d + k];
                        if (gv == 0.0f) continue;
                        const int f = t * d + k;
                        if (bias->requires_grad) bias->grad[f] += gv;
                        for (int c = 0; c < C; ++c) {
                            for (int i = 0; i < kh; ++i) {
                                for (int q = 0; q < kw; ++q) {
                                    const int64_t in_idx =
                                        ((static_cast<int64_t>(n) * C + c) * H + oh * stride + i) *
                                            W +
                                        ow * stride + q;
                                    const int64_t k_idx =
                                        ((static_cast<int64_t>(f) * C + c) * kh + i) * kw + q;
                                    if (features->requires_grad)
                                        features->grad[in_idx] += gv * kernel->data[k_idx];
                                    if (kernel->requires_grad)
                                        kernel->grad[k_idx] += gv * features->data[in_idx];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

TensorPtr linear(Tape* tape, const TensorPtr& x, const TensorPtr& weight, const TensorPtr& bias) {
    require(x->rank() == 2, "linear: x must be [N,in]");
    require(weight->rank() == 2, "linear: weight must be [out,in]");
    const int N = x->dim(0), in_dim = x->dim(1), out_dim = weight->dim(0);
    require(weight->dim(1) == in_dim, "linear: weight columns must match input width");
    require(bias->rank() == 1 && bias->dim(0) == out_dim, "linear: bias length mismatch");

    auto out = Tensor::make({N, out_dim});
    kernels::linear(x->data.data(), weight->data.data(), bias->data.data(), out->data.data(), N,
                    in_dim, out_dim);
    check_finite(*out, "linear");

    if (should_record(tape, {&x, &weight, &bias})) {
        tape->record({x, weight, bias}, out, [=] {
            if (x->requires_grad) x->ensure_grad();
            if (weight->requires_grad) weight->ensure_grad();
            if (bias->requires_grad) bias->ensure_grad();
            const float* go = out->grad.data();
            for (int n = 0; n < N; ++n) {
                const int64_t xbase = static_cast<int64_t>(n) * in_dim;
                for (int o = 0; o < out_dim; ++o) {
                    const float g = go[static_cast<int64_t>(n) * out_dim + o];
                    if (g == 0.0f) continue;
                    if (bias->requires_grad) bias->grad[o] += g;
                    const int64_t wbase = static_cast<int64_t>(o) * in_dim;
                    for (int i = 0; i < in_dim; ++i) {
                        if (weight->requires_grad)
                            weight->grad[wbase + i] += g * x->data[xbase + i];
                        if (x->requires_grad) x->grad[xbase + i] += g * weight->data[wbase + i];
                    }
                }
            }
        });
    }
    return out;
}

TensorPtr sigmoid(Tape* tape, const TensorPtr& x) {
    auto out = Tensor::make(x->shape);
    kernels::sigmoid(x->data.data(), out->data.data(), x->size());
    check_finite(*out, "sigmoid");

    if (should_record(tape, {&x})) {
        tape->record({x}, out, [=] {
            x->ensure_grad();
            for (int64_t i = 0; i < x->size(); ++i) {
                const float y = out->data[i];
                x->grad[i] += out->grad[i] * y * (1.0f - y);
            }
        });
    }
    return out;
}

TensorPtr mask_flatten(Tape* tape, const TensorPtr& v, const std::vector<int>& classes) {
    require(v->rank() == 3, "mask_flatten: v must be [N,K,d]");
    const int N = v->dim(0), K = v->dim(1), d = v->dim(2);
    require(static_cast<int>(classes.size()) == N, "mask_flatten: one class per sample required");
    for (int c : classes)
        if (c < 0 || c >= K) throw ArgumentError("mask_flatten: class out of range");

    auto out = Tensor::make({N, K * d});
    kernels::mask_flatten(v->data.data(), classes.data(), out->data.data(), N, K, d);

    if (should_record(tape, {&v})) {
        auto cls = classes;
        tape->record({v}, out, [=] {
            v->ensure_grad();
            const float* go = out->grad.data();
            for (int n = 0; n < N; ++n) {
                const int64_t base = (static_cast<int64_t>(n) * K + cls[n]) * d;
                for (int q = 0; q < d; ++q) v->grad[base + q] += go[base + q];
            }
        });
    }
    return out;
}

TensorPtr reshape(Tape* tape, const TensorPtr& x, std::vector<int> new_shape) {
    require(shape_product(new_shape) == x->size(), "reshape: element count must be preserved");
    auto out = Tensor::make(std::move(new_shape), x->data);

    if (should_record(tape, {&x})) {
        tape->record({x}, out, [=] {
            x->ensure_grad();
            for (int64_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

TensorPtr add(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    require(same_shape(*a, *b), "add: shapes must match");
    auto out = Tensor::make(a->shape);
    for (int64_t i = 0; i < a->size(); ++i) out->data[i] = a->data[i] + b->data[i];
    check_finite(*out, "add");

    if (should_record(tape, {&a, &b})) {
        tape->record({a, b}, out, [=] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (int64_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int64_t i = 0; i < b->size(); ++i) b->grad[i] += out->grad[i];
            }
        });
    }
    return out;
}

TensorPtr scale(Tape* tape, const TensorPtr& x, float factor) {
    auto out = Tensor::make(x->shape);
    for (int64_t i = 0; i < x->size(); ++i) out->data[i] = x->data[i] * factor;
    check_finite(*out, "scale");

    if (should_record(tape, {&x})) {
        tape->record({x}, out, [=] {
            x->ensure_grad();
            for (int64_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[i] * factor;
        });
    }
    return out;
}

}  // namespace capsprune
