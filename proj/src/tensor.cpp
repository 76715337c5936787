#include "capsprune/tensor.hpp"

#include <cmath>
#include <sstream>

#include "capsprune/rng.hpp"

namespace capsprune {

int64_t shape_product(const std::vector<int>& shape) {
    int64_t p = 1;
    for (int d : shape) {
        if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(shape));
        p *= d;
    }
    return p;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

Tensor::Tensor(std::vector<int> shape_in, float fill)
    : shape(std::move(shape_in)), data(static_cast<size_t>(shape_product(shape)), fill) {}

Tensor::Tensor(std::vector<int> shape_in, std::vector<float> data_in)
    : shape(std::move(shape_in)), data(std::move(data_in)) {
    if (shape_product(shape) != static_cast<int64_t>(data.size())) {
        throw DimensionError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }
}

TensorPtr Tensor::make(std::vector<int> shape, float fill, bool requires_grad) {
    auto t = std::make_shared<Tensor>(std::move(shape), fill);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr Tensor::make(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
    auto t = std::make_shared<Tensor>(std::move(shape), std::move(data));
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr Tensor::scalar(float value) { return make({1}, std::vector<float>{value}); }

void Tensor::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
}

void Tensor::zero_grad() {
    if (!grad.empty()) grad.assign(data.size(), 0.0f);
}

TensorPtr Tensor::clone() const {
    auto t = std::make_shared<Tensor>();
    t->shape = shape;
    t->data = data;
    t->requires_grad = requires_grad;
    return t;
}

void check_finite(const Tensor& t, const char* op_name) {
    for (float v : t.data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op_name) + " produced a non-finite value");
        }
    }
}

void fill_uniform(Tensor& t, Rng& rng, float bound) {
    for (float& v : t.data) v = rng.uniform_f(-bound, bound);
}

}  // namespace capsprune
