#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "capsprune/error.hpp"

namespace capsprune {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major float tensor with an optional gradient slot. Data is
// immutable after construction by convention; only `grad` is written later.
class Tensor {
  public:
    std::vector<int> shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until backward allocates it
    bool requires_grad = false;

    Tensor() = default;
    Tensor(std::vector<int> shape_in, float fill = 0.0f);
    Tensor(std::vector<int> shape_in, std::vector<float> data_in);

    static TensorPtr make(std::vector<int> shape, float fill = 0.0f, bool requires_grad = false);
    static TensorPtr make(std::vector<int> shape, std::vector<float> data,
                          bool requires_grad = false);
    static TensorPtr scalar(float value);

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<size_t>(i)); }
    bool is_scalar() const { return data.size() == 1; }

    void ensure_grad();  // allocate and zero if absent
    void zero_grad();

    TensorPtr clone() const;  // deep copy, grad not carried over
};

int64_t shape_product(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);
bool same_shape(const Tensor& a, const Tensor& b);

// Throws NumericError if any element is NaN or infinite.
void check_finite(const Tensor& t, const char* op_name);

class Rng;

// Fill with U[-bound, bound] draws from rng, in index order.
void fill_uniform(Tensor& t, Rng& rng, float bound);

}  // namespace capsprune
