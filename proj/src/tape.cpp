#include "capsprune/tape.hpp"

namespace capsprune {

void Tape::record(std::vector<TensorPtr> inputs, TensorPtr output,
                  std::function<void()> backward) {
    output->requires_grad = true;
    nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const TensorPtr& loss) {
    if (!loss || !loss->is_scalar()) {
        throw ArgumentError("backward requires a scalar loss tensor");
    }
    loss->ensure_grad();
    loss->grad[0] += 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        // Nodes whose output never received a gradient are not on a path to
        // the loss; skip them.
        if (it->output->grad.empty()) continue;
        it->backward();
    }
}

bool should_record(const Tape* tape, std::initializer_list<const TensorPtr*> inputs) {
    if (tape == nullptr) return false;
    for (const TensorPtr* t : inputs) {
        if (*t && (*t)->requires_grad) return true;
    }
    return false;
}

}  // namespace capsprune
