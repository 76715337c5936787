#pragma once

#include <functional>
#include <vector>

#include "capsprune/tensor.hpp"

namespace capsprune {

// Records operations in execution order. Nodes are appended as the forward
// pass runs, so the sequence is already topologically sorted; one reverse
// sweep visits every node exactly once.
class Tape {
  public:
    struct Node {
        std::vector<TensorPtr> inputs;
        TensorPtr output;
        std::function<void()> backward;
    };

    // Marks the output as requiring grad and appends a node. The backward
    // callable reads output->grad and accumulates into the inputs' grads.
    void record(std::vector<TensorPtr> inputs, TensorPtr output, std::function<void()> backward);

    // Seeds d(loss)/d(loss) = 1 and runs all recorded backward rules in
    // reverse order. Gradients accumulate into every tensor on a path from
    // a requires_grad leaf to the loss.
    void backward(const TensorPtr& loss);

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

  private:
    std::vector<Node> nodes_;
};

// True when an op invoked with this tape/input combination must record a node.
bool should_record(const Tape* tape, std::initializer_list<const TensorPtr*> inputs);

}  // namespace capsprune
