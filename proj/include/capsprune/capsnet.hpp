#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "capsprune/ops.hpp"
#include "capsprune/rng.hpp"

namespace capsprune {

struct CapsNetConfig {
    int image_size = 28;
    int image_channels = 1;
    int conv1_filters = 256;
    int kernel = 9;
    int conv2_capsule_types = 32;
    int pc_dim = 8;
    int out_caps_dim = 16;
    int num_classes = 10;
    int routing_iters = 3;
    float m_plus = 0.9f;
    float m_minus = 0.1f;
    float lambda_down = 0.5f;
    float recon_weight = 0.0005f;
    std::vector<int> decoder_hidden = {512, 1024};  // output width is always H*W*C

    void validate() const;

    int grid1() const { return image_size - (kernel - 1); }
    int grid2() const { return (grid1() - kernel) / 2 + 1; }
    int pc_total() const { return grid2() * grid2() * conv2_capsule_types; }
    int pc_conv_filters() const { return conv2_capsule_types * pc_dim; }
    int pixels() const { return image_size * image_size * image_channels; }
};

// Primary-capsule count of the reference 32-type geometry: two valid 9x9
// convolutions (stride 1 then 2) leave a g x g grid of 32 capsule types.
int pc_count(int image_size);

struct CapsNetModel {
    CapsNetConfig config;
    TensorPtr conv1_kernel, conv1_bias;
    TensorPtr pc_kernel, pc_bias;
    TensorPtr transform_bank;   // [n_surviving, K, out_caps_dim, pc_dim]
    std::vector<int> survivors; // strictly increasing original capsule indices
    std::vector<TensorPtr> decoder_weights;
    std::vector<TensorPtr> decoder_biases;

    static CapsNetModel init(const CapsNetConfig& config, Rng& rng);

    int n_surviving() const { return static_cast<int>(survivors.size()); }
    std::vector<TensorPtr> parameters() const;
    std::vector<std::pair<std::string, TensorPtr>> named_parameters() const;
    CapsNetModel clone() const;
    void validate() const;
};

struct RoutingState {
    TensorPtr logits;       // b [N, n_surviving, K]
    TensorPtr couplings;    // c [N, n_surviving, K], rows over K sum to 1
    TensorPtr output_caps;  // v [N, K, out_caps_dim]
};

// Norm-preserving-direction non-linearity over the last axis; maps |s| into
// [0, 1) and sends 0 to 0.
TensorPtr squash(Tape* tape, const TensorPtr& s);

// s[n,k,:] = sum_i c[n,i,k] * uhat[n,i,k,:]. Couplings are constants here;
// gradients flow into uhat only.
TensorPtr routing_weighted_sum(Tape* tape, const TensorPtr& uhat, const TensorPtr& couplings);

// Routing-by-agreement over prediction vectors uhat [N,I,K,d]. Couplings are
// recomputed from b = 0 each call, never learned. Earlier iterations run
// detached; only the final iteration's weighted sum and squash are recorded.
RoutingState dynamic_routing(Tape* tape, const TensorPtr& uhat, int iters);

// Per-class hinge-squared loss averaged over the batch. labels_onehot [N,K]
// must be exactly one-hot.
TensorPtr margin_loss(Tape* tape, const TensorPtr& v, const TensorPtr& labels_onehot,
                      const CapsNetConfig& config);

// Mean over the batch of the squared Euclidean distance between decoded and
// target pixels (pre recon_weight).
TensorPtr reconstruction_loss(Tape* tape, const TensorPtr& decoded, const TensorPtr& target);

// conv1 + relu, pc conv (stride 2) restricted to surviving capsules, squash.
// Output [N, n_surviving, pc_dim].
TensorPtr primary_capsules(Tape* tape, const CapsNetModel& model, const TensorPtr& images);

struct ForwardResult {
    TensorPtr logits;          // [N,K] output-capsule norms
    std::vector<int> predicted;
    TensorPtr loss;            // scalar; null when no labels were given
    TensorPtr margin;          // scalar component of the loss
    TensorPtr reconstruction;  // scalar pre-weight component; null if disabled
    RoutingState routing;
    TensorPtr pc_activations;  // [N, n_surviving, pc_dim] post-squash
};

// Full forward pass. With labels the total loss (margin + recon_weight *
// reconstruction) is produced; the decoder sees the true-class capsule when
// `training`, the predicted-class capsule otherwise.
ForwardResult forward(Tape* tape, const CapsNetModel& model, const TensorPtr& images,
                      const std::vector<int>* labels, bool training);

// One-hot [N,K] encoding of class ids.
TensorPtr one_hot(const std::vector<int>& labels, int num_classes);

}  // namespace capsprune
