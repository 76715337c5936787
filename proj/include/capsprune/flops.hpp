#pragma once

#include <string>

#include "capsprune/capsnet.hpp"

namespace capsprune {

// One d_out x d_in matrix-vector product per capsule: d_out * (2*d_in - 1)
// each, 240 at the 16x8 default.
long long flops_pc_transform(long long n_pcs, int d_in = 8, int d_out = 16);

// Per iteration: softmax over classes and agreement updates per capsule,
// n*(3K-1 + 4dK), plus the squash of each class capsule, K*(3d+1).
long long flops_routing(long long n_pcs, int classes, int caps_dim, int iters);

// 1 - pruned/baseline.
double reduction_ratio(long long baseline, long long pruned);

struct FlopsReport {
    int n_pcs = 0;
    int baseline_pcs = 0;
    long long pc_transform_flops = 0;
    long long routing_flops = 0;
    int routing_iters = 0;
    int classes = 0;
    int caps_dim = 0;
    double pc_transform_reduction = 0.0;
    double routing_reduction = 0.0;
    long long conv_flops = 0;     // constant, excluded from reductions
    long long decoder_flops = 0;  // constant, excluded from reductions
};

FlopsReport flops_report(const CapsNetConfig& config, int n_pcs);
FlopsReport flops_report(const CapsNetConfig& config, int n_pcs, int baseline_pcs);

std::string render_flops_table(const FlopsReport& report);

}  // namespace capsprune
