#include "capsprune/flops.hpp"

#include <sstream>

#include "capsprune/error.hpp"

namespace capsprune {

long long flops_pc_transform(long long n_pcs, int d_in, int d_out) {
    if (n_pcs < 0) throw ArgumentError("flops_pc_transform: n_pcs must be non-negative");
    if (d_in < 1 || d_out < 1) throw ArgumentError("flops_pc_transform: dims must be positive");
    return n_pcs * d_out * (2LL * d_in - 1);
}

long long flops_routing(long long n_pcs, int classes, int caps_dim, int iters) {
    if (n_pcs < 0) throw ArgumentError("flops_routing: n_pcs must be non-negative");
    if (classes < 1 || caps_dim < 1 || iters < 1)
        throw ArgumentError("flops_routing: classes, caps_dim, iters must be positive");
    const long long per_capsule = 3LL * classes - 1 + 4LL * caps_dim * classes;
    const long long per_class = 3LL * caps_dim + 1;
    return static_cast<long long>(iters) * (n_pcs * per_capsule + classes * per_class);
}

double reduction_ratio(long long baseline, long long pruned) {
    if (baseline <= 0) throw ArgumentError("reduction_ratio: baseline must be positive");
    return 1.0 - static_cast<double>(pruned) / static_cast<double>(baseline);
}

namespace {

// Valid convolution: out_h*out_w*filters outputs, each 2*C*k*k - 1 mults/adds
// plus a bias add.
long long conv_flops(int in_h, int channels, int filters, int kernel, int stride) {
    const int out = (in_h - kernel) / stride + 1;
    const long long per_out = 2LL * channels * kernel * kernel;
    return static_cast<long long>(out) * out * filters * per_out;
}

long long dense_flops(int in, int out) { return static_cast<long long>(out) * (2LL * in); }

}  // namespace

FlopsReport flops_report(const CapsNetConfig& config, int n_pcs) {
    return flops_report(config, n_pcs, config.pc_total());
}

FlopsReport flops_report(const CapsNetConfig& config, int n_pcs, int baseline_pcs) {
    config.validate();
    if (n_pcs < 0 || n_pcs > config.pc_total())
        throw ArgumentError("flops_report: n_pcs outside [0, " +
                            std::to_string(config.pc_total()) + "]");
    if (baseline_pcs < 1) throw ArgumentError("flops_report: baseline_pcs must be positive");

    FlopsReport r;
    r.n_pcs = n_pcs;
    r.baseline_pcs = baseline_pcs;
    r.routing_iters = config.routing_iters;
    r.classes = config.num_classes;
    r.caps_dim = config.out_caps_dim;
    r.pc_transform_flops = flops_pc_transform(n_pcs, config.pc_dim, config.out_caps_dim);
    r.routing_flops =
        flops_routing(n_pcs, config.num_classes, config.out_caps_dim, config.routing_iters);
    r.pc_transform_reduction = reduction_ratio(
        flops_pc_transform(baseline_pcs, config.pc_dim, config.out_caps_dim),
        r.pc_transform_flops);
    r.routing_reduction = reduction_ratio(
        flops_routing(baseline_pcs, config.num_classes, config.out_caps_dim,
                      config.routing_iters),
        r.routing_flops);

    r.conv_flops =
        conv_flops(config.image_size, config.image_channels, config.conv1_filters,
                   config.kernel, 1) +
        conv_flops(config.grid1(), config.conv1_filters, config.pc_conv_filters(),
                   config.kernel, 2);
    int in = config.num_classes * config.out_caps_dim;
    for (int w : config.decoder_hidden) {
        r.decoder_flops += dense_flops(in, w);
        in = w;
    }
    r.decoder_flops += dense_flops(in, config.pixels());
    return r;
}

std::string render_flops_table(const FlopsReport& r) {
    std::ostringstream os;
    os << "stage            flops        reduction\n";
    os << "pc_transform     " << r.pc_transform_flops << "  " << r.pc_transform_reduction
       << "\n";
    os << "routing          " << r.routing_flops << "  " << r.routing_reduction << "\n";
    os << "conv (fixed)     " << r.conv_flops << "  -\n";
    os << "decoder (fixed)  " << r.decoder_flops << "  -\n";
    os << "surviving_pcs    " << r.n_pcs << " of " << r.baseline_pcs << "\n";
    return os.str();
}

}  // namespace capsprune
