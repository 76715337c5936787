#include "capsprune/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>

#include "capsprune/error.hpp"

namespace capsprune {

namespace {

std::uint32_t read_be32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw ParseError(path + ": truncated while reading header");
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

void write_be32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<char*>(b), 4);
}

std::ifstream open_read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return in;
}

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

}  // namespace

void DatasetSplit::validate() const {
    if (!images) throw InvariantError("dataset has no image tensor");
    if (images->rank() != 4) throw InvariantError("dataset images must be [N,C,H,W]");
    if (images->shape[2] != images->shape[3])
        throw InvariantError("dataset images must be square");
    if (images->shape[0] != static_cast<int>(labels.size()))
        throw InvariantError("dataset image count does not match label count");
    if (num_classes < 2) throw InvariantError("dataset must declare at least 2 classes");
    for (int l : labels)
        if (l < 0 || l >= num_classes) throw InvariantError("dataset label out of range");
    for (float v : images->data)
        if (v < 0.0f || v > 1.0f) throw InvariantError("dataset pixels must lie in [0,1]");
}

DatasetSplit load_idx(const std::string& images_path, const std::string& labels_path) {
    auto imgs = open_read(images_path);
    if (read_be32(imgs, images_path) != kIdxImagesMagic)
        throw ParseError(images_path + ": bad IDX image magic");
    const int n = static_cast<int>(read_be32(imgs, images_path));
    const int h = static_cast<int>(read_be32(imgs, images_path));
    const int w = static_cast<int>(read_be32(imgs, images_path));
    if (n < 1 || h < 1 || w < 1) throw ParseError(images_path + ": bad IDX dimensions");

    std::vector<unsigned char> raw(static_cast<size_t>(n) * h * w);
    imgs.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (imgs.gcount() != static_cast<std::streamsize>(raw.size()))
        throw ParseError(images_path + ": truncated pixel data");

    auto lbls = open_read(labels_path);
    if (read_be32(lbls, labels_path) != kIdxLabelsMagic)
        throw ParseError(labels_path + ": bad IDX label magic");
    const int ln = static_cast<int>(read_be32(lbls, labels_path));
    if (ln != n) throw ParseError(labels_path + ": label count does not match image count");
    std::vector<unsigned char> lraw(static_cast<size_t>(ln));
    lbls.read(reinterpret_cast<char*>(lraw.data()), static_cast<std::streamsize>(lraw.size()));
    if (lbls.gcount() != static_cast<std::streamsize>(lraw.size()))
        throw ParseError(labels_path + ": truncated label data");

    DatasetSplit split;
    split.images = Tensor::make({n, 1, h, w});
    for (size_t i = 0; i < raw.size(); ++i)
        split.images->data[i] = static_cast<float>(raw[i]) / 255.0f;
    split.labels.assign(lraw.begin(), lraw.end());
    split.num_classes = 1 + *std::max_element(split.labels.begin(), split.labels.end());
    if (split.num_classes < 2) split.num_classes = 2;
    split.name = images_path;
    return split;
}

void save_idx(const DatasetSplit& split, const std::string& images_path,
              const std::string& labels_path) {
    split.validate();
    if (split.images->shape[1] != 1)
        throw ArgumentError("save_idx: only single-channel images are supported");
    const int n = split.images->shape[0];
    const int h = split.images->shape[2];
    const int w = split.images->shape[3];

    std::ofstream imgs(images_path, std::ios::binary);
    if (!imgs) throw IoError("cannot open " + images_path + " for writing");
    write_be32(imgs, kIdxImagesMagic);
    write_be32(imgs, static_cast<std::uint32_t>(n));
    write_be32(imgs, static_cast<std::uint32_t>(h));
    write_be32(imgs, static_cast<std::uint32_t>(w));
    for (float v : split.images->data) {
        const float c = std::clamp(v, 0.0f, 1.0f);
        const unsigned char byte = static_cast<unsigned char>(std::lround(c * 255.0f));
        imgs.write(reinterpret_cast<const char*>(&byte), 1);
    }
    if (!imgs) throw IoError("failed writing " + images_path);

    std::ofstream lbls(labels_path, std::ios::binary);
    if (!lbls) throw IoError("cannot open " + labels_path + " for writing");
    write_be32(lbls, kIdxLabelsMagic);
    write_be32(lbls, static_cast<std::uint32_t>(n));
    for (int l : split.labels) {
        const unsigned char byte = static_cast<unsigned char>(l);
        lbls.write(reinterpret_cast<const char*>(&byte), 1);
    }
    if (!lbls) throw IoError("failed writing " + labels_path);
}

DatasetSplit load_cifar10(const std::vector<std::string>& batch_paths) {
    if (batch_paths.empty()) throw ArgumentError("load_cifar10: no batch files given");
    constexpr int kRecord = 3073;
    constexpr int kPixels = 3072;

    std::vector<unsigned char> all;
    for (const auto& path : batch_paths) {
        auto in = open_read(path);
        in.seekg(0, std::ios::end);
        const auto len = static_cast<std::streamsize>(in.tellg());
        in.seekg(0, std::ios::beg);
        if (len == 0) {
            std::fputs(("warning: " + path + " is empty, skipping\n").c_str(), stderr);
            continue;
        }
        if (len < 0 || len % kRecord != 0)
            throw ParseError(path + ": size is not a multiple of " + std::to_string(kRecord));
        const size_t off = all.size();
        all.resize(off + static_cast<size_t>(len));
        in.read(reinterpret_cast<char*>(all.data() + off), len);
        if (in.gcount() != len) throw ParseError(path + ": truncated read");
    }

    const int n = static_cast<int>(all.size()) / kRecord;
    DatasetSplit split;
    split.images = Tensor::make({n, 3, 32, 32});
    split.labels.resize(n);
    split.num_classes = 10;
    split.name = batch_paths.front();
    for (int i = 0; i < n; ++i) {
        const unsigned char* rec = all.data() + static_cast<size_t>(i) * kRecord;
        if (rec[0] > 9) throw ParseError("CIFAR-10 label out of range in record " +
                                         std::to_string(i));
        split.labels[i] = rec[0];
        float* dst = split.images->data.data() + static_cast<size_t>(i) * kPixels;
        for (int p = 0; p < kPixels; ++p) dst[p] = static_cast<float>(rec[1 + p]) / 255.0f;
    }
    return split;
}

namespace {

struct Canvas {
    float* px;
    int s;
    void set(int y, int x, float v) {
        if (y >= 0 && y < s && x >= 0 && x < s) {
            float& p = px[static_cast<size_t>(y) * s + x];
            p = std::max(p, v);
        }
    }
};

void draw_shape(Canvas& c, int cls, int cy, int cx, int half, float v) {
    switch (cls) {
        case 0:  // horizontal bar
            for (int x = cx - half; x <= cx + half; ++x)
                for (int t = 0; t < 2; ++t) c.set(cy + t, x, v);
            break;
        case 1:  // vertical bar
            for (int y = cy - half; y <= cy + half; ++y)
                for (int t = 0; t < 2; ++t) c.set(y, cx + t, v);
            break;
        case 2:  // cross
            draw_shape(c, 0, cy, cx, half, v);
            draw_shape(c, 1, cy, cx, half, v);
            break;
        case 3:  // box outline
            for (int x = cx - half; x <= cx + half; ++x) {
                c.set(cy - half, x, v);
                c.set(cy + half, x, v);
            }
            for (int y = cy - half; y <= cy + half; ++y) {
                c.set(y, cx - half, v);
                c.set(y, cx + half, v);
            }
            break;
        case 4:  // main diagonal
            for (int t = -half; t <= half; ++t) {
                c.set(cy + t, cx + t, v);
                c.set(cy + t + 1, cx + t, v);
            }
            break;
        case 5:  // anti diagonal
            for (int t = -half; t <= half; ++t) {
                c.set(cy + t, cx - t, v);
                c.set(cy + t + 1, cx - t, v);
            }
            break;
        case 6: {  // filled disc
            const int r = std::max(2, half - 1);
            for (int y = cy - r; y <= cy + r; ++y)
                for (int x = cx - r; x <= cx + r; ++x)
                    if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) c.set(y, x, v);
            break;
        }
        case 7:  // tee
            for (int x = cx - half; x <= cx + half; ++x) c.set(cy - half, x, v);
            for (int y = cy - half; y <= cy + half; ++y) c.set(y, cx, v);
            break;
        default:
            throw ArgumentError("synth_dataset: unsupported shape class " +
                                std::to_string(cls));
    }
}

}  // namespace

DatasetSplit synth_dataset(int n, int image_size, int num_classes, std::uint64_t seed) {
    if (n < 1) throw ArgumentError("synth_dataset: n must be positive");
    if (image_size < 19) throw ArgumentError("synth_dataset: image_size must be at least 19");
    if (num_classes < 2 || num_classes > 8)
        throw ArgumentError("synth_dataset: num_classes must be in [2, 8]");

    Rng rng(seed);
    DatasetSplit split;
    split.images = Tensor::make({n, 1, image_size, image_size});
    split.labels.resize(n);
    split.num_classes = num_classes;
    split.name = "synth";

    const int half = image_size / 4;
    const int span = image_size - 2 * half;  // center range keeping shapes on-canvas
    for (int i = 0; i < n; ++i) {
        const int cls = i % num_classes;
        split.labels[i] = cls;
        Canvas c{split.images->data.data() +
                     static_cast<size_t>(i) * image_size * image_size,
                 image_size};
        for (size_t p = 0; p < static_cast<size_t>(image_size) * image_size; ++p)
            c.px[p] = 0.08f * rng.uniform_f();
        const int cy = half + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));
        const int cx = half + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));
        const float v = 0.7f + 0.3f * rng.uniform_f();
        draw_shape(c, cls, cy, cx, half, v);
    }
    return split;
}

DatasetSplit subset(const DatasetSplit& split, int count) {
    if (count < 1 || count > split.size())
        throw ArgumentError("subset: count out of range");
    DatasetSplit out;
    const size_t per = split.images->size() / split.size();
    out.images = Tensor::make({count, split.images->shape[1], split.images->shape[2],
                               split.images->shape[3]});
    std::copy_n(split.images->data.begin(), per * count, out.images->data.begin());
    out.labels.assign(split.labels.begin(), split.labels.begin() + count);
    out.num_classes = split.num_classes;
    out.name = split.name;
    return out;
}

std::pair<TensorPtr, std::vector<int>> make_batch(const DatasetSplit& split, const int* indices,
                                                  int count) {
    if (count < 1) throw ArgumentError("make_batch: count must be positive");
    const size_t per = split.images->size() / split.size();
    auto images = Tensor::make({count, split.images->shape[1], split.images->shape[2],
                                split.images->shape[3]});
    std::vector<int> labels(count);
    for (int i = 0; i < count; ++i) {
        const int src = indices[i];
        if (src < 0 || src >= split.size())
            throw ArgumentError("make_batch: index out of range");
        std::copy_n(split.images->data.begin() + per * src, per,
                    images->data.begin() + per * i);
        labels[i] = split.labels[src];
    }
    return {images, labels};
}

}  // namespace capsprune
