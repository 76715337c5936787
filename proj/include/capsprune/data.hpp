#pragma once

#include <string>
#include <utility>
#include <vector>

#include "capsprune/rng.hpp"
#include "capsprune/tensor.hpp"

namespace capsprune {

struct DatasetSplit {
    TensorPtr images;        // [N, C, H, W], values in [0, 1], H == W
    std::vector<int> labels;
    int num_classes = 0;
    std::string name;

    int size() const { return images ? images->shape[0] : 0; }
    void validate() const;
};

// IDX (big-endian) ubyte files: rank-3 images, rank-1 labels.
DatasetSplit load_idx(const std::string& images_path, const std::string& labels_path);
void save_idx(const DatasetSplit& split, const std::string& images_path,
              const std::string& labels_path);

// CIFAR-10 binary batches: 3073-byte records, label byte then 3x32x32 planes.
DatasetSplit load_cifar10(const std::vector<std::string>& batch_paths);

// Deterministic grayscale shapes (bars, cross, box, diagonals, disc, tee) with
// jittered placement and intensity. Supports 2..8 classes; labels are balanced.
DatasetSplit synth_dataset(int n, int image_size, int num_classes, std::uint64_t seed);

DatasetSplit subset(const DatasetSplit& split, int count);

// Copies the selected samples into a contiguous batch.
std::pair<TensorPtr, std::vector<int>> make_batch(const DatasetSplit& split, const int* indices,
                                                  int count);

}  // namespace capsprune
