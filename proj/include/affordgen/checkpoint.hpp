#pragma once

#include <string>
#include <utility>
#include <vector>

#include "affordgen/tensor.hpp"

namespace afford {

// Checkpoint container: named tensors in file order.
// File layout: magic "AFLB1"; then per entry: u64 name length, name bytes,
// u64 rank, u64 dims[rank], float64 values -- all little-endian.
struct CheckpointData {
    std::vector<std::pair<std::string, Tensor>> entries;

    const Tensor* find(const std::string& name) const;
    void add(std::string name, Tensor value);
};

void save_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& path);

} // namespace afford
