#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "diver/optim.hpp"
#include "diver/tensor.hpp"

namespace diver {

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

// DCP container: magic "DCP1", u32 version, length-prefixed config text, u64
// entry count, then per entry a length-prefixed UTF-8 name, u8 dtype tag
// (0 = f64, 1 = f32), u8 rank, u64 dims, little-endian payload.
struct Checkpoint {
    std::string config_text;
    std::vector<std::pair<std::string, Tensor>> entries;
};

void save_checkpoint(const std::string& path, const std::string& config_text,
                     const std::vector<NamedParam>& params);

Checkpoint load_checkpoint(const std::string& path);

// Copies checkpoint values into matching named parameters. Every parameter
// must be present with an identical shape.
void load_into(const Checkpoint& ckpt, const std::vector<NamedParam>& params);

}  // namespace diver
