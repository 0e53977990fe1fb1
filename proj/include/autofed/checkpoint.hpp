#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "autofed/tensor.hpp"

namespace autofed {

// Flat little-endian weight checkpoint: versioned header with the
// architecture fingerprint and an optional tag (translator direction),
// followed by the values in ParamStore registration order.
struct Checkpoint {
    std::uint32_t version = 1;
    std::uint64_t config_hash = 0;
    std::string tag;
    std::vector<double> values;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Loads into `params`, enforcing the architecture fingerprint.
void load_into(const Checkpoint& ckpt, ParamStore& params, std::uint64_t expected_hash);

}  // namespace autofed
