#pragma once

#include <filesystem>
#include <stdexcept>

#include "tabgrade/codec.hpp"
#include "tabgrade/model.hpp"
#include "tabgrade/table.hpp"

namespace tabgrade {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr const char* kCheckpointVersion = "tabgrade-ckpt-1";

// Everything needed to sample from a trained model.
struct Checkpoint {
    ModelState model;
    Vocabulary vocab;
    Schema schema;
    TrainMode mode = TrainMode::Full;
};

// Writes <dir>/manifest.json and <dir>/tensors.bin (little-endian float64 in
// manifest order). The directory is assembled under a temporary name and
// renamed into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace tabgrade
