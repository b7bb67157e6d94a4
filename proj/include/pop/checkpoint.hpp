#pragma once

#include <filesystem>

#include "pop/model.hpp"

namespace pop {

// Checkpoint layout:
//   "POPCKPT1" (8 bytes)
//   u32 little-endian length of the JSON header
//   UTF-8 JSON header: config fields plus
//     "tensors": [{"name", "shape", "offset", "count"}, ...]
//   raw little-endian doubles; offsets are bytes from the start of this section.
inline constexpr char kCheckpointMagic[8] = {'P', 'O', 'P', 'C', 'K', 'P', 'T', '1'};

void save_checkpoint(const ModelWeights& weights, const std::filesystem::path& path);

// Throws FileError if the file cannot be read and FormatError (naming the
// offending tensor where there is one) on bad magic, truncation, or a
// manifest that disagrees with the config or the data.
ModelWeights load_checkpoint(const std::filesystem::path& path);

}  // namespace pop
