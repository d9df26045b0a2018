#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fae/tensor.hpp"

namespace fae {

// One patch-feature grid. `values` is [grid_h*grid_w, feature_dim] row-major
// over tokens; grid dims live in the owning file/spec.
struct EmbeddingGrid {
    std::string image_id;
    std::optional<std::int32_t> label;
    Tensor values;
};

enum class FaebDtype : std::uint8_t { F32 = 0, F64 = 1 };

// "FAEB" container: header (magic, version, dtype, grid dims, feature dim,
// label flag, count), length-prefixed records, trailing CRC32 of the record
// region. Also reused for latent manifests with feature_dim = latent_dim.
struct FaebFile {
    int grid_h = 0;
    int grid_w = 0;
    int feature_dim = 0;
    bool has_labels = false;
    FaebDtype dtype = FaebDtype::F64;
    std::vector<EmbeddingGrid> records;
};

void write_faeb(const std::string& path, const FaebFile& file, bool force = true);
FaebFile load_faeb(const std::string& path);

} // namespace fae
