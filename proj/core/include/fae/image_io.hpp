#pragma once

#include <string>
#include <vector>

#include "fae/metrics.hpp"
#include "fae/tensor.hpp"

namespace fae {

// Binary PPM (P6, maxval 255) from [3,H,W] values; clamped to [0,1] here.
void write_ppm(const std::string& path, const Tensor& image, bool force = true);
// Binary PGM (P5) from [H,W] values in [lo,hi].
void write_pgm(const std::string& path, const Tensor& gray, real lo, real hi,
               bool force = true);

// Tiles images (all [3,H,W]) into one sheet, `cols` per row.
Tensor tile_images(const std::vector<Tensor>& images, int cols);

// Upscaled similarity map with the query patch outlined.
Tensor similarity_map_image(const SimilarityMap& map, int cell = 8);

} // namespace fae
