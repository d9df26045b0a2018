#include "fae/image_io.hpp"

#include <algorithm>
#include <cmath>

#include "fae/binio.hpp"

namespace fae {

static std::uint8_t to_byte(real x) {
    const real c = std::min<real>(1.0, std::max<real>(0.0, x));
    return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

void write_ppm(const std::string& path, const Tensor& image, bool force) {
    if (image.ndim() != 3 || image.dim(0) != 3)
        throw shape_error("write_ppm: image must be [3,H,W]");
    const int h = image.dim(1), w = image.dim(2);
    std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<std::uint8_t> buf(header.size() + static_cast<std::size_t>(h) * w * 3);
    std::copy(header.begin(), header.end(), buf.begin());
    std::size_t o = header.size();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                buf[o++] = to_byte(image.v[(static_cast<std::size_t>(c) * h + y) * w + x]);
    write_file_atomic(path, buf.data(), buf.size(), force);
}

void write_pgm(const std::string& path, const Tensor& gray, real lo, real hi, bool force) {
    if (gray.ndim() != 2) throw shape_error("write_pgm: image must be [H,W]");
    if (hi <= lo) throw usage_error("write_pgm: empty value range");
    const int h = gray.dim(0), w = gray.dim(1);
    std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<std::uint8_t> buf(header.size() + static_cast<std::size_t>(h) * w);
    std::copy(header.begin(), header.end(), buf.begin());
    std::size_t o = header.size();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            buf[o++] = to_byte((gray.v[static_cast<std::size_t>(y) * w + x] - lo) / (hi - lo));
    write_file_atomic(path, buf.data(), buf.size(), force);
}

Tensor tile_images(const std::vector<Tensor>& images, int cols) {
    if (images.empty()) throw usage_error("tile_images: no images");
    const int h = images[0].dim(1), w = images[0].dim(2);
    for (const auto& im : images)
        if (im.ndim() != 3 || im.dim(0) != 3 || im.dim(1) != h || im.dim(2) != w)
            throw shape_error("tile_images: inconsistent image shapes");
    cols = std::max(1, std::min<int>(cols, static_cast<int>(images.size())));
    const int rows = (static_cast<int>(images.size()) + cols - 1) / cols;
    const int pad = 2;
    const int sh = rows * (h + pad) + pad;
    const int sw = cols * (w + pad) + pad;
    Tensor sheet({3, sh, sw}, 1.0);
    for (std::size_t i = 0; i < images.size(); ++i) {
        const int r = static_cast<int>(i) / cols;
        const int c = static_cast<int>(i) % cols;
        const int y0 = pad + r * (h + pad);
        const int x0 = pad + c * (w + pad);
        for (int ch = 0; ch < 3; ++ch)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    sheet.v[(static_cast<std::size_t>(ch) * sh + y0 + y) * sw + x0 + x] =
                        images[i].v[(static_cast<std::size_t>(ch) * h + y) * w + x];
    }
    return sheet;
}

Tensor similarity_map_image(const SimilarityMap& map, int cell) {
    const int gh = map.values.dim(0), gw = map.values.dim(1);
    const int h = gh * cell, w = gw * cell;
    Tensor img({h, w});
    for (int r = 0; r < gh; ++r)
        for (int c = 0; c < gw; ++c) {
            const real v = (map.values.at(r, c) + 1.0) * 0.5;
            for (int y = 0; y < cell; ++y)
                for (int x = 0; x < cell; ++x)
                    img.v[static_cast<std::size_t>(r * cell + y) * w + c * cell + x] = v;
        }
    // Outline the query cell.
    const int qy = map.query_row * cell, qx = map.query_col * cell;
    for (int i = 0; i < cell; ++i) {
        img.v[static_cast<std::size_t>(qy) * w + qx + i] = 1.0;
        img.v[static_cast<std::size_t>(qy + cell - 1) * w + qx + i] = 1.0;
        img.v[static_cast<std::size_t>(qy + i) * w + qx] = 1.0;
        img.v[static_cast<std::size_t>(qy + i) * w + qx + cell - 1] = 1.0;
    }
    return img;
}

} // namespace fae
