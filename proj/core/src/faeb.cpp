#include "fae/faeb.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include <zlib.h>

#include "fae/binio.hpp"

namespace fae {

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw io_error("cannot open " + path);
    std::fseek(f, 0, SEEK_END);
    const long sz = std::ftell(f);
    std::fseek(f, 0, SEEK_SET);
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(sz));
    if (sz > 0 && std::fread(buf.data(), 1, buf.size(), f) != buf.size()) {
        std::fclose(f);
        throw io_error("short read on " + path);
    }
    std::fclose(f);
    return buf;
}

void write_file_atomic(const std::string& path, const void* data, std::size_t n, bool force) {
    namespace fs = std::filesystem;
    if (!force && fs::exists(path))
        throw usage_error(path + " exists; pass --force to overwrite");
    const std::string tmp = path + ".tmp";
    std::FILE* f = std::fopen(tmp.c_str(), "wb");
    if (!f) throw io_error("cannot create " + tmp);
    if (n > 0 && std::fwrite(data, 1, n, f) != n) {
        std::fclose(f);
        std::remove(tmp.c_str());
        throw io_error("short write on " + tmp);
    }
    std::fclose(f);
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        std::remove(tmp.c_str());
        throw io_error("rename " + tmp + " -> " + path + ": " + ec.message());
    }
}

void write_text_atomic(const std::string& path, const std::string& text, bool force) {
    write_file_atomic(path, text.data(), text.size(), force);
}

std::uint32_t crc32_bytes(const void* data, std::size_t n) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, static_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

static constexpr char kMagic[4] = {'F', 'A', 'E', 'B'};
static constexpr std::uint32_t kVersion = 1;

void write_faeb(const std::string& path, const FaebFile& file, bool force) {
    const std::size_t tokens = static_cast<std::size_t>(file.grid_h) * file.grid_w;
    ByteWriter w;
    w.bytes(kMagic, 4);
    w.u32(kVersion);
    w.u8(static_cast<std::uint8_t>(file.dtype));
    w.u32(static_cast<std::uint32_t>(file.grid_h));
    w.u32(static_cast<std::uint32_t>(file.grid_w));
    w.u32(static_cast<std::uint32_t>(file.feature_dim));
    w.u8(file.has_labels ? 1 : 0);
    w.u64(file.records.size());

    const std::size_t payload_start = w.size();
    for (const auto& rec : file.records) {
        if (rec.values.rows() != static_cast<int>(tokens) ||
            rec.values.cols() != file.feature_dim)
            throw shape_error("write_faeb: record '" + rec.image_id + "' has shape " +
                              shape_str(rec.values.shape) + ", expected (" +
                              std::to_string(tokens) + "," + std::to_string(file.feature_dim) +
                              ")");
        if (rec.image_id.size() > 0xffff)
            throw format_error("write_faeb: image_id too long");
        w.u16(static_cast<std::uint16_t>(rec.image_id.size()));
        w.str(rec.image_id);
        if (file.has_labels) {
            if (!rec.label)
                throw format_error("write_faeb: labelled file but record '" + rec.image_id +
                                   "' has no label");
            w.i32(*rec.label);
        }
        for (real x : rec.values.v) {
            if (!std::isfinite(x))
                throw numeric_error("write_faeb: non-finite value in record '" + rec.image_id +
                                    "'");
            if (file.dtype == FaebDtype::F32)
                w.f32(static_cast<float>(x));
            else
                w.f64(x);
        }
    }
    const std::uint32_t crc =
        crc32_bytes(w.data().data() + payload_start, w.size() - payload_start);
    w.u32(crc);
    write_file_atomic(path, w.data().data(), w.size(), force);
}

FaebFile load_faeb(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    ByteReader r(bytes);
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw format_error(path + ": bad magic at offset 0");
    r.raw(4);
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        throw format_error(path + ": unsupported version " + std::to_string(version) +
                           " at offset 4");
    const std::uint8_t dtype_raw = r.u8();
    if (dtype_raw > 1)
        throw format_error(path + ": unknown dtype " + std::to_string(dtype_raw) +
                           " at offset 8");
    FaebFile file;
    file.dtype = static_cast<FaebDtype>(dtype_raw);
    file.grid_h = static_cast<int>(r.u32());
    file.grid_w = static_cast<int>(r.u32());
    file.feature_dim = static_cast<int>(r.u32());
    file.has_labels = r.u8() != 0;
    const std::uint64_t count = r.u64();
    const std::size_t payload_start = r.offset();

    if (bytes.size() < payload_start + 4)
        throw format_error(path + ": missing checksum at offset " +
                           std::to_string(bytes.size()));

    const std::size_t tokens = static_cast<std::size_t>(file.grid_h) * file.grid_w;
    file.records.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        if (r.remaining() < 4)
            throw format_error(path + ": header count " + std::to_string(count) +
                               " exceeds payload; record " + std::to_string(i) +
                               " missing at offset " + std::to_string(r.offset()));
        EmbeddingGrid rec;
        const std::uint16_t idlen = r.u16();
        rec.image_id = r.str(idlen);
        if (file.has_labels) rec.label = r.i32();
        rec.values = Tensor({static_cast<int>(tokens), file.feature_dim});
        const std::size_t nv = rec.values.numel();
        if (file.dtype == FaebDtype::F32) {
            if (r.remaining() < nv * 4 + 4)
                throw format_error(path + ": record " + std::to_string(i) +
                                   " payload truncated at offset " + std::to_string(r.offset()));
            for (std::size_t j = 0; j < nv; ++j) rec.values.v[j] = r.f32();
        } else {
            if (r.remaining() < nv * 8 + 4)
                throw format_error(path + ": record " + std::to_string(i) +
                                   " payload truncated at offset " + std::to_string(r.offset()));
            for (std::size_t j = 0; j < nv; ++j) rec.values.v[j] = r.f64();
        }
        file.records.push_back(std::move(rec));
    }
    const std::size_t payload_end = r.offset();
    const std::uint32_t stored_crc = r.u32();
    if (r.remaining() != 0)
        throw format_error(path + ": trailing bytes after checksum at offset " +
                           std::to_string(r.offset()));
    const std::uint32_t crc =
        crc32_bytes(bytes.data() + payload_start, payload_end - payload_start);
    if (crc != stored_crc)
        throw format_error(path + ": CRC mismatch at offset " + std::to_string(payload_end) +
                           " (stored " + std::to_string(stored_crc) + ", computed " +
                           std::to_string(crc) + ")");
    return file;
}

} // namespace fae
