#include "fae/checkpoint.hpp"

#include <cstring>

#include "fae/binio.hpp"

namespace fae {

static constexpr char kMagic[4] = {'F', 'A', 'E', 'C'};
static constexpr std::uint32_t kVersion = 1;

static void write_tensor(ByteWriter& w, const std::string& name, const Tensor& t) {
    if (name.size() > 0xffff) throw format_error("checkpoint: tensor name too long");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.str(name);
    w.u8(1);  // dtype: f64
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (int d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    for (real x : t.v) w.f64(x);
}

static std::pair<std::string, Tensor> read_tensor(ByteReader& r, const std::string& path) {
    const std::uint16_t nlen = r.u16();
    std::string name = r.str(nlen);
    const std::uint8_t dtype = r.u8();
    if (dtype != 1)
        throw format_error(path + ": unsupported tensor dtype " + std::to_string(dtype) +
                           " at offset " + std::to_string(r.offset() - 1));
    const std::uint8_t ndim = r.u8();
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<int>(r.u32());
    Tensor t(shape);
    for (real& x : t.v) x = r.f64();
    return {std::move(name), std::move(t)};
}

void save_checkpoint(const std::string& path, const Checkpoint& ck, bool force) {
    ByteWriter w;
    w.bytes(kMagic, 4);
    w.u32(kVersion);
    w.u32(static_cast<std::uint32_t>(ck.config_text.size()));
    w.str(ck.config_text);

    w.u32(static_cast<std::uint32_t>(ck.params.size()));
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
        const ParamTensor& p = ck.params.at(i);
        write_tensor(w, p.name, p.value);
        w.u8(p.requires_grad ? 1 : 0);
    }

    w.u8(ck.has_optimizer ? 1 : 0);
    if (ck.has_optimizer) {
        w.u64(ck.optimizer_step);
        std::uint32_t n_moments = 0;
        for (std::size_t i = 0; i < ck.params.size(); ++i)
            if (ck.opt_m.count(ck.params.at(i).name)) ++n_moments;
        w.u32(n_moments);
        for (std::size_t i = 0; i < ck.params.size(); ++i) {
            const std::string& name = ck.params.at(i).name;
            auto mit = ck.opt_m.find(name);
            if (mit == ck.opt_m.end()) continue;
            write_tensor(w, name, mit->second);
            write_tensor(w, name, ck.opt_v.at(name));
        }
    }

    w.u32(static_cast<std::uint32_t>(ck.rng_state.size()));
    w.str(ck.rng_state);

    const std::uint32_t crc = crc32_bytes(w.data().data() + 4, w.size() - 4);
    w.u32(crc);
    write_file_atomic(path, w.data().data(), w.size(), force);
}

Checkpoint load_checkpoint(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw format_error(path + ": bad magic at offset 0");
    {
        const std::uint32_t crc = crc32_bytes(bytes.data() + 4, bytes.size() - 8);
        std::uint32_t stored;
        std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
        if (crc != stored)
            throw format_error(path + ": CRC mismatch at offset " +
                               std::to_string(bytes.size() - 4));
    }
    ByteReader r(bytes.data(), bytes.size() - 4);
    r.raw(4);
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        throw format_error(path + ": unsupported version " + std::to_string(version));

    Checkpoint ck;
    const std::uint32_t cfg_len = r.u32();
    ck.config_text = r.str(cfg_len);

    const std::uint32_t n_params = r.u32();
    for (std::uint32_t i = 0; i < n_params; ++i) {
        auto [name, t] = read_tensor(r, path);
        const bool requires_grad = r.u8() != 0;
        ck.params.add(name, std::move(t), requires_grad);
    }

    ck.has_optimizer = r.u8() != 0;
    if (ck.has_optimizer) {
        ck.optimizer_step = r.u64();
        const std::uint32_t n_moments = r.u32();
        for (std::uint32_t i = 0; i < n_moments; ++i) {
            auto [mname, m] = read_tensor(r, path);
            auto [vname, v] = read_tensor(r, path);
            if (mname != vname)
                throw format_error(path + ": optimizer moment name mismatch at offset " +
                                   std::to_string(r.offset()));
            ck.opt_m.emplace(mname, std::move(m));
            ck.opt_v.emplace(vname, std::move(v));
        }
    }

    const std::uint32_t rng_len = r.u32();
    ck.rng_state = r.str(rng_len);
    if (r.remaining() != 0)
        throw format_error(path + ": trailing bytes at offset " + std::to_string(r.offset()));
    return ck;
}

Checkpoint make_checkpoint(const std::string& config_text, const ParamStore& params,
                           const AdamW* opt, const std::string& rng_state) {
    Checkpoint ck;
    ck.config_text = config_text;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const ParamTensor& p = params.at(i);
        ck.params.add(p.name, p.value, p.requires_grad);
    }
    if (opt) {
        ck.has_optimizer = true;
        ck.optimizer_step = static_cast<std::uint64_t>(opt->step_count());
        ck.opt_m = const_cast<AdamW*>(opt)->moments1();
        ck.opt_v = const_cast<AdamW*>(opt)->moments2();
    }
    ck.rng_state = rng_state;
    return ck;
}

void restore_optimizer(const Checkpoint& ck, AdamW& opt) {
    if (!ck.has_optimizer) return;
    opt.set_step_count(static_cast<int>(ck.optimizer_step));
    opt.moments1() = ck.opt_m;
    opt.moments2() = ck.opt_v;
}

} // namespace fae
