#include "fae/teacher.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include "fae/binio.hpp"
#include "fae/conv.hpp"

namespace fae {

void TeacherSpec::validate() const {
    if (grid_h * grid_w < 4) throw config_error("teacher: grid_h*grid_w must be >= 4");
    if (feature_dim < 8) throw config_error("teacher: feature_dim must be >= 8");
    if (feature_dim % num_heads != 0)
        throw config_error("teacher: feature_dim not divisible by num_heads");
    if (positional_mixing && (feature_dim / num_heads) % 4 != 0)
        throw config_error("teacher: positional mixing requires head_dim divisible by 4");
    if (num_registers != 0 && num_registers != 4)
        throw config_error("teacher: register variant uses 4 register tokens");
}

namespace {

inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline real hash_unit(std::uint64_t a, std::uint64_t b) {
    return static_cast<real>(mix64(a * 0x100000001b3ULL ^ mix64(b)) >> 11) * 0x1.0p-53;
}

void hsv_to_rgb(real h, real s, real v, real* rgb) {
    h = h - std::floor(h);
    const real c = v * s;
    const real hp = h * 6.0;
    const real x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    real r = 0, g = 0, b = 0;
    if (hp < 1)      { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else             { r = c; b = x; }
    const real m = v - c;
    rgb[0] = r + m;
    rgb[1] = g + m;
    rgb[2] = b + m;
}

struct ShapeParams {
    real cx, cy, radius, rot;
    int sides;
    bool star;
    real fg_hue, bg_hue;
    real inst_sat, inst_val;
    real tex_freq, tex_phase, tex_angle;
};

ShapeParams instance_params(int class_label, std::uint64_t instance_seed,
                            std::uint32_t view_seed) {
    Rng rng(mix64(instance_seed ^ (0x517cc1b727220a95ULL * (class_label + 1))));
    ShapeParams p;
    p.cx = 0.5 + 0.18 * (rng.uniform() * 2.0 - 1.0);
    p.cy = 0.5 + 0.18 * (rng.uniform() * 2.0 - 1.0);
    p.radius = 0.20 + 0.10 * rng.uniform();
    p.rot = 2.0 * M_PI * rng.uniform();
    p.tex_freq = 5.0 + 5.0 * rng.uniform();
    p.tex_phase = 2.0 * M_PI * rng.uniform();
    p.tex_angle = M_PI * rng.uniform();
    p.sides = 3 + (class_label % 4);
    p.star = ((class_label / 4) % 2) != 0;
    // Golden-ratio hue spacing keeps any class count distinguishable; the
    // background base color is a pure class cue (fixed saturation/value).
    p.fg_hue = std::fmod(0.61803398875 * class_label + 0.05, 1.0);
    p.bg_hue = std::fmod(p.fg_hue + 0.5 + 0.07 * (class_label % 3), 1.0);
    // Instance identity must survive cosine pooling, so it lives in angular
    // cues: a small hue wobble (well inside the class palette gaps), a mild
    // radial tint, and the stripe texture whose frequency/angle/phase are
    // instance-drawn. None of these are part of the view jitter.
    p.bg_hue = std::fmod(p.bg_hue + 0.03 * (rng.uniform() * 2.0 - 1.0) + 1.0, 1.0);
    p.inst_sat = 0.70 + 0.20 * rng.uniform();
    p.inst_val = 0.34 + 0.12 * rng.uniform();
    if (view_seed != 0) {
        Rng vr(mix64(instance_seed ^ (0x2545f4914f6cdd1dULL * view_seed)));
        p.cx += 0.012 * (vr.uniform() * 2.0 - 1.0);
        p.cy += 0.012 * (vr.uniform() * 2.0 - 1.0);
        p.rot += 0.05 * (vr.uniform() * 2.0 - 1.0);
        p.tex_phase += 0.1 * (vr.uniform() * 2.0 - 1.0);
    }
    return p;
}

// Signed boundary radius of the shape at polar angle phi.
real boundary_radius(const ShapeParams& p, real phi) {
    if (p.star) return p.radius * (0.78 + 0.22 * std::cos(p.sides * phi));
    const real sector = 2.0 * M_PI / p.sides;
    const real a = std::fmod(std::fmod(phi, sector) + sector, sector) - sector * 0.5;
    return p.radius * std::cos(M_PI / p.sides) / std::cos(a);
}

bool inside_shape(const ShapeParams& p, real nx, real ny) {
    const real dx = nx - p.cx;
    const real dy = ny - p.cy;
    const real d = std::sqrt(dx * dx + dy * dy);
    if (d < 1e-12) return true;
    const real phi = std::atan2(dy, dx) - p.rot;
    return d < boundary_radius(p, phi);
}

} // namespace

Tensor synth_image_view(int class_label, std::uint64_t instance_seed, std::uint32_t view_seed,
                        int size) {
    if (class_label < 0) throw usage_error("synth_image: class_label must be >= 0");
    if (size < 4) throw usage_error("synth_image: size must be >= 4");
    const ShapeParams p = instance_params(class_label, instance_seed, view_seed);

    Tensor img({3, size, size});
    real fg_base[3], bg_base[3];
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const real nx = (x + 0.5) / size;
            const real ny = (y + 0.5) / size;
            const real stripe =
                0.5 + 0.5 * std::sin(2.0 * M_PI * p.tex_freq *
                                         (nx * std::cos(p.tex_angle) +
                                          ny * std::sin(p.tex_angle)) +
                                     p.tex_phase);
            real rgb[3];
            if (inside_shape(p, nx, ny)) {
                hsv_to_rgb(p.fg_hue, 0.80, 0.50 + 0.40 * stripe, fg_base);
                rgb[0] = fg_base[0];
                rgb[1] = fg_base[1];
                rgb[2] = fg_base[2];
            } else {
                const real noise =
                    hash_unit(instance_seed, (static_cast<std::uint64_t>(y) << 32) | x);
                hsv_to_rgb(p.bg_hue, p.inst_sat,
                           p.inst_val + 0.10 * stripe + 0.02 * noise, bg_base);
                rgb[0] = bg_base[0];
                rgb[1] = bg_base[1];
                rgb[2] = bg_base[2];
            }
            for (int c = 0; c < 3; ++c) {
                const real v = std::min<real>(1.0, std::max<real>(0.0, rgb[c]));
                img.v[(static_cast<std::size_t>(c) * size + y) * size + x] = v;
            }
        }
    }
    return img;
}

Tensor synth_image(int class_label, std::uint64_t instance_seed, int size) {
    return synth_image_view(class_label, instance_seed, 0, size);
}

Tensor synth_image_mask(int class_label, std::uint64_t instance_seed, std::uint32_t view_seed,
                        int size) {
    const ShapeParams p = instance_params(class_label, instance_seed, view_seed);
    Tensor mask({size, size});
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            mask.v[static_cast<std::size_t>(y) * size + x] =
                inside_shape(p, (x + 0.5) / size, (y + 0.5) / size) ? 1.0 : 0.0;
    return mask;
}

std::string format_image_id(const ImageIdParts& parts) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "c%03d_s%016" PRIx64 "_v%u", parts.class_label,
                  parts.instance_seed, parts.view);
    return buf;
}

ImageIdParts parse_image_id(const std::string& image_id) {
    ImageIdParts p;
    unsigned view = 0;
    if (std::sscanf(image_id.c_str(), "c%d_s%16" SCNx64 "_v%u", &p.class_label,
                    &p.instance_seed, &view) != 3)
        throw format_error("unparseable image_id: " + image_id);
    p.view = view;
    return p;
}

DatasetManifest make_manifest(int num_classes, int count, const std::string& split,
                              std::uint64_t seed, int image_size) {
    if (num_classes < 1) throw usage_error("manifest: num_classes must be >= 1");
    DatasetManifest m;
    m.num_classes = num_classes;
    m.split = split;
    m.seed = seed;
    m.image_size = image_size;
    Rng rng = Rng(seed).stream("dataset/" + split);
    m.records.reserve(count);
    for (int i = 0; i < count; ++i) {
        ImageIdParts parts;
        parts.class_label = i % num_classes;
        parts.instance_seed = rng.next_u64();
        parts.view = 0;
        m.records.push_back({format_image_id(parts), parts.class_label});
    }
    return m;
}

void write_manifest(const std::string& path, const DatasetManifest& m, bool force) {
    std::ostringstream os;
    os << "# fae dataset manifest\n";
    os << "version = 1\n";
    os << "num_classes = " << m.num_classes << "\n";
    os << "split = " << m.split << "\n";
    os << "seed = " << m.seed << "\n";
    os << "image_size = " << m.image_size << "\n";
    os << "count = " << m.records.size() << "\n";
    for (const auto& r : m.records) os << r.image_id << "," << r.class_label << "\n";
    write_text_atomic(path, os.str(), force);
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open " + path);
    DatasetManifest m;
    std::string line;
    std::size_t expect = 0;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find(" = ");
        if (eq != std::string::npos) {
            const std::string key = line.substr(0, eq);
            const std::string val = line.substr(eq + 3);
            if (key == "version") {
                if (val != "1") throw format_error(path + ": unsupported manifest version");
            } else if (key == "num_classes") m.num_classes = std::stoi(val);
            else if (key == "split") m.split = val;
            else if (key == "seed") m.seed = std::stoull(val);
            else if (key == "image_size") m.image_size = std::stoi(val);
            else if (key == "count") expect = std::stoull(val);
            else throw format_error(path + ": unknown manifest key '" + key + "'");
            continue;
        }
        const auto comma = line.rfind(',');
        if (comma == std::string::npos)
            throw format_error(path + ": bad record line '" + line + "'");
        DatasetManifest::Record rec;
        rec.image_id = line.substr(0, comma);
        rec.class_label = std::stoi(line.substr(comma + 1));
        if (rec.class_label < 0 || rec.class_label >= m.num_classes)
            throw format_error(path + ": class label out of range in '" + line + "'");
        m.records.push_back(std::move(rec));
    }
    if (expect != 0 && expect != m.records.size())
        throw format_error(path + ": count " + std::to_string(expect) + " but " +
                           std::to_string(m.records.size()) + " records");
    for (std::size_t i = 0; i < m.records.size(); ++i)
        for (std::size_t j = i + 1; j < m.records.size() && j < i + 2; ++j)
            if (m.records[i].image_id == m.records[j].image_id)
                throw format_error(path + ": duplicate image_id " + m.records[i].image_id);
    return m;
}

Tensor image_for_record(const DatasetManifest::Record& rec, int image_size) {
    const ImageIdParts p = parse_image_id(rec.image_id);
    return synth_image_view(p.class_label, p.instance_seed, p.view, image_size);
}

// ---- frozen teacher ----

static std::vector<ParamSpec> teacher_param_specs(const TeacherSpec& spec, int patch_dim) {
    std::vector<ParamSpec> specs;
    specs.push_back({"teacher.patch.w", {patch_dim, spec.feature_dim}, Init::ScaledXavier});
    specs.push_back({"teacher.patch.b", {spec.feature_dim}, Init::Zero});
    if (spec.num_registers > 0)
        specs.push_back({"teacher.registers", {spec.num_registers, spec.feature_dim},
                         Init::ScaledXavier});
    BlockConfig blk;
    blk.hidden_dim = spec.feature_dim;
    blk.num_heads = spec.num_heads;
    blk.use_swiglu = true;
    blk.use_rmsnorm = true;
    blk.use_rope = spec.positional_mixing;
    for (int i = 0; i < spec.depth; ++i) {
        auto b = block_param_specs(blk, "teacher.block" + std::to_string(i));
        specs.insert(specs.end(), b.begin(), b.end());
    }
    return specs;
}

Teacher::Teacher(TeacherSpec spec) : spec_(spec) {
    spec_.validate();
    // The patch projection width depends on the pixel patch extent, which is
    // only known from the first image embedded; weights materialize then.
    positions_ = grid_positions(spec_.grid_h, spec_.grid_w, spec_.num_registers);
}

namespace {
int resolve_patch(const Tensor& image, const TeacherSpec& spec) {
    if (image.ndim() != 3 || image.dim(0) != 3)
        throw shape_error("teacher: image must be [3,H,W]");
    const int h = image.dim(1), w = image.dim(2);
    if (h % spec.grid_h != 0 || w % spec.grid_w != 0)
        throw shape_error("teacher: image " + std::to_string(h) + "x" + std::to_string(w) +
                          " not divisible by grid " + std::to_string(spec.grid_h) + "x" +
                          std::to_string(spec.grid_w));
    const int ph = h / spec.grid_h;
    const int pw = w / spec.grid_w;
    if (ph != pw) throw shape_error("teacher: non-square patches unsupported");
    return ph;
}
} // namespace

EmbeddingGrid Teacher::embed(const Tensor& image, const std::string& image_id,
                             std::optional<std::int32_t> label) const {
    const int patch = resolve_patch(image, spec_);
    const int patch_dim = 3 * patch * patch;
    if (weights_.size() == 0) {
        weights_.init_from_specs(teacher_param_specs(spec_, patch_dim),
                                 Rng(spec_.seed).stream("teacher"),
                                 /*requires_grad=*/false);
        if (spec_.standardize) calibrate_standardization(patch);
    } else if (weights_.get("teacher.patch.w").value.rows() != patch_dim) {
        throw shape_error("teacher: image patch width changed between calls");
    }

    ad::Autograd ctx;
    ad::Var img = ctx.constant(image);
    ad::Var tokens = ad::patchify(img, patch);
    ad::Var x = ad::linear(tokens, ctx.param(weights_.get("teacher.patch.w")),
                           ctx.param(weights_.get("teacher.patch.b")));
    if (spec_.num_registers > 0)
        x = ad::concat_rows(ctx.param(weights_.get("teacher.registers")), x);

    BlockConfig blk;
    blk.hidden_dim = spec_.feature_dim;
    blk.num_heads = spec_.num_heads;
    blk.use_swiglu = true;
    blk.use_rmsnorm = true;
    blk.use_rope = spec_.positional_mixing;
    for (int i = 0; i < spec_.depth; ++i)
        x = transformer_block(ctx, x, blk, weights_, "teacher.block" + std::to_string(i),
                              &positions_);

    EmbeddingGrid out;
    out.image_id = image_id;
    out.label = label;
    if (spec_.num_registers > 0) {
        const int n = spec_.grid_h * spec_.grid_w;
        Tensor vals({n, spec_.feature_dim});
        for (int t = 0; t < n; ++t)
            for (int d = 0; d < spec_.feature_dim; ++d)
                vals.at(t, d) = x.val().at(t + spec_.num_registers, d);
        out.values = std::move(vals);
    } else {
        out.values = x.val();
    }
    if (spec_.standardize && weights_.has("teacher.standardize.mean")) {
        const Tensor& mu = weights_.get("teacher.standardize.mean").value;
        const Tensor& sd = weights_.get("teacher.standardize.std").value;
        for (int t = 0; t < out.values.rows(); ++t)
            for (int d = 0; d < spec_.feature_dim; ++d)
                out.values.at(t, d) = (out.values.at(t, d) - mu.v[d]) / sd.v[d];
    }
    return out;
}

void Teacher::calibrate_standardization(int patch) const {
    // Per-dim moments over a fixed probe batch derived from the teacher seed;
    // the constants become part of the frozen weights, so embed stays a pure
    // function of (image, spec).
    const int size_h = spec_.grid_h * patch;
    const int calib_n = 32;
    Rng rng = Rng(spec_.seed).stream("teacher/standardize");
    Tensor mu({spec_.feature_dim});
    Tensor sd({spec_.feature_dim});
    std::vector<Tensor> grids;
    grids.reserve(calib_n);
    std::size_t count = 0;
    for (int i = 0; i < calib_n; ++i) {
        const Tensor img = synth_image(i % 8, rng.next_u64(), size_h);
        grids.push_back(embed(img).values);
        count += grids.back().rows();
    }
    for (const auto& g : grids)
        for (int t = 0; t < g.rows(); ++t)
            for (int d = 0; d < spec_.feature_dim; ++d) mu.v[d] += g.at(t, d);
    for (int d = 0; d < spec_.feature_dim; ++d) mu.v[d] /= static_cast<real>(count);
    for (const auto& g : grids)
        for (int t = 0; t < g.rows(); ++t)
            for (int d = 0; d < spec_.feature_dim; ++d) {
                const real dv = g.at(t, d) - mu.v[d];
                sd.v[d] += dv * dv;
            }
    for (int d = 0; d < spec_.feature_dim; ++d)
        sd.v[d] = std::sqrt(sd.v[d] / static_cast<real>(count) + 1e-12);
    weights_.add("teacher.standardize.mean", std::move(mu), /*requires_grad=*/false);
    weights_.add("teacher.standardize.std", std::move(sd), /*requires_grad=*/false);
}

std::uint32_t Teacher::weight_fingerprint() const {
    if (weights_.size() == 0) return 0;
    const Tensor flat = weights_.pack();
    return crc32_bytes(flat.v.data(), flat.v.size() * sizeof(real));
}

FaebFile embed_manifest(const Teacher& teacher, const DatasetManifest& m, int workers) {
    FaebFile file;
    file.grid_h = teacher.spec().grid_h;
    file.grid_w = teacher.spec().grid_w;
    file.feature_dim = teacher.spec().feature_dim;
    file.has_labels = true;
    file.records.resize(m.records.size());

    auto work = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const auto& rec = m.records[i];
            const Tensor img = image_for_record(rec, m.image_size);
            file.records[i] = teacher.embed(img, rec.image_id, rec.class_label);
        }
    };
    if (workers <= 1 || m.records.size() < 2) {
        work(0, m.records.size());
    } else {
        // First record resolves the lazily sized frozen weights before the
        // concurrent section.
        work(0, 1);
        const std::size_t n = m.records.size();
        const std::size_t w = std::min<std::size_t>(workers, n - 1);
        std::vector<std::thread> threads;
        const std::size_t chunk = (n - 1 + w - 1) / w;
        for (std::size_t t = 0; t < w; ++t) {
            const std::size_t lo = 1 + t * chunk;
            const std::size_t hi = std::min(n, lo + chunk);
            if (lo >= hi) break;
            threads.emplace_back(work, lo, hi);
        }
        for (auto& th : threads) th.join();
    }

    return file;
}

real embedding_norm_stats(const FaebFile& embeddings) {
    if (embeddings.records.empty())
        throw usage_error("embedding_norm_stats: empty manifest");
    real sum = 0.0;
    std::size_t count = 0;
    for (const auto& rec : embeddings.records) {
        for (int t = 0; t < rec.values.rows(); ++t) {
            real ss = 0.0;
            for (int j = 0; j < rec.values.cols(); ++j) {
                const real x = rec.values.at(t, j);
                ss += x * x;
            }
            sum += std::sqrt(ss);
            ++count;
        }
    }
    return sum / static_cast<real>(count);
}

} // namespace fae
