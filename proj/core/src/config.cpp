#include "fae/config.hpp"

#include <cstdio>
#include <functional>
#include <sstream>

#include "fae/binio.hpp"
#include "fae/trainer.hpp"

namespace fae {

namespace {

struct Field {
    std::string section;  // "" for globals
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

bool parse_bool(const std::string& s, const std::string& key) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw config_error("config: bad boolean for " + key + ": '" + s + "'");
}

int parse_int(const std::string& s, const std::string& key) {
    try {
        std::size_t pos = 0;
        const int v = std::stoi(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw config_error("config: bad integer for " + key + ": '" + s + "'");
    }
}

std::uint64_t parse_u64(const std::string& s, const std::string& key) {
    try {
        std::size_t pos = 0;
        const std::uint64_t v = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw config_error("config: bad integer for " + key + ": '" + s + "'");
    }
}

real parse_real(const std::string& s, const std::string& key) {
    try {
        std::size_t pos = 0;
        const real v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw config_error("config: bad number for " + key + ": '" + s + "'");
    }
}

#define F_INT(sec, name, ref)                                                              \
    {sec, name, [](const RunConfig& c) { return std::to_string(c.ref); },                  \
     [](RunConfig& c, const std::string& s) { c.ref = parse_int(s, name); }}
#define F_U64(sec, name, ref)                                                              \
    {sec, name, [](const RunConfig& c) { return std::to_string(c.ref); },                  \
     [](RunConfig& c, const std::string& s) { c.ref = parse_u64(s, name); }}
#define F_REAL(sec, name, ref)                                                             \
    {sec, name, [](const RunConfig& c) { return format_real(c.ref); },                     \
     [](RunConfig& c, const std::string& s) { c.ref = parse_real(s, name); }}
#define F_BOOL(sec, name, ref)                                                             \
    {sec, name, [](const RunConfig& c) { return fmt_bool(c.ref); },                        \
     [](RunConfig& c, const std::string& s) { c.ref = parse_bool(s, name); }}
#define F_STR(sec, name, ref)                                                              \
    {sec, name, [](const RunConfig& c) { return c.ref; },                                  \
     [](RunConfig& c, const std::string& s) { c.ref = s; }}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        F_U64("", "seed", seed),
        F_INT("", "workers", workers),

        F_INT("teacher", "grid_h", teacher.grid_h),
        F_INT("teacher", "grid_w", teacher.grid_w),
        F_INT("teacher", "feature_dim", teacher.feature_dim),
        F_INT("teacher", "num_heads", teacher.num_heads),
        F_INT("teacher", "depth", teacher.depth),
        F_BOOL("teacher", "positional_mixing", teacher.positional_mixing),
        F_BOOL("teacher", "standardize", teacher.standardize),
        F_INT("teacher", "registers", teacher.registers),
        F_INT("teacher", "image_size", teacher.image_size),
        F_INT("teacher", "num_classes", teacher.num_classes),
        F_INT("teacher", "train_count", teacher.train_count),
        F_INT("teacher", "val_count", teacher.val_count),

        F_STR("fae", "variant", fae.variant),
        F_INT("fae", "num_heads", fae.num_heads),
        F_INT("fae", "head_dim", fae.head_dim),
        F_INT("fae", "latent_dim", fae.latent_dim),
        F_INT("fae", "decoder_depth", fae.decoder_depth),
        F_INT("fae", "decoder_heads", fae.decoder_heads),
        F_REAL("fae", "beta", fae.beta),
        F_INT("fae", "steps", fae.steps),
        F_INT("fae", "batch_size", fae.batch_size),
        F_REAL("fae", "lr", fae.lr),
        F_INT("fae", "warmup", fae.warmup),
        F_STR("fae", "schedule", fae.schedule),
        F_REAL("fae", "weight_decay", fae.weight_decay),

        F_INT("pixel", "depth", pixel.depth),
        F_INT("pixel", "hidden_dim", pixel.hidden_dim),
        F_INT("pixel", "num_heads", pixel.num_heads),
        F_INT("pixel", "patch_size", pixel.patch_size),
        F_REAL("pixel", "sigma_base", pixel.sigma_base),
        F_STR("pixel", "norm_scale_mode", pixel.norm_scale_mode),
        F_REAL("pixel", "reference_norm", pixel.reference_norm),
        F_REAL("pixel", "lambda_rec", pixel.lambda_rec),
        F_REAL("pixel", "lambda_perc", pixel.lambda_perc),
        F_REAL("pixel", "lambda_gan", pixel.lambda_gan),
        F_INT("pixel", "gan_start_step", pixel.gan_start_step),
        F_INT("pixel", "stage1_steps", pixel.stage1_steps),
        F_INT("pixel", "stage2_steps", pixel.stage2_steps),
        F_INT("pixel", "batch_size", pixel.batch_size),
        F_REAL("pixel", "lr", pixel.lr),
        F_INT("pixel", "warmup", pixel.warmup),
        F_STR("pixel", "schedule", pixel.schedule),
        F_REAL("pixel", "weight_decay", pixel.weight_decay),

        F_INT("ldm", "depth", ldm.depth),
        F_INT("ldm", "hidden_dim", ldm.hidden_dim),
        F_INT("ldm", "num_heads", ldm.num_heads),
        F_INT("ldm", "class_count", ldm.class_count),
        F_INT("ldm", "latent_grid_h", ldm.latent_grid_h),
        F_INT("ldm", "latent_grid_w", ldm.latent_grid_w),
        F_INT("ldm", "latent_dim", ldm.latent_dim),
        F_BOOL("ldm", "use_swiglu", ldm.use_swiglu),
        F_BOOL("ldm", "use_rope", ldm.use_rope),
        F_BOOL("ldm", "use_rmsnorm", ldm.use_rmsnorm),
        F_REAL("ldm", "cond_dropout", ldm.cond_dropout),
        F_REAL("ldm", "shift", ldm.shift),
        F_INT("ldm", "steps", ldm.steps),
        F_INT("ldm", "batch_size", ldm.batch_size),
        F_REAL("ldm", "lr", ldm.lr),
        F_INT("ldm", "warmup", ldm.warmup),
        F_STR("ldm", "schedule", ldm.schedule),
        F_REAL("ldm", "weight_decay", ldm.weight_decay),
        F_INT("ldm", "time_embed_dim", ldm.time_embed_dim),

        F_INT("sample", "n", sample.n),
        F_INT("sample", "steps", sample.steps),
        F_STR("sample", "mode", sample.mode),
        F_REAL("sample", "shift", sample.shift),
        F_STR("sample", "guidance", sample.guidance),
        F_INT("sample", "sheet_cols", sample.sheet_cols),

        F_REAL("probe", "l2_reg", probe.l2_reg),
        F_INT("probe", "k_clusters", probe.k_clusters),
        F_INT("probe", "n_pairs", probe.n_pairs),
        F_INT("probe", "query_row", probe.query_row),
        F_INT("probe", "query_col", probe.query_col),
    };
    return table;
}

#undef F_INT
#undef F_U64
#undef F_REAL
#undef F_BOOL
#undef F_STR

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

LrSchedule parse_schedule(const std::string& s) {
    if (s == "cosine") return LrSchedule::Cosine;
    if (s == "constant") return LrSchedule::Constant;
    throw config_error("config: unknown lr schedule '" + s + "'");
}

} // namespace

std::string RunConfig::serialize() const {
    std::ostringstream os;
    os << "# fae run config (canonical)\n";
    std::string section = "\0uninit";
    for (const auto& f : fields()) {
        if (f.section != section) {
            section = f.section;
            if (!section.empty()) os << "\n[" << section << "]\n";
        }
        os << f.key << " = " << f.get(*this) << "\n";
    }
    return os.str();
}

RunConfig RunConfig::parse(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw config_error("config line " + std::to_string(lineno) +
                                   ": malformed section header");
            section = t.substr(1, t.size() - 2);
            bool known = false;
            for (const auto& f : fields())
                if (f.section == section) known = true;
            if (!known)
                throw config_error("config line " + std::to_string(lineno) +
                                   ": unknown section [" + section + "]");
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw config_error("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(t.substr(0, eq));
        const std::string val = trim(t.substr(eq + 1));
        bool found = false;
        for (const auto& f : fields()) {
            if (f.section == section && f.key == key) {
                f.set(cfg, val);
                found = true;
                break;
            }
        }
        if (!found)
            throw config_error("config line " + std::to_string(lineno) + ": unknown key '" +
                               (section.empty() ? key : section + "." + key) + "'");
    }
    return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    return parse(std::string(bytes.begin(), bytes.end()));
}

GuidanceSchedule parse_guidance(const std::string& text) {
    GuidanceSchedule sched;
    if (text.empty()) return sched;
    std::istringstream in(text);
    std::string part;
    while (std::getline(in, part, ',')) {
        double scale = 0, lo = 0, hi = 0;
        if (std::sscanf(part.c_str(), "%lf@%lf-%lf", &scale, &lo, &hi) != 3)
            throw config_error("guidance: bad segment '" + part + "' (want scale@lo-hi)");
        sched.segments.push_back({lo, hi, scale});
    }
    sched.validate();
    return sched;
}

std::string format_guidance(const GuidanceSchedule& sched) {
    std::string out;
    for (std::size_t i = 0; i < sched.segments.size(); ++i) {
        if (i) out += ",";
        const auto& s = sched.segments[i];
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%g@%g-%g", s.scale, s.t_low, s.t_high);
        out += buf;
    }
    return out;
}

TeacherSpec RunConfig::teacher_spec() const {
    TeacherSpec spec;
    spec.grid_h = teacher.grid_h;
    spec.grid_w = teacher.grid_w;
    spec.feature_dim = teacher.feature_dim;
    spec.seed = Rng::derive_key(seed, "teacher");
    spec.num_heads = teacher.num_heads;
    spec.depth = teacher.depth;
    spec.positional_mixing = teacher.positional_mixing;
    spec.standardize = teacher.standardize;
    spec.num_registers = teacher.registers;
    spec.validate();
    return spec;
}

EncoderConfig RunConfig::encoder_config() const {
    EncoderConfig base;
    base.input_dim = teacher.feature_dim;
    base.num_heads = fae.num_heads;
    base.head_dim = fae.head_dim;
    base.latent_dim = fae.latent_dim;
    return encoder_variant(fae.variant, base);
}

FeatureDecoderConfig RunConfig::feature_decoder_config() const {
    FeatureDecoderConfig cfg;
    cfg.depth = fae.decoder_depth;
    cfg.hidden_dim = teacher.feature_dim;
    cfg.num_heads = fae.decoder_heads;
    cfg.latent_dim = fae.latent_dim;
    cfg.validate();
    return cfg;
}

PixelDecoderConfig RunConfig::pixel_decoder_config() const {
    PixelDecoderConfig cfg;
    cfg.depth = pixel.depth;
    cfg.hidden_dim = pixel.hidden_dim;
    cfg.num_heads = pixel.num_heads;
    cfg.image_size = teacher.image_size;
    cfg.patch_size = pixel.patch_size;
    cfg.feature_dim = teacher.feature_dim;
    cfg.grid_h = teacher.grid_h;
    cfg.grid_w = teacher.grid_w;
    cfg.validate();
    return cfg;
}

NoiseStageConfig RunConfig::noise_config(real calibrated_reference) const {
    NoiseStageConfig cfg;
    cfg.sigma_base = pixel.sigma_base;
    if (pixel.norm_scale_mode == "fixed") {
        cfg.norm_scale_mode = NormScaleMode::Fixed;
    } else if (pixel.norm_scale_mode == "scaled") {
        cfg.norm_scale_mode = NormScaleMode::ScaledByMeanNorm;
    } else {
        throw config_error("config: pixel.norm_scale_mode must be fixed|scaled");
    }
    cfg.reference_norm = pixel.reference_norm > 0.0 ? pixel.reference_norm
                                                    : calibrated_reference;
    return cfg;
}

PixelLossWeights RunConfig::pixel_loss_weights() const {
    PixelLossWeights w;
    w.lambda_rec = pixel.lambda_rec;
    w.lambda_perc = pixel.lambda_perc;
    w.lambda_gan = pixel.lambda_gan;
    w.validate();
    return w;
}

GenModelConfig RunConfig::gen_model_config(int latent_grid_h, int latent_grid_w,
                                           int latent_dim) const {
    GenModelConfig cfg;
    cfg.depth = ldm.depth;
    cfg.hidden_dim = ldm.hidden_dim;
    cfg.num_heads = ldm.num_heads;
    cfg.latent_dim = latent_dim;
    cfg.grid_h = latent_grid_h;
    cfg.grid_w = latent_grid_w;
    cfg.class_count = ldm.class_count > 0 ? ldm.class_count : teacher.num_classes;
    cfg.use_swiglu = ldm.use_swiglu;
    cfg.use_rope = ldm.use_rope;
    cfg.use_rmsnorm = ldm.use_rmsnorm;
    cfg.cond_dropout_prob = ldm.cond_dropout;
    cfg.time_embed_dim = ldm.time_embed_dim;
    cfg.validate();
    return cfg;
}

GuidanceSchedule RunConfig::guidance_schedule() const { return parse_guidance(sample.guidance); }

static TrainConfig make_train(std::uint64_t seed, int workers, int steps, int batch, real lr,
                              int warmup, const std::string& schedule, real wd,
                              const std::string& stream) {
    TrainConfig t;
    t.steps = steps;
    t.batch_size = batch;
    t.seed = Rng::derive_key(seed, stream);
    t.workers = workers;
    t.optim.lr = lr;
    t.optim.warmup_steps = warmup;
    t.optim.total_steps = steps;
    t.optim.schedule = parse_schedule(schedule);
    t.optim.weight_decay = wd;
    return t;
}

TrainConfig RunConfig::fae_train_config() const {
    return make_train(seed, workers, fae.steps, fae.batch_size, fae.lr, fae.warmup,
                      fae.schedule, fae.weight_decay, "stage/fae");
}

TrainConfig RunConfig::pixel_train_config(int stage) const {
    const int steps = stage == 1 ? pixel.stage1_steps : pixel.stage2_steps;
    return make_train(seed, workers, steps, pixel.batch_size, pixel.lr, pixel.warmup,
                      pixel.schedule, pixel.weight_decay,
                      stage == 1 ? "stage/pixel1" : "stage/pixel2");
}

TrainConfig RunConfig::ldm_train_config() const {
    return make_train(seed, workers, ldm.steps, ldm.batch_size, ldm.lr, ldm.warmup,
                      ldm.schedule, ldm.weight_decay, "stage/ldm");
}

} // namespace fae
