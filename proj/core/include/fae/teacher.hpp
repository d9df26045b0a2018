#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fae/attention.hpp"
#include "fae/faeb.hpp"
#include "fae/params.hpp"
#include "fae/rng.hpp"

namespace fae {

// Frozen synthetic feature backbone standing in for a large pre-trained
// encoder. Weights derive deterministically from `seed` and are never
// trained.
struct TeacherSpec {
    int grid_h = 16;
    int grid_w = 16;
    int feature_dim = 1536;
    std::uint64_t seed = 0;
    real mean_norm = 0.0;  // per-patch L2 norm statistic, set by norm stats

    int num_heads = 4;
    int depth = 2;
    bool positional_mixing = true;  // rotary mixing in the frozen blocks
    // Per-dim standardization using constants self-calibrated from a fixed
    // probe batch at first use; removes the large shared feature component
    // so cosine-based metrics see the discriminative structure.
    bool standardize = false;
    int num_registers = 0;          // 4 in register variants

    void validate() const;
};

// ---- procedural dataset ----

// Class controls shape family and palette; instance seed controls pose and
// texture; the view seed applies a small pose jitter for paired-view tasks.
Tensor synth_image(int class_label, std::uint64_t instance_seed, int size);
Tensor synth_image_view(int class_label, std::uint64_t instance_seed, std::uint32_t view_seed,
                        int size);
// Foreground mask of the procedural object, [H,W] in {0,1}.
Tensor synth_image_mask(int class_label, std::uint64_t instance_seed, std::uint32_t view_seed,
                        int size);

struct DatasetManifest {
    struct Record {
        std::string image_id;  // "c<class>_s<instance_seed>_v<view>"
        int class_label = 0;
    };
    int num_classes = 0;
    std::string split = "train";
    std::uint64_t seed = 0;
    int image_size = 0;
    std::vector<Record> records;
};

DatasetManifest make_manifest(int num_classes, int count, const std::string& split,
                              std::uint64_t seed, int image_size);
void write_manifest(const std::string& path, const DatasetManifest& m, bool force = true);
DatasetManifest load_manifest(const std::string& path);

struct ImageIdParts {
    int class_label = 0;
    std::uint64_t instance_seed = 0;
    std::uint32_t view = 0;
};
ImageIdParts parse_image_id(const std::string& image_id);
std::string format_image_id(const ImageIdParts& parts);

Tensor image_for_record(const DatasetManifest::Record& rec, int image_size);

// ---- frozen teacher ----

class Teacher {
public:
    explicit Teacher(TeacherSpec spec);

    // image [3,H,W] with H,W divisible by the grid dims.
    EmbeddingGrid embed(const Tensor& image, const std::string& image_id = "",
                        std::optional<std::int32_t> label = {}) const;

    const TeacherSpec& spec() const { return spec_; }
    TeacherSpec& spec() { return spec_; }
    // Fingerprint of the frozen weights; tests assert it never changes.
    std::uint32_t weight_fingerprint() const;

private:
    void calibrate_standardization(int patch) const;

    TeacherSpec spec_;
    mutable ParamStore weights_;  // frozen; forward is logically const
    std::vector<GridPos> positions_;
};

// Embeds every record of a manifest and packages the result as a FaebFile.
FaebFile embed_manifest(const Teacher& teacher, const DatasetManifest& m, int workers = 1);

// Arithmetic mean of per-patch L2 norms over all records.
real embedding_norm_stats(const FaebFile& embeddings);

} // namespace fae
