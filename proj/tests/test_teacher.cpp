#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "fae/binio.hpp"
#include "fae/metrics.hpp"
#include "fae/teacher.hpp"

using namespace fae;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

TeacherSpec desk_spec() {
    TeacherSpec spec;
    spec.grid_h = 4;
    spec.grid_w = 4;
    spec.feature_dim = 32;
    spec.num_heads = 2;
    spec.seed = 99;
    return spec;
}

} // namespace

TEST_CASE("synth_image deterministic per (class, seed, size)") {
    Tensor a = synth_image(3, 12345, 32);
    Tensor b = synth_image(3, 12345, 32);
    REQUIRE(a.shape == b.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.v[i] == b.v[i]);
}

TEST_CASE("synth_image range and shape contract") {
    Tensor img = synth_image(0, 7, 32);
    CHECK(img.shape == Shape{3, 32, 32});
    for (real v : img.v) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("different classes differ in more than 10 percent of pixels") {
    const int size = 32;
    Tensor a = synth_image(0, 42, size);
    Tensor b = synth_image(1, 42, size);
    int differing = 0;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            for (int c = 0; c < 3; ++c) {
                const std::size_t i = (static_cast<std::size_t>(c) * size + y) * size + x;
                if (std::abs(a.v[i] - b.v[i]) > 1.0 / 255.0) {
                    ++differing;
                    break;
                }
            }
        }
    CHECK(static_cast<real>(differing) / (size * size) > 0.10);
}

TEST_CASE("view jitter is small and view 0 matches synth_image") {
    Tensor base = synth_image(2, 77, 32);
    Tensor v0 = synth_image_view(2, 77, 0, 32);
    for (std::size_t i = 0; i < base.numel(); ++i) CHECK(base.v[i] == v0.v[i]);
    Tensor v1 = synth_image_view(2, 77, 1, 32);
    bool any_diff = false;
    for (std::size_t i = 0; i < base.numel(); ++i)
        if (base.v[i] != v1.v[i]) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("mask marks the procedural object") {
    Tensor mask = synth_image_mask(1, 5, 0, 32);
    real fg = 0.0;
    for (real v : mask.v) fg += v;
    const real frac = fg / mask.numel();
    CHECK(frac > 0.03);
    CHECK(frac < 0.6);
}

TEST_CASE("teacher embed is deterministic and frozen") {
    Teacher teacher(desk_spec());
    Tensor img = synth_image(1, 3, 16);
    EmbeddingGrid a = teacher.embed(img);
    const std::uint32_t fp0 = teacher.weight_fingerprint();
    EmbeddingGrid b = teacher.embed(img);
    CHECK(teacher.weight_fingerprint() == fp0);
    REQUIRE(a.values.shape == b.values.shape);
    for (std::size_t i = 0; i < a.values.numel(); ++i) CHECK(a.values.v[i] == b.values.v[i]);
    CHECK(a.values.rows() == 16);
    CHECK(a.values.cols() == 32);
    CHECK(a.values.all_finite());
}

TEST_CASE("teacher rejects non-divisible image size") {
    Teacher teacher(desk_spec());
    Tensor img({3, 15, 15});
    CHECK_THROWS_AS(teacher.embed(img), Error);
}

TEST_CASE("identical patch content gives top cosine when positional mixing is off") {
    TeacherSpec spec = desk_spec();
    spec.positional_mixing = false;
    Teacher teacher(spec);
    // Image with two identical flat patches and otherwise varied content.
    const int size = 16, patch = 4;
    Rng rng(5);
    Tensor img({3, size, size});
    rng.fill_uniform(img, 0.0, 1.0);
    auto set_patch = [&](int gy, int gx, real r, real g, real b) {
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < patch; ++y)
                for (int x = 0; x < patch; ++x)
                    img.v[(static_cast<std::size_t>(c) * size + gy * patch + y) * size +
                          gx * patch + x] = c == 0 ? r : (c == 1 ? g : b);
    };
    set_patch(0, 0, 0.8, 0.1, 0.3);
    set_patch(3, 3, 0.8, 0.1, 0.3);
    EmbeddingGrid emb = teacher.embed(img);
    const int d = emb.values.cols();
    const real twin = cosine(emb.values.data(), emb.values.data() + 15 * d, d);
    real best_other = -2.0;
    for (int t = 1; t < 15; ++t)
        best_other =
            std::max(best_other, cosine(emb.values.data(), emb.values.data() + t * d, d));
    CHECK(twin >= best_other - 1e-6);
}

TEST_CASE("all-zero image gives identical patch embeddings without positional mixing") {
    TeacherSpec spec = desk_spec();
    spec.positional_mixing = false;
    Teacher teacher(spec);
    Tensor img({3, 16, 16}, 0.0);
    EmbeddingGrid emb = teacher.embed(img);
    const int d = emb.values.cols();
    for (int t = 1; t < emb.values.rows(); ++t)
        for (int c = 0; c < d; ++c)
            CHECK(emb.values.at(t, c) == doctest::Approx(emb.values.at(0, c)).epsilon(1e-12));
}

TEST_CASE("register variant keeps the grid shape") {
    TeacherSpec spec = desk_spec();
    spec.num_registers = 4;
    Teacher teacher(spec);
    Tensor img = synth_image(0, 1, 16);
    EmbeddingGrid emb = teacher.embed(img);
    CHECK(emb.values.rows() == 16);
}

TEST_CASE("embedding_norm_stats examples") {
    FaebFile file;
    file.grid_h = 1;
    file.grid_w = 2;
    file.feature_dim = 2;
    SUBCASE("single grid with uniform norm 2") {
        EmbeddingGrid g;
        g.image_id = "a";
        g.values = Tensor({2, 2}, {2, 0, 0, 2});
        file.records.push_back(g);
        CHECK(embedding_norm_stats(file) == doctest::Approx(2.0));
    }
    SUBCASE("two grids with norms 1 and 3 average to 2") {
        EmbeddingGrid g1, g2;
        g1.image_id = "a";
        g1.values = Tensor({2, 2}, {1, 0, 0, 1});
        g2.image_id = "b";
        g2.values = Tensor({2, 2}, {3, 0, 0, 3});
        file.records.push_back(g1);
        file.records.push_back(g2);
        CHECK(embedding_norm_stats(file) == doctest::Approx(2.0));
    }
    SUBCASE("empty manifest rejected") { CHECK_THROWS_AS(embedding_norm_stats(file), Error); }
}

TEST_CASE("norm stats match an independent scalar pass on a synthetic manifest") {
    Teacher teacher(desk_spec());
    DatasetManifest m = make_manifest(4, 24, "train", 7, 16);
    FaebFile file = embed_manifest(teacher, m);
    const real got = embedding_norm_stats(file);

    real sum = 0.0;
    std::size_t count = 0;
    for (const auto& rec : file.records)
        for (int t = 0; t < rec.values.rows(); ++t) {
            real ss = 0.0;
            for (int j = 0; j < rec.values.cols(); ++j)
                ss += rec.values.at(t, j) * rec.values.at(t, j);
            sum += std::sqrt(ss);
            ++count;
        }
    CHECK(std::abs(got - sum / count) < 1e-9);
}

TEST_CASE("embed_manifest parallel workers agree with sequential") {
    Teacher teacher(desk_spec());
    DatasetManifest m = make_manifest(4, 12, "train", 3, 16);
    FaebFile seq = embed_manifest(teacher, m, 1);
    FaebFile par = embed_manifest(teacher, m, 4);
    REQUIRE(seq.records.size() == par.records.size());
    for (std::size_t i = 0; i < seq.records.size(); ++i)
        for (std::size_t j = 0; j < seq.records[i].values.numel(); ++j)
            CHECK(seq.records[i].values.v[j] == par.records[i].values.v[j]);
}

TEST_CASE("faeb round-trip is bit exact") {
    FaebFile file;
    file.grid_h = 2;
    file.grid_w = 2;
    file.feature_dim = 3;
    file.has_labels = true;
    Rng rng(11);
    for (int i = 0; i < 3; ++i) {
        EmbeddingGrid g;
        g.image_id = "img" + std::to_string(i);
        g.label = i;
        g.values = Tensor({4, 3});
        rng.fill_normal(g.values);
        file.records.push_back(g);
    }
    const std::string path = tmp_path("fae_test_roundtrip.faeb");
    write_faeb(path, file);
    FaebFile loaded = load_faeb(path);
    REQUIRE(loaded.records.size() == 3);
    CHECK(loaded.grid_h == 2);
    CHECK(loaded.has_labels);
    for (int i = 0; i < 3; ++i) {
        CHECK(loaded.records[i].image_id == file.records[i].image_id);
        CHECK(*loaded.records[i].label == i);
        for (std::size_t j = 0; j < file.records[i].values.numel(); ++j)
            CHECK(loaded.records[i].values.v[j] == file.records[i].values.v[j]);
    }
    std::remove(path.c_str());
}

TEST_CASE("faeb writer refuses non-finite values") {
    FaebFile file;
    file.grid_h = 1;
    file.grid_w = 1;
    file.feature_dim = 2;
    EmbeddingGrid g;
    g.image_id = "bad";
    g.values = Tensor({1, 2}, {1.0, std::numeric_limits<real>::quiet_NaN()});
    file.records.push_back(g);
    CHECK_THROWS_AS(write_faeb(tmp_path("fae_test_nan.faeb"), file), Error);
}

TEST_CASE("faeb corruption fixtures") {
    FaebFile file;
    file.grid_h = 1;
    file.grid_w = 2;
    file.feature_dim = 2;
    EmbeddingGrid g;
    g.image_id = "x";
    g.values = Tensor({2, 2}, {1, 2, 3, 4});
    file.records.push_back(g);
    const std::string path = tmp_path("fae_test_corrupt.faeb");
    write_faeb(path, file);
    auto bytes = read_file_bytes(path);

    SUBCASE("corrupted magic reported at offset 0") {
        bytes[0] = 'X';
        write_file_atomic(path, bytes.data(), bytes.size());
        try {
            load_faeb(path);
            FAIL("expected format error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::Format);
            CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
        }
    }
    SUBCASE("header count mismatch reported with offset") {
        // Bump the u64 record count (offset 22) without adding payload.
        bytes[22] = 2;
        write_file_atomic(path, bytes.data(), bytes.size());
        try {
            load_faeb(path);
            FAIL("expected format error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::Format);
            CHECK(std::string(e.what()).find("offset") != std::string::npos);
        }
    }
    SUBCASE("payload corruption breaks the checksum") {
        bytes[bytes.size() - 10] ^= 0x40;
        write_file_atomic(path, bytes.data(), bytes.size());
        try {
            load_faeb(path);
            FAIL("expected format error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::Format);
            CHECK(std::string(e.what()).find("CRC") != std::string::npos);
        }
    }
    std::remove(path.c_str());
}

TEST_CASE("manifest round-trip and id parsing") {
    DatasetManifest m = make_manifest(8, 20, "val", 123, 32);
    CHECK(m.records.size() == 20);
    const std::string path = tmp_path("fae_test_manifest.txt");
    write_manifest(path, m);
    DatasetManifest loaded = load_manifest(path);
    CHECK(loaded.num_classes == 8);
    CHECK(loaded.split == "val");
    CHECK(loaded.seed == 123);
    CHECK(loaded.records.size() == 20);
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        CHECK(loaded.records[i].image_id == m.records[i].image_id);
        const ImageIdParts p = parse_image_id(loaded.records[i].image_id);
        CHECK(p.class_label == loaded.records[i].class_label);
    }
    std::remove(path.c_str());
}
