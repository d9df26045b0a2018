#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>

#include "fae/binio.hpp"
#include "fae/config.hpp"
#include "fae/image_io.hpp"

using namespace fae;

namespace {
std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}
} // namespace

TEST_CASE("config round-trips canonically") {
    RunConfig cfg;
    cfg.seed = 1234;
    cfg.teacher.feature_dim = 64;
    cfg.fae.beta = 3.5e-5;
    cfg.sample.guidance = "0.9@0.9-1,2.5@0-0.7";
    const std::string text = cfg.serialize();
    RunConfig parsed = RunConfig::parse(text);
    CHECK(parsed.serialize() == text);
    CHECK(parsed.seed == 1234);
    CHECK(parsed.teacher.feature_dim == 64);
    CHECK(parsed.fae.beta == doctest::Approx(3.5e-5));
    // Parsing the canonical form twice is a fixed point.
    CHECK(RunConfig::parse(parsed.serialize()).serialize() == text);
}

TEST_CASE("config rejects unknown keys and sections") {
    CHECK_THROWS_AS(RunConfig::parse("bogus = 1\n"), Error);
    CHECK_THROWS_AS(RunConfig::parse("[nope]\nx = 1\n"), Error);
    CHECK_THROWS_AS(RunConfig::parse("[teacher]\nbogus = 1\n"), Error);
    CHECK_THROWS_AS(RunConfig::parse("[teacher]\ngrid_h : 8\n"), Error);
    CHECK_THROWS_AS(RunConfig::parse("[teacher]\ngrid_h = abc\n"), Error);
}

TEST_CASE("config accepts comments and blank lines") {
    RunConfig cfg = RunConfig::parse("# comment\n\nseed = 9\n[teacher]\n# another\ngrid_h = 4\n");
    CHECK(cfg.seed == 9);
    CHECK(cfg.teacher.grid_h == 4);
}

TEST_CASE("guidance string round trip and validation") {
    GuidanceSchedule sched = parse_guidance("0.9@0.9-1,2.5@0-0.7");
    REQUIRE(sched.segments.size() == 2);
    CHECK(sched.scale_at(0.95) == doctest::Approx(0.9));
    CHECK(sched.scale_at(0.8) == doctest::Approx(1.0));
    CHECK(sched.scale_at(0.5) == doctest::Approx(2.5));
    GuidanceSchedule again = parse_guidance(format_guidance(sched));
    CHECK(again.segments.size() == 2);
    CHECK_THROWS_AS(parse_guidance("1.5@0.5-0.2"), Error);
    CHECK_THROWS_AS(parse_guidance("garbage"), Error);
    CHECK(parse_guidance("").all_unit());
}

TEST_CASE("derived module configs are consistent") {
    RunConfig cfg;
    CHECK(cfg.encoder_config().input_dim == cfg.teacher.feature_dim);
    CHECK(cfg.feature_decoder_config().hidden_dim == cfg.teacher.feature_dim);
    CHECK(cfg.pixel_decoder_config().image_size == cfg.teacher.image_size);
    CHECK(cfg.gen_model_config(1, 1, 2).class_count == cfg.teacher.num_classes);
    // Stage streams must differ so stages are independently reproducible.
    CHECK(cfg.fae_train_config().seed != cfg.ldm_train_config().seed);
    CHECK(cfg.pixel_train_config(1).seed != cfg.pixel_train_config(2).seed);
}

TEST_CASE("ppm and pgm writers produce well-formed headers") {
    Tensor img({3, 4, 5}, 0.5);
    const std::string ppm = tmp_path("fae_test.ppm");
    write_ppm(ppm, img);
    auto bytes = read_file_bytes(ppm);
    CHECK(bytes.size() == 11 + 4 * 5 * 3);
    CHECK(bytes[0] == 'P');
    CHECK(bytes[1] == '6');
    std::remove(ppm.c_str());

    Tensor gray({4, 4}, 0.0);
    const std::string pgm = tmp_path("fae_test.pgm");
    write_pgm(pgm, gray, -1.0, 1.0);
    auto gb = read_file_bytes(pgm);
    CHECK(gb[0] == 'P');
    CHECK(gb[1] == '5');
    // -1 in a [-1,1] range maps to byte 0; 0 maps to 128.
    CHECK(gb[gb.size() - 1] == 128);
    std::remove(pgm.c_str());
}

TEST_CASE("tile_images shapes a sheet") {
    std::vector<Tensor> imgs(5, Tensor({3, 8, 8}, 0.3));
    Tensor sheet = tile_images(imgs, 3);
    CHECK(sheet.dim(0) == 3);
    CHECK(sheet.dim(1) == 2 * (8 + 2) + 2);
    CHECK(sheet.dim(2) == 3 * (8 + 2) + 2);
}

TEST_CASE("similarity map image outlines the query") {
    SimilarityMap map;
    map.query_row = 1;
    map.query_col = 0;
    map.values = Tensor({2, 2}, {0.0, 0.5, -0.5, 1.0});
    Tensor img = similarity_map_image(map, 4);
    CHECK(img.dim(0) == 8);
    CHECK(img.dim(1) == 8);
    // Query cell border painted with the max value.
    CHECK(img.v[4 * 8 + 0] == 1.0);
}

TEST_CASE("atomic write honors the force flag") {
    const std::string path = tmp_path("fae_test_force.txt");
    write_text_atomic(path, "a", true);
    CHECK_THROWS_AS(write_text_atomic(path, "b", false), Error);
    write_text_atomic(path, "c", true);
    auto bytes = read_file_bytes(path);
    CHECK(bytes.size() == 1);
    CHECK(bytes[0] == 'c');
    std::remove(path.c_str());
}
