#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "fae/metrics.hpp"
#include "fae/rng.hpp"
#include "fae/teacher.hpp"

using namespace fae;

namespace {

// Scalar-loop cosine oracle.
real ref_cosine(const Tensor& g, int a, int b) {
    real aa = 0, bb = 0, ab = 0;
    for (int j = 0; j < g.cols(); ++j) {
        aa += g.at(a, j) * g.at(a, j);
        bb += g.at(b, j) * g.at(b, j);
        ab += g.at(a, j) * g.at(b, j);
    }
    return ab / std::sqrt(aa * bb);
}

} // namespace

TEST_CASE("similarity map self-similarity is one") {
    Rng rng(1);
    Tensor grid({16, 8});
    rng.fill_normal(grid);
    SimilarityMap map = patch_similarity_map(grid, 4, 4, 1, 2);
    CHECK(map.values.at(1, 2) == doctest::Approx(1.0).epsilon(1e-6));
    for (real v : map.values.v) {
        CHECK(v >= -1.0 - 1e-9);
        CHECK(v <= 1.0 + 1e-9);
    }
}

TEST_CASE("two identical patches both score one") {
    Rng rng(3);
    Tensor grid({4, 5});
    rng.fill_normal(grid);
    for (int j = 0; j < 5; ++j) grid.at(3, j) = grid.at(0, j);
    SimilarityMap map = patch_similarity_map(grid, 2, 2, 0, 0);
    CHECK(map.values.at(1, 1) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("similarity map matches the scalar cosine oracle") {
    Rng rng(5);
    Tensor grid({9, 7});
    rng.fill_normal(grid);
    SimilarityMap map = patch_similarity_map(grid, 3, 3, 2, 1);
    const int q = 2 * 3 + 1;
    for (int t = 0; t < 9; ++t)
        CHECK(std::abs(map.values.v[t] - ref_cosine(grid, q, t)) < 1e-10);
}

TEST_CASE("zero-norm patch raises a numeric error naming the patch") {
    Tensor grid({4, 3}, 0.0);
    grid.at(0, 0) = 1.0;
    try {
        patch_similarity_map(grid, 2, 2, 0, 0);
        FAIL("expected numeric error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Numeric);
        CHECK(std::string(e.what()).find("(0,1)") != std::string::npos);
    }
}

TEST_CASE("similarity preservation is exact under isometry") {
    Rng rng(7);
    const int n = 16, d = 6;
    Tensor orig({n, d});
    rng.fill_normal(orig);
    // Random rotation via Gram-Schmidt on a random matrix.
    Tensor q({d, d});
    rng.fill_normal(q);
    for (int c = 0; c < d; ++c) {
        for (int prev = 0; prev < c; ++prev) {
            real dot = 0;
            for (int r = 0; r < d; ++r) dot += q.at(r, c) * q.at(r, prev);
            for (int r = 0; r < d; ++r) q.at(r, c) -= dot * q.at(r, prev);
        }
        real norm = 0;
        for (int r = 0; r < d; ++r) norm += q.at(r, c) * q.at(r, c);
        norm = std::sqrt(norm);
        for (int r = 0; r < d; ++r) q.at(r, c) /= norm;
    }
    Tensor lat({n, d});
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < d; ++c) {
            real s = 0;
            for (int r = 0; r < d; ++r) s += orig.at(i, r) * q.at(r, c);
            lat.at(i, c) = s;
        }
    CHECK(similarity_preservation(orig, lat) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("similarity preservation is near zero for independent random latents") {
    Rng rng(11);
    const int n = 256, d = 16;
    Tensor orig({n, d}), lat({n, d});
    rng.fill_normal(orig);
    rng.fill_normal(lat);
    const real corr = similarity_preservation(orig, lat);
    CHECK(std::abs(corr) <= 0.1);
}

TEST_CASE("spearman handles ties via average ranks") {
    std::vector<real> a = {1, 2, 2, 3};
    std::vector<real> b = {10, 20, 20, 30};
    CHECK(spearman_correlation(a, b) == doctest::Approx(1.0));
    std::vector<real> c = {3, 2, 2, 1};
    CHECK(spearman_correlation(a, c) == doctest::Approx(-1.0));
}

TEST_CASE("kmeans separates two well-split blobs") {
    Rng rng(13);
    Tensor pts({40, 2});
    for (int i = 0; i < 40; ++i) {
        const real cx = i < 20 ? -3.0 : 3.0;
        pts.at(i, 0) = cx + 0.2 * rng.normal();
        pts.at(i, 1) = 0.2 * rng.normal();
    }
    auto assign = kmeans_assign(pts, 2, 17);
    for (int i = 1; i < 20; ++i) CHECK(assign[i] == assign[0]);
    for (int i = 21; i < 40; ++i) CHECK(assign[i] == assign[20]);
    CHECK(assign[0] != assign[20]);
}

TEST_CASE("cross_image_match self-matching returns identical coordinates") {
    Rng rng(17);
    const int gh = 4, gw = 4, d = 8;
    Tensor grid({gh * gw, d});
    rng.fill_normal(grid);
    // Make four "foreground" patches far from the rest.
    for (int t : {5, 6, 9, 10})
        for (int j = 0; j < d; ++j) grid.at(t, j) += 6.0;
    MatchSet ms = cross_image_match(grid, grid, gh, gw, 2, 4, 23);
    CHECK(ms.pairs.size() == 4);
    for (const auto& p : ms.pairs) {
        CHECK(p.a_row == p.b_row);
        CHECK(p.a_col == p.b_col);
        CHECK(p.score == doctest::Approx(1.0).epsilon(1e-9));
    }
    // Pairs distinct in A coordinates.
    for (std::size_t i = 0; i < ms.pairs.size(); ++i)
        for (std::size_t j = i + 1; j < ms.pairs.size(); ++j)
            CHECK((ms.pairs[i].a_row != ms.pairs[j].a_row ||
                   ms.pairs[i].a_col != ms.pairs[j].a_col));
}

TEST_CASE("cross_image_match rejects k_clusters below 2") {
    Tensor grid({4, 2}, 1.0);
    CHECK_THROWS_AS(cross_image_match(grid, grid, 2, 2, 1, 2, 5), Error);
}

TEST_CASE("cross_image_match is deterministic per seed") {
    Rng rng(19);
    Tensor a({16, 6}), b({16, 6});
    rng.fill_normal(a);
    rng.fill_normal(b);
    for (int t : {1, 2, 5})
        for (int j = 0; j < 6; ++j) a.at(t, j) += 5.0;
    MatchSet m1 = cross_image_match(a, b, 4, 4, 2, 3, 31);
    MatchSet m2 = cross_image_match(a, b, 4, 4, 2, 3, 31);
    REQUIRE(m1.pairs.size() == m2.pairs.size());
    for (std::size_t i = 0; i < m1.pairs.size(); ++i) {
        CHECK(m1.pairs[i].a_row == m2.pairs[i].a_row);
        CHECK(m1.pairs[i].b_row == m2.pairs[i].b_row);
        CHECK(m1.pairs[i].score == m2.pairs[i].score);
    }
}

TEST_CASE("matched pairs land inside the shared-class object mask") {
    // Two images of the same class; match foreground patches of A into B and
    // check the landing patches against B's procedural mask.
    TeacherSpec spec;
    spec.grid_h = 8;
    spec.grid_w = 8;
    spec.feature_dim = 48;
    spec.num_heads = 2;
    spec.seed = 77;
    Teacher teacher(spec);
    const int size = 32;
    const int cls = 2;
    Tensor img_a = synth_image(cls, 1001, size);
    Tensor img_b = synth_image(cls, 2002, size);
    EmbeddingGrid ea = teacher.embed(img_a);
    EmbeddingGrid eb = teacher.embed(img_b);
    Tensor mask_b = synth_image_mask(cls, 2002, 0, size);

    MatchSet ms = cross_image_match(ea.values, eb.values, 8, 8, 2, 5, 41);
    const int patch = size / 8;
    int inside = 0;
    for (const auto& p : ms.pairs) {
        real frac = 0.0;
        for (int y = 0; y < patch; ++y)
            for (int x = 0; x < patch; ++x)
                frac += mask_b.v[static_cast<std::size_t>(p.b_row * patch + y) * size +
                                 p.b_col * patch + x];
        if (frac / (patch * patch) > 0.3) ++inside;
    }
    CHECK(static_cast<real>(inside) / ms.pairs.size() >= 0.75);
}

TEST_CASE("linear probe perfectly fits a separable training set") {
    Rng rng(23);
    const int n = 60, d = 4, c = 3;
    Tensor x({n, d});
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
        y[i] = i % c;
        for (int j = 0; j < d; ++j) x.at(i, j) = 0.3 * rng.normal();
        x.at(i, y[i]) += 4.0;
    }
    const real acc = linear_probe(x, y, x, y, c, 1e-4);
    CHECK(acc == doctest::Approx(1.0));
}

TEST_CASE("shuffled labels give chance-level accuracy") {
    Rng rng(29);
    const int n = 400, d = 6, c = 4;
    Tensor x({n, d});
    std::vector<int> y(n);
    rng.fill_normal(x);
    for (int i = 0; i < n; ++i) y[i] = static_cast<int>(rng.uniform_index(c));
    // Fresh test split with independently shuffled labels.
    Tensor xt({n, d});
    std::vector<int> yt(n);
    rng.fill_normal(xt);
    for (int i = 0; i < n; ++i) yt[i] = static_cast<int>(rng.uniform_index(c));
    const real acc = linear_probe(x, y, xt, yt, c, 1e-2);
    const real p = 1.0 / c;
    const real sigma = std::sqrt(p * (1 - p) / n);
    CHECK(std::abs(acc - p) <= 3.0 * sigma + 0.02);
}

TEST_CASE("probe rejects l2_reg 0 on a singular design") {
    // Duplicate feature columns make the design exactly singular.
    const int n = 20, d = 4, c = 2;
    Tensor x({n, d});
    std::vector<int> y(n);
    Rng rng(31);
    for (int i = 0; i < n; ++i) {
        y[i] = i % c;
        const real v = rng.normal();
        x.at(i, 0) = v;
        x.at(i, 1) = v;
        x.at(i, 2) = v;
        x.at(i, 3) = v;
    }
    CHECK_THROWS_AS(linear_probe(x, y, x, y, c, 0.0), Error);
}

TEST_CASE("probe predictions invariant under orthogonal feature maps") {
    Rng rng(37);
    const int n = 80, d = 5, c = 3;
    Tensor x({n, d}), xt({40, d});
    std::vector<int> y(n), yt(40);
    for (int i = 0; i < n; ++i) {
        y[i] = i % c;
        for (int j = 0; j < d; ++j) x.at(i, j) = rng.normal() + (j == y[i] ? 2.0 : 0.0);
    }
    for (int i = 0; i < 40; ++i) {
        yt[i] = i % c;
        for (int j = 0; j < d; ++j) xt.at(i, j) = rng.normal() + (j == yt[i] ? 2.0 : 0.0);
    }
    // Orthogonal map: permutation + sign flips.
    auto apply_map = [&](const Tensor& in) {
        Tensor out(in.shape);
        static const int perm[5] = {3, 0, 4, 2, 1};
        static const real sign[5] = {1, -1, 1, -1, 1};
        for (int i = 0; i < in.rows(); ++i)
            for (int j = 0; j < d; ++j) out.at(i, perm[j]) = sign[j] * in.at(i, j);
        return out;
    };
    ProbeResult base = linear_probe_fit(x, y, xt, yt, c, 1e-6);
    ProbeResult mapped = linear_probe_fit(apply_map(x), y, apply_map(xt), yt, c, 1e-6);
    int agree = 0;
    for (std::size_t i = 0; i < base.predictions.size(); ++i)
        if (base.predictions[i] == mapped.predictions[i]) ++agree;
    CHECK(static_cast<real>(agree) / base.predictions.size() >= 0.99);
}

TEST_CASE("retrieval trivial and separable cases") {
    SUBCASE("gallery equal to queries retrieves perfectly") {
        Rng rng(41);
        Tensor q({10, 6});
        rng.fill_normal(q);
        std::vector<int> gt(10);
        for (int i = 0; i < 10; ++i) gt[i] = i;
        RetrievalResult r = retrieval_top1(q, q, gt);
        CHECK(r.recall_query_to_gallery == doctest::Approx(1.0));
        CHECK(r.recall_gallery_to_query == doctest::Approx(1.0));
    }
    SUBCASE("orthogonal distractors retrieve perfectly") {
        const int n = 6;
        Tensor q({n, n}, 0.0), g({n, n}, 0.0);
        for (int i = 0; i < n; ++i) {
            q.at(i, i) = 1.0;
            g.at(i, i) = 0.5;
        }
        std::vector<int> gt(n);
        for (int i = 0; i < n; ++i) gt[i] = i;
        RetrievalResult r = retrieval_top1(q, g, gt);
        CHECK(r.recall_query_to_gallery == doctest::Approx(1.0));
        CHECK(r.recall_gallery_to_query == doctest::Approx(1.0));
    }
    SUBCASE("empty gallery rejected") {
        Tensor q({2, 3}, 1.0), g({0, 3});
        CHECK_THROWS_AS(retrieval_top1(q, g, {0, 0}), Error);
    }
}

TEST_CASE("frechet distance closed forms") {
    SUBCASE("identical stats give zero") {
        Rng rng(43);
        Tensor samples({200, 4});
        rng.fill_normal(samples);
        GaussianStats st = gaussian_stats(samples);
        CHECK(frechet_distance(st, st) == doctest::Approx(0.0).epsilon(1e-6));
    }
    SUBCASE("equal covariance reduces to squared mean distance") {
        const int d = 3;
        GaussianStats a, b;
        a.count = b.count = 10;
        a.mean = Tensor({d}, {0, 0, 0});
        b.mean = Tensor({d}, {1.0, -2.0, 2.0});
        a.covariance = Tensor({d, d});
        for (int i = 0; i < d; ++i) a.covariance.at(i, i) = 0.7;
        b.covariance = a.covariance;
        CHECK(frechet_distance(a, b) == doctest::Approx(1.0 + 4.0 + 4.0).epsilon(1e-9));
    }
    SUBCASE("commuting diagonal covariances match the closed form") {
        const int d = 5;
        GaussianStats a, b;
        a.count = b.count = 10;
        a.mean = Tensor({d}, 0.0);
        b.mean = Tensor({d}, 0.0);
        a.covariance = Tensor({d, d});
        b.covariance = Tensor({d, d});
        for (int i = 0; i < d; ++i) {
            a.covariance.at(i, i) = 1.0;
            b.covariance.at(i, i) = 4.0;
        }
        // n (1 + 4 - 2*2) = n
        CHECK(frechet_distance(a, b) == doctest::Approx(static_cast<real>(d)).epsilon(1e-9));
    }
    SUBCASE("symmetry") {
        Rng rng(47);
        Tensor s1({100, 3}), s2({120, 3});
        rng.fill_normal(s1);
        rng.fill_normal(s2, 0.5, 2.0);
        GaussianStats a = gaussian_stats(s1);
        GaussianStats b = gaussian_stats(s2);
        CHECK(frechet_distance(a, b) == doctest::Approx(frechet_distance(b, a)).epsilon(1e-8));
    }
}

TEST_CASE("sym_eig recovers a known spectrum") {
    // Diagonalizable by construction: A = Q diag(5,2,1) Q^T with a rotation.
    Tensor a({2, 2}, {3.5, 1.5, 1.5, 3.5});  // eigenvalues 5 and 2
    Tensor vals, vecs;
    sym_eig(a, vals, vecs);
    std::vector<real> sorted = {vals.v[0], vals.v[1]};
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted[0] == doctest::Approx(2.0).epsilon(1e-10));
    CHECK(sorted[1] == doctest::Approx(5.0).epsilon(1e-10));
}

TEST_CASE("gaussian_stats validates inputs") {
    Tensor one({1, 3});
    CHECK_THROWS_AS(gaussian_stats(one), Error);
}
