#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fae/tensor.hpp"

namespace fae {

// ---- patch similarity ----

struct SimilarityMap {
    int query_row = 0;
    int query_col = 0;
    Tensor values;  // [grid_h, grid_w], cosine in [-1, 1]
};

// Cosine similarity of every patch vector to the query patch.
SimilarityMap patch_similarity_map(const Tensor& grid, int grid_h, int grid_w, int query_row,
                                   int query_col);

// Mean Spearman rank correlation between per-query cosine rankings in the
// original space and the latent space. Degenerate (constant) similarity
// vectors are excluded; their count is reported via excluded_out.
real similarity_preservation(const Tensor& orig, const Tensor& lat, int* excluded_out = nullptr);

real spearman_correlation(const std::vector<real>& a, const std::vector<real>& b);

// ---- cross-image matching ----

struct MatchPair {
    int a_row = 0, a_col = 0;
    int b_row = 0, b_col = 0;
    real score = 0.0;
};

struct MatchSet {
    std::vector<MatchPair> pairs;
    int k_clusters = 0;
    int n_pairs = 0;
    std::vector<int> cluster_of_a;  // k-means assignment of image-A patches
    int foreground_cluster = -1;
};

// Seeded k-means (iteration cap 100) on image-A patches; the foreground
// cluster is the one whose centroid lies farthest from the mean embedding.
// n_pairs patches sampled from it match to argmax-cosine patches in B.
MatchSet cross_image_match(const Tensor& a, const Tensor& b, int grid_h, int grid_w,
                           int k_clusters, int n_pairs, std::uint64_t seed);

std::vector<int> kmeans_assign(const Tensor& points, int k, std::uint64_t seed,
                               int max_iter = 100);

// ---- linear probing ----

struct ProbeResult {
    real accuracy = 0.0;
    std::vector<int> predictions;
    Tensor weights;  // [d+1, classes], last row is the bias
};

// Full-batch multinomial logistic regression, Newton iterations to a 1e-6
// loss-delta tolerance. l2_reg = 0 on a singular design raises an error.
ProbeResult linear_probe_fit(const Tensor& train_x, const std::vector<int>& train_y,
                             const Tensor& test_x, const std::vector<int>& test_y,
                             int num_classes, real l2_reg);
real linear_probe(const Tensor& train_x, const std::vector<int>& train_y, const Tensor& test_x,
                  const std::vector<int>& test_y, int num_classes, real l2_reg);

// Mean over patch rows -> pooled per-image feature.
Tensor mean_pool_rows(const Tensor& grid);

// ---- retrieval ----

struct RetrievalResult {
    real recall_query_to_gallery = 0.0;
    real recall_gallery_to_query = 0.0;
};

// Argmax-cosine retrieval in both directions over the pair set
// (query i <-> gallery ground_truth[i]).
RetrievalResult retrieval_top1(const Tensor& queries, const Tensor& gallery,
                               const std::vector<int>& ground_truth);

// ---- Frechet proxy ----

struct GaussianStats {
    Tensor mean;        // [d]
    Tensor covariance;  // [d,d], symmetric PSD
    int count = 0;
    void validate() const;
};

GaussianStats gaussian_stats(const Tensor& samples);

// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}); matrix square root via
// symmetric eigendecomposition with a -1e-8 negative-eigenvalue clamp.
real frechet_distance(const GaussianStats& a, const GaussianStats& b);

// Cyclic Jacobi eigendecomposition of a symmetric matrix; eigvecs columns.
void sym_eig(const Tensor& m, Tensor& eigvals, Tensor& eigvecs);

real cosine(const real* a, const real* b, int d);

} // namespace fae
