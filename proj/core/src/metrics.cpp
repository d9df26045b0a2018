#include "fae/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fae/common.hpp"
#include "fae/rng.hpp"
#include "fae/trainer.hpp"

namespace fae {

real cosine(const real* a, const real* b, int d) {
    real aa = 0.0, bb = 0.0, ab = 0.0;
    for (int i = 0; i < d; ++i) {
        aa += a[i] * a[i];
        bb += b[i] * b[i];
        ab += a[i] * b[i];
    }
    const real denom = std::sqrt(aa * bb);
    if (denom == 0.0) throw numeric_error("cosine: zero-norm vector");
    return ab / denom;
}

SimilarityMap patch_similarity_map(const Tensor& grid, int grid_h, int grid_w, int query_row,
                                   int query_col) {
    if (grid.rows() != grid_h * grid_w)
        throw shape_error("patch_similarity_map: grid rows " + std::to_string(grid.rows()) +
                          " vs " + std::to_string(grid_h) + "x" + std::to_string(grid_w));
    if (query_row < 0 || query_row >= grid_h || query_col < 0 || query_col >= grid_w)
        throw usage_error("patch_similarity_map: query out of bounds");
    const int d = grid.cols();
    const int q = query_row * grid_w + query_col;
    const real* qv = grid.data() + static_cast<std::size_t>(q) * d;
    {
        real qq = 0.0;
        for (int i = 0; i < d; ++i) qq += qv[i] * qv[i];
        if (qq == 0.0)
            throw numeric_error("patch_similarity_map: zero-norm patch (" +
                                std::to_string(query_row) + "," + std::to_string(query_col) +
                                ")");
    }
    SimilarityMap out;
    out.query_row = query_row;
    out.query_col = query_col;
    out.values = Tensor({grid_h, grid_w});
    for (int t = 0; t < grid.rows(); ++t) {
        const real* pv = grid.data() + static_cast<std::size_t>(t) * d;
        real pp = 0.0;
        for (int i = 0; i < d; ++i) pp += pv[i] * pv[i];
        if (pp == 0.0)
            throw numeric_error("patch_similarity_map: zero-norm patch (" +
                                std::to_string(t / grid_w) + "," + std::to_string(t % grid_w) +
                                ")");
        out.values.v[t] = cosine(qv, pv, d);
    }
    return out;
}

static std::vector<real> ranks_of(const std::vector<real>& x) {
    const std::size_t n = x.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<real> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && x[idx[j + 1]] == x[idx[i]]) ++j;
        const real avg = 0.5 * (static_cast<real>(i) + static_cast<real>(j)) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

real spearman_correlation(const std::vector<real>& a, const std::vector<real>& b) {
    if (a.size() != b.size() || a.size() < 2)
        throw usage_error("spearman: need two equal-length vectors of size >= 2");
    const auto ra = ranks_of(a);
    const auto rb = ranks_of(b);
    real ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= ra.size();
    mb /= rb.size();
    real saa = 0.0, sbb = 0.0, sab = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        const real da = ra[i] - ma;
        const real db = rb[i] - mb;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    if (saa == 0.0 || sbb == 0.0)
        throw numeric_error("spearman: degenerate (constant) ranking");
    return sab / std::sqrt(saa * sbb);
}

real similarity_preservation(const Tensor& orig, const Tensor& lat, int* excluded_out) {
    if (orig.rows() != lat.rows())
        throw shape_error("similarity_preservation: token counts differ");
    const int n = orig.rows();
    if (n < 3) throw usage_error("similarity_preservation: need at least 3 patches");
    real sum = 0.0;
    int used = 0, excluded = 0;
    std::vector<real> so(n - 1), sl(n - 1);
    for (int q = 0; q < n; ++q) {
        int k = 0;
        for (int t = 0; t < n; ++t) {
            if (t == q) continue;
            so[k] = cosine(orig.data() + static_cast<std::size_t>(q) * orig.cols(),
                           orig.data() + static_cast<std::size_t>(t) * orig.cols(), orig.cols());
            sl[k] = cosine(lat.data() + static_cast<std::size_t>(q) * lat.cols(),
                           lat.data() + static_cast<std::size_t>(t) * lat.cols(), lat.cols());
            ++k;
        }
        const bool const_o = std::equal(so.begin() + 1, so.end(), so.begin());
        const bool const_l = std::equal(sl.begin() + 1, sl.end(), sl.begin());
        if (const_o || const_l) {
            ++excluded;
            log_info("similarity_preservation: query " + std::to_string(q) +
                     " gives a constant similarity vector; excluded");
            continue;
        }
        sum += spearman_correlation(so, sl);
        ++used;
    }
    if (excluded_out) *excluded_out = excluded;
    if (used == 0) throw numeric_error("similarity_preservation: all queries degenerate");
    return sum / used;
}

std::vector<int> kmeans_assign(const Tensor& points, int k, std::uint64_t seed, int max_iter) {
    const int n = points.rows(), d = points.cols();
    if (k < 1 || k > n) throw usage_error("kmeans: k out of range");
    Rng rng(seed);

    // k-means++ seeding.
    std::vector<int> centers_idx;
    centers_idx.push_back(static_cast<int>(rng.uniform_index(n)));
    std::vector<real> dist2(n, std::numeric_limits<real>::max());
    auto sqdist = [&](int i, int c) {
        const real* a = points.data() + static_cast<std::size_t>(i) * d;
        const real* b = points.data() + static_cast<std::size_t>(c) * d;
        real s = 0.0;
        for (int j = 0; j < d; ++j) {
            const real t = a[j] - b[j];
            s += t * t;
        }
        return s;
    };
    while (static_cast<int>(centers_idx.size()) < k) {
        real total = 0.0;
        for (int i = 0; i < n; ++i) {
            dist2[i] = std::min(dist2[i], sqdist(i, centers_idx.back()));
            total += dist2[i];
        }
        if (total <= 0.0) {
            centers_idx.push_back(static_cast<int>(rng.uniform_index(n)));
            continue;
        }
        real target = rng.uniform() * total;
        int pick = n - 1;
        for (int i = 0; i < n; ++i) {
            target -= dist2[i];
            if (target <= 0.0) {
                pick = i;
                break;
            }
        }
        centers_idx.push_back(pick);
    }

    Tensor centers({k, d});
    for (int c = 0; c < k; ++c)
        std::copy_n(points.data() + static_cast<std::size_t>(centers_idx[c]) * d, d,
                    centers.data() + static_cast<std::size_t>(c) * d);

    std::vector<int> assign(n, 0);
    for (int iter = 0; iter < max_iter; ++iter) {
        bool changed = false;
        for (int i = 0; i < n; ++i) {
            int best = 0;
            real best_d = std::numeric_limits<real>::max();
            for (int c = 0; c < k; ++c) {
                const real* cv = centers.data() + static_cast<std::size_t>(c) * d;
                const real* pv = points.data() + static_cast<std::size_t>(i) * d;
                real s = 0.0;
                for (int j = 0; j < d; ++j) {
                    const real t = pv[j] - cv[j];
                    s += t * t;
                }
                if (s < best_d) {
                    best_d = s;
                    best = c;
                }
            }
            if (assign[i] != best) {
                assign[i] = best;
                changed = true;
            }
        }
        centers.fill(0.0);
        std::vector<int> counts(k, 0);
        for (int i = 0; i < n; ++i) {
            real* cv = centers.data() + static_cast<std::size_t>(assign[i]) * d;
            const real* pv = points.data() + static_cast<std::size_t>(i) * d;
            for (int j = 0; j < d; ++j) cv[j] += pv[j];
            ++counts[assign[i]];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] == 0) continue;
            real* cv = centers.data() + static_cast<std::size_t>(c) * d;
            for (int j = 0; j < d; ++j) cv[j] /= counts[c];
        }
        if (!changed) break;
    }
    return assign;
}

MatchSet cross_image_match(const Tensor& a, const Tensor& b, int grid_h, int grid_w,
                           int k_clusters, int n_pairs, std::uint64_t seed) {
    if (k_clusters < 2) throw usage_error("cross_image_match: k_clusters must be >= 2");
    if (a.rows() != grid_h * grid_w || b.rows() != grid_h * grid_w)
        throw shape_error("cross_image_match: grids must be " + std::to_string(grid_h) + "x" +
                          std::to_string(grid_w));
    const int n = a.rows(), d = a.cols();

    MatchSet out;
    out.k_clusters = k_clusters;
    out.cluster_of_a = kmeans_assign(a, k_clusters, seed);

    // Mean embedding and per-cluster centroids.
    std::vector<real> mean(d, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) mean[j] += a.at(i, j);
    for (int j = 0; j < d; ++j) mean[j] /= n;

    std::vector<std::vector<real>> centroid(k_clusters, std::vector<real>(d, 0.0));
    std::vector<int> counts(k_clusters, 0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) centroid[out.cluster_of_a[i]][j] += a.at(i, j);
        ++counts[out.cluster_of_a[i]];
    }
    real best_dist = -1.0;
    for (int c = 0; c < k_clusters; ++c) {
        if (counts[c] == 0) continue;
        real s = 0.0;
        for (int j = 0; j < d; ++j) {
            const real t = centroid[c][j] / counts[c] - mean[j];
            s += t * t;
        }
        if (s > best_dist) {
            best_dist = s;
            out.foreground_cluster = c;
        }
    }
    std::vector<int> fg;
    for (int i = 0; i < n; ++i)
        if (out.cluster_of_a[i] == out.foreground_cluster) fg.push_back(i);
    if (fg.empty()) throw matching_error("cross_image_match: empty foreground cluster");
    if (n_pairs > static_cast<int>(fg.size()))
        throw matching_error("cross_image_match: n_pairs " + std::to_string(n_pairs) +
                             " exceeds foreground patch count " + std::to_string(fg.size()));

    // Seeded sample without replacement.
    Rng rng = Rng(seed).stream("match/sample");
    for (int i = static_cast<int>(fg.size()) - 1; i > 0; --i)
        std::swap(fg[i], fg[rng.uniform_index(i + 1)]);
    fg.resize(n_pairs);
    std::sort(fg.begin(), fg.end());

    out.n_pairs = n_pairs;
    for (int qi : fg) {
        const real* qv = a.data() + static_cast<std::size_t>(qi) * d;
        int best = 0;
        real best_s = -2.0;
        for (int t = 0; t < n; ++t) {
            const real s = cosine(qv, b.data() + static_cast<std::size_t>(t) * d, d);
            if (s > best_s) {
                best_s = s;
                best = t;
            }
        }
        MatchPair p;
        p.a_row = qi / grid_w;
        p.a_col = qi % grid_w;
        p.b_row = best / grid_w;
        p.b_col = best % grid_w;
        p.score = best_s;
        out.pairs.push_back(p);
    }
    return out;
}

// ---- linear probe ----

Tensor mean_pool_rows(const Tensor& grid) {
    const int n = grid.rows(), d = grid.cols();
    Tensor out({d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out.v[j] += grid.at(i, j);
    for (int j = 0; j < d; ++j) out.v[j] /= n;
    return out;
}

namespace {

// Dense Cholesky solve; returns false when the matrix is not positive
// definite.
bool cholesky_solve(Tensor& m, std::vector<real>& rhs) {
    const int n = m.rows();
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            real s = m.at(i, j);
            for (int k = 0; k < j; ++k) s -= m.at(i, k) * m.at(j, k);
            if (i == j) {
                if (s <= 0.0) return false;
                m.at(i, i) = std::sqrt(s);
            } else {
                m.at(i, j) = s / m.at(j, j);
            }
        }
    }
    for (int i = 0; i < n; ++i) {
        real s = rhs[i];
        for (int k = 0; k < i; ++k) s -= m.at(i, k) * rhs[k];
        rhs[i] = s / m.at(i, i);
    }
    for (int i = n - 1; i >= 0; --i) {
        real s = rhs[i];
        for (int k = i + 1; k < n; ++k) s -= m.at(k, i) * rhs[k];
        rhs[i] = s / m.at(i, i);
    }
    return true;
}

struct ProbeModel {
    int d = 0, c = 0;
    std::vector<real> w;  // (d+1) x c, last row bias

    void logits(const real* x, real* out) const {
        for (int k = 0; k < c; ++k) out[k] = w[static_cast<std::size_t>(d) * c + k];
        for (int j = 0; j < d; ++j) {
            const real xj = x[j];
            if (xj == 0.0) continue;
            const real* wr = w.data() + static_cast<std::size_t>(j) * c;
            for (int k = 0; k < c; ++k) out[k] += xj * wr[k];
        }
    }
};

real probe_loss_grad(const ProbeModel& m, const Tensor& x, const std::vector<int>& y,
                     real l2_reg, std::vector<real>* grad, std::vector<real>* probs_buf) {
    const int n = x.rows(), d = m.d, c = m.c;
    const real inv_n = 1.0 / n;
    if (grad) std::fill(grad->begin(), grad->end(), 0.0);
    real loss = 0.0;
    std::vector<real> p(c);
    for (int i = 0; i < n; ++i) {
        const real* xi = x.data() + static_cast<std::size_t>(i) * d;
        m.logits(xi, p.data());
        real mx = p[0];
        for (int k = 1; k < c; ++k) mx = std::max(mx, p[k]);
        real z = 0.0;
        for (int k = 0; k < c; ++k) {
            p[k] = std::exp(p[k] - mx);
            z += p[k];
        }
        for (int k = 0; k < c; ++k) p[k] /= z;
        loss -= std::log(std::max<real>(p[y[i]], 1e-300)) * inv_n;
        if (probs_buf)
            std::copy(p.begin(), p.end(), probs_buf->begin() + static_cast<std::size_t>(i) * c);
        if (grad) {
            for (int k = 0; k < c; ++k) {
                const real g = (p[k] - (k == y[i] ? 1.0 : 0.0)) * inv_n;
                for (int j = 0; j < d; ++j)
                    (*grad)[static_cast<std::size_t>(j) * c + k] += g * xi[j];
                (*grad)[static_cast<std::size_t>(d) * c + k] += g;
            }
        }
    }
    for (int j = 0; j < d; ++j)
        for (int k = 0; k < c; ++k) {
            const real wj = m.w[static_cast<std::size_t>(j) * c + k];
            loss += 0.5 * l2_reg * wj * wj;
            if (grad) (*grad)[static_cast<std::size_t>(j) * c + k] += l2_reg * wj;
        }
    return loss;
}

} // namespace

ProbeResult linear_probe_fit(const Tensor& train_x, const std::vector<int>& train_y,
                             const Tensor& test_x, const std::vector<int>& test_y,
                             int num_classes, real l2_reg) {
    const int n = train_x.rows(), d = train_x.cols(), c = num_classes;
    if (n == 0 || test_x.rows() == 0) throw usage_error("linear_probe: empty data");
    if (static_cast<int>(train_y.size()) != n ||
        static_cast<int>(test_y.size()) != test_x.rows())
        throw shape_error("linear_probe: label count mismatch");
    for (int yi : train_y)
        if (yi < 0 || yi >= c) throw usage_error("linear_probe: label out of range");
    if (l2_reg < 0.0) throw usage_error("linear_probe: l2_reg must be >= 0");

    ProbeModel model;
    model.d = d;
    model.c = c;
    model.w.assign(static_cast<std::size_t>(d + 1) * c, 0.0);

    const int dim = (d + 1) * c;
    std::vector<real> grad(dim), step(dim), probs(static_cast<std::size_t>(n) * c);
    real loss = probe_loss_grad(model, train_x, train_y, l2_reg, &grad, &probs);

    for (int iter = 0; iter < 100; ++iter) {
        // Newton system: H = X^T S X / n + l2; assembled per class pair.
        Tensor hess({dim, dim});
        const real inv_n = 1.0 / n;
        for (int i = 0; i < n; ++i) {
            const real* xi = train_x.data() + static_cast<std::size_t>(i) * d;
            const real* pi = probs.data() + static_cast<std::size_t>(i) * c;
            for (int k1 = 0; k1 < c; ++k1) {
                for (int k2 = 0; k2 <= k1; ++k2) {
                    const real s =
                        (k1 == k2 ? pi[k1] * (1.0 - pi[k1]) : -pi[k1] * pi[k2]) * inv_n;
                    if (s == 0.0) continue;
                    for (int j1 = 0; j1 <= d; ++j1) {
                        const real xj1 = j1 == d ? 1.0 : xi[j1];
                        if (xj1 == 0.0) continue;
                        const int r1 = j1 * c + k1;
                        for (int j2 = 0; j2 <= d; ++j2) {
                            const real xj2 = j2 == d ? 1.0 : xi[j2];
                            if (xj2 == 0.0) continue;
                            const int r2 = j2 * c + k2;
                            const real v = s * xj1 * xj2;
                            // Lower triangle only; the transposed entry is a
                            // distinct element filled via symmetry below.
                            if (k1 == k2) {
                                if (r1 >= r2) hess.at(r1, r2) += v;
                            } else if (r1 >= r2) {
                                hess.at(r1, r2) += v;
                            } else {
                                hess.at(r2, r1) += v;
                            }
                        }
                    }
                }
            }
        }
        // Mirror lower triangle and add ridge (weights only, not biases).
        for (int r1 = 0; r1 < dim; ++r1)
            for (int r2 = r1 + 1; r2 < dim; ++r2) hess.at(r1, r2) = hess.at(r2, r1);
        for (int j = 0; j < d; ++j)
            for (int k = 0; k < c; ++k) hess.at(j * c + k, j * c + k) += l2_reg;
        for (int k = 0; k < c; ++k)
            hess.at(d * c + k, d * c + k) += 1e-10;  // bias gauge freedom

        step = grad;
        if (!cholesky_solve(hess, step)) {
            if (l2_reg == 0.0)
                throw numeric_error(
                    "linear_probe: singular design with l2_reg=0; regularization required");
            throw numeric_error("linear_probe: Newton system not positive definite");
        }

        // Backtracking line search on the Newton direction.
        real t = 1.0;
        ProbeModel trial = model;
        real new_loss = loss;
        for (int ls = 0; ls < 30; ++ls) {
            for (int i = 0; i < dim; ++i) trial.w[i] = model.w[i] - t * step[i];
            new_loss = probe_loss_grad(trial, train_x, train_y, l2_reg, nullptr, nullptr);
            if (new_loss <= loss) break;
            t *= 0.5;
        }
        model = trial;
        const real delta = loss - new_loss;
        loss = probe_loss_grad(model, train_x, train_y, l2_reg, &grad, &probs);
        if (delta >= 0.0 && delta < 1e-6) break;
    }

    ProbeResult res;
    res.weights = Tensor({d + 1, c}, model.w);
    res.predictions.resize(test_x.rows());
    int correct = 0;
    std::vector<real> logit(c);
    for (int i = 0; i < test_x.rows(); ++i) {
        model.logits(test_x.data() + static_cast<std::size_t>(i) * d, logit.data());
        int best = 0;
        for (int k = 1; k < c; ++k)
            if (logit[k] > logit[best]) best = k;
        res.predictions[i] = best;
        if (best == test_y[i]) ++correct;
    }
    res.accuracy = static_cast<real>(correct) / test_x.rows();
    return res;
}

real linear_probe(const Tensor& train_x, const std::vector<int>& train_y, const Tensor& test_x,
                  const std::vector<int>& test_y, int num_classes, real l2_reg) {
    return linear_probe_fit(train_x, train_y, test_x, test_y, num_classes, l2_reg).accuracy;
}

// ---- retrieval ----

RetrievalResult retrieval_top1(const Tensor& queries, const Tensor& gallery,
                               const std::vector<int>& ground_truth) {
    if (gallery.rows() == 0) throw usage_error("retrieval_top1: empty gallery");
    if (queries.rows() == 0) throw usage_error("retrieval_top1: empty query set");
    if (static_cast<int>(ground_truth.size()) != queries.rows())
        throw shape_error("retrieval_top1: ground truth size mismatch");
    const int d = queries.cols();
    if (gallery.cols() != d) throw shape_error("retrieval_top1: dim mismatch");

    int hit_qg = 0;
    for (int i = 0; i < queries.rows(); ++i) {
        const real* q = queries.data() + static_cast<std::size_t>(i) * d;
        int best = 0;
        real best_s = -2.0;
        for (int j = 0; j < gallery.rows(); ++j) {
            const real s = cosine(q, gallery.data() + static_cast<std::size_t>(j) * d, d);
            if (s > best_s) {
                best_s = s;
                best = j;
            }
        }
        if (best == ground_truth[i]) ++hit_qg;
    }
    int hit_gq = 0;
    for (int i = 0; i < queries.rows(); ++i) {
        const real* g = gallery.data() + static_cast<std::size_t>(ground_truth[i]) * d;
        int best = 0;
        real best_s = -2.0;
        for (int j = 0; j < queries.rows(); ++j) {
            const real s = cosine(g, queries.data() + static_cast<std::size_t>(j) * d, d);
            if (s > best_s) {
                best_s = s;
                best = j;
            }
        }
        if (best == i) ++hit_gq;
    }
    RetrievalResult res;
    res.recall_query_to_gallery = static_cast<real>(hit_qg) / queries.rows();
    res.recall_gallery_to_query = static_cast<real>(hit_gq) / queries.rows();
    return res;
}

// ---- Frechet proxy ----

void GaussianStats::validate() const {
    if (count < 2) throw usage_error("GaussianStats: count must be >= 2");
    const int d = covariance.rows();
    if (covariance.cols() != d || static_cast<int>(mean.numel()) != d)
        throw shape_error("GaussianStats: dim mismatch");
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            if (std::abs(covariance.at(i, j) - covariance.at(j, i)) > 1e-9)
                throw numeric_error("GaussianStats: covariance not symmetric");
}

GaussianStats gaussian_stats(const Tensor& samples) {
    const int n = samples.rows(), d = samples.cols();
    if (n < 2) throw usage_error("gaussian_stats: need at least 2 samples");
    GaussianStats st;
    st.count = n;
    st.mean = Tensor({d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) st.mean.v[j] += samples.at(i, j);
    for (int j = 0; j < d; ++j) st.mean.v[j] /= n;
    st.covariance = Tensor({d, d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
            const real dj = samples.at(i, j) - st.mean.v[j];
            for (int k = j; k < d; ++k)
                st.covariance.at(j, k) += dj * (samples.at(i, k) - st.mean.v[k]);
        }
    for (int j = 0; j < d; ++j)
        for (int k = j; k < d; ++k) {
            st.covariance.at(j, k) /= (n - 1);
            st.covariance.at(k, j) = st.covariance.at(j, k);
        }
    return st;
}

void sym_eig(const Tensor& m, Tensor& eigvals, Tensor& eigvecs) {
    const int n = m.rows();
    if (m.cols() != n) throw shape_error("sym_eig: matrix must be square");
    Tensor a = m;
    eigvecs = Tensor({n, n});
    for (int i = 0; i < n; ++i) eigvecs.at(i, i) = 1.0;

    for (int sweep = 0; sweep < 100; ++sweep) {
        real off = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) off += a.at(i, j) * a.at(i, j);
        if (off < 1e-24) break;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                if (a.at(p, q) == 0.0) continue;
                const real theta = (a.at(q, q) - a.at(p, p)) / (2.0 * a.at(p, q));
                const real t = (theta >= 0 ? 1.0 : -1.0) /
                               (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const real c = 1.0 / std::sqrt(t * t + 1.0);
                const real s = t * c;
                for (int i = 0; i < n; ++i) {
                    const real aip = a.at(i, p), aiq = a.at(i, q);
                    a.at(i, p) = c * aip - s * aiq;
                    a.at(i, q) = s * aip + c * aiq;
                }
                for (int i = 0; i < n; ++i) {
                    const real api = a.at(p, i), aqi = a.at(q, i);
                    a.at(p, i) = c * api - s * aqi;
                    a.at(q, i) = s * api + c * aqi;
                }
                for (int i = 0; i < n; ++i) {
                    const real vip = eigvecs.at(i, p), viq = eigvecs.at(i, q);
                    eigvecs.at(i, p) = c * vip - s * viq;
                    eigvecs.at(i, q) = s * vip + c * viq;
                }
            }
        }
    }
    eigvals = Tensor({n});
    for (int i = 0; i < n; ++i) eigvals.v[i] = a.at(i, i);
}

namespace {

// Symmetric square root via eigendecomposition with the negative clamp.
Tensor sym_sqrt(const Tensor& m, const char* what) {
    Tensor vals, vecs;
    sym_eig(m, vals, vecs);
    const int n = m.rows();
    for (int i = 0; i < n; ++i) {
        if (vals.v[i] < -1e-8)
            throw numeric_error(std::string("frechet_distance: ") + what +
                                " eigenvalue below clamp: " + format_real(vals.v[i]));
        vals.v[i] = vals.v[i] > 0.0 ? std::sqrt(vals.v[i]) : 0.0;
    }
    Tensor out({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            real s = 0.0;
            for (int k = 0; k < n; ++k) s += vecs.at(i, k) * vals.v[k] * vecs.at(j, k);
            out.at(i, j) = s;
        }
    return out;
}

} // namespace

real frechet_distance(const GaussianStats& a, const GaussianStats& b) {
    a.validate();
    b.validate();
    const int d = a.covariance.rows();
    if (b.covariance.rows() != d) throw shape_error("frechet_distance: dim mismatch");

    real mean_term = 0.0;
    for (int i = 0; i < d; ++i) {
        const real diff = a.mean.v[i] - b.mean.v[i];
        mean_term += diff * diff;
    }
    // tr((Sa Sb)^{1/2}) = tr((Sa^{1/2} Sb Sa^{1/2})^{1/2})
    Tensor ra = sym_sqrt(a.covariance, "covariance A");
    Tensor inner({d, d});
    {
        Tensor tmp({d, d});
        matmul_acc(ra, b.covariance, tmp);
        matmul_acc(tmp, ra, inner);
        for (int i = 0; i < d; ++i)
            for (int j = i + 1; j < d; ++j) {
                const real avg = 0.5 * (inner.at(i, j) + inner.at(j, i));
                inner.at(i, j) = avg;
                inner.at(j, i) = avg;
            }
    }
    Tensor vals, vecs;
    sym_eig(inner, vals, vecs);
    real tr_sqrt = 0.0;
    for (int i = 0; i < d; ++i) {
        if (vals.v[i] < -1e-8)
            throw numeric_error("frechet_distance: cross term eigenvalue below clamp: " +
                                format_real(vals.v[i]));
        tr_sqrt += vals.v[i] > 0.0 ? std::sqrt(vals.v[i]) : 0.0;
    }
    real tr_a = 0.0, tr_b = 0.0;
    for (int i = 0; i < d; ++i) {
        tr_a += a.covariance.at(i, i);
        tr_b += b.covariance.at(i, i);
    }
    return mean_term + tr_a + tr_b - 2.0 * tr_sqrt;
}

} // namespace fae
