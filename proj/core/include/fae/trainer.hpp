#pragma once

#include <functional>
#include <string>

#include "fae/autodiff.hpp"
#include "fae/params.hpp"

namespace fae {

// Builds the loss graph for one record; adds any reportable loss components
// (recon, kl, ...) into `components` (pre-sized by the caller).
using RecordLossFn =
    std::function<ad::Var(ad::Autograd& ctx, std::size_t record, std::vector<real>& components)>;

struct BatchResult {
    GradMap grads;
    std::vector<real> components;  // summed over records, scaled by seed_scale
};

// Runs per-record forward/backward over [0, count). Each worker owns a
// contiguous record range and accumulates sequentially; worker buffers then
// combine in a fixed pairwise tree, so results are reproducible for a fixed
// worker count. backward is seeded with seed_scale (typically 1/batch).
BatchResult batch_backward(std::size_t count, int workers, std::size_t n_components,
                           const RecordLossFn& fn, real seed_scale);

// Minimal append-style CSV writer for loss curves and metric logs.
class CsvWriter {
public:
    CsvWriter() = default;
    CsvWriter(const std::string& path, const std::string& header);
    ~CsvWriter();
    CsvWriter(const CsvWriter&) = delete;
    CsvWriter& operator=(const CsvWriter&) = delete;

    void row(const std::string& line);
    void close();

private:
    std::FILE* f_ = nullptr;
    std::string path_;
    std::string final_path_;
};

std::string format_real(real x);

} // namespace fae
