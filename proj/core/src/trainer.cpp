#include "fae/trainer.hpp"

#include <cstdio>
#include <filesystem>
#include <thread>

#include "fae/common.hpp"

namespace fae {

namespace {

struct WorkerBuf {
    GradMap grads;
    std::vector<real> components;
    std::exception_ptr error;
};

void merge_into(WorkerBuf& dst, WorkerBuf& src) {
    for (auto& [name, g] : src.grads) {
        auto it = dst.grads.find(name);
        if (it == dst.grads.end()) {
            dst.grads.emplace(name, std::move(g));
        } else {
            Tensor& d = it->second;
            for (std::size_t i = 0; i < d.numel(); ++i) d.v[i] += g.v[i];
        }
    }
    for (std::size_t i = 0; i < dst.components.size(); ++i)
        dst.components[i] += src.components[i];
}

} // namespace

BatchResult batch_backward(std::size_t count, int workers, std::size_t n_components,
                           const RecordLossFn& fn, real seed_scale) {
    const int w = std::max(1, std::min<int>(workers, static_cast<int>(count > 0 ? count : 1)));
    std::vector<WorkerBuf> bufs(w);
    for (auto& b : bufs) b.components.assign(n_components, 0.0);

    auto run_range = [&](int wi, std::size_t lo, std::size_t hi) {
        WorkerBuf& buf = bufs[wi];
        try {
            std::vector<real> comps(n_components, 0.0);
            for (std::size_t r = lo; r < hi; ++r) {
                std::fill(comps.begin(), comps.end(), 0.0);
                ad::Autograd ctx;
                ad::Var loss = fn(ctx, r, comps);
                ad::backward(loss, seed_scale);
                ctx.collect(buf.grads);
                for (std::size_t i = 0; i < n_components; ++i)
                    buf.components[i] += comps[i] * seed_scale;
            }
        } catch (...) {
            buf.error = std::current_exception();
        }
    };

    const std::size_t chunk = (count + w - 1) / std::max(1, w);
    if (w == 1) {
        run_range(0, 0, count);
    } else {
        std::vector<std::thread> threads;
        for (int wi = 0; wi < w; ++wi) {
            const std::size_t lo = wi * chunk;
            const std::size_t hi = std::min(count, lo + chunk);
            if (lo >= hi) break;
            threads.emplace_back(run_range, wi, lo, hi);
        }
        for (auto& t : threads) t.join();
    }
    for (auto& b : bufs)
        if (b.error) std::rethrow_exception(b.error);

    // Pairwise tree combine keeps the reduction order fixed per worker count.
    std::size_t n = bufs.size();
    while (n > 1) {
        std::size_t out = 0;
        for (std::size_t i = 0; i + 1 < n; i += 2) {
            merge_into(bufs[i], bufs[i + 1]);
            if (out != i) bufs[out] = std::move(bufs[i]);
            ++out;
        }
        if (n % 2 == 1) {
            bufs[out] = std::move(bufs[n - 1]);
            ++out;
        }
        n = out;
    }

    BatchResult res;
    res.grads = std::move(bufs[0].grads);
    res.components = std::move(bufs[0].components);
    return res;
}

CsvWriter::CsvWriter(const std::string& path, const std::string& header)
    : path_(path + ".tmp"), final_path_(path) {
    f_ = std::fopen(path_.c_str(), "wb");
    if (!f_) throw io_error("cannot create " + path_);
    std::fputs(header.c_str(), f_);
    std::fputc('\n', f_);
}

CsvWriter::~CsvWriter() { close(); }

void CsvWriter::row(const std::string& line) {
    if (!f_) throw io_error("CsvWriter: closed");
    std::fputs(line.c_str(), f_);
    std::fputc('\n', f_);
}

void CsvWriter::close() {
    if (!f_) return;
    std::fclose(f_);
    f_ = nullptr;
    std::error_code ec;
    std::filesystem::rename(path_, final_path_, ec);
    if (ec) throw io_error("rename " + path_ + ": " + ec.message());
}

std::string format_real(real x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

} // namespace fae
