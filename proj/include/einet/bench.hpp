#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "einet/engine.hpp"
#include "einet/io.hpp"
#include "einet/model.hpp"
#include "einet/oracle.hpp"
#include "einet/structures.hpp"

namespace einet {

enum class BenchEngine { einsum, oracle };

inline const char* to_string(BenchEngine e) { return e == BenchEngine::einsum ? "einsum" : "oracle"; }

struct BenchConfig {
    std::vector<std::size_t> ks{10};
    std::vector<std::size_t> depths{4};
    std::vector<std::size_t> replicas{10};
    std::size_t batch = 100;
    std::size_t d_vars = 0;  // 0: 2^(depth+1)
    std::size_t repeats = 3;  // timing is the minimum over repeats
    bool run_oracle = true;
    bool backward = true;
    std::uint64_t seed = 0;
};

struct BenchRow {
    BenchEngine engine = BenchEngine::einsum;
    std::size_t k = 0, depth = 0, replica = 0, batch = 0;
    double forward_ms = 0, backward_ms = 0;
    std::size_t peak_bytes = 0;
};

struct BenchReport {
    std::vector<BenchRow> rows;

    static std::string csv_header() { return "engine,K,D,R,batch,forward_ms,backward_ms,peak_bytes"; }

    std::string to_csv() const {
        std::string out = csv_header() + "\n";
        for (const auto& r : rows)
            out += std::string(to_string(r.engine)) + "," + std::to_string(r.k) + "," + std::to_string(r.depth) + "," +
                   std::to_string(r.replica) + "," + std::to_string(r.batch) + "," + format_double(r.forward_ms) + "," +
                   format_double(r.backward_ms) + "," + std::to_string(r.peak_bytes) + "\n";
        return out;
    }
};

/// Model and gaussian-noise batch for one grid point.
inline std::pair<Model, Dataset> bench_problem(std::size_t k, std::size_t depth, std::size_t replica, std::size_t batch,
                                               std::size_t d_vars, std::uint64_t seed) {
    if (d_vars == 0) d_vars = std::size_t{2} << depth;
    ModelOptions mo;
    mo.k = k;
    mo.seed = seed;
    auto model = make_model(random_binary_tree(d_vars, {depth, replica, seed}), mo);
    Dataset x(batch, d_vars);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::normal_distribution<double> noise;
    for (auto& v : x.values) v = noise(rng);
    return {std::move(model), std::move(x)};
}

namespace bench_detail {

template <class F>
double min_ms(std::size_t repeats, F&& f) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < std::max<std::size_t>(repeats, 1); ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        f();
        const auto t1 = std::chrono::steady_clock::now();
        best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    return best;
}

// Keeps results observable so the timed work is not elided.
inline volatile double sink = 0;

}  // namespace bench_detail

inline BenchRow bench_einsum(const Model& m, const Dataset& x, std::size_t repeats, bool with_backward) {
    BenchRow row;
    MemoryTracker::reset_peak();
    const auto base = MemoryTracker::current_bytes();
    row.forward_ms = bench_detail::min_ms(repeats, [&] {
        auto fp = forward(m, x);
        bench_detail::sink = fp.log_likelihood[0];
    });
    if (with_backward) {
        auto fp = forward(m, x);
        row.backward_ms = bench_detail::min_ms(repeats, [&] {
            auto stats = BackwardStats::zeros_like(m);
            backward(m, fp, x, stats);
            bench_detail::sink = stats.ll_sum;
        });
    }
    row.peak_bytes = MemoryTracker::peak_bytes() - base;
    return row;
}

inline BenchRow bench_oracle(const Model& m, const Dataset& x, std::size_t repeats, bool with_backward) {
    BenchRow row;
    const auto sc = oracle::expand(m);
    MemoryTracker::reset_peak();
    const auto base = MemoryTracker::current_bytes();
    row.forward_ms = bench_detail::min_ms(repeats, [&] {
        double s = 0;
        for (std::size_t b = 0; b < x.num_samples; ++b) s += oracle::scalar_eval(sc, x.row(b));
        bench_detail::sink = s;
    });
    if (with_backward) {
        row.backward_ms = bench_detail::min_ms(repeats, [&] {
            std::vector<std::vector<double>> grad;
            double s = 0;
            for (std::size_t b = 0; b < x.num_samples; ++b) s += oracle::scalar_grad(sc, x.row(b), grad);
            bench_detail::sink = s;
        });
    }
    row.peak_bytes = MemoryTracker::peak_bytes() - base;
    return row;
}

/// Cartesian sweep over K x depth x replica; both engines see the same model
/// and batch at each grid point.
inline BenchReport run_bench(const BenchConfig& cfg) {
    BenchReport rep;
    for (auto depth : cfg.depths)
        for (auto r : cfg.replicas)
            for (auto k : cfg.ks) {
                const auto [m, x] = bench_problem(k, depth, r, cfg.batch, cfg.d_vars, cfg.seed);
                auto fill = [&](BenchRow row, BenchEngine e) {
                    row.engine = e;
                    row.k = k;
                    row.depth = depth;
                    row.replica = r;
                    row.batch = cfg.batch;
                    rep.rows.push_back(row);
                };
                fill(bench_einsum(m, x, cfg.repeats, cfg.backward), BenchEngine::einsum);
                if (cfg.run_oracle) fill(bench_oracle(m, x, cfg.repeats, cfg.backward), BenchEngine::oracle);
            }
    return rep;
}

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw ConfigError("slope fit needs at least two matching points");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double n = static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double lx = std::log(x[i]), ly = std::log(y[i]);
        sx += lx, sy += ly, sxx += lx * lx, sxy += lx * ly;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace einet
