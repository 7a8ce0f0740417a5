#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "einet/engine.hpp"
#include "einet/errors.hpp"
#include "einet/model.hpp"

namespace einet {

enum class EmMode { full, stochastic };

struct TrainerConfig {
    EmMode mode = EmMode::stochastic;
    double lambda = 0.5;
    std::size_t batch_size = 500;
    std::size_t epochs = 1;
    std::uint64_t seed = 0;
    std::size_t chunk = 1024;  // forward/backward chunk for full-batch passes
    std::optional<Projection> projection;  // overrides the model's clamps when set
    std::optional<double> eps_w;

    void validate() const {
        if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("EM step size must lie in [0, 1]");
        if (batch_size < 1) throw ConfigError("batch size must be >= 1");
        if (chunk < 1) throw ConfigError("chunk size must be >= 1");
    }
};

/// M-step targets from accumulated statistics, projected. Weight groups are
/// the normalized statistics; groups and leaf slots without responsibility
/// keep their current values.
inline Parameters em_targets(const Model& m, const BackwardStats& stats) {
    Parameters out = m.params;
    const auto& c = m.circuit;
    for (std::size_t li = 1; li < c.layers.size(); ++li) {
        const auto g = group_size(c, li);
        auto& w = out.weights[li];
        const auto& acc = stats.weights[li];
        for (std::size_t off = 0; off < w.size(); off += g) {
            double total = 0;
            for (std::size_t i = 0; i < g; ++i) total += acc[off + i];
            if (!(total > 0) || !std::isfinite(total)) continue;
            for (std::size_t i = 0; i < g; ++i) w[off + i] = acc[off + i] / total;
        }
    }
    auto& leaves = out.leaves;
    const auto t = leaves.stat_dim();
    for (std::size_t s = 0; s < leaves.num_slots(); ++s)
        ef::em_target({leaves.phi.data() + s * t, t}, {stats.acc_pT.data() + s * t, t}, stats.acc_p[s], m.projection);

    Model tmp;
    tmp.circuit = m.circuit;
    tmp.projection = m.projection;
    tmp.eps_w = m.eps_w;
    tmp.params = std::move(out);
    tmp.project_all();
    return std::move(tmp.params);
}

namespace detail {

/// Names the first non-finite tensor, or returns empty.
inline std::string first_non_finite(const Model& m) {
    for (std::size_t li = 0; li < m.params.weights.size(); ++li)
        for (auto v : m.params.weights[li])
            if (!std::isfinite(v)) return "layer " + std::to_string(li);
    for (auto v : m.params.leaves.phi)
        if (!std::isfinite(v)) return "leaf parameters";
    return {};
}

inline void check_finite(const Model& m, std::size_t epoch, std::size_t batch) {
    const auto where = first_non_finite(m);
    if (!where.empty())
        throw TrainingError("non-finite parameters in " + where + " (epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch) + ")");
}

}  // namespace detail

/// One full-batch EM iteration. Returns the mean log-likelihood of `data`
/// under the parameters before the update.
inline double em_full_step(Model& m, const Dataset& data, std::size_t chunk = 1024) {
    if (data.num_samples == 0) throw InputError("EM step on an empty dataset");
    const auto stats = accumulate_stats(m, data, chunk);
    m.params = em_targets(m, stats);
    return stats.ll_sum / static_cast<double>(stats.count);
}

/// Gliding-average update: params <- (1 - lambda) params + lambda targets,
/// followed by projection. Returns the pre-update minibatch mean log-likelihood.
inline double em_stochastic_step(Model& m, const Dataset& batch, double lambda, std::size_t chunk = 1024) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("EM step size must lie in [0, 1]");
    if (batch.num_samples == 0) throw InputError("EM step on an empty batch");
    const auto stats = accumulate_stats(m, batch, chunk);
    const auto target = em_targets(m, stats);
    const double keep = 1.0 - lambda;
    for (std::size_t li = 0; li < m.params.weights.size(); ++li) {
        auto& w = m.params.weights[li];
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = keep * w[i] + lambda * target.weights[li][i];
    }
    auto& phi = m.params.leaves.phi;
    for (std::size_t i = 0; i < phi.size(); ++i) phi[i] = keep * phi[i] + lambda * target.leaves.phi[i];
    m.project_all();
    return stats.ll_sum / static_cast<double>(stats.count);
}

struct EpochMetrics {
    std::size_t epoch = 0;
    double train_ll = 0;
    double valid_ll = std::numeric_limits<double>::quiet_NaN();
    double wall_seconds = 0;
};

/// CSV header and row for the metrics stream.
inline std::string metrics_csv_header() { return "epoch,train_ll,valid_ll,wall_seconds"; }

inline std::string metrics_csv_row(const EpochMetrics& e) {
    auto num = [](double v) {
        if (std::isnan(v)) return std::string();
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    return std::to_string(e.epoch) + "," + num(e.train_ll) + "," + num(e.valid_ll) + "," + num(e.wall_seconds);
}

/// Epoch loop. Full mode performs one EM iteration per epoch; stochastic mode
/// visits seeded shuffled minibatches. Train/validation log-likelihoods are
/// measured after each epoch's updates.
inline std::vector<EpochMetrics> train(Model& m, const Dataset& data, const Dataset* valid, const TrainerConfig& cfg,
                                       const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
    cfg.validate();
    if (data.num_samples == 0) throw InputError("training set is empty");
    if (cfg.projection) m.projection = *cfg.projection;
    if (cfg.eps_w) m.eps_w = *cfg.eps_w;
    m.project_all();

    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(data.num_samples);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<EpochMetrics> out;
    const auto start = std::chrono::steady_clock::now();

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        if (cfg.mode == EmMode::full) {
            em_full_step(m, data, cfg.chunk);
            detail::check_finite(m, epoch, 0);
        } else {
            std::shuffle(order.begin(), order.end(), rng);
            std::size_t batch_index = 0;
            for (std::size_t first = 0; first < order.size(); first += cfg.batch_size, ++batch_index) {
                const auto n = std::min(cfg.batch_size, order.size() - first);
                const auto batch = data.select(std::span<const std::size_t>(order).subspan(first, n));
                em_stochastic_step(m, batch, cfg.lambda, cfg.chunk);
                detail::check_finite(m, epoch, batch_index);
            }
        }
        EpochMetrics e;
        e.epoch = epoch;
        e.train_ll = mean_log_likelihood(m, data, cfg.chunk);
        if (valid && valid->num_samples > 0) e.valid_ll = mean_log_likelihood(m, *valid, cfg.chunk);
        e.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (on_epoch) on_epoch(e);
        out.push_back(e);
    }
    return out;
}

struct KMeansResult {
    std::vector<std::size_t> assignment;
    std::vector<std::vector<double>> centers;
    std::size_t iterations = 0;
};

/// Lloyd's algorithm from k distinct seeded samples. A cluster left empty
/// takes over the sample farthest from its current center.
inline KMeansResult kmeans(const Dataset& data, std::size_t k, std::uint64_t seed, std::size_t max_iter = 50) {
    if (k < 1) throw ConfigError("k-means needs at least one cluster");
    if (k > data.num_samples) throw ConfigError("more clusters than samples");
    const auto n = data.num_samples, d = data.num_vars;
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);

    KMeansResult res;
    for (std::size_t c = 0; c < k; ++c) {
        const auto r = data.row(idx[c]);
        res.centers.emplace_back(r.begin(), r.end());
    }
    auto dist2 = [&](std::size_t i, const std::vector<double>& center) {
        double s = 0;
        for (std::size_t v = 0; v < d; ++v) {
            const double diff = data.at(i, v) - center[v];
            s += diff * diff;
        }
        return s;
    };

    res.assignment.assign(n, 0);
    for (std::size_t it = 0; it < max_iter; ++it) {
        bool changed = it == 0;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double best_d = dist2(i, res.centers[0]);
            for (std::size_t c = 1; c < k; ++c) {
                const double dd = dist2(i, res.centers[c]);
                if (dd < best_d) best_d = dd, best = c;
            }
            if (res.assignment[i] != best) changed = true;
            res.assignment[i] = best;
        }
        std::vector<std::size_t> count(k, 0);
        for (auto a : res.assignment) ++count[a];
        for (std::size_t c = 0; c < k; ++c) {
            if (count[c] > 0) continue;
            std::size_t far = 0;
            double far_d = -1;
            for (std::size_t i = 0; i < n; ++i) {
                if (count[res.assignment[i]] <= 1) continue;
                const double dd = dist2(i, res.centers[res.assignment[i]]);
                if (dd > far_d) far_d = dd, far = i;
            }
            --count[res.assignment[far]];
            res.assignment[far] = c;
            count[c] = 1;
            changed = true;
        }
        for (std::size_t c = 0; c < k; ++c) std::fill(res.centers[c].begin(), res.centers[c].end(), 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t v = 0; v < d; ++v) res.centers[res.assignment[i]][v] += data.at(i, v);
        for (std::size_t c = 0; c < k; ++c)
            for (auto& v : res.centers[c]) v /= static_cast<double>(count[c]);
        res.iterations = it + 1;
        if (!changed) break;
    }
    return res;
}

/// Mixture of independently trained circuits over the same variables.
struct MixtureModel {
    std::vector<Model> components;
    std::vector<double> weights;

    std::vector<double> log_likelihood(const Dataset& x) const {
        std::vector<std::vector<double>> per;
        for (const auto& c : components) per.push_back(einet::log_likelihood(c, x));
        std::vector<double> out(x.num_samples);
        for (std::size_t b = 0; b < x.num_samples; ++b) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < components.size(); ++c) mx = std::max(mx, std::log(weights[c]) + per[c][b]);
            if (mx == -std::numeric_limits<double>::infinity()) {
                out[b] = mx;
                continue;
            }
            double s = 0;
            for (std::size_t c = 0; c < components.size(); ++c) s += std::exp(std::log(weights[c]) + per[c][b] - mx);
            out[b] = mx + std::log(s);
        }
        return out;
    }
};

/// Builds an untrained component for one cluster's data with the given seed.
using ComponentFactory = std::function<Model(const Dataset& cluster_data, std::uint64_t seed)>;

/// k-means clusters, one circuit trained per cluster, cluster proportions as
/// mixture coefficients. Component c is built with seed `cfg.seed + c` and
/// trained with trainer seed `cfg.seed + c`.
inline MixtureModel train_mixture(const Dataset& data, std::size_t n_clusters, const ComponentFactory& make,
                                  const TrainerConfig& cfg, KMeansResult* clusters_out = nullptr) {
    if (n_clusters < 1) throw ConfigError("mixture needs at least one cluster");
    auto clusters = kmeans(data, n_clusters, cfg.seed);
    MixtureModel mix;
    for (std::size_t c = 0; c < n_clusters; ++c) {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < data.num_samples; ++i)
            if (clusters.assignment[i] == c) rows.push_back(i);
        const auto part = data.select(rows);
        auto model = make(part, cfg.seed + c);
        auto comp_cfg = cfg;
        comp_cfg.seed = cfg.seed + c;
        train(model, part, nullptr, comp_cfg);
        mix.components.push_back(std::move(model));
        mix.weights.push_back(static_cast<double>(rows.size()) / static_cast<double>(data.num_samples));
    }
    if (clusters_out) *clusters_out = std::move(clusters);
    return mix;
}

}  // namespace einet
