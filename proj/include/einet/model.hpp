#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "einet/compiler.hpp"
#include "einet/errors.hpp"
#include "einet/expfam.hpp"
#include "einet/region_graph.hpp"

namespace einet {

/// Einsum weights (L x K_out x K x K), mixing weights (M x Dmax) and leaf
/// expectation parameters. `weights` is indexed by circuit layer; the leaf
/// layer's entry is empty.
struct Parameters {
    std::vector<std::vector<double>> weights;
    EfParams leaves;
};

/// Shape of the weight tensor held for one circuit layer.
inline std::size_t weight_count(const LayeredCircuit& c, std::size_t layer) {
    const auto& l = c.layers[layer];
    switch (l.kind) {
        case LayerKind::leaf: return 0;
        case LayerKind::einsum: return l.num_rows * l.width * c.k * c.k;
        case LayerKind::mixing: return l.num_rows * l.mixing().dmax;
    }
    return 0;
}

/// Length of one normalized weight group (the simplex a row lives on).
inline std::size_t group_size(const LayeredCircuit& c, std::size_t layer) {
    const auto& l = c.layers[layer];
    return l.kind == LayerKind::einsum ? c.k * c.k : l.kind == LayerKind::mixing ? l.mixing().dmax : 0;
}

struct Model {
    RegionGraph graph;
    LayeredCircuit circuit;
    Parameters params;
    Projection projection;
    double eps_w = 1e-12;
    nlohmann::json provenance = nlohmann::json::object();

    const ExpFamilySpec& leaf_spec() const { return params.leaves.spec; }
    std::size_t d_vars() const { return circuit.d_vars; }

    std::span<const std::uint8_t> mixing_mask(std::size_t layer) const { return circuit.layers[layer].mixing().mask; }

    /// Projects every weight group and leaf slot onto its valid set.
    void project_all() {
        for (std::size_t li = 0; li < circuit.layers.size(); ++li) {
            const auto g = group_size(circuit, li);
            if (g == 0) continue;
            auto& w = params.weights[li];
            const bool mixing = circuit.layers[li].kind == LayerKind::mixing;
            for (std::size_t off = 0; off < w.size(); off += g) {
                std::span<const std::uint8_t> mask;
                if (mixing) mask = std::span<const std::uint8_t>(circuit.layers[li].mixing().mask).subspan(off, g);
                project_simplex(std::span<double>(w).subspan(off, g), eps_w, mask);
            }
        }
        project(params.leaves, projection);
    }

    bool finite() const {
        for (const auto& w : params.weights)
            for (auto v : w)
                if (!std::isfinite(v)) return false;
        for (auto v : params.leaves.phi)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

/// Uniform(0,1) weights normalized per group, then projected.
template <class Rng>
void init_weights(Model& m, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto& c = m.circuit;
    m.params.weights.assign(c.layers.size(), {});
    for (std::size_t li = 0; li < c.layers.size(); ++li) {
        const auto n = weight_count(c, li);
        if (n == 0) continue;
        auto& w = m.params.weights[li];
        w.resize(n);
        const auto g = group_size(c, li);
        const bool mixing = c.layers[li].kind == LayerKind::mixing;
        for (std::size_t off = 0; off < n; off += g) {
            double total = 0;
            for (std::size_t i = 0; i < g; ++i) {
                const bool on = !mixing || c.layers[li].mixing().mask[off + i];
                w[off + i] = on ? u(rng) : 0.0;
                total += w[off + i];
            }
            for (std::size_t i = 0; i < g; ++i) w[off + i] /= total;
        }
    }
}

struct ModelOptions {
    std::size_t k = 10;
    std::size_t k_root = 1;
    ExpFamilySpec leaf = ExpFamilySpec::gaussian();
    Projection projection;
    double eps_w = 1e-12;
    std::uint64_t seed = 0;
};

/// Compiles `graph` and draws initial parameters. `data` (optional) sets the
/// gaussian mean initialization range.
inline Model make_model(RegionGraph graph, const ModelOptions& opt, const Dataset* data = nullptr) {
    Model m;
    m.circuit = compile(graph, opt.k, opt.k_root);
    m.graph = std::move(graph);
    m.projection = opt.projection;
    m.eps_w = opt.eps_w;
    std::mt19937_64 rng(opt.seed);
    init_weights(m, rng);
    DataRange range;
    if (data && data->num_samples > 0) range = data_range(*data);
    m.params.leaves = init_ef_params(opt.leaf, m.circuit.d_vars, opt.k, m.circuit.num_replica(),
                                     data && data->num_samples > 0 ? &range : nullptr, opt.projection, rng);
    m.project_all();
    return m;
}

}  // namespace einet
