#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <vector>

#include "einet/engine.hpp"
#include "einet/model.hpp"
#include "einet/oracle.hpp"
#include "einet/structures.hpp"

namespace einet::testkit {

/// Every assignment of `d` variables with `base` states, in odometer order.
inline Dataset all_assignments(std::size_t d, std::size_t base) {
    std::size_t total = 1;
    for (std::size_t i = 0; i < d; ++i) total *= base;
    Dataset out(total, d);
    for (std::size_t n = 0; n < total; ++n) {
        std::size_t rest = n;
        for (std::size_t v = 0; v < d; ++v) {
            out.at(n, v) = static_cast<double>(rest % base);
            rest /= base;
        }
    }
    return out;
}

inline std::size_t assignment_index(std::span<const double> x, std::size_t base) {
    std::size_t idx = 0, mul = 1;
    for (auto v : x) {
        idx += static_cast<std::size_t>(v) * mul;
        mul *= base;
    }
    return idx;
}

/// Joint distribution over all assignments, from the scalar oracle.
inline std::vector<double> oracle_joint(const Model& m) {
    const auto sc = oracle::expand(m);
    const auto all = all_assignments(m.d_vars(), m.leaf_spec().support_size());
    std::vector<double> p(all.num_samples);
    for (std::size_t n = 0; n < all.num_samples; ++n) p[n] = std::exp(oracle::scalar_eval(sc, all.row(n)));
    return p;
}

inline double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
    double s = 0;
    for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
    return 0.5 * s;
}

inline std::vector<double> empirical(const Dataset& samples, std::size_t base) {
    std::size_t total = 1;
    for (std::size_t i = 0; i < samples.num_vars; ++i) total *= base;
    std::vector<double> f(total, 0.0);
    for (std::size_t n = 0; n < samples.num_samples; ++n) f[assignment_index(samples.row(n), base)] += 1.0;
    for (auto& v : f) v /= static_cast<double>(samples.num_samples);
    return f;
}

/// Small discrete model with random weights: RAT or a DAG over `d` binary
/// variables with several partitions at the root.
inline Model small_discrete_model(std::size_t d, std::size_t k, std::uint64_t seed, std::size_t states = 2) {
    ModelOptions mo;
    mo.k = k;
    mo.seed = seed;
    mo.leaf = ExpFamilySpec::categorical(states);
    RegionGraph rg;
    if (d == 2) rg = random_binary_tree(2, {1, 2, seed});
    else {
        // root with all three "one vs rest" partitions for d == 3
        rg.d_vars = d;
        rg.root = rg.add_region(Scope::full(d));
        for (std::size_t v = 0; v < d; ++v) {
            std::vector<std::size_t> rest;
            for (std::size_t u = 0; u < d; ++u)
                if (u != v) rest.push_back(u);
            const auto single = rg.add_region(Scope(d, {v}));
            const auto other = rg.add_region(Scope(d, rest));
            rg.add_partition(rg.root, single, other);
            if (rest.size() == 2) {
                const auto a = rg.add_region(Scope(d, {rest[0]}));
                const auto b = rg.add_region(Scope(d, {rest[1]}));
                rg.add_partition(other, a, b);
            }
        }
        rg.assign_kinds();
    }
    auto m = make_model(std::move(rg), mo);
    // Sharper leaves than Dirichlet(1) so conditionals differ from marginals.
    std::mt19937_64 rng(seed ^ 0xabcdef);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    for (std::size_t s = 0; s < m.params.leaves.num_slots(); ++s) {
        if (states != 2) break;
        const double p = u(rng);
        m.params.leaves.phi[2 * s] = p;
        m.params.leaves.phi[2 * s + 1] = 1 - p;
    }
    return m;
}

/// Chain region graph: {0..d-1} -> {0} x {1..d-1} -> {1} x {2..d-1} -> ...
inline RegionGraph chain_graph(std::size_t d) {
    RegionGraph rg;
    rg.d_vars = d;
    std::vector<std::size_t> all(d);
    for (std::size_t v = 0; v < d; ++v) all[v] = v;
    rg.root = rg.add_region(Scope::full(d));
    auto parent = rg.root;
    for (std::size_t v = 0; v + 1 < d; ++v) {
        const auto head = rg.add_region(Scope(d, {v}));
        const auto tail = rg.add_region(Scope(d, std::vector<std::size_t>(all.begin() + static_cast<std::ptrdiff_t>(v) + 1, all.end())));
        rg.add_partition(parent, head, tail);
        parent = tail;
    }
    rg.assign_kinds();
    return rg;
}

}  // namespace einet::testkit
