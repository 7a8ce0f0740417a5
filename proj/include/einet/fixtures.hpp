#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "einet/engine.hpp"
#include "einet/model.hpp"
#include "einet/structures.hpp"

// Seeded random models for oracle comparisons and property tests.
namespace einet::fixtures {

struct FixtureOptions {
    std::size_t max_vars = 8;
    std::size_t max_k = 5;
    std::size_t max_depth = 3;
    std::size_t batch = 6;
    bool allow_gaussian = true;
    bool allow_discrete = true;
};

struct Fixture {
    Model model;
    Dataset data;
    std::string description;
};

/// Random DAG-shaped region graph: every inner region gets one or two random
/// balanced-or-not splits, and identical scopes are shared.
inline RegionGraph random_region_graph(std::size_t d_vars, std::size_t max_depth, std::mt19937_64& rng) {
    RegionGraph rg;
    rg.d_vars = d_vars;
    std::map<std::vector<std::size_t>, std::size_t> memo;
    auto build = [&](auto&& self, std::vector<std::size_t> vars, std::size_t depth_left, bool is_root) -> std::size_t {
        std::sort(vars.begin(), vars.end());
        if (!is_root)
            if (auto it = memo.find(vars); it != memo.end()) return it->second;
        const auto id = rg.add_region(Scope(d_vars, vars));
        if (!is_root) memo.emplace(vars, id);
        if (vars.size() < 2 || depth_left == 0) return id;
        const std::size_t n_parts = is_root ? 1 + rng() % 3 : 1 + rng() % 2;
        for (std::size_t p = 0; p < n_parts; ++p) {
            auto shuffled = vars;
            std::shuffle(shuffled.begin(), shuffled.end(), rng);
            const auto cut = 1 + rng() % (shuffled.size() - 1);
            std::vector<std::size_t> l(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(cut));
            std::vector<std::size_t> r(shuffled.begin() + static_cast<std::ptrdiff_t>(cut), shuffled.end());
            const auto li = self(self, l, depth_left - 1, false);
            const auto ri = self(self, r, depth_left - 1, false);
            rg.add_partition(id, li, ri);
        }
        return id;
    };
    std::vector<std::size_t> all(d_vars);
    for (std::size_t v = 0; v < d_vars; ++v) all[v] = v;
    rg.root = build(build, all, max_depth, true);
    rg.assign_kinds();
    return rg;
}

/// Draws a random structure (RAT, PD or random DAG), family, K and parameters.
inline Fixture random_fixture(std::uint64_t seed, const FixtureOptions& opt = {}) {
    std::mt19937_64 rng(seed);
    auto pick = [&](std::size_t lo, std::size_t hi) { return lo + rng() % (hi - lo + 1); };

    RegionGraph rg;
    std::string what;
    for (;;) {
        const auto kind = rng() % 3;
        if (kind == 0) {
            const auto d = pick(2, opt.max_vars);
            std::size_t max_d = 0;
            while ((std::size_t{2} << max_d) <= d && max_d + 1 <= opt.max_depth) ++max_d;
            RatConfig cfg{pick(1, std::max<std::size_t>(max_d, 1)), pick(1, 3), rng()};
            rg = random_binary_tree(d, cfg);
            what = "rat d=" + std::to_string(d) + " D=" + std::to_string(cfg.depth) + " R=" + std::to_string(cfg.replica);
        } else if (kind == 1) {
            const auto h = pick(1, 3);
            const auto w = pick(h == 1 ? 2 : 1, std::max<std::size_t>(opt.max_vars / h, 2));
            if (h * w > opt.max_vars || h * w < 2) continue;
            PdConfig cfg;
            cfg.deltas = {pick(1, 2)};
            cfg.axes = static_cast<SplitAxes>(rng() % 3);
            try {
                rg = poon_domingos(h, w, cfg);
            } catch (const ConfigError&) {
                continue;
            }
            what = "pd " + std::to_string(h) + "x" + std::to_string(w) + " delta=" + std::to_string(cfg.deltas[0]);
        } else {
            const auto d = pick(2, opt.max_vars);
            rg = random_region_graph(d, opt.max_depth, rng);
            what = "dag d=" + std::to_string(d);
        }
        if (partition_depth(rg) <= opt.max_depth) break;
    }

    ModelOptions mo;
    mo.k = pick(1, opt.max_k);
    mo.k_root = rng() % 4 == 0 ? 2 : 1;
    mo.seed = rng();
    std::vector<ExpFamilySpec> families;
    if (opt.allow_gaussian) families.push_back(ExpFamilySpec::gaussian());
    if (opt.allow_discrete) {
        families.push_back(ExpFamilySpec::categorical(pick(2, 3)));
        families.push_back(ExpFamilySpec::binomial(pick(1, 3)));
    }
    mo.leaf = families[rng() % families.size()];

    Fixture f;
    f.model = make_model(std::move(rg), mo);
    if (mo.leaf.family == Family::gaussian) {
        std::uniform_real_distribution<double> var(0.2, 2.0);
        auto& phi = f.model.params.leaves.phi;
        for (std::size_t s = 0; s < phi.size(); s += 2) phi[s + 1] = phi[s] * phi[s] + var(rng);
    }
    f.data = sample(f.model, opt.batch, rng());
    f.description = what + " K=" + std::to_string(mo.k) + " leaf=" + to_string(mo.leaf.family);
    return f;
}

}  // namespace einet::fixtures
