#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <queue>
#include <random>
#include <set>
#include <tuple>
#include <utility>
#include <vector>

#include "einet/errors.hpp"
#include "einet/region_graph.hpp"

namespace einet {

/// Randomized balanced binary trees, repeated and mixed at a shared root.
struct RatConfig {
    std::size_t depth = 1;
    std::size_t replica = 1;
    std::uint64_t seed = 0;
};

enum class SplitAxes { vertical, horizontal, both };

/// Axis-aligned rectangle decomposition of a height x width image.
struct PdConfig {
    std::vector<std::size_t> deltas{1};
    SplitAxes axes = SplitAxes::both;
};

/// Builds R random binary trees of depth D over a common root region.
/// Each split shuffles the scope and cuts it at ceil(n/2).
inline RegionGraph random_binary_tree(std::size_t d_vars, const RatConfig& cfg) {
    if (cfg.depth < 1) throw ConfigError("RAT depth must be >= 1");
    if (cfg.replica < 1) throw ConfigError("RAT replica count must be >= 1");
    if (cfg.depth >= 63 || (std::size_t{1} << cfg.depth) > d_vars)
        throw ConfigError("RAT depth too large: 2^depth exceeds the number of variables");

    RegionGraph rg;
    rg.d_vars = d_vars;
    rg.root = rg.add_region(Scope::full(d_vars));
    std::mt19937_64 rng(cfg.seed);

    std::vector<std::size_t> all(d_vars);
    for (std::size_t v = 0; v < d_vars; ++v) all[v] = v;

    // Explicit stack keeps leaf ids of one replica contiguous and ascending.
    struct Work {
        std::size_t region;
        std::vector<std::size_t> vars;
        std::size_t depth_left;
    };
    for (std::size_t r = 0; r < cfg.replica; ++r) {
        std::vector<Work> stack;
        stack.push_back({rg.root, all, cfg.depth});
        while (!stack.empty()) {
            auto w = std::move(stack.back());
            stack.pop_back();
            std::shuffle(w.vars.begin(), w.vars.end(), rng);
            const auto cut = (w.vars.size() + 1) / 2;
            std::vector<std::size_t> lv(w.vars.begin(), w.vars.begin() + static_cast<std::ptrdiff_t>(cut));
            std::vector<std::size_t> rv(w.vars.begin() + static_cast<std::ptrdiff_t>(cut), w.vars.end());
            std::sort(lv.begin(), lv.end());
            std::sort(rv.begin(), rv.end());
            const auto left = rg.add_region(Scope(d_vars, lv));
            const auto right = rg.add_region(Scope(d_vars, rv));
            rg.add_partition(w.region, left, right);
            if (w.depth_left > 1) {
                stack.push_back({right, std::move(rv), w.depth_left - 1});
                stack.push_back({left, std::move(lv), w.depth_left - 1});
            }
        }
    }
    rg.assign_kinds();
    return rg;
}

namespace detail {

struct Rect {
    std::size_t top, left, height, width;
    auto key() const { return std::tie(top, left, height, width); }
    friend bool operator<(const Rect& a, const Rect& b) { return a.key() < b.key(); }
};

}  // namespace detail

/// Poon-Domingos structure. One region per distinct sub-rectangle, one
/// partition per (rectangle, axis, cut offset) where the offset is a positive
/// multiple of some delta. Pixels are indexed row-major.
inline RegionGraph poon_domingos(std::size_t height, std::size_t width, const PdConfig& cfg) {
    using detail::Rect;
    if (height == 0 || width == 0) throw ConfigError("PD structure needs a non-empty image");
    if (cfg.deltas.empty()) throw ConfigError("PD structure needs at least one delta");
    for (auto d : cfg.deltas)
        if (d < 1) throw ConfigError("PD deltas must be >= 1");

    const auto d_vars = height * width;
    RegionGraph rg;
    rg.d_vars = d_vars;

    std::map<Rect, std::size_t> ids;
    std::queue<Rect> pending;
    auto region_of = [&](const Rect& r) {
        if (auto it = ids.find(r); it != ids.end()) return it->second;
        Scope s(d_vars);
        for (std::size_t i = 0; i < r.height; ++i)
            for (std::size_t j = 0; j < r.width; ++j) s.insert((r.top + i) * width + r.left + j);
        const auto id = rg.add_region(std::move(s));
        ids.emplace(r, id);
        pending.push(r);
        return id;
    };
    auto cuts = [&](std::size_t extent) {
        std::set<std::size_t> out;
        for (auto d : cfg.deltas)
            for (std::size_t c = d; c < extent; c += d) out.insert(c);
        return out;
    };
    const bool vertical = cfg.axes != SplitAxes::horizontal;
    const bool horizontal = cfg.axes != SplitAxes::vertical;

    rg.root = region_of(Rect{0, 0, height, width});
    while (!pending.empty()) {
        const auto r = pending.front();
        pending.pop();
        const auto parent = ids.at(r);
        if (vertical)
            for (auto c : cuts(r.width)) {
                const auto l = region_of(Rect{r.top, r.left, r.height, c});
                const auto rr = region_of(Rect{r.top, r.left + c, r.height, r.width - c});
                rg.add_partition(parent, l, rr);
            }
        if (horizontal)
            for (auto c : cuts(r.height)) {
                const auto t = region_of(Rect{r.top, r.left, c, r.width});
                const auto b = region_of(Rect{r.top + c, r.left, r.height - c, r.width});
                rg.add_partition(parent, t, b);
            }
    }
    if (rg.partitions.empty()) throw ConfigError("PD structure: the image cannot be split by any delta");
    rg.assign_kinds();
    return rg;
}

/// Longest root-to-leaf path, counted in partitions.
inline std::size_t partition_depth(const RegionGraph& rg) {
    const auto children = rg.child_partitions();
    std::vector<std::size_t> memo(rg.regions.size(), SIZE_MAX);
    auto depth = [&](auto&& self, std::size_t r) -> std::size_t {
        if (memo[r] != SIZE_MAX) return memo[r];
        std::size_t best = 0;
        for (auto pid : children[r]) {
            const auto& p = rg.partitions[pid];
            best = std::max(best, 1 + std::max(self(self, p.left), self(self, p.right)));
        }
        return memo[r] = best;
    };
    return depth(depth, rg.root);
}

}  // namespace einet
