#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "einet/errors.hpp"
#include "einet/region_graph.hpp"

namespace einet {

enum class NodeKind { leaf, sum, product };

/// One pure-typed node set produced by topological layering.
/// Leaf and sum sets hold region ids, product sets hold partition ids.
struct NodeLayer {
    NodeKind kind;
    std::vector<std::size_t> ids;
};

/// Top-down breadth-first layering: alternately collect the unvisited sums
/// whose parents are all visited, then the unvisited products whose parents
/// are all visited, prepending each set. Leaves are prepended last, so the
/// result runs bottom-up and every node only depends on earlier layers.
inline std::vector<NodeLayer> topological_layers(const RegionGraph& rg) {
    require_valid(rg);
    const auto region_parents = rg.parent_partitions();
    const auto nr = rg.regions.size();
    const auto np = rg.partitions.size();

    std::vector<char> region_done(nr, 0), partition_done(np, 0);
    std::size_t num_sums = 0;
    for (const auto& r : rg.regions)
        if (r.kind != RegionKind::leaf) ++num_sums;

    std::vector<NodeLayer> top_down;
    std::size_t visited = 0;
    while (visited < num_sums + np) {
        NodeLayer sums{NodeKind::sum, {}};
        for (const auto& r : rg.regions) {
            if (r.kind == RegionKind::leaf || region_done[r.id]) continue;
            const auto& pa = region_parents[r.id];
            if (std::all_of(pa.begin(), pa.end(), [&](auto p) { return partition_done[p] != 0; }))
                sums.ids.push_back(r.id);
        }
        for (auto id : sums.ids) region_done[id] = 1;

        NodeLayer products{NodeKind::product, {}};
        for (const auto& p : rg.partitions)
            if (!partition_done[p.id] && region_done[p.parent]) products.ids.push_back(p.id);
        for (auto id : products.ids) partition_done[id] = 1;

        if (sums.ids.empty() && products.ids.empty())
            throw StructureError("topological layering made no progress (cycle)");
        visited += sums.ids.size() + products.ids.size();
        top_down.push_back(std::move(sums));
        top_down.push_back(std::move(products));
    }

    std::vector<NodeLayer> layers;
    layers.push_back({NodeKind::leaf, rg.leaf_regions()});
    for (auto it = top_down.rbegin(); it != top_down.rend(); ++it)
        if (!it->ids.empty()) layers.push_back(std::move(*it));
    return layers;
}

/// Leaf region -> replica index. Leaves sharing a replica have disjoint scopes.
struct ReplicaAssignment {
    static constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
    std::vector<std::size_t> of_region;  // indexed by region id, `none` for non-leaf regions
    std::size_t num_replica = 0;
};

/// Greedy first-fit coloring of the leaf conflict graph (edge iff scopes
/// intersect). Leaves are visited by descending scope size, then id.
inline ReplicaAssignment assign_replica(const RegionGraph& rg) {
    auto leaves = rg.leaf_regions();
    std::stable_sort(leaves.begin(), leaves.end(), [&](auto a, auto b) {
        return rg.regions[a].scope.size() > rg.regions[b].scope.size();
    });

    ReplicaAssignment out;
    out.of_region.assign(rg.regions.size(), ReplicaAssignment::none);
    // per color: union of the scopes already holding that color
    std::vector<Scope> occupied;
    for (auto id : leaves) {
        const auto& scope = rg.regions[id].scope;
        std::size_t color = 0;
        while (color < occupied.size() && occupied[color].intersects(scope)) ++color;
        if (color == occupied.size()) occupied.emplace_back(rg.d_vars);
        occupied[color] = occupied[color] | scope;
        out.of_region[id] = color;
    }
    out.num_replica = std::max<std::size_t>(occupied.size(), 1);
    return out;
}

enum class LayerKind { leaf, einsum, mixing };

struct LeafLayerPlan {
    std::vector<std::size_t> region;                 // leaf region per row
    std::vector<std::size_t> replica;                // replica per row
    std::vector<std::vector<std::size_t>> vars;      // scope per row
};

/// L (sum vector, partition) pairs computed by one batched contraction.
/// left/right are global rows of earlier outputs.
struct EinsumLayerPlan {
    std::vector<std::size_t> left;
    std::vector<std::size_t> right;
    std::vector<std::size_t> region;
    std::vector<std::size_t> partition;
};

/// M aggregated sums over the simple-sum rows of the preceding einsum layer.
/// `sources` is M x dmax, row-major; padded slots have mask 0.
struct MixingLayerPlan {
    std::size_t dmax = 0;
    std::vector<std::size_t> sources;
    std::vector<std::uint8_t> mask;
    std::vector<std::size_t> region;

    std::size_t rows() const { return region.size(); }
};

struct Layer {
    LayerKind kind = LayerKind::leaf;
    std::size_t first_row = 0;     // global row index of the first row
    std::size_t num_rows = 0;
    std::size_t width = 0;         // values per row (K, or K_root for root layers)
    std::size_t value_offset = 0;  // offset of the first value in a per-sample buffer
    std::variant<LeafLayerPlan, EinsumLayerPlan, MixingLayerPlan> plan;

    const LeafLayerPlan& leaf() const { return std::get<LeafLayerPlan>(plan); }
    const EinsumLayerPlan& einsum() const { return std::get<EinsumLayerPlan>(plan); }
    const MixingLayerPlan& mixing() const { return std::get<MixingLayerPlan>(plan); }
};

/// Executable, topologically ordered layers. Non-root rows all have width K
/// and precede the root layers, so a gathered row g starts at value g*K.
struct LayeredCircuit {
    std::size_t d_vars = 0;
    std::size_t k = 1;
    std::size_t k_root = 1;
    ReplicaAssignment replica;
    std::vector<Layer> layers;
    std::vector<std::size_t> region_row;  // global output row of every region
    std::size_t root_row = 0;
    std::size_t total_rows = 0;
    std::size_t total_values = 0;  // per-sample buffer length
    std::vector<std::size_t> row_offset;  // per global row: offset of its first value

    std::size_t num_replica() const { return replica.num_replica; }

    /// Layer index and local row of a global row.
    std::pair<std::size_t, std::size_t> locate(std::size_t global_row) const {
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (global_row >= layers[i].first_row && global_row < layers[i].first_row + layers[i].num_rows)
                return {i, global_row - layers[i].first_row};
        throw ConfigError("global row out of range");
    }
};

/// Flattens a region graph into leaf, einsum and mixing layers. Regions with
/// one partition become a single einsum row; regions with C > 1 partitions
/// become C simple-sum einsum rows followed by one mixing row.
inline LayeredCircuit compile(const RegionGraph& rg, std::size_t k, std::size_t k_root = 1) {
    if (k < 1 || k_root < 1) throw ConfigError("K and K_root must be >= 1");
    const auto node_layers = topological_layers(rg);
    const auto children = rg.child_partitions();

    LayeredCircuit c;
    c.d_vars = rg.d_vars;
    c.k = k;
    c.k_root = k_root;
    c.replica = assign_replica(rg);
    c.region_row.assign(rg.regions.size(), ReplicaAssignment::none);

    auto push_layer = [&](LayerKind kind, std::size_t rows, std::size_t width, auto plan) {
        Layer l;
        l.kind = kind;
        l.first_row = c.total_rows;
        l.num_rows = rows;
        l.width = width;
        l.value_offset = c.total_values;
        l.plan = std::move(plan);
        for (std::size_t r = 0; r < rows; ++r) c.row_offset.push_back(c.total_values + r * width);
        c.total_rows += rows;
        c.total_values += rows * width;
        c.layers.push_back(std::move(l));
    };

    {
        LeafLayerPlan leaf;
        for (auto id : node_layers.front().ids) {
            c.region_row[id] = c.total_rows + leaf.region.size();
            leaf.region.push_back(id);
            leaf.replica.push_back(c.replica.of_region[id]);
            leaf.vars.push_back(rg.regions[id].scope.indices());
        }
        const auto rows = leaf.region.size();
        push_layer(LayerKind::leaf, rows, k, std::move(leaf));
    }

    for (std::size_t i = 1; i + 1 < node_layers.size(); i += 2) {
        const auto& products = node_layers[i];
        const auto& sums = node_layers[i + 1];
        if (products.kind != NodeKind::product || sums.kind != NodeKind::sum)
            throw StructureError("unexpected layer ordering");
        const bool is_root = std::find(sums.ids.begin(), sums.ids.end(), rg.root) != sums.ids.end();
        if (is_root && sums.ids.size() != 1) throw StructureError("root must be alone in its sum layer");
        const auto width = is_root ? k_root : k;

        EinsumLayerPlan ein;
        std::vector<std::size_t> partition_row(rg.partitions.size(), ReplicaAssignment::none);
        // rows grouped by parent region so that simple sums of one region are adjacent
        for (auto region : sums.ids)
            for (auto pid : children[region]) {
                const auto& p = rg.partitions[pid];
                if (c.region_row[p.left] == ReplicaAssignment::none || c.region_row[p.right] == ReplicaAssignment::none)
                    throw StructureError("partition child not computed before its parent");
                partition_row[pid] = c.total_rows + ein.left.size();
                ein.left.push_back(c.region_row[p.left]);
                ein.right.push_back(c.region_row[p.right]);
                ein.region.push_back(region);
                ein.partition.push_back(pid);
            }
        if (ein.left.size() != products.ids.size())
            throw StructureError("product layer does not match the partitions of its sum layer");
        const auto rows = ein.left.size();
        push_layer(LayerKind::einsum, rows, width, std::move(ein));

        MixingLayerPlan mix;
        for (auto region : sums.ids)
            mix.dmax = std::max(mix.dmax, children[region].size());
        if (mix.dmax <= 1) {
            for (auto region : sums.ids) c.region_row[region] = partition_row[children[region].front()];
            continue;
        }
        for (auto region : sums.ids) {
            const auto& ch = children[region];
            if (ch.size() == 1) {
                c.region_row[region] = partition_row[ch.front()];
                continue;
            }
            c.region_row[region] = c.total_rows + mix.region.size();
            mix.region.push_back(region);
            for (std::size_t s = 0; s < mix.dmax; ++s) {
                mix.sources.push_back(s < ch.size() ? partition_row[ch[s]] : 0);
                mix.mask.push_back(s < ch.size() ? 1 : 0);
            }
        }
        const auto mrows = mix.region.size();
        push_layer(LayerKind::mixing, mrows, width, std::move(mix));
    }

    c.root_row = c.region_row[rg.root];
    for (const auto& l : c.layers) {
        if (l.kind != LayerKind::einsum) continue;
        for (std::size_t r = 0; r < l.num_rows; ++r) {
            const auto li = c.locate(l.einsum().left[r]).first;
            const auto ri = c.locate(l.einsum().right[r]).first;
            if (c.layers[li].width != k || c.layers[ri].width != k)
                throw StructureError("einsum gather references a root-width row");
        }
    }
    return c;
}

inline const char* to_string(LayerKind k) {
    switch (k) {
        case LayerKind::leaf: return "leaf";
        case LayerKind::einsum: return "einsum";
        case LayerKind::mixing: return "mixing";
    }
    return "unknown";
}

/// Debug view of the execution plan.
inline nlohmann::json plan_to_json(const LayeredCircuit& c) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : c.layers) {
        nlohmann::json j{{"kind", to_string(l.kind)},
                         {"first_row", l.first_row},
                         {"rows", l.num_rows},
                         {"width", l.width}};
        if (l.kind == LayerKind::leaf) {
            j["regions"] = l.leaf().region;
            j["replica"] = l.leaf().replica;
        } else if (l.kind == LayerKind::einsum) {
            j["left"] = l.einsum().left;
            j["right"] = l.einsum().right;
            j["regions"] = l.einsum().region;
            j["partitions"] = l.einsum().partition;
        } else {
            j["dmax"] = l.mixing().dmax;
            j["sources"] = l.mixing().sources;
            j["mask"] = l.mixing().mask;
            j["regions"] = l.mixing().region;
        }
        layers.push_back(std::move(j));
    }
    return {{"d_vars", c.d_vars},     {"k", c.k},
            {"k_root", c.k_root},     {"num_replica", c.num_replica()},
            {"root_row", c.root_row}, {"layers", layers}};
}

}  // namespace einet
