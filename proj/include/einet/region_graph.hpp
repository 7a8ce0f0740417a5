#pragma once

#include <cstddef>
#include <queue>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "einet/errors.hpp"
#include "einet/scope.hpp"

namespace einet {

enum class RegionKind { leaf, inner, root };

struct Region {
    std::size_t id = 0;
    Scope scope;
    RegionKind kind = RegionKind::leaf;
};

/// Binary product over two child regions, owned by exactly one parent region.
struct Partition {
    std::size_t id = 0;
    std::size_t parent = 0;
    std::size_t left = 0;
    std::size_t right = 0;
};

/// Bipartite DAG of scoped regions and partitions. Ids equal vector positions.
struct RegionGraph {
    std::size_t d_vars = 0;
    std::vector<Region> regions;
    std::vector<Partition> partitions;
    std::size_t root = 0;

    std::size_t add_region(Scope scope) {
        const auto id = regions.size();
        regions.push_back(Region{id, std::move(scope), RegionKind::leaf});
        return id;
    }

    std::size_t add_partition(std::size_t parent, std::size_t left, std::size_t right) {
        const auto id = partitions.size();
        partitions.push_back(Partition{id, parent, left, right});
        return id;
    }

    /// Child partitions of every region, ordered by partition id.
    std::vector<std::vector<std::size_t>> child_partitions() const {
        std::vector<std::vector<std::size_t>> out(regions.size());
        for (const auto& p : partitions)
            if (p.parent < regions.size()) out[p.parent].push_back(p.id);
        return out;
    }

    /// Parent partitions of every region, ordered by partition id.
    std::vector<std::vector<std::size_t>> parent_partitions() const {
        std::vector<std::vector<std::size_t>> out(regions.size());
        for (const auto& p : partitions) {
            if (p.left < regions.size()) out[p.left].push_back(p.id);
            if (p.right < regions.size() && p.right != p.left) out[p.right].push_back(p.id);
        }
        return out;
    }

    std::vector<std::size_t> leaf_regions() const {
        std::vector<std::size_t> out;
        for (const auto& r : regions)
            if (r.kind == RegionKind::leaf) out.push_back(r.id);
        return out;
    }

    /// Recomputes region kinds from the partition structure.
    void assign_kinds() {
        const auto children = child_partitions();
        for (auto& r : regions) {
            if (r.id == root) r.kind = RegionKind::root;
            else r.kind = children[r.id].empty() ? RegionKind::leaf : RegionKind::inner;
        }
    }
};

enum class Rule {
    id_mismatch,
    dangling_reference,
    empty_scope,
    decomposability,
    completeness,
    leaf_with_partitions,
    inner_without_partitions,
    orphan_region,
    root_scope,
    root_has_parent,
    cycle,
};

inline const char* to_string(Rule r) {
    switch (r) {
        case Rule::id_mismatch: return "id_mismatch";
        case Rule::dangling_reference: return "dangling_reference";
        case Rule::empty_scope: return "empty_scope";
        case Rule::decomposability: return "decomposability";
        case Rule::completeness: return "completeness";
        case Rule::leaf_with_partitions: return "leaf_with_partitions";
        case Rule::inner_without_partitions: return "inner_without_partitions";
        case Rule::orphan_region: return "orphan_region";
        case Rule::root_scope: return "root_scope";
        case Rule::root_has_parent: return "root_has_parent";
        case Rule::cycle: return "cycle";
    }
    return "unknown";
}

struct Violation {
    Rule rule;
    std::string node;  // "region" or "partition"
    std::size_t id;
    std::string message;
};

/// Checks smoothness, decomposability and the structural invariants.
/// Returns an empty list iff the graph is valid.
inline std::vector<Violation> validate(const RegionGraph& rg) {
    std::vector<Violation> out;
    auto report = [&](Rule rule, const char* node, std::size_t id, std::string msg) {
        out.push_back(Violation{rule, node, id, std::move(msg)});
    };
    const auto nr = rg.regions.size();

    for (std::size_t i = 0; i < nr; ++i) {
        const auto& r = rg.regions[i];
        if (r.id != i) report(Rule::id_mismatch, "region", i, "region id does not match its position");
        if (r.scope.empty()) report(Rule::empty_scope, "region", i, "region has an empty scope");
    }
    if (rg.root >= nr) {
        report(Rule::dangling_reference, "region", rg.root, "root id out of range");
        return out;
    }

    bool partitions_ok = true;
    for (std::size_t i = 0; i < rg.partitions.size(); ++i) {
        const auto& p = rg.partitions[i];
        if (p.id != i) report(Rule::id_mismatch, "partition", i, "partition id does not match its position");
        if (p.parent >= nr || p.left >= nr || p.right >= nr) {
            report(Rule::dangling_reference, "partition", i, "partition references a missing region");
            partitions_ok = false;
            continue;
        }
        const auto& l = rg.regions[p.left].scope;
        const auto& r = rg.regions[p.right].scope;
        if (p.left == p.right || l.intersects(r))
            report(Rule::decomposability, "partition", i, "child scopes overlap");
        if (!((l | r) == rg.regions[p.parent].scope))
            report(Rule::completeness, "partition", i, "union of child scopes differs from parent scope");
        if (p.left == p.parent || p.right == p.parent)
            report(Rule::cycle, "partition", i, "partition is its own ancestor");
    }
    if (!partitions_ok) return out;

    const auto children = rg.child_partitions();
    const auto parents = rg.parent_partitions();
    for (std::size_t i = 0; i < nr; ++i) {
        const auto& r = rg.regions[i];
        if (r.kind == RegionKind::leaf && !children[i].empty())
            report(Rule::leaf_with_partitions, "region", i, "leaf region has child partitions");
        if (r.kind != RegionKind::leaf && children[i].empty())
            report(Rule::inner_without_partitions, "region", i, "inner/root region has no child partition");
        if (i == rg.root) {
            if (!parents[i].empty()) report(Rule::root_has_parent, "region", i, "root region has a parent partition");
            if (!(r.scope == Scope::full(rg.d_vars)))
                report(Rule::root_scope, "region", i, "root scope is not the full variable set");
        } else if (parents[i].empty()) {
            report(Rule::orphan_region, "region", i, "non-root region has no parent partition");
        }
    }

    // Kahn's algorithm over regions (edges parent region -> child region).
    std::vector<std::size_t> indegree(nr, 0);
    for (const auto& p : rg.partitions) {
        ++indegree[p.left];
        ++indegree[p.right];
    }
    std::queue<std::size_t> ready;
    for (std::size_t i = 0; i < nr; ++i)
        if (indegree[i] == 0) ready.push(i);
    std::size_t seen = 0;
    while (!ready.empty()) {
        const auto r = ready.front();
        ready.pop();
        ++seen;
        for (auto pid : children[r]) {
            const auto& p = rg.partitions[pid];
            if (--indegree[p.left] == 0) ready.push(p.left);
            if (--indegree[p.right] == 0) ready.push(p.right);
        }
    }
    if (seen != nr) report(Rule::cycle, "region", rg.root, "region graph contains a cycle");
    return out;
}

inline void require_valid(const RegionGraph& rg) {
    const auto v = validate(rg);
    if (!v.empty())
        throw StructureError("invalid region graph: " + std::string(to_string(v.front().rule)) + " at " +
                             v.front().node + " " + std::to_string(v.front().id) + " (" + v.front().message + ")");
}

inline nlohmann::json to_json(const RegionGraph& rg) {
    nlohmann::json regions = nlohmann::json::array();
    for (const auto& r : rg.regions) regions.push_back({{"id", r.id}, {"scope", r.scope.indices()}});
    nlohmann::json partitions = nlohmann::json::array();
    for (const auto& p : rg.partitions)
        partitions.push_back({{"id", p.id}, {"parent", p.parent}, {"left", p.left}, {"right", p.right}});
    return {{"d_vars", rg.d_vars}, {"regions", regions}, {"partitions", partitions}, {"root", rg.root}};
}

inline RegionGraph region_graph_from_json(const nlohmann::json& j) {
    RegionGraph rg;
    rg.d_vars = j.at("d_vars").get<std::size_t>();
    for (const auto& r : j.at("regions")) {
        const auto id = r.at("id").get<std::size_t>();
        if (id != rg.regions.size()) throw FormatError("region ids must be dense and ascending");
        rg.add_region(Scope(rg.d_vars, r.at("scope").get<std::vector<std::size_t>>()));
    }
    for (const auto& p : j.at("partitions")) {
        const auto id = p.at("id").get<std::size_t>();
        if (id != rg.partitions.size()) throw FormatError("partition ids must be dense and ascending");
        rg.add_partition(p.at("parent").get<std::size_t>(), p.at("left").get<std::size_t>(),
                         p.at("right").get<std::size_t>());
    }
    rg.root = j.at("root").get<std::size_t>();
    if (rg.root >= rg.regions.size()) throw FormatError("root id out of range");
    for (const auto& p : rg.partitions)
        if (p.parent >= rg.regions.size() || p.left >= rg.regions.size() || p.right >= rg.regions.size())
            throw FormatError("partition references a missing region");
    rg.assign_kinds();
    return rg;
}

}  // namespace einet
