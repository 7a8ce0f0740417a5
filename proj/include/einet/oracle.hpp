#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "einet/errors.hpp"
#include "einet/expfam.hpp"
#include "einet/model.hpp"
#include "einet/tensor.hpp"

// Reference implementations. Everything here works one scalar node at a
// time and shares no evaluation code with the layered engine.
namespace einet::oracle {

struct ScalarNode {
    enum class Kind { leaf, product, sum } kind = Kind::leaf;
    std::size_t var = 0, k = 0, replica = 0;  // leaf
    std::vector<std::size_t> children;
    std::vector<double> weights;  // sum
};

/// One node per vector entry; nodes are stored children-first.
struct ScalarCircuit {
    std::size_t d_vars = 0;
    EfParams leaves;
    std::vector<ScalarNode> nodes;
    std::size_t root = 0;

    std::size_t count(ScalarNode::Kind kind) const {
        return static_cast<std::size_t>(
            std::count_if(nodes.begin(), nodes.end(), [&](const auto& n) { return n.kind == kind; }));
    }
};

/// Expands the vectorized model into scalar nodes: leaf region entries become
/// products of univariate leaves, einsum entries become sums over K^2 product
/// nodes, mixing entries become sums over their simple sums.
inline ScalarCircuit expand(const Model& m, std::size_t root_entry = 0) {
    const auto& c = m.circuit;
    const auto k = c.k;
    ScalarCircuit sc;
    sc.d_vars = c.d_vars;
    sc.leaves = m.params.leaves;
    std::vector<std::vector<std::size_t>> entry_node(c.total_rows);
    auto add = [&](ScalarNode n) {
        sc.nodes.push_back(std::move(n));
        return sc.nodes.size() - 1;
    };

    for (std::size_t li = 0; li < c.layers.size(); ++li) {
        const auto& layer = c.layers[li];
        for (std::size_t r = 0; r < layer.num_rows; ++r) {
            auto& entries = entry_node[layer.first_row + r];
            if (layer.kind == LayerKind::leaf) {
                const auto& plan = layer.leaf();
                for (std::size_t kk = 0; kk < k; ++kk) {
                    std::vector<std::size_t> leaves;
                    for (auto v : plan.vars[r]) {
                        ScalarNode n;
                        n.var = v;
                        n.k = kk;
                        n.replica = plan.replica[r];
                        leaves.push_back(add(std::move(n)));
                    }
                    if (leaves.size() == 1) {
                        entries.push_back(leaves.front());
                    } else {
                        ScalarNode p;
                        p.kind = ScalarNode::Kind::product;
                        p.children = std::move(leaves);
                        entries.push_back(add(std::move(p)));
                    }
                }
            } else if (layer.kind == LayerKind::einsum) {
                const auto& plan = layer.einsum();
                const auto& left = entry_node[plan.left[r]];
                const auto& right = entry_node[plan.right[r]];
                std::vector<std::size_t> products;
                for (std::size_t i = 0; i < k; ++i)
                    for (std::size_t j = 0; j < k; ++j) {
                        ScalarNode p;
                        p.kind = ScalarNode::Kind::product;
                        p.children = {left[i], right[j]};
                        products.push_back(add(std::move(p)));
                    }
                const auto& w = m.params.weights[li];
                for (std::size_t kk = 0; kk < layer.width; ++kk) {
                    ScalarNode s;
                    s.kind = ScalarNode::Kind::sum;
                    s.children = products;
                    const auto off = (r * layer.width + kk) * k * k;
                    s.weights.assign(w.begin() + static_cast<std::ptrdiff_t>(off),
                                     w.begin() + static_cast<std::ptrdiff_t>(off + k * k));
                    entries.push_back(add(std::move(s)));
                }
            } else {
                const auto& plan = layer.mixing();
                const auto& w = m.params.weights[li];
                for (std::size_t kk = 0; kk < layer.width; ++kk) {
                    ScalarNode s;
                    s.kind = ScalarNode::Kind::sum;
                    for (std::size_t d = 0; d < plan.dmax; ++d) {
                        if (!plan.mask[r * plan.dmax + d]) continue;
                        s.children.push_back(entry_node[plan.sources[r * plan.dmax + d]][kk]);
                        s.weights.push_back(w[r * plan.dmax + d]);
                    }
                    entries.push_back(add(std::move(s)));
                }
            }
        }
    }
    sc.root = entry_node[c.root_row].at(root_entry);
    return sc;
}

inline double log_sum_exp(std::span<const double> v, std::span<const double> w) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < v.size(); ++i)
        if (w[i] != 0) mx = std::max(mx, v[i]);
    if (mx == -std::numeric_limits<double>::infinity()) return mx;
    double s = 0;
    for (std::size_t i = 0; i < v.size(); ++i)
        if (w[i] != 0) s += w[i] * std::exp(v[i] - mx);
    return mx + std::log(s);
}

namespace detail {

template <class Values>
double node_value(const ScalarCircuit& sc, const ScalarNode& n, const Values& val,
                         std::span<const double> x, std::span<const std::uint8_t> mask) {
    switch (n.kind) {
        case ScalarNode::Kind::leaf:
            if (!mask.empty() && mask[n.var]) return 0.0;
            return ef::log_prob_natural(sc.leaves.spec, sc.leaves.at(n.var, n.k, n.replica), x[n.var]);
        case ScalarNode::Kind::product: {
            double s = 0;
            for (auto ch : n.children) s += val[ch];
            return s;
        }
        case ScalarNode::Kind::sum: {
            std::vector<double> v(n.children.size());
            for (std::size_t i = 0; i < v.size(); ++i) v[i] = val[n.children[i]];
            return log_sum_exp(v, n.weights);
        }
    }
    return 0.0;
}

}  // namespace detail

/// Log-density of one sample, evaluating nodes in storage order.
inline double scalar_eval(const ScalarCircuit& sc, std::span<const double> x, std::span<const std::uint8_t> mask = {}) {
    Buffer<double> val(sc.nodes.size());
    for (std::size_t i = 0; i < sc.nodes.size(); ++i) val[i] = detail::node_value(sc, sc.nodes[i], val, x, mask);
    return val[sc.root];
}

/// Reverse pass over scalar nodes. Returns d logP / d w for every sum-node
/// weight, laid out per node in child order, and adds into `grad` (one
/// vector per node, sized like its weights).
inline double scalar_grad(const ScalarCircuit& sc, std::span<const double> x, std::vector<std::vector<double>>& grad,
                          std::span<const std::uint8_t> mask = {}) {
    const auto n = sc.nodes.size();
    Buffer<double> val(n), adj(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) val[i] = detail::node_value(sc, sc.nodes[i], val, x, mask);
    if (grad.size() != n) {
        grad.assign(n, {});
        for (std::size_t i = 0; i < n; ++i) grad[i].assign(sc.nodes[i].weights.size(), 0.0);
    }
    adj[sc.root] = 1.0;
    for (std::size_t i = n; i-- > 0;) {
        const auto& node = sc.nodes[i];
        if (adj[i] == 0.0 || node.kind == ScalarNode::Kind::leaf) continue;
        if (node.kind == ScalarNode::Kind::product) {
            for (auto ch : node.children) adj[ch] += adj[i];
            continue;
        }
        if (val[i] == -std::numeric_limits<double>::infinity()) continue;
        for (std::size_t c = 0; c < node.children.size(); ++c) {
            const double r = std::exp(val[node.children[c]] - val[i]);
            grad[i][c] += adj[i] * r;
            adj[node.children[c]] += adj[i] * node.weights[c] * r;
        }
    }
    return val[sc.root];
}

/// Same as scalar_eval, but nodes are visited in the order given (which must
/// be topological).
inline double scalar_eval_ordered(const ScalarCircuit& sc, std::span<const std::size_t> order, std::span<const double> x,
                                  std::span<const std::uint8_t> mask = {}) {
    std::vector<double> val(sc.nodes.size(), std::numeric_limits<double>::quiet_NaN());
    for (auto i : order) val[i] = detail::node_value(sc, sc.nodes[i], val, x, mask);
    return val[sc.root];
}

/// Linear-domain evaluation, valid only when nothing underflows.
inline double scalar_eval_linear(const ScalarCircuit& sc, std::span<const double> x, std::span<const std::uint8_t> mask = {}) {
    std::vector<double> val(sc.nodes.size());
    for (std::size_t i = 0; i < sc.nodes.size(); ++i) {
        const auto& n = sc.nodes[i];
        switch (n.kind) {
            case ScalarNode::Kind::leaf:
                val[i] = (!mask.empty() && mask[n.var])
                             ? 1.0
                             : std::exp(ef::log_prob_natural(sc.leaves.spec, sc.leaves.at(n.var, n.k, n.replica), x[n.var]));
                break;
            case ScalarNode::Kind::product:
                val[i] = 1.0;
                for (auto ch : n.children) val[i] *= val[ch];
                break;
            case ScalarNode::Kind::sum:
                val[i] = 0.0;
                for (std::size_t c = 0; c < n.children.size(); ++c) val[i] += n.weights[c] * val[n.children[c]];
                break;
        }
    }
    return std::log(val[sc.root]);
}

/// log of the sum of exp(scalar_eval) over every completion of the
/// unassigned variables (assigned[v] == 0). Requires discrete leaves.
inline double exhaustive_marginal(const ScalarCircuit& sc, std::span<const double> x, std::span<const std::uint8_t> assigned) {
    const auto& spec = sc.leaves.spec;
    std::vector<std::size_t> free;
    for (std::size_t v = 0; v < sc.d_vars; ++v)
        if (!assigned[v]) free.push_back(v);
    if (free.empty()) return scalar_eval(sc, x);
    if (!spec.discrete()) throw ConfigError("exhaustive_marginal: continuous unassigned variables are unsupported");

    const auto base = spec.support_size();
    std::vector<double> full(x.begin(), x.end());
    std::vector<std::size_t> digits(free.size(), 0);
    std::vector<double> terms;
    for (;;) {
        for (std::size_t i = 0; i < free.size(); ++i) full[free[i]] = static_cast<double>(digits[i]);
        terms.push_back(scalar_eval(sc, full));
        std::size_t pos = 0;
        while (pos < digits.size() && ++digits[pos] == base) digits[pos++] = 0;
        if (pos == digits.size()) break;
    }
    const std::vector<double> ones(terms.size(), 1.0);
    return log_sum_exp(terms, ones);
}

/// Names one raw parameter entry: a weight (layer, index) or a leaf phi index.
struct EntrySelector {
    enum class Target { weight, leaf } target = Target::weight;
    std::size_t layer = 0;
    std::size_t index = 0;
};

inline double mean_scalar_ll(const Model& m, const Dataset& x) {
    const auto sc = expand(m);
    double total = 0;
    for (std::size_t b = 0; b < x.num_samples; ++b) total += scalar_eval(sc, x.row(b));
    return total / static_cast<double>(x.num_samples);
}

/// Central difference of the mean log-likelihood with respect to one raw
/// entry (no renormalization after the perturbation).
inline double finite_diff_grad(const Model& m, const Dataset& x, const EntrySelector& sel, double step) {
    if (!(step > 0)) throw ConfigError("finite_diff_grad: step must be positive");
    auto perturbed = [&](double delta) {
        Model copy = m;
        if (sel.target == EntrySelector::Target::weight) copy.params.weights.at(sel.layer).at(sel.index) += delta;
        else copy.params.leaves.phi.at(sel.index) += delta;
        return mean_scalar_ll(copy, x);
    };
    return (perturbed(step) - perturbed(-step)) / (2.0 * step);
}

}  // namespace einet::oracle
