#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "einet/compiler.hpp"
#include "einet/errors.hpp"
#include "einet/expfam.hpp"
#include "einet/model.hpp"
#include "einet/tensor.hpp"

namespace einet {

template <class Real>
using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

template <class Real>
inline constexpr Real neg_inf = -std::numeric_limits<Real>::infinity();

/// Shifted linear-domain copy of a log vector. Returns the shift (its max),
/// or -inf when every entry is -inf.
template <class Real>
Real exp_shifted(const Real* logv, std::size_t k, Real* out) {
    Real a = neg_inf<Real>;
    for (std::size_t i = 0; i < k; ++i) a = std::max(a, logv[i]);
    if (a == neg_inf<Real>) {
        std::fill_n(out, k, Real(0));
        return a;
    }
    for (std::size_t i = 0; i < k; ++i) out[i] = std::exp(logv[i] - a);
    return a;
}

template <class Real>
bool any_nan(const Real* v, std::size_t k) {
    for (std::size_t i = 0; i < k; ++i)
        if (std::isnan(v[i])) return true;
    return false;
}

/// Weight tensors in the engine's working precision.
template <class Real>
class WeightView {
public:
    explicit WeightView(const Parameters& p) : params_(p) {
        if constexpr (!std::is_same_v<Real, double>) {
            converted_.resize(p.weights.size());
            for (std::size_t i = 0; i < p.weights.size(); ++i)
                converted_[i].assign(p.weights[i].begin(), p.weights[i].end());
        }
    }
    const Real* layer(std::size_t i) const {
        if constexpr (std::is_same_v<Real, double>) return params_.weights[i].data();
        else return converted_[i].data();
    }

private:
    const Parameters& params_;
    std::vector<Buffer<Real>> converted_;
};

/// Batched log-einsum-exp for one layer row:
///   out_b[k] = a_b + a'_b + log sum_ij W[k,i,j] exp(N_b[i] - a_b) exp(N'_b[j] - a'_b).
/// `left(b)`, `right(b)`, `out(b)` return pointers to sample b's vectors.
/// A -inf shift makes the whole output row -inf.
template <class Real, class Left, class Right, class Out>
void einsum_row(std::size_t batch, std::size_t k, std::size_t k_out, const Real* w, Left left, Right right, Out out,
                Buffer<Real>& outer, Buffer<Real>& result, std::vector<Real>& shift, std::size_t layer_index,
                std::size_t row) {
    const auto kk = k * k;
    outer.resize(batch * kk);
    result.resize(batch * k_out);
    shift.resize(batch);
    std::vector<Real> pn(k), pm(k);
    for (std::size_t b = 0; b < batch; ++b) {
        const Real* ln = left(b);
        const Real* rn = right(b);
        if (any_nan(ln, k) || any_nan(rn, k))
            throw EngineError("NaN input at layer " + std::to_string(layer_index) + ", row " + std::to_string(row));
        const Real a = exp_shifted(ln, k, pn.data());
        const Real a2 = exp_shifted(rn, k, pm.data());
        Real* o = outer.data() + b * kk;
        if (a == neg_inf<Real> || a2 == neg_inf<Real>) {
            shift[b] = neg_inf<Real>;
            std::fill_n(o, kk, Real(0));
            continue;
        }
        shift[b] = a + a2;
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) o[i * k + j] = pn[i] * pm[j];
    }
    Eigen::Map<const RowMatrix<Real>> o_mat(outer.data(), static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(kk));
    Eigen::Map<const RowMatrix<Real>> w_mat(w, static_cast<Eigen::Index>(k_out), static_cast<Eigen::Index>(kk));
    Eigen::Map<RowMatrix<Real>> s_mat(result.data(), static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(k_out));
    s_mat.noalias() = o_mat * w_mat.transpose();
    for (std::size_t b = 0; b < batch; ++b) {
        Real* dst = out(b);
        for (std::size_t kk2 = 0; kk2 < k_out; ++kk2) {
            const Real s = result[b * k_out + kk2];
            dst[kk2] = (shift[b] == neg_inf<Real> || !(s > 0)) ? neg_inf<Real> : shift[b] + std::log(s);
        }
    }
}

}  // namespace detail

/// Log-domain contraction of L row pairs: logN and logN2 are L x K, W is
/// L x K_out x K x K (linear domain). Returns L x K_out.
template <class Real = double>
std::vector<Real> log_einsum_exp(std::span<const Real> log_n, std::span<const Real> log_n2, std::span<const Real> w,
                                 std::size_t rows, std::size_t k, std::size_t k_out) {
    if (log_n.size() != rows * k || log_n2.size() != rows * k || w.size() != rows * k_out * k * k)
        throw ConfigError("log_einsum_exp: shape mismatch");
    std::vector<Real> out(rows * k_out);
    Buffer<Real> outer, result;
    std::vector<Real> shift;
    for (std::size_t l = 0; l < rows; ++l)
        detail::einsum_row<Real>(
            1, k, k_out, w.data() + l * k_out * k * k, [&](std::size_t) { return log_n.data() + l * k; },
            [&](std::size_t) { return log_n2.data() + l * k; }, [&](std::size_t) { return out.data() + l * k_out; },
            outer, result, shift, 0, l);
    return out;
}

struct ForwardOptions {
    std::size_t root_entry = 0;
    /// Test hook: adds a constant to every entry of one leaf region's row.
    std::optional<std::pair<std::size_t, double>> leaf_shift;
};

/// All layer outputs of one batch, per sample a buffer of circuit.total_values.
template <class Real = double>
struct ForwardPass {
    const LayeredCircuit* circuit = nullptr;
    std::size_t batch = 0;
    std::size_t stride = 0;
    std::size_t root_entry = 0;
    Buffer<Real> values;
    std::vector<std::uint8_t> mask;
    std::vector<double> log_likelihood;  // root entry per sample

    const Real* row(std::size_t b, std::size_t global_row) const {
        return values.data() + b * stride + circuit->row_offset[global_row];
    }
    std::vector<double> root_values(std::size_t b) const {
        const Real* r = row(b, circuit->root_row);
        return std::vector<double>(r, r + circuit->k_root);
    }
};

inline void check_mask(const LayeredCircuit& c, std::span<const std::uint8_t> mask) {
    if (!mask.empty() && mask.size() != c.d_vars)
        throw ConfigError("marginalization mask has " + std::to_string(mask.size()) + " entries, expected " +
                          std::to_string(c.d_vars));
}

inline void check_shapes(const Model& m) {
    const auto& c = m.circuit;
    if (m.params.weights.size() != c.layers.size()) throw ConfigError("weight list does not match circuit layers");
    for (std::size_t i = 0; i < c.layers.size(); ++i)
        if (m.params.weights[i].size() != weight_count(c, i))
            throw ConfigError("weight tensor of layer " + std::to_string(i) + " has the wrong size");
}

/// Batched forward pass: leaf layer, then every einsum/mixing layer in order.
template <class Real = double>
ForwardPass<Real> forward(const Model& m, const Dataset& x, std::span<const std::uint8_t> mask = {},
                          const ForwardOptions& opt = {}) {
    const auto& c = m.circuit;
    check_shapes(m);
    check_mask(c, mask);
    if (opt.root_entry >= c.k_root) throw ConfigError("root entry out of range");

    ForwardPass<Real> fp;
    fp.circuit = &c;
    fp.batch = x.num_samples;
    fp.stride = c.total_values;
    fp.root_entry = opt.root_entry;
    fp.mask.assign(mask.begin(), mask.end());
    fp.values.assign(fp.batch * fp.stride, Real(0));

    leaf_forward<Real>(c, m.params.leaves, x, mask, std::span<Real>(fp.values), fp.stride);
    if (opt.leaf_shift) {
        const auto row = c.region_row.at(opt.leaf_shift->first);
        if (c.locate(row).first != 0) throw ConfigError("leaf_shift must name a leaf region");
        for (std::size_t b = 0; b < fp.batch; ++b) {
            Real* v = fp.values.data() + b * fp.stride + c.row_offset[row];
            for (std::size_t kk = 0; kk < c.k; ++kk) v[kk] += static_cast<Real>(opt.leaf_shift->second);
        }
    }

    const detail::WeightView<Real> weights(m.params);
    Buffer<Real> outer, result;
    std::vector<Real> shift;
    Real* base = fp.values.data();
    const auto stride = fp.stride;
    for (std::size_t li = 1; li < c.layers.size(); ++li) {
        const auto& layer = c.layers[li];
        const Real* w = weights.layer(li);
        if (layer.kind == LayerKind::einsum) {
            const auto& plan = layer.einsum();
            const auto w_row = layer.width * c.k * c.k;
            for (std::size_t r = 0; r < layer.num_rows; ++r) {
                const auto lo = c.row_offset[plan.left[r]];
                const auto ro = c.row_offset[plan.right[r]];
                const auto oo = layer.value_offset + r * layer.width;
                detail::einsum_row<Real>(
                    fp.batch, c.k, layer.width, w + r * w_row, [&](std::size_t b) { return base + b * stride + lo; },
                    [&](std::size_t b) { return base + b * stride + ro; },
                    [&](std::size_t b) { return base + b * stride + oo; }, outer, result, shift, li, r);
            }
        } else {
            const auto& plan = layer.mixing();
            const auto width = layer.width;
            for (std::size_t r = 0; r < layer.num_rows; ++r) {
                const auto oo = layer.value_offset + r * width;
                for (std::size_t b = 0; b < fp.batch; ++b) {
                    Real* dst = base + b * stride + oo;
                    for (std::size_t kk = 0; kk < width; ++kk) {
                        Real mx = detail::neg_inf<Real>;
                        for (std::size_t s = 0; s < plan.dmax; ++s) {
                            if (!plan.mask[r * plan.dmax + s]) continue;
                            const Real v = base[b * stride + c.row_offset[plan.sources[r * plan.dmax + s]] + kk];
                            if (std::isnan(v))
                                throw EngineError("NaN input at layer " + std::to_string(li) + ", row " +
                                                  std::to_string(r));
                            mx = std::max(mx, v);
                        }
                        if (mx == detail::neg_inf<Real>) {
                            dst[kk] = mx;
                            continue;
                        }
                        Real sum = 0;
                        for (std::size_t s = 0; s < plan.dmax; ++s) {
                            if (!plan.mask[r * plan.dmax + s]) continue;
                            const Real v = base[b * stride + c.row_offset[plan.sources[r * plan.dmax + s]] + kk];
                            sum += w[r * plan.dmax + s] * std::exp(v - mx);
                        }
                        dst[kk] = sum > 0 ? mx + std::log(sum) : detail::neg_inf<Real>;
                    }
                }
            }
        }
    }

    fp.log_likelihood.resize(fp.batch);
    for (std::size_t b = 0; b < fp.batch; ++b)
        fp.log_likelihood[b] = static_cast<double>(fp.row(b, c.root_row)[opt.root_entry]);
    return fp;
}

/// Expected statistics accumulated over samples: n (shaped like the weights),
/// p_L and p_L * T(x) per leaf slot.
struct BackwardStats {
    std::vector<std::vector<double>> weights;
    std::vector<double> acc_p;
    std::vector<double> acc_pT;
    double ll_sum = 0;
    std::size_t count = 0;

    static BackwardStats zeros_like(const Model& m) {
        BackwardStats s;
        s.weights.resize(m.params.weights.size());
        for (std::size_t i = 0; i < s.weights.size(); ++i) s.weights[i].assign(m.params.weights[i].size(), 0.0);
        s.acc_p.assign(m.params.leaves.num_slots(), 0.0);
        s.acc_pT.assign(m.params.leaves.phi.size(), 0.0);
        return s;
    }

    void merge(const BackwardStats& o) {
        for (std::size_t i = 0; i < weights.size(); ++i)
            for (std::size_t j = 0; j < weights[i].size(); ++j) weights[i][j] += o.weights[i][j];
        for (std::size_t i = 0; i < acc_p.size(); ++i) acc_p[i] += o.acc_p[i];
        for (std::size_t i = 0; i < acc_pT.size(); ++i) acc_pT[i] += o.acc_pT[i];
        ll_sum += o.ll_sum;
        count += o.count;
    }
};

/// Reverse pass propagating responsibilities d logP / d log(node) from the
/// root entry down to the leaves, accumulating into `stats`. Weight statistics
/// equal n_{S,N} = W * d logP / dW; leaf statistics are p_L and p_L T(x).
/// A marginalized variable contributes p_L and p_L times the current
/// expectation parameters (its expected sufficient statistic).
template <class Real = double>
void backward(const Model& m, const ForwardPass<Real>& fp, const Dataset& x, BackwardStats& stats) {
    const auto& c = m.circuit;
    if (fp.circuit == nullptr) throw UsageError("backward called before forward");
    if (fp.circuit != &c) throw UsageError("forward pass belongs to a different model");
    if (fp.batch != x.num_samples) throw UsageError("forward pass was computed on a different batch");
    if (stats.weights.size() != m.params.weights.size()) stats = BackwardStats::zeros_like(m);

    const auto batch = fp.batch;
    const auto stride = fp.stride;
    const auto k = c.k;
    const auto kk2 = k * k;
    Buffer<Real> resp(batch * stride, Real(0));
    for (std::size_t b = 0; b < batch; ++b) {
        if (std::isfinite(fp.log_likelihood[b])) {
            resp[b * stride + c.row_offset[c.root_row] + fp.root_entry] = Real(1);
            stats.ll_sum += fp.log_likelihood[b];
        }
    }
    stats.count += batch;

    const detail::WeightView<Real> weights(m.params);
    const Real* vals = fp.values.data();
    Buffer<Real> outer, q, t;
    std::vector<Real> pn(batch * k), pm(batch * k), shift(batch);

    for (std::size_t li = c.layers.size(); li-- > 1;) {
        const auto& layer = c.layers[li];
        const Real* w = weights.layer(li);
        auto& acc = stats.weights[li];
        if (layer.kind == LayerKind::einsum) {
            const auto& plan = layer.einsum();
            const auto ko = layer.width;
            outer.resize(batch * kk2);
            q.resize(batch * ko);
            t.resize(batch * kk2);
            for (std::size_t r = 0; r < layer.num_rows; ++r) {
                const auto lo = c.row_offset[plan.left[r]];
                const auto ro = c.row_offset[plan.right[r]];
                const auto oo = layer.value_offset + r * ko;
                bool any = false;
                for (std::size_t b = 0; b < batch; ++b) {
                    const Real* rs = resp.data() + b * stride + oo;
                    const Real* ls = vals + b * stride + oo;
                    const Real a = detail::exp_shifted(vals + b * stride + lo, k, pn.data() + b * k);
                    const Real a2 = detail::exp_shifted(vals + b * stride + ro, k, pm.data() + b * k);
                    shift[b] = (a == detail::neg_inf<Real> || a2 == detail::neg_inf<Real>) ? detail::neg_inf<Real>
                                                                                           : a + a2;
                    Real* o = outer.data() + b * kk2;
                    for (std::size_t i = 0; i < k; ++i)
                        for (std::size_t j = 0; j < k; ++j) o[i * k + j] = pn[b * k + i] * pm[b * k + j];
                    for (std::size_t kk = 0; kk < ko; ++kk) {
                        const bool live = rs[kk] != 0 && shift[b] != detail::neg_inf<Real> && std::isfinite(ls[kk]);
                        q[b * ko + kk] = live ? rs[kk] * std::exp(shift[b] - ls[kk]) : Real(0);
                        any = any || live;
                    }
                }
                if (!any) continue;
                Eigen::Map<const RowMatrix<Real>> o_mat(outer.data(), static_cast<Eigen::Index>(batch),
                                                        static_cast<Eigen::Index>(kk2));
                Eigen::Map<const RowMatrix<Real>> q_mat(q.data(), static_cast<Eigen::Index>(batch),
                                                        static_cast<Eigen::Index>(ko));
                Eigen::Map<const RowMatrix<Real>> w_mat(w + r * ko * kk2, static_cast<Eigen::Index>(ko),
                                                        static_cast<Eigen::Index>(kk2));
                const RowMatrix<Real> g = q_mat.transpose() * o_mat;  // ko x kk2
                double* acc_row = acc.data() + r * ko * kk2;
                for (std::size_t e = 0; e < ko * kk2; ++e)
                    acc_row[e] += static_cast<double>(w[r * ko * kk2 + e]) * static_cast<double>(g.data()[e]);
                Eigen::Map<RowMatrix<Real>> t_mat(t.data(), static_cast<Eigen::Index>(batch),
                                                  static_cast<Eigen::Index>(kk2));
                t_mat.noalias() = q_mat * w_mat;
                for (std::size_t b = 0; b < batch; ++b) {
                    const Real* tb = t.data() + b * kk2;
                    Real* rl = resp.data() + b * stride + lo;
                    Real* rr = resp.data() + b * stride + ro;
                    const Real* pnb = pn.data() + b * k;
                    const Real* pmb = pm.data() + b * k;
                    for (std::size_t i = 0; i < k; ++i) {
                        Real s = 0;
                        for (std::size_t j = 0; j < k; ++j) s += tb[i * k + j] * pmb[j];
                        rl[i] += pnb[i] * s;
                    }
                    for (std::size_t j = 0; j < k; ++j) {
                        Real s = 0;
                        for (std::size_t i = 0; i < k; ++i) s += tb[i * k + j] * pnb[i];
                        rr[j] += pmb[j] * s;
                    }
                }
            }
        } else {
            const auto& plan = layer.mixing();
            const auto width = layer.width;
            for (std::size_t r = 0; r < layer.num_rows; ++r) {
                const auto oo = layer.value_offset + r * width;
                for (std::size_t b = 0; b < batch; ++b) {
                    const Real* rs = resp.data() + b * stride + oo;
                    const Real* ls = vals + b * stride + oo;
                    for (std::size_t kk = 0; kk < width; ++kk) {
                        if (rs[kk] == 0 || !std::isfinite(ls[kk])) continue;
                        for (std::size_t s = 0; s < plan.dmax; ++s) {
                            const auto idx = r * plan.dmax + s;
                            if (!plan.mask[idx]) continue;
                            const auto src = c.row_offset[plan.sources[idx]];
                            const Real contrib = rs[kk] * w[idx] * std::exp(vals[b * stride + src + kk] - ls[kk]);
                            acc[idx] += static_cast<double>(contrib);
                            resp[b * stride + src + kk] += contrib;
                        }
                    }
                }
            }
        }
    }

    const auto& leaf = c.layers.front();
    const auto& plan = leaf.leaf();
    const auto& params = m.params.leaves;
    const auto tdim = params.stat_dim();
    std::vector<double> stat(tdim);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t row = 0; row < leaf.num_rows; ++row) {
            const Real* rs = resp.data() + b * stride + leaf.value_offset + row * k;
            const auto rep = plan.replica[row];
            for (auto v : plan.vars[row]) {
                const bool masked = !fp.mask.empty() && fp.mask[v];
                if (!masked) ef::sufficient_stats(params.spec, x.at(b, v), stat);
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const double p = static_cast<double>(rs[kk]);
                    if (p == 0) continue;
                    const auto slot = params.slot(v, kk, rep);
                    stats.acc_p[slot] += p;
                    double* dst = stats.acc_pT.data() + slot * tdim;
                    if (masked) {
                        const auto phi = params.at(v, kk, rep);
                        for (std::size_t i = 0; i < tdim; ++i) dst[i] += p * phi[i];
                    } else {
                        for (std::size_t i = 0; i < tdim; ++i) dst[i] += p * stat[i];
                    }
                }
            }
        }
}

/// Per-sample log-likelihoods, evaluated in chunks of `chunk` samples.
template <class Real = double>
std::vector<double> log_likelihood(const Model& m, const Dataset& x, std::span<const std::uint8_t> mask = {},
                                   std::size_t chunk = 1024) {
    std::vector<double> out;
    out.reserve(x.num_samples);
    for (std::size_t first = 0; first < x.num_samples; first += chunk) {
        const auto n = std::min(chunk, x.num_samples - first);
        const auto fp = forward<Real>(m, x.slice(first, n), mask);
        out.insert(out.end(), fp.log_likelihood.begin(), fp.log_likelihood.end());
    }
    return out;
}

inline double mean_log_likelihood(const Model& m, const Dataset& x, std::size_t chunk = 1024) {
    if (x.num_samples == 0) throw InputError("empty dataset");
    const auto ll = log_likelihood(m, x, {}, chunk);
    double total = 0;
    for (auto v : ll) total += v;
    return total / static_cast<double>(ll.size());
}

/// Forward + backward over a dataset in fixed chunks, in order.
inline BackwardStats accumulate_stats(const Model& m, const Dataset& x, std::size_t chunk = 1024) {
    auto stats = BackwardStats::zeros_like(m);
    for (std::size_t first = 0; first < x.num_samples; first += chunk) {
        const auto n = std::min(chunk, x.num_samples - first);
        const auto part = x.slice(first, n);
        const auto fp = forward<double>(m, part);
        backward<double>(m, fp, part, stats);
    }
    return stats;
}

/// log p(x_q | x_e) per sample: forward with the unused variables M
/// marginalized, minus forward with M and Q marginalized. `query` and
/// `evidence` are per-variable flags; everything else is marginalized.
inline std::vector<double> conditional_log_density(const Model& m, const Dataset& x, std::span<const std::uint8_t> query,
                                                   std::span<const std::uint8_t> evidence) {
    const auto d = m.d_vars();
    if (query.size() != d || evidence.size() != d) throw ConfigError("query/evidence masks must cover every variable");
    std::vector<std::uint8_t> num_mask(d), den_mask(d);
    for (std::size_t v = 0; v < d; ++v) {
        if (query[v] && evidence[v]) throw ConfigError("variable " + std::to_string(v) + " is both query and evidence");
        num_mask[v] = !query[v] && !evidence[v];
        den_mask[v] = !evidence[v];
    }
    const auto num = forward<double>(m, x, num_mask);
    const auto den = forward<double>(m, x, den_mask);
    std::vector<double> out(x.num_samples);
    for (std::size_t b = 0; b < x.num_samples; ++b) {
        if (den.log_likelihood[b] == -std::numeric_limits<double>::infinity())
            throw EvidenceError("evidence has zero probability (sample " + std::to_string(b) + ")");
        out[b] = num.log_likelihood[b] - den.log_likelihood[b];
    }
    return out;
}

namespace detail {

/// RNG stream of sample `index`: independent of how many samples are drawn.
inline std::mt19937_64 sample_stream(std::uint64_t seed, std::size_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(std::uint64_t(index) >> 32)};
    return std::mt19937_64(seq);
}

template <class Rng>
std::size_t draw_index(std::span<const double> weights, Rng& rng) {
    double total = 0;
    for (auto w : weights) total += w;
    if (!(total > 0)) throw EngineError("cannot sample from an all-zero distribution");
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double target = u(rng) * total;
    double acc = 0;
    std::size_t last = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (weights[i] <= 0) continue;
        acc += weights[i];
        last = i;
        if (target < acc) return i;
    }
    return last;
}

/// Top-down ancestral descent for one sample. With `fp` set, sum choices use
/// posterior weights from the evidence-conditioned forward pass of sample
/// `fb`; observed variables are copied from `evidence`.
template <class Rng>
void descend(const Model& m, const ForwardPass<double>* fp, std::size_t fb, std::span<const double> evidence,
             std::span<const std::uint8_t> observed, std::size_t root_entry, Rng& rng, std::span<double> out) {
    const auto& c = m.circuit;
    const auto k = c.k;
    std::vector<std::pair<std::size_t, std::size_t>> stack{{c.root_row, root_entry}};
    std::vector<double> probs;
    while (!stack.empty()) {
        const auto [row, entry] = stack.back();
        stack.pop_back();
        const auto [li, local] = c.locate(row);
        const auto& layer = c.layers[li];
        if (layer.kind == LayerKind::leaf) {
            const auto& plan = layer.leaf();
            for (auto v : plan.vars[local]) {
                if (!observed.empty() && observed[v]) out[v] = evidence[v];
                else out[v] = ef::sample(m.params.leaves.spec, m.params.leaves.at(v, entry, plan.replica[local]), rng);
            }
        } else if (layer.kind == LayerKind::einsum) {
            const auto& plan = layer.einsum();
            const double* w = m.params.weights[li].data() + (local * layer.width + entry) * k * k;
            probs.assign(w, w + k * k);
            if (fp) {
                const double* ln = fp->row(fb, plan.left[local]);
                const double* rn = fp->row(fb, plan.right[local]);
                const double a = *std::max_element(ln, ln + k);
                const double a2 = *std::max_element(rn, rn + k);
                for (std::size_t i = 0; i < k; ++i)
                    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] *= std::exp(ln[i] - a + rn[j] - a2);
            }
            const auto ij = draw_index<Rng>(probs, rng);
            stack.emplace_back(plan.right[local], ij % k);
            stack.emplace_back(plan.left[local], ij / k);
        } else {
            const auto& plan = layer.mixing();
            probs.assign(plan.dmax, 0.0);
            const double* w = m.params.weights[li].data() + local * plan.dmax;
            double mx = -std::numeric_limits<double>::infinity();
            if (fp)
                for (std::size_t s = 0; s < plan.dmax; ++s)
                    if (plan.mask[local * plan.dmax + s])
                        mx = std::max(mx, fp->row(fb, plan.sources[local * plan.dmax + s])[entry]);
            for (std::size_t s = 0; s < plan.dmax; ++s) {
                if (!plan.mask[local * plan.dmax + s]) continue;
                probs[s] = w[s];
                if (fp) probs[s] *= std::exp(fp->row(fb, plan.sources[local * plan.dmax + s])[entry] - mx);
            }
            const auto s = draw_index<Rng>(probs, rng);
            stack.emplace_back(plan.sources[local * plan.dmax + s], entry);
        }
    }
}

}  // namespace detail

/// n ancestral samples; sample i uses its own RNG stream derived from (seed, i).
inline Dataset sample(const Model& m, std::size_t n, std::uint64_t seed, std::size_t root_entry = 0) {
    if (root_entry >= m.circuit.k_root) throw ConfigError("root entry out of range");
    check_shapes(m);
    Dataset out(n, m.d_vars());
    for (std::size_t i = 0; i < n; ++i) {
        auto rng = detail::sample_stream(seed, i);
        detail::descend(m, nullptr, 0, {}, {}, root_entry, rng, out.row(i));
    }
    return out;
}

/// n samples from p(x_missing | x_e). `observed[v] != 0` marks evidence.
/// With no evidence this is exactly `sample(m, n, seed)`.
inline Dataset conditional_sample(const Model& m, std::span<const double> evidence, std::span<const std::uint8_t> observed,
                                  std::size_t n, std::uint64_t seed, std::size_t root_entry = 0) {
    const auto d = m.d_vars();
    if (evidence.size() != d || observed.size() != d) throw ConfigError("evidence must cover every variable");
    if (std::none_of(observed.begin(), observed.end(), [](auto o) { return o != 0; }))
        return sample(m, n, seed, root_entry);

    Dataset ev(1, d);
    std::vector<std::uint8_t> marg(d);
    for (std::size_t v = 0; v < d; ++v) {
        marg[v] = !observed[v];
        ev.at(0, v) = observed[v] ? evidence[v] : 0.0;
    }
    ForwardOptions opt;
    opt.root_entry = root_entry;
    const auto fp = forward<double>(m, ev, marg, opt);
    if (fp.log_likelihood[0] == -std::numeric_limits<double>::infinity())
        throw EvidenceError("evidence has zero probability");

    Dataset out(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        auto rng = detail::sample_stream(seed, i);
        detail::descend(m, &fp, 0, ev.row(0), observed, root_entry, rng, out.row(i));
    }
    return out;
}

}  // namespace einet
