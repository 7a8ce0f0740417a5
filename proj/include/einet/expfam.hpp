#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "einet/compiler.hpp"
#include "einet/errors.hpp"
#include "einet/tensor.hpp"

namespace einet {

/// Places a weight group onto the simplex with every active entry >= eps_w.
/// Masked entries (mask[i] == 0) are forced to 0. A group that is already
/// valid (entries >= eps_w, sum within 1e-13 of 1) is left untouched bitwise.
inline void project_simplex(std::span<double> w, double eps_w, std::span<const std::uint8_t> mask = {}) {
    auto active = [&](std::size_t i) { return mask.empty() || mask[i] != 0; };
    std::size_t n_active = 0;
    bool valid = true;
    double total = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (!active(i)) {
            if (w[i] != 0.0) valid = false;
            w[i] = 0.0;
            continue;
        }
        ++n_active;
        if (!(w[i] >= eps_w)) valid = false;
        total += w[i];
    }
    if (n_active == 0) return;
    if (valid && std::abs(total - 1.0) <= 1e-13) return;
    if (static_cast<double>(n_active) * eps_w >= 1.0) {
        for (std::size_t i = 0; i < w.size(); ++i)
            if (active(i)) w[i] = 1.0 / static_cast<double>(n_active);
        return;
    }

    // Water-filling: entries pinned at eps_w, the remaining mass spread
    // proportionally over the free entries; repeat until nothing new is pinned.
    std::vector<char> pinned(w.size(), 0);
    for (std::size_t i = 0; i < w.size(); ++i)
        if (active(i) && !(w[i] > eps_w)) pinned[i] = 1;
    for (;;) {
        double free_mass = 0;
        std::size_t n_pinned = 0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (!active(i)) continue;
            if (pinned[i]) ++n_pinned;
            else free_mass += w[i];
        }
        const double budget = 1.0 - static_cast<double>(n_pinned) * eps_w;
        if (!(free_mass > 0) || !std::isfinite(free_mass)) {
            for (std::size_t i = 0; i < w.size(); ++i)
                if (active(i)) w[i] = 1.0 / static_cast<double>(n_active);
            return;
        }
        bool changed = false;
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (!active(i)) continue;
            if (pinned[i]) {
                w[i] = eps_w;
                continue;
            }
            w[i] = w[i] * budget / free_mass;
            if (w[i] < eps_w) {
                pinned[i] = 1;
                changed = true;
            }
        }
        if (!changed) return;
    }
}

enum class Family { gaussian, categorical, binomial };

inline const char* to_string(Family f) {
    switch (f) {
        case Family::gaussian: return "gaussian";
        case Family::categorical: return "categorical";
        case Family::binomial: return "binomial";
    }
    return "unknown";
}

/// Leaf family with its sufficient-statistic dimension |T|.
struct ExpFamilySpec {
    Family family = Family::gaussian;
    std::size_t num_states = 0;  // categorical
    std::size_t n_trials = 0;    // binomial

    static ExpFamilySpec gaussian() { return {Family::gaussian, 0, 0}; }
    static ExpFamilySpec categorical(std::size_t states) {
        if (states < 1) throw ConfigError("categorical leaves need at least one state");
        return {Family::categorical, states, 0};
    }
    static ExpFamilySpec binomial(std::size_t trials) {
        if (trials < 1) throw ConfigError("binomial leaves need at least one trial");
        return {Family::binomial, 0, trials};
    }

    std::size_t stat_dim() const {
        switch (family) {
            case Family::gaussian: return 2;
            case Family::categorical: return num_states;
            case Family::binomial: return 1;
        }
        return 0;
    }
    bool discrete() const { return family != Family::gaussian; }
    /// Number of support points for discrete families.
    std::size_t support_size() const { return family == Family::categorical ? num_states : n_trials + 1; }

    friend bool operator==(const ExpFamilySpec&, const ExpFamilySpec&) = default;
};

inline nlohmann::json to_json(const ExpFamilySpec& s) {
    return {{"family", to_string(s.family)}, {"num_states", s.num_states}, {"n_trials", s.n_trials}};
}

inline ExpFamilySpec expfam_from_json(const nlohmann::json& j) {
    const auto f = j.at("family").get<std::string>();
    if (f == "gaussian") return ExpFamilySpec::gaussian();
    if (f == "categorical") return ExpFamilySpec::categorical(j.at("num_states").get<std::size_t>());
    if (f == "binomial") return ExpFamilySpec::binomial(j.at("n_trials").get<std::size_t>());
    throw FormatError("unknown leaf family '" + f + "'");
}

/// Parameter clamps applied after every update.
struct Projection {
    double var_min = 1e-6;
    double var_max = std::numeric_limits<double>::infinity();
    double prob_floor = 1e-6;  // categorical entries and binomial success probability
    double eps_count = 1e-12;  // below this, accumulated responsibility keeps the old value

    static Projection image() {
        Projection p;
        p.var_max = 1e-2;
        return p;
    }
};

/// Expectation parameters, shape D x K x R x |T|, row-major.
struct EfParams {
    ExpFamilySpec spec;
    std::size_t d_vars = 0, k = 0, replica = 0;
    std::vector<double> phi;

    EfParams() = default;
    EfParams(ExpFamilySpec s, std::size_t d, std::size_t kk, std::size_t r)
        : spec(s), d_vars(d), k(kk), replica(r), phi(d * kk * r * s.stat_dim(), 0.0) {}

    std::size_t stat_dim() const { return spec.stat_dim(); }
    std::size_t slot(std::size_t d, std::size_t kk, std::size_t r) const { return (d * k + kk) * replica + r; }
    std::size_t num_slots() const { return d_vars * k * replica; }

    std::span<double> at(std::size_t d, std::size_t kk, std::size_t r) {
        return {phi.data() + slot(d, kk, r) * stat_dim(), stat_dim()};
    }
    std::span<const double> at(std::size_t d, std::size_t kk, std::size_t r) const {
        return {phi.data() + slot(d, kk, r) * stat_dim(), stat_dim()};
    }
};

namespace ef {

inline constexpr double log_2pi = 1.8378770664093454835606594728112;

inline double log_choose(std::size_t n, std::size_t x) {
    return std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(x) + 1.0) -
           std::lgamma(static_cast<double>(n - x) + 1.0);
}

/// Throws InputError if x is outside the family's support.
inline void check_support(const ExpFamilySpec& spec, double x, std::size_t var) {
    auto fail = [&](const char* why) {
        throw InputError("variable " + std::to_string(var) + ": value " + std::to_string(x) + " " + why);
    };
    if (!std::isfinite(x)) fail("is not finite");
    if (spec.family == Family::gaussian) return;
    if (x < 0 || std::floor(x) != x) fail("is not a non-negative integer");
    const auto limit = spec.family == Family::categorical ? spec.num_states : spec.n_trials + 1;
    if (x >= static_cast<double>(limit)) fail("is outside the support");
}

inline void sufficient_stats(const ExpFamilySpec& spec, double x, std::span<double> out) {
    switch (spec.family) {
        case Family::gaussian:
            out[0] = x;
            out[1] = x * x;
            break;
        case Family::categorical:
            std::fill(out.begin(), out.end(), 0.0);
            out[static_cast<std::size_t>(x)] = 1.0;
            break;
        case Family::binomial:
            out[0] = x;
            break;
    }
}

inline double log_base_measure(const ExpFamilySpec& spec, double x) {
    switch (spec.family) {
        case Family::gaussian: return -0.5 * log_2pi;
        case Family::categorical: return 0.0;
        case Family::binomial: return log_choose(spec.n_trials, static_cast<std::size_t>(x));
    }
    return 0.0;
}

/// Natural parameters from expectation parameters.
inline std::vector<double> theta_from_phi(const ExpFamilySpec& spec, std::span<const double> phi) {
    switch (spec.family) {
        case Family::gaussian: {
            const double var = phi[1] - phi[0] * phi[0];
            return {phi[0] / var, -0.5 / var};
        }
        case Family::categorical: {
            std::vector<double> t(phi.size());
            for (std::size_t s = 0; s < phi.size(); ++s) t[s] = std::log(phi[s]);
            return t;
        }
        case Family::binomial: {
            const double p = phi[0] / static_cast<double>(spec.n_trials);
            return {std::log(p) - std::log1p(-p)};
        }
    }
    return {};
}

inline std::vector<double> phi_from_theta(const ExpFamilySpec& spec, std::span<const double> theta) {
    switch (spec.family) {
        case Family::gaussian: {
            const double var = -0.5 / theta[1];
            const double mu = theta[0] * var;
            return {mu, mu * mu + var};
        }
        case Family::categorical: {
            const double m = *std::max_element(theta.begin(), theta.end());
            std::vector<double> p(theta.size());
            double z = 0;
            for (std::size_t s = 0; s < theta.size(); ++s) z += p[s] = std::exp(theta[s] - m);
            for (auto& v : p) v /= z;
            return p;
        }
        case Family::binomial:
            return {static_cast<double>(spec.n_trials) / (1.0 + std::exp(-theta[0]))};
    }
    return {};
}

inline double log_normalizer(const ExpFamilySpec& spec, std::span<const double> theta) {
    switch (spec.family) {
        case Family::gaussian:
            return -theta[0] * theta[0] / (4.0 * theta[1]) - 0.5 * std::log(-2.0 * theta[1]);
        case Family::categorical: {
            const double m = *std::max_element(theta.begin(), theta.end());
            double z = 0;
            for (auto t : theta) z += std::exp(t - m);
            return m + std::log(z);
        }
        case Family::binomial:
            return static_cast<double>(spec.n_trials) * (std::max(theta[0], 0.0) + std::log1p(std::exp(-std::abs(theta[0]))));
    }
    return 0.0;
}

/// log h(x) + T(x).theta - A(theta), evaluated through the natural form.
inline double log_prob_natural(const ExpFamilySpec& spec, std::span<const double> phi, double x) {
    const auto theta = theta_from_phi(spec, phi);
    std::vector<double> t(spec.stat_dim());
    sufficient_stats(spec, x, t);
    double dot = 0;
    for (std::size_t i = 0; i < t.size(); ++i)
        if (t[i] != 0.0) dot += t[i] * theta[i];
    return log_base_measure(spec, x) + dot - log_normalizer(spec, theta);
}

/// Direct log-density. Agrees with log_prob_natural on valid parameters.
inline double log_prob(const ExpFamilySpec& spec, std::span<const double> phi, double x) {
    switch (spec.family) {
        case Family::gaussian: {
            const double var = phi[1] - phi[0] * phi[0];
            const double diff = x - phi[0];
            return -0.5 * (log_2pi + std::log(var)) - 0.5 * diff * diff / var;
        }
        case Family::categorical:
            return std::log(phi[static_cast<std::size_t>(x)]);
        case Family::binomial: {
            const auto n = spec.n_trials;
            const double p = phi[0] / static_cast<double>(n);
            const auto xi = static_cast<std::size_t>(x);
            double lp = log_choose(n, xi);
            if (xi > 0) lp += x * std::log(p);
            if (xi < n) lp += (static_cast<double>(n) - x) * std::log1p(-p);
            return lp;
        }
    }
    return 0.0;
}

template <class Rng>
double sample(const ExpFamilySpec& spec, std::span<const double> phi, Rng& rng) {
    switch (spec.family) {
        case Family::gaussian: {
            const double var = std::max(phi[1] - phi[0] * phi[0], 0.0);
            std::normal_distribution<double> n(phi[0], std::sqrt(var));
            return n(rng);
        }
        case Family::categorical: {
            std::uniform_real_distribution<double> u(0.0, 1.0);
            double total = 0;
            for (auto p : phi) total += p;
            const double target = u(rng) * total;
            double acc = 0;
            for (std::size_t s = 0; s < phi.size(); ++s) {
                acc += phi[s];
                if (target < acc && phi[s] > 0) return static_cast<double>(s);
            }
            for (std::size_t s = phi.size(); s-- > 0;)
                if (phi[s] > 0) return static_cast<double>(s);
            return 0.0;
        }
        case Family::binomial: {
            const double p = std::clamp(phi[0] / static_cast<double>(spec.n_trials), 0.0, 1.0);
            std::binomial_distribution<long> b(static_cast<long>(spec.n_trials), p);
            return static_cast<double>(b(rng));
        }
    }
    return 0.0;
}

/// Clamps one parameter slot onto the valid set. Leaves already valid slots
/// untouched bitwise.
inline void project(const ExpFamilySpec& spec, std::span<double> phi, const Projection& proj) {
    switch (spec.family) {
        case Family::gaussian: {
            const double var = phi[1] - phi[0] * phi[0];
            if (!(var >= proj.var_min && var <= proj.var_max))
                phi[1] = phi[0] * phi[0] + std::clamp(std::isnan(var) ? proj.var_min : var, proj.var_min, proj.var_max);
            break;
        }
        case Family::categorical:
            project_simplex(phi, proj.prob_floor);
            break;
        case Family::binomial: {
            const double n = static_cast<double>(spec.n_trials);
            const double p = phi[0] / n;
            if (!(p >= proj.prob_floor && p <= 1.0 - proj.prob_floor))
                phi[0] = n * std::clamp(std::isnan(p) ? 0.5 : p, proj.prob_floor, 1.0 - proj.prob_floor);
            break;
        }
    }
}

/// M-step target for one slot: acc_pT / acc_p, or the old value when the
/// accumulated responsibility is negligible. Does not project.
inline void em_target(std::span<double> phi, std::span<const double> acc_pT, double acc_p, const Projection& proj) {
    if (!(acc_p > proj.eps_count)) return;
    for (std::size_t i = 0; i < phi.size(); ++i) phi[i] = acc_pT[i] / acc_p;
}

/// Full leaf update: target then projection.
inline void em_update(const ExpFamilySpec& spec, std::span<double> phi, std::span<const double> acc_pT, double acc_p,
                      const Projection& proj) {
    em_target(phi, acc_pT, acc_p, proj);
    project(spec, phi, proj);
}

}  // namespace ef

/// Whole-tensor projection.
inline void project(EfParams& params, const Projection& proj) {
    const auto t = params.stat_dim();
    for (std::size_t s = 0; s < params.num_slots(); ++s)
        ef::project(params.spec, {params.phi.data() + s * t, t}, proj);
}

/// Per-variable observed value range, used for gaussian initialization.
struct DataRange {
    std::vector<double> lo, hi;
};

inline DataRange data_range(const Dataset& data) {
    DataRange r;
    r.lo.assign(data.num_vars, 0.0);
    r.hi.assign(data.num_vars, 1.0);
    for (std::size_t d = 0; d < data.num_vars && data.num_samples > 0; ++d) {
        r.lo[d] = r.hi[d] = data.at(0, d);
        for (std::size_t i = 1; i < data.num_samples; ++i) {
            r.lo[d] = std::min(r.lo[d], data.at(i, d));
            r.hi[d] = std::max(r.hi[d], data.at(i, d));
        }
    }
    return r;
}

/// Random initialization: gaussian means uniform on the data range with unit
/// variance; categorical slots ~ Dirichlet(1, ..., 1); binomial p ~ U(0, 1).
/// The result is projected.
template <class Rng>
EfParams init_ef_params(const ExpFamilySpec& spec, std::size_t d_vars, std::size_t k, std::size_t replica,
                        const DataRange* range, const Projection& proj, Rng& rng) {
    EfParams p(spec, d_vars, k, replica);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::exponential_distribution<double> gamma1(1.0);
    for (std::size_t d = 0; d < d_vars; ++d)
        for (std::size_t kk = 0; kk < k; ++kk)
            for (std::size_t r = 0; r < replica; ++r) {
                auto slot = p.at(d, kk, r);
                switch (spec.family) {
                    case Family::gaussian: {
                        const double lo = range ? range->lo[d] : 0.0;
                        const double hi = range ? range->hi[d] : 1.0;
                        const double mu = lo + (hi - lo) * u(rng);
                        slot[0] = mu;
                        slot[1] = mu * mu + 1.0;
                        break;
                    }
                    case Family::categorical: {
                        double total = 0;
                        for (auto& v : slot) total += v = gamma1(rng);
                        for (auto& v : slot) v /= total;
                        break;
                    }
                    case Family::binomial:
                        slot[0] = static_cast<double>(spec.n_trials) * u(rng);
                        break;
                }
                ef::project(spec, slot, proj);
            }
    return p;
}

/// Full log-density tensor E, shape B x D x K x R. Marginalized variables
/// (mask != 0) yield exactly 0.
inline std::vector<double> ef_log_prob(const EfParams& params, const Dataset& x, std::span<const std::uint8_t> marg_mask) {
    const auto b = x.num_samples, d = params.d_vars, k = params.k, r = params.replica;
    if (x.num_vars != d) throw ConfigError("data has " + std::to_string(x.num_vars) + " variables, model has " + std::to_string(d));
    std::vector<double> e(b * d * k * r, 0.0);
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t v = 0; v < d; ++v) {
            if (!marg_mask.empty() && marg_mask[v]) continue;
            const double xv = x.at(n, v);
            ef::check_support(params.spec, xv, v);
            for (std::size_t kk = 0; kk < k; ++kk)
                for (std::size_t rr = 0; rr < r; ++rr)
                    e[((n * d + v) * k + kk) * r + rr] = ef::log_prob(params.spec, params.at(v, kk, rr), xv);
        }
    return e;
}

namespace detail {

/// Per-slot constants so the batched leaf pass avoids logs of parameters.
struct LeafTable {
    ExpFamilySpec spec;
    std::size_t width = 0;        // entries per slot
    std::vector<double> values;   // gaussian: (mu, 1/(2 var), -0.5 log(2 pi var)); discrete: log-prob per support point

    explicit LeafTable(const EfParams& p) : spec(p.spec) {
        width = spec.family == Family::gaussian ? 3 : spec.support_size();
        values.resize(p.num_slots() * width);
        for (std::size_t s = 0; s < p.num_slots(); ++s) {
            std::span<const double> phi(p.phi.data() + s * p.stat_dim(), p.stat_dim());
            double* out = values.data() + s * width;
            if (spec.family == Family::gaussian) {
                const double var = phi[1] - phi[0] * phi[0];
                out[0] = phi[0];
                out[1] = 0.5 / var;
                out[2] = -0.5 * (ef::log_2pi + std::log(var));
            } else {
                for (std::size_t x = 0; x < width; ++x) out[x] = ef::log_prob(spec, phi, static_cast<double>(x));
            }
        }
    }

    double operator()(std::size_t slot, double x) const {
        const double* t = values.data() + slot * width;
        if (spec.family == Family::gaussian) {
            const double diff = x - t[0];
            return t[2] - diff * diff * t[1];
        }
        return t[static_cast<std::size_t>(x)];
    }
};

}  // namespace detail

/// Leaf-layer rows for a batch: out[b, row, k] = sum over the row's scope of
/// E[b, d, k, replica(row)]. Masked variables contribute nothing, so a fully
/// masked row is exactly +0.0.
template <class Real>
void leaf_forward(const LayeredCircuit& circuit, const EfParams& params, const Dataset& x,
                  std::span<const std::uint8_t> marg_mask, std::span<Real> out, std::size_t stride) {
    const auto& layer = circuit.layers.front();
    const auto& plan = layer.leaf();
    const auto k = circuit.k;
    if (x.num_vars != circuit.d_vars)
        throw ConfigError("data has " + std::to_string(x.num_vars) + " variables, model has " +
                          std::to_string(circuit.d_vars));
    if (params.d_vars != circuit.d_vars || params.k != k || params.replica != circuit.num_replica())
        throw ConfigError("leaf parameter shape does not match the circuit");

    for (std::size_t n = 0; n < x.num_samples; ++n)
        for (std::size_t v = 0; v < x.num_vars; ++v)
            if (marg_mask.empty() || !marg_mask[v]) ef::check_support(params.spec, x.at(n, v), v);

    const detail::LeafTable table(params);
    std::vector<double> acc(k);
    for (std::size_t n = 0; n < x.num_samples; ++n) {
        Real* base = out.data() + n * stride + layer.value_offset;
        for (std::size_t row = 0; row < layer.num_rows; ++row) {
            std::fill(acc.begin(), acc.end(), 0.0);
            const auto r = plan.replica[row];
            for (auto v : plan.vars[row]) {
                if (!marg_mask.empty() && marg_mask[v]) continue;
                const double xv = x.at(n, v);
                for (std::size_t kk = 0; kk < k; ++kk) acc[kk] += table(params.slot(v, kk, r), xv);
            }
            for (std::size_t kk = 0; kk < k; ++kk) base[row * k + kk] = static_cast<Real>(acc[kk]);
        }
    }
}

}  // namespace einet
