// Acceptance runner. `acceptance N` checks criterion N and prints one line:
//   criterion N: PASS|FAIL|SKIP <name>: <measurements>
// Exit status is 0 on pass, 1 on failure, 77 on skip. With no argument every
// criterion runs in turn.

#include <bit>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>

#include "cli.hpp"
#include "einet/bench.hpp"
#include "einet/fixtures.hpp"
#include "einet/io.hpp"
#include "einet/oracle.hpp"
#include "einet/trainer.hpp"
#include "helpers.hpp"

using namespace einet;
namespace fs = std::filesystem;

namespace {

enum class Status { pass, fail, skip };

struct Outcome {
    Status status;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Outcome verdict(bool ok, std::string detail) { return {ok ? Status::pass : Status::fail, std::move(detail)}; }

fs::path scratch_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("einet_acceptance_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// 1. engine forward vs scalar oracle on 100 fixtures
Outcome oracle_equivalence() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0;
    std::size_t gaussian = 0, discrete = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        const auto fx = fixtures::random_fixture(10'000 + s);
        (fx.model.leaf_spec().family == Family::gaussian ? gaussian : discrete)++;
        const auto ll = log_likelihood(fx.model, fx.data);
        const auto sc = oracle::expand(fx.model);
        for (std::size_t b = 0; b < fx.data.num_samples; ++b) {
            const double d = std::abs(ll[b] - oracle::scalar_eval(sc, fx.data.row(b)));
            worst = std::max(worst, std::isnan(d) ? std::numeric_limits<double>::infinity() : d);
        }
    }
    const double secs = seconds_since(t0);
    return verdict(worst <= 1e-6 && secs < 60,
                   fmt("max |engine - oracle| = %.3g (<= 1e-6) over 100 fixtures (%zu gaussian, %zu discrete), %.1f s (< 60 s)",
                       worst, gaussian, discrete, secs));
}

// 2. marginalizing everything gives log 1; discrete fixtures sum to one
Outcome normalization() {
    double worst_marg = 0, worst_sum = 0;
    std::size_t enumerated = 0;
    auto check = [&](const fixtures::Fixture& fx) {
        const auto& m = fx.model;
        const std::vector<std::uint8_t> all(m.d_vars(), 1);
        for (auto v : log_likelihood(m, fx.data, all)) worst_marg = std::max(worst_marg, std::abs(v));
        if (!m.leaf_spec().discrete() || m.d_vars() > 10) return;
        const auto assignments = testkit::all_assignments(m.d_vars(), m.leaf_spec().support_size());
        double total = 0;
        for (auto v : log_likelihood(m, assignments)) total += std::exp(v);
        worst_sum = std::max(worst_sum, std::abs(total - 1.0));
        ++enumerated;
    };
    for (std::uint64_t s = 0; s < 100; ++s) check(fixtures::random_fixture(10'000 + s));
    fixtures::FixtureOptions discrete;
    discrete.allow_gaussian = false;
    for (std::uint64_t s = 0; s < 50; ++s) check(fixtures::random_fixture(20'000 + s, discrete));
    return verdict(worst_marg <= 1e-6 && worst_sum <= 1e-9 && enumerated > 0,
                   fmt("max |all-marginalized logP| = %.3g (<= 1e-6) on 150 fixtures; max |sum p - 1| = %.3g (<= 1e-9) "
                       "on %zu enumerated discrete fixtures",
                       worst_marg, worst_sum, enumerated));
}

// 3. backward statistics n / (N w) vs central differences of the mean LL
Outcome gradient_identity() {
    double worst_rel = 0, worst_abs = 0;
    std::size_t checked = 0, failed = 0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto fx = fixtures::random_fixture(30'000 + s);
        const auto& m = fx.model;
        const auto stats = accumulate_stats(m, fx.data);
        const double n = static_cast<double>(fx.data.num_samples);
        for (std::size_t li = 1; li < m.params.weights.size(); ++li) {
            const auto& w = m.params.weights[li];
            for (std::size_t e = 0; e < w.size(); e += 1 + w.size() / 7) {
                if (w[e] == 0) continue;
                const double analytic = stats.weights[li][e] / (n * w[e]);
                const double numeric =
                    oracle::finite_diff_grad(m, fx.data, {oracle::EntrySelector::Target::weight, li, e}, 1e-5);
                const double scale = std::max(std::abs(numeric), std::abs(analytic));
                const double diff = std::abs(numeric - analytic);
                // relative 1e-4, with an absolute floor of 1e-8 for near-zero gradients
                if (!(diff <= 1e-4 * scale + 1e-8)) ++failed;
                if (scale > 0) worst_rel = std::max(worst_rel, diff / scale);
                worst_abs = std::max(worst_abs, std::isnan(diff) ? std::numeric_limits<double>::infinity() : diff);
                ++checked;
            }
        }
    }
    return verdict(failed == 0 && checked > 0,
                   fmt("%zu/%zu weights within 1e-4 relative (+1e-8 absolute) over 20 fixtures at step 1e-5; max "
                       "relative error %.3g, max absolute error %.3g",
                       checked - failed, checked, worst_rel, worst_abs));
}

// 4. full-batch EM never decreases the training log-likelihood
Outcome em_monotonicity() {
    double worst_drop = 0;
    std::string gains;
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto fx = fixtures::random_fixture(40'000 + s);
        const auto data = sample(fx.model, 500, s);
        auto m = fx.model;
        std::mt19937_64 rng(s + 1);
        init_weights(m, rng);
        m.project_all();
        double prev = -std::numeric_limits<double>::infinity(), first = 0;
        for (int it = 0; it < 30; ++it) {
            const double ll = em_full_step(m, data);
            if (it == 0) first = ll;
            if (!(ll >= prev - 1e-8)) worst_drop = std::max(worst_drop, std::isnan(ll) ? INFINITY : prev - ll);
            prev = ll;
        }
        const double last = mean_log_likelihood(m, data);
        if (!(last >= prev - 1e-8)) worst_drop = std::max(worst_drop, prev - last);
        gains += fmt(" %.3f->%.3f", first, last);
    }
    return verdict(worst_drop == 0, fmt("largest per-iteration drop beyond 1e-8 slack: %.3g; LL per fixture:%s",
                                        worst_drop, gains.c_str()));
}

// 5. stochastic step with lambda = 1 on the full data equals the full step
Outcome stochastic_consistency() {
    std::size_t equal = 0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto fx = fixtures::random_fixture(50'000 + s);
        auto a = fx.model, b = fx.model;
        em_full_step(a, fx.data);
        em_stochastic_step(b, fx.data, 1.0);
        bool same = a.params.leaves.phi.size() == b.params.leaves.phi.size();
        for (std::size_t i = 0; same && i < a.params.leaves.phi.size(); ++i)
            same = std::bit_cast<std::uint64_t>(a.params.leaves.phi[i]) == std::bit_cast<std::uint64_t>(b.params.leaves.phi[i]);
        for (std::size_t li = 0; same && li < a.params.weights.size(); ++li)
            for (std::size_t i = 0; same && i < a.params.weights[li].size(); ++i)
                same = std::bit_cast<std::uint64_t>(a.params.weights[li][i]) ==
                       std::bit_cast<std::uint64_t>(b.params.weights[li][i]);
        equal += same;
    }
    return verdict(equal == 20, fmt("%zu/20 fixtures bitwise equal after one step", equal));
}

// 6. nltcs density estimation
fs::path nltcs_dir() {
    if (const char* env = std::getenv("EINET_NLTCS_DIR")) return env;
    return fs::path(EINET_SOURCE_DIR) / "data" / "nltcs";
}

Outcome nltcs_density() {
    const auto dir = nltcs_dir();
    const auto train_path = dir / "nltcs.train.data", test_path = dir / "nltcs.test.data";
    if (!fs::exists(train_path) || !fs::exists(test_path))
        return {Status::skip, "nltcs not found in " + dir.string() +
                                  " (needs nltcs.train.data and nltcs.test.data; set EINET_NLTCS_DIR)"};
    const auto t0 = std::chrono::steady_clock::now();
    const auto train_data = load_dataset(train_path.string()).data;
    const auto test_data = load_dataset(test_path.string()).data;
    if (train_data.num_vars != 16 || test_data.num_vars != 16)
        return {Status::fail, fmt("expected 16 variables, got %zu/%zu", train_data.num_vars, test_data.num_vars)};
    ModelOptions mo;
    mo.k = 10;
    mo.seed = 7;
    mo.leaf = ExpFamilySpec::categorical(2);
    auto m = make_model(random_binary_tree(16, {2, 10, 7}), mo, &train_data);
    TrainerConfig tc;
    tc.mode = EmMode::stochastic;
    tc.lambda = 0.5;
    tc.batch_size = 100;
    tc.epochs = 20;
    tc.seed = 7;
    const auto trace = train(m, train_data, nullptr, tc);
    const double test_ll = mean_log_likelihood(m, test_data);
    const double secs = seconds_since(t0);
    return verdict(test_ll >= -6.4 && secs < 600,
                   fmt("test LL %.4f (>= -6.4; reference -6.015), train LL %.4f, %zu test samples, %.1f s (< 600 s)",
                       test_ll, trace.back().train_ll, test_data.num_samples, secs));
}

// 7. conditional density and conditional sampling on 3-variable models
Outcome conditional_inference() {
    constexpr std::size_t draws = 100'000;
    double worst_density = 0, worst_tv = 0;
    std::size_t sampled = 0;
    for (std::uint64_t s = 0; s < 3; ++s) {
        const auto m = testkit::small_discrete_model(3, 2 + s, 60'000 + s);
        const auto joint = testkit::oracle_joint(m);
        const auto all = testkit::all_assignments(3, 2);
        auto marginal = [&](std::span<const double> x, unsigned keep) {
            double p = 0;
            for (std::size_t n = 0; n < all.num_samples; ++n) {
                bool match = true;
                for (std::size_t v = 0; v < 3; ++v)
                    if ((keep >> v) & 1) match &= all.at(n, v) == x[v];
                if (match) p += joint[n];
            }
            return p;
        };
        // every disjoint (query, evidence) pair with a non-empty query
        for (unsigned q = 1; q < 8; ++q)
            for (unsigned e = 0; e < 8; ++e) {
                if (q & e) continue;
                std::vector<std::uint8_t> qm(3), em(3);
                for (std::size_t v = 0; v < 3; ++v) qm[v] = (q >> v) & 1, em[v] = (e >> v) & 1;
                const auto got = conditional_log_density(m, all, qm, em);
                for (std::size_t n = 0; n < all.num_samples; ++n) {
                    const double want = std::log(marginal(all.row(n), q | e)) - std::log(marginal(all.row(n), e));
                    worst_density = std::max(worst_density, std::abs(got[n] - want));
                }
            }
        // sampling: every non-empty, non-full evidence set and value
        for (unsigned e = 1; e < 7; ++e)
            for (std::size_t n = 0; n < all.num_samples; ++n) {
                bool first_of_class = true;
                for (std::size_t v = 0; v < 3; ++v)
                    if (!((e >> v) & 1) && all.at(n, v) != 0) first_of_class = false;
                if (!first_of_class) continue;
                std::vector<std::uint8_t> obs(3);
                for (std::size_t v = 0; v < 3; ++v) obs[v] = (e >> v) & 1;
                const auto samples = conditional_sample(m, all.row(n), obs, draws, 1000 * s + 10 * e + n);
                const auto freq = testkit::empirical(samples, 2);
                const double pe = marginal(all.row(n), e);
                std::vector<double> cond(all.num_samples, 0.0);
                for (std::size_t i = 0; i < all.num_samples; ++i) {
                    bool match = true;
                    for (std::size_t v = 0; v < 3; ++v)
                        if ((e >> v) & 1) match &= all.at(i, v) == all.at(n, v);
                    if (match) cond[i] = joint[i] / pe;
                }
                worst_tv = std::max(worst_tv, testkit::total_variation(freq, cond));
                ++sampled;
            }
    }
    return verdict(worst_density <= 1e-6 && worst_tv <= 0.02,
                   fmt("max |log p(q|e) - enumeration| = %.3g (<= 1e-6); max TV = %.4f (<= 0.02) over %zu evidence "
                       "settings x %zu draws",
                       worst_density, worst_tv, sampled, draws));
}

// 8. einsum engine speed vs oracle, and K scaling
Outcome performance() {
    const auto [m, x] = bench_problem(10, 4, 10, 100, 0, 1);
    const auto fast = bench_einsum(m, x, 5, false);
    const auto slow = bench_oracle(m, x, 3, false);
    const double speedup = slow.forward_ms / fast.forward_ms;

    const std::vector<std::size_t> ks{4, 6, 8, 12, 16, 24, 32};
    std::vector<double> kx, ty;
    std::string times;
    for (auto k : ks) {
        const auto [mk, xk] = bench_problem(k, 4, 10, 100, 0, 2);
        const auto row = bench_einsum(mk, xk, 5, false);
        kx.push_back(static_cast<double>(k));
        ty.push_back(row.forward_ms);
        times += fmt(" K%zu=%.3gms", k, row.forward_ms);
    }
    const double slope = loglog_slope(kx, ty);
    return verdict(speedup >= 10 && slope <= 3.3,
                   fmt("K=10 D=4 R=10 batch 100: einsum %.3f ms, oracle %.3f ms, speedup %.1fx (>= 10); K-slope %.2f "
                       "(<= 3.3):%s",
                       fast.forward_ms, slow.forward_ms, speedup, slope, times.c_str()));
}

// 9. CLI inpainting keeps the observed half bitwise
Outcome inpainting() {
    const auto dir = scratch_dir("inpaint");
    std::mt19937_64 rng(9);
    std::normal_distribution<double> noise(0, 0.05);
    Dataset images(80, 64);
    for (std::size_t i = 0; i < images.num_samples; ++i) {
        const double phase = static_cast<double>(i % 4) / 4.0;
        for (std::size_t y = 0; y < 8; ++y)
            for (std::size_t x = 0; x < 8; ++x)
                images.at(i, y * 8 + x) = std::clamp(0.5 + 0.4 * std::sin(0.8 * x + 6.28 * phase) + noise(rng), 0.0, 1.0);
    }
    const auto train_csv = (dir / "train.csv").string(), evidence_csv = (dir / "evidence.csv").string(),
               model = (dir / "model.einm").string();
    save_csv(images, train_csv);
    save_csv(images.slice(0, 8), evidence_csv);
    std::ostringstream out, err;
    if (cli::run({"train", "--structure", "pd", "--height", "8", "--width", "8", "--delta", "2", "--k", "3", "--data",
                  train_csv, "--leaf", "gaussian", "--mode", "full", "--epochs", "3", "--out", model},
                 out, err) != 0)
        return {Status::fail, "training the 8x8 model failed: " + err.str()};
    const auto evidence = load_dataset(evidence_csv).data;
    std::size_t ok_seeds = 0, filled_changed = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto result_path = (dir / ("inpaint_" + std::to_string(seed) + ".csv")).string();
        if (cli::run({"inpaint", "--model", model, "--data", evidence_csv, "--cover", "left-half", "--seed",
                      std::to_string(seed), "--out", result_path},
                     out, err) != 0)
            continue;
        const auto res = load_dataset(result_path).data;
        bool same = res.num_samples == evidence.num_samples && res.num_vars == 64;
        for (std::size_t i = 0; same && i < res.num_samples; ++i)
            for (std::size_t y = 0; y < 8; ++y)
                for (std::size_t x = 0; x < 8; ++x) {
                    const auto v = y * 8 + x;
                    if (x >= 4) same &= std::bit_cast<std::uint64_t>(res.at(i, v)) == std::bit_cast<std::uint64_t>(evidence.at(i, v));
                    else filled_changed += res.at(i, v) != evidence.at(i, v);
                }
        ok_seeds += same;
    }
    fs::remove_all(dir);
    return verdict(ok_seeds == 100 && filled_changed > 0,
                   fmt("%zu/100 seeds keep the observed right half bitwise; %zu covered pixels resampled", ok_seeds,
                       filled_changed));
}

// 10. save/load round trip
Outcome persistence() {
    const auto dir = scratch_dir("persist");
    std::size_t ok = 0;
    for (std::uint64_t s = 0; s < 50; ++s) {
        const auto fx = fixtures::random_fixture(70'000 + s);
        const auto path = (dir / ("m" + std::to_string(s) + ".einm")).string();
        save_model(fx.model, path);
        const auto back = load_model(path);
        const auto a = log_likelihood(fx.model, fx.data), b = log_likelihood(back, fx.data);
        bool same = a.size() == b.size();
        for (std::size_t i = 0; same && i < a.size(); ++i)
            same = std::bit_cast<std::uint64_t>(a[i]) == std::bit_cast<std::uint64_t>(b[i]);
        ok += same;
    }
    fs::remove_all(dir);
    return verdict(ok == 50, fmt("%zu/50 models evaluate bitwise-identically after save/load", ok));
}

struct Criterion {
    const char* name;
    std::function<Outcome()> run;
};

const std::vector<Criterion>& criteria() {
    static const std::vector<Criterion> list{
        {"oracle equivalence", oracle_equivalence},
        {"normalization", normalization},
        {"gradient identity", gradient_identity},
        {"EM monotonicity", em_monotonicity},
        {"stochastic-EM consistency", stochastic_consistency},
        {"nltcs density estimation", nltcs_density},
        {"conditional inference", conditional_inference},
        {"performance", performance},
        {"inpainting pipeline", inpainting},
        {"persistence", persistence},
    };
    return list;
}

int run_one(std::size_t i) {
    const auto& c = criteria()[i - 1];
    Outcome o;
    try {
        o = c.run();
    } catch (const std::exception& e) {
        o = {Status::fail, std::string("exception: ") + e.what()};
    }
    const char* tag = o.status == Status::pass ? "PASS" : o.status == Status::fail ? "FAIL" : "SKIP";
    std::printf("criterion %zu: %s %s: %s\n", i, tag, c.name, o.detail.c_str());
    std::fflush(stdout);
    return o.status == Status::pass ? 0 : o.status == Status::skip ? 77 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc > 2) {
        std::fprintf(stderr, "usage: %s [criterion 1-10]\n", argv[0]);
        return 2;
    }
    if (argc == 2) {
        const int i = std::atoi(argv[1]);
        if (i < 1 || i > static_cast<int>(criteria().size())) {
            std::fprintf(stderr, "criterion must be 1-%zu\n", criteria().size());
            return 2;
        }
        return run_one(static_cast<std::size_t>(i));
    }
    int worst = 0;
    for (std::size_t i = 1; i <= criteria().size(); ++i) {
        const int r = run_one(i);
        if (r == 1) worst = 1;
    }
    return worst;
}
