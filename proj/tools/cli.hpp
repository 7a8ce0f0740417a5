#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "einet/bench.hpp"
#include "einet/engine.hpp"
#include "einet/fixtures.hpp"
#include "einet/io.hpp"
#include "einet/model.hpp"
#include "einet/oracle.hpp"
#include "einet/structures.hpp"
#include "einet/trainer.hpp"

namespace einet::cli {

enum Exit : int { ok = 0, failure = 1, usage = 2 };

/// Bad flag combinations detected after parsing (exit code 2).
struct UsageFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Appends `--key value` pairs from a JSON config for keys the command line
/// does not set, so flags override the file and the file overrides defaults.
inline std::vector<std::string> merge_config(std::vector<std::string> args) {
    std::string path;
    for (std::size_t i = 0; i + 1 < args.size(); ++i)
        if (args[i] == "--config") path = args[i + 1];
    for (const auto& a : args)
        if (a.rfind("--config=", 0) == 0) path = a.substr(9);
    if (path.empty()) return args;

    std::ifstream in(path);
    if (!in) throw UsageFailure("cannot open config file '" + path + "'");
    nlohmann::json cfg;
    try {
        cfg = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw UsageFailure("config file '" + path + "' is not valid JSON: " + e.what());
    }
    if (!cfg.is_object()) throw UsageFailure("config file must hold a JSON object");

    auto given = [&](const std::string& flag) {
        for (const auto& a : args)
            if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
        return false;
    };
    auto scalar = [](const nlohmann::json& v) {
        if (v.is_string()) return v.get<std::string>();
        if (v.is_number_integer()) return std::to_string(v.get<long long>());
        if (v.is_number()) return format_double(v.get<double>());
        throw UsageFailure("config value " + v.dump() + " is not a string or number");
    };
    for (const auto& [key, value] : cfg.items()) {
        const auto flag = "--" + key;
        if (given(flag)) continue;
        if (value.is_boolean()) {
            if (value.get<bool>()) args.push_back(flag);
        } else if (value.is_array()) {
            for (const auto& v : value) {
                args.push_back(flag);
                args.push_back(scalar(v));
            }
        } else {
            args.push_back(flag);
            args.push_back(scalar(value));
        }
    }
    return args;
}

inline void write_text(const std::string& path, const std::string& text, std::ostream& out) {
    if (path == "-") {
        out << text;
        return;
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot write '" + path + "'");
    f << text;
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

struct ImageShape {
    std::size_t height = 0, width = 0;
};

inline std::optional<ImageShape> image_shape(const Model& m) {
    const auto& p = m.provenance;
    if (!p.contains("image")) return std::nullopt;
    return ImageShape{p["image"].at("height").get<std::size_t>(), p["image"].at("width").get<std::size_t>()};
}

/// Writes samples as an image grid (.pgm) when the model has an image shape,
/// otherwise (or for any other extension) as CSV.
inline void write_samples(const Model& m, const Dataset& d, const std::string& path, std::ostream& out) {
    if (ends_with(path, ".pgm")) {
        const auto shape = image_shape(m);
        if (!shape) throw UsageFailure("PGM output needs a model trained on images (--height/--width)");
        save_image_grid(d, shape->height, shape->width, 1, path);
        return;
    }
    write_text(path, dataset_to_csv(d), out);
}

/// Observed-variable mask for an image cover spec.
inline std::vector<std::uint8_t> cover_mask(const std::string& cover, std::size_t height, std::size_t width) {
    std::vector<std::uint8_t> observed(height * width, 1);
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
            const bool hidden = cover == "left-half" ? x < width / 2 : cover == "top-half" ? y < height / 2 : false;
            if (hidden) observed[y * width + x] = 0;
        }
    return observed;
}

/// Per-evidence-row seed so rows draw from unrelated streams.
inline std::uint64_t row_seed(std::uint64_t seed, std::size_t row) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(row), static_cast<std::uint32_t>(std::uint64_t(row) >> 32), 0x1a7u};
    std::mt19937_64 g(seq);
    return g();
}

/// Chooses a leaf family for data when --leaf is auto: nonnegative integers
/// give categorical leaves over 0..max, anything else gaussian.
inline ExpFamilySpec infer_leaf(const Dataset& d) {
    double mx = 0;
    for (double v : d.values) {
        if (!(v >= 0) || v != std::floor(v)) return ExpFamilySpec::gaussian();
        mx = std::max(mx, v);
    }
    return ExpFamilySpec::categorical(static_cast<std::size_t>(mx) + 1);
}

struct TrainArgs {
    std::string structure, data, valid, out = "model.einm", metrics, dump_plan;
    std::size_t depth = 2, replica = 10, k = 10, k_root = 1, height = 0, width = 0;
    std::vector<std::size_t> delta;
    std::string axes = "both", leaf = "auto", mode = "stochastic";
    std::size_t states = 0, trials = 0, batch = 500, epochs = 1, chunk = 1024;
    double lambda = 0.5, var_min = 1e-6, var_max = std::numeric_limits<double>::infinity(), prob_floor = 1e-6,
           eps_w = 1e-12;
    std::uint64_t seed = 0;
    bool raw_u8 = false;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
    LoadOptions lo;
    lo.normalize_u8 = !a.raw_u8;
    const auto loaded = load_dataset(a.data, lo);
    const auto& data = loaded.data;
    if (data.num_samples == 0) throw InputError("training data '" + a.data + "' is empty");
    std::optional<Dataset> valid;
    if (!a.valid.empty()) {
        valid = load_dataset(a.valid, lo).data;
        if (valid->num_vars != data.num_vars) throw InputError("validation data has a different number of variables");
    }

    nlohmann::json structure{{"kind", a.structure}};
    RegionGraph rg;
    if (a.structure == "rat") {
        rg = random_binary_tree(data.num_vars, {a.depth, a.replica, a.seed});
        structure.update({{"depth", a.depth}, {"replica", a.replica}, {"seed", a.seed}});
    } else {
        if (a.height == 0 || a.width == 0) throw UsageFailure("--structure pd needs --height and --width");
        if (a.height * a.width != data.num_vars)
            throw UsageFailure("--height x --width = " + std::to_string(a.height * a.width) + " but the data has " +
                               std::to_string(data.num_vars) + " variables");
        PdConfig pc;
        pc.deltas = a.delta.empty() ? std::vector<std::size_t>{1} : a.delta;
        pc.axes = a.axes == "vertical" ? SplitAxes::vertical : a.axes == "horizontal" ? SplitAxes::horizontal : SplitAxes::both;
        rg = poon_domingos(a.height, a.width, pc);
        structure.update({{"height", a.height}, {"width", a.width}, {"delta", pc.deltas}, {"axes", a.axes}});
    }

    ModelOptions mo;
    mo.k = a.k;
    mo.k_root = a.k_root;
    mo.seed = a.seed;
    mo.eps_w = a.eps_w;
    mo.projection.var_min = a.var_min;
    mo.projection.var_max = a.var_max;
    mo.projection.prob_floor = a.prob_floor;
    if (a.leaf == "auto") mo.leaf = infer_leaf(data);
    else if (a.leaf == "gaussian") mo.leaf = ExpFamilySpec::gaussian();
    else if (a.leaf == "categorical") {
        if (a.states < 1) throw UsageFailure("--leaf categorical needs --states");
        mo.leaf = ExpFamilySpec::categorical(a.states);
    } else {
        if (a.trials < 1) throw UsageFailure("--leaf binomial needs --trials");
        mo.leaf = ExpFamilySpec::binomial(a.trials);
    }

    auto model = make_model(std::move(rg), mo, &data);
    if (!a.dump_plan.empty()) write_text(a.dump_plan, plan_to_json(model.circuit).dump(2) + "\n", out);

    TrainerConfig tc;
    tc.mode = a.mode == "full" ? EmMode::full : EmMode::stochastic;
    tc.lambda = a.lambda;
    tc.batch_size = a.batch;
    tc.epochs = a.epochs;
    tc.seed = a.seed;
    tc.chunk = a.chunk;
    try {
        tc.validate();
    } catch (const ConfigError& e) {
        throw UsageFailure(e.what());
    }

    std::ofstream metrics;
    if (!a.metrics.empty()) {
        metrics.open(a.metrics, std::ios::trunc);
        if (!metrics) throw FormatError("cannot write '" + a.metrics + "'");
        metrics << metrics_csv_header() << "\n";
    }
    const auto trace = train(model, data, valid ? &*valid : nullptr, tc, [&](const EpochMetrics& e) {
        if (metrics) metrics << metrics_csv_row(e) << "\n" << std::flush;
    });

    model.provenance = {{"structure", structure},
                        {"trainer",
                         {{"mode", a.mode}, {"lambda", a.lambda}, {"batch", a.batch}, {"epochs", a.epochs}, {"seed", a.seed}}},
                        {"data", {{"path", a.data}, {"num_samples", data.num_samples}, {"num_vars", data.num_vars}}}};
    if (a.structure == "pd") model.provenance["image"] = {{"height", a.height}, {"width", a.width}};
    if (!trace.empty()) model.provenance["final_train_ll"] = trace.back().train_ll;
    save_model(model, a.out);
    if (!trace.empty()) out << "train_ll " << format_double(trace.back().train_ll) << "\n";
    out << "model " << a.out << "\n";
    return Exit::ok;
}

inline int cmd_eval(const std::string& model_path, const std::string& data_path, const std::string& per_sample,
                    bool raw_u8, std::ostream& out) {
    const auto m = load_model(model_path);
    LoadOptions lo;
    lo.normalize_u8 = !raw_u8;
    const auto data = load_dataset(data_path, lo).data;
    if (data.num_samples == 0) throw InputError("dataset '" + data_path + "' is empty");
    if (data.num_vars != m.d_vars())
        throw InputError("dataset has " + std::to_string(data.num_vars) + " variables, model expects " +
                         std::to_string(m.d_vars()));
    const auto ll = log_likelihood(m, data);
    double total = 0;
    for (auto v : ll) total += v;
    out << "mean_ll " << format_double(total / static_cast<double>(ll.size())) << "\n";
    out << "total_ll " << format_double(total) << "\n";
    out << "num_samples " << ll.size() << "\n";
    if (!per_sample.empty()) {
        std::string text;
        for (auto v : ll) text += format_double(v) + "\n";
        write_text(per_sample, text, out);
    }
    return Exit::ok;
}

inline int cmd_inpaint(const std::string& model_path, const std::string& data_path, const std::string& cover,
                       std::uint64_t seed, const std::string& out_path, bool raw_u8, std::ostream& out) {
    const auto m = load_model(model_path);
    const auto shape = image_shape(m);
    if (!shape) throw InputError("model has no image shape; inpainting needs a model trained with --height/--width");
    LoadOptions lo;
    lo.normalize_u8 = !raw_u8;
    const auto data = load_dataset(data_path, lo).data;
    if (data.num_vars != shape->height * shape->width || data.num_vars != m.d_vars())
        throw InputError("evidence rows have " + std::to_string(data.num_vars) + " values, the " +
                         std::to_string(shape->height) + "x" + std::to_string(shape->width) + " model needs " +
                         std::to_string(m.d_vars()));
    const auto observed = cover_mask(cover, shape->height, shape->width);
    Dataset result(data.num_samples, data.num_vars);
    for (std::size_t i = 0; i < data.num_samples; ++i) {
        const auto s = conditional_sample(m, data.row(i), observed, 1, row_seed(seed, i));
        std::copy(s.values.begin(), s.values.end(), result.row(i).begin());
    }
    write_samples(m, result, out_path, out);
    return Exit::ok;
}

inline int cmd_oracle_check(std::size_t fixtures, std::uint64_t seed, double tol, std::ostream& out) {
    double worst = 0;
    for (std::size_t f = 0; f < fixtures; ++f) {
        const auto fx = fixtures::random_fixture(seed + f);
        const auto ll = log_likelihood(fx.model, fx.data);
        const auto sc = oracle::expand(fx.model);
        for (std::size_t b = 0; b < fx.data.num_samples; ++b)
            worst = std::max(worst, std::abs(ll[b] - oracle::scalar_eval(sc, fx.data.row(b))));
    }
    out << "fixtures " << fixtures << " max_abs_diff " << format_double(worst) << "\n";
    return worst <= tol ? Exit::ok : Exit::failure;
}

/// Entry point shared by the executable and in-process tests.
inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Einsum network density estimation toolkit"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");
    std::string config_path;
    auto add_config = [&](CLI::App* s) { s->add_option("--config", config_path, "JSON file with flag defaults"); };

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "Build a structure, train it with EM, write a model file");
    add_config(train_cmd);
    train_cmd->add_option("--structure", ta.structure)->required()->check(CLI::IsMember({"rat", "pd"}));
    train_cmd->add_option("--data", ta.data, "Training data (CSV or EIND1)")->required();
    train_cmd->add_option("--valid", ta.valid, "Validation data");
    train_cmd->add_option("--out", ta.out, "Model output path")->capture_default_str();
    train_cmd->add_option("--metrics", ta.metrics, "Per-epoch metrics CSV");
    train_cmd->add_option("--dump-plan", ta.dump_plan, "Write the compiled layer plan as JSON ('-' for stdout)");
    train_cmd->add_option("--depth", ta.depth)->capture_default_str();
    train_cmd->add_option("--replica", ta.replica)->capture_default_str()->check(CLI::PositiveNumber);
    train_cmd->add_option("--k", ta.k)->capture_default_str()->check(CLI::PositiveNumber);
    train_cmd->add_option("--k-root", ta.k_root)->capture_default_str()->check(CLI::PositiveNumber);
    train_cmd->add_option("--height", ta.height);
    train_cmd->add_option("--width", ta.width);
    train_cmd->add_option("--delta", ta.delta, "PD cut step(s)")->check(CLI::PositiveNumber);
    train_cmd->add_option("--axes", ta.axes)->capture_default_str()->check(CLI::IsMember({"vertical", "horizontal", "both"}));
    train_cmd->add_option("--leaf", ta.leaf)->capture_default_str()->check(
        CLI::IsMember({"auto", "gaussian", "categorical", "binomial"}));
    train_cmd->add_option("--states", ta.states);
    train_cmd->add_option("--trials", ta.trials);
    train_cmd->add_option("--mode", ta.mode)->capture_default_str()->check(CLI::IsMember({"full", "stochastic"}));
    train_cmd->add_option("--lambda", ta.lambda)->capture_default_str()->check(CLI::Range(0.0, 1.0));
    train_cmd->add_option("--batch", ta.batch)->capture_default_str()->check(CLI::PositiveNumber);
    train_cmd->add_option("--epochs", ta.epochs)->capture_default_str();
    train_cmd->add_option("--chunk", ta.chunk)->capture_default_str()->check(CLI::PositiveNumber);
    train_cmd->add_option("--seed", ta.seed)->capture_default_str();
    train_cmd->add_option("--var-min", ta.var_min)->capture_default_str();
    train_cmd->add_option("--var-max", ta.var_max);
    train_cmd->add_option("--prob-floor", ta.prob_floor)->capture_default_str();
    train_cmd->add_option("--eps-w", ta.eps_w)->capture_default_str();
    train_cmd->add_flag("--raw-u8", ta.raw_u8, "Keep u8 payloads unnormalized");

    std::string model_path, data_path, out_path = "-", per_sample, cover;
    std::uint64_t seed = 0;
    std::size_t n = 16, root_entry = 0;
    bool raw_u8 = false;

    auto* eval_cmd = app.add_subcommand("eval", "Mean test log-likelihood of a dataset");
    add_config(eval_cmd);
    eval_cmd->add_option("--model", model_path)->required();
    eval_cmd->add_option("--data", data_path)->required();
    eval_cmd->add_option("--per-sample", per_sample, "Write one log-likelihood per line");
    eval_cmd->add_flag("--raw-u8", raw_u8);

    auto* sample_cmd = app.add_subcommand("sample", "Ancestral samples (CSV, or PGM grid for image models)");
    add_config(sample_cmd);
    sample_cmd->add_option("--model", model_path)->required();
    sample_cmd->add_option("--n", n)->capture_default_str();
    sample_cmd->add_option("--seed", seed)->capture_default_str();
    sample_cmd->add_option("--root-entry", root_entry)->capture_default_str();
    sample_cmd->add_option("--out", out_path, "Output path ('-' for stdout)")->capture_default_str();

    auto* inpaint_cmd = app.add_subcommand("inpaint", "Complete covered image regions by conditional sampling");
    add_config(inpaint_cmd);
    inpaint_cmd->add_option("--model", model_path)->required();
    inpaint_cmd->add_option("--data", data_path, "Evidence images, one per row")->required();
    inpaint_cmd->add_option("--cover", cover)->required()->check(CLI::IsMember({"left-half", "top-half"}));
    inpaint_cmd->add_option("--seed", seed)->capture_default_str();
    inpaint_cmd->add_option("--out", out_path)->capture_default_str();
    inpaint_cmd->add_flag("--raw-u8", raw_u8);

    BenchConfig bc;
    bool no_oracle = false, no_backward = false;
    std::size_t threads = 1;
    auto* bench_cmd = app.add_subcommand("bench", "Einsum engine vs scalar oracle timing sweep");
    add_config(bench_cmd);
    bench_cmd->add_option("--k", bc.ks)->capture_default_str();
    bench_cmd->add_option("--depth", bc.depths)->capture_default_str();
    bench_cmd->add_option("--replica", bc.replicas)->capture_default_str();
    bench_cmd->add_option("--batch", bc.batch)->capture_default_str();
    bench_cmd->add_option("--d-vars", bc.d_vars, "Variables per synthetic sample (0: 2^(depth+1))");
    bench_cmd->add_option("--repeats", bc.repeats)->capture_default_str();
    bench_cmd->add_option("--seed", bc.seed)->capture_default_str();
    bench_cmd->add_option("--threads", threads, "Eigen worker threads")->capture_default_str();
    bench_cmd->add_flag("--no-oracle", no_oracle);
    bench_cmd->add_flag("--no-backward", no_backward);
    bench_cmd->add_option("--out", out_path)->capture_default_str();

    std::size_t n_fixtures = 100;
    double tol = 1e-6;
    auto* oracle_cmd = app.add_subcommand("oracle-check", "");
    oracle_cmd->group("");
    oracle_cmd->add_option("--fixtures", n_fixtures);
    oracle_cmd->add_option("--seed", seed);
    oracle_cmd->add_option("--tol", tol);

    try {
        args = merge_config(std::move(args));
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return Exit::ok;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return Exit::ok;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        for (auto* s : app.get_subcommands())
            err << s->help();
        return Exit::usage;
    } catch (const UsageFailure& e) {
        err << "error: " << e.what() << "\n";
        return Exit::usage;
    }

    try {
        if (*train_cmd) return cmd_train(ta, out);
        if (*eval_cmd) return cmd_eval(model_path, data_path, per_sample, raw_u8, out);
        if (*sample_cmd) {
            const auto m = load_model(model_path);
            write_samples(m, sample(m, n, seed, root_entry), out_path, out);
            return Exit::ok;
        }
        if (*inpaint_cmd) return cmd_inpaint(model_path, data_path, cover, seed, out_path, raw_u8, out);
        if (*bench_cmd) {
            Eigen::setNbThreads(static_cast<int>(threads));
            bc.run_oracle = !no_oracle;
            bc.backward = !no_backward;
            write_text(out_path, run_bench(bc).to_csv(), out);
            return Exit::ok;
        }
        if (*oracle_cmd) return cmd_oracle_check(n_fixtures, seed, tol, out);
    } catch (const UsageFailure& e) {
        err << "error: " << e.what() << "\n";
        return Exit::usage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return Exit::failure;
    }
    return Exit::usage;
}

}  // namespace einet::cli
