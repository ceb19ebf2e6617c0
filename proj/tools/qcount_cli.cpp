// qcount command-line front end.
//
//   qcount simulate  --config run.json [--seed S] [--out stream.csv]
//   qcount trpl      --input stream.csv [--bin-width-ps 100] [--out hist.csv]
//   qcount g2        --input stream.csv [--estimator instantaneous|area_ratio]
//   qcount fit-decay --input hist.csv [--model biexp]
//   qcount resolve   --g2 0.93 --tau1-ns 24.7 --tau0-ns 48.95 [--brightness 4.2]
//   qcount map       --a-ns 31.7 --b-ns 16.9 --tau0-ns 48.95 [--format csv]
//   qcount pipeline  --config run.json [--out dir]
//
// Results go to --out or stdout; failures print {"error": {...}} on stderr.
#include "qcount/qcount.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

namespace {

using namespace qcount;

struct Globals {
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string config;
};

void emit_error(const std::string& code, const std::string& message, const std::string& command) {
    nlohmann::json j = {{"error", {{"code", code}, {"message", message}, {"command", command}}}};
    std::cerr << j.dump() << '\n';
}

// Writes text to --out, or stdout when --out is empty or "-".
void emit(const Globals& g, const std::string& text) {
    if (g.out.empty() || g.out == "-") {
        std::cout << text;
        return;
    }
    std::ofstream f(g.out);
    require(f.good(), "io_error", "cannot write '" + g.out + "'");
    f << text;
    require(f.good(), "io_error", "write to '" + g.out + "' failed");
}

ExperimentConfig config_from(const Globals& g) {
    require(!g.config.empty(), "missing_argument", "--config is required for this command");
    auto c = load_config(g.config);
    if (g.seed) c.seed = *g.seed;
    return c;
}

std::optional<AnalysisSpec> analysis_from(const Globals& g) {
    if (g.config.empty()) return std::nullopt;
    return load_config(g.config).analysis;
}

PhotonStream load_stream(const std::string& path) { return read_stream_file(path); }

std::vector<std::pair<double, double>> parse_points(const std::string& s) {
    std::vector<std::pair<double, double>> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto colon = item.find(':');
        require(colon != std::string::npos, "invalid_argument", "points must look like 'N:tau1_ns,N:tau1_ns,...'");
        try {
            out.emplace_back(std::stod(item.substr(0, colon)), std::stod(item.substr(colon + 1)));
        } catch (const std::exception&) {
            throw Error("invalid_argument", "cannot parse point '" + item + "'");
        }
    }
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"qcount: collective-emission simulator and emitter-number resolver"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_version_flag("--version", std::string(kVersion));
    Globals g;
    std::uint64_t seed_value = 0;
    auto* seed_opt = app.add_option("--seed", seed_value, "Master RNG seed; overrides the config seed");
    app.add_option("--out", g.out, "Output file (directory for 'pipeline'); stdout when omitted");
    app.add_option("--config", g.config, "Experiment configuration JSON")->check(CLI::ExistingFile);

    // simulate
    auto* sim = app.add_subcommand("simulate", "Simulate one ensemble and write its photon stream");
    std::size_t sim_index = 0;
    std::string sim_stage = "detected", sim_format = "csv";
    sim->add_option("--index", sim_index, "Which entry of ensemble.n_values to simulate (default 0)");
    sim->add_option("--stage", sim_stage, "Stream to write: detected or pre (before the detector chain)")
        ->check(CLI::IsMember({"detected", "pre"}));
    sim->add_option("--format", sim_format, "Stream file format: csv or binary")->check(CLI::IsMember({"csv", "binary"}));

    // trpl
    auto* trpl = app.add_subcommand("trpl", "Build the decay (TRPL) histogram of a stream");
    std::string trpl_in;
    std::int64_t trpl_bin = 0;
    int trpl_det = -2;
    trpl->add_option("--input", trpl_in, "Photon stream file (CSV or QDT1 binary)")->required()->check(CLI::ExistingFile);
    trpl->add_option("--bin-width-ps", trpl_bin, "Histogram bin width in ps (default 100 or config analysis value)");
    trpl->add_option("--detector", trpl_det, "Detector to histogram: 0, 1, or -2 for both (default)")
        ->check(CLI::IsMember({-2, 0, 1}));

    // g2
    auto* g2 = app.add_subcommand("g2", "Estimate g2(0) from a detected stream");
    std::string g2_in, g2_est = "instantaneous";
    std::optional<double> g2_window;
    std::int64_t g2_bin = 0, g2_cbin = 0;
    int g2_periods = 0, g2_slices = 0, g2_degree = -1;
    double g2_range = 0.0;
    g2->add_option("--input", g2_in, "Detected photon stream file")->required()->check(CLI::ExistingFile);
    g2->add_option("--estimator", g2_est, "instantaneous or area_ratio")->check(CLI::IsMember({"instantaneous", "area_ratio"}));
    g2->add_option("--window-ps", g2_window, "Pair half-window in ps (default 5% of fitted tau1)");
    g2->add_option("--bin-width-ps", g2_bin, "TRPL bin width used for the intensity profile (default 100)");
    g2->add_option("--coincidence-bin-ps", g2_cbin, "Coincidence histogram bin width in ps (default 1000)");
    g2->add_option("--periods", g2_periods, "Side peaks per side in the coincidence histogram (>= 3, default 3)");
    g2->add_option("--range-windows", g2_range, "Instantaneous: slice range in units of the window (default 10)");
    g2->add_option("--slices", g2_slices, "Instantaneous: number of time slices (default 8)");
    g2->add_option("--degree", g2_degree, "Instantaneous: extrapolation polynomial degree (default 2)");

    // fit-decay
    auto* fit = app.add_subcommand("fit-decay", "Fit a mono- or bi-exponential decay to a TRPL histogram");
    std::string fit_in, fit_model = "biexp";
    fit->add_option("--input", fit_in, "Histogram CSV (bin_start_ps,count)")->required()->check(CLI::ExistingFile);
    fit->add_option("--model", fit_model, "mono or biexp (default biexp)")->check(CLI::IsMember({"mono", "biexp"}));

    // resolve
    auto* res = app.add_subcommand("resolve", "Resolve emitter number from g2(0) and collective lifetime");
    double res_g2 = 0.0, res_tau1 = 0.0, res_tau0 = 0.0, res_exp = 1.0;
    std::optional<double> res_bright;
    res->add_option("--g2", res_g2, "Measured g2(0)")->required();
    res->add_option("--tau1-ns", res_tau1, "Collective lifetime tau1 in ns")->required();
    res->add_option("--tau0-ns", res_tau0, "Mean single-emitter lifetime in ns")->required();
    res->add_option("--brightness", res_bright, "Peak intensity relative to a single emitter (disambiguates roots)");
    res->add_option("--exponent", res_exp, "Power-law exponent p of I ~ N^p used with --brightness (default 1)");

    // map
    auto* map = app.add_subcommand("map", "Generate the (tau1, g2) -> N surface map");
    std::optional<double> map_a, map_b;
    std::string map_points, map_format = "json";
    double map_tau0 = 0.0;
    int map_nmax = 10;
    SurfaceGrid grid;
    std::optional<double> map_tmin, map_tmax;
    map->add_option("--a-ns", map_a, "Lifetime-scaling slope a in ns (tau1 = b + a/N)");
    map->add_option("--b-ns", map_b, "Lifetime-scaling floor b in ns");
    map->add_option("--points", map_points, "Fit a and b from 'N:tau1_ns,...' instead of --a-ns/--b-ns");
    map->add_option("--tau0-ns", map_tau0, "Mean single-emitter lifetime in ns")->required();
    map->add_option("--n-max", map_nmax, "Largest emitter number on the map (default 10)");
    map->add_option("--tau1-min-ns", map_tmin, "Lower end of the tau1 axis (default from the scaling fit)");
    map->add_option("--tau1-max-ns", map_tmax, "Upper end of the tau1 axis (default from the scaling fit)");
    map->add_option("--tau1-steps", grid.tau1_steps, "Grid points along tau1 (default 101)");
    map->add_option("--g2-min", grid.g2_min, "Lower end of the g2 axis (default 0)");
    map->add_option("--g2-max", grid.g2_max, "Upper end of the g2 axis (default 1.5)");
    map->add_option("--g2-steps", grid.g2_steps, "Grid points along g2; cell tolerance is half a step (default 301)");
    map->add_option("--format", map_format, "json or csv (tau1_ns,g2,n,flag)")->check(CLI::IsMember({"json", "csv"}));

    // pipeline
    auto* pipe = app.add_subcommand("pipeline", "Run simulate -> detect -> fit -> resolve for every configured N");
    bool pipe_quiet = false;
    pipe->add_flag("--quiet", pipe_quiet, "Suppress progress lines on stderr");

    std::string command = "qcount";
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        emit_error("usage_error", e.what(), command);
        return 2;
    }
    if (*seed_opt) g.seed = seed_value;

    try {
        if (*sim) {
            command = "simulate";
            auto c = config_from(g);
            require(sim_index < c.n_values.size(), "invalid_argument", "--index outside ensemble.n_values");
            const auto s = simulate_sample(c, sim_index);
            const auto& stream = sim_stage == "pre" ? s.pre : s.detected;
            if (g.out.empty() || g.out == "-") {
                require(sim_format == "csv", "invalid_argument", "binary streams need --out");
                write_stream_csv(std::cout, stream);
            } else {
                write_stream_file(g.out, stream, sim_format == "binary");
            }
        } else if (*trpl) {
            command = "trpl";
            const auto an = analysis_from(g);
            const std::int64_t bw = trpl_bin > 0 ? trpl_bin : (an ? an->trpl_bin_width_ps : 100);
            DecayHistogram h;
            if (!is_binary_stream_file(trpl_in) && trpl_det == -2) {
                // Bounded memory: records are folded in as they are read.
                std::ifstream f(trpl_in);
                StreamCsvReader reader(f);
                h = build_decay_histogram(reader, bw);
            } else {
                h = build_decay_histogram(load_stream(trpl_in), bw, trpl_det);
            }
            std::ostringstream os;
            write_histogram_csv(os, h);
            emit(g, os.str());
        } else if (*g2) {
            command = "g2";
            const auto an = analysis_from(g).value_or(AnalysisSpec{});
            const auto s = load_stream(g2_in);
            G2Estimate est;
            if (g2_est == "area_ratio") {
                const auto ch = build_coincidence_histogram(s, g2_cbin > 0 ? g2_cbin : an.coincidence_bin_width_ps,
                                                            g2_periods > 0 ? g2_periods : an.coincidence_periods);
                est = estimate_g2_area_ratio(ch);
            } else {
                const auto h = build_decay_histogram(s, g2_bin > 0 ? g2_bin : an.trpl_bin_width_ps);
                auto opt = instantaneous_options(an);
                if (g2_window) opt.window_ps = g2_window;
                if (g2_range > 0.0) opt.range_in_windows = g2_range;
                if (g2_slices > 0) opt.slices = g2_slices;
                if (g2_degree >= 0) opt.degree = g2_degree;
                est = estimate_g2_instantaneous(s, h, opt);
            }
            auto j = to_json(est);
            j["single_emitter"] = classify_single_emitter(est);
            emit(g, j.dump(2) + "\n");
        } else if (*fit) {
            command = "fit-decay";
            std::ifstream f(fit_in);
            const auto h = read_histogram_csv(f);
            emit(g, to_json(fit_decay(h, decay_model_from_string(fit_model))).dump(2) + "\n");
        } else if (*res) {
            command = "resolve";
            const auto e = resolve_with_constraints(res_g2, res_tau1, res_tau0, res_bright, res_exp);
            emit(g, to_json(e).dump(2) + "\n");
        } else if (*map) {
            command = "map";
            std::optional<LifetimeScalingFit> sf;
            if (!map_points.empty()) {
                require(!map_a && !map_b, "invalid_argument", "give either --points or --a-ns/--b-ns");
                sf = fit_lifetime_scaling(parse_points(map_points));
            } else if (map_a || map_b) {
                require(map_a && map_b, "invalid_argument", "--a-ns and --b-ns go together");
                LifetimeScalingFit f;
                f.a = *map_a;
                f.b = *map_b;
                require(f.a > 0.0 && f.b >= 0.0, "invalid_argument", "need a > 0 and b >= 0");
                sf = f;
            }
            if (sf) grid = grid_from_fit(*sf, map_nmax, grid);
            if (map_tmin) grid.tau1_min_ns = *map_tmin;
            if (map_tmax) grid.tau1_max_ns = *map_tmax;
            const auto surface = generate_surface(map_tau0, map_nmax, grid, sf);
            if (map_format == "csv") {
                std::ostringstream os;
                write_surface_csv(os, surface);
                emit(g, os.str());
            } else {
                emit(g, to_json(surface).dump(2) + "\n");
            }
        } else if (*pipe) {
            command = "pipeline";
            auto c = config_from(g);
            if (!g.out.empty()) c.output.directory = g.out;
            const auto report = run_pipeline(c, true, [&](std::size_t i, int n) {
                if (!pipe_quiet) std::cerr << "sample " << i << ": n = " << n << '\n';
            });
            nlohmann::json j = {{"report", (std::filesystem::path(c.output.directory) / "report.json").string()},
                                {"report_hash", report.report_hash},
                                {"summary", report.document["summary"]}};
            std::cout << j.dump(2) << '\n';
        }
    } catch (const Error& e) {
        emit_error(e.code(), e.what(), command);
        return 1;
    } catch (const std::exception& e) {
        emit_error("internal_error", e.what(), command);
        return 1;
    }
    return 0;
}
