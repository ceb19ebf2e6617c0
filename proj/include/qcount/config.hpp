// config.hpp: experiment configuration document (JSON, unit-suffixed keys).
//
//   {
//     "schema_version": 1,
//     "seed": 42,
//     "ensemble":   {"n_values": [1, 2, 3], "radius_nm": 30, "min_distance_nm": 15.7,
//                    "wavelength_nm": 620, "tau0_ns": 48.95, "gamma0_relative_spread": 0,
//                    "dipoles": "isotropic"},
//     "coupling":   {"mode": "uniform", "kappa": 0.3}
//                 | {"mode": "uniform", "lifetime_scaling": {"a_ns": 31.7, "b_ns": 16.9}}
//                 | {"mode": "uniform", "lifetime_scaling": {"points": [[1, 48.95], [2, 31.42], ...]}}
//                 | {"mode": "free_space", "include_coherent": true},
//     "excitation": {"period_ns": 1000, "p_excite": 1, "n_pulses": 100000},
//     "detector":   {"preset": "ideal" | "realistic", ...overrides},
//     "analysis":   {"trpl_bin_width_ps": 100, "estimator": "instantaneous", ...},
//     "output":     {"directory": "run", "stream_format": "csv", "write_streams": true},
//     "threads": 1
//   }
//
// Every object rejects keys it does not know.
#pragma once

#include "qcount/decay_fit.hpp"
#include "qcount/detection.hpp"
#include "qcount/ensemble.hpp"
#include "qcount/error.hpp"
#include "qcount/jumps.hpp"
#include "qcount/resolver.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace qcount {

struct LifetimeScalingSpec {
    std::optional<double> a_ns, b_ns;
    std::vector<std::pair<double, double>> points;
};

struct CouplingSpec {
    std::string mode = "uniform";  // uniform | free_space
    double kappa = 0.0;
    std::optional<LifetimeScalingSpec> lifetime_scaling;
    bool include_coherent = true;
};

struct AnalysisSpec {
    std::int64_t trpl_bin_width_ps = 100;
    std::int64_t coincidence_bin_width_ps = 1000;
    int coincidence_periods = 3;
    std::string estimator = "instantaneous";  // instantaneous | area_ratio
    std::optional<double> pair_window_ps;
    double range_in_windows = 10.0;
    int slices = 8;
    int degree = 2;
    std::string decay_model = "biexp";
    std::optional<double> tau0_reference_ns;  // defaults to the ensemble tau0
    bool brightness_constraint = true;
    int n_max = 10;
};

struct OutputSpec {
    std::string directory = "qcount_run";
    std::string stream_format = "csv";  // csv | binary
    bool write_streams = true;
};

struct ExperimentConfig {
    std::uint64_t seed = 1;
    std::vector<int> n_values{1};
    EnsembleSpec ensemble;
    double tau0_ns = 48.95;
    CouplingSpec coupling;
    ExcitationModel excitation{1000.0, 1.0, 100000};
    DetectorConfig detector;
    AnalysisSpec analysis;
    OutputSpec output;
    unsigned threads = 1;
    nlohmann::json source;  // normalized document used for hashing

    double tau0_reference_ns() const { return analysis.tau0_reference_ns.value_or(tau0_ns); }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> known) {
    require(j.is_object(), "schema_violation", where + " must be a JSON object");
    std::set<std::string> k;
    for (const char* s : known) k.insert(s);
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!k.count(it.key())) throw Error("schema_violation", "unknown key '" + it.key() + "' in " + where);
}

template <class T>
T get_or(const nlohmann::json& j, const char* key, const std::string& where, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw Error("schema_violation", where + "." + key + " has the wrong type");
    }
}

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace detail

inline std::string hash_hex(const std::string& s) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(detail::fnv1a64(s)));
    return buf;
}

inline ExperimentConfig parse_config(const nlohmann::json& j) {
    using detail::get_or;
    detail::reject_unknown(j, "config",
                           {"schema_version", "seed", "ensemble", "coupling", "excitation", "detector", "analysis", "output", "threads"});
    ExperimentConfig c;
    require(get_or<int>(j, "schema_version", "config", 1) == 1, "schema_violation", "config.schema_version must be 1");
    c.seed = get_or<std::uint64_t>(j, "seed", "config", 1);
    c.threads = get_or<unsigned>(j, "threads", "config", 1);
    require(c.threads >= 1, "schema_violation", "threads must be >= 1");

    const auto en = j.value("ensemble", nlohmann::json::object());
    detail::reject_unknown(en, "ensemble",
                           {"n", "n_values", "radius_nm", "min_distance_nm", "wavelength_nm", "tau0_ns", "gamma0_relative_spread",
                            "gamma0_per_ns", "dipoles", "fixed_dipole"});
    require(!(en.contains("n") && en.contains("n_values")), "schema_violation", "give either ensemble.n or ensemble.n_values");
    if (en.contains("n_values"))
        c.n_values = get_or<std::vector<int>>(en, "n_values", "ensemble", {});
    else
        c.n_values = {get_or<int>(en, "n", "ensemble", 1)};
    require(!c.n_values.empty(), "schema_violation", "ensemble.n_values must not be empty");
    for (int n : c.n_values) require(n >= 1, "schema_violation", "ensemble sizes must be >= 1");
    c.ensemble.radius_nm = get_or<double>(en, "radius_nm", "ensemble", c.ensemble.radius_nm);
    c.ensemble.min_distance_nm = get_or<double>(en, "min_distance_nm", "ensemble", c.ensemble.min_distance_nm);
    c.ensemble.wavelength_nm = get_or<double>(en, "wavelength_nm", "ensemble", c.ensemble.wavelength_nm);
    c.tau0_ns = get_or<double>(en, "tau0_ns", "ensemble", c.tau0_ns);
    require(c.tau0_ns > 0.0, "schema_violation", "ensemble.tau0_ns must be positive");
    c.ensemble.gamma0_mean = 1.0 / c.tau0_ns;
    c.ensemble.gamma0_relative_spread = get_or<double>(en, "gamma0_relative_spread", "ensemble", 0.0);
    c.ensemble.gamma0_explicit = get_or<std::vector<double>>(en, "gamma0_per_ns", "ensemble", {});
    require(c.ensemble.gamma0_explicit.empty() || c.n_values.size() == 1, "schema_violation",
            "ensemble.gamma0_per_ns requires a single ensemble size");
    const auto dip = get_or<std::string>(en, "dipoles", "ensemble", "isotropic");
    if (dip == "isotropic")
        c.ensemble.dipole_rule = DipoleRule::isotropic;
    else if (dip == "random")
        c.ensemble.dipole_rule = DipoleRule::random;
    else if (dip == "fixed")
        c.ensemble.dipole_rule = DipoleRule::fixed;
    else
        throw Error("schema_violation", "ensemble.dipoles must be isotropic, random or fixed");
    if (en.contains("fixed_dipole")) {
        const auto v = get_or<std::vector<double>>(en, "fixed_dipole", "ensemble", {});
        require(v.size() == 3, "schema_violation", "ensemble.fixed_dipole must have 3 components");
        c.ensemble.fixed_dipole = Eigen::Vector3d(v[0], v[1], v[2]);
    }

    const auto co = j.value("coupling", nlohmann::json::object());
    detail::reject_unknown(co, "coupling", {"mode", "kappa", "lifetime_scaling", "include_coherent"});
    c.coupling.mode = get_or<std::string>(co, "mode", "coupling", "uniform");
    require(c.coupling.mode == "uniform" || c.coupling.mode == "free_space", "schema_violation",
            "coupling.mode must be uniform or free_space");
    c.coupling.kappa = get_or<double>(co, "kappa", "coupling", 0.0);
    c.coupling.include_coherent = get_or<bool>(co, "include_coherent", "coupling", true);
    if (co.contains("lifetime_scaling")) {
        require(c.coupling.mode == "uniform", "schema_violation", "lifetime_scaling applies to uniform coupling only");
        require(!co.contains("kappa"), "schema_violation", "give either coupling.kappa or coupling.lifetime_scaling");
        const auto& ls = co.at("lifetime_scaling");
        detail::reject_unknown(ls, "coupling.lifetime_scaling", {"a_ns", "b_ns", "points"});
        LifetimeScalingSpec s;
        if (ls.contains("points")) {
            require(!ls.contains("a_ns") && !ls.contains("b_ns"), "schema_violation", "give either points or a_ns/b_ns");
            s.points = get_or<std::vector<std::pair<double, double>>>(ls, "points", "coupling.lifetime_scaling", {});
        } else {
            require(ls.contains("a_ns") && ls.contains("b_ns"), "schema_violation", "lifetime_scaling needs a_ns and b_ns");
            s.a_ns = get_or<double>(ls, "a_ns", "coupling.lifetime_scaling", 0.0);
            s.b_ns = get_or<double>(ls, "b_ns", "coupling.lifetime_scaling", 0.0);
        }
        c.coupling.lifetime_scaling = s;
    }
    require(c.coupling.kappa >= 0.0 && c.coupling.kappa <= 1.0, "schema_violation", "coupling.kappa must lie in [0, 1]");

    const auto ex = j.value("excitation", nlohmann::json::object());
    detail::reject_unknown(ex, "excitation", {"period_ns", "p_excite", "n_pulses"});
    c.excitation.period_ns = get_or<double>(ex, "period_ns", "excitation", c.excitation.period_ns);
    c.excitation.p_excite = get_or<double>(ex, "p_excite", "excitation", c.excitation.p_excite);
    c.excitation.n_pulses = get_or<std::int64_t>(ex, "n_pulses", "excitation", c.excitation.n_pulses);
    validate(c.excitation);

    const auto de = j.value("detector", nlohmann::json::object());
    detail::reject_unknown(de, "detector", {"preset", "efficiency", "dead_time_ns", "jitter_sigma_ps", "dark_rate_cps", "splitter_ratio"});
    const auto preset = get_or<std::string>(de, "preset", "detector", "ideal");
    require(preset == "ideal" || preset == "realistic", "schema_violation", "detector.preset must be ideal or realistic");
    if (preset == "realistic") c.detector = DetectorConfig::realistic();
    c.detector.efficiency = get_or<double>(de, "efficiency", "detector", c.detector.efficiency);
    c.detector.dead_time_ns = get_or<double>(de, "dead_time_ns", "detector", c.detector.dead_time_ns);
    c.detector.jitter_sigma_ps = get_or<double>(de, "jitter_sigma_ps", "detector", c.detector.jitter_sigma_ps);
    c.detector.dark_rate_cps = get_or<double>(de, "dark_rate_cps", "detector", c.detector.dark_rate_cps);
    c.detector.splitter_ratio = get_or<double>(de, "splitter_ratio", "detector", c.detector.splitter_ratio);
    validate(c.detector);

    const auto an = j.value("analysis", nlohmann::json::object());
    detail::reject_unknown(an, "analysis",
                           {"trpl_bin_width_ps", "coincidence_bin_width_ps", "coincidence_periods", "estimator", "pair_window_ps",
                            "range_in_windows", "slices", "degree", "decay_model", "tau0_reference_ns", "brightness_constraint", "n_max"});
    auto& a = c.analysis;
    a.trpl_bin_width_ps = get_or<std::int64_t>(an, "trpl_bin_width_ps", "analysis", a.trpl_bin_width_ps);
    a.coincidence_bin_width_ps = get_or<std::int64_t>(an, "coincidence_bin_width_ps", "analysis", a.coincidence_bin_width_ps);
    a.coincidence_periods = get_or<int>(an, "coincidence_periods", "analysis", a.coincidence_periods);
    a.estimator = get_or<std::string>(an, "estimator", "analysis", a.estimator);
    require(a.estimator == "instantaneous" || a.estimator == "area_ratio", "schema_violation",
            "analysis.estimator must be instantaneous or area_ratio");
    if (an.contains("pair_window_ps")) a.pair_window_ps = get_or<double>(an, "pair_window_ps", "analysis", 0.0);
    a.range_in_windows = get_or<double>(an, "range_in_windows", "analysis", a.range_in_windows);
    a.slices = get_or<int>(an, "slices", "analysis", a.slices);
    a.degree = get_or<int>(an, "degree", "analysis", a.degree);
    a.decay_model = get_or<std::string>(an, "decay_model", "analysis", a.decay_model);
    decay_model_from_string(a.decay_model);
    if (an.contains("tau0_reference_ns")) a.tau0_reference_ns = get_or<double>(an, "tau0_reference_ns", "analysis", 0.0);
    a.brightness_constraint = get_or<bool>(an, "brightness_constraint", "analysis", a.brightness_constraint);
    a.n_max = get_or<int>(an, "n_max", "analysis", a.n_max);
    require(a.trpl_bin_width_ps >= 1 && a.coincidence_bin_width_ps >= 1, "schema_violation", "bin widths must be >= 1 ps");
    require(a.coincidence_periods >= 3, "schema_violation", "analysis.coincidence_periods must be >= 3");

    const auto ou = j.value("output", nlohmann::json::object());
    detail::reject_unknown(ou, "output", {"directory", "stream_format", "write_streams"});
    c.output.directory = get_or<std::string>(ou, "directory", "output", c.output.directory);
    c.output.stream_format = get_or<std::string>(ou, "stream_format", "output", c.output.stream_format);
    require(c.output.stream_format == "csv" || c.output.stream_format == "binary", "schema_violation",
            "output.stream_format must be csv or binary");
    c.output.write_streams = get_or<bool>(ou, "write_streams", "output", c.output.write_streams);

    c.source = j;
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    require(f.good(), "missing_file", "cannot open config '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw Error("schema_violation", std::string("config is not valid JSON: ") + e.what());
    }
    return parse_config(j);
}

// Hash of the physics-relevant part of the config (output paths and thread count excluded).
inline std::string config_hash(const ExperimentConfig& c) {
    auto j = c.source;
    j.erase("output");
    j.erase("threads");
    j["seed"] = c.seed;
    return hash_hex(j.dump());
}

// Uniform coupling strength reproducing a target bright-mode lifetime tau1 = b + a / n.
inline double kappa_for_lifetime(int n, double tau1_ns, double tau0_ns) {
    if (n == 1) return 0.0;
    const double k = (tau0_ns / tau1_ns - 1.0) / (n - 1);
    if (k < -1e-12 || k > 1.0 + 1e-12)
        throw Error("kappa_out_of_range", "lifetime " + std::to_string(tau1_ns) + " ns at n = " + std::to_string(n) +
                                              " needs kappa = " + std::to_string(k) + " outside [0, 1]");
    return std::clamp(k, 0.0, 1.0);
}

inline std::optional<LifetimeScalingFit> scaling_of(const CouplingSpec& s) {
    if (!s.lifetime_scaling) return std::nullopt;
    if (!s.lifetime_scaling->points.empty()) return fit_lifetime_scaling(s.lifetime_scaling->points);
    LifetimeScalingFit f;
    f.a = *s.lifetime_scaling->a_ns;
    f.b = *s.lifetime_scaling->b_ns;
    return f;
}

} // namespace qcount
