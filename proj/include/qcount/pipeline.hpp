// pipeline.hpp: simulate -> detect -> histogram -> fit -> estimate -> resolve, per ensemble size.
#pragma once

#include "qcount/config.hpp"
#include "qcount/decay_fit.hpp"
#include "qcount/detection.hpp"
#include "qcount/ensemble.hpp"
#include "qcount/jumps.hpp"
#include "qcount/photstat.hpp"
#include "qcount/resolver.hpp"
#include "qcount/stream.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#ifndef QCOUNT_VERSION
#define QCOUNT_VERSION "0.1.0"
#endif

namespace qcount {

inline constexpr const char* kVersion = QCOUNT_VERSION;

struct SimulatedSample {
    int n = 1;
    double kappa = 0.0;
    EmitterEnsemble ensemble;
    CouplingMatrix coupling;
    CollectiveModes modes;
    PhotonStream pre;
    PhotonStream detected;
};

// Seeds of the i-th ensemble of a run.
inline std::uint64_t sample_seed(const ExperimentConfig& c, std::size_t index, std::uint64_t tag) {
    return stream_seed(c.seed, index, tag);
}

inline SimulatedSample simulate_sample(const ExperimentConfig& c, std::size_t index) {
    require(index < c.n_values.size(), "invalid_argument", "sample index outside n_values");
    SimulatedSample s;
    s.n = c.n_values[index];
    EnsembleSpec spec = c.ensemble;
    spec.n = s.n;
    spec.seed = sample_seed(c, index, stream_tag::geometry);
    s.ensemble = build_ensemble(spec);
    if (c.coupling.mode == "free_space") {
        s.coupling = coupling_free_space(s.ensemble, c.coupling.include_coherent);
    } else {
        s.kappa = c.coupling.kappa;
        if (auto fit = scaling_of(c.coupling)) s.kappa = kappa_for_lifetime(s.n, fit->tau1_at(s.n), c.tau0_ns);
        s.coupling = coupling_uniform(s.n, s.ensemble.gamma0_mean, s.kappa);
        // Heterogeneous intrinsic rates keep their own diagonal; off-diagonals scale geometrically.
        for (Eigen::Index i = 0; i < s.coupling.size(); ++i)
            for (Eigen::Index k = 0; k < s.coupling.size(); ++k)
                s.coupling.gamma(i, k) = (i == k ? 1.0 : s.kappa) *
                                         std::sqrt(s.ensemble.gamma0[static_cast<std::size_t>(i)] * s.ensemble.gamma0[static_cast<std::size_t>(k)]);
    }
    s.modes = collective_modes(s.coupling);
    const auto hash = config_hash(c);
    s.pre = simulate_pulsed_experiment(s.ensemble, s.coupling, s.modes, c.excitation,
                                       sample_seed(c, index, stream_tag::emission), c.threads, hash);
    s.detected = apply_detector_chain(s.pre, c.detector, sample_seed(c, index, stream_tag::detection));
    return s;
}

struct SampleAnalysis {
    DecayHistogram trpl;
    CoincidenceHistogram coincidence;
    std::optional<DecayFit> fit;
    std::optional<G2Estimate> g2_instantaneous, g2_area_ratio;
    std::string g2_error;  // estimator failure message, if any
    std::optional<PeakIntensity> peak;
};

inline InstantaneousOptions instantaneous_options(const AnalysisSpec& a) {
    InstantaneousOptions o;
    o.window_ps = a.pair_window_ps;
    o.range_in_windows = a.range_in_windows;
    o.slices = a.slices;
    o.degree = a.degree;
    return o;
}

inline SampleAnalysis analyze_stream(const PhotonStream& detected, const AnalysisSpec& a) {
    SampleAnalysis r;
    r.trpl = build_decay_histogram(detected, a.trpl_bin_width_ps);
    r.coincidence = build_coincidence_histogram(detected, a.coincidence_bin_width_ps, a.coincidence_periods);
    if (r.trpl.total() > 0) r.peak = peak_intensity(r.trpl);
    r.fit = fit_decay(r.trpl, decay_model_from_string(a.decay_model));
    auto opt = instantaneous_options(a);
    if (!opt.window_ps) opt.window_ps = 0.05 * r.fit->tau1_ns() * 1000.0;
    try {
        r.g2_instantaneous = estimate_g2_instantaneous(detected, r.trpl, opt);
    } catch (const Error& e) {
        r.g2_error = e.code() + ": " + e.what();
    }
    try {
        r.g2_area_ratio = estimate_g2_area_ratio(r.coincidence);
    } catch (const Error& e) {
        if (r.g2_error.empty()) r.g2_error = e.code() + ": " + e.what();
    }
    return r;
}

struct SampleRecord {
    std::size_t index = 0;
    int n_configured = 1;
    double kappa = 0.0;
    std::uint64_t seed_emission = 0, seed_detection = 0, seed_geometry = 0;
    std::size_t photons_pre = 0, photons_detected = 0;
    G2Estimate g2_modes, g2_full;
    SampleAnalysis analysis;
    std::optional<NEstimate> estimate;
    std::string resolve_error;
    std::vector<std::string> files;

    const std::optional<G2Estimate>& chosen_g2(const std::string& estimator) const {
        return estimator == "area_ratio" ? analysis.g2_area_ratio : analysis.g2_instantaneous;
    }
};

struct RunReport {
    nlohmann::json document;  // includes wall_clock_s
    std::vector<SampleRecord> records;
    std::string report_hash;
};

namespace detail {

inline std::string sample_stem(const SampleRecord& r) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "sample%02zu_n%02d", r.index, r.n_configured);
    return buf;
}

template <class F>
void write_file(const std::filesystem::path& p, F&& body, std::vector<std::string>& files, bool binary = false) {
    std::ofstream f(p, binary ? std::ios::binary : std::ios::out);
    require(f.good(), "io_error", "cannot write '" + p.string() + "'");
    body(f);
    require(f.good(), "io_error", "write to '" + p.string() + "' failed");
    files.push_back(p.filename().string());
}

inline nlohmann::json optional_json(const std::optional<G2Estimate>& g) { return g ? to_json(*g) : nlohmann::json(nullptr); }

} // namespace detail

inline nlohmann::json to_json(const SampleRecord& r, const std::string& estimator) {
    nlohmann::json j = {{"index", r.index},
                        {"n_configured", r.n_configured},
                        {"kappa", r.kappa},
                        {"seeds", {{"geometry", r.seed_geometry}, {"emission", r.seed_emission}, {"detection", r.seed_detection}}},
                        {"photons_pre", r.photons_pre},
                        {"photons_detected", r.photons_detected},
                        {"g2",
                         {{"analytic_modes", to_json(r.g2_modes)},
                          {"analytic_full", to_json(r.g2_full)},
                          {"instantaneous", detail::optional_json(r.analysis.g2_instantaneous)},
                          {"area_ratio", detail::optional_json(r.analysis.g2_area_ratio)},
                          {"used", estimator}}},
                        {"decay_fit", r.analysis.fit ? to_json(*r.analysis.fit) : nlohmann::json(nullptr)},
                        {"i_max", r.analysis.peak ? nlohmann::json{{"counts_per_bin", r.analysis.peak->value},
                                                                    {"time_ns", r.analysis.peak->time_ns}}
                                                  : nlohmann::json(nullptr)},
                        {"estimate", r.estimate ? to_json(*r.estimate) : nlohmann::json(nullptr)},
                        {"files", r.files}};
    if (!r.analysis.g2_error.empty()) j["g2_error"] = r.analysis.g2_error;
    if (!r.resolve_error.empty()) j["resolve_error"] = r.resolve_error;
    return j;
}

// progress(index, n) is called before each sample; may be empty.
inline RunReport run_pipeline(const ExperimentConfig& c, bool write_files = true,
                              const std::function<void(std::size_t, int)>& progress = {}) {
    const auto started = std::chrono::steady_clock::now();
    namespace fs = std::filesystem;
    const fs::path dir(c.output.directory);
    if (write_files) fs::create_directories(dir);
    const double tau0_ref = c.tau0_reference_ns();
    const auto hash = config_hash(c);

    RunReport report;
    for (std::size_t i = 0; i < c.n_values.size(); ++i) {
        if (progress) progress(i, c.n_values[i]);
        auto s = simulate_sample(c, i);
        SampleRecord r;
        r.index = i;
        r.n_configured = s.n;
        r.kappa = s.kappa;
        r.seed_geometry = sample_seed(c, i, stream_tag::geometry);
        r.seed_emission = sample_seed(c, i, stream_tag::emission);
        r.seed_detection = sample_seed(c, i, stream_tag::detection);
        r.photons_pre = s.pre.records.size();
        r.photons_detected = s.detected.records.size();
        r.g2_modes = g2_analytic_modes(s.modes, s.ensemble.gamma0_mean);
        r.g2_full = g2_full(s.modes.rates, Eigen::Map<const Eigen::VectorXd>(s.ensemble.gamma0.data(), static_cast<Eigen::Index>(s.ensemble.gamma0.size())));
        try {
            r.analysis = analyze_stream(s.detected, c.analysis);
        } catch (const Error& e) {
            r.resolve_error = e.code() + ": " + e.what();
        }
        if (write_files) {
            const auto stem = detail::sample_stem(r);
            if (c.output.write_streams) {
                const bool bin = c.output.stream_format == "binary";
                const std::string ext = bin ? ".qdt" : ".csv";
                detail::write_file(dir / (stem + "_pre" + ext), [&](std::ostream& o) { bin ? write_stream_binary(o, s.pre) : write_stream_csv(o, s.pre); }, r.files, bin);
                detail::write_file(dir / (stem + "_detected" + ext), [&](std::ostream& o) { bin ? write_stream_binary(o, s.detected) : write_stream_csv(o, s.detected); }, r.files, bin);
            }
            detail::write_file(dir / (stem + "_coupling.csv"), [&](std::ostream& o) { write_coupling_csv(o, s.coupling); }, r.files);
            detail::write_file(dir / (stem + "_modes.csv"), [&](std::ostream& o) { write_modes_csv(o, s.modes); }, r.files);
            detail::write_file(dir / (stem + "_trpl.csv"), [&](std::ostream& o) { write_histogram_csv(o, r.analysis.trpl); }, r.files);
            if (!r.analysis.coincidence.counts.empty())
                detail::write_file(dir / (stem + "_coincidence.csv"), [&](std::ostream& o) { write_coincidence_csv(o, r.analysis.coincidence); }, r.files);
        }
        report.records.push_back(std::move(r));
    }

    // First pass: cubic inversion alone.
    for (auto& r : report.records) {
        const auto& g = r.chosen_g2(c.analysis.estimator);
        if (!r.analysis.fit || !g) {
            if (r.resolve_error.empty()) r.resolve_error = "missing_input: " + (r.analysis.g2_error.empty() ? std::string("no decay fit") : r.analysis.g2_error);
            continue;
        }
        try {
            r.estimate = solve_n(std::min(g->value, 1.999999), r.analysis.fit->tau1_ns(), tau0_ref);
        } catch (const Error& e) {
            r.resolve_error = e.code() + ": " + e.what();
        }
    }

    // Second pass: brightness relative to the single-emitter records, exponent from the unambiguous ones.
    std::optional<double> reference;
    std::optional<PowerLawFit> power;
    {
        double sum = 0.0;
        int count = 0;
        std::vector<std::pair<double, double>> pts;
        for (const auto& r : report.records) {
            if (!r.estimate || !r.analysis.peak) continue;
            if (r.estimate->n_int == 1 && r.estimate->status != "ambiguous") {
                sum += r.analysis.peak->value;
                ++count;
            }
            if ((r.estimate->status == "resolved" || r.estimate->status == "single_emitter") && !r.estimate->low_confidence)
                pts.emplace_back(r.estimate->n_int, r.analysis.peak->value);
        }
        if (count > 0) reference = sum / count;
        try {
            power = fit_power_law(pts);
        } catch (const Error&) {
        }
    }
    const double exponent = power && power->exponent > 0.0 ? power->exponent : 1.0;
    if (c.analysis.brightness_constraint && reference) {
        for (auto& r : report.records) {
            if (!r.estimate || r.estimate->status != "ambiguous" || !r.analysis.peak) continue;
            const auto& g = *r.chosen_g2(c.analysis.estimator);
            r.estimate = resolve_with_constraints(std::min(g.value, 1.999999), r.analysis.fit->tau1_ns(), tau0_ref,
                                                  r.analysis.peak->value / *reference, exponent);
        }
    }

    // Summary: lifetime scaling and intensity scaling over resolved and configured N.
    nlohmann::json summary;
    int correct = 0;
    std::vector<std::pair<double, double>> tau_resolved, tau_true, imax_true;
    for (const auto& r : report.records) {
        if (r.estimate && r.estimate->n_int == r.n_configured) ++correct;
        if (r.analysis.fit) {
            tau_true.emplace_back(r.n_configured, r.analysis.fit->tau1_ns());
            if (r.estimate) tau_resolved.emplace_back(r.estimate->n_int, r.analysis.fit->tau1_ns());
        }
        if (r.analysis.peak && r.analysis.peak->value > 0.0) imax_true.emplace_back(r.n_configured, r.analysis.peak->value);
    }
    summary["n_correct"] = correct;
    summary["n_samples"] = report.records.size();
    auto try_scaling = [](const std::vector<std::pair<double, double>>& pts) -> nlohmann::json {
        try {
            return to_json(fit_lifetime_scaling(pts));
        } catch (const Error& e) {
            return {{"error", e.code()}, {"message", e.what()}};
        }
    };
    auto try_power = [](const std::vector<std::pair<double, double>>& pts) -> nlohmann::json {
        try {
            const auto p = fit_power_law(pts);
            return {{"exponent", p.exponent}, {"std_error", p.std_error}, {"prefactor", p.prefactor}, {"points", p.points}};
        } catch (const Error& e) {
            return {{"error", e.code()}, {"message", e.what()}};
        }
    };
    summary["lifetime_scaling_resolved_n"] = try_scaling(tau_resolved);
    summary["lifetime_scaling_configured_n"] = try_scaling(tau_true);
    summary["intensity_power_law_configured_n"] = try_power(imax_true);
    summary["brightness_reference_counts_per_bin"] = reference ? nlohmann::json(*reference) : nlohmann::json(nullptr);
    summary["brightness_exponent_used"] = exponent;

    nlohmann::json records = nlohmann::json::array();
    for (const auto& r : report.records) records.push_back(to_json(r, c.analysis.estimator));
    nlohmann::json doc = {{"schema_version", 1},
                          {"toolkit_version", kVersion},
                          {"config_hash", hash},
                          {"seed", c.seed},
                          {"tau0_reference_ns", tau0_ref},
                          {"estimator", c.analysis.estimator},
                          {"records", records},
                          {"summary", summary}};
    report.report_hash = hash_hex(doc.dump());
    doc["report_hash"] = report.report_hash;
    doc["wall_clock_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    report.document = doc;
    if (write_files) {
        std::vector<std::string> ignored;
        detail::write_file(dir / "report.json", [&](std::ostream& o) { o << doc.dump(2) << '\n'; }, ignored);
    }
    return report;
}

} // namespace qcount
