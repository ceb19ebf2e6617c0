// decay_fit.hpp: mono / bi-exponential TRPL fits, peak intensity, power-law slope.
#pragma once

#include "qcount/detection.hpp"
#include "qcount/error.hpp"
#include "qcount/lsq.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace qcount {

enum class DecayModel { mono, biexp };

inline const char* to_string(DecayModel m) { return m == DecayModel::mono ? "mono" : "biexp"; }

inline DecayModel decay_model_from_string(const std::string& s) {
    if (s == "mono") return DecayModel::mono;
    if (s == "biexp") return DecayModel::biexp;
    throw Error("invalid_argument", "decay model must be 'mono' or 'biexp', got '" + s + "'");
}

// Model: counts(t) = a1 exp(-gamma1 t) + a2 exp(-gamma2 t) + background, with t
// measured from the start of the fit window (the peak bin center).
struct DecayFit {
    DecayModel model = DecayModel::mono;
    double gamma1 = 0.0;      // ns^-1, the slower component
    double gamma2 = 0.0;      // ns^-1, biexp only
    double a1 = 0.0;          // counts per bin at t0
    double a2 = 0.0;
    double background = 0.0;  // counts per bin
    double t0_ns = 0.0;       // time origin of the amplitudes
    Eigen::MatrixXd covariance;  // over (gamma1, gamma2?, a1, a2?, background)
    std::vector<std::string> parameter_names;
    double goodness = 0.0;    // reduced chi^2
    bool degenerate = false;  // biexp requested, mono returned
    bool converged = false;
    int bins_used = 0;

    double tau1_ns() const { return 1.0 / gamma1; }
    double tau2_ns() const { return gamma2 > 0.0 ? 1.0 / gamma2 : 0.0; }
    double variance_of(const std::string& name) const {
        for (std::size_t i = 0; i < parameter_names.size(); ++i)
            if (parameter_names[i] == name) return covariance(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i));
        return 0.0;
    }
    double gamma1_std_error() const { return std::sqrt(std::max(0.0, variance_of("gamma1"))); }
    double gamma2_std_error() const { return std::sqrt(std::max(0.0, variance_of("gamma2"))); }
    double tau1_std_error_ns() const { return gamma1_std_error() / (gamma1 * gamma1); }

    double model_at(double t_ns) const {
        const double t = t_ns - t0_ns;
        double v = a1 * std::exp(-gamma1 * t) + background;
        if (model == DecayModel::biexp) v += a2 * std::exp(-gamma2 * t);
        return v;
    }
};

enum class BackgroundMode { automatic, on, off };

struct DecayFitOptions {
    BackgroundMode background = BackgroundMode::automatic;
    double min_tail_count = 10.0;   // fit window ends where smoothed counts fall below this
    double degenerate_ratio = 1.2;  // gamma2 / gamma1 below this collapses to mono
    int min_nonzero_bins = 20;
    int model_weight_passes = 2;    // refits weighted by the fitted model (0 = count weights only)
    lsq::Options solver{};
};

namespace detail {

inline std::vector<double> moving_average(const std::vector<std::uint64_t>& c, int half) {
    std::vector<double> out(c.size(), 0.0);
    const auto n = static_cast<long long>(c.size());
    for (long long i = 0; i < n; ++i) {
        double s = 0.0;
        int k = 0;
        for (long long j = std::max(0LL, i - half); j <= std::min(n - 1, i + half); ++j, ++k) s += static_cast<double>(c[static_cast<std::size_t>(j)]);
        out[static_cast<std::size_t>(i)] = s / k;
    }
    return out;
}

// Unweighted fit of log(y) = log(a) - gamma t over points with y > 0.
inline bool log_linear(const std::vector<double>& t, const std::vector<double>& y, double& a, double& gamma) {
    double n = 0, st = 0, sy = 0, stt = 0, sty = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (y[i] <= 0.0) continue;
        const double ly = std::log(y[i]);
        n += 1;
        st += t[i];
        sy += ly;
        stt += t[i] * t[i];
        sty += t[i] * ly;
    }
    const double det = n * stt - st * st;
    if (n < 2 || det <= 0.0) return false;
    const double slope = (n * sty - st * sy) / det;
    a = std::exp((sy - slope * st) / n);
    gamma = -slope;
    return std::isfinite(a) && gamma > 0.0;
}

} // namespace detail

inline DecayFit fit_decay(const DecayHistogram& h, DecayModel model, const DecayFitOptions& opt = {}) {
    const auto nonzero = std::count_if(h.counts.begin(), h.counts.end(), [](std::uint64_t c) { return c > 0; });
    require(nonzero >= opt.min_nonzero_bins, "insufficient_data",
            "decay fit needs >= " + std::to_string(opt.min_nonzero_bins) + " nonzero bins, found " + std::to_string(nonzero));

    const auto smooth = detail::moving_average(h.counts, 2);
    const std::size_t nb = h.counts.size();
    const auto peak = static_cast<std::size_t>(std::max_element(smooth.begin(), smooth.end()) - smooth.begin());

    // Flat floor estimated from the last tenth of the period.
    double bg_est = 0.0;
    {
        const std::size_t from = nb - std::max<std::size_t>(nb / 10, 1);
        for (std::size_t i = from; i < nb; ++i) bg_est += static_cast<double>(h.counts[i]);
        bg_est /= static_cast<double>(nb - from);
    }
    const bool fit_bg = opt.background == BackgroundMode::on ||
                        (opt.background == BackgroundMode::automatic && bg_est >= 1.0);

    std::size_t end = nb;
    if (!fit_bg) {
        for (std::size_t i = peak; i < nb; ++i)
            if (smooth[i] < opt.min_tail_count) {
                end = i;
                break;
            }
    }
    require(end > peak + 5, "insufficient_data", "decay too short for a fit window");

    const double t0 = h.bin_center_ns(peak);
    std::vector<double> t, y;
    for (std::size_t i = peak; i < end; ++i) {
        t.push_back(h.bin_center_ns(i) - t0);
        y.push_back(static_cast<double>(h.counts[i]));
    }
    const auto m = static_cast<Eigen::Index>(t.size());
    Eigen::VectorXd sig(m);
    for (Eigen::Index i = 0; i < m; ++i) sig(i) = std::sqrt(std::max(y[static_cast<std::size_t>(i)], 1.0));

    // Seeds: slow rate from the last third of the part still above the floor,
    // fast rate from the early residual.
    std::size_t signal_end = t.size();
    for (std::size_t i = peak; i < end; ++i)
        if (smooth[i] - (fit_bg ? bg_est : 0.0) < opt.min_tail_count) {
            signal_end = std::max<std::size_t>(i - peak, 6);
            break;
        }
    double a1s = y.front(), g1s = 1.0 / std::max(t[signal_end - 1], 1e-3);
    {
        const std::size_t from = (2 * signal_end) / 3;
        std::vector<double> tt(t.begin() + static_cast<long>(from), t.begin() + static_cast<long>(signal_end)),
            yy(y.begin() + static_cast<long>(from), y.begin() + static_cast<long>(signal_end));
        for (auto& v : yy) v -= fit_bg ? bg_est : 0.0;
        double a = 0, g = 0;
        if (detail::log_linear(tt, yy, a, g)) {
            a1s = a;
            g1s = g;
        } else if (detail::log_linear(t, y, a, g)) {
            a1s = a;
            g1s = g;
        }
    }
    double a2s = 0.0, g2s = 3.0 * g1s;
    if (model == DecayModel::biexp) {
        const std::size_t upto = std::max<std::size_t>(t.size() / 10, 5);
        std::vector<double> tt, rr;
        for (std::size_t i = 0; i < std::min(upto, t.size()); ++i) {
            tt.push_back(t[i]);
            rr.push_back(y[i] - a1s * std::exp(-g1s * t[i]) - (fit_bg ? bg_est : 0.0));
        }
        double a = 0, g = 0;
        if (detail::log_linear(tt, rr, a, g) && g > 1.2 * g1s) {
            a2s = a;
            g2s = g;
        } else {
            a2s = std::max(0.1 * y.front(), 1.0);
        }
    }

    const bool bi = model == DecayModel::biexp;
    // Parameter vector: log gamma1, [log gamma2], a1, [a2], [background]
    const Eigen::Index np = (bi ? 4 : 2) + (fit_bg ? 1 : 0);
    const Eigen::Index i_g2 = bi ? 1 : -1;
    const Eigen::Index i_a1 = bi ? 2 : 1;
    const Eigen::Index i_a2 = bi ? 3 : -1;
    const Eigen::Index i_bg = fit_bg ? np - 1 : -1;
    Eigen::VectorXd p(np);
    p(0) = std::log(g1s);
    if (bi) {
        p(i_g2) = std::log(g2s);
        p(i_a2) = a2s;
    }
    p(i_a1) = std::max(a1s, 1.0);
    if (fit_bg) p(i_bg) = bg_est;

    auto residuals = [&](const Eigen::VectorXd& q, Eigen::VectorXd& r, Eigen::MatrixXd* jac) {
        r.resize(m);
        if (jac) jac->setZero(m, np);
        const double g1 = std::exp(q(0));
        const double g2 = bi ? std::exp(q(i_g2)) : 0.0;
        for (Eigen::Index i = 0; i < m; ++i) {
            const double ti = t[static_cast<std::size_t>(i)];
            const double e1 = std::exp(-g1 * ti);
            const double e2 = bi ? std::exp(-g2 * ti) : 0.0;
            double v = q(i_a1) * e1;
            if (bi) v += q(i_a2) * e2;
            if (fit_bg) v += q(i_bg);
            r(i) = (v - y[static_cast<std::size_t>(i)]) / sig(i);
            if (jac) {
                (*jac)(i, 0) = -q(i_a1) * ti * g1 * e1 / sig(i);
                (*jac)(i, i_a1) = e1 / sig(i);
                if (bi) {
                    (*jac)(i, i_g2) = -q(i_a2) * ti * g2 * e2 / sig(i);
                    (*jac)(i, i_a2) = e2 / sig(i);
                }
                if (fit_bg) (*jac)(i, i_bg) = 1.0 / sig(i);
            }
        }
    };
    // Lifetimes longer than five windows are indistinguishable from a floor.
    const double log_g_min = std::log(0.2 / std::max(t.back(), 1e-3));
    auto project = [&](Eigen::VectorXd& q) {
        q(i_a1) = std::max(q(i_a1), 0.0);
        if (bi) q(i_a2) = std::max(q(i_a2), 0.0);
        if (fit_bg) q(i_bg) = std::max(q(i_bg), 0.0);
        for (Eigen::Index k : {Eigen::Index{0}, i_g2})
            if (k >= 0) q(k) = std::clamp(q(k), log_g_min, 10.0);
    };
    // Bi-exponential surfaces have shallow valleys; a few extra starts around
    // the tail seed keep the optimizer out of the floor-like solutions.
    std::vector<Eigen::VectorXd> starts{p};
    if (bi) {
        for (double f : {2.0, 5.0}) {
            Eigen::VectorXd q = p;
            q(i_g2) = std::log(f * g1s);
            q(i_a2) = std::max(0.5 * y.front(), 1.0);
            q(i_a1) = std::max(0.5 * y.front(), 1.0);
            starts.push_back(q);
        }
        Eigen::VectorXd q = p;
        q(0) = std::log(0.5 * g1s);
        q(i_g2) = std::log(2.0 * g1s);
        q(i_a1) = q(i_a2) = std::max(0.5 * y.front(), 1.0);
        starts.push_back(q);
    }
    lsq::Result res;
    bool have = false;
    for (const auto& q : starts) {
        auto r = lsq::levenberg_marquardt(residuals, q, project, opt.solver);
        if (!r.params.allFinite() || !std::isfinite(r.chi2)) continue;
        if (!have || r.chi2 < res.chi2) {
            res = std::move(r);
            have = true;
        }
    }
    require(have, "fit_failed", "decay fit diverged");
    // Weights from observed counts pull the curve below the data where counts
    // are small; refit with variances taken from the model itself.
    for (int pass = 0; pass < opt.model_weight_passes; ++pass) {
        const double g1 = std::exp(res.params(0));
        const double g2 = bi ? std::exp(res.params(i_g2)) : 0.0;
        for (Eigen::Index i = 0; i < m; ++i) {
            const double ti = t[static_cast<std::size_t>(i)];
            double v = res.params(i_a1) * std::exp(-g1 * ti);
            if (bi) v += res.params(i_a2) * std::exp(-g2 * ti);
            if (fit_bg) v += res.params(i_bg);
            sig(i) = std::sqrt(std::max(v, 1.0));
        }
        res = lsq::levenberg_marquardt(residuals, res.params, project, opt.solver);
        require(res.params.allFinite(), "fit_failed", "decay fit diverged");
    }

    // Jacobian of (gamma1, gamma2, ...) with respect to the log parameters.
    Eigen::VectorXd scale = Eigen::VectorXd::Ones(np);
    scale(0) = std::exp(res.params(0));
    if (bi) scale(i_g2) = std::exp(res.params(i_g2));
    const Eigen::MatrixXd cov = scale.asDiagonal() * res.covariance * scale.asDiagonal();

    DecayFit f;
    f.t0_ns = t0;
    f.bins_used = static_cast<int>(m);
    f.goodness = res.reduced_chi2();
    f.converged = res.converged;
    f.background = fit_bg ? res.params(i_bg) : 0.0;
    if (!bi) {
        f.model = DecayModel::mono;
        f.gamma1 = std::exp(res.params(0));
        f.a1 = res.params(i_a1);
        f.covariance = cov;
        f.parameter_names = {"gamma1", "a1"};
        if (fit_bg) f.parameter_names.push_back("background");
        require(res.converged, "fit_failed", "decay fit did not converge within the iteration limit");
        return f;
    }

    double g1 = std::exp(res.params(0)), g2 = std::exp(res.params(i_g2));
    double a1 = res.params(i_a1), a2 = res.params(i_a2);
    std::vector<Eigen::Index> order{0, i_g2, i_a1, i_a2};
    if (g1 > g2) {
        std::swap(g1, g2);
        std::swap(a1, a2);
        order = {i_g2, 0, i_a2, i_a1};
    }
    // A slow rate pinned to the lower bound is a floor, not a lifetime.
    const bool pinned = std::log(g1) <= log_g_min + 1e-9;
    if (g2 / g1 < opt.degenerate_ratio || a1 <= 0.0 || a2 <= 0.0 || pinned) {
        DecayFitOptions mono_opt = opt;
        auto mono = fit_decay(h, DecayModel::mono, mono_opt);
        mono.degenerate = true;
        return mono;
    }
    require(res.converged, "fit_failed", "decay fit did not converge within the iteration limit");
    f.model = DecayModel::biexp;
    f.gamma1 = g1;
    f.gamma2 = g2;
    f.a1 = a1;
    f.a2 = a2;
    if (fit_bg) order.push_back(i_bg);
    f.covariance.resize(np, np);
    for (Eigen::Index r = 0; r < np; ++r)
        for (Eigen::Index c = 0; c < np; ++c) f.covariance(r, c) = cov(order[static_cast<std::size_t>(r)], order[static_cast<std::size_t>(c)]);
    f.parameter_names = {"gamma1", "gamma2", "a1", "a2"};
    if (fit_bg) f.parameter_names.push_back("background");
    return f;
}

inline nlohmann::json to_json(const DecayFit& f) {
    nlohmann::json cov = nlohmann::json::array();
    for (Eigen::Index r = 0; r < f.covariance.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < f.covariance.cols(); ++c) row.push_back(f.covariance(r, c));
        cov.push_back(row);
    }
    nlohmann::json j = {{"schema_version", 1},
                        {"model", to_string(f.model)},
                        {"gamma1_per_ns", f.gamma1},
                        {"gamma1_std_error_per_ns", f.gamma1_std_error()},
                        {"tau1_ns", f.tau1_ns()},
                        {"tau1_std_error_ns", f.tau1_std_error_ns()},
                        {"a1", f.a1},
                        {"background_per_bin", f.background},
                        {"t0_ns", f.t0_ns},
                        {"parameters", f.parameter_names},
                        {"covariance", cov},
                        {"reduced_chi2", f.goodness},
                        {"degenerate", f.degenerate},
                        {"converged", f.converged},
                        {"bins_used", f.bins_used}};
    if (f.model == DecayModel::biexp) {
        j["gamma2_per_ns"] = f.gamma2;
        j["gamma2_std_error_per_ns"] = f.gamma2_std_error();
        j["tau2_ns"] = f.tau2_ns();
        j["a2"] = f.a2;
    }
    return j;
}

// Noiseless histogram of a fitted (or chosen) model, counts rounded to integers.
inline DecayHistogram histogram_from_model(const DecayFit& f, std::int64_t period_ps, std::int64_t bin_width_ps) {
    auto h = make_decay_histogram(period_ps, bin_width_ps);
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
        const double t = h.bin_center_ns(i);
        h.counts[i] = t < f.t0_ns ? 0 : static_cast<std::uint64_t>(std::llround(f.model_at(t)));
    }
    return h;
}

// Pair window default for the instantaneous estimator: 5% of the fitted tau1.
inline double default_pair_window_ps(const DecayHistogram& h) {
    DecayFit f;
    try {
        f = fit_decay(h, DecayModel::biexp);
    } catch (const Error&) {
        f = fit_decay(h, DecayModel::mono);
    }
    return 0.05 * f.tau1_ns() * 1000.0;
}

// ---------------------------------------------------------------------------

struct PeakIntensity {
    double value = 0.0;  // counts per bin after 3-bin smoothing
    std::size_t bin = 0;
    double time_ns = 0.0;
};

inline PeakIntensity peak_intensity(const DecayHistogram& h) {
    require(!h.counts.empty() && h.total() > 0, "empty_histogram", "peak intensity of an empty histogram");
    const auto s = detail::moving_average(h.counts, 1);
    const auto it = std::max_element(s.begin(), s.end());
    const auto bin = static_cast<std::size_t>(it - s.begin());
    return {*it, bin, h.bin_center_ns(bin)};
}

struct PowerLawFit {
    double exponent = 0.0;
    double std_error = 0.0;
    double prefactor = 0.0;  // I = prefactor * N^exponent
    int points = 0;
};

inline PowerLawFit fit_power_law(const std::vector<std::pair<double, double>>& points) {
    std::vector<double> ns;
    for (const auto& [n, v] : points) {
        require(n > 0.0 && v > 0.0, "invalid_argument", "power-law points need positive N and intensity");
        ns.push_back(n);
    }
    std::sort(ns.begin(), ns.end());
    require(std::unique(ns.begin(), ns.end()) - ns.begin() >= 3, "underdetermined", "power-law fit needs >= 3 distinct N");
    const auto m = static_cast<Eigen::Index>(points.size());
    Eigen::MatrixXd x(m, 2);
    Eigen::VectorXd y(m);
    for (Eigen::Index i = 0; i < m; ++i) {
        x(i, 0) = 1.0;
        x(i, 1) = std::log(points[static_cast<std::size_t>(i)].first);
        y(i) = std::log(points[static_cast<std::size_t>(i)].second);
    }
    const auto fit = lsq::weighted_linear(x, y, Eigen::VectorXd::Ones(m));
    const double s2 = fit.dof > 0 ? fit.chi2 / fit.dof : 0.0;
    return {fit.beta(1), std::sqrt(std::max(0.0, s2 * fit.covariance(1, 1))), std::exp(fit.beta(0)), static_cast<int>(m)};
}

} // namespace qcount
