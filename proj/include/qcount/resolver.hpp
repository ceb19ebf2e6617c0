// resolver.hpp: emitter number from (g2(0), tau1, mean single-emitter lifetime).
#pragma once

#include "qcount/error.hpp"
#include "qcount/lsq.hpp"
#include "qcount/photstat.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace qcount {

// ---------------------------------------------------------------------------
// Real roots of a x^3 + b x^2 + c x + d with Newton polishing.

inline std::vector<double> real_cubic_roots(double a, double b, double c, double d) {
    std::vector<double> coeff{a, b, c, d};
    while (!coeff.empty() && coeff.front() == 0.0) coeff.erase(coeff.begin());
    const auto deg = static_cast<Eigen::Index>(coeff.size()) - 1;
    std::vector<double> out;
    if (deg < 1) return out;
    Eigen::MatrixXd comp = Eigen::MatrixXd::Zero(deg, deg);
    for (Eigen::Index j = 0; j < deg; ++j) comp(0, j) = -coeff[static_cast<std::size_t>(j + 1)] / coeff[0];
    for (Eigen::Index i = 1; i < deg; ++i) comp(i, i - 1) = 1.0;
    Eigen::EigenSolver<Eigen::MatrixXd> es(comp, false);
    require(es.info() == Eigen::Success, "eigen_failure", "companion eigen-solver failed");
    auto poly = [&](double x, double& dp) {
        double p = 0.0;
        dp = 0.0;
        for (double k : coeff) {
            dp = dp * x + p;
            p = p * x + k;
        }
        return p;
    };
    for (Eigen::Index i = 0; i < deg; ++i) {
        const auto z = es.eigenvalues()(i);
        if (std::abs(z.imag()) > 1e-6 * std::max(1.0, std::abs(z.real()))) continue;
        const double x0 = z.real();
        double x = x0;
        for (int it = 0; it < 50; ++it) {
            double dp = 0.0;
            const double p = poly(x, dp);
            if (dp == 0.0) break;
            const double step = p / dp;
            x -= step;
            if (std::abs(step) <= 1e-15 * std::max(1.0, std::abs(x))) break;
        }
        double d0 = 0.0, d1 = 0.0;
        // A near-double root whose discriminant rounds negative has no real neighbour to polish onto.
        if (!std::isfinite(x) || std::abs(poly(x, d1)) > std::abs(poly(x0, d0))) x = x0;
        out.push_back(x);
    }
    std::sort(out.begin(), out.end());
    // Near-double roots can polish onto the same value.
    out.erase(std::unique(out.begin(), out.end(), [](double u, double v) { return std::abs(u - v) <= 1e-9 * std::max(1.0, std::abs(u)); }),
              out.end());
    return out;
}

// ---------------------------------------------------------------------------

struct RootInfo {
    double value = 0.0;
    std::string classification;  // "physical" or "rejected:<reason>"
    double residual = 0.0;       // normalized cubic residual
};

struct NEstimate {
    std::optional<double> n_real;     // selected root
    int n_int = 0;
    std::vector<double> candidates;   // every physical root
    std::vector<RootInfo> roots;
    std::string method = "cubic_inversion";  // cubic_inversion, scaling_lookup, surface
    std::string status;               // resolved, ambiguous, constrained, single_emitter
    std::optional<double> constraint_used;
    double exponent_used = 0.0;
    bool low_confidence = false;
    bool dicke_bound_exceeded = false;  // kept a root above the N Gamma0 bound because none satisfied it
    std::array<double, 4> coefficients{};
    double g2 = 0.0, tau1_ns = 0.0, tau0_ns = 0.0;
};

struct ResolverOptions {
    double low_confidence_distance = 0.35;
    double dicke_bound_slack = 0.5;        // reject r > (1 + slack) N
    double single_emitter_g2 = 0.5;
    double single_emitter_lifetime_tolerance = 0.25;
};

namespace detail {

inline int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

inline double integer_distance(double x) { return std::abs(x - std::max(1, round_half_up(x))); }

inline void finalize_selection(NEstimate& e, double n, const ResolverOptions& opt) {
    e.n_real = n;
    e.n_int = std::max(1, round_half_up(n));
    e.low_confidence = integer_distance(n) > opt.low_confidence_distance;
}

} // namespace detail

// (g2 - 1) N^3 + N^2 - r^2 N + r^2 = 0 with r = tau0 / tau1.
inline NEstimate solve_n(double g2, double tau1_ns, double tau0_ns, const ResolverOptions& opt = {}) {
    require(g2 >= 0.0 && g2 < 2.0, "invalid_argument", "g2 must lie in [0, 2)");
    require(tau1_ns > 0.0 && tau0_ns > 0.0, "invalid_argument", "lifetimes must be positive");
    const double r = tau0_ns / tau1_ns;
    const double r2 = r * r;
    NEstimate e;
    e.g2 = g2;
    e.tau1_ns = tau1_ns;
    e.tau0_ns = tau0_ns;
    e.coefficients = {g2 - 1.0, 1.0, -r2, r2};
    const auto real = real_cubic_roots(g2 - 1.0, 1.0, -r2, r2);

    std::vector<double> within_bound, beyond_bound;
    for (double x : real) {
        RootInfo ri;
        ri.value = x;
        const double scale = std::abs(g2 - 1.0) * x * x * std::abs(x) + x * x + r2 * std::abs(x) + r2;
        ri.residual = std::abs((g2 - 1.0) * x * x * x + x * x - r2 * x + r2) / scale;
        if (x < 1.0 - 1e-9) {
            ri.classification = "rejected:below_one";
        } else if (r > (1.0 + opt.dicke_bound_slack) * x * (1.0 + 1e-12)) {
            ri.classification = "rejected:dicke_bound";
            beyond_bound.push_back(x);
        } else {
            ri.classification = "physical";
            within_bound.push_back(x);
        }
        e.roots.push_back(ri);
    }
    if (within_bound.empty() && !beyond_bound.empty()) {
        // The bound only discriminates between roots; with nothing else left, keep them and say so.
        for (auto& ri : e.roots)
            if (ri.classification == "rejected:dicke_bound") ri.classification = "physical";
        within_bound = beyond_bound;
        e.dicke_bound_exceeded = true;
    }
    e.candidates = within_bound;

    const bool single = g2 < opt.single_emitter_g2 &&
                        std::abs(tau1_ns - tau0_ns) <= opt.single_emitter_lifetime_tolerance * tau0_ns;
    if (single) {
        e.status = "single_emitter";
        e.n_real = 1.0;
        e.n_int = 1;
        return e;
    }
    if (e.candidates.empty()) {
        nlohmann::json j = {{"coefficients", e.coefficients}, {"roots", real}};
        throw Error("no_physical_root", "no real root N >= 1 for cubic " + j.dump());
    }
    if (e.candidates.size() == 1) {
        e.status = "resolved";
        detail::finalize_selection(e, e.candidates.front(), opt);
        return e;
    }
    // Without further information prefer the root most consistent with an integer count.
    e.status = "ambiguous";
    double best = e.candidates.front();
    for (double x : e.candidates)
        if (detail::integer_distance(x) < detail::integer_distance(best) - 1e-12) best = x;
    detail::finalize_selection(e, best, opt);
    return e;
}

// brightness: peak intensity relative to a single-emitter reference; exponent p of I ~ N^p.
inline NEstimate resolve_with_constraints(double g2, double tau1_ns, double tau0_ns, std::optional<double> brightness,
                                          double exponent = 1.0, const ResolverOptions& opt = {}) {
    auto e = solve_n(g2, tau1_ns, tau0_ns, opt);
    if (e.status != "ambiguous" || !brightness) return e;
    require(*brightness > 0.0, "invalid_argument", "brightness must be positive");
    require(exponent > 0.0, "invalid_argument", "power-law exponent must be positive");
    const double lb = std::log(*brightness);
    double best = e.candidates.front();
    for (double x : e.candidates)
        if (std::abs(lb - exponent * std::log(x)) < std::abs(lb - exponent * std::log(best))) best = x;
    detail::finalize_selection(e, best, opt);
    e.status = "constrained";
    e.constraint_used = brightness;
    e.exponent_used = exponent;
    return e;
}

inline bool classify_single_emitter(const G2Estimate& g) { return g.value + g.std_error < 0.5; }

// ---------------------------------------------------------------------------
// tau1 = b + a / N

struct LifetimeScalingFit {
    double a = 0.0;  // ns
    double b = 0.0;  // ns
    Eigen::Matrix2d covariance = Eigen::Matrix2d::Zero();  // over (a, b)
    double goodness = 0.0;  // residual variance, ns^2
    bool b_clamped = false;

    double tau1_at(double n) const { return b + a / n; }
};

inline LifetimeScalingFit fit_lifetime_scaling(const std::vector<std::pair<double, double>>& points) {
    std::set<double> distinct;
    for (const auto& [n, tau] : points) {
        require(n >= 1.0 && tau > 0.0, "invalid_argument", "scaling points need N >= 1 and tau1 > 0");
        distinct.insert(n);
    }
    require(distinct.size() >= 3, "underdetermined", "lifetime scaling fit needs >= 3 distinct N");
    const auto m = static_cast<Eigen::Index>(points.size());
    Eigen::MatrixXd x(m, 2);
    Eigen::VectorXd y(m);
    for (Eigen::Index i = 0; i < m; ++i) {
        x(i, 0) = 1.0 / points[static_cast<std::size_t>(i)].first;
        x(i, 1) = 1.0;
        y(i) = points[static_cast<std::size_t>(i)].second;
    }
    LifetimeScalingFit f;
    auto lin = lsq::weighted_linear(x, y, Eigen::VectorXd::Ones(m));
    f.a = lin.beta(0);
    f.b = lin.beta(1);
    double s2 = lin.dof > 0 ? lin.chi2 / lin.dof : 0.0;
    f.covariance = s2 * lin.covariance;
    if (f.b < 0.0) {
        const Eigen::MatrixXd x1 = x.leftCols(1);
        lin = lsq::weighted_linear(x1, y, Eigen::VectorXd::Ones(m));
        f.a = lin.beta(0);
        f.b = 0.0;
        f.b_clamped = true;
        s2 = lin.dof > 0 ? lin.chi2 / lin.dof : 0.0;
        f.covariance.setZero();
        f.covariance(0, 0) = s2 * lin.covariance(0, 0);
    }
    f.goodness = s2;
    require(f.a > 0.0, "non_decreasing_scaling", "fitted lifetime does not decrease with N (a <= 0)");
    return f;
}

// 1 - 1/n + (n - 1) tau0^2 / (n (a + b n)^2)
inline double g2_of_n(int n, const LifetimeScalingFit& fit, double tau0_ns, double min_tau1_ns = 0.1) {
    require(n >= 1, "invalid_argument", "n must be >= 1");
    require(fit.a > 0.0 && fit.b >= 0.0 && tau0_ns > 0.0, "invalid_argument", "invalid scaling fit or tau0");
    const double nn = n;
    const double tau1 = fit.b + fit.a / nn;
    if (tau1 < min_tau1_ns)
        throw Error("truncated", "tau1 = " + std::to_string(tau1) + " ns at n = " + std::to_string(n) +
                                     " is below the time resolution");
    const double q = fit.a + fit.b * nn;
    return 1.0 - 1.0 / nn + (nn - 1.0) * tau0_ns * tau0_ns / (nn * q * q);
}

// n values in [1, n_max) where g2_of_n(n + 1) < g2_of_n(n).
inline std::vector<int> g2_of_n_decreases(const LifetimeScalingFit& fit, double tau0_ns, int n_max) {
    std::vector<int> out;
    for (int n = 1; n < n_max; ++n)
        if (g2_of_n(n + 1, fit, tau0_ns, 0.0) < g2_of_n(n, fit, tau0_ns, 0.0) - 1e-12) out.push_back(n);
    return out;
}

// ---------------------------------------------------------------------------
// (tau1, g2) -> admissible N

struct SurfaceGrid {
    double tau1_min_ns = 10.0, tau1_max_ns = 60.0;
    int tau1_steps = 101;
    double g2_min = 0.0, g2_max = 1.5;
    int g2_steps = 301;  // cell tolerance band is +-half a g2 step
};

struct SurfaceMap {
    double tau0_ns = 0.0;
    int n_min = 2, n_max = 10;
    SurfaceGrid grid;
    std::vector<double> tau1_ns;  // grid axis
    std::vector<double> g2;       // grid axis
    std::vector<std::vector<std::vector<int>>> cells;  // [tau1][g2] -> N set
    std::optional<LifetimeScalingFit> fit;

    double g2_step() const { return grid.g2_steps > 1 ? (grid.g2_max - grid.g2_min) / (grid.g2_steps - 1) : 0.0; }
    // Cell index of a g2 value, or -1 outside the grid.
    int g2_index(double v) const {
        const double s = g2_step();
        if (s <= 0.0) return std::abs(v - grid.g2_min) < 1e-12 ? 0 : -1;
        const long k = std::lround((v - grid.g2_min) / s);
        return (k < 0 || k >= grid.g2_steps) ? -1 : static_cast<int>(k);
    }
};

inline double forward_g2(int n, double tau1_ns, double tau0_ns) {
    return g2_dominant_channel(n, 1.0 / tau1_ns, 1.0 / tau0_ns).raw_value;
}

inline SurfaceGrid grid_from_fit(const LifetimeScalingFit& fit, int n_max, SurfaceGrid g = {}) {
    g.tau1_min_ns = 0.8 * fit.tau1_at(n_max);
    g.tau1_max_ns = 1.2 * fit.tau1_at(2);
    return g;
}

inline SurfaceMap generate_surface(double tau0_ns, int n_max, const SurfaceGrid& grid,
                                   std::optional<LifetimeScalingFit> fit = std::nullopt) {
    require(n_max >= 2, "invalid_argument", "n_max must be >= 2");
    require(tau0_ns > 0.0, "invalid_argument", "tau0 must be positive");
    require(grid.tau1_steps >= 1 && grid.g2_steps >= 1, "invalid_argument", "grid needs at least one step per axis");
    require(grid.tau1_min_ns > 0.0 && grid.tau1_max_ns >= grid.tau1_min_ns, "invalid_argument", "invalid tau1 range");
    require(grid.g2_max >= grid.g2_min, "invalid_argument", "invalid g2 range");
    SurfaceMap s;
    s.tau0_ns = tau0_ns;
    s.n_max = n_max;
    s.grid = grid;
    s.fit = fit;
    for (int i = 0; i < grid.tau1_steps; ++i)
        s.tau1_ns.push_back(grid.tau1_steps == 1 ? grid.tau1_min_ns
                                                 : grid.tau1_min_ns + (grid.tau1_max_ns - grid.tau1_min_ns) * i / (grid.tau1_steps - 1));
    for (int j = 0; j < grid.g2_steps; ++j) s.g2.push_back(grid.g2_min + s.g2_step() * j);
    s.cells.assign(s.tau1_ns.size(), std::vector<std::vector<int>>(s.g2.size()));
    const double half = 0.5 * s.g2_step();
    for (std::size_t i = 0; i < s.tau1_ns.size(); ++i) {
        for (int n = s.n_min; n <= n_max; ++n) {
            const double v = forward_g2(n, s.tau1_ns[i], tau0_ns);
            // Inclusive band on both sides, so values on a boundary belong to both cells.
            for (int j = std::max(0, s.g2_index(v) - 1); j <= std::min(grid.g2_steps - 1, s.g2_index(v) + 1); ++j) {
                if (s.g2_index(v) < 0) break;
                if (std::abs(v - s.g2[static_cast<std::size_t>(j)]) <= half * (1.0 + 1e-12))
                    s.cells[i][static_cast<std::size_t>(j)].push_back(n);
            }
        }
    }
    return s;
}

inline nlohmann::json to_json(const SurfaceMap& s) {
    nlohmann::json cells = nlohmann::json::array();
    for (std::size_t i = 0; i < s.tau1_ns.size(); ++i)
        for (std::size_t j = 0; j < s.g2.size(); ++j)
            if (!s.cells[i][j].empty())
                cells.push_back({{"tau1_ns", s.tau1_ns[i]}, {"g2", s.g2[j]}, {"n", s.cells[i][j]},
                                 {"multi_root", s.cells[i][j].size() > 1}});
    nlohmann::json j = {{"schema_version", 1},
                        {"tau0_ns", s.tau0_ns},
                        {"n_min", s.n_min},
                        {"n_max", s.n_max},
                        {"tau1_ns", {{"min", s.grid.tau1_min_ns}, {"max", s.grid.tau1_max_ns}, {"steps", s.grid.tau1_steps}}},
                        {"g2", {{"min", s.grid.g2_min}, {"max", s.grid.g2_max}, {"steps", s.grid.g2_steps}}},
                        {"cells", cells}};
    if (s.fit) {
        nlohmann::json pts = nlohmann::json::array();
        for (int n = 1; n <= s.n_max; ++n) {
            nlohmann::json p = {{"n", n}, {"tau1_ns", s.fit->tau1_at(n)}};
            try {
                p["g2"] = g2_of_n(n, *s.fit, s.tau0_ns);
            } catch (const Error&) {
                p["g2"] = nullptr;
            }
            pts.push_back(p);
        }
        j["lifetime_scaling"] = {{"a_ns", s.fit->a}, {"b_ns", s.fit->b}, {"points", pts}};
    }
    return j;
}

inline void write_surface_csv(std::ostream& os, const SurfaceMap& s) {
    os << "tau1_ns,g2,n,flag\n";
    for (std::size_t i = 0; i < s.tau1_ns.size(); ++i)
        for (std::size_t j = 0; j < s.g2.size(); ++j)
            for (int n : s.cells[i][j])
                os << s.tau1_ns[i] << ',' << s.g2[j] << ',' << n << ',' << (s.cells[i][j].size() > 1 ? "multi_root" : "unique")
                   << '\n';
}

inline nlohmann::json to_json(const NEstimate& e) {
    nlohmann::json roots = nlohmann::json::array();
    for (const auto& r : e.roots) roots.push_back({{"value", r.value}, {"classification", r.classification}, {"residual", r.residual}});
    nlohmann::json j = {{"schema_version", 1},
                        {"method", e.method},
                        {"status", e.status},
                        {"n_int", e.n_int},
                        {"n_real", e.n_real ? nlohmann::json(*e.n_real) : nlohmann::json(nullptr)},
                        {"candidates", e.candidates},
                        {"roots", roots},
                        {"low_confidence", e.low_confidence},
                        {"dicke_bound_exceeded", e.dicke_bound_exceeded},
                        {"coefficients", e.coefficients},
                        {"inputs", {{"g2", e.g2}, {"tau1_ns", e.tau1_ns}, {"tau0_ns", e.tau0_ns}}}};
    j["constraint_used"] = e.constraint_used ? nlohmann::json(*e.constraint_used) : nlohmann::json(nullptr);
    if (e.constraint_used) j["exponent_used"] = e.exponent_used;
    return j;
}

inline nlohmann::json to_json(const LifetimeScalingFit& f) {
    return {{"a_ns", f.a},
            {"b_ns", f.b},
            {"a_std_error_ns", std::sqrt(std::max(0.0, f.covariance(0, 0)))},
            {"b_std_error_ns", std::sqrt(std::max(0.0, f.covariance(1, 1)))},
            {"goodness", f.goodness},
            {"b_clamped", f.b_clamped}};
}

} // namespace qcount
