// photstat.hpp: zero-delay second-order correlation, analytic and estimated.
#pragma once

#include "qcount/decay_fit.hpp"
#include "qcount/detection.hpp"
#include "qcount/ensemble.hpp"
#include "qcount/error.hpp"
#include "qcount/lsq.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace qcount {

enum class G2Method { analytic_modes, analytic_full, dominant_channel, area_ratio, instantaneous, oracle };

inline const char* to_string(G2Method m) {
    switch (m) {
    case G2Method::analytic_modes: return "analytic_modes";
    case G2Method::analytic_full: return "analytic_full";
    case G2Method::dominant_channel: return "dominant_channel";
    case G2Method::area_ratio: return "area_ratio";
    case G2Method::instantaneous: return "instantaneous";
    case G2Method::oracle: return "oracle";
    }
    return "unknown";
}

struct G2Estimate {
    double value = 0.0;
    double std_error = 0.0;
    G2Method method = G2Method::analytic_modes;
    bool clamped = false;        // analytic value was negative and reported as 0
    double raw_value = 0.0;      // value before clamping
    long long pairs = 0;         // estimator sample size, where meaningful
};

inline nlohmann::json to_json(const G2Estimate& g) {
    return {{"schema_version", 1}, {"method", to_string(g.method)}, {"value", g.value}, {"std_error", g.std_error},
            {"clamped", g.clamped},  {"raw_value", g.raw_value},       {"pairs", g.pairs}};
}

// Population variance (divide by N).
inline double population_variance(const Eigen::VectorXd& x) {
    const double mean = x.mean();
    return (x.array() - mean).square().mean();
}

// g2 = 1 + (1/N) [Var({Gamma_nu}/Gamma0_mean) - 1]
inline G2Estimate g2_analytic_modes(const Eigen::VectorXd& rates, double gamma0_mean) {
    const auto n = rates.size();
    require(n >= 1, "empty_modes", "at least one collective mode is required");
    require(gamma0_mean > 0.0, "invalid_argument", "gamma0_mean must be positive");
    const double var = population_variance(rates / gamma0_mean);
    const double v = 1.0 + (var - 1.0) / static_cast<double>(n);
    return {std::max(v, 0.0), 0.0, G2Method::analytic_modes, v < 0.0, v, 0};
}

inline G2Estimate g2_analytic_modes(const CollectiveModes& m, double gamma0_mean) {
    return g2_analytic_modes(m.rates, gamma0_mean);
}

// Adds the emitter-inhomogeneity term -(2/N) Var(Gamma0_i / Gamma0_mean).
inline G2Estimate g2_full(const Eigen::VectorXd& rates, const Eigen::VectorXd& gamma0) {
    const auto n = rates.size();
    require(n >= 1 && gamma0.size() == n, "dimension_mismatch", "rates and gamma0 must have the same length N >= 1");
    require((gamma0.array() > 0.0).all(), "invalid_argument", "intrinsic rates must be positive");
    const double mean0 = gamma0.mean();
    const double nn = static_cast<double>(n);
    const double v = 1.0 + (population_variance(rates / mean0) - 1.0) / nn - 2.0 / nn * population_variance(gamma0 / mean0);
    return {std::max(v, 0.0), 0.0, G2Method::analytic_full, v < 0.0, v, 0};
}

// Single bright channel Gamma_c, all others dark.
inline G2Estimate g2_dominant_channel(int n, double gamma_c, double gamma0_mean) {
    require(n >= 1, "invalid_argument", "n must be >= 1");
    require(gamma_c > 0.0 && gamma0_mean > 0.0, "invalid_argument", "rates must be positive");
    const double nn = n;
    const double ratio = gamma_c / gamma0_mean;
    const double v = 1.0 + ((nn - 1.0) * ratio * ratio / (nn * nn) - 1.0) / nn;
    return {std::max(v, 0.0), 0.0, G2Method::dominant_channel, v < 0.0, v, 0};
}

// Brute-force evaluation on the fully excited product state:
//   sum_{nu,mu} G_nu G_mu <L_nu^+ L_mu^+ L_mu L_nu> / (sum_nu G_nu <L_nu^+ L_nu>)^2
// with explicit 2^N operators built from Kronecker products.
inline G2Estimate g2_oracle_fully_excited(const CollectiveModes& m, int max_n = 5) {
    const auto n = static_cast<int>(m.size());
    require(n >= 1 && n <= max_n, "scale_error", "fully excited oracle limited to N <= " + std::to_string(max_n));
    const Eigen::Matrix2d lower{{0.0, 1.0}, {0.0, 0.0}};  // |g><e| with basis (g, e)
    const Eigen::Matrix2d id = Eigen::Matrix2d::Identity();
    auto site_op = [&](int site) {
        Eigen::MatrixXd op = Eigen::MatrixXd::Identity(1, 1);
        for (int k = n - 1; k >= 0; --k) {
            const Eigen::Matrix2d& f = (k == site) ? lower : id;
            Eigen::MatrixXd next(op.rows() * 2, op.cols() * 2);
            for (Eigen::Index a = 0; a < op.rows(); ++a)
                for (Eigen::Index b = 0; b < op.cols(); ++b) next.block<2, 2>(2 * a, 2 * b) = op(a, b) * f;
            op = std::move(next);
        }
        return op;
    };
    const Eigen::Index dim = Eigen::Index{1} << n;
    std::vector<Eigen::MatrixXd> sigma;
    for (int i = 0; i < n; ++i) sigma.push_back(site_op(i));
    std::vector<Eigen::MatrixXd> l(static_cast<std::size_t>(n), Eigen::MatrixXd::Zero(dim, dim));
    for (int nu = 0; nu < n; ++nu)
        for (int i = 0; i < n; ++i) l[static_cast<std::size_t>(nu)] += m.vectors(nu, i) * sigma[static_cast<std::size_t>(i)];

    Eigen::VectorXd excited = Eigen::VectorXd::Zero(dim);
    excited(dim - 1) = 1.0;  // every factor in |e>
    double num = 0.0, den = 0.0;
    for (int nu = 0; nu < n; ++nu) {
        const Eigen::VectorXd once = l[static_cast<std::size_t>(nu)] * excited;
        den += m.rates(nu) * once.squaredNorm();
        for (int mu = 0; mu < n; ++mu) {
            const Eigen::VectorXd twice = l[static_cast<std::size_t>(mu)] * once;
            num += m.rates(nu) * m.rates(mu) * twice.squaredNorm();
        }
    }
    require(den > 0.0, "dark_state", "fully excited state has zero emission rate");
    const double v = num / (den * den);
    return {v, 0.0, G2Method::oracle, false, v, 0};
}

// ---------------------------------------------------------------------------
// Pulsed peak-area estimator

struct AreaRatioOptions {
    // Half-width of the integration window around each peak, as a fraction of the period.
    double window_fraction = 0.25;
};

inline G2Estimate estimate_g2_area_ratio(const CoincidenceHistogram& h, const AreaRatioOptions& opt = {}) {
    require(h.periods >= 3, "insufficient_side_peaks", "coincidence histogram must cover >= 3 side peaks per side");
    require(h.period_ps > 0 && !h.counts.empty(), "empty_histogram", "coincidence histogram is empty");
    const double win = opt.window_fraction * static_cast<double>(h.period_ps);
    std::vector<double> areas(static_cast<std::size_t>(2 * h.periods + 1), 0.0);
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
        const double t = static_cast<double>(h.bin_center_ps(i));
        const double m = std::round(t / static_cast<double>(h.period_ps));
        if (std::abs(m) > h.periods) continue;
        if (std::abs(t - m * static_cast<double>(h.period_ps)) > win) continue;
        areas[static_cast<std::size_t>(static_cast<int>(m) + h.periods)] += static_cast<double>(h.counts[i]);
    }
    const double center = areas[static_cast<std::size_t>(h.periods)];
    double side_total = 0.0;
    for (std::size_t k = 0; k < areas.size(); ++k)
        if (k != static_cast<std::size_t>(h.periods)) side_total += areas[k];
    require(side_total > 0.0, "empty_side_peaks", "side peaks contain no coincidences");
    const double side_mean = side_total / (2.0 * h.periods);
    const double v = center / side_mean;
    const double rel2 = 1.0 / std::max(center, 1.0) + 1.0 / side_total;
    const double se = center > 0.0 ? v * std::sqrt(rel2) : 1.0 / side_mean;
    return {v, se, G2Method::area_ratio, false, v, static_cast<long long>(center)};
}

// ---------------------------------------------------------------------------
// Instantaneous estimator: the zero-delay correlation of the emission at the
// start of the pulse, g2(t -> 0) = G2(t, t) / R(t)^2.
//
// Same-pulse cross-detector pairs with |t1 - t0| <= w are counted in time
// slices of their midpoint. Each count is normalized by the pair number
// expected for uncorrelated photons with the measured intensity profile,
// P f0 f1 sum_ij r_i r_j Pr(|t_j - t_i| <= w) over histogram bins. The slice
// ratios are extrapolated to t = 0 with a weighted polynomial fit.

struct InstantaneousOptions {
    std::optional<double> window_ps;   // pair half-width w; default 5% of fitted tau1
    double range_in_windows = 10.0;    // slices span [0, range_in_windows * w]
    int slices = 8;
    int degree = 2;
    long long min_pairs = 100;
};

namespace detail {

// Pr(|(j - i) b + (u2 - u1) b| <= w), u1, u2 ~ U(0, 1): difference of two bins' uniform positions.
inline double bin_pair_overlap(long long offset, double b, double w) {
    // D = offset + T, T triangular on [-1, 1]; need Pr(|D| <= w / b).
    const double lim = w / b;
    auto cdf = [](double x) {  // CDF of triangular on [-1, 1]
        if (x <= -1.0) return 0.0;
        if (x >= 1.0) return 1.0;
        return x <= 0.0 ? 0.5 * (1.0 + x) * (1.0 + x) : 1.0 - 0.5 * (1.0 - x) * (1.0 - x);
    };
    const double o = static_cast<double>(offset);
    return cdf(lim - o) - cdf(-lim - o);
}

} // namespace detail

inline G2Estimate estimate_g2_instantaneous(const PhotonStream& s, const DecayHistogram& h,
                                            const InstantaneousOptions& opt = {}) {
    require(!s.is_pre_detector(), "wrong_stage", "instantaneous estimator needs a detected stream");
    require(h.bin_width_ps >= 1 && !h.counts.empty(), "empty_histogram", "decay histogram is empty");
    require(opt.slices >= opt.degree + 2, "invalid_argument", "need more slices than polynomial degree + 1");
    const double w = opt.window_ps ? *opt.window_ps : default_pair_window_ps(h);
    require(w > 0.0, "invalid_argument", "pair window must be positive");
    const double slice_w = opt.range_in_windows * w / opt.slices;
    const auto slices = static_cast<std::size_t>(opt.slices);

    // Observed pairs per midpoint slice.
    std::vector<double> observed(slices, 0.0);
    double n0 = 0.0, n1 = 0.0;
    const auto& rec = s.records;
    for (std::size_t i = 0; i < rec.size(); ++i) {
        (rec[i].detector == 0 ? n0 : n1) += 1.0;
        for (std::size_t j = i + 1; j < rec.size() && rec[j].pulse_index == rec[i].pulse_index; ++j) {
            const double dt = static_cast<double>(rec[j].delay_ps - rec[i].delay_ps);
            if (dt > w) break;
            if (rec[i].detector == rec[j].detector) continue;
            const double mid = 0.5 * static_cast<double>(rec[i].delay_ps + rec[j].delay_ps);
            const auto k = static_cast<std::size_t>(mid / slice_w);
            if (k < slices) observed[k] += 1.0;
        }
    }
    const double total_pairs = std::accumulate(observed.begin(), observed.end(), 0.0);

    // Expected pairs for uncorrelated emission with the same profile.
    const double pulses = static_cast<double>(std::max<std::int64_t>(h.total_pulses, 1));
    const double photons = n0 + n1;
    require(photons > 0.0, "insufficient_pairs", "instantaneous g2 needs detected photons, found 0");
    const double f0 = n0 / photons, f1 = n1 / photons;
    const double b = static_cast<double>(h.bin_width_ps);
    const auto reach = static_cast<long long>(std::ceil(w / b)) + 1;
    const auto last_bin = static_cast<long long>(std::ceil((opt.range_in_windows * w + w) / b)) + 1;
    std::vector<double> expected(slices, 0.0);
    for (long long i = 0; i < std::min<long long>(last_bin, static_cast<long long>(h.counts.size())); ++i) {
        const double ri = static_cast<double>(h.counts[static_cast<std::size_t>(i)]) / pulses;
        if (ri == 0.0) continue;
        for (long long j = std::max(0LL, i - reach); j <= i + reach && j < static_cast<long long>(h.counts.size()); ++j) {
            const double rj = static_cast<double>(h.counts[static_cast<std::size_t>(j)]) / pulses;
            if (rj == 0.0) continue;
            const double mid = 0.5 * (static_cast<double>(i + j) + 1.0) * b;
            const auto k = static_cast<std::size_t>(mid / slice_w);
            if (k >= slices) continue;
            expected[k] += ri * rj * detail::bin_pair_overlap(j - i, b, w);
        }
    }
    // Ordered (detector-0, detector-1) pairs; the double sum covers both time orders.
    for (auto& e : expected) e *= pulses * f0 * f1;
    // The sample-size floor applies to the uncorrelated reference: a perfect
    // antibunched source legitimately shows no pairs at all.
    const double reference_pairs = std::accumulate(expected.begin(), expected.end(), 0.0);
    if (!(reference_pairs >= static_cast<double>(opt.min_pairs)))
        throw Error("insufficient_pairs", "instantaneous g2 needs >= " + std::to_string(opt.min_pairs) +
                                              " reference pairs inside the window, found " +
                                              std::to_string(static_cast<long long>(reference_pairs)) + " (observed " +
                                              std::to_string(static_cast<long long>(total_pairs)) + ")");

    std::vector<double> t, y, wt;
    for (std::size_t k = 0; k < slices; ++k) {
        if (expected[k] <= 0.0) continue;
        t.push_back((static_cast<double>(k) + 0.5) * slice_w);
        y.push_back(observed[k] / expected[k]);
        const double sigma = std::sqrt(std::max(observed[k], 1.0)) / expected[k];
        wt.push_back(1.0 / (sigma * sigma));
    }
    const int degree = std::min<int>(opt.degree, static_cast<int>(t.size()) - 2);
    require(degree >= 0, "insufficient_pairs", "too few populated slices for the extrapolation");
    Eigen::MatrixXd x(static_cast<Eigen::Index>(t.size()), degree + 1);
    for (std::size_t r = 0; r < t.size(); ++r)
        for (int c = 0; c <= degree; ++c) x(static_cast<Eigen::Index>(r), c) = std::pow(t[r] / (slice_w * opt.slices), c);
    const auto fit = lsq::weighted_linear(x, Eigen::Map<Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size())),
                                          Eigen::Map<Eigen::VectorXd>(wt.data(), static_cast<Eigen::Index>(wt.size())));
    const double v = fit.beta(0);
    double se = std::sqrt(fit.covariance(0, 0));
    if (fit.dof > 0) se *= std::sqrt(std::max(1.0, fit.chi2 / fit.dof));
    return {std::max(v, 0.0), se, G2Method::instantaneous, v < 0.0, v, static_cast<long long>(total_pairs)};
}

} // namespace qcount
