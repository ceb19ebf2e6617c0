// Shared helpers for the test suites.
#pragma once

#include "qcount/detection.hpp"
#include "qcount/dynamics.hpp"
#include "qcount/ensemble.hpp"
#include "qcount/rng.hpp"

#include <Eigen/Dense>
#include <boost/math/distributions/fisher_f.hpp>

#include <complex>
#include <numbers>
#include <random>
#include <vector>

namespace qcount::testkit {

// Random positive semi-definite decay matrix with Gamma_ii = gamma0 * scale_i:
// a Gram matrix of random unit vectors, optionally rescaled by per-emitter rates.
inline Eigen::MatrixXd random_gamma(int n, Rng& rng, double gamma0, bool heterogeneous = false) {
    const int dim = 1 + static_cast<int>(uniform01(rng) * (n + 2));
    Eigen::MatrixXd v(n, dim);
    for (int i = 0; i < n; ++i) {
        for (int d = 0; d < dim; ++d) v(i, d) = 2.0 * uniform01(rng) - 1.0;
        if (v.row(i).norm() < 1e-3) v(i, 0) = 1.0;
        v.row(i).normalize();
    }
    Eigen::MatrixXd g = gamma0 * v * v.transpose();
    if (heterogeneous) {
        Eigen::VectorXd s(n);
        for (int i = 0; i < n; ++i) s(i) = std::sqrt(0.5 + uniform01(rng));
        g = s.asDiagonal() * g * s.asDiagonal();
    }
    return 0.5 * (g + g.transpose());
}

inline CouplingMatrix coupling_from_gamma(const Eigen::MatrixXd& g) {
    return {Eigen::MatrixXd::Zero(g.rows(), g.cols()), g};
}

// d_i . G(r) . d_j for the free-space dyadic Green's function
// G = (I + grad grad / k^2) exp(ikr) / (4 pi r), by central finite differences.
inline std::complex<double> green_contraction(const Eigen::Vector3d& di, const Eigen::Vector3d& dj, const Eigen::Vector3d& r,
                                              double k) {
    auto g = [k](const Eigen::Vector3d& x) {
        const double d = x.norm();
        return std::exp(std::complex<double>(0.0, k * d)) / (4.0 * std::numbers::pi * d);
    };
    const double h = 1e-4 * r.norm();
    const Eigen::Vector3d u = di * h, v = dj * h;
    const auto mixed = (g(r + u + v) - g(r + u - v) - g(r - u + v) + g(r - u - v)) / (4.0 * h * h);
    return di.dot(dj) * g(r) + mixed / (k * k);
}

// Decay histogram with Poisson counts around sum_k amp_k exp(-t / tau_k) per bin,
// amplitudes rescaled so that the expected total is `total`.
inline DecayHistogram poisson_decay_histogram(const std::vector<std::pair<double, double>>& amp_tau, double total,
                                              std::int64_t period_ps, std::int64_t bin_width_ps, std::uint64_t seed,
                                              bool noiseless = false) {
    auto h = make_decay_histogram(period_ps, bin_width_ps, 1);
    std::vector<double> mean(h.counts.size(), 0.0);
    double sum = 0.0;
    for (std::size_t i = 0; i < mean.size(); ++i) {
        for (const auto& [a, tau] : amp_tau) mean[i] += a * std::exp(-h.bin_center_ns(i) / tau);
        sum += mean[i];
    }
    Rng rng = make_rng(seed, 0, 99);
    for (std::size_t i = 0; i < mean.size(); ++i) {
        const double mu = mean[i] * total / sum;
        if (noiseless) {
            h.counts[i] = static_cast<std::uint64_t>(std::llround(mu));
        } else {
            std::poisson_distribution<long long> pd(mu);
            h.counts[i] = mu > 0.0 ? static_cast<std::uint64_t>(pd(rng)) : 0;
        }
    }
    return h;
}

// Expected photons per trajectory in each [edges[b], edges[b+1]) bin from the
// master equation: integral of R(t) by composite Simpson with `sub` panels per bin.
inline std::vector<double> expected_bin_counts(const CouplingMatrix& c, const CollectiveModes& m,
                                               const QuantumState& rho0, const std::vector<double>& edges, int sub = 8) {
    std::vector<double> grid;
    for (std::size_t b = 0; b + 1 < edges.size(); ++b)
        for (int k = 0; k < 2 * sub; ++k) grid.push_back(edges[b] + (edges[b + 1] - edges[b]) * k / (2.0 * sub));
    grid.push_back(edges.back());
    const auto states = lindblad_propagate(c, m, rho0, grid);
    std::vector<double> out;
    for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
        const double h = (edges[b + 1] - edges[b]) / (2.0 * sub);
        double acc = 0.0;
        for (int k = 0; k <= 2 * sub; ++k) {
            const double w = (k == 0 || k == 2 * sub) ? 1.0 : (k % 2 ? 4.0 : 2.0);
            acc += w * emission_rate(states[b * 2 * sub + static_cast<std::size_t>(k)], m);
        }
        out.push_back(acc * h / 3.0);
    }
    return out;
}

// Hotelling test of per-trajectory bin-count vectors against an expected mean.
// Counts inside one trajectory are correlated (fixed photon number, bursts), so
// the empirical covariance is used instead of Poisson variances. Returns the p-value.
inline double hotelling_p_value(const std::vector<Eigen::VectorXd>& samples, const Eigen::VectorXd& expected) {
    const auto n = static_cast<double>(samples.size());
    const auto p = expected.size();
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(p);
    for (const auto& s : samples) mean += s;
    mean /= n;
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(p, p);
    for (const auto& s : samples) cov.noalias() += (s - mean) * (s - mean).transpose();
    cov /= (n - 1.0);
    const Eigen::VectorXd d = mean - expected;
    const double t2 = n * d.dot(cov.ldlt().solve(d));
    const double f = (n - static_cast<double>(p)) / (static_cast<double>(p) * (n - 1.0)) * t2;
    boost::math::fisher_f_distribution<double> dist(static_cast<double>(p), n - static_cast<double>(p));
    return boost::math::cdf(boost::math::complement(dist, f));
}

} // namespace qcount::testkit
