// ensemble.hpp: emitter geometry, radiative coupling matrices and collective decay modes.
#pragma once

#include "qcount/error.hpp"
#include "qcount/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace qcount {

// Units throughout: lengths nm, times ns, rates 1/ns.

struct EmitterEnsemble {
    std::vector<Eigen::Vector3d> positions;
    // Unit transition dipoles; nullopt means orientation-averaged ("isotropic").
    std::optional<std::vector<Eigen::Vector3d>> dipoles;
    double wavelength_nm = 620.0;
    std::vector<double> gamma0;
    double gamma0_mean = 0.0;

    std::size_t size() const noexcept { return positions.size(); }
    double wavenumber() const noexcept { return 2.0 * std::numbers::pi / wavelength_nm; }
    double tau0_mean() const noexcept { return 1.0 / gamma0_mean; }
};

enum class DipoleRule { isotropic, fixed, random };

struct EnsembleSpec {
    int n = 1;
    double radius_nm = 30.0;
    double min_distance_nm = 15.7;
    double wavelength_nm = 620.0;
    // Intrinsic rates: mean rate and a relative spread; each rate is drawn
    // uniformly from mean * [1 - sqrt(3) s, 1 + sqrt(3) s] (standard deviation s).
    double gamma0_mean = 1.0 / 48.95;
    double gamma0_relative_spread = 0.0;
    // Overrides the sampled rates when non-empty (must have n entries).
    std::vector<double> gamma0_explicit;
    DipoleRule dipole_rule = DipoleRule::isotropic;
    Eigen::Vector3d fixed_dipole = Eigen::Vector3d::UnitZ();
    std::uint64_t seed = 0;
    int max_attempts_per_emitter = 20000;
    int max_restarts = 20;
};

inline void validate(const EmitterEnsemble& e) {
    const auto n = e.size();
    require(n >= 1, "invalid_ensemble", "ensemble must contain at least one emitter");
    require(e.gamma0.size() == n, "invalid_ensemble", "gamma0 must have one rate per emitter");
    require(e.wavelength_nm > 0.0, "invalid_ensemble", "wavelength must be positive");
    for (double g : e.gamma0) require(g > 0.0 && std::isfinite(g), "invalid_ensemble", "intrinsic decay rates must be positive");
    const double mean = std::accumulate(e.gamma0.begin(), e.gamma0.end(), 0.0) / static_cast<double>(n);
    require(std::abs(mean - e.gamma0_mean) <= 1e-12 * mean, "invalid_ensemble", "gamma0_mean is not the mean of gamma0");
    if (e.dipoles) {
        require(e.dipoles->size() == n, "invalid_ensemble", "one dipole per emitter required");
        for (const auto& d : *e.dipoles)
            require(std::abs(d.norm() - 1.0) <= 1e-12, "invalid_ensemble", "dipole vectors must have unit norm");
    }
}

inline EmitterEnsemble make_ensemble(std::vector<Eigen::Vector3d> positions, std::vector<double> gamma0,
                                     double wavelength_nm = 620.0,
                                     std::optional<std::vector<Eigen::Vector3d>> dipoles = std::nullopt) {
    EmitterEnsemble e;
    e.positions = std::move(positions);
    e.gamma0 = std::move(gamma0);
    e.wavelength_nm = wavelength_nm;
    if (dipoles) {
        for (auto& d : *dipoles) d.normalize();
    }
    e.dipoles = std::move(dipoles);
    if (!e.gamma0.empty())
        e.gamma0_mean = std::accumulate(e.gamma0.begin(), e.gamma0.end(), 0.0) / static_cast<double>(e.gamma0.size());
    validate(e);
    return e;
}

namespace detail {

inline Eigen::Vector3d random_unit_vector(Rng& rng) {
    const double z = 2.0 * uniform01(rng) - 1.0;
    const double phi = 2.0 * std::numbers::pi * uniform01(rng);
    const double s = std::sqrt(std::max(0.0, 1.0 - z * z));
    return {s * std::cos(phi), s * std::sin(phi), z};
}

inline Eigen::Vector3d random_point_in_ball(Rng& rng, double radius) {
    for (;;) {
        Eigen::Vector3d p(2.0 * uniform01(rng) - 1.0, 2.0 * uniform01(rng) - 1.0, 2.0 * uniform01(rng) - 1.0);
        if (p.squaredNorm() <= 1.0) return radius * p;
    }
}

} // namespace detail

// Random sequential placement inside a sphere of radius radius_nm with a hard
// minimum center-to-center distance. Deterministic for a given seed.
inline EmitterEnsemble build_ensemble(const EnsembleSpec& spec) {
    require(spec.n >= 1, "invalid_spec", "ensemble size n must be >= 1");
    require(spec.radius_nm >= 0.0 && spec.min_distance_nm >= 0.0, "invalid_spec", "radius and minimum distance must be non-negative");
    require(spec.wavelength_nm > 0.0, "invalid_spec", "wavelength must be positive");
    require(spec.gamma0_mean > 0.0, "invalid_spec", "mean intrinsic decay rate must be positive");
    require(spec.gamma0_relative_spread >= 0.0 && spec.gamma0_relative_spread * std::sqrt(3.0) < 1.0, "invalid_spec",
            "relative gamma0 spread must lie in [0, 1/sqrt(3))");
    const auto n = static_cast<std::size_t>(spec.n);

    std::vector<Eigen::Vector3d> positions;
    if (n == 1) {
        positions.push_back(Eigen::Vector3d::Zero());
    } else {
        const double dmin2 = spec.min_distance_nm * spec.min_distance_nm;
        std::size_t best = 0;
        for (int restart = 0; restart < spec.max_restarts && positions.size() < n; ++restart) {
            auto rng = make_rng(spec.seed, static_cast<std::uint64_t>(restart), stream_tag::geometry);
            positions.clear();
            while (positions.size() < n) {
                bool placed = false;
                for (int attempt = 0; attempt < spec.max_attempts_per_emitter; ++attempt) {
                    const auto p = detail::random_point_in_ball(rng, spec.radius_nm);
                    const bool ok = std::all_of(positions.begin(), positions.end(),
                                                [&](const Eigen::Vector3d& q) { return (p - q).squaredNorm() >= dmin2; });
                    if (ok) {
                        positions.push_back(p);
                        placed = true;
                        break;
                    }
                }
                if (!placed) break;
            }
            best = std::max(best, positions.size());
        }
        if (positions.size() < n) {
            // Number density of hard spheres of diameter dmin at the jamming
            // limit of random sequential addition (~0.38 volume fraction).
            const double r_eff = spec.radius_nm + 0.5 * spec.min_distance_nm;
            const double sphere = std::pow(0.5 * spec.min_distance_nm, 3);
            const double rsa_estimate = sphere > 0.0 ? 0.38 * std::pow(r_eff, 3) / sphere : 0.0;
            std::ostringstream msg;
            msg << "cannot place " << n << " emitters with minimum distance " << spec.min_distance_nm
                << " nm inside a sphere of radius " << spec.radius_nm << " nm; best attempt placed " << best
                << " (achievable density ~" << std::floor(rsa_estimate) << " emitters for this geometry)";
            throw Error("packing_failure", msg.str());
        }
    }

    std::vector<double> gamma0(n, spec.gamma0_mean);
    if (!spec.gamma0_explicit.empty()) {
        require(spec.gamma0_explicit.size() == n, "invalid_spec", "explicit gamma0 list must have n entries");
        gamma0 = spec.gamma0_explicit;
    } else if (spec.gamma0_relative_spread > 0.0) {
        auto rng = make_rng(spec.seed, 0, stream_tag::gamma0);
        const double half = std::sqrt(3.0) * spec.gamma0_relative_spread;
        for (auto& g : gamma0) g = spec.gamma0_mean * (1.0 + half * (2.0 * uniform01(rng) - 1.0));
    }

    std::optional<std::vector<Eigen::Vector3d>> dipoles;
    if (spec.dipole_rule == DipoleRule::fixed) {
        require(spec.fixed_dipole.norm() > 0.0, "invalid_spec", "fixed dipole must be non-zero");
        dipoles.emplace(n, spec.fixed_dipole.normalized());
    } else if (spec.dipole_rule == DipoleRule::random) {
        auto rng = make_rng(spec.seed, 0, stream_tag::dipoles);
        dipoles.emplace();
        for (std::size_t i = 0; i < n; ++i) dipoles->push_back(detail::random_unit_vector(rng));
    }
    return make_ensemble(std::move(positions), std::move(gamma0), spec.wavelength_nm, std::move(dipoles));
}

// ---------------------------------------------------------------------------
// Coupling

struct CouplingMatrix {
    Eigen::MatrixXd j;      // coherent exchange J_ij, zero diagonal
    Eigen::MatrixXd gamma;  // dissipative Gamma_ij, diagonal = intrinsic rates

    Eigen::Index size() const noexcept { return gamma.rows(); }
    double gamma0_mean() const { return gamma.diagonal().mean(); }
    bool has_coherent_part() const { return j.size() > 0 && j.cwiseAbs().maxCoeff() > 0.0; }
};

inline void validate(const CouplingMatrix& c) {
    const auto n = c.gamma.rows();
    require(n >= 1 && c.gamma.cols() == n, "invalid_coupling", "gamma must be a non-empty square matrix");
    require(c.j.rows() == n && c.j.cols() == n, "invalid_coupling", "J and gamma dimensions differ");
    require((c.gamma - c.gamma.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * c.gamma.cwiseAbs().maxCoeff(),
            "invalid_coupling", "gamma must be symmetric");
    require((c.j - c.j.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, c.j.cwiseAbs().maxCoeff()),
            "invalid_coupling", "J must be symmetric");
    for (Eigen::Index i = 0; i < n; ++i) {
        require(c.gamma(i, i) > 0.0, "invalid_coupling", "diagonal decay rates must be positive");
        require(c.j(i, i) == 0.0, "invalid_coupling", "J diagonal must be zero");
    }
}

// Dyadic free-space coupling between two dipoles, normalized by sqrt(G_i G_j).
// Returns {J/sqrt(G_i G_j), Gamma/sqrt(G_i G_j)} for separation vector r (nm).
inline std::pair<double, double> dyadic_coupling(const Eigen::Vector3d& di, const Eigen::Vector3d& dj,
                                                 const Eigen::Vector3d& r, double k) {
    const double dist = r.norm();
    const Eigen::Vector3d rhat = r / dist;
    const double x = k * dist;
    const double a = di.dot(dj) - di.dot(rhat) * dj.dot(rhat);        // transverse
    const double b = di.dot(dj) - 3.0 * di.dot(rhat) * dj.dot(rhat);  // near-field
    const double s = std::sin(x), co = std::cos(x);
    const double gamma = 1.5 * (a * s / x + b * (co / (x * x) - s / (x * x * x)));
    const double j = -0.75 * (a * co / x - b * (s / (x * x) + co / (x * x * x)));
    return {j, gamma};
}

// Orientation average of dyadic_coupling: <a> = 2/3, <b> = 0.
inline std::pair<double, double> isotropic_coupling(double x) {
    return {-0.5 * std::cos(x) / x, std::sin(x) / x};
}

inline CouplingMatrix coupling_free_space(const EmitterEnsemble& e, bool include_coherent = true) {
    validate(e);
    const auto n = static_cast<Eigen::Index>(e.size());
    const double k = e.wavenumber();
    CouplingMatrix c{Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, n)};
    for (Eigen::Index i = 0; i < n; ++i) {
        c.gamma(i, i) = e.gamma0[i];
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const Eigen::Vector3d r = e.positions[j] - e.positions[i];
            require(r.norm() > 0.0, "coincident_emitters",
                    "emitters " + std::to_string(i) + " and " + std::to_string(j) + " share a position");
            const auto [jn, gn] = e.dipoles ? dyadic_coupling((*e.dipoles)[i], (*e.dipoles)[j], r, k)
                                            : isotropic_coupling(k * r.norm());
            const double scale = std::sqrt(e.gamma0[i] * e.gamma0[j]);
            c.gamma(i, j) = c.gamma(j, i) = gn * scale;
            if (include_coherent) c.j(i, j) = c.j(j, i) = jn * scale;
        }
    }
    return c;
}

// Synthetic coupling between the uncoupled (kappa = 0) and ideal Dicke (kappa = 1) limits.
inline CouplingMatrix coupling_uniform(int n, double gamma0, double kappa) {
    require(n >= 1, "invalid_argument", "n must be >= 1");
    require(gamma0 > 0.0, "invalid_argument", "gamma0 must be positive");
    require(kappa >= 0.0 && kappa <= 1.0, "kappa_out_of_range", "kappa must lie in [0, 1]");
    CouplingMatrix c{Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Constant(n, n, kappa * gamma0)};
    c.gamma.diagonal().setConstant(gamma0);
    return c;
}

// ---------------------------------------------------------------------------
// Collective modes

struct CollectiveModes {
    Eigen::VectorXd rates;    // descending
    Eigen::MatrixXd vectors;  // row nu is u^(nu)

    Eigen::Index size() const noexcept { return rates.size(); }
    // Gamma reconstructed from the (clamped) spectrum.
    Eigen::MatrixXd reconstruct() const { return vectors.transpose() * rates.asDiagonal() * vectors; }
};

inline CollectiveModes collective_modes(const CouplingMatrix& c) {
    validate(c);
    const auto n = c.size();
    const double mean = c.gamma0_mean();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(c.gamma);
    if (solver.info() != Eigen::Success) throw Error("eigensolver_failed", "eigen-decomposition of gamma did not converge");

    const double tol = 1e-9 * mean;
    struct Mode {
        double rate;
        Eigen::VectorXd u;
    };
    std::vector<Mode> modes;
    for (Eigen::Index k = 0; k < n; ++k) {
        double rate = solver.eigenvalues()(k);
        if (rate < -tol) {
            std::ostringstream msg;
            msg << "gamma is not positive semi-definite (eigenvalue " << rate << " 1/ns)";
            throw Error("not_psd", msg.str());
        }
        // Round-off around a dark mode is reported as exactly dark.
        if (rate <= 1e-12 * mean) rate = 0.0;
        Eigen::VectorXd u = solver.eigenvectors().col(k);
        // Sign convention: first significant component positive.
        for (Eigen::Index i = 0; i < n; ++i) {
            if (std::abs(u(i)) > 1e-12) {
                if (u(i) < 0.0) u = -u;
                break;
            }
        }
        modes.push_back({rate, std::move(u)});
    }
    const double tie = 1e-12 * std::max(mean, c.gamma.diagonal().maxCoeff());
    std::stable_sort(modes.begin(), modes.end(), [&](const Mode& a, const Mode& b) {
        if (std::abs(a.rate - b.rate) > tie) return a.rate > b.rate;
        return std::lexicographical_compare(b.u.begin(), b.u.end(), a.u.begin(), a.u.end());
    });
    CollectiveModes m{Eigen::VectorXd(n), Eigen::MatrixXd(n, n)};
    for (Eigen::Index k = 0; k < n; ++k) {
        m.rates(k) = modes[k].rate;
        m.vectors.row(k) = modes[k].u.transpose();
    }
    return m;
}

// ---------------------------------------------------------------------------
// CSV export (row-major matrices, one header comment naming the quantity and unit)

inline void write_matrix_csv(std::ostream& os, const Eigen::MatrixXd& m, const std::string& quantity,
                             const std::string& unit = "ns^-1") {
    os << "# " << quantity << " [" << unit << "] rows=" << m.rows() << " cols=" << m.cols() << '\n';
    os << std::setprecision(17);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? "," : "") << m(i, j);
        os << '\n';
    }
}

inline void write_coupling_csv(std::ostream& os, const CouplingMatrix& c) {
    write_matrix_csv(os, c.j, "J_ij");
    write_matrix_csv(os, c.gamma, "Gamma_ij");
}

inline void write_modes_csv(std::ostream& os, const CollectiveModes& m) {
    os << "rate_per_ns";
    for (Eigen::Index i = 0; i < m.size(); ++i) os << ",u_" << i;
    os << '\n' << std::setprecision(17);
    for (Eigen::Index k = 0; k < m.size(); ++k) {
        os << m.rates(k);
        for (Eigen::Index i = 0; i < m.size(); ++i) os << ',' << m.vectors(k, i);
        os << '\n';
    }
}

} // namespace qcount
