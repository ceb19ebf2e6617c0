// jumps.hpp: quantum-jump (Monte Carlo wave-function) unraveling of the
// collective master equation and the pulsed-excitation emission simulator.
//
// The non-Hermitian generator H_eff = H - (i/2) sum_nu Gamma_nu L_nu^dag L_nu
// conserves the excitation number, so between jumps a trajectory lives in a
// single k-excitation subspace of dimension C(N, k). Each subspace gets its own
// propagator:
//   * J == 0: H_eff = -(i/2) A with A real symmetric, A = Q diag(d) Q^T, and
//     ||psi(t)||^2 = sum_m c_m^2 exp(-d_m t) in the eigenbasis.
//   * J != 0: complex eigen-decomposition H_eff = V diag(lambda) V^-1.
//   * large or ill-conditioned subspaces: Taylor-series action of the sparse
//     generator.
// Jump times follow the norm-threshold rule: draw r ~ U(0,1], jump when the
// unnormalized norm^2 crosses r (bisection, 1e-4 ns tolerance).
#pragma once

#include "qcount/ensemble.hpp"
#include "qcount/error.hpp"
#include "qcount/rng.hpp"
#include "qcount/stream.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <string>
#include <thread>
#include <vector>

namespace qcount {

using cplx = std::complex<double>;

struct ExcitationModel {
    double period_ns = 1000.0;
    double p_excite = 1.0;
    std::int64_t n_pulses = 0;
};

inline void validate(const ExcitationModel& x) {
    require(x.period_ns > 0.0 && std::isfinite(x.period_ns), "invalid_excitation", "period_ns must be positive");
    require(x.p_excite >= 0.0 && x.p_excite <= 1.0, "invalid_excitation", "p_excite must lie in [0, 1]");
    require(x.n_pulses >= 0, "invalid_excitation", "n_pulses must be non-negative");
}

// True when the period leaves at least five lifetimes of the slowest
// non-zero collective channel.
inline bool period_is_adequate(const ExcitationModel& x, const CollectiveModes& m) {
    double slowest = std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < m.size(); ++k)
        if (m.rates(k) > 1e-9 * m.rates.maxCoeff()) slowest = std::min(slowest, m.rates(k));
    return x.period_ns * slowest >= 5.0;
}

struct EmissionEvent {
    double time_ns = 0.0;      // since the excitation pulse
    int channel = 0;           // collective mode index nu
    std::int64_t pulse_index = 0;
};

struct JumpOptions {
    int max_n = 16;
    double time_tolerance_ns = 1e-4;
    std::size_t dense_limit = 1200;      // largest subspace handled by dense propagators
    double max_condition = 1e8;          // eigenvector condition bound for the J != 0 path
};

class JumpSimulator {
public:
    JumpSimulator(const CouplingMatrix& c, const CollectiveModes& m, JumpOptions opt = {})
        : opt_(opt), n_(static_cast<int>(c.size())) {
        validate(c);
        require(n_ <= opt_.max_n, "scale_error",
                "quantum-jump simulation limited to N <= " + std::to_string(opt_.max_n) + " (got " + std::to_string(n_) + ")");
        require(m.size() == n_, "dimension_mismatch", "modes and coupling describe different N");
        rates_ = m.rates;
        vectors_ = m.vectors;
        j_ = c.j;
        coherent_ = c.has_coherent_part();
        // Dissipator from the (clamped) spectrum so that the norm loss equals
        // the total jump rate exactly.
        gamma_eff_ = m.reconstruct();
        build_basis();
        for (int k = 1; k <= n_; ++k) build_subspace(k);
    }

    int size() const noexcept { return n_; }

    // One excitation pulse: each emitter independently excited with p_excite,
    // events recorded until the residual state cannot jump before the period ends.
    std::vector<EmissionEvent> run_pulse(const ExcitationModel& x, std::uint64_t seed, std::int64_t pulse_index) const {
        auto rng = make_rng(seed, static_cast<std::uint64_t>(pulse_index), stream_tag::emission);
        std::uint32_t mask = 0;
        for (int i = 0; i < n_; ++i)
            if (x.p_excite >= 1.0 || uniform01(rng) < x.p_excite) mask |= (1u << i);
        return run_from(mask, x.period_ns, rng, pulse_index);
    }

    std::vector<EmissionEvent> run_from(std::uint32_t mask, double t_end, Rng& rng, std::int64_t pulse_index = 0) const {
        std::vector<EmissionEvent> events;
        int k = std::popcount(mask);
        if (k == 0) return events;
        const auto& sub0 = subspaces_[static_cast<std::size_t>(k)];
        Eigen::VectorXcd psi = Eigen::VectorXcd::Zero(static_cast<Eigen::Index>(sub0.basis.size()));
        psi(index_of_[mask]) = 1.0;
        double t = 0.0;
        while (k > 0) {
            const auto& sub = subspaces_[static_cast<std::size_t>(k)];
            const double r = uniform_open0(rng);
            Eigen::VectorXcd at_jump;
            double tau = 0.0;
            if (!sub.find_jump(psi, r, t_end - t, opt_.time_tolerance_ns, tau, at_jump)) break;
            t += tau;
            const int channel = choose_channel(k, at_jump, rng, psi);
            events.push_back({t, channel, pulse_index});
            --k;
        }
        return events;
    }

private:
    enum class Path { real_spectral, complex_spectral, taylor };

    struct Subspace {
        Path path = Path::real_spectral;
        std::vector<std::uint32_t> basis;
        // real_spectral
        Eigen::MatrixXd q;
        Eigen::VectorXd d;
        // complex_spectral
        Eigen::MatrixXcd v, v_inv, gram;
        Eigen::VectorXcd lambda;
        // taylor: H_eff as a sparse list of (row, col, value)
        std::vector<Eigen::Index> rows, cols;
        std::vector<cplx> vals;
        double norm_bound = 0.0;

        Eigen::VectorXcd apply_sparse(const Eigen::VectorXcd& x) const {
            Eigen::VectorXcd y = Eigen::VectorXcd::Zero(x.size());
            for (std::size_t e = 0; e < vals.size(); ++e) y(rows[e]) += vals[e] * x(cols[e]);
            return y;
        }

        // exp(-i H_eff t) x by Taylor series on sub-steps of norm <= 0.5.
        Eigen::VectorXcd taylor_evolve(const Eigen::VectorXcd& x, double t) const {
            if (t <= 0.0) return x;
            const auto steps = std::max<long>(1, static_cast<long>(std::ceil(t * norm_bound / 0.5)));
            const double h = t / static_cast<double>(steps);
            Eigen::VectorXcd y = x;
            for (long s = 0; s < steps; ++s) {
                Eigen::VectorXcd term = y, acc = y;
                for (int order = 1; order <= 40; ++order) {
                    term = apply_sparse(term) * cplx(0.0, -h / order);
                    acc += term;
                    if (term.norm() <= 1e-16 * acc.norm()) break;
                }
                y = std::move(acc);
            }
            return y;
        }

        // Finds tau in [0, window] with ||psi(tau)||^2 = r. Returns false when
        // no jump occurs inside the window.
        bool find_jump(const Eigen::VectorXcd& psi0, double r, double window, double tol, double& tau,
                       Eigen::VectorXcd& psi_tau) const {
            if (window <= 0.0) return false;
            switch (path) {
            case Path::real_spectral: {
                const Eigen::VectorXd c = (q.transpose() * psi0.real()).eval();
                const Eigen::VectorXd c2 = c.cwiseAbs2();
                auto norm2 = [&](double s) { return (c2.array() * (-d.array() * s).exp()).sum(); };
                if (norm2(window) > r) return false;
                tau = bisect(norm2, r, 0.0, window, tol);
                const Eigen::VectorXd evolved = q * (c.array() * (-0.5 * d.array() * tau).exp()).matrix();
                psi_tau = evolved.cast<cplx>();
                return true;
            }
            case Path::complex_spectral: {
                const Eigen::VectorXcd c = v_inv * psi0;
                auto coeff = [&](double s) {
                    return (c.array() * (cplx(0.0, -s) * lambda.array()).exp()).matrix().eval();
                };
                auto norm2 = [&](double s) {
                    const Eigen::VectorXcd y = coeff(s);
                    return (y.adjoint() * gram * y)(0, 0).real();
                };
                if (norm2(window) > r) return false;
                tau = bisect(norm2, r, 0.0, window, tol);
                psi_tau = v * coeff(tau);
                return true;
            }
            case Path::taylor: {
                // Coarse steps of ~0.5 / norm_bound, then bisection inside the crossing step.
                const double coarse = std::max(0.5 / std::max(norm_bound, 1e-300), tol);
                double t0 = 0.0;
                Eigen::VectorXcd y = psi0;
                while (t0 < window) {
                    const double h = std::min(coarse, window - t0);
                    Eigen::VectorXcd y1 = taylor_evolve(y, h);
                    if (y1.squaredNorm() <= r) {
                        auto norm2 = [&](double s) { return taylor_evolve(y, s).squaredNorm(); };
                        const double s = bisect(norm2, r, 0.0, h, tol);
                        tau = t0 + s;
                        psi_tau = taylor_evolve(y, s);
                        return true;
                    }
                    y = std::move(y1);
                    t0 += h;
                }
                return false;
            }
            }
            return false;
        }

        template <class F>
        static double bisect(F&& norm2, double r, double lo, double hi, double tol) {
            // norm2 is non-increasing; invariant norm2(lo) > r >= norm2(hi).
            while (hi - lo > tol) {
                const double mid = 0.5 * (lo + hi);
                if (norm2(mid) > r)
                    lo = mid;
                else
                    hi = mid;
            }
            return 0.5 * (lo + hi);
        }
    };

    void build_basis() {
        const std::uint32_t dim = 1u << n_;
        index_of_.assign(dim, 0);
        subspaces_.assign(static_cast<std::size_t>(n_) + 1, Subspace{});
        for (std::uint32_t b = 0; b < dim; ++b) {
            auto& sub = subspaces_[static_cast<std::size_t>(std::popcount(b))];
            index_of_[b] = static_cast<Eigen::Index>(sub.basis.size());
            sub.basis.push_back(b);
        }
    }

    // Dense H_eff restricted to the k-excitation subspace.
    Eigen::MatrixXcd dense_generator(const Subspace& sub) const {
        const auto dim = static_cast<Eigen::Index>(sub.basis.size());
        Eigen::MatrixXcd h = Eigen::MatrixXcd::Zero(dim, dim);
        for_each_hop(sub, [&](Eigen::Index row, Eigen::Index col, cplx v) { h(row, col) += v; });
        return h;
    }

    // Visits every matrix element <b'| K_ij s_i^+ s_j |b> of
    // H_eff = sum_{i != j} J_ij s_i^+ s_j - (i/2) sum_ij G_ij s_i^+ s_j.
    template <class F>
    void for_each_hop(const Subspace& sub, F&& f) const {
        for (std::size_t col = 0; col < sub.basis.size(); ++col) {
            const std::uint32_t b = sub.basis[col];
            for (int j = 0; j < n_; ++j) {
                if (!(b & (1u << j))) continue;
                const std::uint32_t low = b & ~(1u << j);
                for (int i = 0; i < n_; ++i) {
                    if (i != j && (low & (1u << i))) continue;
                    const cplx v(i != j ? j_(i, j) : 0.0, -0.5 * gamma_eff_(i, j));
                    if (v == cplx(0.0)) continue;
                    f(index_of_[low | (1u << i)], static_cast<Eigen::Index>(col), v);
                }
            }
        }
    }

    void build_taylor(Subspace& sub) const {
        sub.path = Path::taylor;
        sub.rows.clear();
        sub.cols.clear();
        sub.vals.clear();
        Eigen::VectorXd col_sums = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(sub.basis.size()));
        for_each_hop(sub, [&](Eigen::Index row, Eigen::Index col, cplx v) {
            sub.rows.push_back(row);
            sub.cols.push_back(col);
            sub.vals.push_back(v);
            col_sums(col) += std::abs(v);
        });
        sub.norm_bound = std::max(col_sums.maxCoeff(), 1e-300);
    }

    void build_subspace(int k) {
        auto& sub = subspaces_[static_cast<std::size_t>(k)];
        if (sub.basis.size() > opt_.dense_limit) {
            build_taylor(sub);
            return;
        }
        const Eigen::MatrixXcd h = dense_generator(sub);
        if (!coherent_) {
            // H_eff = -(i/2) A, A real symmetric positive semi-definite.
            const Eigen::MatrixXd a = -2.0 * h.imag();
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
            if (es.info() != Eigen::Success) throw Error("eigensolver_failed", "subspace eigen-decomposition failed");
            sub.path = Path::real_spectral;
            sub.q = es.eigenvectors();
            sub.d = es.eigenvalues().cwiseMax(0.0);
            return;
        }
        Eigen::ComplexEigenSolver<Eigen::MatrixXcd> es(h);
        bool ok = es.info() == Eigen::Success;
        if (ok) {
            sub.v = es.eigenvectors();
            sub.lambda = es.eigenvalues();
            Eigen::PartialPivLU<Eigen::MatrixXcd> lu(sub.v);
            sub.v_inv = lu.inverse();
            const double cond = sub.v.norm() * sub.v_inv.norm();
            const double resid = (sub.v * sub.lambda.asDiagonal() * sub.v_inv - h).norm();
            ok = std::isfinite(cond) && cond < opt_.max_condition && resid <= 1e-10 * std::max(1.0, h.norm());
        }
        if (!ok) {
            build_taylor(sub);
            return;
        }
        sub.path = Path::complex_spectral;
        sub.gram = sub.v.adjoint() * sub.v;
    }

    // Picks nu with probability Gamma_nu ||L_nu psi||^2 / sum, and replaces psi
    // by the normalized post-jump state in the (k-1)-excitation subspace.
    int choose_channel(int k, const Eigen::VectorXcd& psi, Rng& rng, Eigen::VectorXcd& out) const {
        const auto& sub = subspaces_[static_cast<std::size_t>(k)];
        const auto& low = subspaces_[static_cast<std::size_t>(k - 1)];
        const auto low_dim = static_cast<Eigen::Index>(low.basis.size());
        // lowered(b', n) = <b'| sigma_n |psi>
        Eigen::MatrixXcd lowered = Eigen::MatrixXcd::Zero(low_dim, n_);
        for (std::size_t s = 0; s < sub.basis.size(); ++s) {
            const std::uint32_t b = sub.basis[s];
            for (int i = 0; i < n_; ++i)
                if (b & (1u << i)) lowered(index_of_[b & ~(1u << i)], i) = psi(static_cast<Eigen::Index>(s));
        }
        const Eigen::MatrixXcd branches = lowered * vectors_.transpose().cast<cplx>();
        Eigen::VectorXd w(n_);
        for (int nu = 0; nu < n_; ++nu) w(nu) = rates_(nu) * branches.col(nu).squaredNorm();
        const double total = w.sum();
        require(total > 0.0, "dark_jump", "jump requested from a state with zero emission rate");
        double u = uniform01(rng) * total;
        int nu = 0;
        for (; nu < n_ - 1; ++nu) {
            if (u < w(nu)) break;
            u -= w(nu);
        }
        while (w(nu) <= 0.0 && nu > 0) --nu;
        out = branches.col(nu) / branches.col(nu).norm();
        return nu;
    }

    JumpOptions opt_;
    int n_ = 0;
    bool coherent_ = false;
    Eigen::VectorXd rates_;
    Eigen::MatrixXd vectors_;
    Eigen::MatrixXd j_;
    Eigen::MatrixXd gamma_eff_;
    std::vector<Eigen::Index> index_of_;
    std::vector<Subspace> subspaces_;
};

inline std::vector<EmissionEvent> quantum_jump_trajectory(const CouplingMatrix& c, const CollectiveModes& m,
                                                          const ExcitationModel& x, std::uint64_t seed,
                                                          std::int64_t pulse_index) {
    validate(x);
    JumpSimulator sim(c, m);
    return sim.run_pulse(x, seed, pulse_index);
}

// Runs fn(begin, end, shard) over contiguous pulse shards; results are merged
// by shard order so output does not depend on the thread count.
template <class Result, class F>
std::vector<Result> run_sharded(std::int64_t n, unsigned threads, F&& fn) {
    threads = std::max(1u, threads);
    const auto shards = static_cast<std::int64_t>(std::min<std::int64_t>(threads, std::max<std::int64_t>(n, 1)));
    std::vector<Result> out(static_cast<std::size_t>(shards));
    auto work = [&](std::int64_t s) {
        const std::int64_t b = n * s / shards, e = n * (s + 1) / shards;
        out[static_cast<std::size_t>(s)] = fn(b, e);
    };
    if (shards == 1) {
        work(0);
        return out;
    }
    std::vector<std::thread> pool;
    for (std::int64_t s = 0; s < shards; ++s) pool.emplace_back(work, s);
    for (auto& t : pool) t.join();
    return out;
}

inline unsigned default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

// Full pulsed experiment, pre-detector. Absolute time = pulse_index * period + event time.
inline PhotonStream simulate_pulsed_experiment(const EmitterEnsemble& e, const CouplingMatrix& c,
                                               const CollectiveModes& m, const ExcitationModel& x,
                                               std::uint64_t seed, unsigned threads = default_threads(),
                                               std::string config_hash = {}) {
    validate(x);
    require(static_cast<Eigen::Index>(e.size()) == c.size(), "dimension_mismatch", "ensemble and coupling sizes differ");
    const JumpSimulator sim(c, m);
    PhotonStream s;
    s.header.period_ns = x.period_ns;
    s.header.n_pulses = x.n_pulses;
    s.header.seed = seed;
    s.header.stage = "pre";
    s.header.config_hash = std::move(config_hash);
    const std::int64_t period_ps = s.header.period_ps();
    auto shards = run_sharded<std::vector<PhotonRecord>>(x.n_pulses, threads, [&](std::int64_t b, std::int64_t e_) {
        std::vector<PhotonRecord> recs;
        for (std::int64_t p = b; p < e_; ++p) {
            for (const auto& ev : sim.run_pulse(x, seed, p)) {
                const auto d = static_cast<std::int64_t>(std::llround(ev.time_ns * 1000.0));
                if (d >= period_ps) continue;
                recs.push_back({p, kPreDetector, d});
            }
        }
        return recs;
    });
    for (auto& sh : shards) s.records.insert(s.records.end(), sh.begin(), sh.end());
    return s;
}

inline PhotonStream simulate_pulsed_experiment(const EmitterEnsemble& e, const CouplingMatrix& c,
                                               const ExcitationModel& x, std::uint64_t seed,
                                               unsigned threads = default_threads()) {
    return simulate_pulsed_experiment(e, c, collective_modes(c), x, seed, threads);
}

} // namespace qcount
