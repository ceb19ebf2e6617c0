// dynamics.hpp: N-emitter states, the collective emission rate and the
// density-matrix master-equation propagator (the small-N reference solver).
#pragma once

#include "qcount/ensemble.hpp"
#include "qcount/error.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <string>
#include <vector>

namespace qcount {

using cplx = std::complex<double>;

// Computational product basis: bit i of the basis index = emitter i excited.
struct QuantumState {
    enum class Kind { pure, density };

    Kind kind = Kind::pure;
    int n = 0;
    Eigen::VectorXcd psi;
    Eigen::MatrixXcd rho;

    Eigen::Index dim() const noexcept { return Eigen::Index{1} << n; }

    static QuantumState pure(int n, Eigen::VectorXcd psi) {
        QuantumState s;
        s.kind = Kind::pure;
        s.n = n;
        s.psi = std::move(psi);
        return s;
    }
    static QuantumState density(int n, Eigen::MatrixXcd rho) {
        QuantumState s;
        s.kind = Kind::density;
        s.n = n;
        s.rho = std::move(rho);
        return s;
    }
    static QuantumState product(int n, std::uint64_t excited_mask) {
        Eigen::VectorXcd v = Eigen::VectorXcd::Zero(Eigen::Index{1} << n);
        v(static_cast<Eigen::Index>(excited_mask)) = 1.0;
        return pure(n, std::move(v));
    }
    static QuantumState fully_excited(int n) { return product(n, (std::uint64_t{1} << n) - 1); }
    static QuantumState ground(int n) { return product(n, 0); }

    QuantumState to_density() const {
        if (kind == Kind::density) return *this;
        return density(n, psi * psi.adjoint());
    }
};

inline void validate(const QuantumState& s, double tol = 1e-9) {
    require(s.n >= 1 && s.n <= 20, "invalid_state", "emitter count out of range");
    if (s.kind == QuantumState::Kind::pure) {
        require(s.psi.size() == s.dim(), "invalid_state", "state vector dimension must be 2^N");
        require(std::abs(s.psi.norm() - 1.0) <= tol, "invalid_state", "pure state must have unit norm");
        return;
    }
    require(s.rho.rows() == s.dim() && s.rho.cols() == s.dim(), "invalid_state", "density matrix must be 2^N x 2^N");
    require((s.rho - s.rho.adjoint()).cwiseAbs().maxCoeff() <= tol, "invalid_state", "density matrix must be Hermitian");
    require(std::abs(s.rho.trace().real() - 1.0) <= tol, "invalid_state", "density matrix must have unit trace");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(s.rho, Eigen::EigenvaluesOnly);
    require(es.eigenvalues().minCoeff() >= -tol, "invalid_state", "density matrix must be positive semi-definite");
}

// C(m, n) = <sigma_m^dagger sigma_n>.
inline Eigen::MatrixXcd coherence_matrix(const QuantumState& s) {
    const int n = s.n;
    Eigen::MatrixXcd c = Eigen::MatrixXcd::Zero(n, n);
    const auto dim = static_cast<std::uint64_t>(s.dim());
    for (int a = 0; a < n; ++a) {
        const std::uint64_t ba = std::uint64_t{1} << a;
        for (int b = 0; b < n; ++b) {
            const std::uint64_t bb = std::uint64_t{1} << b;
            cplx acc = 0.0;
            for (std::uint64_t src = 0; src < dim; ++src) {
                if (!(src & bb)) continue;
                const std::uint64_t low = src & ~bb;
                if (a != b && (low & ba)) continue;
                const std::uint64_t dst = low | ba;
                // <psi| sigma_a^dag sigma_b |psi> or Tr(sigma_a^dag sigma_b rho)
                if (s.kind == QuantumState::Kind::pure)
                    acc += std::conj(s.psi(static_cast<Eigen::Index>(dst))) * s.psi(static_cast<Eigen::Index>(src));
                else
                    acc += s.rho(static_cast<Eigen::Index>(src), static_cast<Eigen::Index>(dst));
            }
            c(a, b) = acc;
        }
    }
    return c;
}

inline std::vector<double> excitation_populations(const QuantumState& s) {
    const auto c = coherence_matrix(s);
    std::vector<double> p(static_cast<std::size_t>(s.n));
    for (int i = 0; i < s.n; ++i) p[static_cast<std::size_t>(i)] = c(i, i).real();
    return p;
}

// R = sum_nu Gamma_nu <L_nu^dag L_nu>, with L_nu = sum_n u_n^(nu) sigma_n.
inline double emission_rate(const QuantumState& s, const CollectiveModes& m) {
    require(m.size() == s.n, "dimension_mismatch", "collective modes and state describe different N");
    const auto c = coherence_matrix(s);
    double r = 0.0;
    for (Eigen::Index nu = 0; nu < m.size(); ++nu) {
        const Eigen::VectorXd u = m.vectors.row(nu).transpose();
        r += m.rates(nu) * (u.transpose().cast<cplx>() * c * u.cast<cplx>())(0, 0).real();
    }
    if (r < 0.0) {
        require(r >= -1e-9 * std::max(1.0, m.rates.sum()), "negative_rate", "emission rate is significantly negative");
        r = 0.0;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Master equation (rotating frame at omega_0; H = sum_{i != j} J_ij s_i^+ s_j)

namespace detail {

using SpMat = Eigen::SparseMatrix<cplx>;

inline SpMat lowering_operator(int n, int site) {
    const Eigen::Index dim = Eigen::Index{1} << n;
    std::vector<Eigen::Triplet<cplx>> t;
    for (Eigen::Index src = 0; src < dim; ++src)
        if (src & (Eigen::Index{1} << site)) t.emplace_back(src & ~(Eigen::Index{1} << site), src, 1.0);
    SpMat s(dim, dim);
    s.setFromTriplets(t.begin(), t.end());
    return s;
}

struct Liouvillian {
    SpMat h_eff;                // H - (i/2) sum Gamma_nu L^dag L
    std::vector<SpMat> jumps;   // sqrt(Gamma_nu) L_nu
    std::vector<SpMat> jumps_adj;
    double rate_bound = 0.0;

    Eigen::MatrixXcd apply(const Eigen::MatrixXcd& rho) const {
        Eigen::MatrixXcd hr = h_eff * rho;
        Eigen::MatrixXcd out = cplx(0.0, -1.0) * (hr - hr.adjoint());
        for (std::size_t k = 0; k < jumps.size(); ++k) {
            Eigen::MatrixXcd lr = jumps[k] * rho;
            out.noalias() += lr * jumps_adj[k];
        }
        return out;
    }
};

inline Liouvillian build_liouvillian(const CouplingMatrix& c, const CollectiveModes& m) {
    const int n = static_cast<int>(c.size());
    const Eigen::Index dim = Eigen::Index{1} << n;
    std::vector<SpMat> sigma;
    for (int i = 0; i < n; ++i) sigma.push_back(lowering_operator(n, i));
    Liouvillian l;
    l.h_eff = SpMat(dim, dim);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i != j && c.j(i, j) != 0.0) l.h_eff += SpMat(c.j(i, j) * (SpMat(sigma[i].adjoint()) * sigma[j]));
    for (Eigen::Index nu = 0; nu < m.size(); ++nu) {
        SpMat lnu(dim, dim);
        for (int i = 0; i < n; ++i)
            if (m.vectors(nu, i) != 0.0) lnu += SpMat(m.vectors(nu, i) * sigma[i]);
        SpMat ladj = lnu.adjoint();
        l.h_eff += SpMat(cplx(0.0, -0.5 * m.rates(nu)) * (ladj * lnu));
        if (m.rates(nu) > 0.0) {
            const double s = std::sqrt(m.rates(nu));
            l.jumps.push_back(s * lnu);
            l.jumps_adj.push_back(s * ladj);
        }
    }
    l.rate_bound = n * m.rates.maxCoeff() + 2.0 * c.j.cwiseAbs().rowwise().sum().maxCoeff();
    l.h_eff.makeCompressed();
    return l;
}

inline Eigen::MatrixXcd rk4_step(const Liouvillian& l, const Eigen::MatrixXcd& rho, double h) {
    const Eigen::MatrixXcd k1 = l.apply(rho);
    const Eigen::MatrixXcd k2 = l.apply(rho + 0.5 * h * k1);
    const Eigen::MatrixXcd k3 = l.apply(rho + 0.5 * h * k2);
    const Eigen::MatrixXcd k4 = l.apply(rho + h * k3);
    return rho + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

inline std::vector<Eigen::MatrixXcd> integrate_grid(const Liouvillian& l, const Eigen::MatrixXcd& rho0,
                                                     const std::vector<double>& t_grid, double h_max) {
    std::vector<Eigen::MatrixXcd> out;
    out.reserve(t_grid.size());
    Eigen::MatrixXcd rho = rho0;
    double t = 0.0;
    for (double target : t_grid) {
        const double span = target - t;
        if (span > 0.0) {
            const auto steps = static_cast<long>(std::ceil(span / h_max - 1e-12));
            const double h = span / static_cast<double>(steps);
            for (long s = 0; s < steps; ++s) rho = rk4_step(l, rho, h);
            t = target;
        }
        out.push_back(rho);
    }
    return out;
}

inline double trace_norm(const Eigen::MatrixXcd& a) {
    Eigen::MatrixXcd herm = 0.5 * (a + a.adjoint());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(herm, Eigen::EigenvaluesOnly);
    return es.eigenvalues().cwiseAbs().sum();
}

} // namespace detail

struct LindbladOptions {
    int max_n = 6;
    double step_tolerance = 1e-8;  // trace-norm change when halving the step
    double initial_step_scale = 0.1;
    int max_refinements = 12;
};

// Density matrix at every grid time (grid ascending, starting at t >= 0; the
// initial state is taken at t = 0). Fourth-order Runge-Kutta with step halving
// until the trace-norm change between h and h/2 is below the tolerance.
inline std::vector<QuantumState> lindblad_propagate(const CouplingMatrix& c, const CollectiveModes& m,
                                                    const QuantumState& rho0, const std::vector<double>& t_grid,
                                                    const LindbladOptions& opt = {}) {
    validate(c);
    const int n = static_cast<int>(c.size());
    require(n <= opt.max_n, "scale_error",
            "master-equation propagation limited to N <= " + std::to_string(opt.max_n) + " (got " + std::to_string(n) + ")");
    require(m.size() == n && rho0.n == n, "dimension_mismatch", "coupling, modes and state must share N");
    validate(rho0);
    for (std::size_t i = 0; i < t_grid.size(); ++i) {
        require(t_grid[i] >= 0.0, "invalid_grid", "time grid must be non-negative");
        if (i) require(t_grid[i] >= t_grid[i - 1], "invalid_grid", "time grid must be ascending");
    }
    const auto l = detail::build_liouvillian(c, m);
    const Eigen::MatrixXcd r0 = rho0.to_density().rho;

    double h = opt.initial_step_scale / std::max(l.rate_bound, 1e-12);
    auto coarse = detail::integrate_grid(l, r0, t_grid, h);
    for (int refine = 0;; ++refine) {
        auto fine = detail::integrate_grid(l, r0, t_grid, 0.5 * h);
        double worst = 0.0;
        for (std::size_t i = 0; i < t_grid.size(); ++i) worst = std::max(worst, detail::trace_norm(fine[i] - coarse[i]));
        if (worst < opt.step_tolerance) {
            coarse = std::move(fine);
            break;
        }
        require(refine < opt.max_refinements, "step_control_failed", "master-equation step control did not converge");
        h *= 0.5;
        coarse = std::move(fine);
    }
    std::vector<QuantumState> out;
    out.reserve(coarse.size());
    for (auto& r : coarse) out.push_back(QuantumState::density(n, std::move(r)));
    return out;
}

} // namespace qcount
