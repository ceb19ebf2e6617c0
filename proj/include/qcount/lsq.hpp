// lsq.hpp: small dense Levenberg-Marquardt and linear least-squares helpers.
#pragma once

#include "qcount/error.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>

namespace qcount::lsq {

struct Result {
    Eigen::VectorXd params;
    Eigen::MatrixXd covariance;  // (J^T J)^-1 of the weighted residuals
    double chi2 = 0.0;
    int dof = 0;
    int iterations = 0;
    bool converged = false;

    double reduced_chi2() const { return dof > 0 ? chi2 / dof : std::numeric_limits<double>::quiet_NaN(); }
};

// residuals(p, r, J): fills weighted residuals r (size m) and, if J is non-null, dr/dp (m x n).
using ResidualFn = std::function<void(const Eigen::VectorXd&, Eigen::VectorXd&, Eigen::MatrixXd*)>;
// Optional projection onto the feasible set after every trial step.
using ProjectFn = std::function<void(Eigen::VectorXd&)>;

struct Options {
    int max_iterations = 200;
    double rel_tolerance = 1e-10;
    double initial_lambda = 1e-3;
};

inline Result levenberg_marquardt(const ResidualFn& f, Eigen::VectorXd p, const ProjectFn& project = {},
                                  const Options& opt = {}) {
    Eigen::VectorXd r;
    Eigen::MatrixXd jac;
    if (project) project(p);
    f(p, r, &jac);
    double cost = r.squaredNorm();
    double lambda = opt.initial_lambda;
    int stalled = 0;
    Result res;
    for (int it = 0; it < opt.max_iterations; ++it) {
        res.iterations = it + 1;
        const Eigen::MatrixXd jtj = jac.transpose() * jac;
        const Eigen::VectorXd g = jac.transpose() * r;
        bool improved = false;
        for (int inner = 0; inner < 30 && !improved; ++inner) {
            Eigen::MatrixXd a = jtj;
            a.diagonal() += lambda * jtj.diagonal().cwiseMax(1e-12);
            Eigen::VectorXd step = a.ldlt().solve(-g);
            if (!step.allFinite()) {
                lambda *= 10.0;
                continue;
            }
            Eigen::VectorXd trial = p + step;
            if (project) project(trial);
            Eigen::VectorXd rt;
            f(trial, rt, nullptr);
            const double ct = rt.squaredNorm();
            if (std::isfinite(ct) && ct <= cost) {
                const double rel = (cost - ct) / std::max(cost, 1e-300);
                const double prel = (trial - p).norm() / std::max(p.norm(), 1e-300);
                p = trial;
                f(p, r, &jac);
                cost = ct;
                lambda = std::max(lambda * 0.3, 1e-12);
                improved = true;
                // Either both cost and parameters settled, or the cost has
                // stopped moving for several steps (flat directions, e.g. the
                // rate of a component whose amplitude sits on its bound).
                stalled = rel < opt.rel_tolerance ? stalled + 1 : 0;
                if ((rel < opt.rel_tolerance && prel < std::sqrt(opt.rel_tolerance)) || stalled >= 5) {
                    res.converged = true;
                }
            } else {
                lambda *= 10.0;
            }
        }
        if (!improved) {
            // No descent direction left: at a (possibly constrained) minimum.
            res.converged = true;
        }
        if (res.converged) break;
    }
    res.params = p;
    res.chi2 = cost;
    res.dof = static_cast<int>(r.size() - p.size());
    const Eigen::MatrixXd jtj = jac.transpose() * jac;
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(jtj);
    res.covariance = cod.pseudoInverse();
    return res;
}

// Weighted linear least squares y ~ X beta with weights w (1/sigma^2).
struct LinearFit {
    Eigen::VectorXd beta;
    Eigen::MatrixXd covariance;  // (X^T W X)^-1
    double chi2 = 0.0;
    int dof = 0;
};

inline LinearFit weighted_linear(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& w) {
    require(x.rows() == y.size() && y.size() == w.size(), "dimension_mismatch", "design matrix and data differ in size");
    require(x.rows() >= x.cols(), "underdetermined", "not enough points for the linear fit");
    const Eigen::VectorXd sw = w.cwiseSqrt();
    const Eigen::MatrixXd xw = sw.asDiagonal() * x;
    const Eigen::VectorXd yw = sw.cwiseProduct(y);
    LinearFit f;
    f.beta = xw.colPivHouseholderQr().solve(yw);
    f.covariance = (xw.transpose() * xw).inverse();
    f.chi2 = (xw * f.beta - yw).squaredNorm();
    f.dof = static_cast<int>(x.rows() - x.cols());
    return f;
}

} // namespace qcount::lsq
