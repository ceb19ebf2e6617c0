#include "qcount/decay_fit.hpp"
#include "qcount/detection.hpp"
#include "qcount/dynamics.hpp"
#include "qcount/jumps.hpp"
#include "qcount/photstat.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <bit>
#include <numbers>

using namespace qcount;

namespace {

constexpr double kTau0 = 48.95;
constexpr double kGamma0 = 1.0 / kTau0;

std::vector<double> linspace(double a, double b, int n) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = a + (b - a) * i / (n - 1);
    return v;
}

double total_excitation(const QuantumState& s) {
    double t = 0.0;
    for (double p : excitation_populations(s)) t += p;
    return t;
}

EmitterEnsemble dummy_ensemble(int n) {
    std::vector<Eigen::Vector3d> pos;
    for (int i = 0; i < n; ++i) pos.emplace_back(20.0 * i, 0.0, 0.0);
    return make_ensemble(pos, std::vector<double>(static_cast<std::size_t>(n), kGamma0));
}

CouplingMatrix free_space_cluster(int n, std::uint64_t seed) {
    EnsembleSpec s;
    s.n = n;
    s.radius_nm = 30.0;
    s.min_distance_nm = 15.7;
    s.seed = seed;
    s.dipole_rule = DipoleRule::random;
    return coupling_free_space(build_ensemble(s));
}

} // namespace

TEST(Lindblad, SingleEmitterDecaysExponentially) {
    const auto c = coupling_uniform(1, kGamma0, 0.0);
    const auto m = collective_modes(c);
    const auto grid = linspace(0.0, 300.0, 61);
    const auto states = lindblad_propagate(c, m, QuantumState::fully_excited(1), grid);
    for (std::size_t i = 0; i < grid.size(); ++i)
        EXPECT_NEAR(excitation_populations(states[i])[0], std::exp(-kGamma0 * grid[i]), 1e-6);
}

TEST(Lindblad, UncoupledPairDecaysIndependently) {
    const auto c = coupling_uniform(2, kGamma0, 0.0);
    const auto m = collective_modes(c);
    const auto grid = linspace(0.0, 200.0, 41);
    const auto states = lindblad_propagate(c, m, QuantumState::fully_excited(2), grid);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const auto p = excitation_populations(states[i]);
        EXPECT_NEAR(p[0], std::exp(-kGamma0 * grid[i]), 1e-6);
        EXPECT_NEAR(p[1], std::exp(-kGamma0 * grid[i]), 1e-6);
        EXPECT_NEAR(total_excitation(states[i]), 2.0 * std::exp(-kGamma0 * grid[i]), 1e-6);
    }
}

TEST(Lindblad, DickePairEmitsTwoPhotons) {
    const auto c = coupling_uniform(2, kGamma0, 1.0);
    const auto m = collective_modes(c);
    const std::vector<double> edges{0.0, 25.0 * kTau0 / 2.0};
    const auto photons = testkit::expected_bin_counts(c, m, QuantumState::fully_excited(2), edges, 600);
    EXPECT_NEAR(photons[0], 2.0, 1e-6);
}

TEST(Lindblad, StatesStayValid) {
    const auto c = free_space_cluster(3, 4);
    const auto m = collective_modes(c);
    const auto states = lindblad_propagate(c, m, QuantumState::fully_excited(3), linspace(0.0, 150.0, 16));
    for (const auto& s : states) {
        EXPECT_NO_THROW(validate(s));
        EXPECT_NEAR(s.rho.trace().real(), 1.0, 1e-9);
    }
}

TEST(Lindblad, RejectsMoreThanSixEmitters) {
    const auto c = coupling_uniform(7, kGamma0, 0.2);
    try {
        lindblad_propagate(c, collective_modes(c), QuantumState::fully_excited(7), {0.0, 1.0});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "scale_error");
    }
}

TEST(Lindblad, RejectsDimensionMismatch) {
    const auto c = coupling_uniform(2, kGamma0, 0.2);
    EXPECT_THROW(lindblad_propagate(c, collective_modes(c), QuantumState::fully_excited(3), {0.0}), Error);
}

TEST(EmissionRate, FullyExcitedEqualsTraceOfGamma) {
    Rng rng = make_rng(31, 0);
    for (int n = 1; n <= 5; ++n) {
        const auto g = testkit::random_gamma(n, rng, kGamma0, true);
        const auto m = collective_modes(testkit::coupling_from_gamma(g));
        EXPECT_NEAR(emission_rate(QuantumState::fully_excited(n), m), g.trace(), 1e-12);
    }
}

TEST(EmissionRate, GroundStateIsDark) {
    const auto m = collective_modes(coupling_uniform(3, kGamma0, 0.6));
    EXPECT_EQ(emission_rate(QuantumState::ground(3), m), 0.0);
}

TEST(EmissionRate, DickeSymmetricSingleExcitationIsSuperradiant) {
    const auto m = collective_modes(coupling_uniform(2, kGamma0, 1.0));
    Eigen::VectorXcd psi = Eigen::VectorXcd::Zero(4);
    psi(1) = psi(2) = 1.0 / std::sqrt(2.0);
    EXPECT_NEAR(emission_rate(QuantumState::pure(2, psi), m), 2.0 * kGamma0, 1e-15);
    psi(2) = -psi(2);
    EXPECT_NEAR(emission_rate(QuantumState::pure(2, psi), m), 0.0, 1e-15);
}

TEST(EmissionRate, PureAndDensityAgree) {
    const auto c = free_space_cluster(3, 9);
    const auto m = collective_modes(c);
    Rng rng = make_rng(2, 0);
    Eigen::VectorXcd psi(8);
    for (int i = 0; i < 8; ++i) psi(i) = cplx(uniform01(rng) - 0.5, uniform01(rng) - 0.5);
    psi.normalize();
    const auto pure = QuantumState::pure(3, psi);
    EXPECT_NEAR(emission_rate(pure, m), emission_rate(pure.to_density(), m), 1e-15);
}

TEST(Jumps, SingleEmitterEmitsOnePhotonPerPulse) {
    const auto c = coupling_uniform(1, kGamma0, 0.0);
    const auto m = collective_modes(c);
    const ExcitationModel x{1000.0, 1.0, 100000};
    const auto s = simulate_pulsed_experiment(dummy_ensemble(1), c, m, x, 5, 1);
    ASSERT_EQ(s.records.size(), 100000u);
    for (std::size_t i = 0; i < s.records.size(); ++i) EXPECT_EQ(s.records[i].pulse_index, static_cast<std::int64_t>(i));
    const auto fit = fit_decay(build_decay_histogram(s, 100), DecayModel::mono);
    EXPECT_NEAR(fit.gamma1, kGamma0, 3.0 * fit.gamma1_std_error());
}

TEST(Jumps, UncoupledTrioEmitsThreeExponentialPhotons) {
    const auto c = coupling_uniform(3, kGamma0, 0.0);
    const JumpSimulator sim(c, collective_modes(c));
    const ExcitationModel x{1000.0, 1.0, 0};
    double sum = 0.0;
    std::size_t count = 0;
    for (std::int64_t p = 0; p < 20000; ++p) {
        const auto ev = sim.run_pulse(x, 12, p);
        ASSERT_EQ(ev.size(), 3u);
        for (const auto& e : ev) {
            sum += e.time_ns;
            ++count;
        }
    }
    // Pooled event times of independent emitters are exponential with rate Gamma0.
    const double mean = sum / static_cast<double>(count);
    EXPECT_NEAR(mean, kTau0, 3.0 * kTau0 / std::sqrt(static_cast<double>(count)));
}

TEST(Jumps, DickePairMeanPhotonNumber) {
    const auto c = coupling_uniform(2, kGamma0, 1.0);
    const ExcitationModel x{1000.0, 1.0, 100000};
    const auto s = simulate_pulsed_experiment(dummy_ensemble(2), c, collective_modes(c), x, 3, 1);
    EXPECT_NEAR(static_cast<double>(s.records.size()) / 1e5, 2.0, 0.01);
    EXPECT_NEAR(g2_oracle_fully_excited(collective_modes(c)).value, 1.0, 1e-12);
}

TEST(Jumps, PhotonNumberConservedPerTrajectory) {
    for (int n = 2; n <= 5; ++n)
        for (double kappa : {0.0, 0.5, 1.0}) {
            const auto c = coupling_uniform(n, kGamma0, kappa);
            const JumpSimulator sim(c, collective_modes(c));
            for (std::int64_t p = 0; p < 500; ++p) ASSERT_EQ(sim.run_pulse({1000.0, 1.0, 0}, 77, p).size(), static_cast<std::size_t>(n));
        }
}

TEST(Jumps, PartialExcitationOfUncoupledEmitters) {
    const auto c = coupling_uniform(4, kGamma0, 0.0);
    const JumpSimulator sim(c, collective_modes(c));
    Rng rng = make_rng(4, 0);
    for (std::uint32_t mask = 0; mask < 16; ++mask)
        EXPECT_EQ(sim.run_from(mask, 1000.0, rng).size(), static_cast<std::size_t>(std::popcount(mask)));
}

TEST(Jumps, DarkStateTrapsExcitation) {
    // |eg> in the Dicke limit is half bright, half dark: at most one photon.
    const auto c = coupling_uniform(2, kGamma0, 1.0);
    const JumpSimulator sim(c, collective_modes(c));
    Rng rng = make_rng(6, 0);
    int emitted = 0;
    for (int i = 0; i < 4000; ++i) emitted += static_cast<int>(sim.run_from(0b01, 1000.0, rng).size());
    EXPECT_NEAR(emitted / 4000.0, 0.5, 4.0 * 0.5 / std::sqrt(4000.0));
}

TEST(Jumps, EventsAreOrderedAndInsidePeriod) {
    const auto c = free_space_cluster(5, 1);
    const JumpSimulator sim(c, collective_modes(c));
    for (std::int64_t p = 0; p < 200; ++p) {
        const auto ev = sim.run_pulse({300.0, 0.7, 0}, 8, p);
        for (std::size_t i = 0; i < ev.size(); ++i) {
            EXPECT_GE(ev[i].time_ns, 0.0);
            EXPECT_LT(ev[i].time_ns, 300.0);
            EXPECT_GE(ev[i].channel, 0);
            EXPECT_LT(ev[i].channel, 5);
            EXPECT_EQ(ev[i].pulse_index, p);
            if (i) { EXPECT_GE(ev[i].time_ns, ev[i - 1].time_ns); }
        }
    }
}

TEST(Jumps, RejectsMoreThanSixteenEmitters) {
    const auto c = coupling_uniform(17, kGamma0, 0.1);
    try {
        JumpSimulator sim(c, collective_modes(c));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "scale_error");
    }
}

TEST(Jumps, SparseAndSpectralPathsAgree) {
    const auto c = free_space_cluster(4, 3);
    ASSERT_TRUE(c.has_coherent_part());
    const auto m = collective_modes(c);
    const JumpSimulator spectral(c, m);
    JumpOptions taylor_opt;
    taylor_opt.dense_limit = 0;
    const JumpSimulator taylor(c, m, taylor_opt);
    int mismatched_channels = 0;
    for (std::int64_t p = 0; p < 200; ++p) {
        const auto a = spectral.run_pulse({1000.0, 1.0, 0}, 44, p);
        const auto b = taylor.run_pulse({1000.0, 1.0, 0}, 44, p);
        ASSERT_EQ(a.size(), b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (a[i].channel != b[i].channel) {
                ++mismatched_channels;
                break;
            }
            // Near-dark tails decay slowly, so a tiny norm error moves late jumps further.
            EXPECT_NEAR(a[i].time_ns, b[i].time_ns, std::max(1e-2, 5e-5 * a[i].time_ns));
        }
    }
    EXPECT_LE(mismatched_channels, 2);
}

TEST(Jumps, IllConditionedFallbackMatchesSpectral) {
    const auto c = free_space_cluster(3, 5);
    const auto m = collective_modes(c);
    JumpOptions strict;
    strict.max_condition = 0.0;  // forces the sparse path for every subspace
    const JumpSimulator a(c, m), b(c, m, strict);
    for (std::int64_t p = 0; p < 100; ++p) {
        const auto ea = a.run_pulse({1000.0, 1.0, 0}, 2, p), eb = b.run_pulse({1000.0, 1.0, 0}, 2, p);
        ASSERT_EQ(ea.size(), eb.size());
        if (ea[0].channel == eb[0].channel) { EXPECT_NEAR(ea[0].time_ns, eb[0].time_ns, 1e-3); }
    }
}

TEST(Jumps, CoherentCouplingMatchesMasterEquation) {
    const auto c = free_space_cluster(3, 7);
    ASSERT_TRUE(c.has_coherent_part());
    const auto m = collective_modes(c);
    const JumpSimulator sim(c, m);
    std::vector<double> edges;
    for (int b = 0; b <= 16; ++b) edges.push_back(10.0 * b);
    const auto expected = testkit::expected_bin_counts(c, m, QuantumState::fully_excited(3), edges);
    std::vector<Eigen::VectorXd> samples;
    for (std::int64_t p = 0; p < 20000; ++p) {
        Eigen::VectorXd v = Eigen::VectorXd::Zero(16);
        for (const auto& e : sim.run_pulse({1000.0, 1.0, 0}, 91, p))
            if (e.time_ns < 160.0) v(static_cast<Eigen::Index>(e.time_ns / 10.0)) += 1.0;
        samples.push_back(std::move(v));
    }
    const double pv = testkit::hotelling_p_value(samples, Eigen::Map<const Eigen::VectorXd>(expected.data(), 16));
    EXPECT_GT(pv, 0.001);
}

TEST(Experiment, ZeroPulsesGiveEmptyStream) {
    const auto c = coupling_uniform(2, kGamma0, 0.5);
    const auto s = simulate_pulsed_experiment(dummy_ensemble(2), c, {1000.0, 1.0, 0}, 1);
    EXPECT_TRUE(s.records.empty());
    EXPECT_TRUE(s.is_pre_detector());
}

TEST(Experiment, SingleEmitterStreamLength) {
    const auto c = coupling_uniform(1, kGamma0, 0.0);
    const auto s = simulate_pulsed_experiment(dummy_ensemble(1), c, {1000.0, 1.0, 10000}, 1);
    EXPECT_EQ(s.records.size(), 10000u);
    for (const auto& r : s.records) EXPECT_EQ(r.detector, kPreDetector);
}

TEST(Experiment, PartialCouplingRateIsBracketed) {
    const auto c = coupling_uniform(5, kGamma0, 0.3);
    const auto s = simulate_pulsed_experiment(dummy_ensemble(5), c, {1000.0, 1.0, 100000}, 17);
    EXPECT_EQ(s.records.size(), 500000u);
    const auto fit = fit_decay(build_decay_histogram(s, 100), DecayModel::biexp);
    const double dominant = fit.model == DecayModel::biexp && fit.a2 > fit.a1 ? fit.gamma2 : fit.gamma1;
    EXPECT_GT(dominant, kGamma0);
    EXPECT_LT(dominant, 5.0 * kGamma0);
}

TEST(Experiment, DeterministicAcrossThreadCounts) {
    const auto c = free_space_cluster(4, 12);
    const auto m = collective_modes(c);
    EnsembleSpec spec;
    spec.n = 4;
    spec.seed = 12;
    const auto e = build_ensemble(spec);
    const ExcitationModel x{500.0, 0.8, 3000};
    const auto a = simulate_pulsed_experiment(e, c, m, x, 123, 1);
    const auto b = simulate_pulsed_experiment(e, c, m, x, 123, 3);
    const auto d = simulate_pulsed_experiment(e, c, m, x, 124, 1);
    EXPECT_EQ(a, b);
    EXPECT_NE(a.records, d.records);
    for (std::size_t i = 1; i < a.records.size(); ++i) EXPECT_LE(a.absolute_ps(a.records[i - 1]), a.absolute_ps(a.records[i]));
}

TEST(Experiment, DickeBurstPeaksAfterExcitation) {
    const auto grid = linspace(0.0, 60.0, 121);
    auto argmax = [&](double kappa) {
        const auto c = coupling_uniform(4, kGamma0, kappa);
        const auto m = collective_modes(c);
        const auto states = lindblad_propagate(c, m, QuantumState::fully_excited(4), grid);
        std::size_t best = 0;
        double top = -1.0;
        for (std::size_t i = 0; i < states.size(); ++i) {
            const double r = emission_rate(states[i], m);
            if (r > top) {
                top = r;
                best = i;
            }
        }
        return grid[best];
    };
    EXPECT_GT(argmax(1.0), 0.0);
    EXPECT_EQ(argmax(0.0), 0.0);

    const auto c = coupling_uniform(4, kGamma0, 1.0);
    const auto s = simulate_pulsed_experiment(dummy_ensemble(4), c, {1000.0, 1.0, 20000}, 8, 1);
    EXPECT_GT(peak_intensity(build_decay_histogram(s, 1000)).time_ns, 1.0);
}
