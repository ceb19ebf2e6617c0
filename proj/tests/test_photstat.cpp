#include "qcount/decay_fit.hpp"
#include "qcount/detection.hpp"
#include "qcount/jumps.hpp"
#include "qcount/photstat.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace qcount;

namespace {

constexpr double kTau0 = 48.95;
constexpr double kGamma0 = 1.0 / kTau0;

PhotonStream detected_uniform(int n, double kappa, std::int64_t pulses, std::uint64_t seed) {
    const auto c = coupling_uniform(n, kGamma0, kappa);
    std::vector<Eigen::Vector3d> pos;
    for (int i = 0; i < n; ++i) pos.emplace_back(20.0 * i, 0.0, 0.0);
    const auto e = make_ensemble(pos, std::vector<double>(static_cast<std::size_t>(n), kGamma0));
    const auto s = simulate_pulsed_experiment(e, c, collective_modes(c), {1000.0, 1.0, pulses}, seed, 1);
    return apply_detector_chain(s, {}, seed + 1000);
}

Eigen::VectorXd vec(std::initializer_list<double> v) {
    Eigen::VectorXd x(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double d : v) x(i++) = d;
    return x;
}

} // namespace

TEST(AnalyticG2, ModeFormulaExamples) {
    EXPECT_DOUBLE_EQ(g2_analytic_modes(vec({kGamma0}), kGamma0).value, 0.0);
    EXPECT_NEAR(g2_analytic_modes(Eigen::VectorXd::Constant(4, kGamma0), kGamma0).value, 0.75, 1e-15);
    EXPECT_NEAR(g2_analytic_modes(vec({1.5, 0.5}), 1.0).value, 0.625, 1e-15);
    EXPECT_THROW(g2_analytic_modes(Eigen::VectorXd(0), 1.0), Error);
}

TEST(AnalyticG2, ZeroVarianceGivesOneMinusOneOverN) {
    for (int n = 1; n <= 20; ++n)
        EXPECT_NEAR(g2_analytic_modes(Eigen::VectorXd::Constant(n, 0.37), 0.37).value, 1.0 - 1.0 / n, 1e-12) << n;
}

TEST(AnalyticG2, InhomogeneityTerm) {
    const auto g0 = vec({0.8, 1.2});
    EXPECT_NEAR(g2_full(g0, g0).value, 0.48, 1e-12);
    EXPECT_NEAR(0.48, 1.0 + 0.5 * (0.04 - 1.0) - 1.0 * 0.04, 1e-15);
    const auto c = g2_full(vec({1.0, 1.0}), vec({0.05, 1.95}));
    EXPECT_TRUE(c.clamped);
    EXPECT_EQ(c.value, 0.0);
    EXPECT_NEAR(c.raw_value, -0.4025, 1e-12);
}

TEST(AnalyticG2, FullReducesToModesForHomogeneousRates) {
    Rng rng = make_rng(41, 0);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 1 + trial % 8;
        const auto m = collective_modes(testkit::coupling_from_gamma(testkit::random_gamma(n, rng, kGamma0)));
        EXPECT_NEAR(g2_full(m.rates, Eigen::VectorXd::Constant(n, kGamma0)).value, g2_analytic_modes(m, kGamma0).value, 1e-12);
    }
}

TEST(AnalyticG2, DominantChannelExamples) {
    EXPECT_DOUBLE_EQ(g2_dominant_channel(1, kGamma0, kGamma0).value, 0.0);
    EXPECT_NEAR(g2_dominant_channel(2, 2.0 * kGamma0, kGamma0).value, 1.0, 1e-15);
    const double r = 48.95 / 24.72;
    EXPECT_NEAR(g2_dominant_channel(5, r * kGamma0, kGamma0).value, 1.0 + (4.0 * r * r / 25.0 - 1.0) / 5.0, 1e-15);
    EXPECT_NEAR(g2_dominant_channel(5, r * kGamma0, kGamma0).value, 0.9255, 5e-5);
}

TEST(AnalyticG2, DominantChannelVarianceIdentity) {
    for (int n = 2; n <= 50; ++n)
        for (double ratio : {0.5, 1.0, 1.7, 3.0, static_cast<double>(n)}) {
            Eigen::VectorXd rates = Eigen::VectorXd::Zero(n);
            rates(0) = ratio;
            EXPECT_NEAR(n * population_variance(rates), (n - 1.0) * ratio * ratio / n, 1e-12 * ratio * ratio);
            EXPECT_NEAR(g2_dominant_channel(n, ratio, 1.0).value, g2_analytic_modes(rates, 1.0).value, 1e-12);
        }
}

TEST(OracleG2, SmallExamples) {
    EXPECT_NEAR(g2_oracle_fully_excited(collective_modes(coupling_uniform(2, kGamma0, 0.0))).value, 0.5, 1e-12);
    EXPECT_NEAR(g2_oracle_fully_excited(collective_modes(coupling_uniform(2, kGamma0, 1.0))).value, 1.0, 1e-12);
    EXPECT_NEAR(g2_oracle_fully_excited(collective_modes(coupling_uniform(2, kGamma0, 0.5))).value, 0.625, 1e-12);
    EXPECT_NEAR(g2_oracle_fully_excited(collective_modes(coupling_uniform(1, kGamma0, 0.0))).value, 0.0, 1e-15);
    EXPECT_THROW(g2_oracle_fully_excited(collective_modes(coupling_uniform(6, kGamma0, 0.2))), Error);
}

TEST(OracleG2, MatchesModeFormulaOnRandomMatrices) {
    Rng rng = make_rng(1234, 0);
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 2 + trial % 4;
        const auto m = collective_modes(testkit::coupling_from_gamma(testkit::random_gamma(n, rng, kGamma0)));
        worst = std::max(worst, std::abs(g2_oracle_fully_excited(m).value - g2_analytic_modes(m, kGamma0).value));
    }
    EXPECT_LT(worst, 1e-9);
}

TEST(OracleG2, MatchesInhomogeneousFormulaOnRandomMatrices) {
    Rng rng = make_rng(4321, 0);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 2 + trial % 4;
        const auto g = testkit::random_gamma(n, rng, kGamma0, true);
        const auto m = collective_modes(testkit::coupling_from_gamma(g));
        const auto full = g2_full(m.rates, g.diagonal());
        if (full.clamped) continue;
        EXPECT_NEAR(g2_oracle_fully_excited(m).value, full.value, 1e-9);
    }
}

TEST(AreaRatio, SingleEmitterHasEmptyCenter) {
    const auto s = detected_uniform(1, 0.0, 20000, 1);
    const auto g = estimate_g2_area_ratio(build_coincidence_histogram(s, 1000, 3));
    EXPECT_EQ(g.value, 0.0);
    EXPECT_GT(g.std_error, 0.0);
    EXPECT_EQ(g.method, G2Method::area_ratio);
}

TEST(AreaRatio, PoissonLightIsOne) {
    PhotonStream pre;
    pre.header.period_ns = 1000.0;
    pre.header.n_pulses = 50000;
    DetectorConfig d;
    d.dark_rate_cps = 1e5;
    const auto g = estimate_g2_area_ratio(build_coincidence_histogram(apply_detector_chain(pre, d, 3), 1000, 3));
    EXPECT_NEAR(g.value, 1.0, 3.0 * g.std_error);
}

TEST(AreaRatio, RejectsEmptySidePeaks) {
    PhotonStream s;
    s.header.period_ns = 1000.0;
    s.header.stage = "detected";
    EXPECT_THROW(estimate_g2_area_ratio(build_coincidence_histogram(s, 1000, 3)), Error);
}

TEST(Instantaneous, SingleEmitterIsZero) {
    const auto s = detected_uniform(1, 0.0, 200000, 2);
    const auto g = estimate_g2_instantaneous(s, build_decay_histogram(s, 100));
    EXPECT_EQ(g.pairs, 0);
    EXPECT_NEAR(g.value, 0.0, 1e-12);
}

TEST(Instantaneous, TooFewPhotonsIsAnError) {
    const auto s = detected_uniform(2, 0.0, 30, 3);
    try {
        estimate_g2_instantaneous(s, build_decay_histogram(s, 100), {.window_ps = 2000.0});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "insufficient_pairs");
        EXPECT_NE(std::string(e.what()).find("found"), std::string::npos);
    }
}

TEST(Instantaneous, OverlapKernelIsAProbability) {
    for (double w : {10.0, 100.0, 250.0})
        for (long long o = -5; o <= 5; ++o) {
            const double p = detail::bin_pair_overlap(o, 100.0, w);
            EXPECT_GE(p, 0.0);
            EXPECT_LE(p, 1.0);
            EXPECT_NEAR(p, detail::bin_pair_overlap(-o, 100.0, w), 1e-15);
        }
    // Same bin, window covering the whole bin: certain.
    EXPECT_NEAR(detail::bin_pair_overlap(0, 100.0, 100.0), 1.0, 1e-15);
    // Same bin, half-width b/2: 1 - (1/2)^2 = 3/4.
    EXPECT_NEAR(detail::bin_pair_overlap(0, 100.0, 50.0), 0.75, 1e-15);
}

TEST(EstimatorOrdering, AreaRatioIgnoresCouplingInstantaneousDoesNot) {
    std::vector<double> inst;
    for (double kappa : {0.0, 0.5, 1.0}) {
        const auto s = detected_uniform(3, kappa, 200000, 20 + static_cast<std::uint64_t>(kappa * 10));
        const auto area = estimate_g2_area_ratio(build_coincidence_histogram(s, 1000, 3));
        EXPECT_NEAR(area.value, 2.0 / 3.0, 4.0 * area.std_error) << "kappa " << kappa;
        const auto h = build_decay_histogram(s, 100);
        inst.push_back(estimate_g2_instantaneous(s, h).value);
    }
    // Analytic values 0.667, 0.833, 1.333.
    EXPECT_LT(inst[0], inst[1]);
    EXPECT_LT(inst[1], inst[2]);
    EXPECT_NEAR(inst[0], 2.0 / 3.0, 0.1);
    EXPECT_NEAR(inst[2], 4.0 / 3.0, 0.15);
}

TEST(FitDecay, NoiselessMonoRecoversLifetime) {
    const auto h = testkit::poisson_decay_histogram({{1.0, 48.95}}, 1e9, 1000000, 100, 0, true);
    const auto f = fit_decay(h, DecayModel::mono);
    EXPECT_NEAR(f.gamma1, kGamma0, 1e-3 * kGamma0);
    EXPECT_EQ(f.model, DecayModel::mono);
    EXPECT_TRUE(f.converged);
}

TEST(FitDecay, PoissonBiexpRecoversBothRates) {
    const auto h = testkit::poisson_decay_histogram({{1000.0, 30.0}, {400.0, 5.0}}, 1e6, 500000, 100, 7);
    const auto f = fit_decay(h, DecayModel::biexp);
    ASSERT_EQ(f.model, DecayModel::biexp);
    EXPECT_LT(f.gamma1, f.gamma2);
    EXPECT_NEAR(f.tau1_ns(), 30.0, 0.05 * 30.0);
    EXPECT_NEAR(f.tau2_ns(), 5.0, 0.05 * 5.0);
    EXPECT_GT(f.gamma1_std_error(), 0.0);
    EXPECT_NEAR(f.goodness, 1.0, 0.2);
}

TEST(FitDecay, SelfConsistentOnOwnModel) {
    const auto h = testkit::poisson_decay_histogram({{1000.0, 30.0}, {400.0, 5.0}}, 1e6, 500000, 100, 8);
    const auto f = fit_decay(h, DecayModel::biexp);
    ASSERT_EQ(f.model, DecayModel::biexp);
    const auto again = fit_decay(histogram_from_model(f, 500000, 100), DecayModel::biexp);
    ASSERT_EQ(again.model, DecayModel::biexp);
    EXPECT_NEAR(again.gamma1, f.gamma1, f.gamma1_std_error());
    EXPECT_NEAR(again.gamma2, f.gamma2, f.gamma2_std_error());
    EXPECT_NEAR(again.a1, f.a1, std::sqrt(f.variance_of("a1")));
    EXPECT_NEAR(again.a2, f.a2, std::sqrt(f.variance_of("a2")));
}

TEST(FitDecay, SingleRateDataCollapsesToMono) {
    const auto h = testkit::poisson_decay_histogram({{1.0, 48.95}}, 1e7, 1000000, 100, 0, true);
    const auto f = fit_decay(h, DecayModel::biexp);
    EXPECT_TRUE(f.degenerate);
    EXPECT_EQ(f.model, DecayModel::mono);
    EXPECT_NEAR(f.tau1_ns(), 48.95, 0.01 * 48.95);
}

TEST(FitDecay, BackgroundIsFittedWhenPresent) {
    auto h = testkit::poisson_decay_histogram({{1.0, 20.0}}, 5e5, 1000000, 100, 9);
    std::mt19937_64 rng(3);
    std::poisson_distribution<int> bg(5.0);
    for (auto& c : h.counts) c += static_cast<std::uint64_t>(bg(rng));
    const auto f = fit_decay(h, DecayModel::mono);
    EXPECT_NEAR(f.background, 5.0, 0.2);
    EXPECT_NEAR(f.tau1_ns(), 20.0, 0.03 * 20.0);
}

TEST(FitDecay, RejectsEmptyAndSparseHistograms) {
    auto h = make_decay_histogram(1000000, 100);
    try {
        fit_decay(h, DecayModel::mono);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "insufficient_data");
    }
    for (int i = 0; i < 10; ++i) h.counts[static_cast<std::size_t>(i)] = 5;
    EXPECT_THROW(fit_decay(h, DecayModel::biexp), Error);
}

TEST(FitDecay, ModelNamesRoundTrip) {
    EXPECT_EQ(decay_model_from_string(to_string(DecayModel::biexp)), DecayModel::biexp);
    EXPECT_THROW(decay_model_from_string("triexp"), Error);
}

TEST(PeakIntensity, MonotoneDecayPeaksAtFirstBin) {
    const auto h = testkit::poisson_decay_histogram({{1.0, 48.95}}, 1e6, 500000, 100, 0, true);
    const auto p = peak_intensity(h);
    EXPECT_EQ(p.bin, 0u);
    EXPECT_NEAR(p.value, 0.5 * static_cast<double>(h.counts[0] + h.counts[1]), 1e-9);
}

TEST(PeakIntensity, DickeBurstPeaksLater) {
    const auto s = detected_uniform(6, 1.0, 20000, 4);
    const auto p = peak_intensity(build_decay_histogram(s, 1000));
    EXPECT_GT(p.time_ns, 1.0);
    EXPECT_GT(p.bin, 0u);
}

TEST(PeakIntensity, EmptyHistogramIsAnError) { EXPECT_THROW(peak_intensity(make_decay_histogram(1000, 100)), Error); }

TEST(PowerLaw, ExactExamples) {
    std::vector<std::pair<double, double>> sq, lin;
    for (int n = 1; n <= 6; ++n) {
        sq.emplace_back(n, 7.0 * n * n);
        lin.emplace_back(n, 3.0 * n);
    }
    const auto a = fit_power_law(sq);
    EXPECT_NEAR(a.exponent, 2.0, 1e-9);
    EXPECT_LT(a.std_error, 1e-9);
    EXPECT_NEAR(a.prefactor, 7.0, 1e-9);
    EXPECT_NEAR(fit_power_law(lin).exponent, 1.0, 1e-9);
}

TEST(PowerLaw, NoisySuperlinearData) {
    std::mt19937_64 rng(17);
    std::normal_distribution<double> noise(0.0, 0.1);
    std::vector<std::pair<double, double>> pts;
    for (int n = 1; n <= 10; ++n) pts.emplace_back(n, 100.0 * std::pow(n, 1.7) * std::exp(noise(rng)));
    const auto f = fit_power_law(pts);
    EXPECT_GT(f.exponent, 1.0);
    EXPECT_GT(f.std_error, 0.0);
}

TEST(PowerLaw, NeedsThreeDistinctN) {
    EXPECT_THROW(fit_power_law({{1, 1}, {2, 2}, {2, 2.1}}), Error);
    EXPECT_THROW(fit_power_law({{1, 1}, {2, 0}, {3, 3}}), Error);
}

TEST(G2Json, CarriesMethodAndValue) {
    const auto j = to_json(g2_dominant_channel(2, 2.0, 1.0));
    EXPECT_EQ(j.at("method"), "dominant_channel");
    EXPECT_DOUBLE_EQ(j.at("value").get<double>(), 1.0);
    EXPECT_EQ(j.at("std_error").get<double>(), 0.0);
}
