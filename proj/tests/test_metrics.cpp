#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <algorithm>
#include <cmath>

#include "arflow/metrics.hpp"

using namespace arflow;

TEST_CASE("gaussian W2 closed forms") {
    Eigen::VectorXd m = Eigen::VectorXd::Zero(2);
    Eigen::MatrixXd c = Eigen::MatrixXd::Identity(2, 2);
    CHECK(gaussian_w2(m, c, m, c) == doctest::Approx(0.0).epsilon(1e-12));

    // pure variance deficit in 1-D: point mass vs unit variance -> W2 = 1
    Eigen::VectorXd m1(1), m2(1);
    m1 << 0.0;
    m2 << 0.0;
    Eigen::MatrixXd z = Eigen::MatrixXd::Zero(1, 1), one = Eigen::MatrixXd::Identity(1, 1);
    CHECK(gaussian_w2(m1, z, m2, one) == doctest::Approx(1.0));

    // matched covariance: a mean shift delta adds exactly |delta|
    Eigen::VectorXd shifted(2);
    shifted << 0.3, -0.4;
    CHECK(gaussian_w2(shifted, c, m, c) == doctest::Approx(0.5));
}

TEST_CASE("mixture quantile inverts the mixture cdf") {
    double mp = 1.0, mm = -1.0, sd = 0.15;
    CHECK(std::abs(mixture_quantile(0.5, mp, mm, sd)) < 1e-8);
    CHECK(mixture_quantile(0.25, mp, mm, sd) == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(mixture_quantile(0.75, mp, mm, sd) == doctest::Approx(1.0).epsilon(1e-6));
    double q = mixture_quantile(0.9, mp, mm, sd);
    double cdf = 0.5 * (0.5 * std::erfc(-(q - mp) / (sd * std::sqrt(2.0))) +
                        0.5 * std::erfc(-(q - mm) / (sd * std::sqrt(2.0))));
    CHECK(cdf == doctest::Approx(0.9).epsilon(1e-8));
    CHECK_THROWS_AS((void)mixture_quantile(0.0, mp, mm, sd), TensorError);
}

TEST_CASE("conditional W2 is small on exact oracle samples (gaussian)") {
    WorldSpec world = WorldSpec::gaussian_ar_default();
    AnalyticOracle oracle(world);
    std::vector<double> prefix{0.7, -0.2};  // one previous frame
    Rng rng(5);
    std::vector<std::vector<double>> samples(10000);
    for (auto& s : samples) s = oracle.sample_unit(prefix, rng);
    double w = conditional_w2(samples, oracle, prefix);
    CHECK(w < 0.02);

    // order invariance
    std::reverse(samples.begin(), samples.end());
    CHECK(conditional_w2(samples, oracle, prefix) == doctest::Approx(w).epsilon(1e-12));

    // shifting every sample by delta adds ~|delta| at matched covariance
    for (auto& s : samples) {
        s[0] += 0.3;
        s[1] += 0.4;
    }
    CHECK(conditional_w2(samples, oracle, prefix) == doctest::Approx(0.5).epsilon(0.05));

    samples.resize(50);
    CHECK_THROWS_AS((void)conditional_w2(samples, oracle, prefix), TensorError);
}

TEST_CASE("conditional W2 is small on exact oracle samples (mixture)") {
    WorldSpec world = WorldSpec::branching_gmm_default();
    AnalyticOracle oracle(world);
    std::vector<double> prefix{0.4, 0.1};
    Rng rng(6);
    std::vector<std::vector<double>> samples(10000);
    for (auto& s : samples) s = oracle.sample_unit(prefix, rng);
    // quantile W2 on a well-separated mixture has an O(n^-1/4) floor from
    // empirical mode-mass imbalance; 0.2 separates it cleanly from collapse
    CHECK(conditional_w2(samples, oracle, prefix) < 0.2);

    // collapse onto one mode: W2 jumps to the order of the mode gap
    auto [mp, mm] = oracle.mixture_modes(prefix);
    for (auto& s : samples) s[0] = mp;
    CHECK(conditional_w2(samples, oracle, prefix) > 0.5 * world.mu);
}

TEST_CASE("mode coverage fractions") {
    auto mc = mode_coverage(std::vector<double>{1.0, 1.1, -0.9, -1.0}, 1.0, -1.0);
    CHECK(mc.p_plus == doctest::Approx(0.5));
    CHECK(mc.p_minus == doctest::Approx(0.5));
    CHECK(mc.coverage == doctest::Approx(1.0));
    CHECK(mc.p_plus + mc.p_minus == doctest::Approx(1.0));

    auto one_sided = mode_coverage(std::vector<double>(50, 1.0), 1.0, -1.0);
    CHECK(one_sided.p_plus == doctest::Approx(1.0));
    CHECK(one_sided.p_minus == doctest::Approx(0.0));
    CHECK(one_sided.coverage == doctest::Approx(0.0));

    WorldSpec gauss = WorldSpec::gaussian_ar_default();
    AnalyticOracle oracle(gauss);
    std::vector<std::vector<double>> samples(100, std::vector<double>{0.0, 0.0});
    CHECK_THROWS_AS((void)mode_coverage(samples, oracle, {}), TensorError);

    WorldSpec mix = WorldSpec::branching_gmm_default();
    AnalyticOracle moracle(mix);
    Rng rng(3);
    std::vector<std::vector<double>> draws(4000);
    for (auto& s : draws) s = moracle.sample_unit({}, rng);
    auto balanced = mode_coverage(draws, moracle, {});
    CHECK(balanced.coverage == doctest::Approx(1.0).epsilon(0.08));  // ~3 SE at n=4000
}

TEST_CASE("exposure bias of exact world samples is statistically flat") {
    for (auto kind : {WorldKind::gaussian_ar, WorldKind::branching_gmm}) {
        WorldSpec world = kind == WorldKind::gaussian_ar ? WorldSpec::gaussian_ar_default()
                                                         : WorldSpec::branching_gmm_default();
        AnalyticOracle oracle(world);
        auto batch = sample_sequences(world, 400, 11);
        auto rep = exposure_bias_curve(batch, oracle, 80, 2);
        const auto& s = rep.series.at("w2_conditional");
        REQUIRE(static_cast<int>(s.value.size()) == world.num_frames);
        for (int i = 0; i < world.num_frames; ++i) {
            CHECK(std::isfinite(s.value[i]));
            CHECK(s.se[i] > 0.0);
        }
        double z = rep.scalars.at("slope") / rep.scalars.at("slope_se");
        CHECK(std::abs(z) < 3.0);
    }
}

TEST_CASE("exposure bias rejects tiny rollout counts") {
    WorldSpec world = WorldSpec::gaussian_ar_default();
    AnalyticOracle oracle(world);
    auto batch = sample_sequences(world, 50, 1);
    CHECK_THROWS_AS((void)exposure_bias_curve(batch, oracle), TensorError);
}

TEST_CASE("solver order: euler first order, heun second order, degenerate guard") {
    WorldSpec world = WorldSpec::gaussian_ar_default();
    AnalyticOracle oracle(world);
    std::vector<double> prefix{0.5, -0.3};
    auto euler = solver_order_check(oracle, prefix, OdeMethod::euler, 3);
    CHECK(euler.p_hat > 0.8);
    CHECK(euler.p_hat < 1.2);
    auto heun = solver_order_check(oracle, prefix, OdeMethod::heun, 3);
    CHECK(heun.p_hat > 1.7);
    CHECK(heun.p_hat < 2.3);
    // errors shrink monotonically with K
    for (size_t i = 0; i + 1 < euler.errors.size(); ++i) {
        CHECK(euler.errors[i] > euler.errors[i + 1]);
    }

    CHECK(order_estimate({0.5, 0.5, 0.5}) == doctest::Approx(0.0));  // constant error
    CHECK(order_estimate({0.0, 0.0}) == doctest::Approx(0.0));       // exact solver
}

TEST_CASE("efficiency rollup: accounting and budget matching") {
    StageReport pairs;
    pairs.stage = "generate_ode_pairs";
    pairs.steps = 320000;  // fresh pairs: one trajectory per supervision event
    pairs.teacher_evals = 320000LL * 48;
    pairs.aux_bytes = 320000LL * 48 * 108;
    StageReport ode;
    ode.stage = "stage2_causal_ode";
    ode.steps = 5000;
    StageReport cd;
    cd.stage = "stage2_causal_cd";
    cd.steps = 5000;
    cd.teacher_evals = 5000LL * 64;
    cd.aux_bytes = 0;

    auto s = efficiency_rollup({pairs, ode}, {cd});
    CHECK(s.cd_aux_bytes == 0);
    CHECK(s.ode_aux_bytes > 0);
    CHECK(s.eval_ratio >= 4.0);

    auto self = efficiency_rollup({cd}, {cd});
    CHECK(self.eval_ratio == doctest::Approx(1.0));

    StageReport other = cd;
    other.steps = 4000;
    CHECK_THROWS_AS((void)efficiency_rollup({pairs, ode}, {other}), TensorError);
}

TEST_CASE("wilcoxon one-sided signed-rank: exact small cases") {
    // five positive distinct differences: W+ = 15, p = 1/32
    std::vector<double> x{1.0, 2.0, 3.0, 4.0, 5.0}, y{0.5, 1.0, 2.0, 3.0, 4.0};
    CHECK(wilcoxon_one_sided(x, y) == doctest::Approx(1.0 / 32.0));
    // opposite direction: p = 1
    CHECK(wilcoxon_one_sided(y, x) == doctest::Approx(1.0));
    // all ties dropped
    CHECK(wilcoxon_one_sided(x, x) == doctest::Approx(1.0));

    // clearly separated ten-seed comparison is significant
    std::vector<double> a, b;
    Rng rng(9);
    for (int i = 0; i < 10; ++i) {
        double base = rng.uniform(0.0, 1.0);
        b.push_back(base);
        a.push_back(base + 0.5 + 0.01 * i);
    }
    CHECK(wilcoxon_one_sided(a, b) < 0.05);
    CHECK_THROWS_AS((void)wilcoxon_one_sided({1.0}, {0.0, 1.0}), ShapeError);
}

TEST_CASE("entropy estimator recovers gaussian differential entropy") {
    Rng rng(4);
    auto draw = [&](double sd, size_t n) {
        std::vector<double> v(n);
        for (auto& x : v) x = sd * rng.normal();
        return v;
    };
    double h1 = sample_entropy_1d(draw(1.0, 20000));
    double h2 = sample_entropy_1d(draw(2.0, 20000));
    double exact1 = 0.5 * std::log(2.0 * M_PI * M_E);
    CHECK(h1 == doctest::Approx(exact1).epsilon(0.05));
    CHECK(h2 - h1 == doctest::Approx(std::log(2.0)).epsilon(0.1));
    CHECK_THROWS_AS((void)sample_entropy_1d({1.0, 2.0}), TensorError);
}

TEST_CASE("least-squares slope and metric report serialization") {
    CHECK(ls_slope({1.0, 3.0, 5.0, 7.0}) == doctest::Approx(2.0));

    MetricReport rep;
    rep.samples = 100;
    rep.series["w2_conditional"] = {{0.1, 0.2}, {0.01, 0.02}};
    rep.scalars["slope"] = 0.1;
    auto csv = rep.to_csv();
    CHECK(csv.find("frame,metric,value,se\n") == 0);
    CHECK(csv.find("0,w2_conditional,0.1") != std::string::npos);
    CHECK(csv.find("-1,slope,0.1") != std::string::npos);

    auto j = nlohmann::json::parse(rep.to_json());
    CHECK(j["samples"] == 100);
    CHECK(j["series"]["w2_conditional"]["value"][1] == 0.2);
    CHECK(j["scalars"]["slope"] == 0.1);
}
