#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "arflow/models.hpp"

using namespace arflow;

namespace {

NetConfig small_cfg(NetMode mode = NetMode::causal) {
    NetConfig cfg;
    cfg.unit_dim = 2;
    cfg.context_units = 4;
    cfg.num_units = 8;
    cfg.mode = mode;
    cfg.hidden = 16;
    cfg.layers = 2;
    return cfg;
}

// the head is zero-initialized, so fill every parameter with noise to get a
// non-trivial field
void randomize(VelocityNet& net, uint64_t seed) {
    Rng rng(seed);
    for (const auto& name : net.params().names()) {
        for (auto& v : net.params().at(name).mutable_values()) v = 0.3 * rng.normal();
    }
}

}  // namespace

TEST_CASE("context cache pads on the left and keeps the newest units") {
    ContextCache cache(3, 2);
    CHECK(cache.encode(3) == std::vector<double>(6, 0.0));
    cache.push({1.0, 2.0});
    CHECK(cache.encode(3) == std::vector<double>{0, 0, 0, 0, 1, 2});
    cache.push({3.0, 4.0});
    cache.push({5.0, 6.0});
    cache.push({7.0, 8.0});  // evicts {1,2}
    CHECK(cache.size() == 3);
    CHECK(cache.next_unit() == 4);
    CHECK(cache.encode(3) == std::vector<double>{3, 4, 5, 6, 7, 8});
    CHECK(cache.encode(2) == std::vector<double>{5, 6, 7, 8});
    cache.reset();
    CHECK(cache.size() == 0);
    CHECK(cache.next_unit() == 0);
}

TEST_CASE("fresh net predicts zero velocity and one-step sampling returns the noise") {
    VelocityNet net(small_cfg(), 7);
    std::vector<double> x{0.4, -1.1}, ctx(8, 0.5);
    auto v = net.eval_raw(x, ctx, 0.7, 3);
    CHECK(v == std::vector<double>{0.0, 0.0});

    ContextCache cache(4, 2);
    cache.push({1.0, 1.0});
    Rng rng(5);
    auto out = few_step_sample_unit(net, cache, StepSchedule::one_step(), x, 1, rng);
    CHECK(out == x);  // G(x, 1) = x - 1 * 0
}

TEST_CASE("forward agrees with eval_raw row by row") {
    NetConfig cfg = small_cfg();
    VelocityNet net(cfg, 11);
    randomize(net, 99);
    Rng rng(3);
    size_t b = 5;
    std::vector<double> xs, ctxs, ts;
    std::vector<int> units;
    for (size_t r = 0; r < b; ++r) {
        for (int j = 0; j < cfg.unit_dim; ++j) xs.push_back(rng.normal());
        for (int j = 0; j < cfg.context_dim(); ++j) ctxs.push_back(rng.normal());
        ts.push_back(rng.uniform(0.05, 1.0));
        units.push_back(static_cast<int>(r) % cfg.num_units);
    }
    Tensor out = net.forward(Tensor::from(b, cfg.unit_dim, xs),
                             Tensor::from(b, cfg.context_dim(), ctxs), ts, units);
    for (size_t r = 0; r < b; ++r) {
        std::vector<double> x(xs.begin() + r * cfg.unit_dim, xs.begin() + (r + 1) * cfg.unit_dim);
        std::vector<double> c(ctxs.begin() + r * cfg.context_dim(),
                              ctxs.begin() + (r + 1) * cfg.context_dim());
        auto v = net.eval_raw(x, c, ts[r], units[r]);
        for (int j = 0; j < cfg.unit_dim; ++j) {
            CHECK(out.at(r, j) == doctest::Approx(v[j]).epsilon(1e-12));
        }
    }
}

TEST_CASE("eval counter: one per row for forward, one per call for eval_raw") {
    NetConfig cfg = small_cfg();
    VelocityNet net(cfg, 1);
    CHECK(net.evals() == 0);
    net.forward(Tensor::zeros(3, cfg.unit_dim), Tensor::zeros(3, cfg.context_dim()),
                {0.5, 0.5, 0.5}, {0, 1, 2});
    CHECK(net.evals() == 3);
    net.eval_raw(std::vector<double>(cfg.unit_dim, 0.0),
                 std::vector<double>(cfg.context_dim(), 0.0), 0.5, 0);
    CHECK(net.evals() == 4);
    net.reset_evals();
    CHECK(net.evals() == 0);
}

TEST_CASE("causal window: units beyond k are invisible, units inside are not") {
    NetConfig cfg = small_cfg();
    VelocityNet net(cfg, 21);
    randomize(net, 50);
    Rng rng(8);
    std::vector<double> prefix = rng.normal_vec(6 * cfg.unit_dim);  // 6 units of history
    std::vector<double> x{0.2, -0.4};
    auto base = net.predict_from_prefix(prefix, x, 0.6, 6);

    // stale unit (older than the 4-unit window) changes nothing
    auto stale = prefix;
    stale[0] += 100.0;
    stale[3] -= 50.0;
    CHECK(net.predict_from_prefix(stale, x, 0.6, 6) == base);

    // most recent unit changes the prediction
    auto fresh = prefix;
    fresh[fresh.size() - 1] += 1.0;
    auto moved = net.predict_from_prefix(fresh, x, 0.6, 6);
    CHECK(moved != base);
}

TEST_CASE("context_from_prefix zero-pads short prefixes") {
    NetConfig cfg = small_cfg();
    VelocityNet net(cfg, 2);
    auto ctx = net.context_from_prefix({1.0, 2.0});
    CHECK(ctx == std::vector<double>{0, 0, 0, 0, 0, 0, 1, 2});
    CHECK(net.context_from_prefix({}) == std::vector<double>(8, 0.0));
    CHECK_THROWS_AS((void)net.context_from_prefix({1.0}), ShapeError);
}

TEST_CASE("bidirectional context zeroes the unit's own slot") {
    std::vector<double> seq{1, 2, 3, 4, 5, 6};
    auto ctx = VelocityNet::bidir_context(seq, 1, 2);
    CHECK(ctx == std::vector<double>{1, 2, 0, 0, 5, 6});
}

TEST_CASE("teacher-forced sampling matches a manually built cache") {
    WorldSpec world = WorldSpec::gaussian_ar_default();
    NetConfig cfg = small_cfg();
    VelocityNet net(cfg, 33);
    randomize(net, 60);
    auto gt = sample_sequences(world, 2, 17);

    Rng noise_rng(4);
    auto noise = noise_rng.normal_vec(cfg.unit_dim);
    Rng r1(9), r2(9);
    auto a = teacher_forced_sample(net, gt, 1, StepSchedule::two_step(), 5, noise, r1);

    ContextCache cache(cfg.context_units, cfg.unit_dim);
    for (int u = 0; u < 5; ++u) cache.push(gt.unit_vec(1, u, 1));
    auto b = few_step_sample_unit(net, cache, StepSchedule::two_step(), noise, 5, r2);
    CHECK(a == b);
}

TEST_CASE("few-step sampling consumes fresh noise between iterations") {
    NetConfig cfg = small_cfg();
    VelocityNet net(cfg, 33);
    randomize(net, 61);
    ContextCache cache(cfg.context_units, cfg.unit_dim);
    Rng n(2);
    auto noise = n.normal_vec(cfg.unit_dim);
    Rng r1(1), r2(2);
    auto a = few_step_sample_unit(net, cache, StepSchedule::four_step(), noise, 0, r1);
    auto b = few_step_sample_unit(net, cache, StepSchedule::four_step(), noise, 0, r2);
    CHECK(a != b);  // different re-noising streams diverge
    Rng r3(1);
    auto c = few_step_sample_unit(net, cache, StepSchedule::four_step(), noise, 0, r3);
    CHECK(a == c);
}

TEST_CASE("self-rollout is deterministic in the seed and counts evals per schedule") {
    WorldSpec world = WorldSpec::gaussian_ar_default();
    NetConfig cfg = small_cfg();
    VelocityNet net(cfg, 12);
    randomize(net, 77);

    RolloutConfig rc;
    rc.schedule = StepSchedule::one_step();
    rc.asd_first_frame = true;
    rc.num_units = world.num_frames;

    net.reset_evals();
    auto a = self_rollout(net, world, 3, rc, 123);
    // first unit runs the four-step preset, each later unit one step
    CHECK(net.evals() == 3 * (4 + (world.num_frames - 1)));
    auto b = self_rollout(net, world, 3, rc, 123);
    CHECK(a.data == b.data);
    auto c = self_rollout(net, world, 3, rc, 124);
    CHECK(a.data != c.data);
    CHECK(a.num_frames == world.num_frames);
    CHECK(a.frame_dim == world.frame_dim);
}

TEST_CASE("zero velocity field rolls out pure noise") {
    WorldSpec world = WorldSpec::gaussian_ar_default();
    VelocityNet net(small_cfg(), 3);  // head zero-initialized
    RolloutConfig rc;
    rc.schedule = StepSchedule::one_step();
    rc.num_units = world.num_frames;
    auto out = self_rollout(net, world, 200, rc, 7);
    double m = 0.0, s = 0.0;
    for (double v : out.data) m += v;
    m /= out.data.size();
    for (double v : out.data) s += (v - m) * (v - m);
    s = std::sqrt(s / out.data.size());
    CHECK(std::abs(m) < 0.1);
    CHECK(s == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("differentiable rollout matches the tape-free rollout and truncates gradients") {
    WorldSpec world = WorldSpec::gaussian_ar_default();
    NetConfig cfg = small_cfg();
    VelocityNet net(cfg, 41);
    randomize(net, 88);

    RolloutConfig rc;
    rc.schedule = StepSchedule::two_step();
    rc.num_units = 4;

    auto plain = self_rollout(net, world, 2, rc, 55);
    auto diff = self_rollout_diff(net, 2, rc, 55);
    REQUIRE(diff.units.size() == 2);
    for (int b = 0; b < 2; ++b) {
        REQUIRE(diff.units[b].size() == 4);
        for (int u = 0; u < 4; ++u) {
            auto ref = plain.unit_vec(b, u, rc.chunk);
            for (int j = 0; j < cfg.unit_dim; ++j) {
                CHECK(diff.units[b][u].at(0, j) == doctest::Approx(ref[j]).epsilon(1e-12));
            }
        }
    }

    // only the final unit carries a tape under truncation
    for (int u = 0; u < 3; ++u) CHECK_FALSE(diff.units[0][u].requires_grad());
    CHECK(diff.units[0][3].requires_grad());

    Tensor loss = reduce_mean(squared_error(diff.units[0][3], Tensor::zeros(1, cfg.unit_dim)));
    loss.backward();
    double g = 0.0;
    for (double v : net.params().at("w0").grad()) g += std::abs(v);
    CHECK(g > 0.0);
}

TEST_CASE("full-depth rollout reaches earlier units through the context") {
    NetConfig cfg = small_cfg();
    VelocityNet net(cfg, 41);
    randomize(net, 88);
    RolloutConfig rc;
    rc.schedule = StepSchedule::one_step();
    rc.num_units = 3;
    rc.full_depth_grad = true;
    auto diff = self_rollout_diff(net, 1, rc, 9);
    for (int u = 0; u < 3; ++u) CHECK(diff.units[0][u].requires_grad());
}

TEST_CASE("sequence velocity source counts one eval per whole-sequence forward") {
    NetConfig cfg = small_cfg(NetMode::bidirectional);
    VelocityNet net(cfg, 5);
    randomize(net, 14);
    NetSeqVelocity src(net);
    Rng rng(6);
    auto seq = rng.normal_vec(static_cast<size_t>(cfg.num_units) * cfg.unit_dim);
    auto v = src.eval(seq, 0.5);
    CHECK(v.size() == seq.size());
    CHECK(src.evals() == 1);

    // per-unit slices agree with direct evaluation against the masked context
    auto ctx2 = VelocityNet::bidir_context(seq, 2, cfg.unit_dim);
    std::vector<double> x2(seq.begin() + 2 * cfg.unit_dim, seq.begin() + 3 * cfg.unit_dim);
    auto direct = net.eval_raw(x2, ctx2, 0.5, 2);
    for (int j = 0; j < cfg.unit_dim; ++j) {
        CHECK(v[2 * cfg.unit_dim + j] == doctest::Approx(direct[j]).epsilon(1e-12));
    }
}

TEST_CASE("copy_params_from makes nets agree; shape mismatch throws") {
    NetConfig cfg = small_cfg();
    VelocityNet a(cfg, 1), b(cfg, 2);
    randomize(a, 70);
    b.copy_params_from(a);
    std::vector<double> x{0.1, 0.2}, ctx(cfg.context_dim(), -0.3);
    CHECK(a.eval_raw(x, ctx, 0.4, 1) == b.eval_raw(x, ctx, 0.4, 1));

    NetConfig wide = cfg;
    wide.hidden = 32;
    VelocityNet c(wide, 3);
    CHECK_THROWS_AS(c.copy_params_from(a), ShapeError);
}

TEST_CASE("shape and numeric errors surface from evaluation") {
    NetConfig cfg = small_cfg();
    VelocityNet net(cfg, 1);
    randomize(net, 4);
    CHECK_THROWS_AS((void)net.eval_raw({0.0}, std::vector<double>(8, 0.0), 0.5, 0), ShapeError);
    CHECK_THROWS_AS(
        (void)net.eval_raw({std::nan(""), 0.0}, std::vector<double>(8, 0.0), 0.5, 0),
        NumericError);
}
