#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "arflow/rng.hpp"
#include "arflow/tensor.hpp"

using namespace arflow;

namespace {

// central finite differences over every scalar of every parameter;
// independent oracle for all gradient tests
bool gradcheck(ParamSet& params, const std::function<Tensor()>& loss_fn,
               double step = 1e-4, double rel_tol = 1e-4) {
    Tensor loss = loss_fn();
    params.zero_grads();
    loss.backward();
    bool ok = true;
    for (const auto& name : params.names()) {
        Tensor& p = params.at(name);
        const auto grad = p.grad();
        for (size_t i = 0; i < p.size(); ++i) {
            double orig = p.values()[i];
            p.mutable_values()[i] = orig + step;
            double up = loss_fn().item();
            p.mutable_values()[i] = orig - step;
            double dn = loss_fn().item();
            p.mutable_values()[i] = orig;
            double fd = (up - dn) / (2.0 * step);
            double err = std::abs(fd - grad[i]);
            double scale = std::max({std::abs(fd), std::abs(grad[i]), 1e-6});
            if (err > rel_tol * scale && err > 1e-8) {
                MESSAGE("grad mismatch at " << name << "[" << i << "]: analytic=" << grad[i]
                                            << " fd=" << fd);
                ok = false;
            }
        }
    }
    return ok;
}

}  // namespace

TEST_CASE("matmul arithmetic") {
    Tensor a = Tensor::from(1, 2, {1, 2});
    Tensor b = Tensor::from(2, 1, {3, 4});
    CHECK(matmul(a, b).item() == doctest::Approx(11.0));
}

TEST_CASE("add identity and shape errors") {
    Tensor x = Tensor::from(2, 2, {1, 2, 3, 4});
    Tensor z = Tensor::zeros(2, 2);
    CHECK(add(x, z).values() == x.values());
    CHECK_THROWS_AS(add(x, Tensor::zeros(3, 2)), ShapeError);
    CHECK_THROWS_AS(matmul(x, Tensor::zeros(3, 3)), ShapeError);
}

TEST_CASE("squared error of identical inputs is zero") {
    Tensor x = Tensor::from(1, 3, {1, -2, 0.5});
    CHECK(reduce_mean(squared_error(x, x)).item() == 0.0);
}

TEST_CASE("non-finite intermediates raise") {
    Tensor big = Tensor::from(1, 1, {1e308});
    CHECK_THROWS_AS(mul(big, big), NumericError);
}

TEST_CASE("closed-form derivative: mean((w*x)^2)") {
    ParamSet ps;
    Tensor& w = ps.add("w", Tensor::scalar(2.0, true));
    Tensor x = Tensor::scalar(3.0);
    Tensor out = reduce_mean(squared_error(mul(w, x), Tensor::scalar(0.0)));
    out.backward();
    // d/dw (w x)^2 = 2 w x^2 = 36
    CHECK(w.grad()[0] == doctest::Approx(36.0));
}

TEST_CASE("constant output has zero gradient") {
    ParamSet ps;
    Tensor& w = ps.add("w", Tensor::scalar(2.0, true));
    Tensor out = reduce_mean(mul(Tensor::scalar(5.0), Tensor::scalar(3.0)));
    (void)w;
    CHECK(!out.requires_grad());
}

TEST_CASE("backward requires scalar and accumulates on repeat") {
    Tensor w = Tensor::from(1, 2, {1.0, 2.0}, true);
    CHECK_THROWS(w.backward());  // non-scalar
    Tensor loss = reduce_sum(mul(w, w));
    loss.backward();
    CHECK(w.grad()[0] == doctest::Approx(2.0));
    Tensor loss2 = reduce_sum(mul(w, w));
    loss2.backward();
    CHECK(w.grad()[0] == doctest::Approx(4.0));  // accumulated
}

TEST_CASE("gradients match finite differences on a composite program") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        ParamSet ps;
        Tensor& w1 = ps.add("w1", Tensor::from(3, 4, rng.normal_vec(12), true));
        Tensor& b1 = ps.add("b1", Tensor::from(1, 4, rng.normal_vec(4), true));
        Tensor& w2 = ps.add("w2", Tensor::from(4, 2, rng.normal_vec(8), true));
        Tensor& emb = ps.add("emb", Tensor::from(5, 2, rng.normal_vec(10), true));
        Tensor x = Tensor::from(6, 3, rng.normal_vec(18));
        Tensor tgt = Tensor::from(6, 4, rng.normal_vec(24));
        std::vector<int> idx = {0, 3, 1, 4, 2, 0};
        auto loss_fn = [&]() {
            Tensor h = silu(add(matmul(x, w1), b1));
            Tensor o = matmul(h, w2);
            Tensor oe = concat_cols({o, embed_rows(emb, idx)});
            return reduce_mean(squared_error(oe, tgt));
        };
        CHECK(gradcheck(ps, loss_fn));
    }
}

TEST_CASE("detach blocks gradient flow") {
    Tensor w = Tensor::scalar(2.0, true);
    Tensor loss = reduce_mean(mul(w.detach(), w));
    loss.backward();
    CHECK(w.grad()[0] == doctest::Approx(2.0));  // only the live path counts
}

TEST_CASE("sgd step") {
    ParamSet ps;
    Tensor& w = ps.add("w", Tensor::scalar(1.0, true));
    w.zero_grad();
    const_cast<std::vector<double>&>(w.grad())[0] = 0.5;
    Optimizer opt = Optimizer::sgd();
    opt.step(ps, 0.1);
    CHECK(w.values()[0] == doctest::Approx(0.95));
    CHECK(w.grad()[0] == 0.0);  // zeroed after step
}

TEST_CASE("zero grad leaves parameters unchanged") {
    ParamSet ps;
    Tensor& w = ps.add("w", Tensor::scalar(1.5, true));
    w.zero_grad();
    Optimizer::sgd().step(ps, 0.3);
    CHECK(w.values()[0] == 1.5);
}

TEST_CASE("missing grad names the parameter") {
    ParamSet ps;
    ps.add("theta", Tensor::scalar(1.0, true));
    Optimizer opt = Optimizer::sgd();
    CHECK_THROWS_WITH_AS(opt.step(ps, 0.1), doctest::Contains("theta"), TensorError);
}

TEST_CASE("adam first step moves by ~lr against the gradient sign") {
    // bias-corrected first step: lr * g / (|g| + eps) = lr * sign(g)
    for (double g : {0.7, -0.01, 3.0}) {
        ParamSet ps;
        Tensor& w = ps.add("w", Tensor::scalar(1.0, true));
        w.zero_grad();
        const_cast<std::vector<double>&>(w.grad())[0] = g;
        Optimizer opt = Optimizer::adam();
        opt.step(ps, 0.01);
        double delta = w.values()[0] - 1.0;
        CHECK(delta == doctest::Approx(-0.01 * (g > 0 ? 1.0 : -1.0)).epsilon(1e-4));
    }
}

TEST_CASE("ema recurrence") {
    ParamSet src;
    src.add("w", Tensor::scalar(1.0, true));

    SUBCASE("beta=0 copies source") {
        ParamSet shadow0;
        shadow0.add("w", Tensor::scalar(-3.0, true));
        EmaParamSet ema(0.0, shadow0);
        ema.update(src);
        CHECK(ema.shadow().at("w").values()[0] == 1.0);
    }
    SUBCASE("three updates from zero at beta=0.9") {
        ParamSet zero;
        zero.add("w", Tensor::scalar(0.0, true));
        EmaParamSet ema(0.9, zero);
        for (int i = 0; i < 3; ++i) ema.update(src);
        CHECK(ema.shadow().at("w").values()[0] == doctest::Approx(0.271));
    }
    SUBCASE("fixed point when source equals shadow") {
        EmaParamSet ema(0.77, src);
        ema.update(src);
        ema.update(src);
        CHECK(ema.shadow().at("w").values()[0] == 1.0);
    }
    SUBCASE("beta=1 rejected") { CHECK_THROWS(EmaParamSet(1.0, src)); }
}

TEST_CASE("determinism: same seed gives identical values and grads") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        ParamSet ps;
        Tensor& w = ps.add("w", Tensor::from(4, 4, rng.normal_vec(16), true));
        Tensor x = Tensor::from(2, 4, rng.normal_vec(8));
        Tensor loss = reduce_mean(squared_error(silu(matmul(x, w)), Tensor::zeros(2, 4)));
        loss.backward();
        auto g = w.grad();
        auto v = w.values();
        v.insert(v.end(), g.begin(), g.end());
        return v;
    };
    CHECK(run(42) == run(42));
    CHECK(run(42) != run(43));
}

TEST_CASE("checkpoint round-trip with optimizer state") {
    namespace fs = std::filesystem;
    auto path = (fs::temp_directory_path() / "arflow_ckpt_test.bin").string();
    Rng rng(11);
    ParamSet ps;
    ps.add("a", Tensor::from(2, 3, rng.normal_vec(6), true));
    ps.add("b", Tensor::from(1, 3, rng.normal_vec(3), true));
    Optimizer opt = Optimizer::adam();
    for (int i = 0; i < 3; ++i) {
        Tensor loss = reduce_mean(squared_error(ps.at("a"), Tensor::zeros(2, 3)));
        loss.backward();
        ps.at("b").zero_grad();
        opt.step(ps, 0.05);
    }
    save_checkpoint(path, ps, &opt);

    ParamSet loaded;
    loaded.add("a", Tensor::zeros(2, 3, true));
    loaded.add("b", Tensor::zeros(1, 3, true));
    Optimizer opt2 = Optimizer::adam();
    load_checkpoint(path, loaded, &opt2);
    CHECK(loaded.at("a").values() == ps.at("a").values());
    CHECK(loaded.at("b").values() == ps.at("b").values());
    CHECK(opt2.steps_taken() == 3);
    fs::remove(path);

    CHECK_THROWS(load_checkpoint("/nonexistent/ckpt.bin", loaded, nullptr));
}
