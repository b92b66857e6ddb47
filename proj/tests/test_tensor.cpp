// test_tensor.cpp
// Tensor ops, tape backward, gradient checks, optimizers, RNG.

#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "omat/error.hpp"
#include "omat/gradcheck.hpp"
#include "omat/mlp.hpp"
#include "omat/ops.hpp"
#include "omat/optim.hpp"
#include "omat/rng.hpp"
#include "omat/tape.hpp"
#include "omat/tensor.hpp"

using namespace omat;

namespace {

Tensor rand_tensor(Rng& rng, Shape s, double lo, double hi) {
    std::vector<double> d(shape_numel(s));
    for (double& v : d) v = lo + (hi - lo) * rng.uniform();
    return Tensor(std::move(s), std::move(d));
}

// Nudge entries away from `kink` so finite differences stay clean.
Tensor away_from(Tensor t, double kink, double margin) {
    for (double& v : t.data) {
        if (std::abs(v - kink) < margin) v = kink + (v >= kink ? margin : -margin);
    }
    return t;
}

void require_gradcheck(const std::function<Tensor(Tape&, const Tensor&)>& f,
                       const Tensor& x) {
    GradCheckResult r = gradcheck(f, x);
    CAPTURE(r.max_err);
    CAPTURE(r.worst);
    CAPTURE(r.analytic);
    CAPTURE(r.numeric);
    CHECK(r.ok);
}

} // namespace

TEST_CASE("tensor shape validation") {
    CHECK_THROWS_AS(Tensor({2, 3}, {1, 2, 3, 4, 5}), ShapeError);
    CHECK_THROWS_AS(Tensor({0}, {}), ShapeError);
    CHECK_THROWS_AS(Tensor({}, {1.0}), ShapeError);
    Tensor t({2, 2}, {1, 2, 3, 4});
    CHECK(t.size() == 4);
    CHECK_THROWS_AS(t.item(), ShapeError);
    CHECK(Tensor::scalar(2.5).item() == 2.5);
    CHECK(t.all_finite());
    t.data[1] = std::nan("");
    CHECK_FALSE(t.all_finite());
}

TEST_CASE("op forward values") {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({2, 1}, {1, 1});
    Tensor mm = matmul(a, b);
    CHECK(mm.shape == Shape{2, 1});
    CHECK(mm.data[0] == 3.0);
    CHECK(mm.data[1] == 7.0);

    CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
    CHECK(sigmoid_value(0.0) == 0.5);

    Tensor x({3}, {-1.0, 0.5, 2.0});
    Tensor r = relu(x);
    CHECK(r.data == std::vector<double>{0.0, 0.5, 2.0});
    Tensor c = clamp01(Tensor({3}, {-0.5, 0.25, 1.5}));
    CHECK(c.data == std::vector<double>{0.0, 0.25, 1.0});

    Tensor cat = concat(std::vector<Tensor>{Tensor({2, 1}, {1, 2}), Tensor({2, 2}, {3, 4, 5, 6})});
    CHECK(cat.shape == Shape{2, 3});
    CHECK(cat.data == std::vector<double>{1, 3, 4, 2, 5, 6});

    CHECK_THROWS_AS(matmul(a, Tensor({3, 1}, {1, 2, 3})), ShapeError);
    CHECK_THROWS_AS(add(a, Tensor({3}, {1, 2, 3})), ShapeError);
    CHECK_THROWS_AS(add_bias(a, Tensor({3}, {1, 2, 3})), ShapeError);
}

TEST_CASE("backward basics") {
    // d(loss)/d(loss) = 1 on a bare leaf.
    {
        Tape tape;
        Tensor x = tape.leaf(Tensor::scalar(3.0));
        GradMap g = tape.backward(x);
        CHECK(g.at(x.node).item() == 1.0);
    }
    // loss = sum of params -> all-ones gradient.
    {
        Tape tape;
        Tensor x = tape.leaf(Tensor({4}, {1, 2, 3, 4}));
        GradMap g = tape.backward(sum(x));
        CHECK(g.at(x.node).data == std::vector<double>(4, 1.0));
    }
    // f(x) = sigmoid(3x) at 0 -> 0.75.
    {
        Tape tape;
        Tensor x = tape.leaf(Tensor::scalar(0.0));
        GradMap g = tape.backward(sigmoid(scalar_mul(x, 3.0)));
        CHECK(g.at(x.node).item() == doctest::Approx(0.75).epsilon(1e-12));
    }
    // grad of sum(x*x) at [1,2,3] -> [2,4,6].
    {
        Tape tape;
        Tensor x = tape.leaf(Tensor({3}, {1, 2, 3}));
        GradMap g = tape.backward(sum(mul(x, x)));
        const auto& gx = g.at(x.node).data;
        CHECK(gx[0] == doctest::Approx(2.0).epsilon(1e-14));
        CHECK(gx[1] == doctest::Approx(4.0).epsilon(1e-14));
        CHECK(gx[2] == doctest::Approx(6.0).epsilon(1e-14));
    }
}

TEST_CASE("tape contract") {
    Tape tape;
    Tensor x = tape.leaf(Tensor({2}, {1, 2}));
    Tensor loss = sum(mul(x, x));
    (void)tape.backward(loss);
    CHECK(tape.consumed());
    CHECK_THROWS_AS((void)tape.backward(loss), DomainError);

    // Non-scalar loss rejected.
    {
        Tape t2;
        Tensor y = t2.leaf(Tensor({2}, {1, 2}));
        CHECK_THROWS_AS((void)t2.backward(mul(y, y)), ShapeError);
    }
    // Loss from a different tape rejected.
    {
        Tape t3, t4;
        Tensor a = t3.leaf(Tensor::scalar(1.0));
        Tensor b = t4.leaf(Tensor::scalar(1.0));
        CHECK_THROWS_AS((void)t3.backward(b), DomainError);
        CHECK_THROWS_AS(add(a, b), DomainError); // mixing tapes in one op
    }
    // requires_grad=false leaves get no entry.
    {
        Tape t5;
        Tensor p = t5.leaf(Tensor::scalar(2.0), true);
        Tensor q = t5.leaf(Tensor::scalar(5.0), false);
        GradMap g = t5.backward(sum(mul(p, q)));
        CHECK(g.count(p.node) == 1);
        CHECK(g.count(q.node) == 0);
        CHECK(g.at(p.node).item() == doctest::Approx(5.0).epsilon(1e-14));
    }
}

TEST_CASE("gradcheck every primitive op on random inputs") {
    Rng rng(seed_for(7, "test.gradcheck"));
    const Shape vec{5};
    const Shape matA{2, 3}, matB{3, 2};

    for (int trial = 0; trial < 20; ++trial) {
        Tensor a = rand_tensor(rng, vec, -2.0, 2.0);
        Tensor b = rand_tensor(rng, vec, -2.0, 2.0);

        require_gradcheck([&](Tape&, const Tensor& t) { return sum(add(t, b)); }, a);
        require_gradcheck([&](Tape&, const Tensor& t) { return sum(sub(a, t)); }, b);
        require_gradcheck([&](Tape&, const Tensor& t) { return sum(mul(t, b)); }, a);
        require_gradcheck([&](Tape&, const Tensor& t) { return sum(mul(a, t)); }, b);
        require_gradcheck([&](Tape&, const Tensor& t) { return sum(scalar_mul(t, 1.7)); }, a);
        require_gradcheck([&](Tape&, const Tensor& t) { return sum(affine(t, -0.6, 0.3)); }, a);
        require_gradcheck([&](Tape&, const Tensor& t) { return mean(t); }, a);
        require_gradcheck([&](Tape&, const Tensor& t) { return sum(sigmoid(t)); }, a);
        require_gradcheck([&](Tape&, const Tensor& t) { return sum(omat::tanh(t)); }, a);
        require_gradcheck(
            [&](Tape&, const Tensor& t) { return sum(relu(t)); },
            away_from(rand_tensor(rng, vec, -2.0, 2.0), 0.0, 0.05));

        Tensor cl = away_from(away_from(rand_tensor(rng, vec, -0.5, 1.5), 0.0, 0.05), 1.0, 0.05);
        require_gradcheck([&](Tape&, const Tensor& t) { return sum(clamp01(t)); }, cl);

        Tensor A = rand_tensor(rng, matA, -1.5, 1.5);
        Tensor B = rand_tensor(rng, matB, -1.5, 1.5);
        require_gradcheck([&](Tape&, const Tensor& t) { return sum(matmul(t, B)); }, A);
        require_gradcheck([&](Tape&, const Tensor& t) { return sum(matmul(A, t)); }, B);

        Tensor bias = rand_tensor(rng, {3}, -1.0, 1.0);
        require_gradcheck([&](Tape&, const Tensor& t) { return sum(add_bias(t, bias)); }, A);
        require_gradcheck([&](Tape&, const Tensor& t) { return sum(add_bias(A, t)); }, bias);
        require_gradcheck([&](Tape&, const Tensor& t) { return sum(mul_rowvec(t, bias)); }, A);
        require_gradcheck([&](Tape&, const Tensor& t) { return sum(mul_rowvec(A, t)); }, bias);

        Tensor left = rand_tensor(rng, {2, 2}, -1.0, 1.0);
        Tensor right = rand_tensor(rng, {2, 3}, -1.0, 1.0);
        require_gradcheck(
            [&](Tape&, const Tensor& t) {
                return sum(concat(std::vector<Tensor>{left, t, right}));
            },
            rand_tensor(rng, {2, 1}, -1.0, 1.0));
        require_gradcheck(
            [&](Tape&, const Tensor& t) { return sum(mul(reshape(t, {6}), reshape(t, {6}))); },
            rand_tensor(rng, {2, 3}, -1.0, 1.0));

        Tensor logits = rand_tensor(rng, {4}, -4.0, 4.0);
        require_gradcheck([&](Tape&, const Tensor& t) { return bce_with_logits(t, 1.0); },
                          logits);
        require_gradcheck([&](Tape&, const Tensor& t) { return bce_with_logits(t, 0.0); },
                          logits);
        require_gradcheck(
            [&](Tape&, const Tensor& t) {
                return mean(bce_with_logits_elems(t, Tensor({4}, {1, 0, 0, 1})));
            },
            logits);
    }
}

TEST_CASE("gradcheck through a 3-layer MLP") {
    Rng rng(seed_for(7, "test.mlp"));
    Mlp net = Mlp::init({4, 8, 8, 1}, rng);
    Tensor x = rand_tensor(rng, {3, 4}, -1.0, 1.0);

    // w.r.t. the input batch.
    require_gradcheck(
        [&](Tape&, const Tensor& t) { return bce_with_logits(net.forward(t, net.params), 1.0); },
        x);
    // w.r.t. the first weight matrix.
    require_gradcheck(
        [&](Tape&, const Tensor& t) {
            std::vector<Tensor> p = net.params;
            p[0] = t;
            return bce_with_logits(net.forward(x, p), 0.0);
        },
        net.params[0]);
    // w.r.t. the last bias.
    require_gradcheck(
        [&](Tape&, const Tensor& t) {
            std::vector<Tensor> p = net.params;
            p.back() = t;
            return bce_with_logits(net.forward(x, p), 1.0);
        },
        net.params.back());
}

TEST_CASE("round_straight_through") {
    Tensor x = Tensor::scalar(0.5);
    Tensor q = round_straight_through(x, 255);
    CHECK(q.item() == doctest::Approx(128.0 / 255.0).epsilon(1e-15));
    CHECK(q.item() == doctest::Approx(0.5019607843137255).epsilon(1e-15));

    // Idempotent on the grid; endpoints stay put.
    Tensor grid({3}, {0.0, 3.0 / 255.0, 1.0});
    Tensor qq = round_straight_through(grid, 255);
    CHECK(qq.data[0] == 0.0);
    CHECK(qq.data[1] == doctest::Approx(3.0 / 255.0).epsilon(1e-15));
    CHECK(qq.data[2] == 1.0);

    // Backward is exactly identity on the upstream gradient.
    Tape tape;
    Tensor leaf = tape.leaf(Tensor({3}, {0.1, 0.5, 0.9}));
    Tensor loss = sum(mul(round_straight_through(leaf, 255), Tensor({3}, {2.0, -3.0, 7.0})));
    GradMap g = tape.backward(loss);
    CHECK(g.at(leaf.node).data == std::vector<double>{2.0, -3.0, 7.0});

    CHECK_THROWS_AS(round_straight_through(Tensor::scalar(-0.01), 255), DomainError);
    CHECK_THROWS_AS(round_straight_through(Tensor::scalar(1.01), 255), DomainError);
    CHECK_THROWS_AS(round_straight_through(Tensor::scalar(0.5), 1), DomainError);

    // Half away from zero: 127.5/255 rounds up to 128, 0.5/255 rounds up to 1.
    CHECK(round_straight_through(Tensor::scalar(0.5 / 255.0), 255).item() ==
          doctest::Approx(1.0 / 255.0).epsilon(1e-15));
}

TEST_CASE("bce_with_logits values") {
    CHECK(bce_with_logits(Tensor::scalar(0.0), 0.0).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-14));
    CHECK(bce_with_logits(Tensor::scalar(2.0), 1.0).item() ==
          doctest::Approx(0.1269280110429725).epsilon(1e-13));
    const double tail = bce_with_logits(Tensor::scalar(-50.0), 0.0).item();
    CHECK(tail >= 0.0);
    CHECK(tail < 1e-20);
    CHECK(std::isfinite(bce_with_logits(Tensor::scalar(700.0), 0.0).item()));
    CHECK(bce_with_logits(Tensor::scalar(-3.7), 1.0).item() >= 0.0);
    CHECK_THROWS_AS(bce_with_logits(Tensor::scalar(0.0), 0.5), DomainError);
}

TEST_CASE("optimizer SGD") {
    // p=1.0, g=0.5, lr=1e-3 -> 0.9995 exactly.
    Optimizer opt = Optimizer::sgd(1e-3);
    Tensor p = Tensor::scalar(1.0);
    opt.step_one(p, Tensor::scalar(0.5));
    CHECK(p.item() == 0.9995);

    // lr=0 is the identity.
    Optimizer frozen = Optimizer::sgd(0.0);
    Tensor q({3}, {1.5, -2.0, 0.25});
    Tensor before = q.detached();
    frozen.step_one(q, Tensor({3}, {10.0, -3.0, 1.0}));
    CHECK(q.data == before.data);
}

TEST_CASE("optimizer AdamW") {
    // wd=0, g=0 -> unchanged.
    {
        Optimizer opt = Optimizer::adamw(0.1, 0.0);
        Tensor p({2}, {1.0, -2.0});
        opt.step_one(p, Tensor::zeros({2}));
        CHECK(p.data == std::vector<double>{1.0, -2.0});
    }
    // Scalar single step against the hand-rolled reference:
    // p=1, g=1, lr=0.1, wd=0.1, betas (0.9, 0.999), eps=1e-8.
    // decay: p=0.99; mhat=vhat=1; p = 0.99 - 0.1/(1+1e-8) * ... = 0.890000001
    {
        Optimizer opt = Optimizer::adamw(0.1, 0.1);
        Tensor p = Tensor::scalar(1.0);
        opt.step_one(p, Tensor::scalar(1.0));
        CHECK(std::abs(p.item() - 0.890000001) < 1e-12);
    }
    // Full map-based step plus the missing-grad error.
    {
        Optimizer opt = Optimizer::adamw(0.01, 0.0);
        std::vector<Tensor> params{Tensor({2}, {1.0, 2.0}), Tensor::scalar(3.0)};
        Tape tape;
        std::vector<Tensor> bound = bind_params(tape, params);
        GradMap grads = tape.backward(sum(mul(bound[0], bound[0]))); // params[1] unused
        CHECK_THROWS_AS(opt.step(params, bound, grads), DomainError);
    }
    {
        Optimizer opt = Optimizer::sgd(0.5);
        std::vector<Tensor> params{Tensor({2}, {1.0, 2.0}), Tensor::scalar(3.0)};
        Tape tape;
        std::vector<Tensor> bound = bind_params(tape, params);
        Tensor loss = add(sum(mul(bound[0], bound[0])), sum(bound[1]));
        opt.step(params, bound, tape.backward(loss));
        CHECK(params[0].data == std::vector<double>{0.0, 0.0}); // 1-0.5*2, 2-0.5*4
        CHECK(params[1].item() == 2.5);
    }
}

TEST_CASE("rng determinism and distribution sanity") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng r(seed_for(1, "test.rng"));
    double mn = 1.0, mx = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const double u = r.uniform();
        mn = std::min(mn, u);
        mx = std::max(mx, u);
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
    CHECK(mn < 0.1);
    CHECK(mx > 0.9);

    double sum_n = 0.0, sum_sq = 0.0;
    const int N = 4000;
    for (int i = 0; i < N; ++i) {
        const double z = r.normal();
        sum_n += z;
        sum_sq += z * z;
    }
    CHECK(std::abs(sum_n / N) < 0.08);
    CHECK(sum_sq / N == doctest::Approx(1.0).epsilon(0.1));

    for (int i = 0; i < 50; ++i) {
        const std::uint64_t v = r.uniform_int(7);
        CHECK(v < 7);
    }

    std::vector<int> perm{0, 1, 2, 3, 4, 5, 6, 7};
    r.shuffle(perm);
    std::vector<int> sorted = perm;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
}

TEST_CASE("seed derivation") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL); // published FNV-1a vector
    CHECK(seed_for(7, "detector") != seed_for(7, "denoiser"));
    CHECK(seed_for(7, "detector") != seed_for(8, "detector"));
    CHECK(seed_for(7, "detector") == seed_for(7, "detector"));
}

TEST_CASE("mlp deterministic init and forward") {
    Rng r1(seed_for(3, "mlp")), r2(seed_for(3, "mlp"));
    Mlp m1 = Mlp::init({4, 6, 1}, r1);
    Mlp m2 = Mlp::init({4, 6, 1}, r2);
    REQUIRE(m1.params.size() == m2.params.size());
    for (std::size_t i = 0; i < m1.params.size(); ++i) {
        CHECK(m1.params[i].data == m2.params[i].data);
    }
    Tensor x({2, 4}, {0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8});
    CHECK(m1.forward(x).data == m2.forward(x).data);
    CHECK(m1.forward(x).shape == Shape{2, 1});

    auto names = m1.param_names("det");
    REQUIRE(names.size() == 4);
    CHECK(names[0] == "det.w0");
    CHECK(names[3] == "det.b1");
}
