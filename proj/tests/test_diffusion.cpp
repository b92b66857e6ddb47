// test_diffusion.cpp
// Schedules, DDIM algebra, decoders, sampling, toy data, denoiser training.

#include <cmath>
#include <vector>

#include "doctest.h"
#include "omat/diffusion.hpp"
#include "omat/error.hpp"
#include "omat/gradcheck.hpp"
#include "omat/ops.hpp"
#include "omat/rng.hpp"

using namespace omat;
using namespace omat::diffusion;

namespace {

NoiseSchedule fixed_schedule(std::vector<double> alpha_bar) {
    NoiseSchedule s;
    s.T = alpha_bar.size() - 1;
    s.alpha_bar = std::move(alpha_bar);
    s.betas.resize(s.T);
    for (std::size_t t = 1; t <= s.T; ++t) {
        s.betas[t - 1] = 1.0 - s.alpha_bar[t] / s.alpha_bar[t - 1];
    }
    return s;
}

Generator tiny_generator(std::uint64_t seed) {
    Generator g;
    g.id = "tiny";
    g.schedule = make_schedule(ScheduleKind::Linear, 2);
    Rng rng(seed);
    g.denoiser = Denoiser::init(16, 10, {8}, rng);
    g.decoder = bilinear_decoder_matrix();
    g.inference_steps = 2;
    return g;
}

} // namespace

TEST_CASE("make_schedule") {
    NoiseSchedule lin = make_schedule(ScheduleKind::Linear, 2);
    CHECK(lin.betas[0] == doctest::Approx(1e-4).epsilon(1e-15));
    CHECK(lin.betas[1] == doctest::Approx(0.02).epsilon(1e-15));
    CHECK(lin.alpha_bar[0] == 1.0);
    CHECK(lin.alpha_bar[1] == doctest::Approx(0.9999).epsilon(1e-15));
    CHECK(lin.alpha_bar[2] == doctest::Approx(0.9999 * 0.98).epsilon(1e-15));

    for (ScheduleKind kind : {ScheduleKind::Linear, ScheduleKind::Cosine}) {
        NoiseSchedule s = make_schedule(kind, 100);
        CHECK(s.alpha_bar[0] == 1.0);
        for (std::size_t t = 1; t <= 100; ++t) {
            CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
            CHECK(s.betas[t - 1] > 0.0);
            CHECK(s.betas[t - 1] <= 0.999);
        }
    }
    NoiseSchedule cos = make_schedule(ScheduleKind::Cosine, 100);
    CHECK(cos.alpha_bar[100] < cos.alpha_bar[50]);
    CHECK(cos.alpha_bar[50] < 1.0);
    // Terminal alpha_bar stays bounded away from zero regardless of T:
    // few-step DDIM divides by sqrt(alpha_bar_T) when estimating x0, so a
    // vanishing terminal would blow up denoiser error from pure noise.
    for (std::size_t T : {10, 100, 1000}) {
        NoiseSchedule c = make_schedule(ScheduleKind::Cosine, T);
        CHECK(c.alpha_bar[T] == doctest::Approx(0.002).epsilon(1e-6));
    }

    CHECK_THROWS_AS(make_schedule(ScheduleKind::Linear, 1), DomainError);
    CHECK(schedule_kind_from_name("cosine") == ScheduleKind::Cosine);
    CHECK_THROWS_AS(schedule_kind_from_name("quadratic"), DomainError);
}

TEST_CASE("forward_diffuse") {
    NoiseSchedule s = fixed_schedule({1.0, 0.25});
    Tensor z0 = Tensor::scalar(1.0), eps = Tensor::scalar(2.0);

    // t=0 boundary: alpha_bar = 1 -> z0 unchanged.
    CHECK(forward_diffuse(z0, 0, eps, s).item() == 1.0);
    // alpha_bar=0.25: 0.5*1 + sqrt(0.75)*2.
    CHECK(forward_diffuse(z0, 1, eps, s).item() ==
          doctest::Approx(2.232050807568877).epsilon(1e-14));
    // eps=0 -> pure scaling.
    CHECK(forward_diffuse(z0, 1, Tensor::scalar(0.0), s).item() == 0.5);

    CHECK_THROWS_AS(forward_diffuse(z0, 2, eps, s), DomainError);
    CHECK_THROWS_AS(forward_diffuse(Tensor({2}, {1, 2}), 1, eps, s), ShapeError);
}

TEST_CASE("ddim_step closed forms") {
    // eps=0 collapses to the sqrt-alpha-bar ratio.
    {
        NoiseSchedule s = fixed_schedule({1.0, 0.64, 0.25});
        Tensor z = Tensor::scalar(3.0);
        CHECK(ddim_step(z, Tensor::scalar(0.0), 2, 1, s).item() ==
              doctest::Approx(1.6 * 3.0).epsilon(1e-13));
        // Implied clean estimate zero: z_t = sqrt(1-abar_t)*eps.
        const double e = 0.7;
        Tensor zt = Tensor::scalar(std::sqrt(1.0 - 0.25) * e);
        CHECK(ddim_step(zt, Tensor::scalar(e), 2, 1, s).item() ==
              doctest::Approx(std::sqrt(1.0 - 0.64) * e).epsilon(1e-13));
        CHECK_THROWS_AS(ddim_step(z, z, 1, 1, s), DomainError);
        CHECK_THROWS_AS(ddim_step(z, z, 1, 2, s), DomainError);
    }
    // Direct substitution: abar_t=0.5, abar_prev=0.7, z=1, eps=0.5.
    {
        NoiseSchedule s = fixed_schedule({1.0, 0.7, 0.5});
        const double got = ddim_step(Tensor::scalar(1.0), Tensor::scalar(0.5), 2, 1, s).item();
        CHECK(std::abs(got - 1.0387472221054685) < 1e-12);
    }
}

TEST_CASE("ddim consistency with the forward process") {
    NoiseSchedule s = make_schedule(ScheduleKind::Linear, 100);
    Rng rng(seed_for(11, "test.ddim"));
    for (int trial = 0; trial < 100; ++trial) {
        Tensor z0({2, 3}, rng.normal_vec(6));
        Tensor eps({2, 3}, rng.normal_vec(6));
        const std::size_t t = 1 + rng.uniform_int(100);
        const std::size_t tp = rng.uniform_int(t);
        Tensor zt = forward_diffuse(z0, t, eps, s);
        Tensor back = ddim_step(zt, eps, t, tp, s);
        Tensor want = forward_diffuse(z0, tp, eps, s);
        for (std::size_t i = 0; i < back.size(); ++i) {
            CHECK(std::abs(back.data[i] - want.data[i]) < 1e-10);
        }
    }
}

TEST_CASE("inference timestep ladder") {
    CHECK(inference_timesteps(100, 10) ==
          std::vector<std::size_t>{100, 90, 80, 70, 60, 50, 40, 30, 20, 10, 0});
    CHECK(inference_timesteps(2, 2) == std::vector<std::size_t>{2, 1, 0});
    const auto full = inference_timesteps(100, 100);
    CHECK(full.size() == 101);
    CHECK(full.front() == 100);
    CHECK(full.back() == 0);
    (void)inference_timesteps(100, 25); // construction enforces strict descent
    CHECK_THROWS_AS(inference_timesteps(10, 11), DomainError);
    CHECK_THROWS_AS(inference_timesteps(10, 0), DomainError);
}

TEST_CASE("time embedding and one-hot") {
    Tensor e0 = time_embedding(0.0, 8);
    CHECK(e0.shape == Shape{1, 8});
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(e0.data[2 * i] == 0.0);
        CHECK(e0.data[2 * i + 1] == 1.0);
    }
    Tensor e = time_embedding(37.0, 8);
    for (double v : e.data) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    CHECK_THROWS_AS(time_embedding(1.0, 7), DomainError);

    Tensor oh = onehot_row(3, 10);
    CHECK(oh.data[3] == 1.0);
    CHECK(sum(oh).item() == 1.0);
    CHECK_THROWS_AS(onehot_row(10, 10), DomainError);
}

TEST_CASE("decoder matrices and pseudo-inverse") {
    Tensor bil = bilinear_decoder_matrix();
    Tensor nn = nearest_decoder_matrix();
    CHECK(bil.shape == Shape{16, 64});
    CHECK(nn.shape == Shape{16, 64});
    // Interpolation weights partition unity per output pixel.
    for (std::size_t col = 0; col < 64; ++col) {
        double sb = 0.0, sn = 0.0;
        for (std::size_t row = 0; row < 16; ++row) {
            sb += bil.data[row * 64 + col];
            sn += nn.data[row * 64 + col];
        }
        CHECK(sb == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(sn == 1.0);
    }

    Rng rng(seed_for(5, "test.pinv"));
    for (const Tensor& dec : {bil, nn}) {
        Tensor pinv = decoder_pinv(dec);
        CHECK(pinv.shape == Shape{64, 16});
        Tensor z({3, 16}, rng.normal_vec(48));
        Tensor img = omat::tanh(matmul(z, dec));
        Tensor back = encode_rows(img, pinv);
        for (std::size_t i = 0; i < z.size(); ++i) {
            CHECK(std::abs(back.data[i] - z.data[i]) < 1e-10);
        }
    }
    CHECK_THROWS_AS(encode_rows(Tensor({1, 64}, std::vector<double>(64, 1.0)),
                                decoder_pinv(bil)),
                    DomainError);
}

TEST_CASE("sample determinism and differentiability") {
    Generator gen = tiny_generator(seed_for(9, "test.gen"));
    Rng rng(seed_for(9, "test.z"));
    Tensor z({1, 4, 4}, rng.normal_vec(16));

    Tensor a = sample(gen, z, 3);
    Tensor b = sample(gen, z, 3);
    CHECK(a.shape == Shape{1, 8, 8});
    CHECK(a.data == b.data);
    for (double v : a.data) {
        CHECK(v > -1.0);
        CHECK(v < 1.0);
    }
    CHECK(a.data != sample(gen, z, 4).data); // conditioning matters

    CHECK_THROWS_AS(sample(gen, Tensor({16}, rng.normal_vec(16)), 3), ShapeError);
    CHECK_THROWS_AS(sample(gen, z, 10), DomainError);

    // Finite differences through the full 2-step sampler.
    Tensor w({1, 8, 8}, rng.normal_vec(64));
    GradCheckResult r = gradcheck(
        [&](Tape&, const Tensor& t) { return sum(mul(sample(gen, t, 3), w)); }, z,
        1e-5, 1e-4, 1e-8);
    CAPTURE(r.max_err);
    CHECK(r.ok);
}

TEST_CASE("toy dataset") {
    ToyDatasetSpec spec;
    spec.seed = 123;
    const auto a = toy_image(spec, 2, 5);
    const auto b = toy_image(spec, 2, 5);
    CHECK(a == b); // pure function of (seed, class, index)
    CHECK(a != toy_image(spec, 2, 6));
    for (double v : a) {
        CHECK(v >= -0.95);
        CHECK(v <= 0.95);
    }

    ImageSet ds = make_toy_dataset(spec, 4);
    CHECK(ds.images.shape == Shape{40, 64});
    CHECK(ds.classes.size() == 40);
    CHECK(ds.classes[0] == 0);
    CHECK(ds.classes[39] == 9);

    // Class means are distinct across shape families.
    std::vector<double> m0(64, 0.0), m1(64, 0.0);
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 64; ++j) {
            m0[j] += ds.images.data[(0 * 4 + i) * 64 + j] / 4.0;
            m1[j] += ds.images.data[(1 * 4 + i) * 64 + j] / 4.0;
        }
    }
    double diff = 0.0;
    for (std::size_t j = 0; j < 64; ++j) diff += std::abs(m0[j] - m1[j]);
    CHECK(diff / 64.0 > 0.05);
}

TEST_CASE("train_denoiser") {
    ToyDatasetSpec spec;
    spec.seed = 77;

    // Zero steps: parameters untouched.
    {
        Generator skel = tiny_generator(seed_for(1, "test.skel"));
        DenoiserTrainConfig cfg;
        cfg.steps = 0;
        cfg.per_class = 2;
        DenoiserTrainResult r = train_denoiser(spec, skel, cfg);
        CHECK(r.losses.empty());
        for (std::size_t i = 0; i < skel.denoiser.net.params.size(); ++i) {
            CHECK(r.gen.denoiser.net.params[i].data == skel.denoiser.net.params[i].data);
        }
    }

    // Modest run: loss falls by at least half, and training is bit-reproducible.
    {
        Generator skel;
        skel.id = "t";
        skel.schedule = make_schedule(ScheduleKind::Linear, 100);
        Rng rng(seed_for(2, "test.skel2"));
        skel.denoiser = Denoiser::init(16, 10, {32, 32}, rng);
        skel.decoder = bilinear_decoder_matrix();
        skel.inference_steps = 10;

        DenoiserTrainConfig cfg;
        cfg.steps = 800;
        cfg.batch_size = 32;
        cfg.per_class = 10;
        cfg.seed = seed_for(2, "test.train");

        DenoiserTrainResult r1 = train_denoiser(spec, skel, cfg);
        DenoiserTrainResult r2 = train_denoiser(spec, skel, cfg);
        CHECK(r1.losses == r2.losses);
        for (std::size_t i = 0; i < r1.gen.denoiser.net.params.size(); ++i) {
            CHECK(r1.gen.denoiser.net.params[i].data == r2.gen.denoiser.net.params[i].data);
        }

        const std::size_t k = 20;
        double head = 0.0, tail = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            head += r1.losses[i] / static_cast<double>(k);
            tail += r1.losses[r1.losses.size() - 1 - i] / static_cast<double>(k);
        }
        CAPTURE(head);
        CAPTURE(tail);
        CHECK(tail < 0.5 * head);
    }
}

TEST_CASE("generator zoo") {
    ToyDatasetSpec spec;
    spec.seed = 31;
    ZooTrainConfig cfg;
    cfg.dn.steps = 40;
    cfg.dn.batch_size = 16;
    cfg.dn.per_class = 4;
    cfg.distill_pairs = 40;
    cfg.distill_steps = 30;
    cfg.distill_batch = 8;

    const auto zoo = build_generator_zoo(spec, cfg, 99);
    REQUIRE(zoo.size() == 6);
    std::size_t seen_count = 0;
    for (const auto& g : zoo) {
        if (g.id == "seen") ++seen_count;
    }
    CHECK(seen_count == 1);
    CHECK(zoo[0].id == "seen");
    CHECK(zoo[3].id == "unseen_steps25");
    CHECK(zoo[3].inference_steps == 25);
    CHECK(zoo[4].id == "unseen_nearest");
    CHECK(zoo[5].kind == Generator::Kind::OneShot);

    // steps25 and nearest reuse the seen denoiser weights.
    for (std::size_t i = 0; i < zoo[0].denoiser.net.params.size(); ++i) {
        CHECK(zoo[3].denoiser.net.params[i].data == zoo[0].denoiser.net.params[i].data);
        CHECK(zoo[4].denoiser.net.params[i].data == zoo[0].denoiser.net.params[i].data);
    }
    CHECK(zoo[4].decoder.data != zoo[0].decoder.data);

    // Every member produces valid images for every class, and each unseen
    // member's output distribution differs from seen.
    Rng rng(seed_for(99, "test.zoo.sample"));
    const std::size_t n_probe = 100;
    std::vector<std::vector<double>> mean_img(zoo.size(), std::vector<double>(64, 0.0));
    for (std::size_t gi = 0; gi < zoo.size(); ++gi) {
        Rng zr(seed_for(99, "test.zoo.probe")); // same latents for every generator
        for (std::size_t s = 0; s < n_probe; ++s) {
            Tensor z({1, 4, 4}, zr.normal_vec(16));
            Tensor img = sample(zoo[gi], z, s % 10);
            REQUIRE(img.shape == Shape{1, 8, 8});
            REQUIRE(img.all_finite());
            for (std::size_t j = 0; j < 64; ++j) {
                mean_img[gi][j] += img.data[j] / static_cast<double>(n_probe);
            }
        }
    }
    for (std::size_t gi = 1; gi < zoo.size(); ++gi) {
        double d = 0.0;
        for (std::size_t j = 0; j < 64; ++j) d += std::abs(mean_img[gi][j] - mean_img[0][j]);
        CAPTURE(zoo[gi].id);
        CHECK(d > 0.0);
    }
    (void)rng;
}
