#include <cmath>
#include <string>

#include "omat/diffusion.hpp"
#include "omat/error.hpp"
#include "omat/ops.hpp"
#include "omat/optim.hpp"

namespace omat::diffusion {

DenoiserTrainResult train_denoiser(const ToyDatasetSpec& data_spec, Generator skeleton,
                                   const DenoiserTrainConfig& cfg) {
    if (skeleton.kind != Generator::Kind::Ddim) {
        throw DomainError("train_denoiser: generator '" + skeleton.id + "' is not DDIM-based");
    }
    ImageSet ds = make_toy_dataset(data_spec, cfg.per_class);
    Tensor pinv = decoder_pinv(skeleton.decoder);
    Tensor z0 = encode_rows(ds.images, pinv);
    const std::size_t N = z0.shape[0];
    const std::size_t L = skeleton.latent_numel();

    Rng rng(cfg.seed);
    Optimizer opt = Optimizer::adamw(cfg.lr, cfg.weight_decay);
    std::vector<double> losses;
    losses.reserve(cfg.steps);

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const std::size_t B = cfg.batch_size;
        std::vector<double> zt_data(B * L), eps_data(B * L);
        std::vector<std::size_t> ts(B), cs(B);
        for (std::size_t b = 0; b < B; ++b) {
            const std::size_t idx = rng.uniform_int(N);
            const std::size_t t = 1 + rng.uniform_int(skeleton.schedule.T);
            ts[b] = t;
            cs[b] = ds.classes[idx];
            const double sa = std::sqrt(skeleton.schedule.alpha_bar[t]);
            const double sb = std::sqrt(1.0 - skeleton.schedule.alpha_bar[t]);
            for (std::size_t j = 0; j < L; ++j) {
                const double e = rng.normal();
                eps_data[b * L + j] = e;
                zt_data[b * L + j] = sa * z0.data[idx * L + j] + sb * e;
            }
        }
        Tensor zt({B, L}, std::move(zt_data));
        Tensor eps({B, L}, std::move(eps_data));
        Tensor cond = skeleton.denoiser.cond_rows(ts, cs);

        Tape tape;
        std::vector<Tensor> bound = bind_params(tape, skeleton.denoiser.net.params);
        Tensor out = skeleton.denoiser.forward_rows(zt, cond, bound);
        Tensor diff = sub(out, eps);
        Tensor loss = mean(mul(diff, diff));
        const double lv = loss.item();
        if (!std::isfinite(lv)) {
            throw NumericError("train_denoiser: non-finite loss at step " +
                               std::to_string(step));
        }
        losses.push_back(lv);
        opt.step(skeleton.denoiser.net.params, bound, tape.backward(loss));
    }
    return DenoiserTrainResult{std::move(skeleton), std::move(losses)};
}

namespace {

Generator ddim_skeleton(std::string id, ScheduleKind sched, std::vector<std::size_t> hidden,
                        std::size_t steps, Tensor decoder, std::size_t n_classes,
                        std::uint64_t init_seed) {
    Generator g;
    g.id = std::move(id);
    g.kind = Generator::Kind::Ddim;
    g.n_classes = n_classes;
    g.schedule = make_schedule(sched, 100);
    Rng rng(init_seed);
    g.denoiser = Denoiser::init(shape_numel(g.latent_shape), n_classes, hidden, rng);
    g.decoder = std::move(decoder);
    g.inference_steps = steps;
    return g;
}

// One-shot generator distilled from a DDIM teacher: an MLP trained to map
// (z_T, c) straight to the teacher's pre-squash decoded image.
Generator distill_oneshot(const Generator& teacher, const ZooTrainConfig& cfg,
                          std::uint64_t seed) {
    Generator g;
    g.id = "unseen_oneshot";
    g.kind = Generator::Kind::OneShot;
    g.n_classes = teacher.n_classes;
    g.latent_shape = teacher.latent_shape;
    g.image_shape = teacher.image_shape;
    const std::size_t L = g.latent_numel(), I = g.image_numel(), C = g.n_classes;
    {
        Rng init(seed_for(seed, "zoo/init/oneshot"));
        g.oneshot = Mlp::init({L + C, 64, 64, I}, init);
    }

    // Teacher pairs: z_T ~ N(0, I) cycled over classes -> pre-tanh image rows.
    Rng rng(seed_for(seed, "zoo/distill"));
    const std::size_t P = cfg.distill_pairs;
    std::vector<double> in_data(P * (L + C), 0.0), tgt_data(P * I);
    const auto ladder = inference_timesteps(teacher.schedule.T, teacher.inference_steps);
    for (std::size_t p = 0; p < P; ++p) {
        const std::size_t c = p % C;
        std::vector<double> zv = rng.normal_vec(L);
        for (std::size_t j = 0; j < L; ++j) in_data[p * (L + C) + j] = zv[j];
        in_data[p * (L + C) + L + c] = 1.0;

        Tensor z({1, L}, std::move(zv));
        for (std::size_t i = 0; i + 1 < ladder.size(); ++i) {
            Tensor eps = teacher.denoiser.eps_pred(z, ladder[i], c,
                                                   teacher.denoiser.net.params);
            z = ddim_step(z, eps, ladder[i], ladder[i + 1], teacher.schedule);
        }
        Tensor pre = matmul(z, teacher.decoder);
        for (std::size_t j = 0; j < I; ++j) tgt_data[p * I + j] = pre.data[j];
    }

    Optimizer opt = Optimizer::adamw(cfg.distill_lr, 0.0);
    for (std::size_t step = 0; step < cfg.distill_steps; ++step) {
        const std::size_t B = cfg.distill_batch;
        std::vector<double> bin(B * (L + C)), btg(B * I);
        for (std::size_t b = 0; b < B; ++b) {
            const std::size_t idx = rng.uniform_int(P);
            for (std::size_t j = 0; j < L + C; ++j) bin[b * (L + C) + j] = in_data[idx * (L + C) + j];
            for (std::size_t j = 0; j < I; ++j) btg[b * I + j] = tgt_data[idx * I + j];
        }
        Tensor x({B, L + C}, std::move(bin));
        Tensor y({B, I}, std::move(btg));
        Tape tape;
        std::vector<Tensor> bound = bind_params(tape, g.oneshot.params);
        Tensor diff = sub(g.oneshot.forward(x, bound), y);
        Tensor loss = mean(mul(diff, diff));
        if (!std::isfinite(loss.item())) {
            throw NumericError("distill_oneshot: non-finite loss at step " +
                               std::to_string(step));
        }
        opt.step(g.oneshot.params, bound, tape.backward(loss));
    }
    return g;
}

} // namespace

std::vector<Generator> build_generator_zoo(const ToyDatasetSpec& data_spec,
                                           const ZooTrainConfig& cfg, std::uint64_t seed) {
    auto train = [&](Generator skel, const char* label) {
        DenoiserTrainConfig c = cfg.dn;
        c.seed = seed_for(seed, std::string("zoo/train/") + label);
        return train_denoiser(data_spec, std::move(skel), c).gen;
    };
    const std::size_t C = data_spec.n_classes;

    Generator seen = train(ddim_skeleton("seen", ScheduleKind::Linear, {128, 128}, 10,
                                         bilinear_decoder_matrix(), C,
                                         seed_for(seed, "zoo/init/seen")),
                           "seen");

    std::vector<Generator> zoo;
    zoo.push_back(seen);
    zoo.push_back(train(ddim_skeleton("unseen_cosine", ScheduleKind::Cosine, {128, 128}, 10,
                                      bilinear_decoder_matrix(), C,
                                      seed_for(seed, "zoo/init/cosine")),
                        "cosine"));
    zoo.push_back(train(ddim_skeleton("unseen_width", ScheduleKind::Linear, {64, 64, 64}, 10,
                                      bilinear_decoder_matrix(), C,
                                      seed_for(seed, "zoo/init/width")),
                        "width"));

    Generator steps25 = seen;
    steps25.id = "unseen_steps25";
    steps25.inference_steps = 25;
    zoo.push_back(std::move(steps25));

    Generator nearest = seen;
    nearest.id = "unseen_nearest";
    nearest.decoder = nearest_decoder_matrix();
    zoo.push_back(std::move(nearest));

    zoo.push_back(distill_oneshot(seen, cfg, seed));
    return zoo; // zoo[0] is the lone "seen" member
}

} // namespace omat::diffusion
