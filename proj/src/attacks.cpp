#include "omat/attacks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>

#include "omat/error.hpp"
#include "omat/ops.hpp"
#include "omat/rng.hpp"

namespace omat::attacks {

namespace {

double now_ms() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double, std::milli>(clock::now().time_since_epoch()).count();
}

void check_attack_cfg(const LatentAttackConfig& cfg) {
    if (cfg.max_steps < 1) throw DomainError("latent_attack: max_steps must be >= 1");
    if (!(cfg.lr >= 0.0) || !std::isfinite(cfg.lr))
        throw DomainError("latent_attack: lr must be finite and >= 0");
    if (!(cfg.tau > 0.0 && cfg.tau < 1.0))
        throw DomainError("latent_attack: tau must lie in (0, 1)");
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

} // namespace

Tensor initial_latent(const diffusion::Generator& gen, std::uint64_t seed) {
    Rng rng(seed);
    Tensor z = Tensor::zeros(gen.latent_shape);
    for (auto& v : z.data) v = rng.normal();
    return z;
}

AttackOutcome latent_attack(const diffusion::Generator& gen, const detector::Detector& d,
                            std::size_t c, const LatentAttackConfig& cfg) {
    check_attack_cfg(cfg);
    if (c >= gen.n_classes) throw DomainError("latent_attack: class out of range");
    if (gen.image_numel() != d.input_numel())
        throw ShapeError("latent_attack: generator image size does not match detector input");

    const double t0 = now_ms();
    AttackOutcome out;
    out.seed = cfg.seed;
    out.cls = c;

    Tensor z = initial_latent(gen, cfg.seed);

    for (std::size_t k = 0; k < cfg.max_steps; ++k) {
        Tape tape;
        Tensor zleaf = tape.leaf(z, true);
        Tensor x = diffusion::sample(gen, zleaf, c);
        Tensor s = d.logits(x);
        const double sv = s.data[0];
        out.logit_trace.push_back(sv);

        // Success test happens before any update: z_adv is the latent that
        // actually produced the fooling image.
        if (sigmoid_value(sv) < cfg.tau) {
            out.success = true;
            out.steps_used = k;
            out.z_adv = Tensor(z.shape, z.data);
            out.final_image = Tensor(x.shape, x.data);
            out.wall_ms = now_ms() - t0;
            return out;
        }

        Tensor loss = bce_with_logits(s, 0.0);
        GradMap grads = tape.backward(loss);
        const Tensor& g = grads.at(zleaf.node);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            if (!std::isfinite(g.data[i]))
                throw NumericError("latent_attack: non-finite gradient at step " + std::to_string(k));
            z.data[i] -= cfg.lr * g.data[i];
        }
        if (k + 1 == cfg.max_steps) out.final_image = Tensor(x.shape, x.data);
    }

    out.success = false;
    out.steps_used = cfg.max_steps;
    out.wall_ms = now_ms() - t0;
    return out;
}

HarvestResult harvest_adv_dataset(const diffusion::Generator& gen,
                                  const detector::Detector& d,
                                  std::span<const std::size_t> classes,
                                  std::size_t per_class, const LatentAttackConfig& tmpl,
                                  std::size_t seed_budget_factor, std::uint64_t seed_base) {
    if (classes.empty()) throw DomainError("harvest_adv_dataset: no classes given");
    if (per_class < 1) throw DomainError("harvest_adv_dataset: per_class must be >= 1");
    if (seed_budget_factor < 1) throw DomainError("harvest_adv_dataset: seed budget factor must be >= 1");

    const std::size_t numel = gen.image_numel();
    HarvestResult res;
    std::vector<double> rows;
    for (std::size_t cls : classes) {
        const std::size_t budget = seed_budget_factor * per_class;
        std::size_t found = 0;
        for (std::uint64_t seed = seed_base; found < per_class; ++seed) {
            if (seed - seed_base >= budget)
                throw DomainError("harvest_adv_dataset: seed budget exhausted for class " +
                                  std::to_string(cls));
            LatentAttackConfig cfg = tmpl;
            cfg.seed = seed;
            AttackOutcome o = latent_attack(gen, d, cls, cfg);
            if (!o.success) continue;
            ++found;
            rows.insert(rows.end(), o.final_image.data.begin(), o.final_image.data.end());
            res.x_adv.labels.push_back(1);
            res.x_adv.provenance.push_back("adv");
            res.manifest.push_back({cls, seed, o.steps_used, o.logit_trace.back()});
            res.latents.push_back(std::move(o.z_adv));
        }
    }

    res.x_adv.images = Tensor({res.manifest.size(), numel}, std::move(rows));
    detector::validate_labeled_set(res.x_adv, "x_adv");
    return res;
}

const char* pixel_kind_name(PixelKind k) {
    switch (k) {
        case PixelKind::Fgsm: return "fgsm";
        case PixelKind::Pgd: return "pgd";
        case PixelKind::MiFgsm: return "mifgsm";
    }
    throw DomainError("pixel_kind_name: unknown kind");
}

Tensor pixel_attack(const detector::Detector& d, const Tensor& x,
                    const PixelAttackConfig& cfg) {
    if (!(cfg.epsilon > 0.0)) throw DomainError("pixel_attack: epsilon must be > 0");
    const bool iterative = cfg.kind != PixelKind::Fgsm;
    if (iterative) {
        if (cfg.iters < 1) throw DomainError("pixel_attack: iters must be >= 1");
        if (!(cfg.alpha > 0.0)) throw DomainError("pixel_attack: alpha must be > 0");
        if (cfg.momentum < 0.0) throw DomainError("pixel_attack: momentum must be >= 0");
    }
    if (x.size() != d.input_numel())
        throw ShapeError("pixel_attack: image size does not match detector input");

    const std::size_t n = x.size();
    std::vector<double> cur = x.data;

    auto grad_at = [&](const std::vector<double>& vals) {
        Tape tape;
        Tensor leaf = tape.leaf(Tensor({1, n}, vals), true);
        Tensor s = d.logits(leaf);
        Tensor loss = bce_with_logits(s, 0.0);
        GradMap grads = tape.backward(loss);
        Tensor g = grads.at(leaf.node);
        for (double v : g.data)
            if (!std::isfinite(v)) throw NumericError("pixel_attack: non-finite gradient");
        return g.data;
    };

    auto project = [&](std::vector<double>& vals) {
        for (std::size_t i = 0; i < n; ++i) {
            const double lo = std::max(x.data[i] - cfg.epsilon, -1.0);
            const double hi = std::min(x.data[i] + cfg.epsilon, 1.0);
            vals[i] = std::clamp(vals[i], lo, hi);
        }
    };

    if (cfg.kind == PixelKind::Fgsm) {
        std::vector<double> g = grad_at(cur);
        for (std::size_t i = 0; i < n; ++i) cur[i] -= cfg.epsilon * sign(g[i]);
        project(cur);
    } else if (cfg.kind == PixelKind::Pgd) {
        for (std::size_t it = 0; it < cfg.iters; ++it) {
            std::vector<double> g = grad_at(cur);
            for (std::size_t i = 0; i < n; ++i) cur[i] -= cfg.alpha * sign(g[i]);
            project(cur);
        }
    } else { // MI-FGSM: momentum over L1-normalized gradients
        std::vector<double> m(n, 0.0);
        for (std::size_t it = 0; it < cfg.iters; ++it) {
            std::vector<double> g = grad_at(cur);
            double l1 = 0.0;
            for (double v : g) l1 += std::abs(v);
            const double inv = l1 > 0.0 ? 1.0 / l1 : 0.0;
            for (std::size_t i = 0; i < n; ++i) m[i] = cfg.momentum * m[i] + g[i] * inv;
            for (std::size_t i = 0; i < n; ++i) cur[i] -= cfg.alpha * sign(m[i]);
            project(cur);
        }
    }

    return Tensor(x.shape, std::move(cur));
}

ReattackReport reattack_eval(const diffusion::Generator& gen, const detector::Detector& d,
                             std::span<const std::size_t> classes,
                             std::size_t seeds_per_class, const LatentAttackConfig& cfg,
                             std::uint64_t seed_base) {
    if (classes.empty()) throw DomainError("reattack_eval: no classes given");
    if (seeds_per_class < 1) throw DomainError("reattack_eval: seeds_per_class must be >= 1");

    ReattackReport rep;
    double step_sum = 0.0;
    for (std::size_t ci = 0; ci < classes.size(); ++ci) {
        for (std::size_t i = 0; i < seeds_per_class; ++i) {
            LatentAttackConfig acfg = cfg;
            acfg.seed = seed_base + static_cast<std::uint64_t>(ci) * seeds_per_class + i;
            AttackOutcome o = latent_attack(gen, d, classes[ci], acfg);
            rep.attempts.push_back({classes[ci], acfg.seed, o.success, o.steps_used});
            ++rep.n_attempts;
            if (o.success) {
                ++rep.n_success;
                step_sum += static_cast<double>(o.steps_used);
            }
        }
    }
    rep.success_rate = static_cast<double>(rep.n_success) / static_cast<double>(rep.n_attempts);
    if (rep.n_success > 0) rep.avg_steps = step_sum / static_cast<double>(rep.n_success);
    return rep;
}

} // namespace omat::attacks
