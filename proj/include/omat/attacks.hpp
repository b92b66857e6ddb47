#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "omat/detector.hpp"
#include "omat/diffusion.hpp"
#include "omat/tensor.hpp"

namespace omat::attacks {

struct LatentAttackConfig {
    std::size_t max_steps = 100; // K
    double lr = 1e-3;            // eta (0 degenerates to a rejection test)
    double tau = 0.5;            // success threshold on sigmoid(logit)
    std::uint64_t seed = 0;
};

struct AttackOutcome {
    std::uint64_t seed = 0;
    std::size_t cls = 0;
    bool success = false;
    std::size_t steps_used = 0;
    Tensor z_adv;       // populated iff success
    Tensor final_image; // image at the resolution step (success) or last probe
    std::vector<double> logit_trace;
    double wall_ms = 0.0; // excluded from determinism contracts
};

// The attack's initial draw: z ~ N(0, I) in gen.latent_shape from Rng(seed).
// Exposed so exports can regenerate the exact latent any attempt started from.
Tensor initial_latent(const diffusion::Generator& gen, std::uint64_t seed);

// Latent-noise optimization: draw z ~ N(0, I) from cfg.seed, then repeat up
// to K times: generate, test sigmoid(logit) < tau BEFORE updating, descend
// on the BCE-to-real loss through the full generator+preprocess chain.
AttackOutcome latent_attack(const diffusion::Generator& gen, const detector::Detector& d,
                            std::size_t c, const LatentAttackConfig& cfg);

struct HarvestItem {
    std::size_t cls;
    std::uint64_t seed;
    std::size_t steps;
    double logit_final;
};

struct HarvestResult {
    detector::LabeledSet x_adv; // label 1, provenance "adv"
    std::vector<HarvestItem> manifest;
    std::vector<Tensor> latents; // z_adv per manifest row
};

// For each class, walks seeds seed_base, seed_base+1, ... collecting
// successful attacks until per_class are found; errors (naming the class)
// once seed_budget_factor * per_class attempts fail to produce enough.
// Distinct seed_base values let callers mine disjoint batches.
HarvestResult harvest_adv_dataset(const diffusion::Generator& gen,
                                  const detector::Detector& d,
                                  std::span<const std::size_t> classes,
                                  std::size_t per_class, const LatentAttackConfig& tmpl,
                                  std::size_t seed_budget_factor = 50,
                                  std::uint64_t seed_base = 0);

enum class PixelKind { Fgsm, Pgd, MiFgsm };

const char* pixel_kind_name(PixelKind k);

struct PixelAttackConfig {
    PixelKind kind = PixelKind::Fgsm;
    double epsilon = 0.03; // L-inf budget
    double alpha = 0.0;    // per-step size (iterative kinds)
    std::size_t iters = 1;
    double momentum = 1.0; // MI-FGSM decay mu
};

// L-inf bounded pixel-space attack toward label 0 (real), operating on the
// raw image with gradients taken through the preprocessing chain. Valid
// image range is [-1, 1]. Always returns ||x' - x||_inf <= epsilon.
Tensor pixel_attack(const detector::Detector& d, const Tensor& x,
                    const PixelAttackConfig& cfg);

struct ReattackAttempt {
    std::size_t cls;
    std::uint64_t seed;
    bool success;
    std::size_t steps;
};

struct ReattackReport {
    std::size_t n_attempts = 0;
    std::size_t n_success = 0;
    double success_rate = 0.0;
    std::optional<double> avg_steps; // over successes; null when none
    std::vector<ReattackAttempt> attempts;
};

// Fresh-seed robustness probe (seeds seed_base + class*per_class + i, chosen
// disjoint from the 0,1,2,... harvest range).
ReattackReport reattack_eval(const diffusion::Generator& gen, const detector::Detector& d,
                             std::span<const std::size_t> classes,
                             std::size_t seeds_per_class, const LatentAttackConfig& cfg,
                             std::uint64_t seed_base = 1000000);

} // namespace omat::attacks
