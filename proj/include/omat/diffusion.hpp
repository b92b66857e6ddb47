#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "omat/mlp.hpp"
#include "omat/rng.hpp"
#include "omat/tensor.hpp"

namespace omat::diffusion {

enum class ScheduleKind { Linear, Cosine };

// betas[i] is beta_{i+1}; alpha_bar has T+1 entries with alpha_bar[0] = 1.
struct NoiseSchedule {
    std::size_t T = 0;
    ScheduleKind kind = ScheduleKind::Linear;
    std::vector<double> betas;
    std::vector<double> alpha_bar;
};

// Linear: betas evenly spaced 1e-4 -> 0.02. Cosine: alpha_bar(t) =
// cos^2(((t/T + 0.008)/1.008) * pi/2) normalized to alpha_bar(0) = 1, betas
// derived and clipped to (0, 0.999], alpha_bar rebuilt from the clipped betas.
NoiseSchedule make_schedule(ScheduleKind kind, std::size_t T);

const char* schedule_kind_name(ScheduleKind kind);
ScheduleKind schedule_kind_from_name(const std::string& name);

// z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps, 0 <= t <= T.
// Differentiable in z0 and eps when either is on a tape.
Tensor forward_diffuse(const Tensor& z0, std::size_t t, const Tensor& eps,
                       const NoiseSchedule& s);

// Deterministic DDIM update (eta = 0):
//   z_prev = sqrt(abar_prev) * (z_t - sqrt(1-abar_t)*eps) / sqrt(abar_t)
//          + sqrt(1-abar_prev) * eps
// Differentiable in z_t and eps. Requires t_prev < t <= T.
Tensor ddim_step(const Tensor& z_t, const Tensor& eps_pred, std::size_t t,
                 std::size_t t_prev, const NoiseSchedule& s);

// Evenly spaced descending timestep ladder from T to 0 inclusive (steps+1
// entries, strictly decreasing): t_i = round(T * (steps - i) / steps).
std::vector<std::size_t> inference_timesteps(std::size_t T, std::size_t steps);

// Sinusoidal embedding of a (possibly large) timestep as a [1, dim] row.
Tensor time_embedding(double t, std::size_t dim);

Tensor onehot_row(std::size_t c, std::size_t n);
Tensor onehot_rows(std::span<const std::size_t> cs, std::size_t n);

// Fixed analytic decoders mapping a flattened 4x4 latent to a flattened 8x8
// image (row vector convention: image = z_row * D, D is [16, 64]).
Tensor bilinear_decoder_matrix();
Tensor nearest_decoder_matrix();
// Right pseudo-inverse [64, 16] of a full-row-rank decoder matrix.
Tensor decoder_pinv(const Tensor& decoder);

// rows in (-1, 1) -> latents: atanh per entry, then * pinv. Value-level.
Tensor encode_rows(const Tensor& image_rows, const Tensor& pinv);

// eps_theta(z_t, t, c): MLP over [flattened z | time embedding | one-hot c].
struct Denoiser {
    std::size_t latent_numel = 16;
    std::size_t time_dim = 8;
    std::size_t n_classes = 10;
    Mlp net;

    static Denoiser init(std::size_t latent_numel, std::size_t n_classes,
                         const std::vector<std::size_t>& hidden, Rng& rng,
                         std::size_t time_dim = 8);

    // Conditioning block [m, time_dim + n_classes] for per-row (t, c).
    Tensor cond_rows(std::span<const std::size_t> ts, std::span<const std::size_t> cs) const;

    // z_rows [m, latent_numel] + cond [m, time_dim + n_classes] -> eps rows.
    Tensor forward_rows(const Tensor& z_rows, const Tensor& cond,
                        std::span<const Tensor> p) const;

    Tensor eps_pred(const Tensor& z_row, std::size_t t, std::size_t c,
                    std::span<const Tensor> p) const;
};

struct Generator {
    enum class Kind { Ddim, OneShot };

    std::string id;
    Kind kind = Kind::Ddim;
    std::size_t n_classes = 10;
    Shape latent_shape{1, 4, 4};
    Shape image_shape{1, 8, 8};

    // Ddim members
    NoiseSchedule schedule;
    Denoiser denoiser;
    Tensor decoder; // [latent_numel, image_numel]
    std::size_t inference_steps = 10;

    // OneShot member: MLP over [z | one-hot c] -> flattened image
    Mlp oneshot;

    std::size_t latent_numel() const { return shape_numel(latent_shape); }
    std::size_t image_numel() const { return shape_numel(image_shape); }
};

// Full generation map: DDIM trajectory (or one-shot net) + decoder + tanh
// squash to (-1, 1). Returns image_shape; differentiable end-to-end in z_T.
Tensor sample(const Generator& gen, const Tensor& z_T, std::size_t c);

// Procedural per-class image family: class c picks shape kind c%3
// (bar / disc / checker) and size/orientation variant c/3. Pure function of
// (seed, c, index); pixels in [-0.95, 0.95].
struct ToyDatasetSpec {
    std::size_t n_classes = 10;
    std::size_t image_hw = 8;
    double noise_sigma = 0.08;
    std::uint64_t seed = 0;
};

std::vector<double> toy_image(const ToyDatasetSpec& spec, std::size_t c, std::size_t index);

struct ImageSet {
    Tensor images; // [n, image_numel] rows
    std::vector<std::size_t> classes;
};

ImageSet make_toy_dataset(const ToyDatasetSpec& spec, std::size_t per_class);

struct DenoiserTrainConfig {
    std::size_t steps = 1200;
    std::size_t batch_size = 64;
    double lr = 2e-3;
    double weight_decay = 0.0;
    std::size_t per_class = 40; // toy images per class for training
    std::uint64_t seed = 0;
};

struct DenoiserTrainResult {
    Generator gen;
    std::vector<double> losses; // one entry per optimization step
};

// Encodes the toy dataset through the generator's decoder pseudo-inverse and
// trains eps-prediction: minimize E || eps - eps_theta(q_sample(z0,t,eps),t,c) ||^2.
DenoiserTrainResult train_denoiser(const ToyDatasetSpec& data_spec, Generator skeleton,
                                   const DenoiserTrainConfig& cfg);

struct ZooTrainConfig {
    DenoiserTrainConfig dn;
    std::size_t distill_pairs = 1200;
    std::size_t distill_steps = 900;
    std::size_t distill_batch = 32;
    double distill_lr = 2e-3;
};

// Seen generator (linear schedule, hidden [128,128], 10 DDIM steps, bilinear
// decoder) plus unseen members each varying one axis: cosine schedule,
// widths [64,64,64], 25 DDIM steps, nearest decoder, one-shot MLP.
std::vector<Generator> build_generator_zoo(const ToyDatasetSpec& data_spec,
                                           const ZooTrainConfig& cfg, std::uint64_t seed);

} // namespace omat::diffusion
