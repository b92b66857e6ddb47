#include "omat/diffusion.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "omat/error.hpp"
#include "omat/ops.hpp"

namespace omat::diffusion {

NoiseSchedule make_schedule(ScheduleKind kind, std::size_t T) {
    if (T < 2) throw DomainError("make_schedule: T_train must be >= 2, got " + std::to_string(T));
    NoiseSchedule s;
    s.T = T;
    s.kind = kind;
    s.betas.resize(T);
    s.alpha_bar.assign(T + 1, 1.0);

    if (kind == ScheduleKind::Linear) {
        const double lo = 1e-4, hi = 0.02;
        for (std::size_t i = 0; i < T; ++i) {
            s.betas[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(T - 1);
        }
    } else {
        // Cosine-shaped alpha_bar path with a compressed argument so the
        // terminal alpha_bar stays well above zero. Estimating x0 inside a
        // DDIM step divides by sqrt(alpha_bar_t); with a near-zero terminal,
        // few-step sampling from pure noise amplifies denoiser error by
        // hundreds and saturates the decoded images at this scale.
        const double a_T = 0.002;
        const double u_max = std::acos(std::sqrt(a_T)) / (M_PI / 2.0);
        auto f = [T, u_max](std::size_t t) {
            const double u = u_max * static_cast<double>(t) / static_cast<double>(T);
            const double c = std::cos(u * M_PI / 2.0);
            return c * c;
        };
        double prev = 1.0; // f(0) = 1 exactly
        for (std::size_t t = 1; t <= T; ++t) {
            const double raw = f(t);
            double beta = 1.0 - raw / prev;
            beta = std::min(std::max(beta, 1e-12), 0.999);
            s.betas[t - 1] = beta;
            prev = raw;
        }
    }
    for (std::size_t t = 1; t <= T; ++t) {
        s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - s.betas[t - 1]);
    }
    return s;
}

const char* schedule_kind_name(ScheduleKind kind) {
    return kind == ScheduleKind::Linear ? "linear" : "cosine";
}

ScheduleKind schedule_kind_from_name(const std::string& name) {
    if (name == "linear") return ScheduleKind::Linear;
    if (name == "cosine") return ScheduleKind::Cosine;
    throw DomainError("unknown schedule kind: " + name);
}

Tensor forward_diffuse(const Tensor& z0, std::size_t t, const Tensor& eps,
                       const NoiseSchedule& s) {
    if (!shapes_equal(z0.shape, eps.shape)) {
        throw ShapeError("forward_diffuse: z0 " + shape_str(z0.shape) + " vs eps " +
                         shape_str(eps.shape));
    }
    if (t > s.T) {
        throw DomainError("forward_diffuse: t=" + std::to_string(t) + " exceeds T=" +
                          std::to_string(s.T));
    }
    const double ab = s.alpha_bar[t];
    return add(scalar_mul(z0, std::sqrt(ab)), scalar_mul(eps, std::sqrt(1.0 - ab)));
}

Tensor ddim_step(const Tensor& z_t, const Tensor& eps_pred, std::size_t t,
                 std::size_t t_prev, const NoiseSchedule& s) {
    if (!shapes_equal(z_t.shape, eps_pred.shape)) {
        throw ShapeError("ddim_step: z_t " + shape_str(z_t.shape) + " vs eps " +
                         shape_str(eps_pred.shape));
    }
    if (t_prev >= t || t > s.T) {
        throw DomainError("ddim_step: need t_prev < t <= T, got t=" + std::to_string(t) +
                          " t_prev=" + std::to_string(t_prev));
    }
    const double sa_t = std::sqrt(s.alpha_bar[t]);
    const double sa_p = std::sqrt(s.alpha_bar[t_prev]);
    const double sb_t = std::sqrt(1.0 - s.alpha_bar[t]);
    const double sb_p = std::sqrt(1.0 - s.alpha_bar[t_prev]);
    // z_prev = (sa_p/sa_t) * z_t + (sb_p - sa_p*sb_t/sa_t) * eps
    return add(scalar_mul(z_t, sa_p / sa_t), scalar_mul(eps_pred, sb_p - sa_p * sb_t / sa_t));
}

std::vector<std::size_t> inference_timesteps(std::size_t T, std::size_t steps) {
    if (steps < 1 || steps > T) {
        throw DomainError("inference_timesteps: need 1 <= steps <= T, got steps=" +
                          std::to_string(steps) + " T=" + std::to_string(T));
    }
    std::vector<std::size_t> ts(steps + 1);
    for (std::size_t i = 0; i <= steps; ++i) {
        ts[i] = static_cast<std::size_t>(std::llround(
            static_cast<double>(T) * static_cast<double>(steps - i) / static_cast<double>(steps)));
    }
    for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
        if (ts[i] <= ts[i + 1]) throw DomainError("inference_timesteps: ladder not decreasing");
    }
    return ts;
}

Tensor time_embedding(double t, std::size_t dim) {
    if (dim < 2 || dim % 2 != 0) {
        throw DomainError("time_embedding: dim must be even and >= 2, got " +
                          std::to_string(dim));
    }
    const std::size_t half = dim / 2;
    std::vector<double> e(dim);
    for (std::size_t i = 0; i < half; ++i) {
        const double freq =
            std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        e[2 * i] = std::sin(t * freq);
        e[2 * i + 1] = std::cos(t * freq);
    }
    return Tensor({1, dim}, std::move(e));
}

Tensor onehot_row(std::size_t c, std::size_t n) {
    if (c >= n) throw DomainError("onehot: class " + std::to_string(c) + " >= " + std::to_string(n));
    std::vector<double> v(n, 0.0);
    v[c] = 1.0;
    return Tensor({1, n}, std::move(v));
}

Tensor onehot_rows(std::span<const std::size_t> cs, std::size_t n) {
    std::vector<double> v(cs.size() * n, 0.0);
    for (std::size_t i = 0; i < cs.size(); ++i) {
        if (cs[i] >= n) {
            throw DomainError("onehot: class " + std::to_string(cs[i]) + " >= " +
                              std::to_string(n));
        }
        v[i * n + cs[i]] = 1.0;
    }
    return Tensor({cs.size(), n}, std::move(v));
}

namespace {

// 1-D bilinear upsample weights, scale 2, align_corners=false:
// in = (out + 0.5)/2 - 0.5, clamped linear interpolation over 4 inputs.
void bilinear_weights(std::size_t out, double w[4]) {
    for (int i = 0; i < 4; ++i) w[i] = 0.0;
    const double in = (static_cast<double>(out) + 0.5) / 2.0 - 0.5;
    const int i0 = static_cast<int>(std::floor(in));
    const double frac = in - std::floor(in);
    const int a = std::min(std::max(i0, 0), 3);
    const int b = std::min(std::max(i0 + 1, 0), 3);
    w[a] += 1.0 - frac;
    w[b] += frac;
}

} // namespace

Tensor bilinear_decoder_matrix() {
    std::vector<double> d(16 * 64, 0.0);
    for (std::size_t oy = 0; oy < 8; ++oy) {
        double wy[4];
        bilinear_weights(oy, wy);
        for (std::size_t ox = 0; ox < 8; ++ox) {
            double wx[4];
            bilinear_weights(ox, wx);
            for (std::size_t iy = 0; iy < 4; ++iy) {
                for (std::size_t ix = 0; ix < 4; ++ix) {
                    d[(iy * 4 + ix) * 64 + (oy * 8 + ox)] = wy[iy] * wx[ix];
                }
            }
        }
    }
    return Tensor({16, 64}, std::move(d));
}

Tensor nearest_decoder_matrix() {
    std::vector<double> d(16 * 64, 0.0);
    for (std::size_t oy = 0; oy < 8; ++oy) {
        for (std::size_t ox = 0; ox < 8; ++ox) {
            const std::size_t iy = oy / 2, ix = ox / 2;
            d[(iy * 4 + ix) * 64 + (oy * 8 + ox)] = 1.0;
        }
    }
    return Tensor({16, 64}, std::move(d));
}

Tensor decoder_pinv(const Tensor& decoder) {
    if (decoder.shape.size() != 2) {
        throw ShapeError("decoder_pinv: expected a matrix, got " + shape_str(decoder.shape));
    }
    const auto rows = static_cast<Eigen::Index>(decoder.shape[0]);
    const auto cols = static_cast<Eigen::Index>(decoder.shape[1]);
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMat> W(decoder.data.data(), rows, cols);
    // Right pseudo-inverse of a full-row-rank W: W^T (W W^T)^-1.
    RowMat gram = W * W.transpose();
    Eigen::FullPivLU<RowMat> lu(gram);
    if (!lu.isInvertible()) throw NumericError("decoder_pinv: decoder is rank-deficient");
    RowMat pinv = W.transpose() * lu.inverse();
    std::vector<double> out(pinv.data(), pinv.data() + pinv.size());
    return Tensor({decoder.shape[1], decoder.shape[0]}, std::move(out));
}

Tensor encode_rows(const Tensor& image_rows, const Tensor& pinv) {
    if (image_rows.shape.size() != 2 || image_rows.shape[1] != pinv.shape[0]) {
        throw ShapeError("encode_rows: images " + shape_str(image_rows.shape) + " vs pinv " +
                         shape_str(pinv.shape));
    }
    Tensor y = image_rows.detached();
    for (double& v : y.data) {
        if (!(v > -1.0 && v < 1.0)) {
            throw DomainError("encode_rows: entry " + std::to_string(v) +
                              " outside (-1,1); cannot invert the squash");
        }
        v = std::atanh(v);
    }
    return matmul(y, pinv);
}

Denoiser Denoiser::init(std::size_t latent_numel, std::size_t n_classes,
                        const std::vector<std::size_t>& hidden, Rng& rng,
                        std::size_t time_dim) {
    Denoiser d;
    d.latent_numel = latent_numel;
    d.time_dim = time_dim;
    d.n_classes = n_classes;
    std::vector<std::size_t> dims;
    dims.push_back(latent_numel + time_dim + n_classes);
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(latent_numel);
    d.net = Mlp::init(std::move(dims), rng);
    return d;
}

Tensor Denoiser::cond_rows(std::span<const std::size_t> ts,
                           std::span<const std::size_t> cs) const {
    if (ts.size() != cs.size()) throw ShapeError("cond_rows: ts/cs length mismatch");
    const std::size_t w = time_dim + n_classes;
    std::vector<double> v(ts.size() * w, 0.0);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        Tensor emb = time_embedding(static_cast<double>(ts[i]), time_dim);
        for (std::size_t j = 0; j < time_dim; ++j) v[i * w + j] = emb.data[j];
        if (cs[i] >= n_classes) {
            throw DomainError("cond_rows: class " + std::to_string(cs[i]) + " >= " +
                              std::to_string(n_classes));
        }
        v[i * w + time_dim + cs[i]] = 1.0;
    }
    return Tensor({ts.size(), w}, std::move(v));
}

Tensor Denoiser::forward_rows(const Tensor& z_rows, const Tensor& cond,
                              std::span<const Tensor> p) const {
    return net.forward(concat(std::vector<Tensor>{z_rows, cond}), p);
}

Tensor Denoiser::eps_pred(const Tensor& z_row, std::size_t t, std::size_t c,
                          std::span<const Tensor> p) const {
    const std::size_t ts[1] = {t}, cs[1] = {c};
    return forward_rows(z_row, cond_rows(ts, cs), p);
}

Tensor sample(const Generator& gen, const Tensor& z_T, std::size_t c) {
    if (!shapes_equal(z_T.shape, gen.latent_shape)) {
        throw ShapeError("sample: latent " + shape_str(z_T.shape) + " vs expected " +
                         shape_str(gen.latent_shape));
    }
    if (c >= gen.n_classes) {
        throw DomainError("sample: class " + std::to_string(c) + " >= " +
                          std::to_string(gen.n_classes));
    }
    Tensor z = reshape(z_T, {1, gen.latent_numel()});
    Tensor pre;
    if (gen.kind == Generator::Kind::OneShot) {
        pre = gen.oneshot.forward(concat(std::vector<Tensor>{z, onehot_row(c, gen.n_classes)}),
                                  gen.oneshot.params);
    } else {
        const auto ts = inference_timesteps(gen.schedule.T, gen.inference_steps);
        for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
            Tensor eps = gen.denoiser.eps_pred(z, ts[i], c, gen.denoiser.net.params);
            z = ddim_step(z, eps, ts[i], ts[i + 1], gen.schedule);
        }
        pre = matmul(z, gen.decoder);
    }
    return reshape(omat::tanh(pre), gen.image_shape);
}

std::vector<double> toy_image(const ToyDatasetSpec& spec, std::size_t c, std::size_t index) {
    if (c >= spec.n_classes) {
        throw DomainError("toy_image: class " + std::to_string(c) + " >= " +
                          std::to_string(spec.n_classes));
    }
    const std::size_t hw = spec.image_hw;
    Rng rng(seed_for(spec.seed, "toy/" + std::to_string(c) + "/" + std::to_string(index)));
    const double center = (static_cast<double>(hw) - 1.0) / 2.0;
    const std::size_t kind = c % 3;
    const std::size_t variant = c / 3;
    const double hi = 0.8, lo = -0.8;

    std::vector<double> img(hw * hw, lo);
    if (kind == 0) { // oriented bar
        const double theta = static_cast<double>(variant) * M_PI / 4.0 +
                             (rng.uniform() - 0.5) * 0.16;
        const double cx = center + (rng.uniform() - 0.5) * 1.5;
        const double cy = center + (rng.uniform() - 0.5) * 1.5;
        const double sn = std::sin(theta), cs = std::cos(theta);
        for (std::size_t y = 0; y < hw; ++y) {
            for (std::size_t x = 0; x < hw; ++x) {
                const double d = (static_cast<double>(x) - cx) * sn -
                                 (static_cast<double>(y) - cy) * cs;
                if (std::abs(d) <= 1.1) img[y * hw + x] = hi;
            }
        }
    } else if (kind == 1) { // disc
        const double rad = 1.3 + 0.7 * static_cast<double>(variant) +
                           (rng.uniform() - 0.5) * 0.3;
        const double cx = center + (rng.uniform() - 0.5) * 1.5;
        const double cy = center + (rng.uniform() - 0.5) * 1.5;
        for (std::size_t y = 0; y < hw; ++y) {
            for (std::size_t x = 0; x < hw; ++x) {
                const double dx = static_cast<double>(x) - cx;
                const double dy = static_cast<double>(y) - cy;
                if (dx * dx + dy * dy <= rad * rad) img[y * hw + x] = hi;
            }
        }
    } else { // checker
        const std::size_t cell = variant + 1;
        const std::size_t ox = rng.uniform_int(2 * cell);
        const std::size_t oy = rng.uniform_int(2 * cell);
        for (std::size_t y = 0; y < hw; ++y) {
            for (std::size_t x = 0; x < hw; ++x) {
                const std::size_t par = ((x + ox) / cell + (y + oy) / cell) % 2;
                img[y * hw + x] = par == 0 ? hi : lo;
            }
        }
    }
    for (double& v : img) {
        v += spec.noise_sigma * rng.normal();
        v = std::min(std::max(v, -0.95), 0.95);
    }
    return img;
}

ImageSet make_toy_dataset(const ToyDatasetSpec& spec, std::size_t per_class) {
    if (per_class < 1) throw DomainError("make_toy_dataset: per_class must be >= 1");
    const std::size_t n = spec.n_classes * per_class;
    const std::size_t w = spec.image_hw * spec.image_hw;
    std::vector<double> data;
    data.reserve(n * w);
    std::vector<std::size_t> classes;
    classes.reserve(n);
    for (std::size_t c = 0; c < spec.n_classes; ++c) {
        for (std::size_t i = 0; i < per_class; ++i) {
            const auto img = toy_image(spec, c, i);
            data.insert(data.end(), img.begin(), img.end());
            classes.push_back(c);
        }
    }
    return ImageSet{Tensor({n, w}, std::move(data)), std::move(classes)};
}

} // namespace omat::diffusion
