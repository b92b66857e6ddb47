#include "omat/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "omat/error.hpp"
#include "omat/ops.hpp"
#include "omat/optim.hpp"
#include "omat/rng.hpp"

namespace omat::finetune {

double lambda_adv(std::size_t epoch) { return lambda_adv(epoch, 1.0, 0.2, 3.0); }

double lambda_adv(std::size_t epoch, double base, double slope, double cap) {
    if (epoch < 1) throw DomainError("lambda_adv: epoch is 1-based and must be >= 1");
    if (cap < base) throw DomainError("lambda_adv: cap must be >= base");
    return std::min(base + slope * static_cast<double>(epoch), cap);
}

double checkpoint_score(double val_acc, double adv_acc) {
    return checkpoint_score(val_acc, adv_acc, 0.6, 0.4);
}

double checkpoint_score(double val_acc, double adv_acc, double w_val, double w_adv) {
    if (!(val_acc >= 0.0 && val_acc <= 1.0))
        throw DomainError("checkpoint_score: val_acc must lie in [0, 1]");
    if (!(adv_acc >= 0.0 && adv_acc <= 1.0))
        throw DomainError("checkpoint_score: adv_acc must lie in [0, 1]");
    if (std::abs(w_val + w_adv - 1.0) > 1e-12)
        throw DomainError("checkpoint_score: weights must sum to 1");
    return w_val * val_acc + w_adv * adv_acc;
}

const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::Full: return "full";
        case Strategy::HeadOnly: return "head_only";
        case Strategy::Lora: return "lora";
    }
    throw DomainError("strategy_name: unknown strategy");
}

Strategy strategy_from_name(const std::string& name) {
    if (name == "full") return Strategy::Full;
    if (name == "head_only") return Strategy::HeadOnly;
    if (name == "lora") return Strategy::Lora;
    throw DomainError("strategy_from_name: unknown strategy '" + name + "'");
}

AdaptedDetector apply_lora(const detector::Detector& d,
                           std::span<const std::size_t> target_layers, std::size_t rank,
                           double dropout, std::uint64_t seed) {
    if (rank < 1) throw DomainError("apply_lora: rank must be >= 1");
    if (target_layers.empty()) throw DomainError("apply_lora: no target layers");
    if (!(dropout >= 0.0 && dropout < 1.0))
        throw DomainError("apply_lora: dropout must lie in [0, 1)");

    std::vector<std::size_t> targets(target_layers.begin(), target_layers.end());
    std::sort(targets.begin(), targets.end());
    if (std::adjacent_find(targets.begin(), targets.end()) != targets.end())
        throw DomainError("apply_lora: duplicate target layer");

    AdaptedDetector ad;
    ad.base = d;
    for (std::size_t l : targets) {
        if (l >= d.backbone.n_layers())
            throw DomainError("apply_lora: target layer " + std::to_string(l) +
                              " does not exist");
        const std::size_t in = d.backbone.dims[l];
        const std::size_t out = d.backbone.dims[l + 1];
        if (rank >= std::min(in, out))
            throw DomainError("apply_lora: rank " + std::to_string(rank) +
                              " must be < min layer dim " + std::to_string(std::min(in, out)));

        LoraAdapter a;
        a.layer = l;
        a.rank = rank;
        a.alpha = 2.0 * static_cast<double>(rank);
        a.dropout = dropout;
        Rng rng(seed_for(seed, "lora/a/" + std::to_string(l)));
        a.A = Tensor::zeros({in, rank});
        for (auto& v : a.A.data) v = 0.02 * rng.normal();
        a.B = Tensor::zeros({rank, out}); // adapter starts as the identity
        ad.adapters.push_back(std::move(a));
    }
    return ad;
}

std::size_t lora_trainable_count(const AdaptedDetector& ad) {
    std::size_t n = 0;
    for (const auto& a : ad.adapters) n += a.A.size() + a.B.size();
    for (const auto& p : ad.base.head.params) n += p.size();
    return n;
}

detector::Detector AdaptedDetector::merged() const {
    detector::Detector out = base;
    for (const auto& a : adapters) {
        Tensor delta = scalar_mul(matmul(a.A, a.B), a.alpha / static_cast<double>(a.rank));
        out.backbone.params[2 * a.layer] = add(out.backbone.params[2 * a.layer], delta);
    }
    return out;
}

Tensor AdaptedDetector::logits_eval(const Tensor& x) const { return merged().logits(x); }

namespace {

// Taped forward through the frozen backbone with live adapter branches.
// ab holds the bound adapter leaves as [A0, B0, A1, B1, ...]; drop_masks
// (training only) multiplies the adapter input path per batch.
Tensor adapted_logits(const detector::Detector& det, const std::vector<LoraAdapter>& adapters,
                      const Tensor& x, std::span<const Tensor> ab, std::span<const Tensor> hd,
                      const std::vector<Tensor>* drop_masks) {
    Tensor h = detector::preprocess(det.as_rows(x), det.pre);
    const Mlp& bb = det.backbone;
    std::size_t ai = 0;
    for (std::size_t l = 0; l < bb.n_layers(); ++l) {
        Tensor z = matmul(h, bb.params[2 * l]);
        if (ai < adapters.size() && adapters[ai].layer == l) {
            Tensor hin = drop_masks ? mul(h, (*drop_masks)[ai]) : h;
            Tensor delta = matmul(matmul(hin, ab[2 * ai]), ab[2 * ai + 1]);
            const auto& a = adapters[ai];
            z = add(z, scalar_mul(delta, a.alpha / static_cast<double>(a.rank)));
            ++ai;
        }
        h = add_bias(z, bb.params[2 * l + 1]);
        if (l + 1 < bb.n_layers()) h = bb.hidden_act == Act::Relu ? relu(h) : omat::tanh(h);
    }
    h = relu(h);
    return det.head.forward(h, hd);
}

Tensor gather_rows(const Tensor& images, std::span<const std::size_t> idx) {
    const std::size_t w = images.shape[1];
    std::vector<double> out;
    out.reserve(idx.size() * w);
    for (std::size_t i : idx)
        out.insert(out.end(), images.data.begin() + static_cast<std::ptrdiff_t>(i * w),
                   images.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * w));
    return Tensor({idx.size(), w}, std::move(out));
}

struct BatchRef {
    bool adv;
    std::size_t start, len;
};

} // namespace

Tensor AdaptedDetector::logits_branched(const Tensor& x) const {
    std::vector<Tensor> ab;
    for (const auto& a : adapters) {
        ab.push_back(a.A);
        ab.push_back(a.B);
    }
    return adapted_logits(base, adapters, x, ab, base.head.params, nullptr);
}

double resolved_lr(const OmatConfig& cfg) {
    if (cfg.learning_rate > 0.0) return cfg.learning_rate;
    return cfg.strategy == Strategy::Lora ? 2e-4 : 1e-4;
}

std::size_t resolved_batch(const OmatConfig& cfg) {
    if (cfg.batch_size > 0) return cfg.batch_size;
    return cfg.strategy == Strategy::Lora ? 32 : 128;
}

OmatResult omat_train(const detector::Detector& base, const detector::LabeledSet& std_set,
                      const detector::LabeledSet& x_adv, const OmatConfig& cfg) {
    if (cfg.epochs < 1) throw DomainError("omat_train: epochs must be >= 1");
    if (cfg.lambda_cap < cfg.lambda_base)
        throw DomainError("omat_train: lambda cap must be >= base");
    if (std::abs(cfg.w_val + cfg.w_adv - 1.0) > 1e-12)
        throw DomainError("omat_train: checkpoint weights must sum to 1");
    detector::validate_labeled_set(std_set, "std");
    const bool has_adv = x_adv.size() > 0;
    if (has_adv) {
        detector::validate_labeled_set(x_adv, "x_adv");
        for (std::size_t i = 0; i < x_adv.size(); ++i)
            if (x_adv.labels[i] != 1.0 || x_adv.provenance[i] != "adv")
                throw DomainError("omat_train: x_adv must be all fake with provenance adv");
    }
    if (std_set.images.shape[1] != base.input_numel() ||
        (has_adv && x_adv.images.shape[1] != base.input_numel()))
        throw ShapeError("omat_train: image width does not match detector input");

    const double lr = resolved_lr(cfg);
    const std::size_t bs = resolved_batch(cfg);
    const bool is_lora = cfg.strategy == Strategy::Lora;
    const bool train_backbone = cfg.strategy == Strategy::Full;

    detector::Detector work = base;
    std::vector<LoraAdapter> adapters;
    if (is_lora) {
        std::vector<std::size_t> targets = cfg.lora_targets;
        if (targets.empty()) {
            targets.resize(base.backbone.n_layers());
            std::iota(targets.begin(), targets.end(), std::size_t{0});
        }
        adapters = apply_lora(base, targets, cfg.lora_rank, cfg.lora_dropout,
                              seed_for(cfg.seed, "omat/lora"))
                       .adapters;
    }

    // Deterministic 90/10 split of the standard set; x_adv is fully train.
    const std::uint64_t split_salt = seed_for(cfg.seed, "omat/split");
    std::vector<std::size_t> train_idx, val_idx;
    for (std::size_t i = 0; i < std_set.size(); ++i)
        (mix64(split_salt ^ i) % 10 == 0 ? val_idx : train_idx).push_back(i);
    if (train_idx.empty()) throw DomainError("omat_train: standard train split is empty");

    detector::LabeledSet val_set;
    val_set.images = gather_rows(std_set.images, val_idx);
    for (std::size_t i : val_idx) {
        val_set.labels.push_back(std_set.labels[i]);
        val_set.provenance.push_back(std_set.provenance[i]);
    }

    Optimizer opt = Optimizer::adamw(lr, cfg.weight_decay);
    Rng rng(seed_for(cfg.seed, "omat/train"));

    auto snapshot_score = -std::numeric_limits<double>::infinity();
    detector::Detector best_work = work;
    std::vector<LoraAdapter> best_adapters = adapters;
    std::size_t best_epoch = 0;

    OmatResult res;
    std::vector<std::size_t> adv_idx(x_adv.size());
    std::iota(adv_idx.begin(), adv_idx.end(), std::size_t{0});

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const double lam = lambda_adv(epoch, cfg.lambda_base, cfg.lambda_slope, cfg.lambda_cap);
        rng.shuffle(train_idx);
        rng.shuffle(adv_idx);

        // Standard batches interleaved 1:1 with adversarial batches until the
        // (much smaller) adversarial pool is exhausted.
        std::vector<BatchRef> plan;
        std::size_t s = 0, a = 0;
        while (s < train_idx.size() && a < adv_idx.size()) {
            const std::size_t sl = std::min(bs, train_idx.size() - s);
            plan.push_back({false, s, sl});
            s += sl;
            const std::size_t al = std::min(bs, adv_idx.size() - a);
            plan.push_back({true, a, al});
            a += al;
        }
        while (s < train_idx.size()) {
            const std::size_t sl = std::min(bs, train_idx.size() - s);
            plan.push_back({false, s, sl});
            s += sl;
        }
        while (a < adv_idx.size()) {
            const std::size_t al = std::min(bs, adv_idx.size() - a);
            plan.push_back({true, a, al});
            a += al;
        }

        double loss_sum = 0.0;
        for (std::size_t step = 0; step < plan.size(); ++step) {
            const BatchRef& b = plan[step];
            const auto& pool = b.adv ? adv_idx : train_idx;
            std::span<const std::size_t> take(pool.data() + b.start, b.len);
            const auto& src = b.adv ? x_adv : std_set;
            Tensor xb = gather_rows(src.images, take);
            std::vector<double> yv;
            yv.reserve(b.len);
            for (std::size_t i : take) yv.push_back(src.labels[i]);
            Tensor yb({b.len, 1}, std::move(yv));

            std::vector<Tensor> masters = work.head.params;
            if (train_backbone)
                masters.insert(masters.end(), work.backbone.params.begin(),
                               work.backbone.params.end());
            if (is_lora)
                for (const auto& ad : adapters) {
                    masters.push_back(ad.A);
                    masters.push_back(ad.B);
                }

            Tape tape;
            std::vector<Tensor> bound = bind_params(tape, masters);
            const std::size_t nh = work.head.params.size();
            std::span<const Tensor> hd(bound.data(), nh);

            Tensor sgt;
            if (is_lora) {
                std::vector<Tensor> masks;
                if (cfg.lora_dropout > 0.0) {
                    const double keep = 1.0 - cfg.lora_dropout;
                    for (const auto& ad : adapters) {
                        const std::size_t in = work.backbone.dims[ad.layer];
                        Tensor m = Tensor::zeros({b.len, in});
                        for (auto& v : m.data) v = rng.uniform() < cfg.lora_dropout ? 0.0 : 1.0 / keep;
                        masks.push_back(std::move(m));
                    }
                }
                std::span<const Tensor> ab(bound.data() + nh, bound.size() - nh);
                sgt = adapted_logits(work, adapters, xb, ab, hd,
                                     masks.empty() ? nullptr : &masks);
            } else {
                std::span<const Tensor> bb =
                    train_backbone ? std::span<const Tensor>(bound.data() + nh, bound.size() - nh)
                                   : std::span<const Tensor>(work.backbone.params);
                sgt = work.logits(xb, bb, hd);
            }

            Tensor loss = scalar_mul(mean(bce_with_logits_elems(sgt, yb)), b.adv ? lam : 1.0);
            if (!std::isfinite(loss.data[0]))
                throw NumericError("omat_train: non-finite loss at epoch " +
                                   std::to_string(epoch) + " step " + std::to_string(step));
            loss_sum += loss.data[0];

            GradMap grads = tape.backward(loss);
            opt.step(masters, bound, grads);

            std::copy_n(masters.begin(), nh, work.head.params.begin());
            if (train_backbone)
                std::copy_n(masters.begin() + static_cast<std::ptrdiff_t>(nh),
                            work.backbone.params.size(), work.backbone.params.begin());
            if (is_lora) {
                std::size_t k = nh;
                for (auto& ad : adapters) {
                    ad.A = masters[k++];
                    ad.B = masters[k++];
                }
            }
        }

        detector::Detector eval_det =
            is_lora ? AdaptedDetector{work, adapters}.merged() : work;
        OmatEpoch row;
        row.epoch = epoch;
        row.lambda = lam;
        row.train_loss = plan.empty() ? 0.0 : loss_sum / static_cast<double>(plan.size());
        row.val_acc = val_idx.empty() ? 0.0 : detector::accuracy(eval_det, val_set);
        row.adv_acc = has_adv ? detector::accuracy(eval_det, x_adv) : 1.0;
        row.score = checkpoint_score(row.val_acc, row.adv_acc, cfg.w_val, cfg.w_adv);
        res.history.push_back(row);

        if (row.score > snapshot_score) {
            snapshot_score = row.score;
            best_work = work;
            best_adapters = adapters;
            best_epoch = epoch;
        }
    }

    res.best_epoch = best_epoch;
    res.raw = std::move(best_work);
    res.adapters = std::move(best_adapters);
    res.det = is_lora ? AdaptedDetector{res.raw, res.adapters}.merged() : res.raw;
    return res;
}

std::string sweep_row_name(const OmatConfig& cfg) {
    if (cfg.strategy == Strategy::Lora)
        return "lora(" + std::to_string(cfg.lora_rank) + ")";
    return strategy_name(cfg.strategy);
}

SweepReport strategy_sweep(const detector::Detector& base, const detector::LabeledSet& std_set,
                           const detector::LabeledSet& x_adv,
                           std::span<const OmatConfig> strategies,
                           const std::map<std::string, detector::LabeledSet>& eval_sets) {
    if (strategies.empty()) throw DomainError("strategy_sweep: no strategies given");
    if (eval_sets.empty()) throw DomainError("strategy_sweep: no eval sets given");

    SweepReport rep;
    auto tabulate = [&](const std::string& name, const detector::Detector& d,
                        std::size_t best_epoch) {
        detector::EvalReport er = detector::evaluate(d, eval_sets);
        SweepRow row;
        row.name = name;
        for (const auto& [set, m] : er.per_set) row.acc[set] = m.acc;
        row.avg = er.avg_acc;
        row.best_epoch = best_epoch;
        return row;
    };

    const SweepRow base_row = tabulate("base", base, 0);
    rep.rows.push_back(base_row);
    for (const auto& cfg : strategies) {
        OmatResult r = omat_train(base, std_set, x_adv, cfg);
        SweepRow row = tabulate(sweep_row_name(cfg), r.det, r.best_epoch);
        for (const auto& [set, acc] : row.acc) row.delta[set] = acc - base_row.acc.at(set);
        row.delta_avg = row.avg - base_row.avg;
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

} // namespace omat::finetune
