#include "omat/detector.hpp"

#include <algorithm>
#include <cmath>

#include "omat/error.hpp"
#include "omat/ops.hpp"
#include "omat/optim.hpp"

namespace omat::detector {

Tensor preprocess(const Tensor& x, const PreprocessSpec& spec) {
    if (spec.std <= 0.0) throw DomainError("preprocess: std must be positive");
    Tensor y = affine(x, 0.5, 0.5);
    y = clamp01(y);
    y = round_straight_through(y, spec.levels);
    return affine(y, 1.0 / spec.std, -spec.mean / spec.std);
}

const char* arch_name(Arch a) {
    return a == Arch::FrozenHead ? "frozen_head" : "plain_mlp";
}

Arch arch_from_name(const std::string& name) {
    if (name == "frozen_head") return Arch::FrozenHead;
    if (name == "plain_mlp") return Arch::PlainMlp;
    throw DomainError("unknown detector arch: " + name);
}

Detector Detector::init(Arch arch, std::size_t input_numel,
                        const std::vector<std::size_t>& backbone_hidden,
                        std::size_t feat_dim, Rng& rng) {
    Detector d;
    d.arch = arch;
    std::vector<std::size_t> dims;
    dims.push_back(input_numel);
    dims.insert(dims.end(), backbone_hidden.begin(), backbone_hidden.end());
    dims.push_back(feat_dim);
    d.backbone = Mlp::init(std::move(dims), rng);
    d.head = Mlp::init({feat_dim, 1}, rng);
    return d;
}

Tensor Detector::as_rows(const Tensor& x) const {
    const std::size_t in = input_numel();
    if (x.shape.size() == 2 && x.shape[1] == in) return x;
    if (x.size() == in) return reshape(x, {1, in});
    throw ShapeError("detector: input " + shape_str(x.shape) + " does not map to [n," +
                     std::to_string(in) + "]");
}

Tensor Detector::features(const Tensor& rows, std::span<const Tensor> bb) const {
    return relu(backbone.forward(rows, bb));
}

Tensor Detector::logits(const Tensor& x, std::span<const Tensor> bb,
                        std::span<const Tensor> hd) const {
    Tensor rows = preprocess(as_rows(x), pre);
    return head.forward(features(rows, bb), hd);
}

Tensor Detector::logits(const Tensor& x) const {
    return logits(x, backbone.params, head.params);
}

Prediction predict(const Detector& d, const Tensor& x) {
    const double s = d.logits(x).data[0];
    return Prediction{s, sigmoid_value(s)};
}

void validate_labeled_set(const LabeledSet& s, const char* what) {
    if (s.labels.empty()) throw DomainError(std::string(what) + ": empty labeled set");
    if (s.images.shape.size() != 2 || s.images.shape[0] != s.labels.size() ||
        s.provenance.size() != s.labels.size()) {
        throw ShapeError(std::string(what) + ": images " + shape_str(s.images.shape) +
                         " inconsistent with " + std::to_string(s.labels.size()) + " labels");
    }
    for (std::size_t i = 0; i < s.labels.size(); ++i) {
        const double y = s.labels[i];
        if (y != 0.0 && y != 1.0) {
            throw DomainError(std::string(what) + ": label must be 0 or 1");
        }
        const bool is_real = s.provenance[i] == "real";
        if (is_real != (y == 0.0)) {
            throw DomainError(std::string(what) + ": provenance '" + s.provenance[i] +
                              "' inconsistent with label " + std::to_string(int(y)));
        }
    }
}

LabeledSet merge_sets(const LabeledSet& a, const LabeledSet& b) {
    if (a.images.shape[1] != b.images.shape[1]) {
        throw ShapeError("merge_sets: row widths differ");
    }
    LabeledSet out;
    std::vector<double> data = a.images.data;
    data.insert(data.end(), b.images.data.begin(), b.images.data.end());
    out.images = Tensor({a.size() + b.size(), a.images.shape[1]}, std::move(data));
    out.labels = a.labels;
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    out.provenance = a.provenance;
    out.provenance.insert(out.provenance.end(), b.provenance.begin(), b.provenance.end());
    return out;
}

namespace {

Tensor gather_rows(const Tensor& rows, std::span<const std::size_t> idx) {
    const std::size_t w = rows.shape[1];
    std::vector<double> d(idx.size() * w);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy_n(&rows.data[idx[i] * w], w, &d[i * w]);
    }
    return Tensor({idx.size(), w}, std::move(d));
}

double batch_accuracy(const Tensor& logits_col, std::span<const double> labels) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double pred = logits_col.data[i] >= 0.0 ? 1.0 : 0.0;
        if (pred == labels[i]) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

} // namespace

DetectorTrainResult train_detector(const LabeledSet& real, const LabeledSet& fake,
                                   const DetectorTrainConfig& cfg) {
    validate_labeled_set(real, "train_detector(real)");
    validate_labeled_set(fake, "train_detector(fake)");
    LabeledSet all = merge_sets(real, fake);

    Rng init_rng(seed_for(cfg.seed, "detector/init"));
    Detector det = Detector::init(cfg.arch, all.images.shape[1], cfg.backbone_hidden,
                                  cfg.feat_dim, init_rng);
    det.pre = cfg.pre;

    // Deterministic 90/10 split by index hash.
    const std::uint64_t split_salt = seed_for(cfg.seed, "detector/split");
    std::vector<std::size_t> train_idx, val_idx;
    for (std::size_t i = 0; i < all.size(); ++i) {
        (mix64(split_salt ^ i) % 10 == 0 ? val_idx : train_idx).push_back(i);
    }
    if (train_idx.empty()) throw DomainError("train_detector: empty training split");

    const bool train_backbone = cfg.arch == Arch::PlainMlp;
    Optimizer opt = Optimizer::adamw(cfg.lr, cfg.weight_decay);
    Rng rng(seed_for(cfg.seed, "detector/train"));
    std::vector<EpochStats> history;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(train_idx);
        double loss_sum = 0.0, acc_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t off = 0; off < train_idx.size(); off += cfg.batch_size) {
            const std::size_t take = std::min(cfg.batch_size, train_idx.size() - off);
            std::vector<std::size_t> idx(train_idx.begin() + off,
                                         train_idx.begin() + off + take);
            Tensor x = gather_rows(all.images, idx);
            std::vector<double> yv(take);
            for (std::size_t i = 0; i < take; ++i) yv[i] = all.labels[idx[i]];
            Tensor y({take}, yv);

            Tape tape;
            std::vector<Tensor> trainables;
            trainables.insert(trainables.end(), det.head.params.begin(),
                              det.head.params.end());
            if (train_backbone) {
                trainables.insert(trainables.end(), det.backbone.params.begin(),
                                  det.backbone.params.end());
            }
            std::vector<Tensor> bound = bind_params(tape, trainables);
            std::span<const Tensor> hd(bound.data(), det.head.params.size());
            std::span<const Tensor> bb =
                train_backbone ? std::span<const Tensor>(bound.data() + det.head.params.size(),
                                                         det.backbone.params.size())
                               : std::span<const Tensor>(det.backbone.params);

            Tensor s = reshape(det.logits(x, bb, hd), {take});
            Tensor loss = mean(bce_with_logits_elems(s, y));
            const double lv = loss.item();
            if (!std::isfinite(lv)) {
                throw NumericError("train_detector: non-finite loss at epoch " +
                                   std::to_string(epoch) + " batch " +
                                   std::to_string(batches));
            }
            loss_sum += lv;
            acc_sum += batch_accuracy(s, yv);
            ++batches;

            GradMap grads = tape.backward(loss);
            opt.step(trainables, bound, grads);
            std::copy_n(trainables.begin(), det.head.params.size(),
                        det.head.params.begin());
            if (train_backbone) {
                std::copy(trainables.begin() +
                              static_cast<std::ptrdiff_t>(det.head.params.size()),
                          trainables.end(), det.backbone.params.begin());
            }
        }

        double val_acc = 0.0;
        if (!val_idx.empty()) {
            Tensor vx = gather_rows(all.images, val_idx);
            Tensor vs = det.logits(vx);
            std::vector<double> vy(val_idx.size());
            for (std::size_t i = 0; i < val_idx.size(); ++i) vy[i] = all.labels[val_idx[i]];
            val_acc = batch_accuracy(vs, vy);
        }
        history.push_back(EpochStats{loss_sum / static_cast<double>(batches),
                                     acc_sum / static_cast<double>(batches), val_acc});
    }
    return DetectorTrainResult{std::move(det), std::move(history)};
}

double accuracy(const Detector& d, const LabeledSet& s) {
    validate_labeled_set(s, "accuracy");
    Tensor logits_col = d.logits(s.images);
    return batch_accuracy(logits_col, s.labels);
}

EvalReport evaluate(const Detector& d, const std::map<std::string, LabeledSet>& sets) {
    EvalReport rep;
    for (const auto& [name, set] : sets) {
        validate_labeled_set(set, "evaluate");
        Tensor s = d.logits(set.images);
        SetMetrics m;
        m.n = set.size();
        std::size_t hit = 0, hit_fake = 0, hit_real = 0;
        for (std::size_t i = 0; i < set.size(); ++i) {
            const bool pred_fake = s.data[i] >= 0.0;
            const bool is_fake = set.labels[i] == 1.0;
            if (is_fake) {
                ++m.n_fake;
                if (pred_fake) ++hit_fake;
            } else {
                ++m.n_real;
                if (!pred_fake) ++hit_real;
            }
            if (pred_fake == is_fake) ++hit;
        }
        m.acc = static_cast<double>(hit) / static_cast<double>(m.n);
        if (m.n_fake > 0) {
            m.fake_acc = static_cast<double>(hit_fake) / static_cast<double>(m.n_fake);
        }
        if (m.n_real > 0) {
            m.real_acc = static_cast<double>(hit_real) / static_cast<double>(m.n_real);
        }
        rep.per_set.emplace(name, m);
    }
    if (!rep.per_set.empty()) {
        double acc_sum = 0.0;
        for (const auto& [name, m] : rep.per_set) acc_sum += m.acc;
        rep.avg_acc = acc_sum / static_cast<double>(rep.per_set.size());
    }
    return rep;
}

} // namespace omat::detector
