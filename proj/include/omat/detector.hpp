#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "omat/mlp.hpp"
#include "omat/rng.hpp"
#include "omat/tensor.hpp"

namespace omat::detector {

struct PreprocessSpec {
    int levels = 255;
    double mean = 0.5;
    double std = 0.5;
};

// Differentiable preprocessing chain on images in [-1, 1]:
//   x*0.5 + 0.5 -> clamp01 -> round_straight_through(levels) -> (y - mean)/std
// The quantizer backward is identity, so the interior gradient is 0.5/std.
Tensor preprocess(const Tensor& x, const PreprocessSpec& spec);

enum class Arch { FrozenHead, PlainMlp };

const char* arch_name(Arch a);
Arch arch_from_name(const std::string& name);

// Binary real/fake classifier: feature backbone + linear head over the
// preprocessed image. FrozenHead keeps the randomly initialized backbone
// fixed during standard training (only the head learns); PlainMlp trains
// everything.
struct Detector {
    std::string id = "detector";
    Arch arch = Arch::FrozenHead;
    PreprocessSpec pre;
    Mlp backbone; // input -> hidden... -> feat; relu applied to its output
    Mlp head;     // feat -> 1

    static Detector init(Arch arch, std::size_t input_numel,
                         const std::vector<std::size_t>& backbone_hidden,
                         std::size_t feat_dim, Rng& rng);

    std::size_t input_numel() const { return backbone.dims.front(); }
    std::size_t feat_dim() const { return backbone.dims.back(); }

    // Accepts a [n, input_numel] batch or a single image whose numel matches.
    Tensor as_rows(const Tensor& x) const;

    Tensor features(const Tensor& rows, std::span<const Tensor> bb) const;
    Tensor logits(const Tensor& x, std::span<const Tensor> bb,
                  std::span<const Tensor> hd) const;
    Tensor logits(const Tensor& x) const;
};

struct Prediction {
    double logit;
    double probability;
};
Prediction predict(const Detector& d, const Tensor& x);

// labels: 0 = real, 1 = fake; provenance "real" | "fake:<generator_id>" | "adv".
struct LabeledSet {
    Tensor images; // [n, numel] rows in [-1, 1]
    std::vector<double> labels;
    std::vector<std::string> provenance;

    std::size_t size() const { return labels.size(); }
};

void validate_labeled_set(const LabeledSet& s, const char* what);
LabeledSet merge_sets(const LabeledSet& a, const LabeledSet& b);

struct DetectorTrainConfig {
    Arch arch = Arch::FrozenHead;
    std::vector<std::size_t> backbone_hidden{96};
    std::size_t feat_dim = 64;
    PreprocessSpec pre;
    std::size_t epochs = 6;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
};

struct EpochStats {
    double train_loss;
    double train_acc;
    double val_acc;
};

struct DetectorTrainResult {
    Detector det;
    std::vector<EpochStats> history;
};

// Standard BCE training over shuffled mixed real/fake batches with AdamW.
// Deterministic 90/10 train/val split by index hash. Returns the final-epoch
// detector (checkpoint selection belongs to the fine-tuning module).
DetectorTrainResult train_detector(const LabeledSet& real, const LabeledSet& fake,
                                   const DetectorTrainConfig& cfg);

// Batch accuracy at threshold 0.5 (logit >= 0 predicts fake).
double accuracy(const Detector& d, const LabeledSet& s);

struct SetMetrics {
    double acc = 0.0;
    std::optional<double> fake_acc; // null when the set has no fakes
    std::optional<double> real_acc; // null when the set has no reals
    std::size_t n = 0, n_fake = 0, n_real = 0;
};

struct EvalReport {
    std::map<std::string, SetMetrics> per_set;
    double avg_acc = 0.0; // mean of per-set overall accuracy
};

EvalReport evaluate(const Detector& d, const std::map<std::string, LabeledSet>& sets);

} // namespace omat::detector
