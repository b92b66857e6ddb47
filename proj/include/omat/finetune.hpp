#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "omat/detector.hpp"
#include "omat/tensor.hpp"

namespace omat::finetune {

// Epoch-dependent weight on adversarial samples; epochs are 1-based so the
// first epoch lands on 1.2 and the cap engages at epoch 10.
double lambda_adv(std::size_t epoch);
double lambda_adv(std::size_t epoch, double base, double slope, double cap);

// Combined checkpoint selection score, 0.6*val + 0.4*adv by default.
double checkpoint_score(double val_acc, double adv_acc);
double checkpoint_score(double val_acc, double adv_acc, double w_val, double w_adv);

enum class Strategy { Full, HeadOnly, Lora };

const char* strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);

struct LoraAdapter {
    std::size_t layer = 0; // backbone layer index (weight = backbone param 2*layer)
    std::size_t rank = 0;
    double alpha = 0.0; // fixed at 2*rank
    double dropout = 0.1;
    Tensor A; // [in, rank], small random at init (down-projection)
    Tensor B; // [rank, out], zeros at init (up-projection)
};

// Frozen base detector plus low-rank adapters on selected backbone layers.
// Eval-mode forward folds each adapter into its layer's effective weight
// W + (alpha/r) * A*B; dropout on the adapter input path only exists during
// training.
struct AdaptedDetector {
    detector::Detector base;
    std::vector<LoraAdapter> adapters;

    Tensor logits_eval(const Tensor& x) const;
    // Eval-mode forward through the explicit adapter branches (no merge, no
    // dropout); agrees with merged().logits to rounding.
    Tensor logits_branched(const Tensor& x) const;
    detector::Detector merged() const; // bake adapters into plain weights
};

AdaptedDetector apply_lora(const detector::Detector& d,
                           std::span<const std::size_t> target_layers, std::size_t rank,
                           double dropout, std::uint64_t seed);

// Adapter (A and B) element count plus head parameters: r*(in+out) per target
// layer + head weight/bias sizes.
std::size_t lora_trainable_count(const AdaptedDetector& ad);

struct OmatConfig {
    Strategy strategy = Strategy::Lora;
    std::size_t lora_rank = 4;
    std::vector<std::size_t> lora_targets; // empty = every backbone layer
    double lora_dropout = 0.1;
    std::size_t epochs = 20;
    double weight_decay = 1e-4;
    double learning_rate = 0.0; // <= 0 picks the strategy default (1e-4 / 2e-4 lora)
    std::size_t batch_size = 0; // 0 picks the strategy default (128 / 32 lora)
    double lambda_base = 1.0;
    double lambda_slope = 0.2;
    double lambda_cap = 3.0;
    double w_val = 0.6;
    double w_adv = 0.4;
    std::uint64_t seed = 0;
};

double resolved_lr(const OmatConfig& cfg);
std::size_t resolved_batch(const OmatConfig& cfg);

struct OmatEpoch {
    std::size_t epoch = 0; // 1-based
    double lambda = 0.0;
    double train_loss = 0.0;
    double val_acc = 0.0;
    double adv_acc = 0.0;
    double score = 0.0;
};

struct OmatResult {
    detector::Detector det; // best-scoring checkpoint (adapters merged for lora)
    std::vector<OmatEpoch> history;
    std::size_t best_epoch = 0;        // 1-based
    std::vector<LoraAdapter> adapters; // best-epoch adapter state (lora only)
    // Best-epoch model before any adapter merge: head_only and lora keep its
    // backbone bit-identical to the input detector's.
    detector::Detector raw;
};

// Fine-tunes `base` on standard batches interleaved 1:1 with adversarial
// batches (until X_adv is exhausted each epoch); adversarial samples carry
// weight lambda_adv(epoch). Picks the checkpoint with the best combined
// score. x_adv must be all-fake with provenance "adv" (or empty, which
// degenerates to continued standard training).
OmatResult omat_train(const detector::Detector& base, const detector::LabeledSet& std_set,
                      const detector::LabeledSet& x_adv, const OmatConfig& cfg);

struct SweepRow {
    std::string name; // "base", "full", "head_only", "lora(4)", ...
    std::map<std::string, double> acc;
    double avg = 0.0;
    std::map<std::string, double> delta; // vs base, per set
    double delta_avg = 0.0;
    std::size_t best_epoch = 0; // 0 for the base row
};

struct SweepReport {
    std::vector<SweepRow> rows; // rows[0] is always the base detector
};

std::string sweep_row_name(const OmatConfig& cfg);

// Runs omat_train once per strategy over shared data/seed and tabulates
// per-set accuracy plus deltas against the base detector.
SweepReport strategy_sweep(const detector::Detector& base, const detector::LabeledSet& std_set,
                           const detector::LabeledSet& x_adv,
                           std::span<const OmatConfig> strategies,
                           const std::map<std::string, detector::LabeledSet>& eval_sets);

} // namespace omat::finetune
