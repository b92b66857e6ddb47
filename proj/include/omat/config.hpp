#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "omat/attacks.hpp"
#include "omat/detector.hpp"
#include "omat/diffusion.hpp"
#include "omat/finetune.hpp"

namespace omat::harness {

// Raw sectioned key=value config: '#'/';' full-line comments, [section]
// headers, one key = value per line. Section and key order are irrelevant;
// duplicates are errors.
using RawConfig = std::map<std::string, std::map<std::string, std::string>>;

RawConfig parse_config_text(const std::string& text);
RawConfig load_config_file(const std::filesystem::path& path);

// Stable hash of the canonicalized config: sections and keys sorted, values
// as written (trimmed). run.out_dir and run.threads are execution details
// and excluded, so relocating outputs or changing worker count never
// invalidates artifacts. Seed overrides are applied before hashing.
std::string config_digest(const RawConfig& raw);

// CLI/env overrides folded into the raw config before digesting.
struct ConfigOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<std::size_t> threads;
};

// Fully typed study configuration. Every sub-seed is derived on demand from
// master_seed via seed_for(master, label); the seed fields inside the nested
// module configs are ignored here and filled per stage.
struct ExperimentConfig {
    std::uint64_t master_seed = 42;
    std::string out_dir = "out";
    std::size_t threads = 1;

    // [data]
    diffusion::ToyDatasetSpec data;
    std::size_t train_per_class = 40;
    std::size_t eval_per_class = 12;

    // [zoo]
    diffusion::ZooTrainConfig zoo;

    // [detector]
    detector::DetectorTrainConfig det;

    // [attack] — shared template for probe, harvest, and re-attack
    attacks::LatentAttackConfig attack;
    std::size_t probe_seeds = 200;
    std::size_t probe_class = 0;
    std::uint64_t probe_seed_base = 2000000;

    // [harvest]
    std::size_t harvest_per_class = 6;
    std::size_t budget_factor = 50;
    // Mining overrides; each defaults to its [attack] counterpart. Stricter
    // taus keep only deep boundary crossings — far more informative for
    // fine-tuning than barely-over-the-line endpoints — and reaching that
    // depth usually needs a larger step budget than a probe does. Multiple
    // taus split per_class evenly into a ladder of depths, each bucket mined
    // from its own disjoint seed range.
    std::vector<double> harvest_taus{0.5};
    std::size_t harvest_max_steps = 100;
    double harvest_lr = 1e-3;

    // [reattack]
    std::size_t reattack_max_steps = 100;
    std::size_t reattack_seeds_per_class = 20;
    std::uint64_t reattack_seed_base = 1000000;

    // [omat] + [sweep]; sweep rows clone the omat config with the strategy
    // (and rank) replaced. The primary strategy is appended if absent.
    finetune::OmatConfig omat;
    std::vector<finetune::OmatConfig> sweep;

    // [pixel] — ablation grid, defaults to the standard nine-variant grid.
    std::vector<attacks::PixelAttackConfig> pixel_grid;

    std::string digest; // canonical config digest, 16 hex chars
};

// Strict conversion: unknown sections or keys, malformed values, and
// out-of-domain settings all raise ConfigError.
ExperimentConfig make_experiment_config(RawConfig raw, const ConfigOverrides& ov = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const ConfigOverrides& ov = {});

// "lora(4)" -> "lora4": row names made filename-safe.
std::string file_token(const std::string& row_name);

} // namespace omat::harness
