#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "omat/config.hpp"

namespace omat::harness {

// One study directory. Every stage reads the config, consumes upstream
// artifacts (validated against manifest.json digests), writes its outputs,
// and records them back into the manifest. Stage wall time goes to
// run_meta.json, which is the only non-deterministic file in the directory.
struct Ctx {
    ExperimentConfig cfg;
    std::filesystem::path out;
};

// Registers `files` (just written) under `stage` in manifest.json along with
// their digests. gen-data passes reset=true and starts a fresh manifest; any
// other stage run against a manifest from a different config digest fails
// with ArtifactError.
void note_outputs(const Ctx& ctx, const std::string& stage,
                  std::span<const std::string> files, const std::string& summary,
                  bool reset = false);

// Verifies that each file exists, was recorded in the manifest under this
// config digest, and still hashes to its recorded digest. Throws
// ArtifactError ("upstream artifact mismatch") otherwise.
void require_inputs(const Ctx& ctx, const std::string& consumer,
                    std::span<const std::string> files);

// Individual stages; each returns its one-line summary.
std::string stage_gen_data(const Ctx& ctx);
std::string stage_train_gen(const Ctx& ctx);
std::string stage_build_zoo(const Ctx& ctx);
std::string stage_train_det(const Ctx& ctx);
std::string stage_attack(const Ctx& ctx);
std::string stage_harvest(const Ctx& ctx);
std::string stage_omat(const Ctx& ctx);
std::string stage_reattack(const Ctx& ctx);
std::string stage_eval(const Ctx& ctx);
std::string stage_ablate_pixel(const Ctx& ctx);
std::string stage_export_latents(const Ctx& ctx);
std::string stage_report(const Ctx& ctx);

const std::vector<std::string>& stage_names(); // canonical study order

// Dispatch by name; also appends the stage's wall time to run_meta.json.
std::string run_stage(const Ctx& ctx, const std::string& name);

// Final report assembled from the analysis artifacts.
struct Table1Row {
    std::string name;                       // detector row
    std::map<std::string, double> acc;      // per eval set
    double avg_unseen = 0.0;                // mean acc over fake:unseen_* sets
    double avg_all = 0.0;                   // mean acc over all sets
};

struct Table6Row {
    std::string name;
    std::size_t n = 0;
    std::size_t n_success = 0;
    double success_rate = 0.0;
    std::optional<double> avg_steps;        // null when no successes
};

struct Table5Row {
    std::string name;                       // baseline | latent | fgsm(...) | ...
    double avg_unseen = 0.0;
    double avg_all = 0.0;
    std::optional<std::size_t> best_epoch;  // null for baseline
};

struct HistogramBin {
    std::size_t lo = 0, hi = 0;             // [lo, hi) in optimization steps
    std::size_t count = 0;
};

struct RunReport {
    std::string experiment_id;
    std::string config_digest;
    std::vector<std::string> table1_columns;
    std::vector<Table1Row> table1;
    std::vector<Table6Row> table6;
    std::vector<Table5Row> table5;
    std::vector<HistogramBin> histogram;    // successful probe attempts by step count
};

RunReport build_report(const Ctx& ctx);

} // namespace omat::harness
