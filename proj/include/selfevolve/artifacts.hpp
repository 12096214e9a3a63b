#pragma once

// Run directories, manifests, the metrics log, the PRM command and reports.
//
// Run directory layout (names are stable):
//   config.ini          resolved config snapshot
//   manifest.json       RunManifest
//   metrics.jsonl       one DynamicsRecord per line, iteration 0 first
//   ckpt_iter_<t>       policy checkpoint after iteration t (0 = after warmup)
//   completer.ckpt      policy that completes prefixes for PRM labels
//   prm.ckpt            reward model used by the run
//   .lock               present while a run is writing the directory
//
// Report outputs:
//   table_ablation.csv  one row per run: preset, run id, seed, final iteration,
//                       final greedy accuracy, Pass@16 at T=1.00, Reward-Pass@2
//                       at T=1.00
//   plot_greedy.svg  plot_passk.svg  plot_rp2.svg  plot_temperature.svg
//
// PRM command outputs:
//   prm_dataset.jsonl, prm_heldout.jsonl, prm_instances.jsonl, prm.ckpt,
//   prm_report.json

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "selfevolve/dynamics.hpp"
#include "selfevolve/run_config.hpp"

namespace selfevolve {

// Default output root when --out is absent.
inline constexpr const char* kOutputRootEnv = "SELFEVOLVE_OUT";

std::filesystem::path default_output_root();

struct RunPaths {
    std::filesystem::path dir;

    std::filesystem::path config() const { return dir / "config.ini"; }
    std::filesystem::path manifest() const { return dir / "manifest.json"; }
    std::filesystem::path metrics() const { return dir / "metrics.jsonl"; }
    std::filesystem::path checkpoint(std::uint64_t t) const { return dir / ("ckpt_iter_" + std::to_string(t)); }
    std::filesystem::path prm() const { return dir / "prm.ckpt"; }
    std::filesystem::path completer() const { return dir / "completer.ckpt"; }
    std::filesystem::path lock() const { return dir / ".lock"; }
};

// Exclusive lock on a run directory, released on destruction. Throws
// std::runtime_error when another run holds it.
class RunLock {
public:
    explicit RunLock(std::filesystem::path path);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::filesystem::path path_;
};

struct RunManifest {
    std::string run_id;
    std::string preset;
    std::uint64_t seed = 0;
    std::string config_snapshot;
    std::string started_at;
    std::string finished_at;
    std::uint64_t iterations = 0;
    std::map<std::string, std::string> artifacts;  // name -> path relative to the run directory
    std::vector<std::string> warnings;
};

nlohmann::json to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);
RunManifest read_manifest(const std::filesystem::path& run_dir);

// Hex id derived from the config snapshot and the seed.
std::string run_id(std::string_view config_snapshot, std::uint64_t seed);

// Resolves the config, runs it into `out_dir` and returns the manifest.
// Throws ConfigValidationError before touching the directory.
RunManifest execute_run(std::string_view config_text, std::string_view preset_override, std::uint64_t seed,
                        const std::filesystem::path& out_dir);

// Throws SchemaMismatch with a migration hint for another schema version.
std::vector<DynamicsRecord> read_metrics(const std::filesystem::path& path);

struct PrmCommandResult {
    std::size_t train_rows = 0;
    std::size_t heldout_rows = 0;
    double heldout_mse = 0.0;
    std::vector<std::string> warnings;
};

// Builds the PRM dataset from `completer` rollouts on the train split, fits
// the PRM and scores it on a dataset built from the validation split. Throws
// std::runtime_error naming the expected path when the completer is missing.
PrmCommandResult execute_prm(std::string_view config_text, std::string_view preset_override, std::uint64_t seed,
                             const std::filesystem::path& completer, const std::filesystem::path& out_dir);

struct ReportRun {
    std::string label;  // preset, or the directory name
    RunManifest manifest;
    std::vector<DynamicsRecord> records;
};

ReportRun load_report_run(const std::filesystem::path& run_dir);

std::string ablation_table_csv(const std::vector<ReportRun>& runs);

enum class PlotKind { Greedy, PassK, RewardPass2, Temperature };
std::string render_plot(const std::vector<ReportRun>& runs, PlotKind kind);

// Writes the table and the four plots into out_dir; returns their paths.
std::vector<std::filesystem::path> write_report(const std::vector<std::filesystem::path>& run_dirs,
                                                const std::filesystem::path& out_dir);

struct SweepRow {
    std::string preset;
    std::size_t seeds = 0;
    double median_greedy = 0.0;
    double median_pass16 = 0.0;
};

double median(std::vector<double> v);

// Runs every (preset, seed) under out_dir/<preset>/seed_<s>, then writes
// sweep_median.csv and a report over all runs.
std::vector<SweepRow> execute_sweep(std::string_view config_text, const std::vector<std::string>& presets,
                                    const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out_dir);

std::string sweep_table_csv(const std::vector<SweepRow>& rows);

}  // namespace selfevolve
