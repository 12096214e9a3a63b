// selfevolve: run, prm, report and sweep commands.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "selfevolve/artifacts.hpp"
#include "selfevolve/errors.hpp"
#include "selfevolve/run_config.hpp"

namespace fs = std::filesystem;
using namespace selfevolve;

namespace {

std::string load_config_text(const std::string& path) {
    if (path.empty()) {
        std::string text;
        for (const char* s : kConfigSections) text += "[" + std::string(s) + "]\n";
        return text;
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read config " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path out_or_default(const std::string& out, const std::string& leaf) {
    return out.empty() ? default_output_root() / leaf : fs::path(out);
}

std::string run_leaf(const std::string& preset, std::uint64_t seed) {
    return (preset.empty() ? std::string("run") : preset) + "_s" + std::to_string(seed);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Self-evolving training laboratory on a synthetic grid-reasoning task"};
    app.require_subcommand(1);

    std::string config, preset, out, completer, presets;
    std::uint64_t seed = 0;
    std::size_t n_seeds = 5;
    std::vector<std::string> run_dirs;

    auto* run = app.add_subcommand("run", "Execute one run and write its artifacts");
    run->add_option("--config", config, "INI config (all sections required)");
    run->add_option("--seed", seed, "Run seed");
    run->add_option("--preset", preset, "Preset name; wins over the config's preset key");
    run->add_option("--out", out, "Run directory (default $SELFEVOLVE_OUT/<preset>_s<seed>)");

    auto* prm = app.add_subcommand("prm", "Build the PRM dataset from a completer checkpoint and fit the PRM");
    prm->add_option("--config", config, "INI config");
    prm->add_option("--seed", seed, "Seed for splits, rollouts and training");
    prm->add_option("--preset", preset, "Preset name");
    prm->add_option("--completer", completer, "Completer policy checkpoint (default <out>/completer.ckpt)");
    prm->add_option("--out", out, "Output directory (default $SELFEVOLVE_OUT/prm_s<seed>)");

    auto* report = app.add_subcommand("report", "Ablation table and trend plots from run directories");
    report->add_option("runs", run_dirs, "Run directories")->required();
    report->add_option("--out", out, "Report directory (default: the run directory for one run)");

    auto* sweep = app.add_subcommand("sweep", "Multi-seed driver emitting median tables");
    sweep->add_option("--config", config, "INI config");
    sweep->add_option("--seed", seed, "First seed");
    sweep->add_option("--seeds", n_seeds, "Number of consecutive seeds")->check(CLI::PositiveNumber);
    sweep->add_option("--preset", presets, "Comma-separated preset names")->required();
    sweep->add_option("--out", out, "Sweep directory (default $SELFEVOLVE_OUT/sweep)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) {
            const std::string text = load_config_text(config);
            const RunConfig resolved = resolve_run_config(text, preset);
            const fs::path dir = out_or_default(out, run_leaf(resolved.preset, seed));
            const RunManifest m = execute_run(text, preset, seed, dir);
            for (const auto& w : m.warnings) std::cerr << "warning: " << w << "\n";
            const auto recs = read_metrics(RunPaths{dir}.metrics());
            std::printf("run %s preset=%s seed=%llu iterations=%llu greedy=%.4f\n", m.run_id.c_str(),
                        m.preset.empty() ? "-" : m.preset.c_str(), static_cast<unsigned long long>(seed),
                        static_cast<unsigned long long>(m.iterations), recs.back().greedy_accuracy);
            std::printf("artifacts in %s\n", dir.string().c_str());
        } else if (*prm) {
            const fs::path dir = out_or_default(out, "prm_s" + std::to_string(seed));
            const fs::path ck = completer.empty() ? dir / "completer.ckpt" : fs::path(completer);
            const PrmCommandResult r = execute_prm(load_config_text(config), preset, seed, ck, dir);
            for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
            std::printf("prm train_rows=%zu heldout_rows=%zu heldout_mse=%s\n", r.train_rows, r.heldout_rows,
                        std::isnan(r.heldout_mse) ? "n/a" : std::to_string(r.heldout_mse).c_str());
            std::printf("artifacts in %s\n", dir.string().c_str());
        } else if (*report) {
            std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
            fs::path dir = out.empty() ? (dirs.size() == 1 ? dirs[0] : default_output_root() / "report") : fs::path(out);
            for (const auto& p : write_report(dirs, dir)) std::printf("%s\n", p.string().c_str());
        } else if (*sweep) {
            std::vector<std::uint64_t> seeds;
            for (std::size_t i = 0; i < n_seeds; ++i) seeds.push_back(seed + i);
            const auto rows = execute_sweep(load_config_text(config), split_list(presets), seeds,
                                            out_or_default(out, "sweep"));
            std::fputs(sweep_table_csv(rows).c_str(), stdout);
        }
    } catch (const ConfigValidationError& e) {
        std::cerr << "config error:\n";
        for (const auto& i : e.issues()) std::cerr << "  " << i.key << ": " << i.message << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
