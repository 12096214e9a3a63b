#include "selfevolve/artifacts.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <limits>
#include <sstream>

#include "selfevolve/checkpoint.hpp"
#include "selfevolve/errors.hpp"
#include "selfevolve/experiment.hpp"
#include "selfevolve/rng.hpp"

namespace selfevolve {

namespace fs = std::filesystem;

namespace {

std::string utc_now() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, std::string_view text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw std::runtime_error("short write to " + path.string());
}

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string xml_escape(std::string_view s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string csv_field(std::string_view s) {
    if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

void remove_old_checkpoints(const fs::path& dir) {
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().filename().string().rfind("ckpt_iter_", 0) == 0) fs::remove(e.path());
    }
}

// Pass@16 (or Reward-Pass@2) at T=1.00, NaN if not logged.
double final_metric(const DynamicsRecord& r, bool reward) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (reward) {
        auto it = r.reward_pass_at_2.find(1.0);
        return it == r.reward_pass_at_2.end() ? nan : it->second;
    }
    auto it = r.pass_at_k.find(1.0);
    if (it == r.pass_at_k.end()) return nan;
    auto k = it->second.find(16);
    return k == it->second.end() ? nan : k->second;
}

std::string optional_cell(double v) { return std::isnan(v) ? "" : fixed(v, 4); }

}  // namespace

fs::path default_output_root() {
    if (const char* env = std::getenv(kOutputRootEnv); env != nullptr && *env != '\0') return env;
    return "runs";
}

RunLock::RunLock(fs::path path) : path_(std::move(path)) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) throw std::runtime_error("run directory is locked by another run (" + path_.string() + ")");
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
}

RunLock::~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

nlohmann::json to_json(const RunManifest& m) {
    nlohmann::json j;
    j["run_id"] = m.run_id;
    j["preset"] = m.preset;
    j["seed"] = m.seed;
    j["config_snapshot"] = m.config_snapshot;
    j["started_at"] = m.started_at;
    j["finished_at"] = m.finished_at;
    j["iterations"] = m.iterations;
    j["artifacts"] = m.artifacts;
    j["warnings"] = m.warnings;
    return j;
}

RunManifest manifest_from_json(const nlohmann::json& j) {
    RunManifest m;
    m.run_id = j.at("run_id").get<std::string>();
    m.preset = j.at("preset").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config_snapshot = j.at("config_snapshot").get<std::string>();
    m.started_at = j.at("started_at").get<std::string>();
    m.finished_at = j.at("finished_at").get<std::string>();
    m.iterations = j.at("iterations").get<std::uint64_t>();
    m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    m.warnings = j.at("warnings").get<std::vector<std::string>>();
    return m;
}

RunManifest read_manifest(const fs::path& run_dir) {
    return manifest_from_json(nlohmann::json::parse(read_text(RunPaths{run_dir}.manifest())));
}

std::string run_id(std::string_view config_snapshot, std::uint64_t seed) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(config_snapshot.data());
    const std::uint64_t h = derive_seed(fnv1a({p, config_snapshot.size()}), {seed});
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

RunManifest execute_run(std::string_view config_text, std::string_view preset_override, std::uint64_t seed,
                        const fs::path& out_dir) {
    const RunConfig cfg = resolve_run_config(config_text, preset_override);
    RunManifest m;
    m.config_snapshot = serialize_run_config(cfg);
    m.run_id = run_id(m.config_snapshot, seed);
    m.preset = cfg.preset;
    m.seed = seed;

    fs::create_directories(out_dir);
    const RunPaths paths{out_dir};
    RunLock lock(paths.lock());
    remove_old_checkpoints(out_dir);
    m.started_at = utc_now();
    write_text(paths.config(), m.config_snapshot);
    m.artifacts["config"] = paths.config().filename().string();

    std::ofstream metrics(paths.metrics(), std::ios::binary | std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write " + paths.metrics().string());
    RunResult r = run_evolution(cfg, seed, [&](const EvolutionState& s) {
        metrics << to_json(s.history.back()).dump() << '\n';
        Checkpoint c;
        c.iteration = s.t;
        c.params = s.policy.params;
        c.optimizer = s.policy.optimizer;
        c.schedule = s.policy.schedule;
        c.rng_state = s.rng_state;
        const fs::path ck = paths.checkpoint(s.t);
        write_file(ck, save_checkpoint(c));
        m.artifacts[ck.filename().string()] = ck.filename().string();
    });
    metrics.close();
    if (!metrics) throw std::runtime_error("short write to " + paths.metrics().string());
    m.artifacts["metrics"] = paths.metrics().filename().string();

    Checkpoint completer;
    completer.params = r.completer;
    write_file(paths.completer(), save_checkpoint(completer));
    m.artifacts["completer"] = paths.completer().filename().string();
    write_file(paths.prm(), save_prm(r.prm.prm));
    m.artifacts["prm"] = paths.prm().filename().string();
    m.iterations = r.state.t;
    m.warnings = r.warnings;
    for (const auto& rec : r.state.history) {
        for (const auto& w : rec.warnings) m.warnings.push_back("iteration " + std::to_string(rec.iteration) + ": " + w);
    }
    m.artifacts["manifest"] = paths.manifest().filename().string();
    m.finished_at = utc_now();
    write_text(paths.manifest(), to_json(m).dump(2) + "\n");
    return m;
}

std::vector<DynamicsRecord> read_metrics(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::vector<DynamicsRecord> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": " + e.what());
        }
        try {
            out.push_back(record_from_json(j));
        } catch (const SchemaMismatch& e) {
            throw SchemaMismatch(path.string() + ":" + std::to_string(n) + ": " + e.what() +
                                 "; re-run with this version or convert the log to schema " + kMetricsSchema);
        }
    }
    return out;
}

PrmCommandResult execute_prm(std::string_view config_text, std::string_view preset_override, std::uint64_t seed,
                             const fs::path& completer, const fs::path& out_dir) {
    const RunConfig cfg = resolve_run_config(config_text, preset_override);
    if (!fs::exists(completer)) {
        throw std::runtime_error("completer checkpoint not found; expected " + completer.string() +
                                 " (a run directory holds it as completer.ckpt)");
    }
    const Checkpoint ck = load_checkpoint(read_file(completer));
    RunConfig data_cfg = cfg;
    data_cfg.evo.unlabeled.enabled = false;
    const Splits splits = make_splits(data_cfg, seed);

    // Same seed path as the PRM stage of `run`.
    const std::uint64_t prm_seed = derive_seed(seed, {6});
    PrmStageResult stage = run_prm_stage(ck.params, splits.train, cfg.prm, prm_seed);

    std::vector<QuestionRollouts> held;
    for (std::size_t q = 0; q < splits.validation.size(); ++q) {
        held.push_back({&splits.validation[q],
                        sample_responses(ck.params, splits.validation[q], cfg.prm.temperature, cfg.prm.rollouts,
                                         derive_seed(prm_seed, {0xE7, q}))});
    }
    PrmDatasetConfig hcfg = cfg.prm.dataset;
    hcfg.seed = derive_seed(prm_seed, {0xE8});
    const PrmDataset heldout = build_prm_dataset(ck.params, held, hcfg);

    PrmCommandResult res;
    res.train_rows = stage.dataset.rows.size();
    res.heldout_rows = heldout.rows.size();
    res.warnings = stage.dataset.warnings;
    res.warnings.insert(res.warnings.end(), heldout.warnings.begin(), heldout.warnings.end());
    if (heldout.rows.empty()) {
        res.heldout_mse = std::numeric_limits<double>::quiet_NaN();
        res.warnings.push_back("held-out PRM dataset is empty; no MSE reported");
    } else {
        res.heldout_mse = prm_mse(stage.prm, heldout.rows);
    }

    fs::create_directories(out_dir);
    RunLock lock(out_dir / ".lock");
    std::string rows;
    for (const auto& row : stage.dataset.rows) rows += to_json(row).dump() + "\n";
    write_text(out_dir / "prm_dataset.jsonl", rows);
    rows.clear();
    for (const auto& row : heldout.rows) rows += to_json(row).dump() + "\n";
    write_text(out_dir / "prm_heldout.jsonl", rows);
    std::string inst;
    for (const auto& i : splits.train) inst += to_json(i).dump() + "\n";
    for (const auto& i : splits.validation) inst += to_json(i).dump() + "\n";
    write_text(out_dir / "prm_instances.jsonl", inst);
    write_file(out_dir / "prm.ckpt", save_prm(stage.prm));

    nlohmann::json rep;
    rep["seed"] = seed;
    rep["completer"] = completer.string();
    rep["train_rows"] = res.train_rows;
    rep["heldout_rows"] = res.heldout_rows;
    rep["heldout_mse"] = std::isnan(res.heldout_mse) ? nlohmann::json(nullptr) : nlohmann::json(res.heldout_mse);
    std::size_t pos = 0;
    for (const auto& row : stage.dataset.rows) pos += row.correct ? 1 : 0;
    rep["train_correct"] = pos;
    rep["train_wrong"] = res.train_rows - pos;
    rep["warnings"] = res.warnings;
    write_text(out_dir / "prm_report.json", rep.dump(2) + "\n");
    return res;
}

ReportRun load_report_run(const fs::path& run_dir) {
    ReportRun r;
    const RunPaths paths{run_dir};
    if (fs::exists(paths.manifest())) r.manifest = read_manifest(run_dir);
    r.records = read_metrics(paths.metrics());
    if (r.records.empty()) throw std::runtime_error(paths.metrics().string() + " has no records");
    r.label = r.manifest.preset.empty() ? fs::path(run_dir).lexically_normal().filename().string() : r.manifest.preset;
    if (r.label.empty()) r.label = "run";
    return r;
}

std::string ablation_table_csv(const std::vector<ReportRun>& runs) {
    std::string out = "preset,run_id,seed,final_iteration,greedy_accuracy,pass_at_16_T1.00,reward_pass_at_2_T1.00\n";
    for (const auto& r : runs) {
        const DynamicsRecord& last = r.records.back();
        out += csv_field(r.label) + "," + csv_field(r.manifest.run_id) + "," + std::to_string(r.manifest.seed) + "," +
               std::to_string(last.iteration) + "," + fixed(last.greedy_accuracy, 4) + "," +
               optional_cell(final_metric(last, false)) + "," + optional_cell(final_metric(last, true)) + "\n";
    }
    return out;
}

namespace {

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;
};

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
constexpr const char* kDashes[] = {"", "6,3", "2,2", "8,3,2,3"};

std::string svg_chart(const std::string& title, const std::string& y_label, const std::vector<Series>& series,
                      double y_max) {
    constexpr double W = 760, H = 420, L = 60, R = 220, T = 40, B = 50;
    const double pw = W - L - R, ph = H - T - B;
    double x_min = 0, x_max = 1;
    bool any = false;
    for (const auto& s : series) {
        for (const auto& [x, y] : s.points) {
            if (!any) x_min = x_max = x;
            x_min = std::min(x_min, x);
            x_max = std::max(x_max, x);
            any = true;
        }
    }
    if (x_max <= x_min) x_max = x_min + 1;
    auto sx = [&](double x) { return L + (x - x_min) / (x_max - x_min) * pw; };
    auto sy = [&](double y) { return T + ph - std::clamp(y / y_max, 0.0, 1.0) * ph; };

    std::string o;
    o += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fixed(W, 0) + "\" height=\"" + fixed(H, 0) +
         "\" viewBox=\"0 0 " + fixed(W, 0) + " " + fixed(H, 0) + "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    o += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o += "<text x=\"" + fixed(L + pw / 2, 1) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" +
         xml_escape(title) + "</text>\n";
    for (int i = 0; i <= 5; ++i) {
        const double v = y_max * i / 5.0;
        const std::string y = fixed(sy(v), 1);
        o += "<line x1=\"" + fixed(L, 1) + "\" y1=\"" + y + "\" x2=\"" + fixed(L + pw, 1) + "\" y2=\"" + y +
             "\" stroke=\"#e0e0e0\"/>\n";
        o += "<text x=\"" + fixed(L - 6, 1) + "\" y=\"" + y + "\" text-anchor=\"end\" dominant-baseline=\"middle\">" +
             fixed(v, 2) + "</text>\n";
    }
    const auto span = static_cast<long>(std::llround(x_max - x_min));
    const long step = std::max(1L, (span + 9) / 10);
    for (long i = 0; i <= span; i += step) {
        const double x = x_min + static_cast<double>(i);
        o += "<text x=\"" + fixed(sx(x), 1) + "\" y=\"" + fixed(T + ph + 16, 1) + "\" text-anchor=\"middle\">" +
             std::to_string(static_cast<long>(x)) + "</text>\n";
    }
    o += "<rect x=\"" + fixed(L, 1) + "\" y=\"" + fixed(T, 1) + "\" width=\"" + fixed(pw, 1) + "\" height=\"" +
         fixed(ph, 1) + "\" fill=\"none\" stroke=\"black\"/>\n";
    o += "<text x=\"" + fixed(L + pw / 2, 1) + "\" y=\"" + fixed(H - 12, 1) + "\" text-anchor=\"middle\">iteration</text>\n";
    o += "<text transform=\"translate(16," + fixed(T + ph / 2, 1) + ") rotate(-90)\" text-anchor=\"middle\">" +
         xml_escape(y_label) + "</text>\n";

    for (std::size_t i = 0; i < series.size(); ++i) {
        const auto& s = series[i];
        const std::string color = kPalette[i % std::size(kPalette)];
        const std::string dash = kDashes[(i / std::size(kPalette)) % std::size(kDashes)];
        std::string pts;
        for (const auto& [x, y] : s.points) {
            if (!pts.empty()) pts += ' ';
            pts += fixed(sx(x), 1) + "," + fixed(sy(y), 1);
        }
        o += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"1.5\"";
        if (!dash.empty()) o += " stroke-dasharray=\"" + dash + "\"";
        o += " points=\"" + pts + "\"/>\n";
        for (const auto& [x, y] : s.points) {
            o += "<circle cx=\"" + fixed(sx(x), 1) + "\" cy=\"" + fixed(sy(y), 1) + "\" r=\"2\" fill=\"" + color +
                 "\"/>\n";
        }
        const double ly = T + 8 + 14.0 * static_cast<double>(i);
        o += "<line x1=\"" + fixed(L + pw + 10, 1) + "\" y1=\"" + fixed(ly, 1) + "\" x2=\"" + fixed(L + pw + 30, 1) +
             "\" y2=\"" + fixed(ly, 1) + "\" stroke=\"" + color + "\" stroke-width=\"1.5\"";
        if (!dash.empty()) o += " stroke-dasharray=\"" + dash + "\"";
        o += "/>\n<text x=\"" + fixed(L + pw + 34, 1) + "\" y=\"" + fixed(ly, 1) + "\" dominant-baseline=\"middle\">" +
             xml_escape(s.name) + "</text>\n";
    }
    o += "</svg>\n";
    return o;
}

std::string run_name(const ReportRun& r, std::size_t i, bool seeds_differ) {
    std::string n = r.label;
    if (seeds_differ || i > 0) n += " s" + std::to_string(r.manifest.seed);
    return n;
}

}  // namespace

std::string render_plot(const std::vector<ReportRun>& runs, PlotKind kind) {
    std::vector<Series> series;
    double y_max = 1.0;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        const ReportRun& r = runs[i];
        const std::string name = run_name(r, i, runs.size() > 1);
        switch (kind) {
            case PlotKind::Greedy: {
                Series s{name, {}};
                for (const auto& rec : r.records) s.points.emplace_back(double(rec.iteration), rec.greedy_accuracy);
                series.push_back(std::move(s));
                break;
            }
            case PlotKind::Temperature: {
                Series s{name, {}};
                for (const auto& rec : r.records) {
                    s.points.emplace_back(double(rec.iteration), rec.temperature);
                    y_max = std::max(y_max, std::ceil(rec.temperature * 2.0) / 2.0);
                }
                series.push_back(std::move(s));
                break;
            }
            case PlotKind::PassK:
            case PlotKind::RewardPass2: {
                std::map<double, Series> by_t;
                for (const auto& rec : r.records) {
                    if (kind == PlotKind::PassK) {
                        for (const auto& [t, ks] : rec.pass_at_k) {
                            auto it = ks.find(16);
                            if (it == ks.end()) continue;
                            by_t[t].points.emplace_back(double(rec.iteration), it->second);
                        }
                    } else {
                        for (const auto& [t, v] : rec.reward_pass_at_2) {
                            by_t[t].points.emplace_back(double(rec.iteration), v);
                        }
                    }
                }
                for (auto& [t, s] : by_t) {
                    s.name = name + " T=" + temperature_key(t);
                    series.push_back(std::move(s));
                }
                break;
            }
        }
    }
    switch (kind) {
        case PlotKind::Greedy: return svg_chart("Greedy accuracy", "accuracy", series, y_max);
        case PlotKind::PassK: return svg_chart("Pass@16 per temperature", "Pass@16", series, y_max);
        case PlotKind::RewardPass2: return svg_chart("Reward-Pass@2 per temperature", "Reward-Pass@2", series, y_max);
        case PlotKind::Temperature: return svg_chart("Sampling temperature", "temperature", series, y_max);
    }
    return {};
}

std::vector<fs::path> write_report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
    if (run_dirs.empty()) throw std::runtime_error("report needs at least one run directory");
    std::vector<ReportRun> runs;
    for (const auto& d : run_dirs) runs.push_back(load_report_run(d));
    fs::create_directories(out_dir);
    std::vector<fs::path> out = {out_dir / "table_ablation.csv", out_dir / "plot_greedy.svg",
                                 out_dir / "plot_passk.svg", out_dir / "plot_rp2.svg",
                                 out_dir / "plot_temperature.svg"};
    write_text(out[0], ablation_table_csv(runs));
    write_text(out[1], render_plot(runs, PlotKind::Greedy));
    write_text(out[2], render_plot(runs, PlotKind::PassK));
    write_text(out[3], render_plot(runs, PlotKind::RewardPass2));
    write_text(out[4], render_plot(runs, PlotKind::Temperature));
    return out;
}

double median(std::vector<double> v) {
    if (v.empty()) throw UndefinedInput("median of an empty list");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<SweepRow> execute_sweep(std::string_view config_text, const std::vector<std::string>& presets,
                                    const std::vector<std::uint64_t>& seeds, const fs::path& out_dir) {
    if (presets.empty() || seeds.empty()) throw std::runtime_error("sweep needs at least one preset and one seed");
    for (const auto& p : presets) resolve_run_config(config_text, p);
    std::vector<SweepRow> rows;
    std::vector<fs::path> dirs;
    for (const auto& p : presets) {
        std::vector<double> greedy, pass16;
        for (std::uint64_t s : seeds) {
            const fs::path dir = out_dir / p / ("seed_" + std::to_string(s));
            execute_run(config_text, p, s, dir);
            const auto recs = read_metrics(RunPaths{dir}.metrics());
            greedy.push_back(recs.back().greedy_accuracy);
            pass16.push_back(final_metric(recs.back(), false));
            dirs.push_back(dir);
        }
        rows.push_back({p, seeds.size(), median(greedy), median(pass16)});
    }
    write_text(out_dir / "sweep_median.csv", sweep_table_csv(rows));
    write_report(dirs, out_dir);
    return rows;
}

std::string sweep_table_csv(const std::vector<SweepRow>& rows) {
    std::string out = "preset,seeds,median_greedy_accuracy,median_pass_at_16_T1.00\n";
    for (const auto& r : rows) {
        out += csv_field(r.preset) + "," + std::to_string(r.seeds) + "," + fixed(r.median_greedy, 4) + "," +
               optional_cell(r.median_pass16) + "\n";
    }
    return out;
}

}  // namespace selfevolve
