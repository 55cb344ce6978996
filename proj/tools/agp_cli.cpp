// agp: prepare data, train, evaluate and run ablation grids.
//
// Exit codes: 0 success, 1 internal error, 2 usage or input error.

#include <agp/agp.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace agp;

namespace {

struct CommonArgs {
    std::string config;
    std::string root;
    std::string weights;
    bool toy = false;
    std::string categories;
    std::string setting;
    int shots = 0;
    std::optional<std::uint64_t> seed;
    int epochs = 0;
    int batch_size = 0;
    std::vector<std::string> ablation;
    std::vector<std::string> overrides;
    std::string out;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
    cmd->add_option("--config", a.config, "experiment JSON (defaults to the toy or MVTec preset)");
    cmd->add_option("--root", a.root, "MVTec-AD style dataset root");
    cmd->add_option("--weights", a.weights, "encoder weight archive for --root runs");
    cmd->add_flag("--toy", a.toy, "use the procedural toy dataset");
    cmd->add_option("--categories", a.categories, "toy: number of categories; dataset: comma-separated names");
    cmd->add_option("--setting", a.setting, "multi_class | one_class | few_shot");
    cmd->add_option("--shots", a.shots, "k for the few_shot setting");
    cmd->add_option("--seed", a.seed, "seed for data, encoder, decoder and training");
    cmd->add_option("--epochs", a.epochs, "training epochs");
    cmd->add_option("--batch-size", a.batch_size, "training batch size");
    cmd->add_option("--ablation", a.ablation, "switches k=v,... (noise, mask, mean_teacher, layers, ...)");
    cmd->add_option("--set", a.overrides, "override any config field: dotted.path=value");
    cmd->add_option("--out", a.out, "output directory (must not exist)");
}

/// Preset or file, then flags, then `--set` overrides.
ExperimentConfig build_config(const CommonArgs& a) {
    ExperimentConfig c;
    if (!a.config.empty()) {
        c = experiment_from_json(read_json_file(a.config));
    } else if (!a.root.empty() && !a.toy) {
        c = mvtec_experiment(a.root, a.weights);
    } else {
        c = toy_experiment();
    }
    if (a.toy) c.data.toy = true;
    if (!a.root.empty()) {
        c.data.toy = false;
        c.data.root = a.root;
    }
    if (!a.weights.empty()) c.model.encoder.weights_path = a.weights;
    if (a.seed) set_seed(c, *a.seed);
    if (!a.categories.empty()) {
        if (c.data.toy) {
            try {
                c.data.toy_spec.n_categories = std::stoi(a.categories);
            } catch (const std::exception&) {
                fail(ErrorKind::usage, "--categories with --toy expects a count, got '" + a.categories + "'");
            }
        } else {
            c.data.categories.clear();
            for (const auto& s : detail::split(a.categories, ','))
                if (!s.empty()) c.data.categories.push_back(s);
        }
    }
    if (!a.setting.empty()) c.model.train.setting = setting_from_string(a.setting);
    if (a.shots > 0) c.model.train.shots = a.shots;
    if (a.epochs > 0) c.model.train.epochs = a.epochs;
    if (a.batch_size > 0) c.model.train.batch_size = a.batch_size;
    for (const auto& s : a.ablation) apply_ablation(c.model.train.ablation, s);
    if (!a.overrides.empty()) {
        nlohmann::json j = c;
        for (const auto& o : a.overrides) set_override(j, o);
        c = experiment_from_json(j);
    }
    return c;
}

/// Creates a fresh output directory. An explicit --out must not exist yet;
/// otherwise the first free "<AGP_OUT_DIR or runs>/<command>-<name>-NNN".
fs::path make_run_dir(const std::string& explicit_out, const std::string& command, const std::string& name) {
    if (!explicit_out.empty()) {
        const fs::path p(explicit_out);
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        require(fs::create_directory(p), ErrorKind::usage, "output directory " + p.string() + " already exists");
        return p;
    }
    const char* env = std::getenv("AGP_OUT_DIR");
    const fs::path base = env && *env ? fs::path(env) : fs::path("runs");
    fs::create_directories(base);
    for (int i = 1; i < 100000; ++i) {
        char suffix[16];
        std::snprintf(suffix, sizeof suffix, "-%03d", i);
        const fs::path p = base / (command + "-" + name + suffix);
        if (fs::create_directory(p)) return p;
    }
    fail(ErrorKind::io, "no free run directory under " + base.string());
}

void print_summary(const DatasetManifest& m) {
    std::printf("%-16s %6s %12s %15s\n", "category", "train", "test_normal", "test_anomalous");
    for (const auto& cat : m.categories)
        std::printf("%-16s %6zu %12zu %15zu\n", cat.c_str(), m.count(Split::train, std::nullopt, cat),
                    m.count(Split::test, Label::normal, cat), m.count(Split::test, Label::anomalous, cat));
    std::printf("%zu categories\n", m.categories.size());
}

// ---------------------------------------------------------------------------

int cmd_prepare(const CommonArgs& a) {
    ExperimentConfig c = build_config(a);
    if (!c.data.toy) {
        require(fs::is_directory(c.data.root), ErrorKind::layout, "dataset root " + c.data.root + " does not exist");
    }
    c = resolve(c);
    DatasetManifest m = load_dataset(c);
    const fs::path dir = make_run_dir(a.out, "prepare", c.name);
    if (c.data.toy) m = materialize(m, dir / "data");
    write_json_file(dir / "manifest.json", manifest_to_json(m));
    write_json_file(dir / "config.json", resolved_json(c));
    print_summary(m);
    std::printf("manifest written to %s\n", (dir / "manifest.json").string().c_str());
    return 0;
}

void write_models_index(const fs::path& dir, const std::vector<TrainedModel>& models) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& t : models)
        j.push_back({{"scope", t.scope}, {"categories", t.categories}, {"checkpoint", fs::relative(t.checkpoint, dir).string()}});
    write_json_file(dir / "models.json", j);
}

void plot_losses(const fs::path& dir, const std::vector<TrainedModel>& models) {
    for (const auto& t : models) {
        std::vector<double> total, feat, img;
        for (const auto& e : t.epochs) {
            total.push_back(e.l_total);
            feat.push_back(e.l_feat);
            img.push_back(e.l_imgfeat);
        }
        if (!total.empty()) plot::line_chart(dir / t.scope / "loss_curve.png", {total, feat, img});
    }
}

/// Latest resumable state per scope directory of an interrupted run.
std::map<std::string, TrainState> find_resume_states(const fs::path& run, const ExperimentConfig& c,
                                                     const DatasetManifest& m) {
    std::map<std::string, TrainState> out;
    for (const auto& [scope, manifest] : training_scopes(c, m)) {
        const fs::path dir = run / scope;
        if (!fs::is_directory(dir)) continue;
        int best = -1;
        fs::path best_path;
        for (const auto& e : fs::directory_iterator(dir)) {
            const std::string n = e.path().filename().string();
            if (n.rfind("checkpoint_epoch", 0) != 0 || e.path().extension() != ".agpk") continue;
            const int ep = std::atoi(n.c_str() + 16);
            if (ep > best) {
                best = ep;
                best_path = e.path();
            }
        }
        if (fs::exists(dir / "model.agpk")) best_path = dir / "model.agpk";
        if (best_path.empty()) continue;
        Checkpoint ck = read_checkpoint(best_path);
        require(nlohmann::json(ck.model) == nlohmann::json(c.model), ErrorKind::load,
                best_path.string() + " was written with a different configuration");
        out.emplace(scope, std::move(ck.state));
    }
    return out;
}

/// Drops log rows past the resume point so the appended log has no duplicates.
void truncate_log(const fs::path& log, int epoch) {
    if (!fs::exists(log)) return;
    std::ifstream in(log);
    std::string line, kept;
    std::getline(in, line);
    kept = line + "\n";
    while (std::getline(in, line))
        if (!line.empty() && std::atoi(line.c_str()) < epoch) kept += line + "\n";
    in.close();
    std::ofstream(log, std::ios::trunc) << kept;
}

int cmd_train(const CommonArgs& a, const std::string& resume_dir) {
    ExperimentConfig c;
    fs::path dir;
    std::map<std::string, TrainState> resume;
    DatasetManifest m;
    if (!resume_dir.empty()) {
        dir = resume_dir;
        c = resolve(experiment_from_json(read_json_file(dir / "config.json")));
        m = load_dataset(c);
        resume = find_resume_states(dir, c, m);
        for (const auto& [scope, st] : resume) {
            truncate_log(dir / scope / "train_log.csv", st.epoch);
            std::printf("resuming %s at epoch %d\n", scope.c_str(), st.epoch);
        }
    } else {
        c = resolve(build_config(a));
        m = load_dataset(c);
        dir = make_run_dir(a.out, "train", c.name);
        write_json_file(dir / "config.json", resolved_json(c));
    }
    const VitEncoder encoder = make_encoder(c.model.encoder);
    const fs::path marker = dir / "INCOMPLETE";
    std::ofstream(marker) << "training did not finish; outputs in this directory are partial\n";
    const auto models = train_experiment(
        c, m, encoder, dir,
        [](const std::string& scope, const EpochSummary& e) {
            std::printf("[%s] epoch %d  l_total %.6f  l_feat %.6f  l_imgfeat %.6f  alpha %.3f  ratio %.3f  lr %.2e\n",
                        scope.c_str(), e.epoch, e.l_total, e.l_feat, e.l_imgfeat, e.alpha, e.img_ratio, e.lr);
            std::fflush(stdout);
        },
        std::move(resume));
    write_models_index(dir, models);
    plot_losses(dir, models);
    fs::remove(marker);
    std::printf("%zu checkpoint(s) written under %s\n", models.size(), dir.string().c_str());
    return 0;
}

int cmd_eval(const std::string& run_dir, const std::string& out, bool heatmaps) {
    require(!run_dir.empty(), ErrorKind::usage, "eval needs --run <train output directory>");
    const fs::path run(run_dir);
    require(!fs::exists(run / "INCOMPLETE"), ErrorKind::usage, run_dir + " holds an unfinished training run");
    const ExperimentConfig c = resolve(experiment_from_json(read_json_file(run / "config.json")));
    const DatasetManifest m = load_dataset(c);

    std::vector<TrainedModel> models;
    std::optional<VitEncoder> encoder;
    for (const auto& entry : read_json_file(run / "models.json")) {
        const fs::path ckpt = run / entry.at("checkpoint").get<std::string>();
        Checkpoint ck = read_checkpoint(ckpt);
        if (nlohmann::json(ck.model) != nlohmann::json(c.model))
            fail(ErrorKind::load, ckpt.string() + " does not match the run configuration");
        if (!encoder) encoder.emplace(ck.encoder);
        require(ck.encoder.hash() == encoder->hash(), ErrorKind::load, "checkpoints disagree on encoder weights");
        TrainedModel t;
        t.scope = entry.at("scope").get<std::string>();
        t.categories = entry.at("categories").get<std::vector<std::string>>();
        t.state = std::move(ck.state);
        models.push_back(std::move(t));
    }
    require(encoder.has_value(), ErrorKind::usage, "no models listed in " + (run / "models.json").string());

    const auto scored = score_experiment(c, m, *encoder, models);
    const fs::path dir = out.empty() ? run / "eval" : fs::path(out);
    if (dir.has_parent_path()) fs::create_directories(dir.parent_path());
    require(fs::create_directory(dir), ErrorKind::usage, "output directory " + dir.string() + " already exists");
    write_score_table(dir / "scores.csv", scored);
    const EvalResult r = evaluate(scored, pro_options(c));
    write_eval_csv(dir / "metrics.csv", r);
    const std::string table = format_eval_table(r);
    std::ofstream(dir / "metrics.txt") << table;
    std::fputs(table.c_str(), stdout);

    std::vector<double> normal, anomalous;
    for (const auto& s : scored) (s.label == Label::normal ? normal : anomalous).push_back(s.map.image_score);
    plot::histogram(dir / "score_hist.png", {normal, anomalous});
    if (heatmaps) {
        fs::create_directories(dir / "heatmaps");
        for (const auto& s : scored) write_heatmap(dir / "heatmaps", s.map);
    }
    std::printf("results written to %s\n", dir.string().c_str());
    return 0;
}

int cmd_ablate(const CommonArgs& a, const std::vector<std::string>& grid, const std::string& seeds_arg) {
    require(!grid.empty(), ErrorKind::usage, "ablate needs at least one --grid axis");
    std::vector<GridAxis> axes;
    for (const auto& g : grid) axes.push_back(parse_grid_axis(g));
    const auto cells = expand_grid(axes);
    std::vector<std::uint64_t> seeds;
    for (const auto& s : detail::split(seeds_arg, ','))
        if (!s.empty()) seeds.push_back(std::stoull(s));
    require(!seeds.empty(), ErrorKind::usage, "--seeds needs at least one seed");

    const ExperimentConfig base = build_config(a);
    require(base.data.toy, ErrorKind::usage, "ablation grids run on the toy dataset");
    const fs::path dir = make_run_dir(a.out, "ablate", base.name);
    write_json_file(dir / "config.json", resolved_json(resolve(base)));

    std::ofstream csv(dir / "ablation.csv");
    csv << "cell,seed,i_auc,p_auc,pro\n";
    struct Row {
        std::string label;
        MetricTriple mean;
    };
    std::vector<Row> rows;
    for (const auto& cell : cells) {
        Row row{cell.label, {}};
        for (std::uint64_t seed : seeds) {
            ExperimentConfig c = base;
            set_seed(c, seed);
            for (const auto& [k, v] : cell.settings) apply_ablation_setting(c.model.train.ablation, k, v);
            const EvalResult r = run_experiment(c);
            char buf[160];
            std::snprintf(buf, sizeof buf, ",%llu,%.10f,%.10f,%.10f", static_cast<unsigned long long>(seed), r.mean.i_auc,
                          r.mean.p_auc, r.mean.pro);
            csv << cell.label << buf << '\n' << std::flush;
            std::printf("%-28s seed %llu  I-AUC %.4f  P-AUC %.4f  PRO %.4f\n", cell.label.c_str(),
                        static_cast<unsigned long long>(seed), r.mean.i_auc, r.mean.p_auc, r.mean.pro);
            std::fflush(stdout);
            row.mean.i_auc += r.mean.i_auc / seeds.size();
            row.mean.p_auc += r.mean.p_auc / seeds.size();
            row.mean.pro += r.mean.pro / seeds.size();
        }
        rows.push_back(row);
    }
    std::string table = "Setting                       I-AUC / P-AUC / PRO (%)\n";
    std::vector<double> bars;
    for (const auto& r : rows) {
        char buf[200];
        std::snprintf(buf, sizeof buf, "%-28s  %5.1f / %5.1f / %5.1f\n", r.label.c_str(), 100 * r.mean.i_auc,
                      100 * r.mean.p_auc, 100 * r.mean.pro);
        table += buf;
        bars.push_back(r.mean.i_auc);
    }
    std::ofstream(dir / "ablation.txt") << table;
    plot::bar_chart(dir / "ablation_bars.png", bars);
    std::fputs(table.c_str(), stdout);
    return 0;
}

int exit_code_for(ErrorKind k) {
    switch (k) {
    case ErrorKind::usage:
    case ErrorKind::config:
    case ErrorKind::layout:
    case ErrorKind::mask_pairing:
    case ErrorKind::load:
    case ErrorKind::undefined_metric: return 2;
    default: return 1;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Attention-guided perturbation anomaly detection"};
    app.require_subcommand(1);

    CommonArgs prep_args, train_args, ablate_args;
    auto* prepare = app.add_subcommand("prepare", "validate a dataset or generate toy data; cache the manifest");
    add_common(prepare, prep_args);

    auto* train = app.add_subcommand("train", "train per the configured setting");
    add_common(train, train_args);
    std::string resume_dir;
    train->add_option("--resume", resume_dir, "continue an interrupted train output directory");

    auto* eval = app.add_subcommand("eval", "score the test split of a trained run and compute metrics");
    std::string run_dir, eval_out;
    bool heatmaps = false;
    eval->add_option("--run", run_dir, "train output directory")->required();
    eval->add_option("--out", eval_out, "results directory (default <run>/eval, must not exist)");
    eval->add_flag("--heatmaps", heatmaps, "write per-image anomaly maps");

    auto* ablate = app.add_subcommand("ablate", "run an ablation grid on toy data");
    add_common(ablate, ablate_args);
    std::vector<std::string> grid;
    std::string seeds = "7";
    ablate->add_option("--grid", grid, "axis key=v1;v2;... (repeat for a cross product)");
    ablate->add_option("--seeds", seeds, "comma-separated seeds shared by every cell");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*prepare) return cmd_prepare(prep_args);
        if (*train) return cmd_train(train_args, resume_dir);
        if (*eval) return cmd_eval(run_dir, eval_out, heatmaps);
        if (*ablate) return cmd_ablate(ablate_args, grid, seeds);
    } catch (const agp::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code_for(e.kind());
    } catch (const fs::filesystem_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 1;
    }
    return 1;
}
