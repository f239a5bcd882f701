#include "mst/cohort.hpp"
#include "mst/common.hpp"
#include "mst/explain.hpp"
#include "mst/metrics.hpp"
#include "mst/model.hpp"
#include "mst/phantom.hpp"
#include "mst/predictions.hpp"
#include "mst/reports.hpp"
#include "mst/review.hpp"
#include "mst/training.hpp"
#include "mst/volume.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mst;

namespace {

// Values come from the command line first, then the command's section of the
// --config file, then the built-in default.
struct Settings {
    json config = json::object();
    fs::path data_root;

    const json& section(const std::string& name) const {
        static const json empty = json::object();
        return config.contains(name) ? config.at(name) : empty;
    }

    fs::path path(const std::string& p) const {
        fs::path out(p);
        if (out.empty() || out.is_absolute() || data_root.empty()) return out;
        return data_root / out;
    }
};

std::string key_of(const CLI::Option* opt) {
    std::string name = opt->get_name(false, true);
    while (!name.empty() && name.front() == '-') name.erase(name.begin());
    for (char& c : name) {
        if (c == '-') c = '_';
    }
    return name;
}

// Fills every option not given on the command line from the config section.
template <class T>
void from_config(const CLI::Option* opt, const json& section, T& value) {
    if (opt->count() > 0) return;
    const auto key = key_of(opt);
    if (!section.contains(key)) return;
    try {
        value = section.at(key).get<T>();
    } catch (const json::exception& e) {
        throw Error("validation", "config key '" + key + "': " + e.what());
    }
}

void print_json(const json& j) { std::cout << j.dump() << "\n"; }

std::vector<double> parse_targets(const std::string& text) {
    std::vector<double> out;
    for (const auto& part : split(text, ',')) {
        const auto t = trim(part);
        if (t.empty()) continue;
        try {
            std::size_t used = 0;
            const double v = std::stod(t, &used);
            if (used != t.size()) throw std::invalid_argument(t);
            if (!(v > 0.0 && v <= 1.0)) throw Error("validation", "target sensitivity " + t + " outside (0, 1]");
            out.push_back(v);
        } catch (const std::logic_error&) {
            throw Error("validation", "cannot parse target sensitivity '" + t + "'");
        }
    }
    if (out.empty()) throw Error("validation", "no target sensitivities given");
    return out;
}

// "NAME=path" or "path"; the name defaults to the sequence list recorded in the file.
NamedPredictions load_named(const Settings& s, const std::string& spec) {
    NamedPredictions out;
    const auto eq = spec.find('=');
    const std::string file = eq == std::string::npos ? spec : spec.substr(eq + 1);
    out.set = load_predictions(s.path(file));
    out.sequence = eq == std::string::npos ? out.set.sequences : spec.substr(0, eq);
    if (out.sequence.empty()) throw Error("validation", file + ": no sequence name recorded; use NAME=path");
    return out;
}

json sources_json(const std::vector<NamedPredictions>& sets) {
    json out = json::array();
    for (const auto& n : sets) {
        out.push_back({{"sequence", n.sequence}, {"config_hash", n.set.config_hash}, {"seed", n.set.seed}});
    }
    return out;
}

Calibration parse_calibration(const std::string& text) {
    if (text == "test") return Calibration::test_fold;
    if (text == "val" || text == "validation") return Calibration::validation_fold;
    throw Error("validation", "calibration must be 'test' or 'val'");
}

std::string file_safe(std::string name) {
    for (char& c : name) {
        if (c == '+' || c == '/' || c == ' ') c = '_';
    }
    return name;
}

// ---- commands -----------------------------------------------------------------------

struct PhantomArgs {
    int n = 100;
    double positive_fraction = 0.2;
    std::uint64_t seed = 0;
    std::string sequences = "T1_sub,DWI_1500,T2w";
    double lesion_contrast = 1.0;
    std::string out;
};

int run_phantom(const Settings& s, const PhantomArgs& a) {
    if (a.out.empty()) throw Error("validation", "phantom: --out is required");
    if (a.n < 1) throw Error("validation", "phantom: --n must be positive");
    if (!(a.positive_fraction >= 0.0 && a.positive_fraction <= 1.0)) {
        throw Error("validation", "phantom: --positive-fraction must lie in [0, 1]");
    }
    PhantomOptions o;
    o.n = a.n;
    o.positive_fraction = a.positive_fraction;
    o.seed = a.seed;
    o.sequences = parse_sequence_list(a.sequences);
    o.lesion_contrast = a.lesion_contrast;
    const fs::path out = s.path(a.out);
    auto manifest = generate_phantoms(o, out);
    long positives = 0;
    for (const auto& r : manifest.records) positives += (r.label && *r.label == Label::suspicious) ? 1 : 0;
    json meta = {{"n", a.n},
                 {"positive_fraction", a.positive_fraction},
                 {"seed", a.seed},
                 {"sequences", sequence_list_name(o.sequences)},
                 {"lesion_contrast", a.lesion_contrast}};
    meta["options_hash"] = sha256_hex(meta.dump());
    write_text_file(out / "phantom.json", meta.dump(2) + "\n");
    print_json({{"manifest", (out / "manifest.csv").string()},
                {"exams", manifest.records.size()},
                {"positives", positives},
                {"seed", a.seed},
                {"options_hash", meta["options_hash"]}});
    return 0;
}

struct PreprocessArgs {
    std::string manifest;
    std::string sequences = "T1_sub";
    std::string out;
};

int run_preprocess(const Settings& s, const PreprocessArgs& a) {
    if (a.manifest.empty() || a.out.empty()) throw Error("validation", "preprocess: --manifest and --out are required");
    const auto manifest = load_manifest(s.path(a.manifest));
    const auto seqs = parse_sequence_list(a.sequences);
    const fs::path out = s.path(a.out);
    for (const auto& r : manifest.records) {
        write_preprocessed(preprocess_exam(manifest, r, seqs), r.exam_id, out);
    }
    print_json({{"cache", out.string()}, {"exams", manifest.records.size()}, {"sequences", sequence_list_name(seqs)}});
    return 0;
}

struct FoldsArgs {
    std::string manifest;
    int k = 5;
    std::uint64_t seed = 0;
    std::string out;
};

int run_folds(const Settings& s, const FoldsArgs& a) {
    if (a.manifest.empty() || a.out.empty()) throw Error("validation", "folds: --manifest and --out are required");
    const auto plan = make_folds(load_manifest(s.path(a.manifest)), a.k, a.seed);
    save_fold_plan(plan, s.path(a.out));
    print_json({{"fold_plan", s.path(a.out).string()}, {"folds", plan.n_folds}, {"seed", plan.seed},
                {"exams", plan.assignments.size()}});
    return 0;
}

struct TrainArgs {
    std::string manifest;
    std::string fold_plan;
    std::string fold = "all";
    std::string out;
    std::string cache;
    std::string sequences;
    std::optional<double> lr;
    std::optional<int> epochs;
    std::optional<std::uint64_t> seed;
    bool no_augment = false;
};

TrainConfig training_config(const Settings& s) {
    if (!s.config.contains("training")) return TrainConfig{};
    return train_config_from_json(s.config.at("training"));
}

int run_train(const Settings& s, const TrainArgs& a) {
    if (a.manifest.empty() || a.fold_plan.empty() || a.out.empty()) {
        throw Error("validation", "train: --manifest, --fold-plan and --out are required");
    }
    TrainConfig c = training_config(s);
    if (!a.sequences.empty()) c.sequences = parse_sequence_list(a.sequences);
    if (a.lr) c.lr = *a.lr;
    if (a.epochs) c.max_epochs = *a.epochs;
    if (a.seed) c.seed = *a.seed;
    if (a.no_augment) c.augment = false;
    if (!a.cache.empty()) c.cache_dir = s.path(a.cache).string();
    validate_train_config(c);

    const auto manifest = load_manifest(s.path(a.manifest));
    const auto plan = load_fold_plan(s.path(a.fold_plan));
    const fs::path out = s.path(a.out);
    std::vector<int> folds;
    if (a.fold == "all") {
        for (int f = 0; f < plan.n_folds; ++f) folds.push_back(f);
    } else {
        try {
            folds.push_back(std::stoi(a.fold));
        } catch (const std::logic_error&) {
            throw Error("validation", "train: --fold must be an integer or 'all'");
        }
    }
    auto progress = [](const std::string& msg) { std::cerr << msg << "\n"; };
    ExamData data(manifest, c);
    json results = json::array();
    for (int f : folds) {
        auto r = train_fold(c, f, plan, manifest, out, &data, progress);
        results.push_back({{"fold", f},
                           {"checkpoint", r.checkpoint_dir.string()},
                           {"best_epoch", r.best_epoch},
                           {"best_val_metric", r.best_val_metric},
                           {"selection_metric", r.selection_metric}});
    }
    write_text_file(out / "train_config.json", to_json(c).dump(2) + "\n");

    json summary = {{"config_hash", config_hash(c)}, {"seed", c.seed}, {"folds", results}};
    bool complete = true;
    for (int f = 0; f < plan.n_folds; ++f) {
        complete = complete && fs::exists(out / ("fold_" + std::to_string(f)) / "manifest.json");
    }
    if (complete) {
        auto preds = collect_cv_predictions(c, plan, manifest, out, &data);
        save_predictions(preds, out / "predictions.csv");
        summary["predictions"] = (out / "predictions.csv").string();
        summary["pooled_test_auc"] = auc(pooled_test_roc(preds));
    }
    print_json(summary);
    return 0;
}

struct PredictArgs {
    std::string checkpoint;
    std::string manifest;
    std::string out;
    std::string cache;
};

int run_predict(const Settings& s, const PredictArgs& a) {
    if (a.checkpoint.empty() || a.manifest.empty() || a.out.empty()) {
        throw Error("validation", "predict: --checkpoint, --manifest and --out are required");
    }
    const auto set = predict(s.path(a.checkpoint), load_manifest(s.path(a.manifest)), {},
                             a.cache.empty() ? std::string() : s.path(a.cache).string());
    save_predictions(set, s.path(a.out));
    print_json({{"predictions", s.path(a.out).string()}, {"rows", set.rows.size()}, {"config_hash", set.config_hash},
                {"seed", set.seed}});
    return 0;
}

struct EvaluateArgs {
    std::vector<std::string> predictions;
    std::string reference;
    std::string targets = "0.90,0.95,0.975";
    std::string calibration = "test";
    std::string out;
};

int run_evaluate(const Settings& s, const EvaluateArgs& a) {
    if (a.predictions.empty() || a.out.empty()) throw Error("validation", "evaluate: --predictions and --out are required");
    std::vector<NamedPredictions> sets;
    for (const auto& p : a.predictions) sets.push_back(load_named(s, p));
    const std::string reference = a.reference.empty() ? sets.front().sequence : a.reference;
    const auto targets = parse_targets(a.targets);
    const auto report = aggregate_fold_metrics(sets, reference, targets, parse_calibration(a.calibration));

    const fs::path out = s.path(a.out);
    json j = to_json(report);
    j["sources"] = sources_json(sets);
    write_text_file(out / "table2.json", j.dump(2) + "\n");
    write_text_file(out / "table2.csv", render_table2_csv(report));
    const std::string text = render_table2_text(report);
    write_text_file(out / "table2.txt", text);

    std::vector<std::pair<std::string, RocCurve>> curves;
    for (const auto& n : sets) {
        auto roc = pooled_test_roc(n.set);
        write_text_file(out / ("roc_" + file_safe(n.sequence) + ".csv"),
                        "# config_hash=" + n.set.config_hash + " seed=" + std::to_string(n.set.seed) + "\n" +
                            roc_to_csv(roc));
        curves.emplace_back(n.sequence, std::move(roc));
    }
    write_text_file(out / "roc.svg", render_roc_svg(curves, default_guide_lines(), "Pooled test ROC"));
    for (const auto& w : report.warnings) std::cerr << json{{"warning", w}}.dump() << "\n";
    std::cout << text;
    return 0;
}

struct FnReportArgs {
    std::vector<std::string> predictions;
    std::string manifest;
    std::string thresholds = "0.90,0.95,0.975";
    std::string calibration = "test";
    std::string out;
};

int run_fn_report(const Settings& s, const FnReportArgs& a) {
    if (a.predictions.empty() || a.manifest.empty() || a.out.empty()) {
        throw Error("validation", "fn-report: --predictions, --manifest and --out are required");
    }
    std::vector<NamedPredictions> sets;
    for (const auto& p : a.predictions) sets.push_back(load_named(s, p));
    const auto report = false_negative_report(sets, parse_targets(a.thresholds), load_manifest(s.path(a.manifest)),
                                              parse_calibration(a.calibration));
    const fs::path out = s.path(a.out);
    json j = to_json(report);
    j["sources"] = sources_json(sets);
    write_text_file(out / "table3.json", j.dump(2) + "\n");
    write_text_file(out / "table3.csv", render_table3_csv(report));
    const std::string text = render_table3_text(report);
    write_text_file(out / "table3.txt", text);
    for (const auto& w : report.warnings) std::cerr << json{{"warning", w}}.dump() << "\n";
    std::cout << text;
    return 0;
}

struct ExplainArgs {
    std::string checkpoint;
    std::string manifest;
    std::string predictions;
    double threshold_at = 0.90;
    int display_channel = 0;
    double alpha = 0.5;
    std::string cache;
    int limit = 0;
    std::string out;
};

int run_explain(const Settings& s, const ExplainArgs& a) {
    if (a.checkpoint.empty() || a.manifest.empty() || a.predictions.empty() || a.out.empty()) {
        throw Error("validation", "explain: --checkpoint, --manifest, --predictions and --out are required");
    }
    const auto manifest = load_manifest(s.path(a.manifest));
    const auto preds = load_predictions(s.path(a.predictions));
    const auto op = operating_point(pooled_test_roc(preds), a.threshold_at);
    auto cases = select_true_positives(preds, op.threshold);
    if (a.limit > 0 && static_cast<int>(cases.size()) > a.limit) cases.resize(static_cast<std::size_t>(a.limit));

    // A cross-validation run directory explains each exam with the fold that
    // tested it; a single checkpoint directory explains every exam.
    const fs::path ckpt_root = s.path(a.checkpoint);
    const bool single = fs::exists(ckpt_root / "manifest.json");
    std::map<std::string, std::string> fold_of;
    for (const auto* r : preds.with_role(SplitRole::test)) fold_of[r->exam_id] = r->fold;
    std::map<std::string, std::unique_ptr<LoadedCheckpoint>> loaded;
    auto checkpoint_for = [&](const std::string& exam) -> LoadedCheckpoint& {
        const fs::path dir = single ? ckpt_root : ckpt_root / ("fold_" + fold_of.at(exam));
        auto& slot = loaded[dir.string()];
        if (!slot) {
            slot = std::make_unique<LoadedCheckpoint>(load_checkpoint(dir));
            if (!preds.config_hash.empty() && slot->info.training_config_hash != preds.config_hash) {
                throw Error("compatibility", "checkpoint " + dir.string() + " was trained with config " +
                                                 slot->info.training_config_hash + " but the predictions come from " +
                                                 preds.config_hash);
            }
        }
        return *slot;
    };

    RenderOptions ro;
    ro.display_channel = a.display_channel;
    ro.alpha_scale = a.alpha;
    const fs::path out = s.path(a.out);
    const std::string cache = a.cache.empty() ? std::string() : s.path(a.cache).string();
    std::map<std::string, const PredictionRow*> row_of;
    for (const auto& r : preds.rows) {
        if (r.split_role == SplitRole::test) row_of[r.exam_id] = &r;
    }
    json written = json::array();
    for (const auto& exam : cases) {
        auto& ckpt = checkpoint_for(exam);
        const auto stack = load_exam_stack(manifest, exam, ckpt.info.channel_map, {}, cache);
        const auto bundle = attention_bundle(ckpt.model, stack);
        CaseInfo info{exam, row_of.at(exam)->score, row_of.at(exam)->label, ckpt.weights_hash};
        render_overlay(stack, bundle, info, out / exam, ro);
        written.push_back(exam);
    }
    print_json({{"bundles", out.string()},
                {"threshold", op.threshold},
                {"target_sensitivity", a.threshold_at},
                {"cases", written},
                {"config_hash", preds.config_hash},
                {"seed", preds.seed}});
    return 0;
}

struct ReviewArgs {
    std::string bundles;
    std::string ratings = "ratings.jsonl";
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string static_dir;
};

int run_review(const Settings& s, const ReviewArgs& a) {
    if (a.bundles.empty()) throw Error("validation", "review: --bundles is required");
    ReviewOptions o;
    o.bundle_root = s.path(a.bundles);
    o.ratings_path = s.path(a.ratings);
    if (!a.static_dir.empty()) o.static_dir = s.path(a.static_dir);
    ReviewServer server(o);
    for (const auto& w : server.warnings()) std::cerr << json{{"warning", w}}.dump() << "\n";
    std::cerr << json{{"serving", "http://" + a.host + ":" + std::to_string(a.port)}, {"cases", server.case_count()}}.dump()
              << "\n";
    if (!server.listen(a.host, a.port)) {
        throw Error("io", "cannot listen on " + a.host + ":" + std::to_string(a.port));
    }
    return 0;
}

int fail(const std::string& kind, const std::string& message, int code) {
    std::cerr << json{{"error", kind}, {"message", message}}.dump() << "\n";
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Breast MRI slice-transformer triage pipeline"};
    app.require_subcommand(1);
    std::string config_path;
    std::string data_root;
    app.add_option("--config", config_path, "JSON config file; command-line flags override its keys");
    app.add_option("--data-root", data_root, "Base for relative paths (default: $MST_DATA_ROOT, then the config)");

    PhantomArgs phantom;
    auto* ph = app.add_subcommand("phantom", "Generate a synthetic phantom cohort");
    auto* ph_n = ph->add_option("--n", phantom.n, "Number of exams (two per patient)");
    auto* ph_f = ph->add_option("--positive-fraction", phantom.positive_fraction, "Fraction of suspicious exams");
    auto* ph_s = ph->add_option("--seed", phantom.seed, "Generator seed");
    auto* ph_q = ph->add_option("--sequences", phantom.sequences, "Sequences to write");
    auto* ph_c = ph->add_option("--lesion-contrast", phantom.lesion_contrast, "Scale of every lesion signal");
    auto* ph_o = ph->add_option("--out", phantom.out, "Output directory");

    PreprocessArgs prep;
    auto* pp = app.add_subcommand("preprocess", "Build the preprocessed stack cache");
    auto* pp_m = pp->add_option("--manifest", prep.manifest, "Cohort manifest (CSV or JSONL)");
    auto* pp_q = pp->add_option("--sequences", prep.sequences, "Sequence combination, e.g. T2w,T1_sub");
    auto* pp_o = pp->add_option("--out", prep.out, "Cache directory");

    FoldsArgs folds;
    auto* fo = app.add_subcommand("folds", "Build a patient-level stratified fold plan");
    auto* fo_m = fo->add_option("--manifest", folds.manifest, "Cohort manifest");
    auto* fo_k = fo->add_option("--k", folds.k, "Number of folds");
    auto* fo_s = fo->add_option("--seed", folds.seed, "Shuffle seed");
    auto* fo_o = fo->add_option("--out", folds.out, "Fold plan JSON path");

    TrainArgs train;
    auto* tr = app.add_subcommand("train", "Train cross-validation folds; the 'training' config section is the TrainConfig");
    auto* tr_m = tr->add_option("--manifest", train.manifest, "Cohort manifest");
    auto* tr_p = tr->add_option("--fold-plan", train.fold_plan, "Fold plan JSON");
    auto* tr_f = tr->add_option("--fold", train.fold, "Fold index or 'all'");
    auto* tr_o = tr->add_option("--out", train.out, "Run directory (fold_<i>/ checkpoints, predictions.csv)");
    auto* tr_c = tr->add_option("--cache", train.cache, "Preprocessed stack cache directory");
    tr->add_option("--sequences", train.sequences, "Override training.sequences");
    tr->add_option("--lr", train.lr, "Override training.lr");
    tr->add_option("--epochs", train.epochs, "Override training.max_epochs");
    tr->add_option("--seed", train.seed, "Override training.seed");
    tr->add_flag("--no-augment", train.no_augment, "Override training.augment with false");

    PredictArgs pred;
    auto* pr = app.add_subcommand("predict", "Score a manifest with one checkpoint");
    auto* pr_k = pr->add_option("--checkpoint", pred.checkpoint, "Checkpoint directory");
    auto* pr_m = pr->add_option("--manifest", pred.manifest, "Cohort manifest");
    auto* pr_o = pr->add_option("--out", pred.out, "Prediction CSV path");
    auto* pr_c = pr->add_option("--cache", pred.cache, "Preprocessed stack cache directory");

    EvaluateArgs eval;
    auto* ev = app.add_subcommand("evaluate", "AUC, DeLong comparisons and specificity at fixed sensitivity");
    auto* ev_p = ev->add_option("--predictions", eval.predictions, "Prediction CSVs, optionally NAME=path");
    auto* ev_r = ev->add_option("--reference", eval.reference, "Reference sequence name (default: first set)");
    auto* ev_t = ev->add_option("--targets", eval.targets, "Target sensitivities");
    auto* ev_c = ev->add_option("--calibration", eval.calibration, "Threshold source: test or val");
    auto* ev_o = ev->add_option("--out", eval.out, "Output directory");

    FnReportArgs fn;
    auto* fr = app.add_subcommand("fn-report", "Characterize false negatives at each threshold");
    auto* fr_p = fr->add_option("--predictions", fn.predictions, "Prediction CSVs, optionally NAME=path");
    auto* fr_m = fr->add_option("--manifest", fn.manifest, "Cohort manifest with lesion type and size");
    auto* fr_t = fr->add_option("--thresholds", fn.thresholds, "Target sensitivities");
    auto* fr_c = fr->add_option("--calibration", fn.calibration, "Threshold source: test or val");
    auto* fr_o = fr->add_option("--out", fn.out, "Output directory");

    ExplainArgs ex;
    auto* xp = app.add_subcommand("explain", "Render attention bundles for true positives");
    auto* xp_k = xp->add_option("--checkpoint", ex.checkpoint, "Checkpoint directory or cross-validation run directory");
    auto* xp_m = xp->add_option("--manifest", ex.manifest, "Cohort manifest");
    auto* xp_p = xp->add_option("--predictions", ex.predictions, "Prediction CSV");
    auto* xp_t = xp->add_option("--threshold-at", ex.threshold_at, "Target sensitivity fixing the threshold");
    auto* xp_d = xp->add_option("--display-channel", ex.display_channel, "Channel shown under the overlay");
    auto* xp_a = xp->add_option("--alpha", ex.alpha, "Overlay alpha scale");
    auto* xp_c = xp->add_option("--cache", ex.cache, "Preprocessed stack cache directory");
    auto* xp_l = xp->add_option("--limit", ex.limit, "Render at most this many cases (0 = all)");
    auto* xp_o = xp->add_option("--out", ex.out, "Bundle root directory");

    ReviewArgs rv;
    auto* re = app.add_subcommand("review", "Serve the rating API over a bundle root");
    auto* re_b = re->add_option("--bundles", rv.bundles, "Bundle root directory");
    auto* re_r = re->add_option("--ratings", rv.ratings, "Append-only rating log (JSONL)");
    auto* re_h = re->add_option("--host", rv.host, "Bind address");
    auto* re_p = re->add_option("--port", rv.port, "Port");
    auto* re_s = re->add_option("--static", rv.static_dir, "Built review UI served at /");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what(), 2);
    }

    try {
        Settings s;
        if (!config_path.empty()) {
            try {
                s.config = json::parse(read_text_file(config_path));
            } catch (const json::exception& e) {
                throw Error("format", config_path + ": " + e.what());
            }
            if (!s.config.is_object()) throw Error("format", config_path + ": config must be a JSON object");
        }
        if (!data_root.empty()) {
            s.data_root = data_root;
        } else if (const char* env = std::getenv("MST_DATA_ROOT"); env && *env) {
            s.data_root = env;
        } else if (s.config.contains("data_root")) {
            s.data_root = s.config.at("data_root").get<std::string>();
        }

        if (ph->parsed()) {
            const auto& c = s.section("phantom");
            from_config(ph_n, c, phantom.n);
            from_config(ph_f, c, phantom.positive_fraction);
            from_config(ph_s, c, phantom.seed);
            from_config(ph_q, c, phantom.sequences);
            from_config(ph_c, c, phantom.lesion_contrast);
            from_config(ph_o, c, phantom.out);
            return run_phantom(s, phantom);
        }
        if (pp->parsed()) {
            const auto& c = s.section("preprocess");
            from_config(pp_m, c, prep.manifest);
            from_config(pp_q, c, prep.sequences);
            from_config(pp_o, c, prep.out);
            return run_preprocess(s, prep);
        }
        if (fo->parsed()) {
            const auto& c = s.section("folds");
            from_config(fo_m, c, folds.manifest);
            from_config(fo_k, c, folds.k);
            from_config(fo_s, c, folds.seed);
            from_config(fo_o, c, folds.out);
            return run_folds(s, folds);
        }
        if (tr->parsed()) {
            const auto& c = s.section("train");
            from_config(tr_m, c, train.manifest);
            from_config(tr_p, c, train.fold_plan);
            from_config(tr_f, c, train.fold);
            from_config(tr_o, c, train.out);
            from_config(tr_c, c, train.cache);
            return run_train(s, train);
        }
        if (pr->parsed()) {
            const auto& c = s.section("predict");
            from_config(pr_k, c, pred.checkpoint);
            from_config(pr_m, c, pred.manifest);
            from_config(pr_o, c, pred.out);
            from_config(pr_c, c, pred.cache);
            return run_predict(s, pred);
        }
        if (ev->parsed()) {
            const auto& c = s.section("evaluate");
            from_config(ev_p, c, eval.predictions);
            from_config(ev_r, c, eval.reference);
            from_config(ev_t, c, eval.targets);
            from_config(ev_c, c, eval.calibration);
            from_config(ev_o, c, eval.out);
            return run_evaluate(s, eval);
        }
        if (fr->parsed()) {
            const auto& c = s.section("fn_report");
            from_config(fr_p, c, fn.predictions);
            from_config(fr_m, c, fn.manifest);
            from_config(fr_t, c, fn.thresholds);
            from_config(fr_c, c, fn.calibration);
            from_config(fr_o, c, fn.out);
            return run_fn_report(s, fn);
        }
        if (xp->parsed()) {
            const auto& c = s.section("explain");
            from_config(xp_k, c, ex.checkpoint);
            from_config(xp_m, c, ex.manifest);
            from_config(xp_p, c, ex.predictions);
            from_config(xp_t, c, ex.threshold_at);
            from_config(xp_d, c, ex.display_channel);
            from_config(xp_a, c, ex.alpha);
            from_config(xp_c, c, ex.cache);
            from_config(xp_l, c, ex.limit);
            from_config(xp_o, c, ex.out);
            return run_explain(s, ex);
        }
        if (re->parsed()) {
            const auto& c = s.section("review");
            from_config(re_b, c, rv.bundles);
            from_config(re_r, c, rv.ratings);
            from_config(re_h, c, rv.host);
            from_config(re_p, c, rv.port);
            from_config(re_s, c, rv.static_dir);
            return run_review(s, rv);
        }
    } catch (const Error& e) {
        return fail(e.kind(), e.what(), 1);
    } catch (const json::exception& e) {
        return fail("format", e.what(), 1);
    } catch (const std::exception& e) {
        return fail("internal", e.what(), 1);
    }
    return fail("usage", "no command given", 2);
}
