#include "mst/reports.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace mst {

using nlohmann::json;

namespace {

const double kNaN = std::numeric_limits<double>::quiet_NaN();

struct Scored {
    std::vector<double> scores;
    std::vector<int> labels;
    std::vector<std::string> ids;
};

Scored collect(const PredictionSet& set, const std::string& fold, SplitRole role) {
    Scored s;
    for (const auto& r : set.rows) {
        if (r.fold != fold || r.split_role != role) continue;
        s.scores.push_back(r.score);
        s.labels.push_back(r.label);
        s.ids.push_back(r.exam_id);
    }
    return s;
}

std::vector<std::string> test_folds(const PredictionSet& set) {
    std::vector<std::string> out;
    for (const auto& f : set.folds()) {
        for (const auto& r : set.rows) {
            if (r.fold == f && r.split_role == SplitRole::test) {
                out.push_back(f);
                break;
            }
        }
    }
    return out;
}

struct FoldOperating {
    double specificity = 0.0;
    long fp = 0;
    long n_neg = 0;
    std::vector<std::string> fn_ids;
};

FoldOperating fold_operating(const PredictionSet& set, const std::string& fold, const RocCurve& test_roc,
                             double target, Calibration calibration) {
    FoldOperating out;
    if (calibration == Calibration::test_fold) {
        auto op = operating_point(test_roc, target);
        out.specificity = op.specificity;
        out.fp = op.false_positives;
        out.n_neg = op.n_neg;
        out.fn_ids = op.fn_exam_ids;
        return out;
    }
    auto val = collect(set, fold, SplitRole::val);
    if (val.scores.empty()) throw Error("precondition", "fold " + fold + " has no validation predictions to calibrate on");
    auto op = operating_point(roc_curve(val.scores, val.labels, val.ids), target);
    out.n_neg = test_roc.n_neg;
    for (std::size_t i = 0; i < test_roc.scores.size(); ++i) {
        const bool flagged = test_roc.scores[i] >= op.threshold;
        if (test_roc.labels[i] == 0 && flagged) ++out.fp;
        if (test_roc.labels[i] == 1 && !flagged) out.fn_ids.push_back(test_roc.ids[i]);
    }
    out.specificity = 1.0 - static_cast<double>(out.fp) / static_cast<double>(out.n_neg);
    return out;
}

RocCurve fold_roc(const PredictionSet& set, const std::string& fold, const std::string& sequence) {
    auto s = collect(set, fold, SplitRole::test);
    try {
        return roc_curve(s.scores, s.labels, s.ids);
    } catch (const Error& e) {
        throw Error(e.kind(), sequence + ", fold " + fold + ": " + e.what());
    }
}

json mean_sd_json(const MeanSd& m) {
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    return json{{"mean", num(m.mean)}, {"sd", num(m.sd)}, {"n", m.n}};
}

MeanSd mean_sd_from_json(const json& j) {
    auto num = [](const json& v) { return v.is_null() ? kNaN : v.get<double>(); };
    MeanSd m;
    m.mean = num(j.at("mean"));
    m.sd = num(j.at("sd"));
    m.n = j.value("n", std::size_t{0});
    return m;
}

json num_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::string mean_sd_cell(const MeanSd& m, int decimals, double scale, const std::string& sep) {
    if (m.n == 0 || !std::isfinite(m.mean)) return "";
    auto out = format_fixed(m.mean * scale, decimals);
    if (std::isfinite(m.sd)) out += sep + format_fixed(m.sd * scale, decimals);
    return out;
}

std::string join_row(const std::vector<std::string>& cells, char sep) {
    std::string out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += sep;
        out += sep == ',' ? csv_escape(cells[i]) : cells[i];
    }
    return out + "\n";
}

}  // namespace

std::string format_target(double target) {
    const long tenths = std::lround(target * 1000.0);
    if (tenths % 10 == 0) return std::to_string(tenths / 10) + "%";
    return format_fixed(static_cast<double>(tenths) / 10.0, 1) + "%";
}

std::string format_p_value(double p) {
    if (!std::isfinite(p)) return "p=n/a";
    if (p < 0.001) return "p<.001";
    if (p > 0.99) return "p>.99";
    auto digits = format_fixed(p, p < 0.01 ? 3 : 2);
    return "p=" + digits.substr(1);  // drop the leading zero
}

RocCurve pooled_test_roc(const PredictionSet& set) {
    Scored s;
    for (const auto& r : set.rows) {
        if (r.split_role != SplitRole::test) continue;
        s.scores.push_back(r.score);
        s.labels.push_back(r.label);
        s.ids.push_back(r.exam_id);
    }
    return roc_curve(s.scores, s.labels, s.ids);
}

// ---- Table 2 ------------------------------------------------------------------

Table2Report aggregate_fold_metrics(const std::vector<NamedPredictions>& sets, const std::string& reference,
                                    const std::vector<double>& targets, Calibration calibration) {
    if (sets.empty()) throw Error("precondition", "no prediction sets to evaluate");
    Table2Report report;
    report.reference = reference;
    report.targets = targets;

    std::set<std::string> names;
    for (const auto& s : sets) {
        if (!names.insert(s.sequence).second) throw Error("validation", "duplicate sequence name '" + s.sequence + "'");
    }
    if (sets.size() > 1 && !names.count(reference)) {
        throw Error("validation", "reference sequence '" + reference + "' is not among the prediction sets");
    }

    for (const auto& named : sets) {
        Table2Row row;
        row.sequence = named.sequence;
        row.is_reference = sets.size() > 1 && named.sequence == reference;
        auto folds = test_folds(named.set);
        if (folds.empty()) throw Error("validation", named.sequence + ": no test-role predictions");

        std::vector<std::vector<double>> specs(targets.size());
        row.specificity.resize(targets.size());
        for (const auto& fold : folds) {
            auto roc = fold_roc(named.set, fold, named.sequence);
            row.fold_aucs.push_back(auc(roc));
            for (std::size_t t = 0; t < targets.size(); ++t) {
                auto op = fold_operating(named.set, fold, roc, targets[t], calibration);
                specs[t].push_back(op.specificity);
                row.specificity[t].pooled_fp += op.fp;
                row.specificity[t].pooled_neg += op.n_neg;
            }
        }
        row.auc = mean_sd(row.fold_aucs);
        for (std::size_t t = 0; t < targets.size(); ++t) {
            row.specificity[t].target = targets[t];
            row.specificity[t].specificity = mean_sd(specs[t]);
        }
        row.pooled_auc = auc(pooled_test_roc(named.set));
        report.rows.push_back(std::move(row));
    }

    if (sets.size() < 2) return report;

    // Pair pooled test predictions by exam id.
    std::vector<std::map<std::string, std::pair<double, int>>> by_exam(sets.size());
    for (std::size_t k = 0; k < sets.size(); ++k) {
        for (const auto& r : sets[k].set.rows) {
            if (r.split_role != SplitRole::test) continue;
            if (!by_exam[k].emplace(r.exam_id, std::make_pair(r.score, r.label)).second) {
                throw Error("validation", sets[k].sequence + ": exam '" + r.exam_id + "' tested more than once");
            }
        }
    }
    std::vector<double> p_raw;
    for (std::size_t a = 0; a < sets.size(); ++a) {
        for (std::size_t b = a + 1; b < sets.size(); ++b) {
            const auto& ma = by_exam[a];
            const auto& mb = by_exam[b];
            std::vector<double> sa, sb;
            std::vector<int> labels;
            for (const auto& [id, v] : ma) {
                auto it = mb.find(id);
                if (it == mb.end()) {
                    throw Error("validation", "exam '" + id + "' is scored for " + sets[a].sequence + " but not for " +
                                                  sets[b].sequence);
                }
                if (it->second.second != v.second) throw Error("validation", "exam '" + id + "' has conflicting labels");
                sa.push_back(v.first);
                sb.push_back(it->second.first);
                labels.push_back(v.second);
            }
            if (mb.size() != ma.size()) {
                throw Error("validation", "exam sets differ between " + sets[a].sequence + " and " + sets[b].sequence);
            }
            auto cmp = delong_test(sa, sb, labels);
            cmp.sequence_a = sets[a].sequence;
            cmp.sequence_b = sets[b].sequence;
            if (!cmp.diagnostic.empty()) report.warnings.push_back(cmp.sequence_a + " vs " + cmp.sequence_b + ": " + cmp.diagnostic);
            report.comparisons.push_back(std::move(cmp));
        }
    }

    // FDR over the defined p-values; undefined ones stay undefined.
    std::vector<std::size_t> defined;
    for (std::size_t i = 0; i < report.comparisons.size(); ++i) {
        if (std::isfinite(report.comparisons[i].p_raw)) {
            defined.push_back(i);
            p_raw.push_back(report.comparisons[i].p_raw);
        }
    }
    auto adjusted = benjamini_hochberg(p_raw);
    for (std::size_t k = 0; k < defined.size(); ++k) report.comparisons[defined[k]].p_adjusted = adjusted[k];

    for (auto& row : report.rows) {
        if (row.is_reference) continue;
        for (const auto& c : report.comparisons) {
            if ((c.sequence_a == row.sequence && c.sequence_b == reference) ||
                (c.sequence_b == row.sequence && c.sequence_a == reference)) {
                row.p_vs_reference = c.p_adjusted;
            }
        }
    }
    return report;
}

namespace {

std::vector<std::vector<std::string>> table2_cells(const Table2Report& report) {
    std::vector<std::vector<std::string>> out;
    std::vector<std::string> header = {"Sequence", "AUC (Mean ± SD)"};
    if (report.has_comparisons()) header.push_back("p-value vs " + report.reference);
    for (double t : report.targets) header.push_back("Specificity at " + format_target(t) + " Sensitivity (%)");
    out.push_back(header);
    for (const auto& row : report.rows) {
        std::vector<std::string> cells = {row.sequence, mean_sd_cell(row.auc, 2, 1.0, " ± ")};
        if (report.has_comparisons()) {
            cells.push_back(row.is_reference ? "-" : row.p_vs_reference ? format_p_value(*row.p_vs_reference) : "");
        }
        for (const auto& s : row.specificity) cells.push_back(mean_sd_cell(s.specificity, 1, 100.0, " ± "));
        out.push_back(cells);
    }
    return out;
}

}  // namespace

std::string render_table2_text(const Table2Report& report) {
    std::string out;
    for (const auto& cells : table2_cells(report)) out += join_row(cells, '\t');
    return out;
}

std::string render_table2_csv(const Table2Report& report) {
    std::string out;
    for (const auto& cells : table2_cells(report)) out += join_row(cells, ',');
    return out;
}

json to_json(const Table2Report& report) {
    json rows = json::array();
    for (const auto& r : report.rows) {
        json spec = json::array();
        for (const auto& s : r.specificity) {
            spec.push_back({{"target", s.target},
                            {"specificity", mean_sd_json(s.specificity)},
                            {"pooled_fp", s.pooled_fp},
                            {"pooled_neg", s.pooled_neg}});
        }
        json fold_aucs = json::array();
        for (double a : r.fold_aucs) fold_aucs.push_back(a);
        rows.push_back({{"sequence", r.sequence},
                        {"auc", mean_sd_json(r.auc)},
                        {"fold_aucs", fold_aucs},
                        {"pooled_auc", num_or_null(r.pooled_auc)},
                        {"specificity", spec},
                        {"p_vs_reference", r.p_vs_reference ? num_or_null(*r.p_vs_reference) : json(nullptr)},
                        {"is_reference", r.is_reference}});
    }
    json comparisons = json::array();
    for (const auto& c : report.comparisons) {
        comparisons.push_back({{"sequence_a", c.sequence_a},
                               {"sequence_b", c.sequence_b},
                               {"auc_a", c.auc_a},
                               {"auc_b", c.auc_b},
                               {"var_a", c.var_a},
                               {"var_b", c.var_b},
                               {"covariance", c.covariance},
                               {"z_statistic", num_or_null(c.z_statistic)},
                               {"p_raw", num_or_null(c.p_raw)},
                               {"p_adjusted", num_or_null(c.p_adjusted)},
                               {"diagnostic", c.diagnostic}});
    }
    return json{{"reference", report.reference},
                {"targets", report.targets},
                {"rows", rows},
                {"comparisons", comparisons},
                {"warnings", report.warnings}};
}

Table2Report table2_from_json(const json& j) {
    Table2Report report;
    report.reference = j.value("reference", std::string());
    report.targets = j.at("targets").get<std::vector<double>>();
    for (const auto& r : j.at("rows")) {
        Table2Row row;
        row.sequence = r.at("sequence").get<std::string>();
        row.auc = mean_sd_from_json(r.at("auc"));
        if (r.contains("fold_aucs")) row.fold_aucs = r.at("fold_aucs").get<std::vector<double>>();
        if (r.contains("pooled_auc") && !r.at("pooled_auc").is_null()) row.pooled_auc = r.at("pooled_auc").get<double>();
        for (const auto& s : r.at("specificity")) {
            SpecificityStats st;
            st.target = s.at("target").get<double>();
            st.specificity = mean_sd_from_json(s.at("specificity"));
            st.pooled_fp = s.value("pooled_fp", 0L);
            st.pooled_neg = s.value("pooled_neg", 0L);
            row.specificity.push_back(st);
        }
        if (r.contains("p_vs_reference") && !r.at("p_vs_reference").is_null()) {
            row.p_vs_reference = r.at("p_vs_reference").get<double>();
        }
        row.is_reference = r.value("is_reference", false);
        report.rows.push_back(std::move(row));
    }
    if (j.contains("comparisons")) {
        auto num = [](const json& v) { return v.is_null() ? kNaN : v.get<double>(); };
        for (const auto& c : j.at("comparisons")) {
            ComparisonResult cmp;
            cmp.sequence_a = c.at("sequence_a").get<std::string>();
            cmp.sequence_b = c.at("sequence_b").get<std::string>();
            cmp.auc_a = c.at("auc_a").get<double>();
            cmp.auc_b = c.at("auc_b").get<double>();
            cmp.var_a = c.value("var_a", 0.0);
            cmp.var_b = c.value("var_b", 0.0);
            cmp.covariance = c.value("covariance", 0.0);
            cmp.z_statistic = num(c.at("z_statistic"));
            cmp.p_raw = num(c.at("p_raw"));
            cmp.p_adjusted = num(c.at("p_adjusted"));
            cmp.diagnostic = c.value("diagnostic", std::string());
            report.comparisons.push_back(cmp);
        }
    }
    if (j.contains("warnings")) report.warnings = j.at("warnings").get<std::vector<std::string>>();
    return report;
}

// ---- Table 3 ------------------------------------------------------------------

Table3Report false_negative_report(const std::vector<NamedPredictions>& sets, const std::vector<double>& targets,
                                   const CohortManifest& manifest, Calibration calibration) {
    Table3Report report;
    for (const auto& named : sets) {
        auto folds = test_folds(named.set);
        std::vector<RocCurve> rocs;
        for (const auto& fold : folds) rocs.push_back(fold_roc(named.set, fold, named.sequence));

        for (double target : targets) {
            Table3Row row;
            row.sequence = named.sequence;
            row.target = target;
            for (std::size_t f = 0; f < folds.size(); ++f) {
                auto op = fold_operating(named.set, folds[f], rocs[f], target, calibration);
                row.fn_exam_ids.insert(row.fn_exam_ids.end(), op.fn_ids.begin(), op.fn_ids.end());
            }
            row.count = static_cast<long>(row.fn_exam_ids.size());
            std::vector<double> sizes;
            for (const auto& id : row.fn_exam_ids) {
                const auto* rec = manifest.find(id);
                if (!rec) {
                    report.warnings.push_back("false negative '" + id + "' is not in the manifest; counted as other");
                    row.type_counts[3] += 1;
                    continue;
                }
                if (rec->lesion_type) {
                    row.type_counts[static_cast<int>(*rec->lesion_type)] += 1;
                } else {
                    report.warnings.push_back("false negative '" + id + "' has no lesion type; counted as other");
                    row.type_counts[3] += 1;
                }
                if (rec->lesion_size_mm) sizes.push_back(*rec->lesion_size_mm);
                else report.warnings.push_back("false negative '" + id + "' has no lesion size; left out of size statistics");
            }
            row.size_mm = mean_sd(sizes);
            report.rows.push_back(std::move(row));
        }
    }
    return report;
}

namespace {

std::vector<std::vector<std::string>> table3_cells(const Table3Report& report, bool repeat_sequence) {
    std::vector<std::vector<std::string>> out;
    out.push_back({"Sequence", "Sensitivity threshold", "Count", "Mean Size (mm)", "Mass (%)", "NME (%)", "Foci (%)",
                   "Other (%)"});
    std::string previous;
    for (const auto& row : report.rows) {
        std::vector<std::string> cells;
        cells.push_back(repeat_sequence || row.sequence != previous ? row.sequence : "");
        previous = row.sequence;
        cells.push_back(format_target(row.target));
        cells.push_back(std::to_string(row.count));
        cells.push_back(row.count == 0 ? "" : mean_sd_cell(row.size_mm, 0, 1.0, "±"));
        long typed = 0;
        for (long c : row.type_counts) typed += c;
        for (long c : row.type_counts) {
            cells.push_back(row.count == 0 || typed == 0
                                ? ""
                                : std::to_string(std::lround(100.0 * static_cast<double>(c) / static_cast<double>(typed))));
        }
        out.push_back(cells);
    }
    return out;
}

}  // namespace

std::string render_table3_text(const Table3Report& report) {
    std::string out;
    for (const auto& cells : table3_cells(report, false)) out += join_row(cells, '\t');
    return out;
}

std::string render_table3_csv(const Table3Report& report) {
    std::string out;
    for (const auto& cells : table3_cells(report, true)) out += join_row(cells, ',');
    return out;
}

json to_json(const Table3Report& report) {
    json rows = json::array();
    for (const auto& r : report.rows) {
        rows.push_back({{"sequence", r.sequence},
                        {"target", r.target},
                        {"count", r.count},
                        {"size_mm", mean_sd_json(r.size_mm)},
                        {"type_counts",
                         {{"mass", r.type_counts[0]}, {"nme", r.type_counts[1]}, {"foci", r.type_counts[2]},
                          {"other", r.type_counts[3]}}},
                        {"fn_exam_ids", r.fn_exam_ids}});
    }
    return json{{"rows", rows}, {"warnings", report.warnings}};
}

Table3Report table3_from_json(const json& j) {
    Table3Report report;
    for (const auto& r : j.at("rows")) {
        Table3Row row;
        row.sequence = r.at("sequence").get<std::string>();
        row.target = r.at("target").get<double>();
        row.count = r.at("count").get<long>();
        row.size_mm = mean_sd_from_json(r.at("size_mm"));
        const auto& tc = r.at("type_counts");
        row.type_counts = {tc.at("mass").get<long>(), tc.at("nme").get<long>(), tc.at("foci").get<long>(),
                           tc.at("other").get<long>()};
        if (r.contains("fn_exam_ids")) row.fn_exam_ids = r.at("fn_exam_ids").get<std::vector<std::string>>();
        report.rows.push_back(std::move(row));
    }
    if (j.contains("warnings")) report.warnings = j.at("warnings").get<std::vector<std::string>>();
    return report;
}

// ---- ROC export ---------------------------------------------------------------

std::string roc_to_csv(const RocCurve& curve) {
    std::ostringstream out;
    out << "threshold,sensitivity,specificity,true_positives,false_positives\n";
    for (const auto& p : curve.points) {
        std::string t = std::isinf(p.threshold) ? (p.threshold > 0 ? "inf" : "-inf") : format_exact(p.threshold);
        out << t << ',' << format_exact(p.sensitivity) << ',' << format_exact(p.specificity) << ','
            << p.true_positives << ',' << p.false_positives << '\n';
    }
    return out.str();
}

std::vector<GuideLine> default_guide_lines() {
    return {{0.90, "#d62728", "90%"}, {0.95, "#e6c229", "95%"}, {0.975, "#8e44ad", "97.5%"}};
}

namespace {

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

}  // namespace

std::string render_roc_svg(const std::vector<std::pair<std::string, RocCurve>>& curves,
                           const std::vector<GuideLine>& guides, const std::string& title) {
    static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#17becf", "#9467bd", "#8c564b", "#e377c2"};
    const double left = 70, top = 50, size = 400;
    auto px = [&](double fpr) { return format_fixed(left + fpr * size, 2); };
    auto py = [&](double tpr) { return format_fixed(top + (1.0 - tpr) * size, 2); };

    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"520\" viewBox=\"0 0 640 520\" "
         "font-family=\"sans-serif\" font-size=\"12\">\n";
    s << "<rect width=\"640\" height=\"520\" fill=\"white\"/>\n";
    s << "<text x=\"" << left + size / 2 << "\" y=\"28\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title)
      << "</text>\n";
    s << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << size << "\" height=\"" << size
      << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 5; ++k) {
        const double v = k / 5.0;
        s << "<text x=\"" << px(v) << "\" y=\"" << format_fixed(top + size + 18, 2) << "\" text-anchor=\"middle\">"
          << format_fixed(v, 1) << "</text>\n";
        s << "<text x=\"" << format_fixed(left - 8, 2) << "\" y=\"" << py(v) << "\" text-anchor=\"end\" dy=\"4\">"
          << format_fixed(v, 1) << "</text>\n";
    }
    s << "<text x=\"" << left + size / 2 << "\" y=\"" << top + size + 40
      << "\" text-anchor=\"middle\">1 - Specificity</text>\n";
    s << "<text transform=\"translate(24," << top + size / 2
      << ") rotate(-90)\" text-anchor=\"middle\">Sensitivity</text>\n";

    s << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(1) << "\" y2=\"" << py(1)
      << "\" stroke=\"gray\" stroke-dasharray=\"6,4\"/>\n";
    for (const auto& g : guides) {
        s << "<line class=\"guide\" x1=\"" << px(0) << "\" y1=\"" << py(g.sensitivity) << "\" x2=\"" << px(1)
          << "\" y2=\"" << py(g.sensitivity) << "\" stroke=\"" << g.color << "\" stroke-dasharray=\"4,3\"/>\n";
        s << "<text class=\"guide-label\" x=\"" << format_fixed(left + size + 6, 2) << "\" y=\"" << py(g.sensitivity)
          << "\" dy=\"4\" fill=\"" << g.color << "\">" << xml_escape(g.label) << "</text>\n";
    }

    for (std::size_t c = 0; c < curves.size(); ++c) {
        const auto& [name, curve] = curves[c];
        const char* color = palette[c % std::size(palette)];
        s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        // Highest threshold first so the path runs from (0,0) to (1,1).
        for (std::size_t k = curve.points.size(); k-- > 0;) {
            const auto& p = curve.points[k];
            s << px(1.0 - p.specificity) << ',' << py(p.sensitivity) << (k ? " " : "");
        }
        s << "\"/>\n";
        const double ly = top + size - 20.0 * static_cast<double>(curves.size() - c) + 4;
        s << "<line x1=\"" << format_fixed(left + size - 190, 2) << "\" y1=\"" << format_fixed(ly - 4, 2) << "\" x2=\""
          << format_fixed(left + size - 170, 2) << "\" y2=\"" << format_fixed(ly - 4, 2) << "\" stroke=\"" << color
          << "\" stroke-width=\"2\"/>\n";
        s << "<text x=\"" << format_fixed(left + size - 165, 2) << "\" y=\"" << format_fixed(ly, 2) << "\">"
          << xml_escape(name) << " (AUC " << format_fixed(auc(curve), 2) << ")</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

}  // namespace mst
