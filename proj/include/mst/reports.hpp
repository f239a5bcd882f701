#pragma once

#include "mst/cohort.hpp"
#include "mst/metrics.hpp"
#include "mst/predictions.hpp"

#include "json.hpp"

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace mst {

inline const std::vector<double> kDefaultTargets = {0.90, 0.95, 0.975};

struct NamedPredictions {
    std::string sequence;  // display name, e.g. "T2w+T1_sub"
    PredictionSet set;
};

// Where the operating threshold of each fold comes from.
enum class Calibration { test_fold, validation_fold };

// ---- Table 2 ----------------------------------------------------------------

struct SpecificityStats {
    double target = 0.0;
    MeanSd specificity;  // fractions, across folds
    long pooled_fp = 0;  // summed over folds
    long pooled_neg = 0;
};

struct Table2Row {
    std::string sequence;
    MeanSd auc;
    std::vector<double> fold_aucs;
    double pooled_auc = 0.0;
    std::vector<SpecificityStats> specificity;
    std::optional<double> p_vs_reference;  // FDR-adjusted
    bool is_reference = false;
};

struct Table2Report {
    std::string reference;
    std::vector<double> targets;
    std::vector<Table2Row> rows;
    std::vector<ComparisonResult> comparisons;  // all pairs, adjusted
    std::vector<std::string> warnings;

    bool has_comparisons() const { return rows.size() > 1; }
};

Table2Report aggregate_fold_metrics(const std::vector<NamedPredictions>& sets, const std::string& reference,
                                    const std::vector<double>& targets = kDefaultTargets,
                                    Calibration calibration = Calibration::test_fold);

std::string render_table2_text(const Table2Report& report);
std::string render_table2_csv(const Table2Report& report);
nlohmann::json to_json(const Table2Report& report);
Table2Report table2_from_json(const nlohmann::json& j);

// ---- Table 3 ----------------------------------------------------------------

struct Table3Row {
    std::string sequence;
    double target = 0.0;
    long count = 0;
    MeanSd size_mm;                  // over FNs with a recorded size
    std::array<long, 4> type_counts{};  // mass, NME, foci, other
    std::vector<std::string> fn_exam_ids;
};

struct Table3Report {
    std::vector<Table3Row> rows;
    std::vector<std::string> warnings;
};

Table3Report false_negative_report(const std::vector<NamedPredictions>& sets, const std::vector<double>& targets,
                                   const CohortManifest& manifest,
                                   Calibration calibration = Calibration::test_fold);

std::string render_table3_text(const Table3Report& report);
std::string render_table3_csv(const Table3Report& report);
nlohmann::json to_json(const Table3Report& report);
Table3Report table3_from_json(const nlohmann::json& j);

// ---- formatting helpers -------------------------------------------------------

std::string format_target(double target);   // 0.975 -> "97.5%"
std::string format_p_value(double p);       // 0.49 -> "p=.49"

// ---- ROC export ---------------------------------------------------------------

std::string roc_to_csv(const RocCurve& curve);

struct GuideLine {
    double sensitivity;
    std::string color;
    std::string label;
};

// Red 90%, yellow 95%, purple 97.5%.
std::vector<GuideLine> default_guide_lines();

// Line chart of sensitivity against 1 - specificity with a dashed chance
// diagonal and dashed horizontal sensitivity guides.
std::string render_roc_svg(const std::vector<std::pair<std::string, RocCurve>>& curves,
                           const std::vector<GuideLine>& guides, const std::string& title);

// Pooled test-role ROC of a prediction set.
RocCurve pooled_test_roc(const PredictionSet& set);

}  // namespace mst
