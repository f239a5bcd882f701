#pragma once

#include <span>
#include <string>
#include <vector>

namespace mst {

struct RocPoint {
    double threshold = 0.0;  // rule: score >= threshold => suspicious
    double sensitivity = 0.0;
    double specificity = 0.0;
    long true_positives = 0;
    long false_positives = 0;
};

/// One point per distinct score plus the +/-infinity sentinels, ordered by
/// increasing threshold. The scored inputs are kept so operating points can
/// name the exams they miss.
struct RocCurve {
    std::vector<RocPoint> points;
    long n_pos = 0;
    long n_neg = 0;
    std::vector<double> scores;
    std::vector<int> labels;
    std::vector<std::string> ids;
};

// Requires both classes and finite scores; labels are 0/1. `ids` may be empty.
RocCurve roc_curve(std::span<const double> scores, std::span<const int> labels,
                   std::span<const std::string> ids = {});

// Trapezoidal area, computed from integer counts so it equals the
// Mann-Whitney statistic with half credit for ties.
double auc(const RocCurve& curve);
double auc(std::span<const double> scores, std::span<const int> labels);

struct OperatingPoint {
    double target_sensitivity = 0.0;
    double threshold = 0.0;
    double achieved_sensitivity = 0.0;
    double specificity = 0.0;
    long true_positives = 0;
    long false_positives = 0;
    long n_pos = 0;
    long n_neg = 0;
    std::vector<std::string> fn_exam_ids;

    long fn_count() const { return n_pos - true_positives; }
    long fp_count() const { return false_positives; }
};

// Highest threshold whose sensitivity is at least the target (and hence the
// best specificity among qualifying thresholds).
OperatingPoint operating_point(const RocCurve& curve, double target_sensitivity);

// Midrank-based DeLong structural components for one score set.
struct DelongComponents {
    double auc = 0.0;
    std::vector<double> v10;  // per positive
    std::vector<double> v01;  // per negative
};

DelongComponents delong_components(std::span<const double> scores, std::span<const int> labels);

// DeLong variance of a single AUC.
double delong_variance(std::span<const double> scores, std::span<const int> labels);

struct ComparisonResult {
    std::string sequence_a;
    std::string sequence_b;
    double auc_a = 0.0;
    double auc_b = 0.0;
    double var_a = 0.0;
    double var_b = 0.0;
    double covariance = 0.0;
    double z_statistic = 0.0;
    double p_raw = 1.0;
    double p_adjusted = 1.0;
    std::string diagnostic;  // set when p is undefined (NaN)
};

// Paired two-sided DeLong test of AUC_a == AUC_b.
ComparisonResult delong_test(std::span<const double> scores_a, std::span<const double> scores_b,
                             std::span<const int> labels);

// Benjamini-Hochberg step-up adjusted p-values, in input order.
std::vector<double> benjamini_hochberg(std::span<const double> p_raw);

double two_sided_normal_p(double z);

struct MeanSd {
    double mean = 0.0;
    double sd = 0.0;  // sample (n - 1) SD; NaN when n < 2
    std::size_t n = 0;
};

MeanSd mean_sd(std::span<const double> values);

}  // namespace mst
