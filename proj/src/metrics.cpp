#include "mst/metrics.hpp"

#include "mst/common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace mst {

namespace {

void check_inputs(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw Error("precondition", "scores and labels differ in length");
    long pos = 0, neg = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!std::isfinite(scores[i])) throw Error("precondition", "non-finite score at index " + std::to_string(i));
        if (labels[i] == 1) ++pos;
        else if (labels[i] == 0) ++neg;
        else throw Error("precondition", "labels must be 0 or 1");
    }
    if (pos == 0 || neg == 0) throw Error("precondition", "ROC analysis needs both classes");
}

// Average 1-based ranks with ties sharing their mean rank.
std::vector<double> midranks(std::span<const double> x) {
    const std::size_t n = x.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && x[order[j]] == x[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j - 1) + 1.0;
        for (std::size_t k = i; k < j; ++k) ranks[order[k]] = r;
        i = j;
    }
    return ranks;
}

// (2 * wins + ties) over all positive/negative pairs.
long long doubled_u_statistic(std::span<const double> scores, std::span<const int> labels) {
    auto r = midranks(scores);
    double pos_rank_sum2 = 0.0;  // twice the rank sum, an exact integer
    long long m = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] == 1) {
            pos_rank_sum2 += 2.0 * r[i];
            ++m;
        }
    }
    return static_cast<long long>(std::llround(pos_rank_sum2)) - m * (m + 1);
}

double sample_covariance(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t n = a.size();
    if (n < 2) return 0.0;
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(n);
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / static_cast<double>(n);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += (a[i] - ma) * (b[i] - mb);
    return s / static_cast<double>(n - 1);
}

}  // namespace

RocCurve roc_curve(std::span<const double> scores, std::span<const int> labels, std::span<const std::string> ids) {
    check_inputs(scores, labels);
    if (!ids.empty() && ids.size() != scores.size()) throw Error("precondition", "ids and scores differ in length");

    RocCurve c;
    c.scores.assign(scores.begin(), scores.end());
    c.labels.assign(labels.begin(), labels.end());
    c.ids.assign(ids.begin(), ids.end());
    c.n_pos = std::count(labels.begin(), labels.end(), 1);
    c.n_neg = static_cast<long>(labels.size()) - c.n_pos;

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    // Walk from the highest threshold down, then reverse.
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<RocPoint> desc;
    desc.push_back({inf, 0.0, 1.0, 0, 0});
    long tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        const double t = scores[order[i]];
        while (i < order.size() && scores[order[i]] == t) {
            (labels[order[i]] == 1 ? tp : fp) += 1;
            ++i;
        }
        desc.push_back({t, static_cast<double>(tp) / c.n_pos, 1.0 - static_cast<double>(fp) / c.n_neg, tp, fp});
    }
    desc.push_back({-inf, 1.0, 0.0, c.n_pos, c.n_neg});
    c.points.assign(desc.rbegin(), desc.rend());
    return c;
}

double auc(const RocCurve& curve) {
    // Twice the trapezoid area in count units: sum of dFP * (TP_a + TP_b).
    long long area2 = 0;
    for (std::size_t k = curve.points.size(); k-- > 1;) {
        const auto& hi = curve.points[k];
        const auto& lo = curve.points[k - 1];
        area2 += static_cast<long long>(lo.false_positives - hi.false_positives) *
                 (lo.true_positives + hi.true_positives);
    }
    return static_cast<double>(area2) / (2.0 * static_cast<double>(curve.n_pos) * static_cast<double>(curve.n_neg));
}

double auc(std::span<const double> scores, std::span<const int> labels) { return auc(roc_curve(scores, labels)); }

OperatingPoint operating_point(const RocCurve& curve, double target) {
    if (!(target > 0.0 && target <= 1.0)) throw Error("precondition", "target sensitivity must lie in (0, 1]");
    if (curve.n_pos == 0) throw Error("precondition", "operating point needs positives");
    const long needed = static_cast<long>(std::ceil(target * static_cast<double>(curve.n_pos) - 1e-9));

    OperatingPoint op;
    op.target_sensitivity = target;
    op.n_pos = curve.n_pos;
    op.n_neg = curve.n_neg;
    for (std::size_t k = curve.points.size(); k-- > 0;) {
        const auto& p = curve.points[k];
        if (p.true_positives >= needed) {
            op.threshold = p.threshold;
            op.achieved_sensitivity = p.sensitivity;
            op.specificity = p.specificity;
            op.true_positives = p.true_positives;
            op.false_positives = p.false_positives;
            break;
        }
    }
    for (std::size_t i = 0; i < curve.scores.size(); ++i) {
        if (curve.labels[i] == 1 && curve.scores[i] < op.threshold) {
            op.fn_exam_ids.push_back(curve.ids.empty() ? std::to_string(i) : curve.ids[i]);
        }
    }
    return op;
}

DelongComponents delong_components(std::span<const double> scores, std::span<const int> labels) {
    check_inputs(scores, labels);
    std::vector<double> pos, neg;
    for (std::size_t i = 0; i < scores.size(); ++i) (labels[i] == 1 ? pos : neg).push_back(scores[i]);
    const auto m = static_cast<double>(pos.size());
    const auto n = static_cast<double>(neg.size());

    std::vector<double> combined(pos);
    combined.insert(combined.end(), neg.begin(), neg.end());
    auto tz = midranks(combined);
    auto tx = midranks(pos);
    auto ty = midranks(neg);

    DelongComponents c;
    c.v10.resize(pos.size());
    c.v01.resize(neg.size());
    for (std::size_t i = 0; i < pos.size(); ++i) c.v10[i] = (tz[i] - tx[i]) / n;
    for (std::size_t j = 0; j < neg.size(); ++j) c.v01[j] = 1.0 - (tz[pos.size() + j] - ty[j]) / m;
    c.auc = static_cast<double>(doubled_u_statistic(scores, labels)) / (2.0 * m * n);
    return c;
}

double delong_variance(std::span<const double> scores, std::span<const int> labels) {
    auto c = delong_components(scores, labels);
    return sample_covariance(c.v10, c.v10) / static_cast<double>(c.v10.size()) +
           sample_covariance(c.v01, c.v01) / static_cast<double>(c.v01.size());
}

double two_sided_normal_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

ComparisonResult delong_test(std::span<const double> scores_a, std::span<const double> scores_b,
                             std::span<const int> labels) {
    if (scores_a.size() != scores_b.size() || scores_a.size() != labels.size()) {
        throw Error("precondition", "DeLong test needs paired score sets of equal length");
    }
    auto a = delong_components(scores_a, labels);
    auto b = delong_components(scores_b, labels);
    const double m = static_cast<double>(a.v10.size());
    const double n = static_cast<double>(a.v01.size());

    ComparisonResult r;
    r.auc_a = a.auc;
    r.auc_b = b.auc;
    r.var_a = sample_covariance(a.v10, a.v10) / m + sample_covariance(a.v01, a.v01) / n;
    r.var_b = sample_covariance(b.v10, b.v10) / m + sample_covariance(b.v01, b.v01) / n;
    r.covariance = sample_covariance(a.v10, b.v10) / m + sample_covariance(a.v01, b.v01) / n;
    const double diff = r.auc_a - r.auc_b;
    const double var = r.var_a + r.var_b - 2.0 * r.covariance;
    if (diff == 0.0) {
        r.z_statistic = 0.0;
        r.p_raw = 1.0;
    } else if (!(var > 0.0)) {
        r.z_statistic = std::numeric_limits<double>::quiet_NaN();
        r.p_raw = std::numeric_limits<double>::quiet_NaN();
        r.diagnostic = "zero variance of the AUC difference with unequal AUCs";
    } else {
        r.z_statistic = diff / std::sqrt(var);
        r.p_raw = two_sided_normal_p(r.z_statistic);
    }
    r.p_adjusted = r.p_raw;
    return r;
}

std::vector<double> benjamini_hochberg(std::span<const double> p_raw) {
    const std::size_t m = p_raw.size();
    for (double p : p_raw) {
        if (!(p >= 0.0 && p <= 1.0)) throw Error("precondition", "p-values must lie in [0, 1]");
    }
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p_raw[a] < p_raw[b]; });
    std::vector<double> adjusted(m);
    double running = 1.0;
    for (std::size_t k = m; k-- > 0;) {
        const double q = p_raw[order[k]] * static_cast<double>(m) / static_cast<double>(k + 1);
        running = std::min(running, q);
        adjusted[order[k]] = std::min(running, 1.0);
    }
    return adjusted;
}

MeanSd mean_sd(std::span<const double> values) {
    MeanSd r;
    r.n = values.size();
    if (values.empty()) {
        r.mean = r.sd = std::numeric_limits<double>::quiet_NaN();
        return r;
    }
    r.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    if (values.size() < 2) {
        r.sd = std::numeric_limits<double>::quiet_NaN();
        return r;
    }
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
    return r;
}

}  // namespace mst
