#pragma once

#include "mst/common.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mst {

enum class SequenceId { T1_pre, T1_post1, T1_sub, DWI_1500, T2w };
enum class Laterality { left, right };
enum class Label { likely_benign, suspicious };
enum class ParenchymaGrade { minimal, mild, moderate, marked };
enum class LesionType { mass, nme, foci, other };
enum class CohortKind { internal, external };

std::string to_string(SequenceId id);
std::string to_string(Laterality l);
std::string to_string(Label l);
std::string to_string(ParenchymaGrade g);
std::string to_string(LesionType t);
std::string to_string(CohortKind k);

// Parsers throw mst::Error("validation") on unknown names.
SequenceId parse_sequence_id(std::string_view s);
Laterality parse_laterality(std::string_view s);
Label parse_label(std::string_view s);
ParenchymaGrade parse_grade(std::string_view s);
LesionType parse_lesion_type(std::string_view s);
CohortKind parse_cohort(std::string_view s);

// Sequences a manifest may reference. Pre/post T1 only exist transiently
// (they are combined into T1_sub before anything is written).
bool is_manifest_sequence(SequenceId id);

std::vector<SequenceId> parse_sequence_list(std::string_view csv);  // "T2w,T1_sub" or "T2w+T1_sub"
std::string sequence_list_name(const std::vector<SequenceId>& ids);   // "T2w+T1_sub"

/// Inclusive lesion slice range and in-plane bounding box, expressed in the
/// resampled (38 x 224 x 224) grid of the exam's own breast half. Only the
/// phantom generator fills this in.
struct LesionLocation {
    int slice_lo = 0;
    int slice_hi = 0;
    int y0 = 0, x0 = 0, y1 = 0, x1 = 0;  // half-open box [y0,y1) x [x0,x1)

    bool operator==(const LesionLocation&) const = default;
};

struct ExamRecord {
    std::string exam_id;
    std::string patient_id;
    Laterality laterality = Laterality::left;
    std::map<SequenceId, std::string> sequence_paths;
    std::optional<int> birads;
    std::optional<Label> label;
    std::optional<ParenchymaGrade> bpe_grade;
    std::optional<ParenchymaGrade> bpd_grade;
    std::optional<double> lesion_size_mm;
    std::optional<LesionType> lesion_type;
    CohortKind cohort = CohortKind::internal;
    std::optional<LesionLocation> lesion_location;

    bool operator==(const ExamRecord&) const = default;
};

struct CohortManifest {
    std::vector<ExamRecord> records;
    std::string schema_version = "1";
    // Directory that relative sequence paths resolve against.
    std::filesystem::path data_root;

    std::filesystem::path resolve(const std::string& relative) const;
    const ExamRecord* find(std::string_view exam_id) const;
};

// Validates every ExamRecord invariant. Throws Error("validation") naming the
// offending record.
void validate_manifest(const CohortManifest& manifest);

// CSV or JSONL (chosen by extension). The data root defaults to the manifest's
// directory unless MST_DATA_ROOT is set.
CohortManifest load_manifest(const std::filesystem::path& path);
void save_manifest_csv(const CohortManifest& manifest, const std::filesystem::path& path);
void save_manifest_jsonl(const CohortManifest& manifest, const std::filesystem::path& path);

// Highest BI-RADS category (1-6) mentioned in free report text. Subcategories
// 4a/4b/4c count as 4.
std::optional<int> parse_birads(std::string_view report_text);

// 1-3 -> likely_benign, 4-6 -> suspicious. Anything else (including BI-RADS 0)
// throws Error("precondition").
Label binarize_label(int birads);

// --- exclusion rules -------------------------------------------------------

struct ExclusionRule {
    std::string name;
    // True when the record must be excluded.
    std::function<bool(const ExamRecord&)> excludes;
};

struct ExclusionEntry {
    std::string exam_id;
    std::string rule;
};

using ExclusionLog = std::vector<ExclusionEntry>;

// Built-in rules: missing_T1_sub, missing_DWI_1500, missing_T2w, missing_birads,
// missing_label, external_cohort, internal_cohort, birads_3.
ExclusionRule make_exclusion_rule(std::string_view name);
std::vector<ExclusionRule> make_exclusion_rules(const std::vector<std::string>& names);
std::vector<std::string> builtin_exclusion_rule_names();

struct ExclusionResult {
    CohortManifest manifest;
    ExclusionLog log;
};

ExclusionResult apply_exclusions(const CohortManifest& manifest,
                                 const std::vector<ExclusionRule>& rules);

void save_exclusion_log(const ExclusionLog& log, const std::filesystem::path& path);

// --- folds -----------------------------------------------------------------

enum class SplitRole { train, val, test };
std::string to_string(SplitRole r);
SplitRole parse_split_role(std::string_view s);

struct FoldPlan {
    int n_folds = 5;
    std::uint64_t seed = 0;
    // exam_id -> role in fold 0..n_folds-1
    std::map<std::string, std::vector<SplitRole>> assignments;

    std::vector<std::string> exams_with_role(int fold, SplitRole role) const;
    bool operator==(const FoldPlan&) const = default;
};

// Patients are stratified by label into 2*n_folds shards. Fold i tests on
// shard i, validates on shard i+1 (mod 2n) and trains on the rest.
FoldPlan make_folds(const CohortManifest& manifest, int n_folds, std::uint64_t seed);

std::string fold_plan_to_json(const FoldPlan& plan);
FoldPlan fold_plan_from_json(const std::string& text);
FoldPlan load_fold_plan(const std::filesystem::path& path);
void save_fold_plan(const FoldPlan& plan, const std::filesystem::path& path);

}  // namespace mst
