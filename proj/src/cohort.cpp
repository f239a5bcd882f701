#include "mst/cohort.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>
#include <regex>
#include <set>
#include <sstream>

namespace mst {

using nlohmann::json;

namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::array<std::pair<E, const char*>, N>& table,
             const char* what) {
    for (const auto& [value, name] : table) {
        if (s == name) return value;
    }
    throw Error("validation", std::string("unknown ") + what + " '" + std::string(s) + "'");
}

template <typename E, std::size_t N>
std::string enum_name(E v, const std::array<std::pair<E, const char*>, N>& table) {
    for (const auto& [value, name] : table) {
        if (value == v) return name;
    }
    return "?";
}

constexpr std::array<std::pair<SequenceId, const char*>, 5> kSequences{{
    {SequenceId::T1_pre, "T1_pre"},
    {SequenceId::T1_post1, "T1_post1"},
    {SequenceId::T1_sub, "T1_sub"},
    {SequenceId::DWI_1500, "DWI_1500"},
    {SequenceId::T2w, "T2w"},
}};
constexpr std::array<std::pair<Laterality, const char*>, 2> kLaterality{{
    {Laterality::left, "left"},
    {Laterality::right, "right"},
}};
constexpr std::array<std::pair<Label, const char*>, 2> kLabels{{
    {Label::likely_benign, "likely_benign"},
    {Label::suspicious, "suspicious"},
}};
constexpr std::array<std::pair<ParenchymaGrade, const char*>, 4> kGrades{{
    {ParenchymaGrade::minimal, "minimal"},
    {ParenchymaGrade::mild, "mild"},
    {ParenchymaGrade::moderate, "moderate"},
    {ParenchymaGrade::marked, "marked"},
}};
constexpr std::array<std::pair<LesionType, const char*>, 4> kLesionTypes{{
    {LesionType::mass, "mass"},
    {LesionType::nme, "nme"},
    {LesionType::foci, "foci"},
    {LesionType::other, "other"},
}};
constexpr std::array<std::pair<CohortKind, const char*>, 2> kCohorts{{
    {CohortKind::internal, "internal"},
    {CohortKind::external, "external"},
}};
constexpr std::array<std::pair<SplitRole, const char*>, 3> kRoles{{
    {SplitRole::train, "train"},
    {SplitRole::val, "val"},
    {SplitRole::test, "test"},
}};

const std::vector<std::string> kColumns = {
    "exam_id",   "patient_id", "laterality",     "sequence_paths", "birads",      "label",
    "bpe_grade", "bpd_grade",  "lesion_size_mm", "lesion_type",    "cohort",      "lesion_location",
};
const std::vector<std::string> kRequiredColumns = {"exam_id", "patient_id", "laterality",
                                                   "sequence_paths"};

std::string row_context(const std::string& where, const std::string& field) {
    return where + ", field '" + field + "'";
}

int parse_int(const std::string& s, const std::string& where, const std::string& field) {
    try {
        std::size_t pos = 0;
        int v = std::stoi(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw Error("validation", row_context(where, field) + ": not an integer: '" + s + "'");
    }
}

double parse_real(const std::string& s, const std::string& where, const std::string& field) {
    try {
        std::size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw Error("validation", row_context(where, field) + ": not a number: '" + s + "'");
    }
}

template <typename F>
auto with_field(const std::string& where, const std::string& field, F&& f) {
    try {
        return f();
    } catch (const Error& e) {
        throw Error(e.kind(), row_context(where, field) + ": " + e.what());
    }
}

std::map<SequenceId, std::string> parse_sequence_paths_cell(const std::string& cell,
                                                            const std::string& where) {
    std::map<SequenceId, std::string> paths;
    if (cell.empty()) return paths;
    for (const auto& entry : split(cell, ';')) {
        auto item = trim(entry);
        if (item.empty()) continue;
        auto eq = item.find('=');
        if (eq == std::string::npos) {
            throw Error("validation", row_context(where, "sequence_paths") +
                                          ": expected SEQ=path, got '" + item + "'");
        }
        auto id = with_field(where, "sequence_paths",
                             [&] { return parse_sequence_id(trim(item.substr(0, eq))); });
        if (!is_manifest_sequence(id)) {
            throw Error("validation", row_context(where, "sequence_paths") +
                                          ": unknown sequence-id '" + to_string(id) + "'");
        }
        paths[id] = trim(item.substr(eq + 1));
    }
    return paths;
}

LesionLocation parse_location_cell(const std::string& cell, const std::string& where) {
    auto parts = split(cell, ':');
    if (parts.size() != 6) {
        throw Error("validation", row_context(where, "lesion_location") +
                                      ": expected lo:hi:y0:x0:y1:x1");
    }
    LesionLocation loc;
    int* dst[] = {&loc.slice_lo, &loc.slice_hi, &loc.y0, &loc.x0, &loc.y1, &loc.x1};
    for (std::size_t i = 0; i < 6; ++i) *dst[i] = parse_int(trim(parts[i]), where, "lesion_location");
    return loc;
}

std::string location_cell(const LesionLocation& loc) {
    std::ostringstream ss;
    ss << loc.slice_lo << ':' << loc.slice_hi << ':' << loc.y0 << ':' << loc.x0 << ':' << loc.y1
       << ':' << loc.x1;
    return ss.str();
}

// Record-local invariants plus label derivation from BI-RADS.
void check_record(ExamRecord& r, const std::string& where) {
    if (r.exam_id.empty()) throw Error("validation", row_context(where, "exam_id") + ": empty");
    if (r.patient_id.empty()) throw Error("validation", row_context(where, "patient_id") + ": empty");
    if (r.birads) {
        if (*r.birads < 1 || *r.birads > 6) {
            throw Error("validation", row_context(where, "birads") + ": value " +
                                          std::to_string(*r.birads) + " outside 1-6");
        }
        Label derived = binarize_label(*r.birads);
        if (r.label && *r.label != derived) {
            throw Error("validation", row_context(where, "label") + ": '" + to_string(*r.label) +
                                          "' inconsistent with BI-RADS " +
                                          std::to_string(*r.birads));
        }
        r.label = derived;
    }
    if (r.lesion_size_mm && !(*r.lesion_size_mm >= 0.0)) {
        throw Error("validation", row_context(where, "lesion_size_mm") + ": must be >= 0");
    }
    for (const auto& [id, path] : r.sequence_paths) {
        if (!is_manifest_sequence(id)) {
            throw Error("validation", row_context(where, "sequence_paths") +
                                          ": unknown sequence-id '" + to_string(id) + "'");
        }
        if (path.empty()) {
            throw Error("validation", row_context(where, "sequence_paths") + ": empty path for " +
                                          to_string(id));
        }
    }
}

class UniquenessChecker {
public:
    void add(const ExamRecord& r, const std::string& where) {
        if (!ids_.insert(r.exam_id).second) {
            throw Error("validation", row_context(where, "exam_id") + ": duplicate exam_id '" +
                                          r.exam_id + "'");
        }
        if (!sides_.insert({r.patient_id, r.laterality}).second) {
            throw Error("validation", row_context(where, "laterality") + ": patient '" +
                                          r.patient_id + "' already has a " +
                                          to_string(r.laterality) + " exam");
        }
    }

private:
    std::set<std::string> ids_;
    std::set<std::pair<std::string, Laterality>> sides_;
};

std::filesystem::path default_data_root(const std::filesystem::path& manifest_path) {
    if (const char* env = std::getenv("MST_DATA_ROOT"); env != nullptr && *env != '\0') {
        return env;
    }
    return manifest_path.parent_path();
}

ExamRecord record_from_json(const json& j, const std::string& where) {
    for (const auto& col : kRequiredColumns) {
        if (!j.contains(col)) {
            throw Error("validation", where + ": missing required column '" + col + "'");
        }
    }
    auto str = [&](const char* key) -> std::optional<std::string> {
        if (!j.contains(key) || j[key].is_null()) return std::nullopt;
        if (j[key].is_string()) {
            auto s = j[key].get<std::string>();
            if (s.empty()) return std::nullopt;
            return s;
        }
        return j[key].dump();
    };
    ExamRecord r;
    r.exam_id = str("exam_id").value_or("");
    r.patient_id = str("patient_id").value_or("");
    r.laterality = with_field(where, "laterality",
                              [&] { return parse_laterality(str("laterality").value_or("")); });
    const auto& paths = j["sequence_paths"];
    if (paths.is_object()) {
        for (const auto& [key, value] : paths.items()) {
            auto id = with_field(where, "sequence_paths", [&] { return parse_sequence_id(key); });
            if (!is_manifest_sequence(id)) {
                throw Error("validation", row_context(where, "sequence_paths") +
                                              ": unknown sequence-id '" + key + "'");
            }
            r.sequence_paths[id] = value.get<std::string>();
        }
    } else if (paths.is_string()) {
        r.sequence_paths = parse_sequence_paths_cell(paths.get<std::string>(), where);
    } else if (!paths.is_null()) {
        throw Error("validation", row_context(where, "sequence_paths") + ": expected object");
    }
    if (j.contains("birads") && !j["birads"].is_null()) {
        if (j["birads"].is_number_integer()) r.birads = j["birads"].get<int>();
        else if (auto s = str("birads")) r.birads = parse_int(*s, where, "birads");
    }
    if (auto s = str("label")) r.label = with_field(where, "label", [&] { return parse_label(*s); });
    if (auto s = str("bpe_grade")) r.bpe_grade = with_field(where, "bpe_grade", [&] { return parse_grade(*s); });
    if (auto s = str("bpd_grade")) r.bpd_grade = with_field(where, "bpd_grade", [&] { return parse_grade(*s); });
    if (j.contains("lesion_size_mm") && j["lesion_size_mm"].is_number()) {
        r.lesion_size_mm = j["lesion_size_mm"].get<double>();
    } else if (auto s = str("lesion_size_mm")) {
        r.lesion_size_mm = parse_real(*s, where, "lesion_size_mm");
    }
    if (auto s = str("lesion_type")) r.lesion_type = with_field(where, "lesion_type", [&] { return parse_lesion_type(*s); });
    if (auto s = str("cohort")) r.cohort = with_field(where, "cohort", [&] { return parse_cohort(*s); });
    if (j.contains("lesion_location") && j["lesion_location"].is_array()) {
        auto v = j["lesion_location"].get<std::vector<int>>();
        if (v.size() != 6) {
            throw Error("validation", row_context(where, "lesion_location") + ": expected 6 integers");
        }
        r.lesion_location = LesionLocation{v[0], v[1], v[2], v[3], v[4], v[5]};
    } else if (auto s = str("lesion_location")) {
        r.lesion_location = parse_location_cell(*s, where);
    }
    return r;
}

json record_to_json(const ExamRecord& r) {
    json j;
    j["exam_id"] = r.exam_id;
    j["patient_id"] = r.patient_id;
    j["laterality"] = to_string(r.laterality);
    json paths = json::object();
    for (const auto& [id, p] : r.sequence_paths) paths[to_string(id)] = p;
    j["sequence_paths"] = paths;
    j["birads"] = r.birads ? json(*r.birads) : json(nullptr);
    j["label"] = r.label ? json(to_string(*r.label)) : json(nullptr);
    j["bpe_grade"] = r.bpe_grade ? json(to_string(*r.bpe_grade)) : json(nullptr);
    j["bpd_grade"] = r.bpd_grade ? json(to_string(*r.bpd_grade)) : json(nullptr);
    j["lesion_size_mm"] = r.lesion_size_mm ? json(*r.lesion_size_mm) : json(nullptr);
    j["lesion_type"] = r.lesion_type ? json(to_string(*r.lesion_type)) : json(nullptr);
    j["cohort"] = to_string(r.cohort);
    if (r.lesion_location) {
        const auto& l = *r.lesion_location;
        j["lesion_location"] = {l.slice_lo, l.slice_hi, l.y0, l.x0, l.y1, l.x1};
    }
    return j;
}

CohortManifest load_manifest_csv(const std::filesystem::path& path) {
    auto table = read_csv(path);
    for (const auto& col : kRequiredColumns) {
        if (table.column(col) < 0) {
            throw Error("validation", path.string() + ": missing required column '" + col + "'");
        }
    }
    for (const auto& h : table.header) {
        if (std::find(kColumns.begin(), kColumns.end(), h) == kColumns.end()) {
            throw Error("validation", path.string() + ": unknown column '" + h + "'");
        }
    }
    CohortManifest m;
    UniquenessChecker unique;
    for (const auto& row : table.rows) {
        std::string where = path.filename().string() + " row " + std::to_string(row.line);
        if (row.cells.size() != table.header.size()) {
            throw Error("format", where + ": expected " + std::to_string(table.header.size()) +
                                      " cells, got " + std::to_string(row.cells.size()));
        }
        json j = json::object();
        for (std::size_t c = 0; c < table.header.size(); ++c) {
            if (!row.cells[c].empty()) j[table.header[c]] = row.cells[c];
        }
        for (const auto& col : kRequiredColumns) {
            if (!j.contains(col) && col != "sequence_paths") {
                throw Error("validation", row_context(where, col) + ": empty");
            }
            if (!j.contains(col)) j[col] = "";
        }
        ExamRecord r = record_from_json(j, where);
        check_record(r, where);
        unique.add(r, where);
        m.records.push_back(std::move(r));
    }
    return m;
}

CohortManifest load_manifest_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("io", "cannot open " + path.string());
    CohortManifest m;
    UniquenessChecker unique;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        std::string where = path.filename().string() + " row " + std::to_string(lineno);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw Error("format", where + ": " + e.what());
        }
        if (j.contains("schema_version") && !j.contains("exam_id")) {
            m.schema_version = j["schema_version"].get<std::string>();
            continue;
        }
        ExamRecord r = record_from_json(j, where);
        check_record(r, where);
        unique.add(r, where);
        m.records.push_back(std::move(r));
    }
    return m;
}

}  // namespace

std::string to_string(SequenceId id) { return enum_name(id, kSequences); }
std::string to_string(Laterality l) { return enum_name(l, kLaterality); }
std::string to_string(Label l) { return enum_name(l, kLabels); }
std::string to_string(ParenchymaGrade g) { return enum_name(g, kGrades); }
std::string to_string(LesionType t) { return enum_name(t, kLesionTypes); }
std::string to_string(CohortKind k) { return enum_name(k, kCohorts); }
std::string to_string(SplitRole r) { return enum_name(r, kRoles); }

SequenceId parse_sequence_id(std::string_view s) { return parse_enum(s, kSequences, "sequence-id"); }
Laterality parse_laterality(std::string_view s) { return parse_enum(s, kLaterality, "laterality"); }
Label parse_label(std::string_view s) { return parse_enum(s, kLabels, "label"); }
ParenchymaGrade parse_grade(std::string_view s) { return parse_enum(s, kGrades, "grade"); }
LesionType parse_lesion_type(std::string_view s) {
    // Table 3 uses the upper-case abbreviation.
    if (s == "NME") return LesionType::nme;
    return parse_enum(s, kLesionTypes, "lesion type");
}
CohortKind parse_cohort(std::string_view s) { return parse_enum(s, kCohorts, "cohort"); }
SplitRole parse_split_role(std::string_view s) { return parse_enum(s, kRoles, "split role"); }

bool is_manifest_sequence(SequenceId id) {
    return id == SequenceId::T1_sub || id == SequenceId::DWI_1500 || id == SequenceId::T2w;
}

std::vector<SequenceId> parse_sequence_list(std::string_view text) {
    std::string normalized(text);
    std::replace(normalized.begin(), normalized.end(), '+', ',');
    std::vector<SequenceId> ids;
    for (const auto& part : split(normalized, ',')) {
        auto t = trim(part);
        if (!t.empty()) ids.push_back(parse_sequence_id(t));
    }
    if (ids.empty()) throw Error("validation", "empty sequence list");
    return ids;
}

std::string sequence_list_name(const std::vector<SequenceId>& ids) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += '+';
        out += to_string(ids[i]);
    }
    return out;
}

std::filesystem::path CohortManifest::resolve(const std::string& relative) const {
    std::filesystem::path p(relative);
    if (p.is_absolute()) return p;
    return data_root / p;
}

const ExamRecord* CohortManifest::find(std::string_view exam_id) const {
    for (const auto& r : records) {
        if (r.exam_id == exam_id) return &r;
    }
    return nullptr;
}

void validate_manifest(const CohortManifest& manifest) {
    UniquenessChecker unique;
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        std::string where = "record " + std::to_string(i + 1);
        ExamRecord copy = manifest.records[i];
        check_record(copy, where);
        unique.add(copy, where);
    }
}

CohortManifest load_manifest(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw Error("io", "manifest not found: " + path.string());
    auto ext = path.extension().string();
    CohortManifest m = (ext == ".jsonl" || ext == ".json") ? load_manifest_jsonl(path)
                                                           : load_manifest_csv(path);
    m.data_root = default_data_root(path);
    return m;
}

void save_manifest_csv(const CohortManifest& manifest, const std::filesystem::path& path) {
    std::ostringstream out;
    for (std::size_t i = 0; i < kColumns.size(); ++i) out << (i ? "," : "") << kColumns[i];
    out << '\n';
    for (const auto& r : manifest.records) {
        std::string paths;
        for (const auto& [id, p] : r.sequence_paths) {
            if (!paths.empty()) paths += ';';
            paths += to_string(id) + "=" + p;
        }
        std::vector<std::string> cells = {
            r.exam_id,
            r.patient_id,
            to_string(r.laterality),
            paths,
            r.birads ? std::to_string(*r.birads) : "",
            r.label ? to_string(*r.label) : "",
            r.bpe_grade ? to_string(*r.bpe_grade) : "",
            r.bpd_grade ? to_string(*r.bpd_grade) : "",
            r.lesion_size_mm ? format_exact(*r.lesion_size_mm) : "",
            r.lesion_type ? to_string(*r.lesion_type) : "",
            to_string(r.cohort),
            r.lesion_location ? location_cell(*r.lesion_location) : "",
        };
        for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << csv_escape(cells[i]);
        out << '\n';
    }
    write_text_file(path, out.str());
}

void save_manifest_jsonl(const CohortManifest& manifest, const std::filesystem::path& path) {
    std::ostringstream out;
    out << json{{"schema_version", manifest.schema_version}}.dump() << '\n';
    for (const auto& r : manifest.records) out << record_to_json(r).dump() << '\n';
    write_text_file(path, out.str());
}

std::optional<int> parse_birads(std::string_view report_text) {
    // "BI-RADS 4b", "BIRADS: 2", "Bi-Rads category 5", "BI-RADS-Kategorie 3", ...
    static const std::regex pattern(
        R"(bi[\s\-]?rads[\s:\-]*(?:(?:category|cat\.?|kategorie)[\s:\-]*)?([0-6])([abc])?(?![0-9]))",
        std::regex::icase | std::regex::ECMAScript);
    std::optional<int> best;
    std::string text(report_text);
    for (auto it = std::sregex_iterator(text.begin(), text.end(), pattern);
         it != std::sregex_iterator(); ++it) {
        int value = (*it)[1].str()[0] - '0';
        if (value < 1) continue;
        if (!best || value > *best) best = value;
    }
    return best;
}

Label binarize_label(int birads) {
    if (birads < 1 || birads > 6) {
        throw Error("precondition", "BI-RADS " + std::to_string(birads) + " outside 1-6");
    }
    return birads <= 3 ? Label::likely_benign : Label::suspicious;
}

ExclusionRule make_exclusion_rule(std::string_view name) {
    auto missing = [](SequenceId id) {
        return [id](const ExamRecord& r) { return !r.sequence_paths.contains(id); };
    };
    if (name == "missing_T1_sub") return {std::string(name), missing(SequenceId::T1_sub)};
    if (name == "missing_DWI_1500") return {std::string(name), missing(SequenceId::DWI_1500)};
    if (name == "missing_T2w") return {std::string(name), missing(SequenceId::T2w)};
    if (name == "missing_birads") {
        return {std::string(name), [](const ExamRecord& r) { return !r.birads.has_value(); }};
    }
    if (name == "missing_label") {
        return {std::string(name), [](const ExamRecord& r) { return !r.label.has_value(); }};
    }
    if (name == "external_cohort") {
        return {std::string(name), [](const ExamRecord& r) { return r.cohort == CohortKind::external; }};
    }
    if (name == "internal_cohort") {
        return {std::string(name), [](const ExamRecord& r) { return r.cohort == CohortKind::internal; }};
    }
    if (name == "birads_3") {
        return {std::string(name), [](const ExamRecord& r) { return r.birads == 3; }};
    }
    throw Error("validation", "unknown exclusion rule '" + std::string(name) + "'");
}

std::vector<ExclusionRule> make_exclusion_rules(const std::vector<std::string>& names) {
    std::vector<ExclusionRule> rules;
    rules.reserve(names.size());
    for (const auto& n : names) rules.push_back(make_exclusion_rule(n));
    return rules;
}

std::vector<std::string> builtin_exclusion_rule_names() {
    return {"missing_T1_sub", "missing_DWI_1500", "missing_T2w",     "missing_birads",
            "missing_label",  "external_cohort",  "internal_cohort", "birads_3"};
}

ExclusionResult apply_exclusions(const CohortManifest& manifest,
                                 const std::vector<ExclusionRule>& rules) {
    ExclusionResult result;
    result.manifest.schema_version = manifest.schema_version;
    result.manifest.data_root = manifest.data_root;
    for (const auto& r : manifest.records) {
        auto failing = std::find_if(rules.begin(), rules.end(),
                                    [&](const ExclusionRule& rule) { return rule.excludes(r); });
        if (failing == rules.end()) {
            result.manifest.records.push_back(r);
        } else {
            result.log.push_back({r.exam_id, failing->name});
        }
    }
    return result;
}

void save_exclusion_log(const ExclusionLog& log, const std::filesystem::path& path) {
    std::ostringstream out;
    for (const auto& e : log) out << json{{"exam_id", e.exam_id}, {"rule", e.rule}}.dump() << '\n';
    write_text_file(path, out.str());
}

std::vector<std::string> FoldPlan::exams_with_role(int fold, SplitRole role) const {
    std::vector<std::string> ids;
    for (const auto& [id, roles] : assignments) {
        if (roles.at(static_cast<std::size_t>(fold)) == role) ids.push_back(id);
    }
    return ids;
}

FoldPlan make_folds(const CohortManifest& manifest, int n_folds, std::uint64_t seed) {
    if (n_folds < 2) throw Error("precondition", "n_folds must be >= 2");

    struct Patient {
        std::string id;
        std::vector<std::string> exams;
        bool positive = false;
    };
    std::vector<Patient> patients;
    std::map<std::string, std::size_t> index;
    bool any_pos = false, any_neg = false;
    for (const auto& r : manifest.records) {
        if (!r.label) throw Error("validation", "exam '" + r.exam_id + "' has no label");
        bool pos = *r.label == Label::suspicious;
        any_pos |= pos;
        any_neg |= !pos;
        auto [it, inserted] = index.try_emplace(r.patient_id, patients.size());
        if (inserted) patients.push_back({r.patient_id, {}, false});
        auto& p = patients[it->second];
        p.exams.push_back(r.exam_id);
        p.positive |= pos;
    }
    const std::size_t n_shards = static_cast<std::size_t>(2 * n_folds);
    if (patients.size() < n_shards) {
        throw Error("precondition", "need at least " + std::to_string(n_shards) +
                                        " patients for " + std::to_string(n_folds) +
                                        " folds, have " + std::to_string(patients.size()));
    }
    if (!any_pos || !any_neg) throw Error("precondition", "manifest contains a single class");

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> pos_idx, neg_idx;
    for (std::size_t i = 0; i < patients.size(); ++i) {
        (patients[i].positive ? pos_idx : neg_idx).push_back(i);
    }
    std::shuffle(pos_idx.begin(), pos_idx.end(), rng);
    std::shuffle(neg_idx.begin(), neg_idx.end(), rng);

    // Greedy dealing keeps per-class and total exam counts balanced even when
    // some patients contribute two exams.
    std::vector<std::size_t> shard_of(patients.size());
    std::vector<std::size_t> total(n_shards, 0);
    std::size_t cursor = 0;
    for (const auto* group : {&pos_idx, &neg_idx}) {
        std::vector<std::size_t> in_class(n_shards, 0);
        for (std::size_t pi : *group) {
            std::size_t best = 0;
            bool have = false;
            for (std::size_t k = 0; k < n_shards; ++k) {
                std::size_t s = (cursor + k) % n_shards;
                if (!have || in_class[s] < in_class[best] ||
                    (in_class[s] == in_class[best] && total[s] < total[best])) {
                    best = s;
                    have = true;
                }
            }
            shard_of[pi] = best;
            in_class[best] += patients[pi].exams.size();
            total[best] += patients[pi].exams.size();
            cursor = (best + 1) % n_shards;
        }
    }

    FoldPlan plan;
    plan.n_folds = n_folds;
    plan.seed = seed;
    for (std::size_t pi = 0; pi < patients.size(); ++pi) {
        std::vector<SplitRole> roles(static_cast<std::size_t>(n_folds));
        for (int f = 0; f < n_folds; ++f) {
            std::size_t test_shard = static_cast<std::size_t>(f);
            std::size_t val_shard = (test_shard + 1) % n_shards;
            roles[static_cast<std::size_t>(f)] = shard_of[pi] == test_shard  ? SplitRole::test
                                                 : shard_of[pi] == val_shard ? SplitRole::val
                                                                             : SplitRole::train;
        }
        for (const auto& exam : patients[pi].exams) plan.assignments[exam] = roles;
    }
    return plan;
}

std::string fold_plan_to_json(const FoldPlan& plan) {
    json j;
    j["seed"] = plan.seed;
    j["n_folds"] = plan.n_folds;
    json a = json::object();
    for (const auto& [id, roles] : plan.assignments) {
        json r = json::array();
        for (auto role : roles) r.push_back(to_string(role));
        a[id] = r;
    }
    j["assignments"] = a;
    return j.dump(2);
}

FoldPlan fold_plan_from_json(const std::string& text) {
    FoldPlan plan;
    try {
        json j = json::parse(text);
        plan.seed = j.at("seed").get<std::uint64_t>();
        plan.n_folds = j.at("n_folds").get<int>();
        for (const auto& [id, roles] : j.at("assignments").items()) {
            std::vector<SplitRole> rs;
            for (const auto& r : roles) rs.push_back(parse_split_role(r.get<std::string>()));
            if (static_cast<int>(rs.size()) != plan.n_folds) {
                throw Error("format", "fold plan: exam '" + id + "' has " +
                                          std::to_string(rs.size()) + " roles, expected " +
                                          std::to_string(plan.n_folds));
            }
            plan.assignments[id] = std::move(rs);
        }
    } catch (const json::exception& e) {
        throw Error("format", std::string("fold plan: ") + e.what());
    }
    return plan;
}

FoldPlan load_fold_plan(const std::filesystem::path& path) {
    return fold_plan_from_json(read_text_file(path));
}

void save_fold_plan(const FoldPlan& plan, const std::filesystem::path& path) {
    write_text_file(path, fold_plan_to_json(plan) + "\n");
}

}  // namespace mst
