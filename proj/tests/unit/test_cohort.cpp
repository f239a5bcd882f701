#include "doctest.h"
#include "fold_checks.hpp"
#include "test_support.hpp"

#include "mst/cohort.hpp"

#include <fstream>
#include <random>
#include <set>

using namespace mst;

namespace {

// Checks every FoldPlan invariant against the manifest it was built from.
void check_plan(const CohortManifest& m, const FoldPlan& plan) {
    CHECK(testing_support::fold_plan_violation(m, plan) == "");
}

}  // namespace

TEST_SUITE("cohort") {

TEST_CASE("enum names round-trip and unknown names are rejected") {
    for (auto id : {SequenceId::T1_pre, SequenceId::T1_post1, SequenceId::T1_sub, SequenceId::DWI_1500, SequenceId::T2w})
        CHECK(parse_sequence_id(to_string(id)) == id);
    for (auto t : {LesionType::mass, LesionType::nme, LesionType::foci, LesionType::other})
        CHECK(parse_lesion_type(to_string(t)) == t);
    CHECK_THROWS_AS(parse_sequence_id("T3"), Error);
    CHECK_THROWS_AS(parse_label("maybe"), Error);
    CHECK(parse_sequence_list("T2w+T1_sub") == std::vector<SequenceId>{SequenceId::T2w, SequenceId::T1_sub});
    CHECK(parse_sequence_list("T2w,T1_sub") == std::vector<SequenceId>{SequenceId::T2w, SequenceId::T1_sub});
    CHECK(sequence_list_name({SequenceId::T2w, SequenceId::DWI_1500}) == "T2w+DWI_1500");
}

TEST_CASE("BI-RADS extraction takes the highest category mentioned") {
    CHECK(parse_birads("Impression: BI-RADS 2, benign.") == 2);
    CHECK(parse_birads("left BIRADS: 3; right BI-RADS 4b") == 4);
    CHECK(parse_birads("Bi-Rads category 5") == 5);
    CHECK(parse_birads("BI-RADS-Kategorie 1") == 1);
    CHECK_FALSE(parse_birads("no category stated").has_value());
    CHECK_FALSE(parse_birads("BI-RADS 0").has_value());
    CHECK_FALSE(parse_birads("BI-RADS 12").has_value());
}

TEST_CASE("label binarization") {
    for (int b = 1; b <= 3; ++b) CHECK(binarize_label(b) == Label::likely_benign);
    for (int b = 4; b <= 6; ++b) CHECK(binarize_label(b) == Label::suspicious);
    CHECK_THROWS_AS(binarize_label(0), Error);
    CHECK_THROWS_AS(binarize_label(7), Error);
}

TEST_CASE("manifest CSV and JSONL round-trip") {
    testing_support::TempDir dir("manifest");
    std::mt19937_64 rng(3);
    auto m = testing_support::random_manifest(rng, 12);
    m.records[0].lesion_size_mm = 12.5;
    m.records[0].lesion_type = LesionType::nme;
    m.records[0].bpe_grade = ParenchymaGrade::mild;
    m.records[0].lesion_location = LesionLocation{3, 7, 10, 20, 40, 60};
    m.records[0].sequence_paths[SequenceId::T2w] = "v/with,comma.nii.gz";
    save_manifest_csv(m, dir / "m.csv");
    save_manifest_jsonl(m, dir / "m.jsonl");
    for (const char* name : {"m.csv", "m.jsonl"}) {
        auto back = load_manifest(dir / name);
        CHECK(back.records == m.records);
        CHECK(back.data_root == dir.path());
    }
}

TEST_CASE("manifest validation names the offending row and field") {
    testing_support::TempDir dir("badmanifest");
    auto write = [&](const std::string& body) {
        std::ofstream out(dir / "m.csv");
        out << "exam_id,patient_id,laterality,sequence_paths,birads,label\n" << body;
    };
    auto expect = [&](const std::string& needle) {
        try {
            load_manifest(dir / "m.csv");
            FAIL("expected a validation error");
        } catch (const Error& e) {
            CHECK(e.kind() == "validation");
            CHECK(std::string(e.what()).find(needle) != std::string::npos);
        }
    };
    write("E1,P1,left,T1_sub=a.nii,7,\n");
    expect("birads");
    write("E1,P1,left,T1_sub=a.nii,2,suspicious\n");
    expect("label");
    write("E1,P1,left,T1_sub=a.nii,2,\nE1,P2,left,T1_sub=b.nii,2,\n");
    expect("duplicate");
    write("E1,P1,left,T1_sub=a.nii,2,\nE2,P1,left,T1_sub=b.nii,2,\n");
    expect("laterality");
    write("E1,P1,left,T1_post1=a.nii,2,\n");
    expect("sequence_paths");
}

TEST_CASE("label is derived from BI-RADS when absent") {
    testing_support::TempDir dir("derive");
    {
        std::ofstream out(dir / "m.csv");
        out << "exam_id,patient_id,laterality,sequence_paths,birads,label\nE1,P1,left,T1_sub=a.nii,5,\n";
    }
    auto m = load_manifest(dir / "m.csv");
    CHECK(m.records[0].label == Label::suspicious);
}

TEST_CASE("exclusions log the first failing rule per exam") {
    std::mt19937_64 rng(4);
    auto m = testing_support::random_manifest(rng, 10);
    m.records[1].birads = 3;
    m.records[1].label = Label::likely_benign;
    m.records[2].sequence_paths.clear();
    auto res = apply_exclusions(m, make_exclusion_rules({"missing_T1_sub", "birads_3"}));
    CHECK(res.manifest.records.size() == m.records.size() - 2);
    REQUIRE(res.log.size() == 2);
    CHECK(res.log[0].exam_id == m.records[1].exam_id);
    CHECK(res.log[0].rule == "birads_3");
    CHECK(res.log[1].rule == "missing_T1_sub");
    CHECK_THROWS_AS(make_exclusion_rule("no_such_rule"), Error);
}

TEST_CASE("fold plan for 100 single-exam patients") {
    CohortManifest m;
    for (int i = 0; i < 100; ++i) {
        ExamRecord r;
        r.exam_id = "E" + std::to_string(i);
        r.patient_id = "P" + std::to_string(i);
        r.sequence_paths[SequenceId::T1_sub] = "a.nii";
        r.label = i < 20 ? Label::suspicious : Label::likely_benign;
        m.records.push_back(r);
    }
    auto plan = make_folds(m, 5, 7);
    check_plan(m, plan);
    for (int f = 0; f < 5; ++f) {
        auto test = plan.exams_with_role(f, SplitRole::test);
        CHECK(test.size() == 10);
        CHECK(plan.exams_with_role(f, SplitRole::val).size() == 10);
        int pos = 0;
        for (const auto& id : test) pos += m.find(id)->label == Label::suspicious;
        CHECK(pos == 2);
    }
}

TEST_CASE("fold plan invariants on random manifests") {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> patients(10, 150);
    for (int trial = 0; trial < 30; ++trial) {
        auto m = testing_support::random_manifest(rng, patients(rng));
        auto plan = make_folds(m, 5, static_cast<std::uint64_t>(trial));
        check_plan(m, plan);
        CHECK(make_folds(m, 5, static_cast<std::uint64_t>(trial)) == plan);
    }
}

TEST_CASE("fold plan preconditions and JSON round-trip") {
    std::mt19937_64 rng(6);
    auto small = testing_support::random_manifest(rng, 9, 0.0);
    CHECK_THROWS_AS(make_folds(small, 5, 0), Error);
    auto m = testing_support::random_manifest(rng, 40);
    CHECK_THROWS_AS(make_folds(m, 1, 0), Error);
    auto plan = make_folds(m, 5, 9);
    CHECK(fold_plan_from_json(fold_plan_to_json(plan)) == plan);
    CHECK_THROWS_AS(fold_plan_from_json("{\"seed\":1}"), Error);
}

}
