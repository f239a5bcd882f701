#include "doctest.h"
#include "oracles.hpp"
#include "test_support.hpp"

#include "mst/phantom.hpp"
#include "mst/predictions.hpp"
#include "mst/training.hpp"

#include <algorithm>
#include <fstream>
#include <random>

using namespace mst;
using testing_support::TempDir;

namespace {

// A 40-exam phantom cohort with a preprocessed cache, built once per process.
struct PhantomFixture {
    TempDir dir{"train"};
    CohortManifest manifest;
    FoldPlan plan;

    PhantomFixture() {
        PhantomOptions po;
        po.n = 40;
        po.positive_fraction = 0.3;
        po.seed = 4;
        po.native_shape = {12, 32, 64};
        po.sequences = {SequenceId::T1_sub, SequenceId::T2w};
        manifest = generate_phantoms(po, dir / "ph");
        plan = make_folds(manifest, 5, 2);
    }
};

PhantomFixture& fixture() {
    static PhantomFixture f;
    return f;
}

TrainConfig tiny_config(const PhantomFixture& f) {
    TrainConfig c;
    c.sequences = {SequenceId::T1_sub};
    c.lr = 1e-3;
    c.max_epochs = 2;
    c.early_stop_patience = 2;
    c.batch_size = 4;
    c.augment_views = 1;
    c.model.encoder.embed_dim = 16;
    c.model.encoder.layers = 1;
    c.model.encoder.heads = 2;
    c.model.aggregator.layers = 1;
    c.model.aggregator.heads = 2;
    c.seed = 3;
    c.cache_dir = (f.dir / "cache").string();
    return c;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("train config JSON round-trip, validation and hashing") {
    TrainConfig c;
    c.sequences = {SequenceId::T2w, SequenceId::T1_sub};
    c.lr = 5e-5;
    c.augment_bounds.max_rotation_deg = 30.0;
    c.model.encoder.pooling = EncoderPooling::cls;
    auto back = train_config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));
    CHECK(config_hash(back) == config_hash(c));

    auto moved = c;
    moved.cache_dir = "/elsewhere";
    CHECK(config_hash(moved) == config_hash(c));
    moved.lr = 1e-4;
    CHECK(config_hash(moved) != config_hash(c));

    auto j = to_json(c);
    j["learning_rate"] = 1.0;
    CHECK_THROWS_AS(train_config_from_json(j), Error);
    j = to_json(c);
    j["optimizer"] = "sgd";
    CHECK_THROWS_AS(train_config_from_json(j), Error);
    CHECK(train_config_from_json(nlohmann::json::object()).lr == 1e-6);

    auto bad = c;
    bad.lr = 0.0;
    CHECK_THROWS_AS(validate_train_config(bad), Error);
    bad = c;
    bad.batch_size = 0;
    CHECK_THROWS_AS(validate_train_config(bad), Error);
    bad = c;
    bad.sequences = {};
    CHECK_THROWS_AS(validate_train_config(bad), Error);
    bad.sequences = {SequenceId::T2w, SequenceId::T2w};
    CHECK_THROWS_AS(validate_train_config(bad), Error);
    bad.sequences = {SequenceId::T1_pre};
    CHECK_THROWS_AS(validate_train_config(bad), Error);
    CHECK_NOTHROW(validate_train_config(c));
}

TEST_CASE("prediction files round-trip with provenance") {
    TempDir dir("preds");
    PredictionSet set;
    set.config_hash = "deadbeef";
    set.seed = 17;
    set.sequences = "T2w+T1_sub";
    set.rows = {{"E1", "0", SplitRole::test, 1, 0.9}, {"E2", "0", SplitRole::val, 0, 1.0 / 3.0},
                {"E1", "1", SplitRole::train, 1, 0.0}};
    save_predictions(set, dir / "p.csv");
    auto back = load_predictions(dir / "p.csv");
    CHECK(back.rows == set.rows);
    CHECK(back.config_hash == "deadbeef");
    CHECK(back.seed == 17);
    CHECK(back.sequences == "T2w+T1_sub");
    CHECK(back.folds() == std::vector<std::string>{"0", "1"});

    set.rows.push_back({"E1", "0", SplitRole::test, 1, 0.5});
    CHECK_THROWS_AS(validate_predictions(set), Error);
    set.rows.pop_back();
    set.rows[0].score = 1.5;
    CHECK_THROWS_AS(validate_predictions(set), Error);
}

TEST_CASE("permutation null matches shuffled-label AUCs") {
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < 50; ++i) {
        scores.push_back(i / 50.0);
        labels.push_back(i >= 35 ? 1 : 0);
    }
    auto null = permutation_null_aucs(scores, labels, 20, 9);
    REQUIRE(null.size() == 20);
    CHECK(null == permutation_null_aucs(scores, labels, 20, 9));
    std::mt19937_64 rng(9);
    std::vector<int> permuted(labels);
    for (double v : null) {
        std::shuffle(permuted.begin(), permuted.end(), rng);
        CHECK(v == doctest::Approx(oracle::mann_whitney_auc(scores, permuted)).epsilon(1e-12));
    }
}

TEST_CASE("phantom generator") {
    TempDir dir("phantom");
    PhantomOptions po;
    po.n = 100;
    po.seed = 1;
    po.native_shape = {8, 24, 48};
    po.sequences = {SequenceId::T1_sub};
    auto m = generate_phantoms(po, dir / "a");
    REQUIRE(m.records.size() == 100);
    long positives = 0;
    for (const auto& r : m.records) {
        if (r.label != Label::suspicious) continue;
        ++positives;
        CHECK(r.lesion_type.has_value());
        CHECK(r.lesion_size_mm.has_value());
        REQUIRE(r.lesion_location.has_value());
        CHECK(r.lesion_location->slice_lo <= r.lesion_location->slice_hi);
        CHECK(r.lesion_location->slice_hi < kSlices);
        CHECK(r.birads >= 4);
    }
    CHECK(positives == 20);

    // Same seed, same bytes.
    generate_phantoms(po, dir / "b");
    const auto& rel = m.records[0].sequence_paths.at(SequenceId::T1_sub);
    CHECK(read_text_file(dir / "a" / rel) == read_text_file(dir / "b" / rel));
    CHECK(read_text_file(dir / "a" / "manifest.csv") == read_text_file(dir / "b" / "manifest.csv"));

    // The lesion is brighter than the rest of the breast in the subtraction image.
    for (const auto& r : m.records) {
        if (r.label != Label::suspicious) continue;
        auto stack = preprocess_exam(m, r, {SequenceId::T1_sub}).stack;
        const auto& loc = *r.lesion_location;
        double inside = 0.0, outside = 0.0;
        long n_in = 0, n_out = 0;
        for (int z = loc.slice_lo; z <= loc.slice_hi; ++z)
            for (int y = 0; y < kImageSize; y += 2)
                for (int x = 0; x < kImageSize; x += 2) {
                    const bool in = y >= loc.y0 && y < loc.y1 && x >= loc.x0 && x < loc.x1;
                    (in ? inside : outside) += stack.at(0, z, y, x);
                    (in ? n_in : n_out)++;
                }
        CHECK(inside / std::max(1L, n_in) > outside / std::max(1L, n_out));
        break;
    }

    po.n = 3;
    CHECK_THROWS_AS(generate_phantoms(po, dir / "c"), Error);
    po.n = 10;
    po.positive_fraction = 1.0;
    CHECK_THROWS_AS(generate_phantoms(po, dir / "c"), Error);
}

TEST_CASE("zero learning rate leaves the trained weights bit-identical") {
    auto& f = fixture();
    auto c = tiny_config(f);
    c.lr = 0.0;
    c.max_epochs = 1;
    auto result = train_fold(c, 0, f.plan, f.manifest, f.dir / "lr0");
    auto loaded = load_checkpoint(result.checkpoint_dir);
    // Each fold initialises its model from sha256("<seed>|model|<fold>"), first 64 bits.
    auto mc = c.model;
    mc.seed = std::stoull(sha256_hex(std::to_string(c.seed) + "|model|0").substr(0, 16), nullptr, 16);
    MstClassifier fresh(mc);
    CHECK(serialize_parameters(static_cast<const MstClassifier&>(loaded.model).all_parameters()) ==
          serialize_parameters(static_cast<const MstClassifier&>(fresh).all_parameters()));
    CHECK(result.history.size() == 1);
}

TEST_CASE("single-class training split is rejected before training") {
    auto& f = fixture();
    auto c = tiny_config(f);
    auto m = f.manifest;
    for (auto& r : m.records) {
        r.label = Label::likely_benign;
        r.birads = 2;
    }
    auto plan = f.plan;
    CHECK_THROWS_AS(train_fold(c, 0, plan, m, f.dir / "oneclass"), Error);
    CHECK_FALSE(std::filesystem::exists(f.dir / "oneclass" / "fold_0" / "weights.bin"));
    CHECK_THROWS_AS(train_fold(c, 7, plan, f.manifest, f.dir / "oneclass"), Error);
}

TEST_CASE("cross-validation is deterministic and covers every test exam once") {
    auto& f = fixture();
    auto c = tiny_config(f);
    auto a = run_cv(c, f.plan, f.manifest, f.dir / "cv_a");
    auto b = run_cv(c, f.plan, f.manifest, f.dir / "cv_b");
    CHECK(a.rows == b.rows);
    CHECK(a.config_hash == config_hash(c));

    std::set<std::string> tested;
    for (const auto* r : a.with_role(SplitRole::test)) CHECK(tested.insert(r->exam_id).second);
    std::set<std::string> planned;
    for (int k = 0; k < 5; ++k)
        for (const auto& id : f.plan.exams_with_role(k, SplitRole::test)) planned.insert(id);
    CHECK(tested == planned);
    for (const auto& r : a.rows) CHECK(f.manifest.find(r.exam_id) != nullptr);

    // History lines per epoch; best epoch within range.
    std::ifstream hist(f.dir / "cv_a" / "fold_0" / "history.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(hist, line)) ++lines;
    CHECK(lines >= 1);
    CHECK(lines <= c.max_epochs);

    // A missing fold checkpoint is an error, not a silent skip.
    std::filesystem::remove_all(f.dir / "cv_b" / "fold_3");
    CHECK_THROWS_AS(collect_cv_predictions(c, f.plan, f.manifest, f.dir / "cv_b"), Error);
    // So is a checkpoint from a different configuration.
    auto other = c;
    other.lr = 2e-3;
    CHECK_THROWS_AS(collect_cv_predictions(other, f.plan, f.manifest, f.dir / "cv_a"), Error);
}

TEST_CASE("predict scores every exam as external and checks sequences") {
    auto& f = fixture();
    auto c = tiny_config(f);
    auto result = train_fold(c, 1, f.plan, f.manifest, f.dir / "pred");
    auto set = predict(result.checkpoint_dir, f.manifest, {}, c.cache_dir);
    CHECK(set.rows.size() == f.manifest.records.size());
    for (const auto& r : set.rows) CHECK(r.fold == kExternalFold);

    auto m = f.manifest;
    m.records[2].sequence_paths.erase(SequenceId::T1_sub);
    CHECK_THROWS_AS(predict(result.checkpoint_dir, m), Error);
}

}
