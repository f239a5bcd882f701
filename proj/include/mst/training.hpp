#pragma once

#include "mst/cohort.hpp"
#include "mst/model.hpp"
#include "mst/predictions.hpp"
#include "mst/volume.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace mst {

struct TrainConfig {
    std::vector<SequenceId> sequences{SequenceId::T1_sub};
    double lr = 1e-6;
    double weight_decay = 0.01;
    int batch_size = 8;
    int max_epochs = 100;
    int early_stop_patience = 10;
    std::uint64_t seed = 0;
    bool augment = true;
    AugmentBounds augment_bounds;
    // Frozen-encoder mode encodes this many augmented copies of every exam
    // once and samples among them (plus the clean copy) each epoch.
    int augment_views = 4;
    ModelConfig model;
    PreprocessOptions preprocess;
    std::string encoder_weights;  // optional blob loaded into the encoder

    // Runtime locations; not part of the config hash.
    std::string cache_dir;  // preprocessed stacks
};

nlohmann::json to_json(const TrainConfig& c);
// Unknown keys are rejected. Missing keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);
// lr > 0, batch_size >= 1, 1..3 sequences, epochs/patience >= 1.
void validate_train_config(const TrainConfig& c);
// sha256 of the canonical JSON form, runtime locations excluded.
std::string config_hash(const TrainConfig& c);

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    std::optional<double> val_auc;  // absent when the validation split is single-class
    bool improved = false;
};

struct TrainResult {
    std::filesystem::path checkpoint_dir;
    int best_epoch = -1;
    double best_val_metric = 0.0;
    std::string selection_metric;  // "val_auc" or "val_loss"
    std::vector<EpochRecord> history;
};

/// Supplies per-exam stacks and frozen-encoder slice embeddings. Embeddings
/// are keyed by the encoder's weight hash so folds sharing an encoder reuse
/// them.
class ExamData {
public:
    ExamData(const CohortManifest& manifest, const TrainConfig& config);

    SequenceStack stack(const std::string& exam_id) const;
    // View 0 is the unaugmented stack.
    const Matrix& embeddings(const VitSliceEncoder& encoder, const std::string& encoder_hash,
                             const std::string& exam_id, int view);
    // Deterministic augmentation of view >= 1.
    AugmentParams view_params(const std::string& exam_id, int view) const;

    const CohortManifest& manifest() const { return manifest_; }
    std::size_t cached_embeddings() const { return cache_.size(); }

private:
    const CohortManifest& manifest_;
    TrainConfig config_;
    std::map<std::string, Matrix> cache_;
};

// Preprocessed stack of one exam, read from cache_dir when present there and
// written to it otherwise (an empty cache_dir disables caching).
SequenceStack load_exam_stack(const CohortManifest& manifest, const std::string& exam_id,
                              const std::vector<SequenceId>& sequences, const PreprocessOptions& options = {},
                              const std::string& cache_dir = {});

using ProgressFn = std::function<void(const std::string&)>;

// Trains one fold; the checkpoint of the best epoch and history.jsonl go to
// <out_dir>/fold_<fold>/.
TrainResult train_fold(const TrainConfig& config, int fold, const FoldPlan& plan, const CohortManifest& manifest,
                       const std::filesystem::path& out_dir, ExamData* data = nullptr,
                       const ProgressFn& progress = {});

// Loads every fold's checkpoint and scores its validation and test exams.
// A missing checkpoint is an error.
PredictionSet collect_cv_predictions(const TrainConfig& config, const FoldPlan& plan, const CohortManifest& manifest,
                                     const std::filesystem::path& out_dir, ExamData* data = nullptr);

// train_fold for every fold, then collect_cv_predictions.
PredictionSet run_cv(const TrainConfig& config, const FoldPlan& plan, const CohortManifest& manifest,
                     const std::filesystem::path& out_dir, const ProgressFn& progress = {});

// Scores every exam of a manifest with one checkpoint; fold = "external".
PredictionSet predict(const std::filesystem::path& checkpoint_dir, const CohortManifest& manifest,
                      const PreprocessOptions& preprocess = {}, const std::string& cache_dir = {});

void save_history(const std::vector<EpochRecord>& history, const std::filesystem::path& path);

// Fraction of positive-to-negative pairs ranked correctly, for n_permutations
// random relabelings of the same scores.
std::vector<double> permutation_null_aucs(const std::vector<double>& scores, const std::vector<int>& labels,
                                          int n_permutations, std::uint64_t seed);

}  // namespace mst
