#pragma once

#include "mst/cohort.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mst {

inline constexpr const char* kExternalFold = "external";

struct PredictionRow {
    std::string exam_id;
    std::string fold;  // "0".."k-1" or "external"
    SplitRole split_role = SplitRole::test;
    int label = 0;     // 1 = suspicious
    double score = 0.0;

    bool operator==(const PredictionRow&) const = default;
};

/// Per-exam suspicion scores with fold provenance. The CSV form starts with a
/// comment line carrying the producing config hash, seed and sequence set.
struct PredictionSet {
    std::vector<PredictionRow> rows;
    std::string config_hash;
    std::uint64_t seed = 0;
    std::string sequences;  // e.g. "T2w+T1_sub"

    std::vector<const PredictionRow*> with_role(SplitRole role) const;
    std::vector<std::string> folds() const;  // distinct folds, in first-seen order
};

// Scores in [0,1], labels 0/1, (exam_id, fold) unique.
void validate_predictions(const PredictionSet& set);

void save_predictions(const PredictionSet& set, const std::filesystem::path& path);
PredictionSet load_predictions(const std::filesystem::path& path);

}  // namespace mst
