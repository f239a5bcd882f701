#pragma once

#include "mst/cohort.hpp"
#include "mst/common.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace mst {

inline constexpr int kSlices = 38;
inline constexpr int kImageSize = 224;
inline constexpr int kMaxChannels = 3;

struct Shape3 {
    int z = 0, y = 0, x = 0;

    std::size_t count() const {
        return static_cast<std::size_t>(z) * static_cast<std::size_t>(y) * static_cast<std::size_t>(x);
    }
    bool operator==(const Shape3&) const = default;
};

inline constexpr Shape3 kTargetShape{kSlices, kImageSize, kImageSize};

// Voxel spacing in millimetres, (z, y, x) order.
using Spacing = std::array<double, 3>;

/// A single-sequence 3D volume, stored slice-major with X fastest.
struct Volume {
    Shape3 shape;
    std::vector<float> voxels;
    std::optional<Spacing> spacing_mm;
    SequenceId sequence_id = SequenceId::T1_sub;

    Volume() = default;
    Volume(Shape3 s, SequenceId id, float fill = 0.0f)
        : shape(s), voxels(s.count(), fill), sequence_id(id) {}

    std::size_t index(int z, int y, int x) const {
        return (static_cast<std::size_t>(z) * static_cast<std::size_t>(shape.y) +
                static_cast<std::size_t>(y)) * static_cast<std::size_t>(shape.x) +
               static_cast<std::size_t>(x);
    }
    float& at(int z, int y, int x) { return voxels[index(z, y, x)]; }
    float at(int z, int y, int x) const { return voxels[index(z, y, x)]; }
};

// --- I/O ---------------------------------------------------------------------

// NIfTI-1 (.nii / .nii.gz) or the raw-tensor format, detected from content.
// Rejects non-finite voxels, naming the first offending (z, y, x).
Volume load_volume(const std::filesystem::path& path, SequenceId id = SequenceId::T1_sub);

// Raw tensor: "MSTV1", dtype byte (1 = float32), Z, Y, X as little-endian
// uint32, then float32 voxels X-fastest.
void save_raw_tensor(const Volume& v, const std::filesystem::path& path);
// Float32 NIfTI-1; gzip-compressed when the path ends in ".gz".
void save_nifti(const Volume& v, const std::filesystem::path& path);

// --- operations ----------------------------------------------------------------

// max(post1 - pre, 0) voxelwise.
Volume subtract_t1(const Volume& pre, const Volume& post1);

// left = columns [0, X/2), right = columns [X/2, X).
std::pair<Volume, Volume> split_laterality(const Volume& v);

// Trilinear (bilinear in-plane, linear across slices) with corner-aligned
// sampling. Returns an exact copy when the shape already matches.
Volume resample(const Volume& v, Shape3 target = kTargetShape);

struct NormalizeResult {
    Volume volume;
    double clip_lo = 0.0;
    double clip_hi = 0.0;
    bool degenerate = false;  // constant input, mapped to zeros
};

// Percentile clip (linear interpolation between order statistics) followed by
// an affine map to [0, 1].
NormalizeResult normalize(const Volume& v, double lo_pct = 0.5, double hi_pct = 99.5);

// Percentile of a sample using linear interpolation between closest ranks.
double percentile(std::vector<float> values, double pct);

/// Model-ready stack of 1-3 sequences, each (38, 224, 224) in [0, 1].
struct SequenceStack {
    int channels = 0;
    std::vector<SequenceId> channel_map;
    std::vector<float> data;  // channels x 38 x 224 x 224

    static constexpr std::size_t kSliceSize = static_cast<std::size_t>(kImageSize) * kImageSize;
    static constexpr std::size_t kChannelSize = kSliceSize * kSlices;

    std::span<const float> slice(int c, int z) const {
        return {data.data() + static_cast<std::size_t>(c) * kChannelSize +
                    static_cast<std::size_t>(z) * kSliceSize,
                kSliceSize};
    }
    std::span<float> slice(int c, int z) {
        return {data.data() + static_cast<std::size_t>(c) * kChannelSize +
                    static_cast<std::size_t>(z) * kSliceSize,
                kSliceSize};
    }
    float at(int c, int z, int y, int x) const {
        return slice(c, z)[static_cast<std::size_t>(y) * kImageSize + static_cast<std::size_t>(x)];
    }
    bool operator==(const SequenceStack&) const = default;
};

// Throws Error("shape") when the stack violates its shape or range invariants.
void check_stack(const SequenceStack& s);

SequenceStack stack_sequences(const std::vector<Volume>& volumes);

// Channel indices fed to a 3-channel backbone: C=1 -> {0,0,0}, C=2 -> {0,1,0},
// C=3 -> {0,1,2}.
std::array<int, 3> backbone_channel_map(int channels);
// Materializes the 3-channel stack described by backbone_channel_map.
SequenceStack to_three_channels(const SequenceStack& s);

// --- augmentation --------------------------------------------------------------

struct AugmentParams {
    double rotation_deg = 0.0;  // [0, 90], about the slice normal
    bool flip_x = false;
    bool flip_y = false;
    bool invert_intensity = false;
    double noise_sd = 0.0;  // [0, 0.25]
    std::uint64_t rng_seed = 0;

    bool is_identity() const {
        return rotation_deg == 0.0 && !flip_x && !flip_y && !invert_intensity && noise_sd == 0.0;
    }
};

struct AugmentBounds {
    double max_rotation_deg = 90.0;
    bool flips = true;
    bool inversion = true;
    double max_noise_sd = 0.25;
};

AugmentParams sample_augment_params(const AugmentBounds& bounds, std::mt19937_64& rng);

// Rotation (bilinear, zero padding) -> flips -> inversion -> noise + clamp.
// The same spatial transform is applied to every channel and slice.
SequenceStack augment(const SequenceStack& s, const AugmentParams& p);

// --- exam preprocessing ----------------------------------------------------------

struct PreprocessOptions {
    bool split_laterality = true;  // manifest paths point at bilateral volumes
    double lo_pct = 0.5;
    double hi_pct = 99.5;
};

struct SequenceNormalization {
    SequenceId sequence;
    double clip_lo = 0.0;
    double clip_hi = 0.0;
    bool degenerate = false;
};

struct PreprocessedExam {
    SequenceStack stack;
    std::vector<SequenceNormalization> normalization;
};

// load -> (split at the X midpoint, keep the exam's side) -> resample -> normalize -> stack
PreprocessedExam preprocess_exam(const CohortManifest& manifest, const ExamRecord& record,
                                 const std::vector<SequenceId>& sequences,
                                 const PreprocessOptions& options = {});

// Cache layout: <dir>/<exam_id>/<SEQ>.mstv per sequence plus <dir>/<exam_id>/sidecar.json.
void write_preprocessed(const PreprocessedExam& exam, const std::string& exam_id,
                        const std::filesystem::path& dir);
std::optional<SequenceStack> read_preprocessed(const std::string& exam_id,
                                               const std::vector<SequenceId>& sequences,
                                               const std::filesystem::path& dir);

}  // namespace mst
