#pragma once

#include "mst/model.hpp"
#include "mst/predictions.hpp"
#include "mst/volume.hpp"

#include "json.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mst {

struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;  // 1 = gray, 3 = RGB
    std::vector<std::uint8_t> pixels;

    bool operator==(const Image&) const = default;
};

void write_png(const Image& image, const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);

using Rgb = std::array<std::uint8_t, 3>;

// Viridis, sampled at t in [0, 1].
Rgb colormap(double t);

struct RenderOptions {
    int display_channel = 0;  // index into the stack's channel map
    double alpha_scale = 0.5;  // overlay alpha = alpha_scale * attention
};

struct CaseInfo {
    std::string exam_id;
    double score = 0.0;
    int label = 0;
    std::string model_hash;
};

/// On-disk explanation of one exam: base and overlay PNGs per slice, a slice
/// attention bar chart and the metadata tying them together.
struct CaseBundle {
    std::string exam_id;
    double score = 0.0;
    int label = 0;
    std::vector<std::string> sequences;
    int display_channel = 0;
    std::string model_hash;
    std::string colormap = "viridis";
    double alpha_scale = 0.5;
    std::array<double, kSlices> slice_weights{};
    std::vector<std::string> base_files;
    std::vector<std::string> overlay_files;
    std::string slicebar_file = "slicebar.png";

    bool operator==(const CaseBundle&) const = default;
};

nlohmann::json to_json(const CaseBundle& b);
CaseBundle case_bundle_from_json(const nlohmann::json& j);
// Reads <dir>/meta.json and checks the referenced files exist.
CaseBundle load_case_bundle(const std::filesystem::path& dir);

Image base_image(const SequenceStack& stack, int channel, int slice);
// Alpha blend of the colormapped attention over a grayscale base.
Image blend_overlay(const Image& base, const Matrix& attention, double alpha_scale);
Image slice_bar_chart(const std::array<double, kSlices>& weights);

// Writes <case_dir>/{meta.json, slice_weights.json, base_XX.png, overlay_XX.png, slicebar.png}.
CaseBundle render_overlay(const SequenceStack& stack, const AttentionBundle& bundle, const CaseInfo& info,
                          const std::filesystem::path& case_dir, const RenderOptions& options = {});

// Suspicious exams scored at or above the threshold (test rows only).
std::vector<std::string> select_true_positives(const PredictionSet& predictions, double threshold);

}  // namespace mst
