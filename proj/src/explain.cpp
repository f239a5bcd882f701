#include "mst/explain.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <set>

namespace mst {

using nlohmann::json;

// ---- PNG ------------------------------------------------------------------------

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const Image& image, const std::filesystem::path& path) {
    if (image.channels != 1 && image.channels != 3) throw Error("precondition", "PNG images must be gray or RGB");
    if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * image.channels) {
        throw Error("shape", "image buffer does not match its dimensions");
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw Error("io", "cannot write " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw Error("io", "libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("io", "libpng failed writing " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
                 image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const std::size_t stride = static_cast<std::size_t>(image.width) * image.channels;
    for (int y = 0; y < image.height; ++y) {
        png_write_row(png, const_cast<png_bytep>(image.pixels.data() + stride * static_cast<std::size_t>(y)));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    if (std::fflush(fp.get()) != 0) throw Error("io", "cannot write " + path.string());
}

Image read_png(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw Error("io", "cannot read " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error("io", "libpng initialization failed");
    }
    Image img;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error("format", path.string() + " is not a readable PNG");
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) != 8 || (color != PNG_COLOR_TYPE_GRAY && color != PNG_COLOR_TYPE_RGB)) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error("format", path.string() + ": only 8-bit gray or RGB PNGs are supported");
    }
    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    img.channels = color == PNG_COLOR_TYPE_GRAY ? 1 : 3;
    const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
    img.pixels.resize(stride * static_cast<std::size_t>(img.height));
    for (int y = 0; y < img.height; ++y) png_read_row(png, img.pixels.data() + stride * static_cast<std::size_t>(y), nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

// ---- rendering ------------------------------------------------------------------

Rgb colormap(double t) {
    static constexpr std::uint8_t anchors[11][3] = {
        {68, 1, 84},    {72, 36, 117},  {65, 68, 135},  {53, 95, 141},  {42, 120, 142}, {33, 145, 140},
        {34, 168, 132}, {68, 191, 112}, {122, 209, 81}, {189, 223, 38}, {253, 231, 37}};
    t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0);
    const double pos = t * 10.0;
    const int i = std::min(9, static_cast<int>(pos));
    const double w = pos - i;
    Rgb out;
    for (int c = 0; c < 3; ++c) {
        out[static_cast<std::size_t>(c)] =
            static_cast<std::uint8_t>(std::lround((1.0 - w) * anchors[i][c] + w * anchors[i + 1][c]));
    }
    return out;
}

Image base_image(const SequenceStack& stack, int channel, int slice) {
    if (channel < 0 || channel >= stack.channels) throw Error("precondition", "display channel out of range");
    if (slice < 0 || slice >= kSlices) throw Error("precondition", "slice index out of range");
    Image img{kImageSize, kImageSize, 1, {}};
    auto s = stack.slice(channel, slice);
    img.pixels.resize(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(static_cast<double>(s[i]), 0.0, 1.0) * 255.0));
    }
    return img;
}

Image blend_overlay(const Image& base, const Matrix& attention, double alpha_scale) {
    if (base.channels != 1 || attention.rows() != base.height || attention.cols() != base.width) {
        throw Error("shape", "overlay: attention map and base image differ in shape");
    }
    Image out{base.width, base.height, 3, {}};
    out.pixels.resize(static_cast<std::size_t>(base.width) * base.height * 3);
    for (int y = 0; y < base.height; ++y) {
        for (int x = 0; x < base.width; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * base.width + x;
            const std::uint8_t g = base.pixels[i];
            const double a = std::clamp(attention(y, x), 0.0, 1.0);
            const double alpha = alpha_scale * a;
            if (alpha <= 0.0) {
                out.pixels[3 * i] = out.pixels[3 * i + 1] = out.pixels[3 * i + 2] = g;
                continue;
            }
            const Rgb c = colormap(a);
            for (int k = 0; k < 3; ++k) {
                out.pixels[3 * i + static_cast<std::size_t>(k)] =
                    static_cast<std::uint8_t>(std::lround((1.0 - alpha) * g + alpha * c[static_cast<std::size_t>(k)]));
            }
        }
    }
    return out;
}

Image slice_bar_chart(const std::array<double, kSlices>& weights) {
    constexpr int bar = 8, gap = 2, height = 120, margin = 4;
    const int width = margin * 2 + kSlices * (bar + gap) - gap;
    Image img{width, height, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(width) * height * 3, 255)};
    const double max_w = *std::max_element(weights.begin(), weights.end());
    for (int s = 0; s < kSlices; ++s) {
        const double rel = max_w > 0.0 ? weights[static_cast<std::size_t>(s)] / max_w : 0.0;
        const int h = static_cast<int>(std::lround(rel * (height - 2 * margin)));
        const Rgb c = colormap(rel);
        const int x0 = margin + s * (bar + gap);
        for (int y = height - margin - h; y < height - margin; ++y) {
            for (int x = x0; x < x0 + bar; ++x) {
                const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
                img.pixels[i] = c[0];
                img.pixels[i + 1] = c[1];
                img.pixels[i + 2] = c[2];
            }
        }
    }
    // Baseline.
    for (int x = 0; x < width; ++x) {
        const std::size_t i = (static_cast<std::size_t>(height - margin) * width + x) * 3;
        img.pixels[i] = img.pixels[i + 1] = img.pixels[i + 2] = 0;
    }
    return img;
}

namespace {

std::string two_digits(int i) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "%02d", i);
    return buf;
}

}  // namespace

CaseBundle render_overlay(const SequenceStack& stack, const AttentionBundle& bundle, const CaseInfo& info,
                          const std::filesystem::path& case_dir, const RenderOptions& options) {
    check_stack(stack);
    if (bundle.area_maps.size() != static_cast<std::size_t>(kSlices)) {
        throw Error("shape", "attention bundle must hold 38 area maps");
    }
    std::error_code ec;
    std::filesystem::create_directories(case_dir, ec);
    if (ec) throw Error("io", "cannot create " + case_dir.string() + ": " + ec.message());

    CaseBundle b;
    b.exam_id = info.exam_id;
    b.score = info.score;
    b.label = info.label;
    for (auto id : stack.channel_map) b.sequences.push_back(to_string(id));
    b.display_channel = options.display_channel;
    b.model_hash = info.model_hash;
    b.alpha_scale = options.alpha_scale;
    b.slice_weights = bundle.slice_weights;
    for (int z = 0; z < kSlices; ++z) {
        const auto base = base_image(stack, options.display_channel, z);
        b.base_files.push_back("base_" + two_digits(z) + ".png");
        b.overlay_files.push_back("overlay_" + two_digits(z) + ".png");
        write_png(base, case_dir / b.base_files.back());
        write_png(blend_overlay(base, bundle.area_maps[static_cast<std::size_t>(z)], options.alpha_scale),
                  case_dir / b.overlay_files.back());
    }
    write_png(slice_bar_chart(bundle.slice_weights), case_dir / b.slicebar_file);
    write_text_file(case_dir / "slice_weights.json", json(std::vector<double>(b.slice_weights.begin(), b.slice_weights.end())).dump() + "\n");
    write_text_file(case_dir / "meta.json", to_json(b).dump(2) + "\n");
    return b;
}

json to_json(const CaseBundle& b) {
    return json{{"exam_id", b.exam_id},
                {"score", b.score},
                {"label", b.label},
                {"sequences", b.sequences},
                {"display_channel", b.display_channel},
                {"model_hash", b.model_hash},
                {"colormap", b.colormap},
                {"alpha_scale", b.alpha_scale},
                {"slice_weights", std::vector<double>(b.slice_weights.begin(), b.slice_weights.end())},
                {"base_files", b.base_files},
                {"overlay_files", b.overlay_files},
                {"slicebar_file", b.slicebar_file}};
}

CaseBundle case_bundle_from_json(const json& j) {
    CaseBundle b;
    try {
        b.exam_id = j.at("exam_id").get<std::string>();
        b.score = j.at("score").get<double>();
        b.label = j.at("label").get<int>();
        b.sequences = j.at("sequences").get<std::vector<std::string>>();
        b.display_channel = j.value("display_channel", 0);
        b.model_hash = j.value("model_hash", std::string());
        b.colormap = j.value("colormap", std::string("viridis"));
        b.alpha_scale = j.value("alpha_scale", 0.5);
        auto w = j.at("slice_weights").get<std::vector<double>>();
        if (w.size() != static_cast<std::size_t>(kSlices)) throw Error("format", "slice_weights must have 38 entries");
        std::copy(w.begin(), w.end(), b.slice_weights.begin());
        b.base_files = j.at("base_files").get<std::vector<std::string>>();
        b.overlay_files = j.at("overlay_files").get<std::vector<std::string>>();
        b.slicebar_file = j.value("slicebar_file", std::string("slicebar.png"));
    } catch (const json::exception& e) {
        throw Error("format", std::string("case bundle metadata: ") + e.what());
    }
    if (b.base_files.size() != static_cast<std::size_t>(kSlices) ||
        b.overlay_files.size() != static_cast<std::size_t>(kSlices)) {
        throw Error("format", "case bundle must list 38 base and 38 overlay images");
    }
    return b;
}

CaseBundle load_case_bundle(const std::filesystem::path& dir) {
    json j;
    try {
        j = json::parse(read_text_file(dir / "meta.json"));
    } catch (const json::exception& e) {
        throw Error("format", (dir / "meta.json").string() + ": " + e.what());
    }
    auto b = case_bundle_from_json(j);
    for (const auto* files : {&b.base_files, &b.overlay_files}) {
        for (const auto& f : *files) {
            if (!std::filesystem::exists(dir / f)) throw Error("format", "case bundle is missing " + (dir / f).string());
        }
    }
    if (!std::filesystem::exists(dir / b.slicebar_file)) throw Error("format", "case bundle is missing its slice bar chart");
    return b;
}

std::vector<std::string> select_true_positives(const PredictionSet& predictions, double threshold) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& r : predictions.rows) {
        if (r.split_role != SplitRole::test || r.label != 1 || r.score < threshold) continue;
        if (seen.insert(r.exam_id).second) out.push_back(r.exam_id);
    }
    return out;
}

}  // namespace mst
