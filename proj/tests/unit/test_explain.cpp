#include "doctest.h"
#include "test_support.hpp"

#include "mst/explain.hpp"

#include <cmath>
#include <numeric>
#include <random>

using namespace mst;
using testing_support::TempDir;

namespace {

ModelConfig tiny_model() {
    ModelConfig mc;
    mc.encoder.embed_dim = 16;
    mc.encoder.layers = 1;
    mc.encoder.heads = 2;
    mc.aggregator.layers = 1;
    mc.aggregator.heads = 2;
    mc.seed = 5;
    return mc;
}

}  // namespace

TEST_SUITE("explain") {

TEST_CASE("PNG round-trip for gray and RGB images") {
    TempDir dir("png");
    std::mt19937_64 rng(1);
    for (int channels : {1, 3}) {
        Image img{37, 11, channels, {}};
        img.pixels.resize(static_cast<std::size_t>(37 * 11 * channels));
        for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() & 0xff);
        auto path = dir / ("img" + std::to_string(channels) + ".png");
        write_png(img, path);
        CHECK(read_png(path) == img);
    }
    write_text_file(dir / "junk.png", "not a png");
    CHECK_THROWS_AS(read_png(dir / "junk.png"), Error);
    CHECK_THROWS_AS(read_png(dir / "missing.png"), Error);
}

TEST_CASE("viridis colormap endpoints and clamping") {
    CHECK(colormap(0.0) == Rgb{68, 1, 84});
    CHECK(colormap(1.0) == Rgb{253, 231, 37});
    CHECK(colormap(0.5) == Rgb{33, 145, 140});
    CHECK(colormap(-3.0) == colormap(0.0));
    CHECK(colormap(7.0) == colormap(1.0));
    CHECK(colormap(std::nan("")) == colormap(0.0));
    // Midway between the first two anchors.
    CHECK(colormap(0.05) == Rgb{70, 19, 101});
}

TEST_CASE("overlay blend follows the alpha formula") {
    Image base{4, 2, 1, {0, 50, 100, 150, 200, 250, 255, 10}};
    Matrix att(2, 4);
    att << 0.0, 0.25, 0.5, 0.75, 1.0, 0.1, -2.0, 3.0;
    const double scale = 0.6;
    auto out = blend_overlay(base, att, scale);
    REQUIRE(out.channels == 3);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 4; ++x) {
            const std::size_t i = static_cast<std::size_t>(y * 4 + x);
            const double a = std::clamp(att(y, x), 0.0, 1.0);
            const Rgb c = colormap(a);
            for (int k = 0; k < 3; ++k) {
                const double expect = (1.0 - scale * a) * base.pixels[i] + scale * a * c[static_cast<std::size_t>(k)];
                CHECK(out.pixels[3 * i + static_cast<std::size_t>(k)] == std::lround(expect));
            }
        }
    CHECK_THROWS_AS(blend_overlay(base, Matrix::Zero(3, 4), scale), Error);
}

TEST_CASE("slice bar heights are proportional to the weights") {
    std::array<double, kSlices> w{};
    w[3] = 0.5;
    w[10] = 0.25;
    auto img = slice_bar_chart(w);
    auto column_height = [&](int slice) {
        const int x = 4 + slice * 10 + 3;
        int h = 0;
        for (int y = 0; y < img.height - 4; ++y) {
            const std::size_t i = (static_cast<std::size_t>(y) * img.width + x) * 3;
            if (!(img.pixels[i] == 255 && img.pixels[i + 1] == 255 && img.pixels[i + 2] == 255)) ++h;
        }
        return h;
    };
    CHECK(column_height(3) == 112);
    CHECK(column_height(10) == 56);
    CHECK(column_height(0) == 0);
}

TEST_CASE("render_overlay writes a loadable bundle") {
    TempDir dir("bundle");
    std::mt19937_64 rng(2);
    auto stack = testing_support::random_stack(rng, 2);
    MstClassifier model(tiny_model());
    auto att = attention_bundle(model, stack);
    REQUIRE(att.area_maps.size() == static_cast<std::size_t>(kSlices));
    CHECK(std::accumulate(att.slice_weights.begin(), att.slice_weights.end(), 0.0) ==
          doctest::Approx(1.0).epsilon(1e-9));
    for (const auto& m : att.area_maps) {
        CHECK(m.rows() == kImageSize);
        CHECK(m.minCoeff() >= 0.0);
        CHECK(m.maxCoeff() <= 1.0);
    }

    CaseInfo info{"E42", att.score, 1, "abc123"};
    RenderOptions opt;
    opt.display_channel = 1;
    auto b = render_overlay(stack, att, info, dir / "E42", opt);
    auto loaded = load_case_bundle(dir / "E42");
    CHECK(loaded == b);
    CHECK(loaded.sequences.size() == 2);
    CHECK(loaded.base_files[7] == "base_07.png");
    CHECK(read_png(dir / "E42" / "base_07.png") == base_image(stack, 1, 7));
    CHECK(read_png(dir / "E42" / "overlay_07.png") ==
          blend_overlay(base_image(stack, 1, 7), att.area_maps[7], opt.alpha_scale));
    CHECK(case_bundle_from_json(to_json(b)) == b);

    std::filesystem::remove(dir / "E42" / "overlay_30.png");
    CHECK_THROWS_AS(load_case_bundle(dir / "E42"), Error);
    CHECK_THROWS_AS(load_case_bundle(dir / "nowhere"), Error);

    opt.display_channel = 2;
    CHECK_THROWS_AS(render_overlay(stack, att, info, dir / "bad", opt), Error);
    att.area_maps.pop_back();
    CHECK_THROWS_AS(render_overlay(stack, att, info, dir / "bad", {}), Error);
}

TEST_CASE("true positives are test positives at or above the threshold") {
    PredictionSet set;
    set.rows = {{"A", "0", SplitRole::test, 1, 0.8}, {"B", "0", SplitRole::test, 1, 0.5},
                {"C", "0", SplitRole::test, 0, 0.9}, {"D", "0", SplitRole::val, 1, 0.95},
                {"E", "1", SplitRole::test, 1, 0.49}, {"B", "1", SplitRole::val, 1, 0.7}};
    CHECK(select_true_positives(set, 0.5) == std::vector<std::string>{"A", "B"});
    CHECK(select_true_positives(set, 0.81).empty());
}

}
