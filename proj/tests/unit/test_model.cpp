#include "doctest.h"
#include "gradcheck.hpp"
#include "test_support.hpp"

#include "mst/model.hpp"
#include "mst/nn.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

using namespace mst;
using testing_support::TempDir;

namespace {

nn::Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale) {
    return nn::normal_matrix(r, c, scale, rng);
}

// FD check of a single layer's input gradient under the loss sum(W .* y).
template <class Forward, class Backward>
double layer_input_grad_error(nn::Matrix x, const nn::Matrix& weights, Forward&& fwd, Backward&& bwd) {
    auto loss = [&](const nn::Matrix& in) { return (fwd(in).array() * weights.array()).sum(); };
    nn::Matrix analytic = bwd(x, weights);
    double worst = 0.0;
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < x.size(); i += 3) {
        const double saved = x.data()[i];
        x.data()[i] = saved + h;
        const double up = loss(x);
        x.data()[i] = saved - h;
        const double down = loss(x);
        x.data()[i] = saved;
        const double numeric = (up - down) / (2 * h);
        worst = std::max(worst, std::abs(numeric - analytic.data()[i]) /
                                    std::max({std::abs(numeric), std::abs(analytic.data()[i]), 1e-6}));
    }
    return worst;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("GELU derivative matches finite differences") {
    for (double x = -4.0; x <= 4.0; x += 0.37) {
        const double h = 1e-6;
        CHECK(nn::gelu_grad(x) == doctest::Approx((nn::gelu(x + h) - nn::gelu(x - h)) / (2 * h)).epsilon(1e-6));
    }
}

TEST_CASE("softmax rows are normalized and stable") {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 50; ++t) {
        auto s = nn::softmax_rows(random_matrix(rng, 7, 13, 50.0));
        for (Eigen::Index r = 0; r < s.rows(); ++r) CHECK(std::abs(s.row(r).sum() - 1.0) <= 1e-12);
        CHECK((s.array() >= 0.0).all());
    }
    nn::Matrix big(1, 3);
    big << 1000.0, 1000.0, -1000.0;
    auto p = nn::softmax_rows(big);
    CHECK(p(0, 0) == doctest::Approx(0.5));
    CHECK(p(0, 2) == 0.0);
}

TEST_CASE("layer input gradients match finite differences") {
    std::mt19937_64 rng(2);
    nn::LayerNorm ln("ln", 8);
    ln.gamma.value = random_matrix(rng, 1, 8, 1.0);
    ln.beta.value = random_matrix(rng, 1, 8, 1.0);
    auto x = random_matrix(rng, 5, 8, 2.0);
    auto w = random_matrix(rng, 5, 8, 1.0);
    CHECK(layer_input_grad_error(
              x, w, [&](const nn::Matrix& in) { return ln.forward(in); },
              [&](const nn::Matrix& in, const nn::Matrix& dy) {
                  nn::LayerNormCache c;
                  ln.forward(in, &c);
                  return ln.backward(c, dy);
              }) <= 1e-6);

    nn::TransformerBlock block("blk", 8, 2, 2, rng);
    auto xb = random_matrix(rng, 12, 8, 1.0);  // two sequences of six tokens
    auto wb = random_matrix(rng, 12, 8, 1.0);
    CHECK(layer_input_grad_error(
              xb, wb, [&](const nn::Matrix& in) { return block.forward(in, 6); },
              [&](const nn::Matrix& in, const nn::Matrix& dy) {
                  nn::BlockCache c;
                  block.forward(in, 6, &c);
                  return block.backward(c, 6, dy);
              }) <= 1e-5);
}

TEST_CASE("attention groups are independent") {
    std::mt19937_64 rng(3);
    nn::MultiHeadAttention attn("a", 8, 2, rng);
    auto x = random_matrix(rng, 10, 8, 1.0);
    auto both = attn.forward(x, 5);
    auto first = attn.forward(x.topRows(5), 5);
    CHECK((both.topRows(5) - first).cwiseAbs().maxCoeff() <= 1e-12);
    std::vector<nn::Matrix> probs;
    attn.forward(x, 5, nullptr, &probs);
    REQUIRE(probs.size() == 4);
    for (const auto& p : probs) CHECK((p.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-12);
}

TEST_CASE("full-model gradients match finite differences under both poolings") {
    for (auto pooling : {EncoderPooling::max, EncoderPooling::cls}) {
        CAPTURE(static_cast<int>(pooling));
        MstClassifier model(gradcheck::desk_config(pooling, 5));
        std::mt19937_64 rng(6);
        auto patches = gradcheck::random_patches(model, rng);
        auto r = gradcheck::check(model, patches, 1, 2, rng);
        INFO(r.worst_where);
        CHECK(r.worst_relative <= 1e-4);
        CHECK(r.checked > 50);
    }
}

TEST_CASE("AdamW with zero learning rate leaves parameters untouched") {
    std::mt19937_64 rng(7);
    nn::Linear lin("l", 4, 3, rng);
    nn::ParameterList ps;
    lin.collect(ps);
    auto before = lin.weight.value;
    lin.weight.grad.setConstant(0.5);
    nn::AdamW::Options o;
    o.lr = 0.0;
    nn::AdamW opt(o);
    opt.step(ps);
    CHECK(lin.weight.value == before);
    o.lr = 0.1;
    nn::AdamW opt2(o);
    opt2.step(ps);
    // First Adam step moves each coordinate by lr against the gradient sign (plus decay).
    CHECK((before - lin.weight.value - 0.1 * 0.01 * before).cwiseAbs().maxCoeff() == doctest::Approx(0.1).epsilon(1e-6));
}

TEST_CASE("slice encodings have the documented shape and normalization") {
    for (auto pooling : {EncoderPooling::max, EncoderPooling::cls}) {
        auto cfg = gradcheck::desk_config(pooling, 8);
        MstClassifier model(cfg);
        std::mt19937_64 rng(9);
        auto stack = testing_support::random_stack(rng, 1);
        auto enc = model.encode(stack);
        CHECK(enc.embeddings.rows() == kSlices);
        CHECK(enc.embeddings.cols() == 32);
        CHECK(enc.patch_attention.rows() == kSlices);
        CHECK(enc.patch_attention.cols() == 64);
        CHECK((enc.patch_attention.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-9);
        CHECK((enc.patch_attention.array() >= 0.0).all());

        auto bundle = attention_bundle(model, stack);
        double total = std::accumulate(bundle.slice_weights.begin(), bundle.slice_weights.end(), 0.0);
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
        REQUIRE(bundle.area_maps.size() == static_cast<std::size_t>(kSlices));
        CHECK(bundle.area_maps[3].rows() == kImageSize);
        CHECK(bundle.area_maps[3].minCoeff() >= 0.0);
        CHECK(bundle.area_maps[3].maxCoeff() <= 1.0);
        CHECK(bundle.score == doctest::Approx(suspicion_score(model.forward(stack))));
    }
}

TEST_CASE("forward is invariant to the backbone channel expansion") {
    MstClassifier model(gradcheck::desk_config(EncoderPooling::max, 10));
    std::mt19937_64 rng(11);
    auto stack = testing_support::random_stack(rng, 2);
    auto a = model.forward(stack);
    auto b = model.forward(to_three_channels(stack));
    CHECK(a[0] == b[0]);
    CHECK(a[1] == b[1]);
}

TEST_CASE("attention rollout and slice weights") {
    nn::Matrix eye = nn::Matrix::Identity(kSlices + 1, kSlices + 1);
    auto roll = attention_rollout({eye, eye});
    CHECK((roll - eye).cwiseAbs().maxCoeff() <= 1e-12);

    std::mt19937_64 rng(12);
    std::vector<nn::Matrix> layers;
    for (int l = 0; l < 3; ++l) layers.push_back(nn::softmax_rows(random_matrix(rng, kSlices + 1, kSlices + 1, 2.0)));
    auto r = attention_rollout(layers);
    CHECK((r.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-12);
    nn::Matrix manual = nn::Matrix::Identity(kSlices + 1, kSlices + 1);
    for (const auto& a : layers) manual = (0.5 * a + 0.5 * nn::Matrix::Identity(kSlices + 1, kSlices + 1)) * manual;
    CHECK((r - manual).cwiseAbs().maxCoeff() <= 1e-12);

    for (auto mode : {AttentionMode::rollout, AttentionMode::last_layer}) {
        auto w = slice_weights_from_attention(layers, mode);
        CHECK(std::accumulate(w.begin(), w.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
    }
    auto last = slice_weights_from_attention(layers, AttentionMode::last_layer);
    const double denom = layers.back().row(0).tail(kSlices).sum();
    CHECK(last[4] == doctest::Approx(layers.back()(0, 5) / denom).epsilon(1e-12));
}

TEST_CASE("patch map upsampling") {
    Eigen::VectorXd flat = Eigen::VectorXd::Constant(64, 0.25);
    CHECK(upsample_patch_map(flat, 8).cwiseAbs().maxCoeff() == 0.0);
    Eigen::VectorXd peak = Eigen::VectorXd::Zero(64);
    peak(2 * 8 + 5) = 1.0;
    auto m = upsample_patch_map(peak, 8);
    CHECK(m.maxCoeff() == 1.0);
    CHECK(m.minCoeff() == 0.0);
    Eigen::Index r = 0, c = 0;
    m.maxCoeff(&r, &c);
    CHECK(r / 28 == 2);
    CHECK(c / 28 == 5);
    CHECK_THROWS_AS(upsample_patch_map(peak, 7), Error);
}

TEST_CASE("suspicion score is the softmax of the suspicious logit") {
    CHECK(suspicion_score({0.0, 0.0}) == 0.5);
    CHECK(suspicion_score({0.0, std::log(3.0)}) == doctest::Approx(0.75));
    CHECK(suspicion_score({-800.0, 800.0}) == 1.0);
}

TEST_CASE("model config JSON round-trip and validation") {
    auto cfg = gradcheck::desk_config(EncoderPooling::cls, 13);
    cfg.attention_mode = AttentionMode::last_layer;
    auto back = model_config_from_json(to_json(cfg));
    CHECK(to_json(back) == to_json(cfg));
    auto j = to_json(cfg);
    j["encoder"]["pooling"] = "mean";
    CHECK_THROWS_AS(model_config_from_json(j), Error);
    CHECK(VitSliceEncoder(cfg.encoder).identity() != VitSliceEncoder(gradcheck::desk_config(EncoderPooling::max, 13).encoder).identity());
}

TEST_CASE("checkpoint round-trip reproduces logits bit for bit") {
    TempDir dir("ckpt");
    MstClassifier model(gradcheck::desk_config(EncoderPooling::max, 14));
    CheckpointInfo info;
    info.channel_map = {SequenceId::T1_sub};
    info.training_config_hash = "abc";
    info.fold = "2";
    info.seed = 99;
    info.best_epoch = 4;
    info.best_val_metric = 0.8;
    save_checkpoint(model, info, dir / "ck");
    auto loaded = load_checkpoint(dir / "ck");
    CHECK(loaded.info.fold == "2");
    CHECK(loaded.info.training_config_hash == "abc");
    CHECK(loaded.info.channel_map == info.channel_map);
    CHECK(loaded.info.best_epoch == 4);
    std::mt19937_64 rng(15);
    auto stack = testing_support::random_stack(rng, 1);
    auto a = model.forward(stack);
    auto b = loaded.model.forward(stack);
    CHECK(a[0] == b[0]);
    CHECK(a[1] == b[1]);
    CHECK(loaded.weights_hash.size() == 64);

    // Truncated weights are rejected.
    auto blob = read_text_file(dir / "ck" / "weights.bin");
    write_text_file(dir / "ck" / "weights.bin", blob.substr(0, blob.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(dir / "ck"), Error);
    CHECK_THROWS_AS(load_checkpoint(dir / "nowhere"), Error);
}

TEST_CASE("parameter blobs refuse mismatched shapes") {
    MstClassifier a(gradcheck::desk_config(EncoderPooling::max, 16));
    auto cfg = gradcheck::desk_config(EncoderPooling::max, 16);
    cfg.encoder.embed_dim = 16;
    MstClassifier b(cfg);
    auto blob = serialize_parameters(static_cast<const MstClassifier&>(a).all_parameters());
    CHECK_THROWS_AS(deserialize_parameters(blob, b.all_parameters()), Error);
    MstClassifier c(gradcheck::desk_config(EncoderPooling::max, 17));
    deserialize_parameters(blob, c.all_parameters());
    CHECK(serialize_parameters(static_cast<const MstClassifier&>(c).all_parameters()) == blob);
}

}
