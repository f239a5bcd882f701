#include "mst/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <map>

namespace mst {

using nlohmann::json;

// --- configuration -------------------------------------------------------------

json to_json(const ModelConfig& c) {
    return {
        {"encoder",
         {{"patch", c.encoder.patch},
          {"embed_dim", c.encoder.embed_dim},
          {"layers", c.encoder.layers},
          {"heads", c.encoder.heads},
          {"mlp_ratio", c.encoder.mlp_ratio},
          {"pooling", c.encoder.pooling == EncoderPooling::max ? "max" : "cls"},
          {"seed", c.encoder.seed}}},
        {"aggregator",
         {{"layers", c.aggregator.layers}, {"heads", c.aggregator.heads}, {"mlp_ratio", c.aggregator.mlp_ratio}}},
        {"freeze_encoder", c.freeze_encoder},
        {"attention_mode", c.attention_mode == AttentionMode::rollout ? "rollout" : "last_layer"},
        {"seed", c.seed},
    };
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    if (j.contains("encoder")) {
        const auto& e = j["encoder"];
        c.encoder.patch = e.value("patch", c.encoder.patch);
        c.encoder.embed_dim = e.value("embed_dim", c.encoder.embed_dim);
        c.encoder.layers = e.value("layers", c.encoder.layers);
        c.encoder.heads = e.value("heads", c.encoder.heads);
        c.encoder.mlp_ratio = e.value("mlp_ratio", c.encoder.mlp_ratio);
        c.encoder.seed = e.value("seed", c.encoder.seed);
        auto pooling = e.value("pooling", std::string("max"));
        if (pooling == "max") c.encoder.pooling = EncoderPooling::max;
        else if (pooling == "cls") c.encoder.pooling = EncoderPooling::cls;
        else throw Error("validation", "unknown encoder pooling '" + pooling + "'");
    }
    if (j.contains("aggregator")) {
        const auto& a = j["aggregator"];
        c.aggregator.layers = a.value("layers", c.aggregator.layers);
        c.aggregator.heads = a.value("heads", c.aggregator.heads);
        c.aggregator.mlp_ratio = a.value("mlp_ratio", c.aggregator.mlp_ratio);
    }
    c.freeze_encoder = j.value("freeze_encoder", c.freeze_encoder);
    auto mode = j.value("attention_mode", std::string("rollout"));
    if (mode == "rollout") c.attention_mode = AttentionMode::rollout;
    else if (mode == "last_layer") c.attention_mode = AttentionMode::last_layer;
    else throw Error("validation", "unknown attention_mode '" + mode + "'");
    c.seed = j.value("seed", c.seed);
    return c;
}

// --- encoder -------------------------------------------------------------------

VitSliceEncoder::VitSliceEncoder(const EncoderConfig& config) : config_(config) {
    if (config.patch < 1 || kImageSize % config.patch != 0) {
        throw Error("precondition", "encoder patch size must divide 224");
    }
    std::mt19937_64 rng(config.seed);
    const int g = grid_size();
    const int patch_dim = 3 * config.patch * config.patch;
    patch_embed_ = nn::Linear("encoder.patch_embed", patch_dim, config.embed_dim, rng);
    cls_token_ = nn::Parameter("encoder.cls_token", nn::normal_matrix(1, config.embed_dim, 0.02, rng));
    pos_embed_ = nn::Parameter("encoder.pos_embed", nn::normal_matrix(g * g + 1, config.embed_dim, 0.02, rng));
    for (int l = 0; l < config.layers; ++l) {
        blocks_.emplace_back("encoder.block" + std::to_string(l), config.embed_dim, config.heads,
                             config.mlp_ratio, rng);
    }
    norm_ = nn::LayerNorm("encoder.norm", config.embed_dim);
}

std::string VitSliceEncoder::identity() const {
    return "vit-p" + std::to_string(config_.patch) + "-d" + std::to_string(config_.embed_dim) + "-l" +
           std::to_string(config_.layers) + "-h" + std::to_string(config_.heads) +
           (config_.pooling == EncoderPooling::max ? "-max" : "-cls");
}

Matrix VitSliceEncoder::patchify_mapped(const SequenceStack& stack, const std::array<int, 3>& map) const {
    const int p = config_.patch;
    const int g = grid_size();
    Matrix out(static_cast<Eigen::Index>(kSlices) * g * g, 3 * p * p);
    for (int z = 0; z < kSlices; ++z) {
        for (int gy = 0; gy < g; ++gy) {
            for (int gx = 0; gx < g; ++gx) {
                const Eigen::Index row = (static_cast<Eigen::Index>(z) * g + gy) * g + gx;
                double* dst = out.row(row).data();
                for (int c = 0; c < 3; ++c) {
                    auto sl = stack.slice(map[static_cast<std::size_t>(c)], z);
                    for (int py = 0; py < p; ++py) {
                        const float* src = sl.data() + static_cast<std::size_t>(gy * p + py) * kImageSize +
                                           static_cast<std::size_t>(gx * p);
                        for (int px = 0; px < p; ++px) *dst++ = src[px];
                    }
                }
            }
        }
    }
    return out;
}

Matrix VitSliceEncoder::patchify(const SequenceStack& stack) const {
    check_stack(stack);
    return patchify_mapped(stack, backbone_channel_map(stack.channels));
}

Matrix VitSliceEncoder::patchify_three(const SequenceStack& three_channel) const {
    if (three_channel.channels != 3) throw Error("shape", "patchify_three: expected a 3-channel stack");
    check_stack(three_channel);
    return patchify_mapped(three_channel, {0, 1, 2});
}

Matrix VitSliceEncoder::encode_patches(const Matrix& patches, Matrix* patch_attention, Cache* cache) const {
    const int g = grid_size();
    const int n_patch = g * g;
    const int seq = n_patch + 1;
    if (patches.rows() % n_patch != 0) throw Error("shape", "encoder: patch rows not a multiple of the grid");
    const int batch = static_cast<int>(patches.rows() / n_patch);

    Matrix emb = patch_embed_.forward(patches);
    Matrix tokens(static_cast<Eigen::Index>(batch) * seq, config_.embed_dim);
    for (int b = 0; b < batch; ++b) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq;
        tokens.row(r0) = cls_token_.value.row(0) + pos_embed_.value.row(0);
        tokens.block(r0 + 1, 0, n_patch, config_.embed_dim) =
            emb.block(static_cast<Eigen::Index>(b) * n_patch, 0, n_patch, config_.embed_dim) +
            pos_embed_.value.bottomRows(n_patch);
    }
    if (cache != nullptr) {
        cache->patches = patches;
        cache->blocks.assign(blocks_.size(), {});
    }
    const bool max_pool = config_.pooling == EncoderPooling::max;
    std::vector<Matrix> last_probs;
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const bool last = l + 1 == blocks_.size();
        tokens = blocks_[l].forward(tokens, seq, cache ? &cache->blocks[l] : nullptr,
                                    (last && patch_attention != nullptr && !max_pool) ? &last_probs : nullptr);
    }
    if (max_pool) return max_pool_tokens(tokens, patch_attention, cache);

    Matrix cls(batch, config_.embed_dim);
    for (int b = 0; b < batch; ++b) cls.row(b) = tokens.row(static_cast<Eigen::Index>(b) * seq);

    if (patch_attention != nullptr) {
        const int heads = blocks_.empty() ? 1 : blocks_.back().attention().heads();
        patch_attention->resize(batch, n_patch);
        for (int b = 0; b < batch; ++b) {
            Eigen::RowVectorXd w = Eigen::RowVectorXd::Zero(n_patch);
            if (blocks_.empty()) {
                w.setConstant(1.0);
            } else {
                for (int h = 0; h < heads; ++h) {
                    w += last_probs[static_cast<std::size_t>(b * heads + h)].row(0).tail(n_patch);
                }
            }
            patch_attention->row(b) = w / w.sum();
        }
    }
    return norm_.forward(cls, cache ? &cache->norm : nullptr);
}

Matrix VitSliceEncoder::max_pool_tokens(const Matrix& tokens, Matrix* patch_attention, Cache* cache) const {
    const int n_patch = grid_size() * grid_size();
    const int seq = n_patch + 1;
    const int d = config_.embed_dim;
    const int batch = static_cast<int>(tokens.rows() / seq);

    Matrix patch_tokens(static_cast<Eigen::Index>(batch) * n_patch, d);
    for (int b = 0; b < batch; ++b) {
        patch_tokens.block(static_cast<Eigen::Index>(b) * n_patch, 0, n_patch, d) =
            tokens.block(static_cast<Eigen::Index>(b) * seq + 1, 0, n_patch, d);
    }
    Matrix normed = norm_.forward(patch_tokens, cache ? &cache->norm : nullptr);

    Matrix out(batch, d);
    std::vector<int> winners(static_cast<std::size_t>(batch) * d);
    if (patch_attention != nullptr) patch_attention->setZero(batch, n_patch);
    for (int b = 0; b < batch; ++b) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(b) * n_patch;
        for (int j = 0; j < d; ++j) {
            Eigen::Index best = 0;
            out(b, j) = normed.col(j).segment(r0, n_patch).maxCoeff(&best);
            winners[static_cast<std::size_t>(b) * d + j] = static_cast<int>(best);
            if (patch_attention != nullptr) (*patch_attention)(b, best) += 1.0 / d;
        }
    }
    if (cache != nullptr) cache->argmax = std::move(winners);
    return out;
}

SliceEncodings VitSliceEncoder::encode(const SequenceStack& stack) const {
    SliceEncodings out;
    out.embeddings = encode_patches(patchify(stack), &out.patch_attention, nullptr);
    return out;
}

void VitSliceEncoder::backward(const Cache& cache, const Matrix& d_embeddings) {
    const int g = grid_size();
    const int n_patch = g * g;
    const int seq = n_patch + 1;
    const int batch = static_cast<int>(d_embeddings.rows());

    const int d = config_.embed_dim;
    Matrix d_tokens = Matrix::Zero(static_cast<Eigen::Index>(batch) * seq, d);
    if (config_.pooling == EncoderPooling::max) {
        Matrix d_normed = Matrix::Zero(static_cast<Eigen::Index>(batch) * n_patch, d);
        for (int b = 0; b < batch; ++b) {
            for (int j = 0; j < d; ++j) {
                const int winner = cache.argmax[static_cast<std::size_t>(b) * d + j];
                d_normed(static_cast<Eigen::Index>(b) * n_patch + winner, j) = d_embeddings(b, j);
            }
        }
        Matrix d_patch = norm_.backward(cache.norm, d_normed);
        for (int b = 0; b < batch; ++b) {
            d_tokens.block(static_cast<Eigen::Index>(b) * seq + 1, 0, n_patch, d) =
                d_patch.block(static_cast<Eigen::Index>(b) * n_patch, 0, n_patch, d);
        }
    } else {
        Matrix d_cls = norm_.backward(cache.norm, d_embeddings);
        for (int b = 0; b < batch; ++b) d_tokens.row(static_cast<Eigen::Index>(b) * seq) = d_cls.row(b);
    }
    for (std::size_t l = blocks_.size(); l-- > 0;) d_tokens = blocks_[l].backward(cache.blocks[l], seq, d_tokens);

    Matrix d_emb(static_cast<Eigen::Index>(batch) * n_patch, config_.embed_dim);
    for (int b = 0; b < batch; ++b) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq;
        cls_token_.grad.row(0) += d_tokens.row(r0);
        pos_embed_.grad += d_tokens.block(r0, 0, seq, config_.embed_dim);
        d_emb.block(static_cast<Eigen::Index>(b) * n_patch, 0, n_patch, config_.embed_dim) =
            d_tokens.block(r0 + 1, 0, n_patch, config_.embed_dim);
    }
    patch_embed_.backward(cache.patches, d_emb);
}

void VitSliceEncoder::collect(nn::ParameterList& out) {
    patch_embed_.collect(out);
    out.push_back(&cls_token_);
    out.push_back(&pos_embed_);
    for (auto& b : blocks_) b.collect(out);
    norm_.collect(out);
}

void VitSliceEncoder::collect(nn::ConstParameterList& out) const {
    patch_embed_.collect(out);
    out.push_back(&cls_token_);
    out.push_back(&pos_embed_);
    for (const auto& b : blocks_) b.collect(out);
    norm_.collect(out);
}

// --- classifier ------------------------------------------------------------------

double suspicion_score(const Logits& logits) {
    const double m = std::max(logits[0], logits[1]);
    const double e0 = std::exp(logits[0] - m);
    const double e1 = std::exp(logits[1] - m);
    return e1 / (e0 + e1);
}

MstClassifier::MstClassifier(const ModelConfig& config) : config_(config), encoder_(config.encoder) {
    std::mt19937_64 rng(config.seed);
    const int d = config.encoder.embed_dim;
    cls_token_ = nn::Parameter("aggregator.cls_token", nn::normal_matrix(1, d, 0.02, rng));
    slice_pos_ = nn::Parameter("aggregator.slice_pos", nn::normal_matrix(kSlices, d, 0.02, rng));
    for (int l = 0; l < config.aggregator.layers; ++l) {
        blocks_.emplace_back("aggregator.block" + std::to_string(l), d, config.aggregator.heads,
                             config.aggregator.mlp_ratio, rng);
    }
    norm_ = nn::LayerNorm("aggregator.norm", d);
    head_ = nn::Linear("head", d, 2, rng);
}

SliceEncodings MstClassifier::encode(const SequenceStack& stack) const { return encoder_.encode(stack); }

Matrix MstClassifier::build_tokens(const Matrix& embeddings, int batch) const {
    const int d = config_.encoder.embed_dim;
    if (embeddings.rows() != static_cast<Eigen::Index>(batch) * kSlices || embeddings.cols() != d) {
        throw Error("shape", "aggregator: expected (" + std::to_string(batch * kSlices) + " x " +
                                 std::to_string(d) + ") slice embeddings");
    }
    constexpr int seq = kSlices + 1;
    Matrix tokens(static_cast<Eigen::Index>(batch) * seq, d);
    for (int b = 0; b < batch; ++b) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq;
        tokens.row(r0) = cls_token_.value.row(0);
        tokens.block(r0 + 1, 0, kSlices, d) =
            embeddings.block(static_cast<Eigen::Index>(b) * kSlices, 0, kSlices, d) + slice_pos_.value;
    }
    return tokens;
}

Logits MstClassifier::forward_embeddings(const Matrix& embeddings) const {
    constexpr int seq = kSlices + 1;
    Matrix tokens = build_tokens(embeddings, 1);
    for (const auto& b : blocks_) tokens = b.forward(tokens, seq);
    Matrix pooled = norm_.forward(tokens.topRows(1));
    Matrix logits = head_.forward(pooled);
    return {logits(0, 0), logits(0, 1)};
}

Logits MstClassifier::forward(const SequenceStack& stack) const {
    return forward_embeddings(encode(stack).embeddings);
}

std::vector<Matrix> MstClassifier::aggregator_attention(const Matrix& embeddings) const {
    constexpr int seq = kSlices + 1;
    Matrix tokens = build_tokens(embeddings, 1);
    std::vector<Matrix> layers;
    for (const auto& b : blocks_) {
        std::vector<Matrix> probs;
        tokens = b.forward(tokens, seq, nullptr, &probs);
        Matrix avg = Matrix::Zero(seq, seq);
        for (const auto& p : probs) avg += p;
        layers.push_back(avg / static_cast<double>(probs.size()));
    }
    return layers;
}

Matrix MstClassifier::forward_train(const Matrix& embeddings, int batch, AggregatorCache& cache) const {
    constexpr int seq = kSlices + 1;
    cache.batch = batch;
    cache.tokens = build_tokens(embeddings, batch);
    cache.blocks.assign(blocks_.size(), {});
    Matrix x = cache.tokens;
    for (std::size_t l = 0; l < blocks_.size(); ++l) x = blocks_[l].forward(x, seq, &cache.blocks[l]);
    Matrix cls(batch, x.cols());
    for (int b = 0; b < batch; ++b) cls.row(b) = x.row(static_cast<Eigen::Index>(b) * seq);
    cache.pooled = norm_.forward(cls, &cache.norm);
    return head_.forward(cache.pooled);
}

Matrix MstClassifier::backward(const AggregatorCache& cache, const Matrix& d_logits) {
    constexpr int seq = kSlices + 1;
    const int d = config_.encoder.embed_dim;
    Matrix d_pooled = head_.backward(cache.pooled, d_logits);
    Matrix d_cls = norm_.backward(cache.norm, d_pooled);
    Matrix dx = Matrix::Zero(cache.tokens.rows(), d);
    for (int b = 0; b < cache.batch; ++b) dx.row(static_cast<Eigen::Index>(b) * seq) = d_cls.row(b);
    for (std::size_t l = blocks_.size(); l-- > 0;) dx = blocks_[l].backward(cache.blocks[l], seq, dx);

    Matrix d_emb(static_cast<Eigen::Index>(cache.batch) * kSlices, d);
    for (int b = 0; b < cache.batch; ++b) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq;
        cls_token_.grad.row(0) += dx.row(r0);
        auto block = dx.block(r0 + 1, 0, kSlices, d);
        slice_pos_.grad += block;
        d_emb.block(static_cast<Eigen::Index>(b) * kSlices, 0, kSlices, d) = block;
    }
    return d_emb;
}

nn::ParameterList MstClassifier::aggregator_parameters() {
    nn::ParameterList out;
    out.push_back(&cls_token_);
    out.push_back(&slice_pos_);
    for (auto& b : blocks_) b.collect(out);
    norm_.collect(out);
    head_.collect(out);
    return out;
}

nn::ParameterList MstClassifier::trainable_parameters() {
    auto out = aggregator_parameters();
    if (!config_.freeze_encoder) encoder_.collect(out);
    return out;
}

nn::ParameterList MstClassifier::all_parameters() {
    nn::ParameterList out;
    encoder_.collect(out);
    auto agg = aggregator_parameters();
    out.insert(out.end(), agg.begin(), agg.end());
    return out;
}

nn::ConstParameterList MstClassifier::all_parameters() const {
    nn::ConstParameterList out;
    encoder_.collect(out);
    out.push_back(&cls_token_);
    out.push_back(&slice_pos_);
    for (const auto& b : blocks_) b.collect(out);
    norm_.collect(out);
    head_.collect(out);
    return out;
}

// --- attention ---------------------------------------------------------------------

Matrix attention_rollout(const std::vector<Matrix>& layer_attention) {
    if (layer_attention.empty()) throw Error("precondition", "rollout needs at least one layer");
    const Eigen::Index n = layer_attention.front().rows();
    Matrix rollout = Matrix::Identity(n, n);
    for (const auto& a : layer_attention) {
        Matrix corrected = 0.5 * a + 0.5 * Matrix::Identity(n, n);
        for (Eigen::Index r = 0; r < n; ++r) corrected.row(r) /= corrected.row(r).sum();
        rollout = corrected * rollout;
    }
    return rollout;
}

std::array<double, kSlices> slice_weights_from_attention(const std::vector<Matrix>& layer_attention,
                                                         AttentionMode mode) {
    std::array<double, kSlices> w{};
    if (layer_attention.empty()) {
        w.fill(1.0 / kSlices);
        return w;
    }
    Matrix source = mode == AttentionMode::rollout ? attention_rollout(layer_attention) : layer_attention.back();
    double total = 0.0;
    for (int s = 0; s < kSlices; ++s) {
        w[static_cast<std::size_t>(s)] = std::max(0.0, source(0, s + 1));
        total += w[static_cast<std::size_t>(s)];
    }
    if (!(total > 0.0)) {
        w.fill(1.0 / kSlices);
        return w;
    }
    for (double& v : w) v /= total;
    return w;
}

std::array<double, kSlices> slice_attention(const MstClassifier& model, const SequenceStack& stack) {
    auto enc = model.encode(stack);
    return slice_weights_from_attention(model.aggregator_attention(enc.embeddings), model.config().attention_mode);
}

Matrix upsample_patch_map(const Eigen::VectorXd& patch_weights, int grid) {
    if (patch_weights.size() != static_cast<Eigen::Index>(grid) * grid) {
        throw Error("shape", "upsample_patch_map: weight count does not match grid");
    }
    Matrix out(kImageSize, kImageSize);
    const double scale = static_cast<double>(grid) / kImageSize;
    auto coord = [&](int o, int& i0, int& i1, double& w) {
        double src = std::clamp((o + 0.5) * scale - 0.5, 0.0, static_cast<double>(grid - 1));
        i0 = static_cast<int>(std::floor(src));
        i1 = std::min(i0 + 1, grid - 1);
        w = src - i0;
    };
    for (int y = 0; y < kImageSize; ++y) {
        int y0, y1;
        double wy;
        coord(y, y0, y1, wy);
        for (int x = 0; x < kImageSize; ++x) {
            int x0, x1;
            double wx;
            coord(x, x0, x1, wx);
            auto at = [&](int yy, int xx) { return patch_weights(yy * grid + xx); };
            out(y, x) = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) +
                        wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
        }
    }
    const double lo = out.minCoeff();
    const double hi = out.maxCoeff();
    if (!(hi - lo > 1e-12 * std::max(1.0, std::abs(hi)))) return Matrix::Zero(kImageSize, kImageSize);
    return ((out.array() - lo) / (hi - lo)).matrix();
}

Matrix area_attention(const MstClassifier& model, const SequenceStack& stack, int slice_idx) {
    if (slice_idx < 0 || slice_idx >= kSlices) {
        throw Error("precondition", "slice index " + std::to_string(slice_idx) + " outside 0-37");
    }
    auto enc = model.encode(stack);
    return upsample_patch_map(enc.patch_attention.row(slice_idx).transpose(), model.encoder().grid_size());
}

AttentionBundle attention_bundle(const MstClassifier& model, const SequenceStack& stack) {
    auto enc = model.encode(stack);
    AttentionBundle bundle;
    bundle.slice_weights =
        slice_weights_from_attention(model.aggregator_attention(enc.embeddings), model.config().attention_mode);
    bundle.score = suspicion_score(model.forward_embeddings(enc.embeddings));
    const int g = model.encoder().grid_size();
    bundle.area_maps.reserve(kSlices);
    for (int s = 0; s < kSlices; ++s) {
        bundle.area_maps.push_back(upsample_patch_map(enc.patch_attention.row(s).transpose(), g));
    }
    return bundle;
}

// --- serialization ---------------------------------------------------------------

namespace {

constexpr char kWeightsMagic[5] = {'M', 'S', 'T', 'W', '1'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
    if (pos + 4 > in.size()) throw Error("format", "weights blob truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    pos += 4;
    return v;
}

json checkpoint_manifest(const MstClassifier& model, const CheckpointInfo& info, const std::string& weights_hash) {
    nn::ConstParameterList enc;
    model.encoder().collect(enc);
    json channel_map = json::array();
    for (auto id : info.channel_map) channel_map.push_back(to_string(id));
    return {
        {"format", "mst-checkpoint-1"},
        {"architecture", to_json(model.config())},
        {"channel_map", channel_map},
        {"encoder", {{"identity", model.encoder().identity()}, {"hash", sha256_hex(serialize_parameters(enc))}}},
        {"training_config_hash", info.training_config_hash},
        {"fold", info.fold},
        {"seed", info.seed},
        {"best_epoch", info.best_epoch},
        {"best_val_metric", info.best_val_metric},
        {"weights_hash", weights_hash},
    };
}

}  // namespace

std::string serialize_parameters(const nn::ConstParameterList& params) {
    static_assert(std::endian::native == std::endian::little, "weight blobs are little-endian");
    std::string out(kWeightsMagic, 5);
    put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto* p : params) {
        put_u32(out, static_cast<std::uint32_t>(p->name.size()));
        out += p->name;
        put_u32(out, static_cast<std::uint32_t>(p->value.rows()));
        put_u32(out, static_cast<std::uint32_t>(p->value.cols()));
        out.append(reinterpret_cast<const char*>(p->value.data()),
                   static_cast<std::size_t>(p->value.size()) * sizeof(double));
    }
    return out;
}

void deserialize_parameters(const std::string& blob, const nn::ParameterList& params, bool allow_missing) {
    if (blob.size() < 9 || std::memcmp(blob.data(), kWeightsMagic, 5) != 0) {
        throw Error("format", "not an MSTW1 weights blob");
    }
    std::size_t pos = 5;
    const std::uint32_t count = get_u32(blob, pos);
    std::map<std::string, nn::Parameter*> by_name;
    for (auto* p : params) by_name[p->name] = p;
    std::size_t matched = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t len = get_u32(blob, pos);
        if (pos + len > blob.size()) throw Error("format", "weights blob truncated");
        std::string name = blob.substr(pos, len);
        pos += len;
        const std::uint32_t rows = get_u32(blob, pos);
        const std::uint32_t cols = get_u32(blob, pos);
        const std::size_t bytes = static_cast<std::size_t>(rows) * cols * sizeof(double);
        if (pos + bytes > blob.size()) throw Error("format", "weights blob truncated");
        auto it = by_name.find(name);
        if (it != by_name.end()) {
            nn::Parameter& p = *it->second;
            if (p.value.rows() != rows || p.value.cols() != cols) {
                throw Error("compatibility", "parameter '" + name + "' has shape " + std::to_string(rows) + "x" +
                                                 std::to_string(cols) + ", model expects " +
                                                 std::to_string(p.value.rows()) + "x" + std::to_string(p.value.cols()));
            }
            std::memcpy(p.value.data(), blob.data() + pos, bytes);
            ++matched;
        }
        pos += bytes;
    }
    if (!allow_missing && matched != params.size()) {
        throw Error("compatibility", "weights blob provides " + std::to_string(matched) + " of " +
                                         std::to_string(params.size()) + " model parameters");
    }
}

void save_checkpoint(const MstClassifier& model, const CheckpointInfo& info, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::string blob = serialize_parameters(model.all_parameters());
    std::string hash = sha256_hex(blob);
    write_text_file(dir / "weights.bin", blob);
    write_text_file(dir / "manifest.json", checkpoint_manifest(model, info, hash).dump(2) + "\n");
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
    if (!std::filesystem::exists(dir / "manifest.json") || !std::filesystem::exists(dir / "weights.bin")) {
        throw Error("io", "missing checkpoint at " + dir.string());
    }
    json m;
    try {
        m = json::parse(read_text_file(dir / "manifest.json"));
    } catch (const json::exception& e) {
        throw Error("format", dir.string() + "/manifest.json: " + e.what());
    }
    std::string blob = read_text_file(dir / "weights.bin");
    std::string hash = sha256_hex(blob);
    if (m.value("weights_hash", std::string()) != hash) {
        throw Error("compatibility", dir.string() + ": weights hash does not match manifest");
    }
    LoadedCheckpoint out{MstClassifier(model_config_from_json(m.at("architecture"))), {}, hash};
    deserialize_parameters(blob, out.model.all_parameters());
    for (const auto& s : m.at("channel_map")) out.info.channel_map.push_back(parse_sequence_id(s.get<std::string>()));
    out.info.training_config_hash = m.value("training_config_hash", std::string());
    out.info.fold = m.value("fold", std::string());
    out.info.seed = m.value("seed", std::uint64_t{0});
    out.info.best_epoch = m.value("best_epoch", -1);
    out.info.best_val_metric = m.value("best_val_metric", 0.0);
    return out;
}

void load_encoder_weights(VitSliceEncoder& encoder, const std::filesystem::path& path) {
    nn::ParameterList params;
    encoder.collect(params);
    deserialize_parameters(read_text_file(path), params);
}

}  // namespace mst
