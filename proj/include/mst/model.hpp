#pragma once

#include "mst/nn.hpp"
#include "mst/volume.hpp"

#include "json.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mst {

using nn::Matrix;

// How a slice embedding is read out of the final token sequence: the class
// token, or the per-dimension maximum over the normalized patch tokens.
enum class EncoderPooling { max, cls };

struct EncoderConfig {
    int patch = 28;  // 224 / 28 = 8 x 8 patch grid
    int embed_dim = 192;
    int layers = 4;
    int heads = 3;
    int mlp_ratio = 4;
    EncoderPooling pooling = EncoderPooling::max;
    std::uint64_t seed = 0;
};

struct AggregatorConfig {
    int layers = 4;
    int heads = 6;
    int mlp_ratio = 4;
};

enum class AttentionMode { rollout, last_layer };

struct ModelConfig {
    EncoderConfig encoder;
    AggregatorConfig aggregator;
    bool freeze_encoder = true;
    AttentionMode attention_mode = AttentionMode::rollout;
    std::uint64_t seed = 0;  // aggregator / head initialization
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct SliceEncodings {
    Matrix embeddings;       // 38 x D
    Matrix patch_attention;  // 38 x (Gy * Gx); each row sums to 1
};

/// Maps each slice of a stack to a D-dimensional embedding plus a
/// distribution over its patch grid saying where the embedding came from:
/// class-token attention under cls pooling, the share of embedding
/// dimensions each patch supplies under max pooling.
class SliceEncoder {
public:
    virtual ~SliceEncoder() = default;

    virtual int embed_dim() const = 0;
    virtual int grid_size() const = 0;  // patches per side
    virtual std::string identity() const = 0;
    virtual SliceEncodings encode(const SequenceStack& stack) const = 0;
};

/// Vision transformer over 2D slices: patch embedding, class token, learned
/// positions, pre-norm blocks and a final norm ahead of the slice readout.
class VitSliceEncoder final : public SliceEncoder {
public:
    struct Cache {
        Matrix patches;
        std::vector<nn::BlockCache> blocks;
        nn::LayerNormCache norm;
        std::vector<int> argmax;  // max pooling: winning patch per (slice, dim)
    };

    VitSliceEncoder() = default;
    explicit VitSliceEncoder(const EncoderConfig& config);

    int embed_dim() const override { return config_.embed_dim; }
    int grid_size() const override { return kImageSize / config_.patch; }
    std::string identity() const override;
    SliceEncodings encode(const SequenceStack& stack) const override;

    // Patch rows for every slice: (38 * G) x (3 * patch^2), with the backbone
    // channel mapping applied lazily.
    Matrix patchify(const SequenceStack& stack) const;
    // Same as patchify on an already 3-channel stack, without remapping.
    Matrix patchify_three(const SequenceStack& three_channel) const;

    Matrix encode_patches(const Matrix& patches, Matrix* patch_attention, Cache* cache) const;
    void backward(const Cache& cache, const Matrix& d_embeddings);

    void collect(nn::ParameterList& out);
    void collect(nn::ConstParameterList& out) const;
    const EncoderConfig& config() const { return config_; }

private:
    Matrix max_pool_tokens(const Matrix& tokens, Matrix* patch_attention, Cache* cache) const;
    Matrix patchify_mapped(const SequenceStack& stack, const std::array<int, 3>& map) const;

    EncoderConfig config_;
    nn::Linear patch_embed_;
    nn::Parameter cls_token_;
    nn::Parameter pos_embed_;
    std::vector<nn::TransformerBlock> blocks_;
    nn::LayerNorm norm_;
};

using Logits = std::array<double, 2>;

// softmax(logits)[suspicious]
double suspicion_score(const Logits& logits);

struct AggregatorCache {
    int batch = 0;
    Matrix tokens;
    std::vector<nn::BlockCache> blocks;
    nn::LayerNormCache norm;
    Matrix pooled;
};

/// Slice transformer classifier: encoder embeddings of the 38 slices plus a
/// learned class token and slice positions, a transformer aggregator, and a
/// linear two-way head.
class MstClassifier {
public:
    explicit MstClassifier(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    const VitSliceEncoder& encoder() const { return encoder_; }
    VitSliceEncoder& encoder() { return encoder_; }

    SliceEncodings encode(const SequenceStack& stack) const;
    Logits forward(const SequenceStack& stack) const;
    Logits forward_embeddings(const Matrix& embeddings) const;

    // Head-averaged aggregator attention (39 x 39) of every layer.
    std::vector<Matrix> aggregator_attention(const Matrix& embeddings) const;

    // Batched training path: embeddings are (B * 38) x D, logits B x 2.
    Matrix forward_train(const Matrix& embeddings, int batch, AggregatorCache& cache) const;
    // Returns dL/d(embeddings).
    Matrix backward(const AggregatorCache& cache, const Matrix& d_logits);

    nn::ParameterList aggregator_parameters();
    nn::ParameterList trainable_parameters();
    nn::ParameterList all_parameters();
    nn::ConstParameterList all_parameters() const;

    nn::Linear& head() { return head_; }

private:
    Matrix build_tokens(const Matrix& embeddings, int batch) const;

    ModelConfig config_;
    VitSliceEncoder encoder_;
    nn::Parameter cls_token_;
    nn::Parameter slice_pos_;
    std::vector<nn::TransformerBlock> blocks_;
    nn::LayerNorm norm_;
    nn::Linear head_;
};

// Residual-corrected attention rollout: product of 0.5 * A + 0.5 * I over
// layers (first layer applied first).
Matrix attention_rollout(const std::vector<Matrix>& layer_attention);

// Class-token weights over the 38 slices, normalized to sum to 1.
std::array<double, kSlices> slice_weights_from_attention(const std::vector<Matrix>& layer_attention,
                                                         AttentionMode mode);

std::array<double, kSlices> slice_attention(const MstClassifier& model, const SequenceStack& stack);

// Bilinear upsampling of a G x G patch map to 224 x 224 followed by per-slice
// min-max normalization; a constant map becomes all zeros.
Matrix upsample_patch_map(const Eigen::VectorXd& patch_weights, int grid);
Matrix area_attention(const MstClassifier& model, const SequenceStack& stack, int slice_idx);

struct AttentionBundle {
    std::array<double, kSlices> slice_weights{};
    std::vector<Matrix> area_maps;  // 38 maps of 224 x 224 in [0, 1]
    double score = 0.0;
};

AttentionBundle attention_bundle(const MstClassifier& model, const SequenceStack& stack);

// --- checkpoints --------------------------------------------------------------

struct CheckpointInfo {
    std::vector<SequenceId> channel_map;
    std::string training_config_hash;
    std::string fold;  // "0".."4", "full", ...
    std::uint64_t seed = 0;
    int best_epoch = -1;
    double best_val_metric = 0.0;
};

// <dir>/weights.bin + <dir>/manifest.json
void save_checkpoint(const MstClassifier& model, const CheckpointInfo& info,
                     const std::filesystem::path& dir);

struct LoadedCheckpoint {
    MstClassifier model;
    CheckpointInfo info;
    std::string weights_hash;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

// Raw weight blob I/O shared by checkpoints and encoder-weight adapters.
std::string serialize_parameters(const nn::ConstParameterList& params);
void deserialize_parameters(const std::string& blob, const nn::ParameterList& params,
                            bool allow_missing = false);

// Loads encoder weights (e.g. converted pretrained backbone weights) from a blob.
void load_encoder_weights(VitSliceEncoder& encoder, const std::filesystem::path& path);

}  // namespace mst
