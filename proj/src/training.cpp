#include "mst/training.hpp"

#include "mst/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace mst {

using nlohmann::json;

// ---- config -------------------------------------------------------------------

nlohmann::json to_json(const TrainConfig& c) {
    json seqs = json::array();
    for (auto s : c.sequences) seqs.push_back(to_string(s));
    return json{
        {"sequences", seqs},
        {"lr", c.lr},
        {"optimizer", "adamw"},
        {"loss", "cross_entropy"},
        {"weight_decay", c.weight_decay},
        {"batch_size", c.batch_size},
        {"max_epochs", c.max_epochs},
        {"early_stop_patience", c.early_stop_patience},
        {"seed", c.seed},
        {"augment", c.augment},
        {"augment_bounds",
         {{"max_rotation_deg", c.augment_bounds.max_rotation_deg},
          {"flips", c.augment_bounds.flips},
          {"inversion", c.augment_bounds.inversion},
          {"max_noise_sd", c.augment_bounds.max_noise_sd}}},
        {"augment_views", c.augment_views},
        {"model", to_json(c.model)},
        {"preprocess",
         {{"split_laterality", c.preprocess.split_laterality},
          {"lo_pct", c.preprocess.lo_pct},
          {"hi_pct", c.preprocess.hi_pct}}},
        {"encoder_weights", c.encoder_weights},
        {"cache_dir", c.cache_dir},
    };
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {
        "sequences", "lr", "optimizer", "loss", "weight_decay", "batch_size", "max_epochs",
        "early_stop_patience", "seed", "augment", "augment_bounds", "augment_views", "model",
        "preprocess", "encoder_weights", "cache_dir"};
    if (!j.is_object()) throw Error("validation", "training config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (!known.count(key)) throw Error("validation", "unknown training config key '" + key + "'");
    }
    TrainConfig c;
    try {
        if (j.contains("sequences")) {
            const auto& s = j.at("sequences");
            c.sequences = s.is_string() ? parse_sequence_list(s.get<std::string>()) : std::vector<SequenceId>{};
            if (s.is_array()) {
                for (const auto& v : s) c.sequences.push_back(parse_sequence_id(v.get<std::string>()));
            }
        }
        if (j.value("optimizer", std::string("adamw")) != "adamw") throw Error("validation", "optimizer must be adamw");
        if (j.value("loss", std::string("cross_entropy")) != "cross_entropy") {
            throw Error("validation", "loss must be cross_entropy");
        }
        c.lr = j.value("lr", c.lr);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
        c.seed = j.value("seed", c.seed);
        c.augment = j.value("augment", c.augment);
        if (j.contains("augment_bounds")) {
            const auto& b = j.at("augment_bounds");
            c.augment_bounds.max_rotation_deg = b.value("max_rotation_deg", c.augment_bounds.max_rotation_deg);
            c.augment_bounds.flips = b.value("flips", c.augment_bounds.flips);
            c.augment_bounds.inversion = b.value("inversion", c.augment_bounds.inversion);
            c.augment_bounds.max_noise_sd = b.value("max_noise_sd", c.augment_bounds.max_noise_sd);
        }
        c.augment_views = j.value("augment_views", c.augment_views);
        if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
        if (j.contains("preprocess")) {
            const auto& p = j.at("preprocess");
            c.preprocess.split_laterality = p.value("split_laterality", c.preprocess.split_laterality);
            c.preprocess.lo_pct = p.value("lo_pct", c.preprocess.lo_pct);
            c.preprocess.hi_pct = p.value("hi_pct", c.preprocess.hi_pct);
        }
        c.encoder_weights = j.value("encoder_weights", c.encoder_weights);
        c.cache_dir = j.value("cache_dir", c.cache_dir);
    } catch (const json::exception& e) {
        throw Error("validation", std::string("training config: ") + e.what());
    }
    return c;
}

void validate_train_config(const TrainConfig& c) {
    if (!(c.lr > 0.0) || !std::isfinite(c.lr)) throw Error("validation", "lr must be positive");
    if (c.weight_decay < 0.0) throw Error("validation", "weight_decay must be non-negative");
    if (c.batch_size < 1) throw Error("validation", "batch_size must be at least 1");
    if (c.max_epochs < 1) throw Error("validation", "max_epochs must be at least 1");
    if (c.early_stop_patience < 1) throw Error("validation", "early_stop_patience must be at least 1");
    if (c.sequences.empty() || c.sequences.size() > kMaxChannels) {
        throw Error("validation", "sequences must list 1 to 3 sequence ids");
    }
    std::set<SequenceId> unique(c.sequences.begin(), c.sequences.end());
    if (unique.size() != c.sequences.size()) throw Error("validation", "sequences must not repeat");
    for (auto s : c.sequences) {
        if (!is_manifest_sequence(s)) throw Error("validation", "sequence " + to_string(s) + " cannot be trained on");
    }
    if (c.augment_views < 0) throw Error("validation", "augment_views must be non-negative");
}

std::string config_hash(const TrainConfig& c) {
    json j = to_json(c);
    j.erase("cache_dir");
    return sha256_hex(j.dump());
}

// ---- data -----------------------------------------------------------------------

namespace {

std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag) {
    auto h = sha256_hex(std::to_string(seed) + "|" + tag);
    return std::stoull(h.substr(0, 16), nullptr, 16);
}

std::string encoder_hash(const VitSliceEncoder& encoder) {
    nn::ConstParameterList params;
    encoder.collect(params);
    return sha256_hex(serialize_parameters(params));
}

int label_of(const ExamRecord& r) {
    if (!r.label) throw Error("validation", "exam '" + r.exam_id + "' has no label");
    return *r.label == Label::suspicious ? 1 : 0;
}

const ExamRecord& record_of(const CohortManifest& manifest, const std::string& exam_id) {
    const auto* r = manifest.find(exam_id);
    if (!r) throw Error("validation", "exam '" + exam_id + "' of the fold plan is not in the manifest");
    return *r;
}

SequenceStack load_stack(const CohortManifest& manifest, const std::string& exam_id,
                         const std::vector<SequenceId>& sequences, const PreprocessOptions& options,
                         const std::string& cache_dir) {
    if (!cache_dir.empty()) {
        if (auto cached = read_preprocessed(exam_id, sequences, cache_dir)) return std::move(*cached);
    }
    auto exam = preprocess_exam(manifest, record_of(manifest, exam_id), sequences, options);
    if (!cache_dir.empty()) write_preprocessed(exam, exam_id, cache_dir);
    return std::move(exam.stack);
}

double cross_entropy(const Matrix& logits, const std::vector<int>& labels, Matrix* d_logits) {
    const Eigen::Index b = logits.rows();
    double loss = 0.0;
    if (d_logits) d_logits->resize(b, 2);
    for (Eigen::Index i = 0; i < b; ++i) {
        const double m = std::max(logits(i, 0), logits(i, 1));
        const double e0 = std::exp(logits(i, 0) - m);
        const double e1 = std::exp(logits(i, 1) - m);
        const double lse = m + std::log(e0 + e1);
        const int y = labels[static_cast<std::size_t>(i)];
        loss += lse - logits(i, y);
        if (d_logits) {
            (*d_logits)(i, 0) = (e0 / (e0 + e1) - (y == 0 ? 1.0 : 0.0)) / static_cast<double>(b);
            (*d_logits)(i, 1) = (e1 / (e0 + e1) - (y == 1 ? 1.0 : 0.0)) / static_cast<double>(b);
        }
    }
    return loss / static_cast<double>(b);
}

Matrix stack_rows(const std::vector<const Matrix*>& parts) {
    const Eigen::Index d = parts.front()->cols();
    Matrix out(static_cast<Eigen::Index>(parts.size()) * kSlices, d);
    for (std::size_t i = 0; i < parts.size(); ++i) out.middleRows(static_cast<Eigen::Index>(i) * kSlices, kSlices) = *parts[i];
    return out;
}

}  // namespace

SequenceStack load_exam_stack(const CohortManifest& manifest, const std::string& exam_id,
                              const std::vector<SequenceId>& sequences, const PreprocessOptions& options,
                              const std::string& cache_dir) {
    return load_stack(manifest, exam_id, sequences, options, cache_dir);
}

ExamData::ExamData(const CohortManifest& manifest, const TrainConfig& config) : manifest_(manifest), config_(config) {}

SequenceStack ExamData::stack(const std::string& exam_id) const {
    return load_stack(manifest_, exam_id, config_.sequences, config_.preprocess, config_.cache_dir);
}

AugmentParams ExamData::view_params(const std::string& exam_id, int view) const {
    if (view == 0) return {};
    std::mt19937_64 rng(derive_seed(config_.seed, "augment|" + exam_id + "|" + std::to_string(view)));
    return sample_augment_params(config_.augment_bounds, rng);
}

const Matrix& ExamData::embeddings(const VitSliceEncoder& encoder, const std::string& hash,
                                   const std::string& exam_id, int view) {
    const std::string key = hash + "|" + exam_id + "|" + std::to_string(view);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;

    // Encode every view of this exam while its stack is loaded.
    const int views = config_.augment ? config_.augment_views : 0;
    const int last = std::max(view, views);
    auto base = stack(exam_id);
    for (int v = 0; v <= last; ++v) {
        const std::string k = hash + "|" + exam_id + "|" + std::to_string(v);
        if (cache_.count(k)) continue;
        const auto p = view_params(exam_id, v);
        const SequenceStack& s = p.is_identity() ? base : augment(base, p);
        cache_[k] = encoder.encode(s).embeddings;
    }
    return cache_.at(key);
}

// ---- training -------------------------------------------------------------------

void save_history(const std::vector<EpochRecord>& history, const std::filesystem::path& path) {
    std::string out;
    for (const auto& e : history) {
        json j{{"epoch", e.epoch},
               {"train_loss", e.train_loss},
               {"val_loss", e.val_loss},
               {"val_auc", e.val_auc ? json(*e.val_auc) : json(nullptr)},
               {"improved", e.improved}};
        out += j.dump() + "\n";
    }
    write_text_file(path, out);
}

namespace {

struct Scorer {
    MstClassifier& model;
    ExamData& data;
    std::string hash;  // empty when the encoder is trainable (no caching)
    int batch = 8;

    const Matrix& frozen(const std::string& id, int view) {
        return data.embeddings(model.encoder(), hash, id, view);
    }

    Matrix embed_now(const std::string& id) { return model.encoder().encode(data.stack(id)).embeddings; }

    // Softmax suspicion scores and mean cross-entropy over the given exams.
    std::vector<double> score(const std::vector<std::string>& ids, const std::vector<int>* labels, double* loss) {
        std::vector<double> out;
        double total = 0.0;
        for (std::size_t start = 0; start < ids.size(); start += static_cast<std::size_t>(batch)) {
            const std::size_t end = std::min(ids.size(), start + static_cast<std::size_t>(batch));
            std::vector<Matrix> owned;
            std::vector<const Matrix*> parts;
            owned.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) {
                if (hash.empty()) {
                    owned.push_back(embed_now(ids[i]));
                    parts.push_back(&owned.back());
                } else {
                    parts.push_back(&frozen(ids[i], 0));
                }
            }
            AggregatorCache cache;
            Matrix logits = model.forward_train(stack_rows(parts), static_cast<int>(parts.size()), cache);
            for (Eigen::Index r = 0; r < logits.rows(); ++r) out.push_back(suspicion_score({logits(r, 0), logits(r, 1)}));
            if (labels) {
                std::vector<int> y(labels->begin() + static_cast<long>(start), labels->begin() + static_cast<long>(end));
                total += cross_entropy(logits, y, nullptr) * static_cast<double>(end - start);
            }
        }
        if (loss) *loss = ids.empty() ? 0.0 : total / static_cast<double>(ids.size());
        return out;
    }
};

bool both_classes(const std::vector<int>& labels) {
    return std::find(labels.begin(), labels.end(), 0) != labels.end() &&
           std::find(labels.begin(), labels.end(), 1) != labels.end();
}

std::filesystem::path fold_dir(const std::filesystem::path& out_dir, int fold) {
    return out_dir / ("fold_" + std::to_string(fold));
}

}  // namespace

TrainResult train_fold(const TrainConfig& config, int fold, const FoldPlan& plan, const CohortManifest& manifest,
                       const std::filesystem::path& out_dir, ExamData* shared, const ProgressFn& progress) {
    if (fold < 0 || fold >= plan.n_folds) {
        throw Error("precondition", "fold " + std::to_string(fold) + " is outside the plan's " +
                                        std::to_string(plan.n_folds) + " folds");
    }
    if (!(config.lr >= 0.0)) throw Error("validation", "lr must be non-negative");

    auto train_ids = plan.exams_with_role(fold, SplitRole::train);
    auto val_ids = plan.exams_with_role(fold, SplitRole::val);
    std::vector<int> train_labels, val_labels;
    for (const auto& id : train_ids) train_labels.push_back(label_of(record_of(manifest, id)));
    for (const auto& id : val_ids) val_labels.push_back(label_of(record_of(manifest, id)));
    if (!both_classes(train_labels)) {
        throw Error("precondition", "fold " + std::to_string(fold) + ": training split has a single class");
    }

    std::unique_ptr<ExamData> own;
    if (!shared) {
        own = std::make_unique<ExamData>(manifest, config);
        shared = own.get();
    }

    ModelConfig mc = config.model;
    mc.seed = derive_seed(config.seed, "model|" + std::to_string(fold));
    MstClassifier model(mc);
    if (!config.encoder_weights.empty()) load_encoder_weights(model.encoder(), config.encoder_weights);
    const bool frozen = mc.freeze_encoder;
    Scorer scorer{model, *shared, frozen ? encoder_hash(model.encoder()) : std::string(), config.batch_size};

    auto params = model.trainable_parameters();
    nn::AdamW::Options opt;
    opt.lr = config.lr;
    opt.weight_decay = config.weight_decay;
    nn::AdamW optimizer(opt);

    const bool use_views = config.augment && config.augment_views > 0;
    std::mt19937_64 rng(derive_seed(config.seed, "train|" + std::to_string(fold)));

    TrainResult result;
    result.checkpoint_dir = fold_dir(out_dir, fold);
    result.selection_metric = both_classes(val_labels) ? "val_auc" : "val_loss";
    std::vector<Matrix> best_weights;
    int since_best = 0;

    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        std::vector<std::size_t> order(train_ids.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);

        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            std::vector<int> y;
            std::vector<std::string> ids;
            std::vector<const Matrix*> parts;
            std::vector<Matrix> owned;
            std::vector<SequenceStack> stacks;
            owned.reserve(end - start);
            stacks.reserve(end - start);
            for (std::size_t k = start; k < end; ++k) {
                const auto& id = train_ids[order[k]];
                ids.push_back(id);
                y.push_back(train_labels[order[k]]);
                if (frozen) {
                    const int view = use_views ? std::uniform_int_distribution<int>(0, config.augment_views)(rng) : 0;
                    parts.push_back(&scorer.frozen(id, view));
                } else {
                    SequenceStack s = shared->stack(id);
                    if (config.augment) {
                        auto p = sample_augment_params(config.augment_bounds, rng);
                        s = augment(s, p);
                    }
                    stacks.push_back(std::move(s));
                    owned.push_back(model.encoder().encode(stacks.back()).embeddings);
                    parts.push_back(&owned.back());
                }
            }

            nn::zero_grads(params);
            AggregatorCache cache;
            Matrix logits = model.forward_train(stack_rows(parts), static_cast<int>(parts.size()), cache);
            Matrix d_logits;
            const double loss = cross_entropy(logits, y, &d_logits);
            if (!std::isfinite(loss)) {
                std::ostringstream msg;
                msg << "fold " << fold << ", epoch " << epoch << ": non-finite training loss on batch of";
                for (const auto& id : ids) msg << ' ' << id;
                throw Error("numeric", msg.str());
            }
            loss_sum += loss * static_cast<double>(ids.size());
            Matrix d_emb = model.backward(cache, d_logits);
            if (!frozen) {
                // Recompute each exam's encoder activations one at a time to bound memory.
                for (std::size_t i = 0; i < stacks.size(); ++i) {
                    VitSliceEncoder::Cache enc_cache;
                    model.encoder().encode_patches(model.encoder().patchify(stacks[i]), nullptr, &enc_cache);
                    model.encoder().backward(enc_cache,
                                             d_emb.middleRows(static_cast<Eigen::Index>(i) * kSlices, kSlices));
                }
            }
            optimizer.step(params);
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(train_ids.size());
        auto val_scores = scorer.score(val_ids, &val_labels, &rec.val_loss);
        if (!std::isfinite(rec.val_loss)) {
            throw Error("numeric", "fold " + std::to_string(fold) + ", epoch " + std::to_string(epoch) +
                                       ": non-finite validation loss");
        }
        if (both_classes(val_labels)) rec.val_auc = auc(val_scores, val_labels);

        const double metric = rec.val_auc ? *rec.val_auc : -rec.val_loss;
        if (result.best_epoch < 0 || metric > result.best_val_metric) {
            rec.improved = true;
            result.best_epoch = epoch;
            result.best_val_metric = metric;
            best_weights.clear();
            for (const auto* p : params) best_weights.push_back(p->value);
            since_best = 0;
        } else {
            ++since_best;
        }
        result.history.push_back(rec);
        if (progress) {
            std::ostringstream line;
            line << "fold " << fold << " epoch " << epoch << " train_loss " << format_fixed(rec.train_loss, 4)
                 << " val_loss " << format_fixed(rec.val_loss, 4) << " val_auc "
                 << (rec.val_auc ? format_fixed(*rec.val_auc, 3) : std::string("n/a"));
            progress(line.str());
        }
        if (since_best >= config.early_stop_patience) break;
    }

    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_weights[i];
    if (result.selection_metric == "val_loss") result.best_val_metric = -result.best_val_metric;

    CheckpointInfo info;
    info.channel_map = config.sequences;
    info.training_config_hash = config_hash(config);
    info.fold = std::to_string(fold);
    info.seed = config.seed;
    info.best_epoch = result.best_epoch;
    info.best_val_metric = result.best_val_metric;
    save_checkpoint(model, info, result.checkpoint_dir);
    save_history(result.history, result.checkpoint_dir / "history.jsonl");
    json cfg = to_json(config);
    cfg["config_hash"] = info.training_config_hash;
    cfg["selection_metric"] = result.selection_metric;
    write_text_file(result.checkpoint_dir / "train_config.json", cfg.dump(2) + "\n");
    return result;
}

PredictionSet collect_cv_predictions(const TrainConfig& config, const FoldPlan& plan, const CohortManifest& manifest,
                                     const std::filesystem::path& out_dir, ExamData* shared) {
    std::unique_ptr<ExamData> own;
    if (!shared) {
        own = std::make_unique<ExamData>(manifest, config);
        shared = own.get();
    }
    const std::string hash = config_hash(config);
    PredictionSet set;
    set.config_hash = hash;
    set.seed = config.seed;
    set.sequences = sequence_list_name(config.sequences);
    for (int fold = 0; fold < plan.n_folds; ++fold) {
        auto ckpt = load_checkpoint(fold_dir(out_dir, fold));
        if (ckpt.info.training_config_hash != hash) {
            throw Error("compatibility", "checkpoint of fold " + std::to_string(fold) +
                                             " was trained with a different configuration");
        }
        MstClassifier& model = ckpt.model;
        Scorer scorer{model, *shared, model.config().freeze_encoder ? encoder_hash(model.encoder()) : std::string(),
                      config.batch_size};
        for (SplitRole role : {SplitRole::val, SplitRole::test}) {
            auto ids = plan.exams_with_role(fold, role);
            auto scores = scorer.score(ids, nullptr, nullptr);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                set.rows.push_back({ids[i], std::to_string(fold), role, label_of(record_of(manifest, ids[i])),
                                    scores[i]});
            }
        }
    }
    validate_predictions(set);
    return set;
}

PredictionSet run_cv(const TrainConfig& config, const FoldPlan& plan, const CohortManifest& manifest,
                     const std::filesystem::path& out_dir, const ProgressFn& progress) {
    validate_train_config(config);
    ExamData data(manifest, config);
    for (int fold = 0; fold < plan.n_folds; ++fold) train_fold(config, fold, plan, manifest, out_dir, &data, progress);
    return collect_cv_predictions(config, plan, manifest, out_dir, &data);
}

PredictionSet predict(const std::filesystem::path& checkpoint_dir, const CohortManifest& manifest,
                      const PreprocessOptions& preprocess, const std::string& cache_dir) {
    auto ckpt = load_checkpoint(checkpoint_dir);
    const auto& seqs = ckpt.info.channel_map;
    for (const auto& r : manifest.records) {
        for (auto s : seqs) {
            if (!r.sequence_paths.count(s)) {
                throw Error("compatibility", "checkpoint expects sequence " + to_string(s) + " but exam '" +
                                                 r.exam_id + "' does not provide it");
            }
        }
    }
    PredictionSet set;
    set.config_hash = ckpt.info.training_config_hash;
    set.seed = ckpt.info.seed;
    set.sequences = sequence_list_name(seqs);
    for (const auto& r : manifest.records) {
        auto stack = load_stack(manifest, r.exam_id, seqs, preprocess, cache_dir);
        const double score = suspicion_score(ckpt.model.forward(stack));
        set.rows.push_back({r.exam_id, kExternalFold, SplitRole::test, label_of(r), score});
    }
    validate_predictions(set);
    return set;
}

std::vector<double> permutation_null_aucs(const std::vector<double>& scores, const std::vector<int>& labels,
                                          int n_permutations, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<int> permuted(labels);
    std::vector<double> out;
    for (int k = 0; k < n_permutations; ++k) {
        std::shuffle(permuted.begin(), permuted.end(), rng);
        out.push_back(auc(scores, permuted));
    }
    return out;
}

}  // namespace mst
