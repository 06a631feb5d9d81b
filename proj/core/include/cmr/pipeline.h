#pragma once

// Two-stage training: structured pretraining against a frozen vision encoder,
// then finetuning with context injection.

#include "cmr/data.h"
#include "cmr/losses.h"
#include "cmr/nn.h"
#include "cmr/retrieval_eval.h"
#include "cmr/text_encoder.h"
#include "cmr/vision_encoder.h"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace cmr::pipeline {

using ag::Matrix;

enum class Stage { Vslp, Finetune };
const char* stage_name(Stage s);
Stage parse_stage(const std::string& s);

struct StageConfig {
    Stage stage = Stage::Finetune;
    int epochs = 10;
    int batch_size = 16;
    double learning_rate = 1e-3;
    int freeze_vision_epochs = 20;
    double lambda_itm = 1.0;
    losses::MarginSchedule margin_schedule;
    vision::ContextConfig context;
    std::uint64_t seed = 0;
    bool use_semantic = true;
    /// Context items drawn per example at each training step.
    int sample_titles = 2;
    int sample_ingredients = 4;
};

/// Applies the stage invariants: pretraining keeps the vision encoder frozen
/// for every epoch, injects no context and uses no semantic labels.
StageConfig normalized(StageConfig config);

/// Throws std::invalid_argument for out-of-range values.
void validate(const StageConfig& config);

/// Flat keys named after the fields, plus margin_start, margin_increment,
/// margin_cap, ing_position and ttl_position. Unknown keys throw.
StageConfig stage_config_from_json(const nlohmann::json& j, StageConfig base = {});
nlohmann::json to_json(const StageConfig& config);

struct ModelConfig {
    text::TextEncoderConfig text;
    vision::VisionConfig vision;
    int itm_d_model = 64;
    int itm_heads = 2;
    int itm_ffn_dim = 128;

    bool operator==(const ModelConfig& other) const;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});

/// All trainable state: one parameter store shared by the text encoder, the
/// contextualized vision encoder and the matching head.
class Model {
public:
    Model(const ModelConfig& config, text::Vocabulary vocab, std::uint64_t seed);
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const { return config_; }
    const text::Vocabulary& vocab() const { return vocab_; }
    nn::ParameterStore& store() { return store_; }
    const nn::ParameterStore& store() const { return store_; }
    const text::HierarchicalTextEncoder& text_encoder() const { return *text_; }
    const vision::ContextualizedVisionEncoder& vision_encoder() const { return *vision_; }
    const losses::ItmHead& itm_head() const { return *itm_; }

    /// Rebuilds every token-embedding table for a new vocabulary, copying
    /// rows of shared tokens. Returns the names of the resized tables.
    std::vector<std::string> swap_vocabulary(text::Vocabulary vocab, nn::Rng& rng);

    EmbeddingVector encode_text(const StructuredDocument& doc) const;
    EmbeddingVector encode_image(const Image& image, const vision::ContextBundle& context,
                                 const vision::ContextConfig& placement) const;

private:
    ModelConfig config_;
    text::Vocabulary vocab_;
    nn::ParameterStore store_;
    std::unique_ptr<text::HierarchicalTextEncoder> text_;
    std::unique_ptr<vision::ContextualizedVisionEncoder> vision_;
    std::unique_ptr<losses::ItmHead> itm_;
};

/// SHA-256 over (name, shape, values) of the parameters in `groups`, in name
/// order; every group when `groups` is empty.
std::string parameter_hash(const nn::ParameterStore& store, const std::vector<std::string>& groups = {});
/// The ViT backbone and its output projection.
std::string vision_hash(const nn::ParameterStore& store);
inline const std::vector<std::string> kVisionGroups = {"vit", "vit_proj"};

/// Context bundles per image, tied to the indexes they were retrieved from.
struct ContextCache {
    std::string index_hash;
    std::map<std::string, vision::ContextBundle> bundles;

    const vision::ContextBundle& at(const std::string& image_id) const;
    void save(const std::filesystem::path& path) const;
    static ContextCache load(const std::filesystem::path& path);
};

/// Title and ingredient indexes over the distinct strings of a corpus.
struct ContextIndexes {
    ste::EntityIndex titles;
    ste::EntityIndex ingredients;
    std::string hash() const;
};

ContextIndexes build_context_indexes(const std::vector<data::RecipePair>& corpus, const TextEmbedFn& text_encoder);

/// Retrieves one bundle per image (full 5 titles / 15 ingredients, or fewer
/// when an index is smaller).
ContextCache build_context_cache(const std::vector<data::RecipePair>& corpus, const ContextIndexes& indexes,
                                 const ImageEncoderHandle& encoder);

/// Same, but reuses `path` when it holds a cache for the same indexes and
/// covers every image; otherwise computes and writes it.
ContextCache load_or_build_context_cache(const std::filesystem::path& path,
                                         const std::vector<data::RecipePair>& corpus,
                                         const ContextIndexes& indexes, const ImageEncoderHandle& encoder);

struct EpochLog {
    int epoch = 0;
    double itc = 0.0;
    double itm = 0.0;
    double total = 0.0;
    double margin = 0.0;
    bool frozen = false;
};

nlohmann::json to_json(const EpochLog& log);

struct StepResult {
    double itc = 0.0;
    double itm = 0.0;
    double total = 0.0;
};

/// Optimizer, rng and epoch counter around a model for one stage.
class Trainer {
public:
    /// `cache` must cover every image when the config injects context.
    Trainer(Model& model, StageConfig config, const std::vector<data::RecipePair>& corpus,
            const ContextCache* cache = nullptr);

    const StageConfig& config() const { return config_; }
    int epoch() const { return epoch_; }
    bool vision_frozen() const;

    /// One optimizer step on the given corpus indices at the current epoch.
    StepResult step(const std::vector<int>& batch);
    /// Shuffles, steps over every batch and advances the epoch counter.
    EpochLog run_epoch();

    nn::Adam& optimizer() { return adam_; }
    const nn::Adam& optimizer() const { return adam_; }
    nn::Rng& rng() { return rng_; }
    const nn::Rng& rng() const { return rng_; }
    void set_epoch(int epoch) { epoch_ = epoch; }

private:
    void apply_freeze();

    Model& model_;
    StageConfig config_;
    const std::vector<data::RecipePair>& corpus_;
    const ContextCache* cache_;
    std::vector<int> labels_;
    nn::Adam adam_;
    nn::Rng rng_;
    int epoch_ = 0;
};

struct Tensor {
    std::string group;
    Matrix value;
};

/// Everything needed to rebuild a model and resume a stage.
struct Checkpoint {
    ModelConfig model;
    text::Vocabulary vocab;
    std::string stage = "init";
    int epoch = 0;
    std::uint64_t seed = 0;
    /// Context placement the model was trained with; used at evaluation.
    vision::ContextConfig context{vision::ContextPosition::Off, vision::ContextPosition::Off};
    std::map<std::string, Tensor> parameters;
    std::int64_t adam_steps = 0;
    std::map<std::string, Matrix> adam_m;
    std::map<std::string, Matrix> adam_v;
    std::string rng_state;

    /// Hash of every parameter tensor.
    std::string hash() const;
    std::string vision_hash() const;
};

Checkpoint capture(const Model& model, const std::string& stage, std::uint64_t seed, const Trainer* trainer = nullptr);
std::unique_ptr<Model> restore_model(const Checkpoint& ckpt);
/// Loads optimizer, rng and epoch into a trainer built on the restored model.
void restore_trainer(const Checkpoint& ckpt, Trainer& trainer);

/// Directory with manifest.json, tensors.bin, optimizer.bin and vocab.txt.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

using EpochCallback = std::function<void(const EpochLog&)>;

/// Fresh model with a vocabulary built from the corpus documents.
Checkpoint initial_checkpoint(const std::vector<data::RecipePair>& corpus, const ModelConfig& config,
                              std::uint64_t seed);

/// Pretraining: ITC + lambda * ITM, vision frozen, no context. Starts from
/// `init` (or a fresh model when null). Throws on an empty corpus.
Checkpoint train_stage1(const std::vector<data::RecipePair>& corpus, StageConfig config,
                        const ModelConfig& model_config = {}, const Checkpoint* init = nullptr,
                        const EpochCallback& on_epoch = {});

/// Finetuning from `init`: the vocabulary is rebuilt from this corpus, the
/// optimizer restarts, vision stays frozen for freeze_vision_epochs, and the
/// cached context is sampled per step. Throws when context is enabled and
/// `cache` is missing or incomplete.
Checkpoint train_stage2(const std::vector<data::RecipePair>& corpus, const Checkpoint& init, StageConfig config,
                        const ContextCache* cache, const EpochCallback& on_epoch = {});

/// Structured text extraction over a caption corpus: builds the entity index
/// from the captions and turns each into a structured pair (k entities per
/// image, capped at the index size). The index is returned through `index`.
std::vector<data::RecipePair> structure_captions(const std::vector<data::CaptionRecord>& records,
                                                 const ImageEncoderHandle& image_encoder,
                                                 const TextEmbedFn& text_encoder, std::size_t k,
                                                 ste::EntityIndex* index = nullptr);

struct EmbeddingSet {
    Matrix text;
    Matrix image;
};

/// Unimodal embeddings of every pair; images see their full cached context.
EmbeddingSet embed_corpus(const Model& model, const std::vector<data::RecipePair>& corpus,
                          const vision::ContextConfig& placement, const ContextCache* cache);

std::array<eval::RetrievalReport, 2> evaluate(const Model& model, const std::vector<data::RecipePair>& corpus,
                                              const vision::ContextConfig& placement, const ContextCache* cache,
                                              const eval::ProtocolConfig& protocol);

struct AblationArm {
    std::string label;
    StageConfig finetune;
    /// Start finetuning from the pretrained checkpoint, or from a fresh model.
    bool use_pretraining = true;
};

/// The six context/injection-position rows, default arm fifth.
std::vector<AblationArm> context_ablation_arms(const StageConfig& base);

struct AblationRow {
    AblationArm arm;
    std::array<eval::RetrievalReport, 2> reports;
};

/// Finetunes and evaluates each arm on `corpus` with the arm's seed.
std::vector<AblationRow> run_ablation(const std::vector<data::RecipePair>& corpus, const Checkpoint& pretrained,
                                      const std::vector<AblationArm>& arms, const ContextCache* cache,
                                      const eval::ProtocolConfig& protocol);

}  // namespace cmr::pipeline
