#pragma once

// Patch ViT with context injection. Local context tokens join the patch
// tokens at the input; a global context vector is concatenated to the
// output CLS state before the final projection F:
//
//   x = ViT([cls, i_1..i_k, c^l_1..c^l_p]);  out = normalize(F([x_cls, c^g]))

#include "cmr/nn.h"
#include "cmr/ste.h"
#include "cmr/text_encoder.h"
#include "cmr/types.h"

#include <optional>
#include <string>
#include <vector>

namespace cmr::vision {

using ag::Matrix;
using ag::Var;

struct VisionConfig {
    int image_size = 32;
    int patch_size = 8;
    int d_model = 64;
    int heads = 2;
    int ffn_dim = 128;
    int layers = 1;
    int d_emb = 128;
    // context embedder
    int context_d_model = 64;
    int context_layers = 1;
    int max_context_len = 32;

    int num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
};

enum class ContextPosition { Off, Input, Output };
const char* position_name(ContextPosition p);
ContextPosition parse_position(const std::string& s);

/// Where each context type is injected. The default is ingredients at the
/// input and titles at the output.
struct ContextConfig {
    ContextPosition ingredients = ContextPosition::Input;
    ContextPosition titles = ContextPosition::Output;

    bool enabled() const { return ingredients != ContextPosition::Off || titles != ContextPosition::Off; }
    bool operator==(const ContextConfig&) const = default;
};

struct ContextBundle {
    std::vector<std::string> titles;
    std::vector<std::string> ingredients;
    bool operator==(const ContextBundle&) const = default;
};

inline constexpr std::size_t kMaxTitles = 5;
inline constexpr std::size_t kMaxIngredients = 15;

/// Light text encoder plus a projection into the visual token space. The
/// context strings are joined into one sentence before encoding.
class ContextEmbedder {
public:
    ContextEmbedder() = default;
    ContextEmbedder(nn::ParameterStore& store, const std::string& name, int vocab_size, const VisionConfig& config,
                    nn::Rng& rng);

    /// p x d_model word-token states (CLS excluded); p = 0 for an empty list.
    Var local_tokens(const std::vector<std::string>& strings, const text::Vocabulary& vocab) const;
    /// 1 x d_model CLS state; zeros for an empty list.
    Var global_token(const std::vector<std::string>& strings, const text::Vocabulary& vocab) const;

    const std::string& name() const { return name_; }

private:
    Var encode(const std::vector<std::string>& strings, const text::Vocabulary& vocab) const;

    std::string name_;
    int d_out_ = 0;
    int max_len_ = 0;
    Var token_embedding_;
    Var position_embedding_;
    std::vector<nn::TransformerLayer> layers_;
    nn::LayerNorm norm_;
    nn::Linear projection_;
};

struct VisionOutput {
    Var embedding;  // 1 x d_emb, unit norm
    Var tokens;     // (1 + k + p) x d_model
    Var x_cls;      // 1 x d_model
    int sequence_length = 0;
};

class VisionTransformer {
public:
    static constexpr const char* kBackboneGroup = "vit";
    static constexpr const char* kProjectionGroup = "vit_proj";

    VisionTransformer() = default;
    VisionTransformer(nn::ParameterStore& store, const VisionConfig& config, nn::Rng& rng);

    /// k x (P*P*3) patch matrix. Throws on a geometry mismatch.
    Matrix patchify(const Image& image) const;

    /// local_ctx may be undefined or have zero rows; global_ctx may be
    /// undefined (treated as the zero vector).
    VisionOutput forward(const Image& image, const Var& local_ctx, const Var& global_ctx) const;

    const VisionConfig& config() const { return config_; }

private:
    VisionConfig config_;
    nn::Linear patch_embed_;
    Var cls_token_;
    Var position_embedding_;
    Var context_position_;
    std::vector<nn::TransformerLayer> layers_;
    nn::LayerNorm norm_;
    nn::Linear output_projection_;
};

VisionOutput encode_image_with_context(const Image& image, const Var& local_ctx, const Var& global_ctx,
                                       const VisionTransformer& vit);

/// ViT together with the two context embedders and the injection switchboard.
class ContextualizedVisionEncoder {
public:
    static constexpr const char* kIngredientGroup = "ctx_ing";
    static constexpr const char* kTitleGroup = "ctx_ttl";

    ContextualizedVisionEncoder(nn::ParameterStore& store, const VisionConfig& config, int vocab_size,
                                nn::Rng& rng);

    VisionOutput forward(const Image& image, const ContextBundle& context, const ContextConfig& placement,
                         const text::Vocabulary& vocab) const;

    const VisionTransformer& vit() const { return vit_; }
    const ContextEmbedder& ingredient_embedder() const { return ingredient_ctx_; }
    const ContextEmbedder& title_embedder() const { return title_ctx_; }

private:
    VisionTransformer vit_;
    ContextEmbedder ingredient_ctx_;
    ContextEmbedder title_ctx_;
};

/// Freezes or unfreezes the ViT backbone. The projection F and the context
/// embedders are separate groups and stay trainable.
void set_frozen(nn::ParameterStore& store, bool frozen);

/// Without an rng the whole bundle is returned (test time). With one,
/// min(n, size) items of each list are drawn uniformly without replacement,
/// keeping their original order.
ContextBundle sample_context(const ContextBundle& bundle, std::size_t n_titles, std::size_t n_ingredients,
                             nn::Rng* rng);

/// Top-n cosine retrieval against a title index and an ingredient index.
/// Requests larger than an index return the whole index in similarity order.
ContextBundle extract_context_bundle(const Image& image, const ste::EntityIndex& title_index,
                                     const ste::EntityIndex& ingredient_index, const ImageEncoderHandle& encoder,
                                     std::size_t n_titles = kMaxTitles, std::size_t n_ingredients = kMaxIngredients);

}  // namespace cmr::vision
