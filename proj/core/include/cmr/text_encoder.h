#pragma once

// Hierarchical structured-text encoder: a sentence transformer per entity
// class, a list transformer over sentence embeddings, and cross-attention
// blocks where each class queries the tokens of the other two.

#include "cmr/nn.h"
#include "cmr/types.h"

#include <array>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace cmr::text {

using ag::Matrix;
using ag::Var;

class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kCls = 1;
    static constexpr int kUnk = 2;

    Vocabulary();
    /// Tokens ordered by first appearance across `texts`.
    static Vocabulary build(const std::vector<std::string>& texts, int min_frequency = 1);

    int id(const std::string& token) const;
    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    int size() const { return static_cast<int>(tokens_.size()); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    std::string hash() const;

    /// One token per line; line number is the id.
    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);
    static Vocabulary from_tokens(std::vector<std::string> tokens);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

struct TokenSequence {
    std::vector<int> ids;  // ids[0] == CLS, padded with PAD to max_len
    int length() const;    // non-PAD count, CLS included
};

/// Lowercased alphanumeric words, CLS-prefixed, truncated or PAD-filled to max_len.
TokenSequence tokenize(const std::string& text, const Vocabulary& vocab, int max_len);

struct TextEncoderConfig {
    int d_model = 64;
    int heads = 2;
    int ffn_dim = 128;
    int layers = 1;
    int d_emb = 128;
    int max_seq_len = 16;
    int max_list_len = 8;
    /// Learned positions over the sentence list of each class.
    bool list_positional = true;
    /// Drop trailing PAD before the sentence transformer instead of masking it.
    bool trim_padding = true;
};

enum class EntityClass { Title = 0, Ingredients = 1, Instructions = 2 };
inline constexpr std::array<EntityClass, 3> kEntityClasses = {EntityClass::Title, EntityClass::Ingredients,
                                                               EntityClass::Instructions};
const char* entity_class_name(EntityClass c);

struct EncodedDocument {
    Var embedding;  // 1 x d_emb, unit norm
    Var tokens;     // cross-attended tokens of all classes, stacked
};

class HierarchicalTextEncoder {
public:
    static constexpr const char* kGroup = "text";

    HierarchicalTextEncoder(nn::ParameterStore& store, const TextEncoderConfig& config, int vocab_size,
                            nn::Rng& rng);

    /// Throws if every entity class is empty. An empty class is replaced by
    /// its learned null token.
    EncodedDocument forward(const StructuredDocument& doc, const Vocabulary& vocab) const;

    /// CLS state of one sentence after the class's sentence transformer.
    Var encode_sentence(EntityClass cls, const TokenSequence& seq) const;

    const TextEncoderConfig& config() const { return config_; }

private:
    Var encode_class(EntityClass cls, const std::vector<std::string>& sentences, const Vocabulary& vocab) const;

    TextEncoderConfig config_;
    Var token_embedding_;
    Var position_embedding_;
    Var list_position_embedding_;
    struct ClassStack {
        std::vector<nn::TransformerLayer> sentence_layers;
        nn::LayerNorm sentence_norm;
        Var list_cls;
        std::vector<nn::TransformerLayer> list_layers;
        nn::LayerNorm list_norm;
        Var null_token;
        nn::CrossAttentionLayer cross;
    };
    std::array<ClassStack, 3> stacks_;
    nn::LayerNorm out_norm_;
    nn::Linear projection_;
};

/// Name of the swappable token-embedding table.
inline constexpr const char* kTokenEmbeddingParam = "text.tok_emb";

/// Resizes the token embedding for a new vocabulary. Rows of tokens present
/// in both vocabularies are copied; the rest are freshly initialized.
void swap_token_embedding(nn::ParameterStore& store, const std::string& param_name, const Vocabulary& old_vocab,
                          const Vocabulary& new_vocab, nn::Rng& rng);

EmbeddingVector encode_document(const StructuredDocument& doc, const HierarchicalTextEncoder& enc,
                                const Vocabulary& vocab);

/// Row i equals encode_document(docs[i]). Throws on an empty batch.
Matrix encode_document_batch(const std::vector<StructuredDocument>& docs, const HierarchicalTextEncoder& enc,
                             const Vocabulary& vocab);

/// Sentences of one entity class as the encoder sees them.
std::vector<std::string> class_sentences(const StructuredDocument& doc, EntityClass cls);

}  // namespace cmr::text
