#pragma once

// Stand-ins for the frozen image/text foundation encoders used by structured
// text extraction and context retrieval.

#include "cmr/data.h"
#include "cmr/types.h"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <string_view>

namespace cmr::encoders {

/// Unit-norm Gaussian vector seeded by SHA-256 of (seed, text).
EmbeddingVector hash_text_embedding(std::string_view text, int dim, std::uint64_t seed = 0);

/// Joint image/text encoder for the synthetic world. Images are resized
/// (nearest neighbour) to the world size and average-pooled into the 8x8
/// cell grid; text is pooled from the world's picture of the phrase, or
/// hashed when it names nothing the world knows.
class ToyClip {
public:
    explicit ToyClip(int image_size = 32, std::uint64_t seed = 0);

    int embed_dim() const { return 3 * data::SyntheticWorld::kGrid * data::SyntheticWorld::kGrid; }
    EmbeddingVector encode_image(const Image& image) const;
    EmbeddingVector encode_text(const std::string& text) const;

    ImageEncoderHandle image_handle() const;
    TextEmbedFn text_fn() const;

private:
    data::SyntheticWorld world_;
    std::uint64_t seed_;
};

/// Precomputed embeddings: a JSON-lines file of {"key": str, "vec": [float]}
/// where key is an image_id or a text string. Unknown keys throw.
class LookupEncoder {
public:
    static LookupEncoder load(const std::filesystem::path& path);

    int embed_dim() const { return dim_; }
    EmbeddingVector lookup(const std::string& key) const;

    ImageEncoderHandle image_handle() const;
    TextEmbedFn text_fn() const;

private:
    std::shared_ptr<const std::map<std::string, EmbeddingVector>> table_;
    int dim_ = 0;
};

struct EncoderPair {
    ImageEncoderHandle image;
    TextEmbedFn text;
};

/// "toy" or "file:PATH".
EncoderPair make_encoder(const std::string& spec, int image_size = 32);

}  // namespace cmr::encoders
