#pragma once

// Structured text extraction: captions -> (title, local entities, event).

#include "cmr/types.h"

#include <Eigen/Dense>

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cmr::ste {

struct Caption {
    std::string image_id;
    std::string text;

    bool operator==(const Caption&) const = default;
};

/// Throws if the caption text is blank.
void validate_caption(const Caption& caption);

/// One object mention. `surface` keeps the casing used in titles; `key` is
/// the lowercase form used for deduplication and the entity database.
struct SceneObject {
    std::string surface;
    std::string key;
};

/// Stand-in for a scene-graph parser: anything that can list object mentions
/// of a caption in order of appearance.
class ObjectExtractor {
public:
    virtual ~ObjectExtractor() = default;
    virtual std::vector<SceneObject> extract(std::string_view text) const = 0;
};

/// Rule-based extractor. Lowercased tokens in a fixed stopword list
/// (articles, prepositions, pronouns, auxiliaries, conjunctions) and words
/// with an -ing/-ed suffix break the text into runs; each maximal run of the
/// remaining words is one object ("chest radiograph").
///
/// Casing: surfaces keep the caption's casing, except that in a
/// sentence-cased caption the objects attached to a verb (immediately before
/// it, or after it with only articles in between) are capitalized. This gives
/// "A woman playing piano on stage" -> Woman, Piano, stage.
class HeuristicObjectExtractor final : public ObjectExtractor {
public:
    std::vector<SceneObject> extract(std::string_view text) const override;

    static bool is_stopword(std::string_view lowercase_word);
    static bool is_verb_form(std::string_view lowercase_word);
};

const ObjectExtractor& default_extractor();

struct TitleExtraction {
    std::string title;
    /// Set when no object was found and the whole caption became the title.
    bool used_fallback = false;
};

/// Objects in caption order, case-insensitively deduplicated, joined by " and ".
TitleExtraction extract_title(const Caption& caption, const ObjectExtractor& extractor = default_extractor());

/// Lowercase object keys of one caption, deduplicated, in order.
std::vector<std::string> extract_objects(std::string_view text, const ObjectExtractor& extractor = default_extractor());

/// Splits on '.', '!' and '?' and trims; empty pieces are dropped.
std::vector<std::string> split_sentences(std::string_view text);

struct ScoredEntity {
    std::size_t index;
    double similarity;
};

/// Entity strings with unit-norm embedding rows, queried by cosine top-k.
/// Immutable once built.
class EntityIndex {
public:
    using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

    EntityIndex() = default;

    /// Rows are L2-normalized. Throws on duplicate entities, a row/entity
    /// count mismatch, or a zero row.
    EntityIndex(std::vector<std::string> entities, Matrix embeddings);

    const std::vector<std::string>& entities() const { return entities_; }
    const Matrix& embeddings() const { return embeddings_; }
    std::size_t size() const { return entities_.size(); }
    int embed_dim() const { return static_cast<int>(embeddings_.cols()); }

    /// Highest cosine first; equal scores keep insertion order.
    std::vector<ScoredEntity> top_k(const EmbeddingVector& query, std::size_t k) const;

    /// Stable content hash (hex), used to key context caches.
    std::string content_hash() const;

    void save(const std::filesystem::path& path) const;
    static EntityIndex load(const std::filesystem::path& path);

private:
    std::vector<std::string> entities_;
    Matrix embeddings_;
};

/// Union of objects over all captions, first-appearance order. Throws
/// std::invalid_argument when nothing is extracted.
EntityIndex build_entity_index(const std::vector<Caption>& captions, const TextEmbedFn& text_encoder,
                               const ObjectExtractor& extractor = default_extractor());

/// Builds an index directly over a list of strings (titles, ingredients).
EntityIndex build_index_from_strings(const std::vector<std::string>& strings, const TextEmbedFn& text_encoder);

/// The k entities closest to the encoded image. k == 0 gives an empty list;
/// k > index size or an embedding-width mismatch throws.
std::vector<std::string> retrieve_local_entities(const Image& image, const EntityIndex& index,
                                                 const ImageEncoderHandle& encoder, std::size_t k);

StructuredDocument build_structured_pair(const Caption& caption, const Image& image, const EntityIndex& index,
                                         const ImageEncoderHandle& encoder, std::size_t k,
                                         const ObjectExtractor& extractor = default_extractor());

std::vector<StructuredDocument> build_structured_pairs(const std::vector<Caption>& captions,
                                                       const std::vector<Image>& images, const EntityIndex& index,
                                                       const ImageEncoderHandle& encoder, std::size_t k,
                                                       const ObjectExtractor& extractor = default_extractor());

/// Role-tagged record from another structured domain (e.g. report keywords
/// as local entities, the report caption as event).
struct StructuredRecord {
    std::optional<std::string> title;
    std::optional<std::vector<std::string>> local_entities;
    std::optional<std::string> event;
};

StructuredDocument adapt_structured_record(const StructuredRecord& record,
                                           const ObjectExtractor& extractor = default_extractor());

/// Order-preserving deduplication.
std::vector<std::string> dedup(const std::vector<std::string>& items);

}  // namespace cmr::ste
