#include "cmr/ste.h"

#include "cmr/util.h"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

namespace cmr {

Image make_image(std::string id, int height, int width, double fill) {
    Image img;
    img.id = std::move(id);
    img.height = height;
    img.width = width;
    img.pixels.assign(static_cast<std::size_t>(height) * width * 3, fill);
    return img;
}

void validate_document(const StructuredDocument& doc, bool require_title) {
    if (require_title && util::trim(doc.title).empty()) throw std::invalid_argument("document: empty title");
    std::unordered_set<std::string> seen;
    for (const auto& e : doc.local_entities) {
        if (!seen.insert(e).second) throw std::invalid_argument("document: duplicate local entity '" + e + "'");
    }
    for (const auto& s : doc.event) {
        if (util::trim(s).empty()) throw std::invalid_argument("document: empty event sentence");
    }
}

}  // namespace cmr

namespace cmr::ste {

namespace {

const std::unordered_set<std::string>& stopwords() {
    static const std::unordered_set<std::string> words = {
        // articles and determiners
        "a", "an", "the", "some", "any", "each", "every", "another", "other", "such",
        // prepositions
        "on", "in", "at", "near", "with", "of", "to", "from", "by", "for", "under", "over", "above", "below",
        "behind", "beside", "besides", "next", "into", "onto", "across", "along", "through", "around",
        "between", "inside", "outside", "up", "down", "off", "out", "against", "beneath", "upon", "about",
        "towards", "toward", "among", "atop", "while", "as", "than", "like", "via",
        // pronouns
        "i", "you", "he", "she", "it", "we", "they", "me", "him", "her", "us", "them", "his", "its", "their",
        "our", "my", "your", "this", "that", "these", "those", "who", "whom", "which", "what", "there",
        "here", "itself", "themselves", "one",
        // auxiliaries
        "is", "are", "was", "were", "be", "been", "being", "am", "has", "have", "had", "do", "does", "did",
        "will", "would", "can", "could", "should", "may", "might", "must", "shall",
        // conjunctions and negation
        "and", "or", "but", "nor", "so", "not", "no", "then"};
    return words;
}

bool is_article(std::string_view w) { return w == "a" || w == "an" || w == "the"; }

enum class Kind { Object, Stop, Verb, Punct };

struct Token {
    std::string text;
    Kind kind;
};

std::vector<Token> scan(std::string_view text) {
    std::vector<Token> out;
    std::size_t i = 0;
    auto alnum = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
    while (i < text.size()) {
        char c = text[i];
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
        } else if (alnum(c)) {
            std::size_t j = i;
            while (j < text.size() &&
                   (alnum(text[j]) || ((text[j] == '-' || text[j] == '\'') && j + 1 < text.size() && alnum(text[j + 1])))) {
                ++j;
            }
            std::string w(text.substr(i, j - i));
            std::string lw = util::to_lower(w);
            Kind k = HeuristicObjectExtractor::is_stopword(lw)     ? Kind::Stop
                     : HeuristicObjectExtractor::is_verb_form(lw) ? Kind::Verb
                                                                  : Kind::Object;
            out.push_back({std::move(w), k});
            i = j;
        } else {
            out.push_back({std::string(1, c), Kind::Punct});
            ++i;
        }
    }
    return out;
}

}  // namespace

void validate_caption(const Caption& caption) {
    if (util::trim(caption.text).empty()) throw std::invalid_argument("caption '" + caption.image_id + "': empty text");
}

bool HeuristicObjectExtractor::is_stopword(std::string_view w) { return stopwords().count(std::string(w)) != 0; }

bool HeuristicObjectExtractor::is_verb_form(std::string_view w) {
    // Short words like "bed", "red", "king" are kept as nouns.
    if (w.size() >= 5 && w.ends_with("ing")) return true;
    if (w.size() >= 5 && w.ends_with("ed")) return true;
    return false;
}

std::vector<SceneObject> HeuristicObjectExtractor::extract(std::string_view text) const {
    const auto toks = scan(text);
    bool sentence_cased = false;
    for (const auto& t : toks) {
        if (t.kind == Kind::Punct) continue;
        sentence_cased = std::isupper(static_cast<unsigned char>(t.text[0])) != 0;
        break;
    }

    std::vector<SceneObject> out;
    std::size_t i = 0;
    while (i < toks.size()) {
        if (toks[i].kind != Kind::Object) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < toks.size() && toks[j].kind == Kind::Object) ++j;

        bool verb_after = j < toks.size() && toks[j].kind == Kind::Verb;
        bool verb_before = false;
        for (std::size_t b = i; b > 0; --b) {
            const auto& prev = toks[b - 1];
            if (prev.kind == Kind::Verb) {
                verb_before = true;
                break;
            }
            if (!(prev.kind == Kind::Stop && is_article(util::to_lower(prev.text)))) break;
        }

        std::vector<std::string> words;
        for (std::size_t w = i; w < j; ++w) words.push_back(toks[w].text);
        std::string surface = util::join(words, " ");
        if (sentence_cased && (verb_after || verb_before)) {
            surface[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(surface[0])));
        }
        out.push_back({surface, util::to_lower(surface)});
        i = j;
    }
    return out;
}

const ObjectExtractor& default_extractor() {
    static const HeuristicObjectExtractor extractor;
    return extractor;
}

TitleExtraction extract_title(const Caption& caption, const ObjectExtractor& extractor) {
    validate_caption(caption);
    std::vector<std::string> parts;
    std::unordered_set<std::string> seen;
    for (const auto& obj : extractor.extract(caption.text)) {
        if (seen.insert(obj.key).second) parts.push_back(obj.surface);
    }
    if (parts.empty()) return {util::trim(caption.text), true};
    return {util::join(parts, " and "), false};
}

std::vector<std::string> extract_objects(std::string_view text, const ObjectExtractor& extractor) {
    std::vector<std::string> keys;
    std::unordered_set<std::string> seen;
    for (const auto& obj : extractor.extract(text)) {
        if (seen.insert(obj.key).second) keys.push_back(obj.key);
    }
    return keys;
}

std::vector<std::string> split_sentences(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (c == '.' || c == '!' || c == '?') {
            auto s = util::trim(cur);
            if (!s.empty()) out.push_back(std::move(s));
            cur.clear();
        } else {
            cur += c;
        }
    }
    auto s = util::trim(cur);
    if (!s.empty()) out.push_back(std::move(s));
    return out;
}

std::vector<std::string> dedup(const std::vector<std::string>& items) {
    std::vector<std::string> out;
    std::unordered_set<std::string> seen;
    for (const auto& s : items) {
        if (seen.insert(s).second) out.push_back(s);
    }
    return out;
}

EntityIndex::EntityIndex(std::vector<std::string> entities, Matrix embeddings)
    : entities_(std::move(entities)), embeddings_(std::move(embeddings)) {
    if (static_cast<Eigen::Index>(entities_.size()) != embeddings_.rows()) {
        throw std::invalid_argument("entity index: row count does not match entity count");
    }
    std::unordered_set<std::string> seen;
    for (const auto& e : entities_) {
        if (!seen.insert(e).second) throw std::invalid_argument("entity index: duplicate entity '" + e + "'");
    }
    for (Eigen::Index r = 0; r < embeddings_.rows(); ++r) {
        double n = embeddings_.row(r).norm();
        if (!(n > 0.0) || !std::isfinite(n)) {
            throw std::invalid_argument("entity index: zero or non-finite embedding for '" + entities_[r] + "'");
        }
        embeddings_.row(r) /= n;
    }
}

std::vector<ScoredEntity> EntityIndex::top_k(const EmbeddingVector& query, std::size_t k) const {
    if (query.size() != embeddings_.cols()) {
        throw std::invalid_argument("entity index: query width " + std::to_string(query.size()) +
                                    " does not match index width " + std::to_string(embeddings_.cols()));
    }
    if (k > size()) {
        throw std::invalid_argument("entity index: k=" + std::to_string(k) + " exceeds index size " +
                                    std::to_string(size()));
    }
    if (k == 0) return {};
    double qn = query.norm();
    Eigen::VectorXd sims = embeddings_ * query;
    if (qn > 0.0) sims /= qn;

    std::vector<std::size_t> order(size());
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (sims[a] != sims[b]) return sims[a] > sims[b];
                          return a < b;
                      });
    std::vector<ScoredEntity> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.push_back({order[i], sims[static_cast<Eigen::Index>(order[i])]});
    return out;
}

std::string EntityIndex::content_hash() const {
    std::string blob;
    for (const auto& e : entities_) {
        blob += e;
        blob.push_back('\0');
    }
    blob.append(reinterpret_cast<const char*>(embeddings_.data()),
                static_cast<std::size_t>(embeddings_.size()) * sizeof(double));
    return util::sha256_hex(blob);
}

namespace {
// float32 storage: dumps the shortest float representation.
using FloatJson = nlohmann::basic_json<std::map, std::vector, std::string, bool, std::int64_t, std::uint64_t, float>;
}  // namespace

void EntityIndex::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write entity index: " + path.string());
    FloatJson header;
    header["embed_dim"] = embed_dim();
    header["count"] = size();
    out << header.dump() << '\n';
    for (std::size_t i = 0; i < size(); ++i) {
        FloatJson line;
        line["entity"] = entities_[i];
        std::vector<float> vec(static_cast<std::size_t>(embeddings_.cols()));
        for (Eigen::Index c = 0; c < embeddings_.cols(); ++c) {
            vec[static_cast<std::size_t>(c)] = static_cast<float>(embeddings_(static_cast<Eigen::Index>(i), c));
        }
        line["vec"] = vec;
        out << line.dump() << '\n';
    }
}

EntityIndex EntityIndex::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read entity index: " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("entity index: missing header in " + path.string());
    auto header = nlohmann::json::parse(line);
    const int dim = header.at("embed_dim").get<int>();
    const std::size_t count = header.at("count").get<std::size_t>();
    std::vector<std::string> entities;
    Matrix emb(static_cast<Eigen::Index>(count), dim);
    std::size_t row = 0;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (util::trim(line).empty()) continue;
        if (row >= count) throw std::runtime_error("entity index: more rows than header count");
        auto j = nlohmann::json::parse(line);
        auto vec = j.at("vec").get<std::vector<double>>();
        if (static_cast<int>(vec.size()) != dim) {
            throw std::runtime_error("entity index line " + std::to_string(line_no) + ": vector width mismatch");
        }
        entities.push_back(j.at("entity").get<std::string>());
        for (int c = 0; c < dim; ++c) emb(static_cast<Eigen::Index>(row), c) = vec[static_cast<std::size_t>(c)];
        ++row;
    }
    if (row != count) throw std::runtime_error("entity index: header count does not match rows");
    return EntityIndex(std::move(entities), std::move(emb));
}

EntityIndex build_index_from_strings(const std::vector<std::string>& strings, const TextEmbedFn& text_encoder) {
    auto entities = dedup(strings);
    if (entities.empty()) throw std::invalid_argument("entity index: no entities to index");
    EntityIndex::Matrix emb;
    for (std::size_t i = 0; i < entities.size(); ++i) {
        EmbeddingVector v = text_encoder(entities[i]);
        if (i == 0) emb.resize(static_cast<Eigen::Index>(entities.size()), v.size());
        if (v.size() != emb.cols()) throw std::invalid_argument("entity index: encoder width changed");
        emb.row(static_cast<Eigen::Index>(i)) = v.transpose();
    }
    return EntityIndex(std::move(entities), std::move(emb));
}

EntityIndex build_entity_index(const std::vector<Caption>& captions, const TextEmbedFn& text_encoder,
                               const ObjectExtractor& extractor) {
    if (captions.empty()) throw std::invalid_argument("entity index: empty caption list");
    std::vector<std::string> all;
    for (const auto& c : captions) {
        validate_caption(c);
        auto objs = extract_objects(c.text, extractor);
        all.insert(all.end(), objs.begin(), objs.end());
    }
    if (all.empty()) throw std::invalid_argument("entity index: no objects extracted from the caption corpus");
    return build_index_from_strings(all, text_encoder);
}

std::vector<std::string> retrieve_local_entities(const Image& image, const EntityIndex& index,
                                                 const ImageEncoderHandle& encoder, std::size_t k) {
    if (encoder.embed_dim != index.embed_dim()) {
        throw std::invalid_argument("retrieve: encoder width " + std::to_string(encoder.embed_dim) +
                                    " does not match index width " + std::to_string(index.embed_dim()));
    }
    if (k > index.size()) {
        throw std::invalid_argument("retrieve: k=" + std::to_string(k) + " exceeds index size " +
                                    std::to_string(index.size()));
    }
    if (k == 0) return {};
    std::vector<std::string> out;
    for (const auto& s : index.top_k(encoder.encode(image), k)) out.push_back(index.entities()[s.index]);
    return out;
}

StructuredDocument build_structured_pair(const Caption& caption, const Image& image, const EntityIndex& index,
                                         const ImageEncoderHandle& encoder, std::size_t k,
                                         const ObjectExtractor& extractor) {
    StructuredDocument doc;
    doc.title = extract_title(caption, extractor).title;
    doc.local_entities = retrieve_local_entities(image, index, encoder, k);
    doc.event = split_sentences(caption.text);
    validate_document(doc);
    return doc;
}

std::vector<StructuredDocument> build_structured_pairs(const std::vector<Caption>& captions,
                                                       const std::vector<Image>& images, const EntityIndex& index,
                                                       const ImageEncoderHandle& encoder, std::size_t k,
                                                       const ObjectExtractor& extractor) {
    if (captions.size() != images.size()) throw std::invalid_argument("structured pairs: caption/image count mismatch");
    std::vector<StructuredDocument> out;
    out.reserve(captions.size());
    for (std::size_t i = 0; i < captions.size(); ++i) {
        out.push_back(build_structured_pair(captions[i], images[i], index, encoder, k, extractor));
    }
    return out;
}

StructuredDocument adapt_structured_record(const StructuredRecord& record, const ObjectExtractor& extractor) {
    if (!record.event || util::trim(*record.event).empty()) {
        throw std::invalid_argument("structured record: missing event text");
    }
    StructuredDocument doc;
    if (record.title && !util::trim(*record.title).empty()) {
        doc.title = *record.title;
    } else {
        doc.title = extract_title(Caption{"", *record.event}, extractor).title;
    }
    if (record.local_entities) doc.local_entities = dedup(*record.local_entities);
    doc.event = split_sentences(*record.event);
    validate_document(doc);
    return doc;
}

}  // namespace cmr::ste
