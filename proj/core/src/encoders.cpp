#include "cmr/encoders.h"

#include "cmr/util.h"

#include <nlohmann/json.hpp>

#include <fstream>
#include <random>
#include <stdexcept>

namespace cmr::encoders {

EmbeddingVector hash_text_embedding(std::string_view text, int dim, std::uint64_t seed) {
    if (dim <= 0) throw std::invalid_argument("hash_text_embedding: dim must be positive");
    std::mt19937_64 rng(util::stable_seed(std::to_string(seed) + "\x1f" + std::string(text)));
    std::normal_distribution<double> gauss;
    EmbeddingVector v(dim);
    for (int i = 0; i < dim; ++i) v(i) = gauss(rng);
    return v.normalized();
}

ToyClip::ToyClip(int image_size, std::uint64_t seed) : world_(image_size), seed_(seed) {}

EmbeddingVector ToyClip::encode_image(const Image& image) const {
    if (image.height <= 0 || image.width <= 0) throw std::invalid_argument("ToyClip: empty image");
    constexpr int g = data::SyntheticWorld::kGrid;
    const int s = world_.image_size();
    const int cell = s / g;
    EmbeddingVector out = EmbeddingVector::Zero(embed_dim());
    for (int y = 0; y < s; ++y) {
        const int sy = y * image.height / s;
        for (int x = 0; x < s; ++x) {
            const int sx = x * image.width / s;
            const int c0 = 3 * ((y / cell) * g + x / cell);
            for (int c = 0; c < 3; ++c) out(c0 + c) += image.at(sy, sx, c);
        }
    }
    out /= static_cast<double>(cell * cell);
    const double n = out.norm();
    return n > 0.0 ? EmbeddingVector(out / n) : hash_text_embedding("[blank image]", embed_dim(), seed_);
}

EmbeddingVector ToyClip::encode_text(const std::string& text) const {
    if (auto img = world_.render_concept(text)) return encode_image(*img);
    return hash_text_embedding(util::to_lower(text), embed_dim(), seed_);
}

ImageEncoderHandle ToyClip::image_handle() const {
    auto self = std::make_shared<ToyClip>(*this);
    return {[self](const Image& img) { return self->encode_image(img); }, embed_dim()};
}

TextEmbedFn ToyClip::text_fn() const {
    auto self = std::make_shared<ToyClip>(*this);
    return [self](const std::string& t) { return self->encode_text(t); };
}

LookupEncoder LookupEncoder::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open embedding table " + path.string());
    auto table = std::make_shared<std::map<std::string, EmbeddingVector>>();
    LookupEncoder enc;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (util::trim(line).empty()) continue;
        const auto j = nlohmann::json::parse(line);
        const auto vec = j.at("vec").get<std::vector<double>>();
        if (vec.empty()) throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": empty vector");
        if (enc.dim_ == 0) enc.dim_ = static_cast<int>(vec.size());
        if (static_cast<int>(vec.size()) != enc.dim_) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": inconsistent vector width");
        }
        (*table)[j.at("key").get<std::string>()] = Eigen::Map<const EmbeddingVector>(vec.data(), enc.dim_);
    }
    if (table->empty()) throw std::runtime_error(path.string() + ": no embeddings");
    enc.table_ = std::move(table);
    return enc;
}

EmbeddingVector LookupEncoder::lookup(const std::string& key) const {
    auto it = table_->find(key);
    if (it == table_->end()) throw std::out_of_range("no embedding for '" + key + "'");
    return it->second;
}

ImageEncoderHandle LookupEncoder::image_handle() const {
    auto table = table_;
    return {[table](const Image& img) {
                auto it = table->find(img.id);
                if (it == table->end()) throw std::out_of_range("no embedding for image '" + img.id + "'");
                return it->second;
            },
            dim_};
}

TextEmbedFn LookupEncoder::text_fn() const {
    auto self = *this;
    return [self](const std::string& t) { return self.lookup(t); };
}

EncoderPair make_encoder(const std::string& spec, int image_size) {
    if (spec == "toy") {
        ToyClip clip(image_size);
        return {clip.image_handle(), clip.text_fn()};
    }
    if (spec.rfind("file:", 0) == 0) {
        auto enc = LookupEncoder::load(spec.substr(5));
        return {enc.image_handle(), enc.text_fn()};
    }
    throw std::invalid_argument("unknown encoder '" + spec + "' (expected toy or file:PATH)");
}

}  // namespace cmr::encoders
