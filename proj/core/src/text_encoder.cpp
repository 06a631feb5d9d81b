#include "cmr/text_encoder.h"

#include "cmr/util.h"

#include <fstream>
#include <map>
#include <stdexcept>

namespace cmr::text {

Vocabulary::Vocabulary() : tokens_{"[PAD]", "[CLS]", "[UNK]"}, ids_{{"[PAD]", kPad}, {"[CLS]", kCls}, {"[UNK]", kUnk}} {}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    if (tokens.size() < 3 || tokens[kPad] != "[PAD]" || tokens[kCls] != "[CLS]" || tokens[kUnk] != "[UNK]") {
        throw std::invalid_argument("vocabulary: first three tokens must be [PAD], [CLS], [UNK]");
    }
    Vocabulary v;
    v.tokens_ = std::move(tokens);
    v.ids_.clear();
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
        if (!v.ids_.emplace(v.tokens_[i], static_cast<int>(i)).second) {
            throw std::invalid_argument("vocabulary: duplicate token '" + v.tokens_[i] + "'");
        }
    }
    return v;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts, int min_frequency) {
    std::vector<std::string> order;
    std::unordered_map<std::string, int> freq;
    for (const auto& t : texts) {
        for (auto& w : util::word_tokens(t)) {
            if (freq[w]++ == 0) order.push_back(w);
        }
    }
    std::vector<std::string> tokens = {"[PAD]", "[CLS]", "[UNK]"};
    for (auto& w : order) {
        if (freq[w] >= min_frequency) tokens.push_back(std::move(w));
    }
    return from_tokens(std::move(tokens));
}

int Vocabulary::id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
}

std::string Vocabulary::hash() const { return util::sha256_hex(util::join(tokens_, "\n")); }

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write vocabulary: " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read vocabulary: " + path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) tokens.push_back(line);
    return from_tokens(std::move(tokens));
}

int TokenSequence::length() const {
    int n = 0;
    for (int id : ids) n += (id != Vocabulary::kPad);
    return n;
}

TokenSequence tokenize(const std::string& text, const Vocabulary& vocab, int max_len) {
    if (max_len < 2) throw std::invalid_argument("tokenize: max_len must be at least 2");
    TokenSequence seq;
    seq.ids.reserve(static_cast<std::size_t>(max_len));
    seq.ids.push_back(Vocabulary::kCls);
    for (const auto& w : util::word_tokens(text)) {
        if (static_cast<int>(seq.ids.size()) == max_len) break;
        seq.ids.push_back(vocab.id(w));
    }
    seq.ids.resize(static_cast<std::size_t>(max_len), Vocabulary::kPad);
    return seq;
}

const char* entity_class_name(EntityClass c) {
    switch (c) {
        case EntityClass::Title: return "title";
        case EntityClass::Ingredients: return "ingredients";
        case EntityClass::Instructions: return "instructions";
    }
    return "?";
}

std::vector<std::string> class_sentences(const StructuredDocument& doc, EntityClass cls) {
    switch (cls) {
        case EntityClass::Title:
            if (util::trim(doc.title).empty()) return {};
            return {doc.title};
        case EntityClass::Ingredients: return doc.local_entities;
        case EntityClass::Instructions: return doc.event;
    }
    return {};
}

HierarchicalTextEncoder::HierarchicalTextEncoder(nn::ParameterStore& store, const TextEncoderConfig& config,
                                                 int vocab_size, nn::Rng& rng)
    : config_(config) {
    const int d = config.d_model;
    const std::string g = kGroup;
    token_embedding_ = store.add(kTokenEmbeddingParam, g, nn::normal_init(vocab_size, d, 0.5, rng));
    position_embedding_ = store.add("text.pos_emb", g, nn::normal_init(config.max_seq_len, d, 0.1, rng));
    list_position_embedding_ =
        store.add("text.list_pos_emb", g, nn::normal_init(config.max_list_len + 1, d, 0.1, rng));
    for (auto cls : kEntityClasses) {
        auto& s = stacks_[static_cast<int>(cls)];
        const std::string p = std::string("text.") + entity_class_name(cls);
        for (int l = 0; l < config.layers; ++l) {
            s.sentence_layers.emplace_back(store, p + ".sent" + std::to_string(l), g, d, config.heads, config.ffn_dim,
                                           rng);
        }
        s.sentence_norm = nn::LayerNorm(store, p + ".sent_norm", g, d);
        s.list_cls = store.add(p + ".list_cls", g, nn::normal_init(1, d, 0.5, rng));
        for (int l = 0; l < config.layers; ++l) {
            s.list_layers.emplace_back(store, p + ".list" + std::to_string(l), g, d, config.heads, config.ffn_dim,
                                       rng);
        }
        s.list_norm = nn::LayerNorm(store, p + ".list_norm", g, d);
        s.null_token = store.add(p + ".null", g, nn::normal_init(1, d, 0.5, rng));
        s.cross = nn::CrossAttentionLayer(store, p + ".cross", g, d, config.heads, config.ffn_dim, rng);
    }
    out_norm_ = nn::LayerNorm(store, "text.out_norm", g, d);
    projection_ = nn::Linear(store, "text.proj", g, d, config.d_emb, rng);
}

Var HierarchicalTextEncoder::encode_sentence(EntityClass cls, const TokenSequence& seq) const {
    const auto& s = stacks_[static_cast<int>(cls)];
    std::vector<int> ids = seq.ids;
    std::vector<bool> valid;
    const std::vector<bool>* mask = nullptr;
    if (config_.trim_padding) {
        ids.resize(static_cast<std::size_t>(seq.length()));
    } else {
        valid.reserve(ids.size());
        for (int id : ids) valid.push_back(id != Vocabulary::kPad);
        mask = &valid;
    }
    const auto n = static_cast<Eigen::Index>(ids.size());
    if (n > position_embedding_.rows()) throw std::invalid_argument("sentence longer than max_seq_len");
    Var x = ag::add(ag::gather_rows(token_embedding_, ids), ag::slice_rows(position_embedding_, 0, n));
    for (const auto& layer : s.sentence_layers) x = layer(x, mask);
    return s.sentence_norm(ag::slice_rows(x, 0, 1));
}

Var HierarchicalTextEncoder::encode_class(EntityClass cls, const std::vector<std::string>& sentences,
                                          const Vocabulary& vocab) const {
    const auto& s = stacks_[static_cast<int>(cls)];
    if (sentences.empty()) return s.null_token;
    const std::size_t n = std::min(sentences.size(), static_cast<std::size_t>(config_.max_list_len));
    std::vector<Var> rows;
    rows.reserve(n + 1);
    rows.push_back(s.list_cls);
    for (std::size_t i = 0; i < n; ++i) {
        rows.push_back(encode_sentence(cls, tokenize(sentences[i], vocab, config_.max_seq_len)));
    }
    Var x = ag::concat_rows(rows);
    if (config_.list_positional) {
        x = ag::add(x, ag::slice_rows(list_position_embedding_, 0, x.rows()));
    }
    for (const auto& layer : s.list_layers) x = layer(x);
    return s.list_norm(x);
}

EncodedDocument HierarchicalTextEncoder::forward(const StructuredDocument& doc, const Vocabulary& vocab) const {
    std::array<std::vector<std::string>, 3> sentences;
    bool any = false;
    for (auto cls : kEntityClasses) {
        sentences[static_cast<int>(cls)] = class_sentences(doc, cls);
        any = any || !sentences[static_cast<int>(cls)].empty();
    }
    if (!any) throw std::invalid_argument("encode_document: every entity class is empty");

    std::array<Var, 3> listed;
    for (auto cls : kEntityClasses) {
        listed[static_cast<int>(cls)] = encode_class(cls, sentences[static_cast<int>(cls)], vocab);
    }

    std::vector<Var> crossed;
    std::vector<Var> pooled;
    for (int c = 0; c < 3; ++c) {
        std::vector<Var> others;
        for (int o = 0; o < 3; ++o) {
            if (o != c) others.push_back(listed[o]);
        }
        Var y = stacks_[c].cross(listed[c], ag::concat_rows(others));
        crossed.push_back(y);
        pooled.push_back(ag::slice_rows(y, 0, 1));
    }
    Var mean = ag::mean_rows(ag::concat_rows(pooled));
    Var emb = ag::l2_normalize_rows(projection_(out_norm_(mean)));
    return {emb, ag::concat_rows(crossed)};
}

void swap_token_embedding(nn::ParameterStore& store, const std::string& param_name, const Vocabulary& old_vocab,
                          const Vocabulary& new_vocab, nn::Rng& rng) {
    Var table = store.get(param_name);
    const Matrix& old = table.value();
    Matrix fresh = nn::normal_init(new_vocab.size(), old.cols(), 0.5, rng);
    for (int i = 0; i < new_vocab.size(); ++i) {
        const auto& tok = new_vocab.token(i);
        int old_id = old_vocab.id(tok);
        if (old_id != Vocabulary::kUnk || tok == "[UNK]") {
            if (old_id < old.rows()) fresh.row(i) = old.row(old_id);
        }
    }
    store.replace_value(param_name, std::move(fresh));
}

EmbeddingVector encode_document(const StructuredDocument& doc, const HierarchicalTextEncoder& enc,
                                const Vocabulary& vocab) {
    return enc.forward(doc, vocab).embedding.value().row(0).transpose();
}

Matrix encode_document_batch(const std::vector<StructuredDocument>& docs, const HierarchicalTextEncoder& enc,
                             const Vocabulary& vocab) {
    if (docs.empty()) throw std::invalid_argument("encode_document_batch: empty batch");
    Matrix out(static_cast<Eigen::Index>(docs.size()), enc.config().d_emb);
    for (std::size_t i = 0; i < docs.size(); ++i) {
        out.row(static_cast<Eigen::Index>(i)) = enc.forward(docs[i], vocab).embedding.value().row(0);
    }
    return out;
}

}  // namespace cmr::text
