#include "cmr/vision_encoder.h"

#include "cmr/util.h"

#include <algorithm>
#include <iterator>
#include <stdexcept>

namespace cmr::vision {

const char* position_name(ContextPosition p) {
    switch (p) {
        case ContextPosition::Off: return "off";
        case ContextPosition::Input: return "input";
        case ContextPosition::Output: return "output";
    }
    return "?";
}

ContextPosition parse_position(const std::string& s) {
    if (s == "off") return ContextPosition::Off;
    if (s == "input") return ContextPosition::Input;
    if (s == "output") return ContextPosition::Output;
    throw std::invalid_argument("unknown context position '" + s + "' (expected input, output or off)");
}

ContextEmbedder::ContextEmbedder(nn::ParameterStore& store, const std::string& name, int vocab_size,
                                 const VisionConfig& config, nn::Rng& rng)
    : name_(name), d_out_(config.d_model), max_len_(config.max_context_len) {
    const int d = config.context_d_model;
    token_embedding_ = store.add(name + ".tok_emb", name, nn::normal_init(vocab_size, d, 0.5, rng));
    position_embedding_ = store.add(name + ".pos_emb", name, nn::normal_init(max_len_, d, 0.1, rng));
    for (int l = 0; l < config.context_layers; ++l) {
        layers_.emplace_back(store, name + ".layer" + std::to_string(l), name, d, config.heads, 2 * d, rng);
    }
    norm_ = nn::LayerNorm(store, name + ".norm", name, d);
    projection_ = nn::Linear(store, name + ".proj", name, d, config.d_model, rng);
}

Var ContextEmbedder::encode(const std::vector<std::string>& strings, const text::Vocabulary& vocab) const {
    auto seq = text::tokenize(util::join(strings, " "), vocab, max_len_);
    std::vector<int> ids(seq.ids.begin(), seq.ids.begin() + seq.length());
    const auto n = static_cast<Eigen::Index>(ids.size());
    Var x = ag::add(ag::gather_rows(token_embedding_, ids), ag::slice_rows(position_embedding_, 0, n));
    for (const auto& layer : layers_) x = layer(x);
    return projection_(norm_(x));
}

Var ContextEmbedder::local_tokens(const std::vector<std::string>& strings, const text::Vocabulary& vocab) const {
    if (strings.empty()) return ag::constant(Matrix(0, d_out_));
    Var all = encode(strings, vocab);
    return ag::slice_rows(all, 1, all.rows() - 1);
}

Var ContextEmbedder::global_token(const std::vector<std::string>& strings, const text::Vocabulary& vocab) const {
    if (strings.empty()) return ag::constant(Matrix::Zero(1, d_out_));
    return ag::slice_rows(encode(strings, vocab), 0, 1);
}

VisionTransformer::VisionTransformer(nn::ParameterStore& store, const VisionConfig& config, nn::Rng& rng)
    : config_(config) {
    if (config.image_size % config.patch_size != 0) {
        throw std::invalid_argument("vision: image size must be a multiple of the patch size");
    }
    const int d = config.d_model;
    const std::string g = kBackboneGroup;
    const int patch_dim = config.patch_size * config.patch_size * 3;
    patch_embed_ = nn::Linear(store, "vit.patch", g, patch_dim, d, rng);
    cls_token_ = store.add("vit.cls", g, nn::normal_init(1, d, 0.5, rng));
    position_embedding_ = store.add("vit.pos_emb", g, nn::normal_init(1 + config.num_patches(), d, 0.1, rng));
    context_position_ = store.add("vit.ctx_pos", g, nn::normal_init(1, d, 0.1, rng));
    for (int l = 0; l < config.layers; ++l) {
        layers_.emplace_back(store, "vit.layer" + std::to_string(l), g, d, config.heads, config.ffn_dim, rng);
    }
    norm_ = nn::LayerNorm(store, "vit.norm", g, d);
    output_projection_ = nn::Linear(store, "vit_proj.F", kProjectionGroup, 2 * d, config.d_emb, rng);
}

Matrix VisionTransformer::patchify(const Image& image) const {
    const int s = config_.image_size;
    const int p = config_.patch_size;
    if (image.height != s || image.width != s || image.pixels.size() != static_cast<std::size_t>(s) * s * 3) {
        throw std::invalid_argument("vision: expected a " + std::to_string(s) + "x" + std::to_string(s) +
                                    " RGB image, got " + std::to_string(image.height) + "x" +
                                    std::to_string(image.width));
    }
    const int per_side = s / p;
    Matrix out(per_side * per_side, p * p * 3);
    for (int py = 0; py < per_side; ++py) {
        for (int px = 0; px < per_side; ++px) {
            const int row = py * per_side + px;
            int col = 0;
            for (int y = 0; y < p; ++y) {
                for (int x = 0; x < p; ++x) {
                    for (int c = 0; c < 3; ++c) out(row, col++) = image.at(py * p + y, px * p + x, c);
                }
            }
        }
    }
    return out;
}

VisionOutput VisionTransformer::forward(const Image& image, const Var& local_ctx, const Var& global_ctx) const {
    const int d = config_.d_model;
    Var patches = patch_embed_(ag::constant(patchify(image)));
    std::vector<Var> seq = {cls_token_, patches};
    Var x = ag::add(ag::concat_rows(seq), position_embedding_);
    int p = 0;
    if (local_ctx.defined() && local_ctx.rows() > 0) {
        if (local_ctx.cols() != d) throw std::invalid_argument("vision: local context width mismatch");
        p = static_cast<int>(local_ctx.rows());
        Var ctx_pos = ag::constant(Matrix::Ones(p, 1));
        Var ctx = ag::add(local_ctx, ag::matmul(ctx_pos, context_position_));
        std::vector<Var> parts = {x, ctx};
        x = ag::concat_rows(parts);
    }
    for (const auto& layer : layers_) x = layer(x);
    x = norm_(x);
    Var x_cls = ag::slice_rows(x, 0, 1);

    Var g = global_ctx.defined() ? global_ctx : ag::constant(Matrix::Zero(1, d));
    if (g.rows() != 1 || g.cols() != d) throw std::invalid_argument("vision: global context must be 1 x d_model");
    std::vector<Var> head = {x_cls, g};
    Var emb = ag::l2_normalize_rows(output_projection_(ag::concat_cols(head)));
    return {emb, x, x_cls, 1 + config_.num_patches() + p};
}

VisionOutput encode_image_with_context(const Image& image, const Var& local_ctx, const Var& global_ctx,
                                       const VisionTransformer& vit) {
    return vit.forward(image, local_ctx, global_ctx);
}

ContextualizedVisionEncoder::ContextualizedVisionEncoder(nn::ParameterStore& store, const VisionConfig& config,
                                                         int vocab_size, nn::Rng& rng)
    : vit_(store, config, rng),
      ingredient_ctx_(store, kIngredientGroup, vocab_size, config, rng),
      title_ctx_(store, kTitleGroup, vocab_size, config, rng) {}

VisionOutput ContextualizedVisionEncoder::forward(const Image& image, const ContextBundle& context,
                                                  const ContextConfig& placement,
                                                  const text::Vocabulary& vocab) const {
    std::vector<Var> local;
    std::vector<Var> global;
    auto place = [&](ContextPosition pos, const ContextEmbedder& emb, const std::vector<std::string>& strings) {
        if (pos == ContextPosition::Input && !strings.empty()) local.push_back(emb.local_tokens(strings, vocab));
        if (pos == ContextPosition::Output && !strings.empty()) global.push_back(emb.global_token(strings, vocab));
    };
    place(placement.ingredients, ingredient_ctx_, context.ingredients);
    place(placement.titles, title_ctx_, context.titles);

    Var local_ctx = local.empty() ? Var() : (local.size() == 1 ? local.front() : ag::concat_rows(local));
    Var global_ctx;
    for (const auto& g : global) global_ctx = global_ctx.defined() ? ag::add(global_ctx, g) : g;
    return vit_.forward(image, local_ctx, global_ctx);
}

void set_frozen(nn::ParameterStore& store, bool frozen) {
    store.set_group_trainable(VisionTransformer::kBackboneGroup, !frozen);
}

ContextBundle sample_context(const ContextBundle& bundle, std::size_t n_titles, std::size_t n_ingredients,
                             nn::Rng* rng) {
    if (!rng) return bundle;
    ContextBundle out;
    std::sample(bundle.titles.begin(), bundle.titles.end(), std::back_inserter(out.titles), n_titles, *rng);
    std::sample(bundle.ingredients.begin(), bundle.ingredients.end(), std::back_inserter(out.ingredients),
                n_ingredients, *rng);
    return out;
}

ContextBundle extract_context_bundle(const Image& image, const ste::EntityIndex& title_index,
                                     const ste::EntityIndex& ingredient_index, const ImageEncoderHandle& encoder,
                                     std::size_t n_titles, std::size_t n_ingredients) {
    ContextBundle out;
    out.titles =
        ste::retrieve_local_entities(image, title_index, encoder, std::min(n_titles, title_index.size()));
    out.ingredients = ste::retrieve_local_entities(image, ingredient_index, encoder,
                                                   std::min(n_ingredients, ingredient_index.size()));
    return out;
}

}  // namespace cmr::vision
