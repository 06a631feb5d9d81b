#include "cmr/pipeline.h"

#include "cmr/util.h"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace cmr::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

const char* stage_name(Stage s) { return s == Stage::Vslp ? "vslp" : "finetune"; }

Stage parse_stage(const std::string& s) {
    if (s == "vslp" || s == "pretrain") return Stage::Vslp;
    if (s == "finetune") return Stage::Finetune;
    throw std::invalid_argument("unknown stage '" + s + "'");
}

StageConfig normalized(StageConfig config) {
    if (config.stage == Stage::Vslp) {
        config.freeze_vision_epochs = config.epochs;
        config.context = {vision::ContextPosition::Off, vision::ContextPosition::Off};
        config.use_semantic = false;
    }
    return config;
}

void validate(const StageConfig& c) {
    if (c.epochs < 0) throw std::invalid_argument("epochs must be non-negative");
    if (c.batch_size < 2) throw std::invalid_argument("batch_size must be at least 2");
    if (!(c.learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (c.freeze_vision_epochs < 0) throw std::invalid_argument("freeze_vision_epochs must be non-negative");
    if (!(c.lambda_itm >= 0.0) || !std::isfinite(c.lambda_itm)) {
        throw std::invalid_argument("lambda_itm must be finite and non-negative");
    }
    const auto& m = c.margin_schedule;
    if (!(m.start > 0.0) || m.increment < 0.0 || m.cap < m.start || m.cap > 2.0) {
        throw std::invalid_argument("margin schedule must satisfy 0 < start <= cap <= 2 and increment >= 0");
    }
    if (c.sample_titles < 0 || c.sample_ingredients < 0) throw std::invalid_argument("context sample sizes must be >= 0");
}

StageConfig stage_config_from_json(const json& j, StageConfig c) {
    if (!j.is_object()) throw std::invalid_argument("stage config must be a JSON object");
    for (const auto& [key, v] : j.items()) {
        if (key == "stage") c.stage = parse_stage(v.get<std::string>());
        else if (key == "epochs") c.epochs = v.get<int>();
        else if (key == "batch_size") c.batch_size = v.get<int>();
        else if (key == "learning_rate") c.learning_rate = v.get<double>();
        else if (key == "freeze_vision_epochs") c.freeze_vision_epochs = v.get<int>();
        else if (key == "lambda_itm") c.lambda_itm = v.get<double>();
        else if (key == "margin_start") c.margin_schedule.start = v.get<double>();
        else if (key == "margin_increment") c.margin_schedule.increment = v.get<double>();
        else if (key == "margin_cap") c.margin_schedule.cap = v.get<double>();
        else if (key == "margin_schedule") {
            c.margin_schedule.start = v.value("start", c.margin_schedule.start);
            c.margin_schedule.increment = v.value("increment", c.margin_schedule.increment);
            c.margin_schedule.cap = v.value("cap", c.margin_schedule.cap);
        } else if (key == "ing_position") c.context.ingredients = vision::parse_position(v.get<std::string>());
        else if (key == "ttl_position") c.context.titles = vision::parse_position(v.get<std::string>());
        else if (key == "context") {
            if (v.contains("ing_position")) c.context.ingredients = vision::parse_position(v["ing_position"].get<std::string>());
            if (v.contains("ttl_position")) c.context.titles = vision::parse_position(v["ttl_position"].get<std::string>());
        } else if (key == "seed") c.seed = v.get<std::uint64_t>();
        else if (key == "use_semantic") c.use_semantic = v.get<bool>();
        else if (key == "sample_titles") c.sample_titles = v.get<int>();
        else if (key == "sample_ingredients") c.sample_ingredients = v.get<int>();
        else throw std::invalid_argument("unknown config key '" + key + "'");
    }
    return c;
}

json to_json(const StageConfig& c) {
    return {{"stage", stage_name(c.stage)},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"freeze_vision_epochs", c.freeze_vision_epochs},
            {"lambda_itm", c.lambda_itm},
            {"margin_start", c.margin_schedule.start},
            {"margin_increment", c.margin_schedule.increment},
            {"margin_cap", c.margin_schedule.cap},
            {"ing_position", vision::position_name(c.context.ingredients)},
            {"ttl_position", vision::position_name(c.context.titles)},
            {"seed", c.seed},
            {"use_semantic", c.use_semantic},
            {"sample_titles", c.sample_titles},
            {"sample_ingredients", c.sample_ingredients}};
}

bool ModelConfig::operator==(const ModelConfig& o) const { return to_json(*this) == to_json(o); }

json to_json(const ModelConfig& c) {
    const auto& t = c.text;
    const auto& v = c.vision;
    return {{"text",
             {{"d_model", t.d_model},
              {"heads", t.heads},
              {"ffn_dim", t.ffn_dim},
              {"layers", t.layers},
              {"d_emb", t.d_emb},
              {"max_seq_len", t.max_seq_len},
              {"max_list_len", t.max_list_len},
              {"list_positional", t.list_positional},
              {"trim_padding", t.trim_padding}}},
            {"vision",
             {{"image_size", v.image_size},
              {"patch_size", v.patch_size},
              {"d_model", v.d_model},
              {"heads", v.heads},
              {"ffn_dim", v.ffn_dim},
              {"layers", v.layers},
              {"d_emb", v.d_emb},
              {"context_d_model", v.context_d_model},
              {"context_layers", v.context_layers},
              {"max_context_len", v.max_context_len}}},
            {"itm", {{"d_model", c.itm_d_model}, {"heads", c.itm_heads}, {"ffn_dim", c.itm_ffn_dim}}}};
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
    if (j.contains("text")) {
        const auto& t = j["text"];
        auto& o = c.text;
        o.d_model = t.value("d_model", o.d_model);
        o.heads = t.value("heads", o.heads);
        o.ffn_dim = t.value("ffn_dim", o.ffn_dim);
        o.layers = t.value("layers", o.layers);
        o.d_emb = t.value("d_emb", o.d_emb);
        o.max_seq_len = t.value("max_seq_len", o.max_seq_len);
        o.max_list_len = t.value("max_list_len", o.max_list_len);
        o.list_positional = t.value("list_positional", o.list_positional);
        o.trim_padding = t.value("trim_padding", o.trim_padding);
    }
    if (j.contains("vision")) {
        const auto& v = j["vision"];
        auto& o = c.vision;
        o.image_size = v.value("image_size", o.image_size);
        o.patch_size = v.value("patch_size", o.patch_size);
        o.d_model = v.value("d_model", o.d_model);
        o.heads = v.value("heads", o.heads);
        o.ffn_dim = v.value("ffn_dim", o.ffn_dim);
        o.layers = v.value("layers", o.layers);
        o.d_emb = v.value("d_emb", o.d_emb);
        o.context_d_model = v.value("context_d_model", o.context_d_model);
        o.context_layers = v.value("context_layers", o.context_layers);
        o.max_context_len = v.value("max_context_len", o.max_context_len);
    }
    if (j.contains("itm")) {
        const auto& i = j["itm"];
        c.itm_d_model = i.value("d_model", c.itm_d_model);
        c.itm_heads = i.value("heads", c.itm_heads);
        c.itm_ffn_dim = i.value("ffn_dim", c.itm_ffn_dim);
    }
    if (c.text.d_emb != c.vision.d_emb) throw std::invalid_argument("text and vision d_emb must match");
    return c;
}

Model::Model(const ModelConfig& config, text::Vocabulary vocab, std::uint64_t seed)
    : config_(config), vocab_(std::move(vocab)) {
    if (config_.text.d_emb != config_.vision.d_emb) throw std::invalid_argument("text and vision d_emb must match");
    // Separate streams keep each module's initialization independent of the
    // others' sizes (e.g. the vocabulary).
    auto stream = [seed](const char* tag) { return nn::Rng(util::stable_seed(std::string(tag) + std::to_string(seed))); };
    nn::Rng text_rng = stream("text:");
    nn::Rng vision_rng = stream("vision:");
    nn::Rng itm_rng = stream("itm:");
    text_ = std::make_unique<text::HierarchicalTextEncoder>(store_, config_.text, vocab_.size(), text_rng);
    vision_ = std::make_unique<vision::ContextualizedVisionEncoder>(store_, config_.vision, vocab_.size(), vision_rng);
    itm_ = std::make_unique<losses::ItmHead>(store_, config_.text.d_model, config_.vision.d_model, config_.itm_d_model,
                                             config_.itm_heads, config_.itm_ffn_dim, itm_rng);
}

std::vector<std::string> Model::swap_vocabulary(text::Vocabulary vocab, nn::Rng& rng) {
    std::vector<std::string> tables = {text::kTokenEmbeddingParam,
                                       std::string(vision::ContextualizedVisionEncoder::kIngredientGroup) + ".tok_emb",
                                       std::string(vision::ContextualizedVisionEncoder::kTitleGroup) + ".tok_emb"};
    for (const auto& name : tables) text::swap_token_embedding(store_, name, vocab_, vocab, rng);
    vocab_ = std::move(vocab);
    return tables;
}

EmbeddingVector Model::encode_text(const StructuredDocument& doc) const {
    return text::encode_document(doc, *text_, vocab_);
}

EmbeddingVector Model::encode_image(const Image& image, const vision::ContextBundle& context,
                                    const vision::ContextConfig& placement) const {
    return vision_->forward(image, context, placement, vocab_).embedding.value().row(0).transpose();
}

namespace {

void hash_tensor(std::string& buf, const std::string& name, const Matrix& m) {
    buf += name;
    buf.push_back('\0');
    const std::int64_t shape[2] = {static_cast<std::int64_t>(m.rows()), static_cast<std::int64_t>(m.cols())};
    buf.append(reinterpret_cast<const char*>(shape), sizeof shape);
    buf.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
}

bool in_groups(const std::string& group, const std::vector<std::string>& groups) {
    return groups.empty() || std::find(groups.begin(), groups.end(), group) != groups.end();
}

}  // namespace

std::string parameter_hash(const nn::ParameterStore& store, const std::vector<std::string>& groups) {
    std::string buf;
    for (const auto& [name, p] : store.all()) {
        if (in_groups(p.group, groups)) hash_tensor(buf, name, p.var.value());
    }
    return util::sha256_hex(buf);
}

std::string vision_hash(const nn::ParameterStore& store) { return parameter_hash(store, kVisionGroups); }

const vision::ContextBundle& ContextCache::at(const std::string& image_id) const {
    auto it = bundles.find(image_id);
    if (it == bundles.end()) throw std::runtime_error("context cache has no entry for image '" + image_id + "'");
    return it->second;
}

void ContextCache::save(const fs::path& path) const {
    json j;
    j["index_hash"] = index_hash;
    j["bundles"] = json::object();
    for (const auto& [id, b] : bundles) j["bundles"][id] = {{"titles", b.titles}, {"ingredients", b.ingredients}};
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write context cache " + path.string());
    out << j.dump(1) << '\n';
}

ContextCache ContextCache::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open context cache " + path.string());
    const json j = json::parse(in);
    ContextCache c;
    c.index_hash = j.at("index_hash").get<std::string>();
    for (const auto& [id, b] : j.at("bundles").items()) {
        c.bundles[id] = {b.at("titles").get<std::vector<std::string>>(),
                         b.at("ingredients").get<std::vector<std::string>>()};
    }
    return c;
}

std::string ContextIndexes::hash() const { return util::sha256_hex(titles.content_hash() + ingredients.content_hash()); }

ContextIndexes build_context_indexes(const std::vector<data::RecipePair>& corpus, const TextEmbedFn& text_encoder) {
    std::vector<std::string> titles, ingredients;
    for (const auto& p : corpus) {
        if (!p.doc.title.empty()) titles.push_back(p.doc.title);
        ingredients.insert(ingredients.end(), p.doc.local_entities.begin(), p.doc.local_entities.end());
    }
    if (titles.empty() || ingredients.empty()) {
        throw std::invalid_argument("context indexes need at least one title and one ingredient");
    }
    return {ste::build_index_from_strings(ste::dedup(titles), text_encoder),
            ste::build_index_from_strings(ste::dedup(ingredients), text_encoder)};
}

ContextCache build_context_cache(const std::vector<data::RecipePair>& corpus, const ContextIndexes& indexes,
                                 const ImageEncoderHandle& encoder) {
    ContextCache cache;
    cache.index_hash = indexes.hash();
    for (const auto& p : corpus) {
        cache.bundles[p.image_id] = vision::extract_context_bundle(p.image, indexes.titles, indexes.ingredients, encoder);
    }
    return cache;
}

ContextCache load_or_build_context_cache(const fs::path& path, const std::vector<data::RecipePair>& corpus,
                                         const ContextIndexes& indexes, const ImageEncoderHandle& encoder) {
    if (fs::exists(path)) {
        ContextCache cached = ContextCache::load(path);
        const bool complete = std::all_of(corpus.begin(), corpus.end(), [&](const data::RecipePair& p) {
            return cached.bundles.count(p.image_id) != 0;
        });
        if (cached.index_hash == indexes.hash() && complete) return cached;
    }
    ContextCache cache = build_context_cache(corpus, indexes, encoder);
    cache.save(path);
    return cache;
}

json to_json(const EpochLog& log) {
    return {{"epoch", log.epoch}, {"itc", log.itc},       {"itm", log.itm},
            {"total", log.total}, {"margin", log.margin}, {"frozen", log.frozen}};
}

Trainer::Trainer(Model& model, StageConfig config, const std::vector<data::RecipePair>& corpus,
                 const ContextCache* cache)
    : model_(model),
      config_(normalized(std::move(config))),
      corpus_(corpus),
      cache_(cache),
      adam_(nn::AdamConfig{config_.learning_rate}),
      rng_(config_.seed) {
    validate(config_);
    if (corpus_.size() < 2) throw std::invalid_argument("training needs at least two pairs");
    if (config_.context.enabled()) {
        if (!cache_) throw std::invalid_argument("context injection is enabled but no context cache was given");
        for (const auto& p : corpus_) cache_->at(p.image_id);
    }
    if (config_.use_semantic && std::all_of(corpus_.begin(), corpus_.end(),
                                            [](const data::RecipePair& p) { return p.class_id.has_value(); })) {
        for (const auto& p : corpus_) labels_.push_back(*p.class_id);
    }
    apply_freeze();
}

bool Trainer::vision_frozen() const { return epoch_ < config_.freeze_vision_epochs; }

void Trainer::apply_freeze() {
    auto& store = model_.store();
    const bool vslp = config_.stage == Stage::Vslp;
    vision::set_frozen(store, vision_frozen());
    store.set_group_trainable(vision::VisionTransformer::kProjectionGroup, !vslp);
    store.set_group_trainable(vision::ContextualizedVisionEncoder::kIngredientGroup, !vslp);
    store.set_group_trainable(vision::ContextualizedVisionEncoder::kTitleGroup, !vslp);
    store.set_group_trainable(text::HierarchicalTextEncoder::kGroup, true);
    store.set_group_trainable(losses::ItmHead::kGroup, true);
}

StepResult Trainer::step(const std::vector<int>& batch) {
    if (batch.size() < 2) throw std::invalid_argument("a training step needs at least two pairs");
    apply_freeze();
    auto& store = model_.store();
    store.zero_grad();

    std::vector<ag::Var> text_emb, image_emb, text_tok, image_tok;
    std::vector<int> labels;
    for (int idx : batch) {
        const auto& p = corpus_.at(static_cast<std::size_t>(idx));
        auto t = model_.text_encoder().forward(p.doc, model_.vocab());
        vision::ContextBundle ctx;
        if (config_.context.enabled()) {
            ctx = vision::sample_context(cache_->at(p.image_id), static_cast<std::size_t>(config_.sample_titles),
                                         static_cast<std::size_t>(config_.sample_ingredients), &rng_);
        }
        auto v = model_.vision_encoder().forward(p.image, ctx, config_.context, model_.vocab());
        text_emb.push_back(t.embedding);
        image_emb.push_back(v.embedding);
        text_tok.push_back(t.tokens);
        image_tok.push_back(v.tokens);
        if (!labels_.empty()) labels.push_back(labels_[static_cast<std::size_t>(idx)]);
    }

    const double margin = losses::margin_at(epoch_, config_.margin_schedule);
    ag::Var itc = losses::itc_batch_loss(ag::concat_rows(text_emb), ag::concat_rows(image_emb), margin,
                                         labels.empty() ? nullptr : &labels);
    ag::Var itm;
    if (config_.lambda_itm > 0.0) {
        std::vector<ag::Var> logits;
        std::vector<int> y;
        for (const auto& pair : losses::itm_negatives(static_cast<int>(batch.size()), rng_)) {
            logits.push_back(model_.itm_head().logit(text_tok[static_cast<std::size_t>(pair.text)],
                                                     image_tok[static_cast<std::size_t>(pair.image)]));
            y.push_back(pair.label);
        }
        itm = losses::itm_loss_from_logits(ag::concat_rows(logits), y);
    }
    ag::Var total = losses::total_loss(itc, itm, config_.lambda_itm);
    StepResult r{itc.scalar(), itm.defined() ? itm.scalar() : 0.0, total.scalar()};
    if (total.requires_grad()) {
        ag::backward(total);
        adam_.step(store);
    }
    return r;
}

EpochLog Trainer::run_epoch() {
    std::vector<int> order(corpus_.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng_);

    std::vector<std::vector<int>> batches;
    const auto bs = static_cast<std::size_t>(config_.batch_size);
    for (std::size_t start = 0; start < order.size(); start += bs) {
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + bs)));
    }
    if (batches.size() > 1 && batches.back().size() < 2) {
        batches[batches.size() - 2].push_back(batches.back().front());
        batches.pop_back();
    }

    EpochLog log;
    log.epoch = epoch_;
    log.margin = losses::margin_at(epoch_, config_.margin_schedule);
    log.frozen = vision_frozen();
    for (const auto& b : batches) {
        StepResult r = step(b);
        log.itc += r.itc;
        log.itm += r.itm;
        log.total += r.total;
    }
    const double n = static_cast<double>(batches.size());
    log.itc /= n;
    log.itm /= n;
    log.total /= n;
    ++epoch_;
    return log;
}

namespace {

std::string hash_tensors(const std::map<std::string, Tensor>& tensors, const std::vector<std::string>& groups) {
    std::string buf;
    for (const auto& [name, t] : tensors) {
        if (in_groups(t.group, groups)) hash_tensor(buf, name, t.value);
    }
    return util::sha256_hex(buf);
}

void write_doubles(std::ofstream& out, const Matrix& m) {
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

Matrix read_doubles(const std::vector<char>& blob, std::size_t offset, Eigen::Index rows, Eigen::Index cols,
                    const std::string& what) {
    const std::size_t bytes = static_cast<std::size_t>(rows * cols) * sizeof(double);
    if (offset + bytes > blob.size()) throw std::runtime_error("checkpoint data truncated at " + what);
    Matrix m(rows, cols);
    std::memcpy(m.data(), blob.data() + offset, bytes);
    return m;
}

std::vector<char> read_blob(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::string Checkpoint::hash() const { return hash_tensors(parameters, {}); }
std::string Checkpoint::vision_hash() const { return hash_tensors(parameters, kVisionGroups); }

Checkpoint capture(const Model& model, const std::string& stage, std::uint64_t seed, const Trainer* trainer) {
    Checkpoint c;
    c.model = model.config();
    c.vocab = model.vocab();
    c.stage = stage;
    c.seed = seed;
    for (const auto& [name, p] : model.store().all()) c.parameters[name] = {p.group, p.var.value()};
    if (trainer) {
        c.epoch = trainer->epoch();
        c.context = trainer->config().context;
        c.adam_steps = trainer->optimizer().steps();
        c.adam_m = trainer->optimizer().first_moments();
        c.adam_v = trainer->optimizer().second_moments();
        std::ostringstream os;
        os << trainer->rng();
        c.rng_state = os.str();
    }
    return c;
}

std::unique_ptr<Model> restore_model(const Checkpoint& ckpt) {
    auto model = std::make_unique<Model>(ckpt.model, ckpt.vocab, ckpt.seed);
    auto& store = model->store();
    if (store.all().size() != ckpt.parameters.size()) {
        throw std::runtime_error("checkpoint parameter set does not match the model");
    }
    for (const auto& [name, t] : ckpt.parameters) {
        if (!store.contains(name)) throw std::runtime_error("checkpoint has unknown parameter '" + name + "'");
        const auto& cur = store.get(name).value();
        if (cur.rows() != t.value.rows() || cur.cols() != t.value.cols()) {
            throw std::runtime_error("checkpoint parameter '" + name + "' has the wrong shape");
        }
        store.replace_value(name, t.value);
    }
    return model;
}

void restore_trainer(const Checkpoint& ckpt, Trainer& trainer) {
    trainer.set_epoch(ckpt.epoch);
    trainer.optimizer().set_steps(ckpt.adam_steps);
    trainer.optimizer().first_moments() = ckpt.adam_m;
    trainer.optimizer().second_moments() = ckpt.adam_v;
    if (!ckpt.rng_state.empty()) {
        std::istringstream is(ckpt.rng_state);
        is >> trainer.rng();
        if (!is) throw std::runtime_error("checkpoint rng state is corrupt");
    }
}

void save_checkpoint(const Checkpoint& c, const fs::path& dir) {
    fs::create_directories(dir);
    json manifest;
    manifest["format"] = 1;
    manifest["stage"] = c.stage;
    manifest["epoch"] = c.epoch;
    manifest["seed"] = c.seed;
    manifest["dims"] = to_json(c.model);
    manifest["vocab_hash"] = c.vocab.hash();
    manifest["context"] = {{"ing_position", vision::position_name(c.context.ingredients)},
                           {"ttl_position", vision::position_name(c.context.titles)}};
    manifest["rng_state"] = c.rng_state;
    manifest["adam_steps"] = c.adam_steps;
    manifest["hash"] = c.hash();

    std::ofstream tensors(dir / "tensors.bin", std::ios::binary | std::ios::trunc);
    std::size_t offset = 0;
    manifest["tensors"] = json::array();
    for (const auto& [name, t] : c.parameters) {
        manifest["tensors"].push_back(
            {{"name", name}, {"group", t.group}, {"rows", t.value.rows()}, {"cols", t.value.cols()}, {"offset", offset}});
        write_doubles(tensors, t.value);
        offset += static_cast<std::size_t>(t.value.size()) * sizeof(double);
    }
    std::ofstream optim(dir / "optimizer.bin", std::ios::binary | std::ios::trunc);
    offset = 0;
    manifest["optimizer"] = json::array();
    for (const auto& [name, m] : c.adam_m) {
        const auto& v = c.adam_v.at(name);
        manifest["optimizer"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
        write_doubles(optim, m);
        write_doubles(optim, v);
        offset += 2 * static_cast<std::size_t>(m.size()) * sizeof(double);
    }
    if (!tensors || !optim) throw std::runtime_error("failed writing checkpoint to " + dir.string());
    c.vocab.save(dir / "vocab.txt");
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const fs::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("no checkpoint manifest in " + dir.string());
    const json manifest = json::parse(in);
    Checkpoint c;
    c.stage = manifest.at("stage").get<std::string>();
    c.epoch = manifest.at("epoch").get<int>();
    c.seed = manifest.at("seed").get<std::uint64_t>();
    c.model = model_config_from_json(manifest.at("dims"));
    c.vocab = text::Vocabulary::load(dir / "vocab.txt");
    if (c.vocab.hash() != manifest.at("vocab_hash").get<std::string>()) {
        throw std::runtime_error("checkpoint vocabulary does not match its manifest");
    }
    c.context = {vision::parse_position(manifest.at("context").at("ing_position").get<std::string>()),
                 vision::parse_position(manifest.at("context").at("ttl_position").get<std::string>())};
    c.rng_state = manifest.at("rng_state").get<std::string>();
    c.adam_steps = manifest.at("adam_steps").get<std::int64_t>();

    const auto tensors = read_blob(dir / "tensors.bin");
    for (const auto& t : manifest.at("tensors")) {
        const auto name = t.at("name").get<std::string>();
        c.parameters[name] = {t.at("group").get<std::string>(),
                              read_doubles(tensors, t.at("offset").get<std::size_t>(), t.at("rows").get<Eigen::Index>(),
                                           t.at("cols").get<Eigen::Index>(), name)};
    }
    const auto optim = read_blob(dir / "optimizer.bin");
    for (const auto& t : manifest.at("optimizer")) {
        const auto name = t.at("name").get<std::string>();
        const auto rows = t.at("rows").get<Eigen::Index>();
        const auto cols = t.at("cols").get<Eigen::Index>();
        const auto off = t.at("offset").get<std::size_t>();
        c.adam_m[name] = read_doubles(optim, off, rows, cols, name);
        c.adam_v[name] = read_doubles(optim, off + static_cast<std::size_t>(rows * cols) * sizeof(double), rows, cols, name);
    }
    if (c.hash() != manifest.at("hash").get<std::string>()) {
        throw std::runtime_error("checkpoint tensors do not match the manifest hash");
    }
    return c;
}

namespace {

std::vector<std::string> corpus_texts(const std::vector<data::RecipePair>& corpus) {
    std::vector<std::string> texts;
    for (const auto& p : corpus) {
        texts.push_back(p.doc.title);
        texts.insert(texts.end(), p.doc.local_entities.begin(), p.doc.local_entities.end());
        texts.insert(texts.end(), p.doc.event.begin(), p.doc.event.end());
    }
    return texts;
}

Checkpoint run_stage(Model& model, const std::vector<data::RecipePair>& corpus, const StageConfig& config,
                     const ContextCache* cache, const EpochCallback& on_epoch, std::uint64_t seed) {
    Trainer trainer(model, config, corpus, cache);
    for (int e = 0; e < trainer.config().epochs; ++e) {
        EpochLog log = trainer.run_epoch();
        if (on_epoch) on_epoch(log);
    }
    return capture(model, stage_name(trainer.config().stage), seed, &trainer);
}

}  // namespace

Checkpoint initial_checkpoint(const std::vector<data::RecipePair>& corpus, const ModelConfig& config,
                              std::uint64_t seed) {
    if (corpus.empty()) throw std::invalid_argument("cannot build a model from an empty corpus");
    Model model(config, text::Vocabulary::build(corpus_texts(corpus)), seed);
    return capture(model, "init", seed);
}

Checkpoint train_stage1(const std::vector<data::RecipePair>& corpus, StageConfig config,
                        const ModelConfig& model_config, const Checkpoint* init, const EpochCallback& on_epoch) {
    if (corpus.empty()) throw std::invalid_argument("train_stage1: empty corpus");
    config.stage = Stage::Vslp;
    const Checkpoint fresh = init ? Checkpoint{} : initial_checkpoint(corpus, model_config, config.seed);
    const Checkpoint& start = init ? *init : fresh;
    auto model = restore_model(start);
    return run_stage(*model, corpus, config, nullptr, on_epoch, start.seed);
}

Checkpoint train_stage2(const std::vector<data::RecipePair>& corpus, const Checkpoint& init, StageConfig config,
                        const ContextCache* cache, const EpochCallback& on_epoch) {
    if (corpus.empty()) throw std::invalid_argument("train_stage2: empty corpus");
    config.stage = Stage::Finetune;
    auto model = restore_model(init);
    nn::Rng swap_rng(util::stable_seed("vocab-swap:" + std::to_string(config.seed)));
    model->swap_vocabulary(text::Vocabulary::build(corpus_texts(corpus)), swap_rng);
    return run_stage(*model, corpus, config, cache, on_epoch, init.seed);
}

std::vector<data::RecipePair> structure_captions(const std::vector<data::CaptionRecord>& records,
                                                 const ImageEncoderHandle& image_encoder,
                                                 const TextEmbedFn& text_encoder, std::size_t k,
                                                 ste::EntityIndex* index) {
    std::vector<ste::Caption> captions;
    for (const auto& r : records) captions.push_back(r.caption);
    ste::EntityIndex built = ste::build_entity_index(captions, text_encoder);
    const std::size_t kk = std::min(k, built.size());
    std::vector<data::RecipePair> out;
    for (const auto& r : records) {
        data::RecipePair p;
        p.image_id = r.caption.image_id;
        p.image_path = r.image_path;
        p.image = r.image;
        p.doc = ste::build_structured_pair(r.caption, r.image, built, image_encoder, kk);
        out.push_back(std::move(p));
    }
    if (index) *index = std::move(built);
    return out;
}

EmbeddingSet embed_corpus(const Model& model, const std::vector<data::RecipePair>& corpus,
                          const vision::ContextConfig& placement, const ContextCache* cache) {
    if (corpus.empty()) throw std::invalid_argument("embed_corpus: empty corpus");
    if (placement.enabled() && !cache) throw std::invalid_argument("embed_corpus: context enabled without a cache");
    const auto n = static_cast<Eigen::Index>(corpus.size());
    const int d = model.config().text.d_emb;
    EmbeddingSet out{Matrix(n, d), Matrix(n, d)};
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& p = corpus[static_cast<std::size_t>(i)];
        out.text.row(i) = model.encode_text(p.doc).transpose();
        const vision::ContextBundle ctx = placement.enabled() ? cache->at(p.image_id) : vision::ContextBundle{};
        out.image.row(i) = model.encode_image(p.image, ctx, placement).transpose();
    }
    return out;
}

std::array<eval::RetrievalReport, 2> evaluate(const Model& model, const std::vector<data::RecipePair>& corpus,
                                              const vision::ContextConfig& placement, const ContextCache* cache,
                                              const eval::ProtocolConfig& protocol) {
    const EmbeddingSet e = embed_corpus(model, corpus, placement, cache);
    return eval::evaluate_protocol(e.text, e.image, protocol);
}

std::vector<AblationArm> context_ablation_arms(const StageConfig& base) {
    using P = vision::ContextPosition;
    const std::array<std::pair<P, P>, 6> rows = {{{P::Off, P::Off},
                                                  {P::Input, P::Off},
                                                  {P::Off, P::Output},
                                                  {P::Input, P::Input},
                                                  {P::Input, P::Output},
                                                  {P::Output, P::Input}}};
    std::vector<AblationArm> arms;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        AblationArm arm;
        arm.finetune = base;
        arm.finetune.context = {rows[i].first, rows[i].second};
        arm.label = std::to_string(i + 1) + (i == 4 ? " (default)" : "");
        arms.push_back(std::move(arm));
    }
    return arms;
}

std::vector<AblationRow> run_ablation(const std::vector<data::RecipePair>& corpus, const Checkpoint& pretrained,
                                      const std::vector<AblationArm>& arms, const ContextCache* cache,
                                      const eval::ProtocolConfig& protocol) {
    std::vector<AblationRow> rows;
    for (const auto& arm : arms) {
        const Checkpoint fresh =
            arm.use_pretraining ? Checkpoint{} : initial_checkpoint(corpus, pretrained.model, pretrained.seed);
        const Checkpoint trained = train_stage2(corpus, arm.use_pretraining ? pretrained : fresh, arm.finetune, cache);
        auto model = restore_model(trained);
        auto reports = evaluate(*model, corpus, trained.context, cache, protocol);
        for (auto& r : reports) r.label = arm.label;
        rows.push_back({arm, reports});
    }
    return rows;
}

}  // namespace cmr::pipeline
