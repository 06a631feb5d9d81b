#include "commands.h"

#include "cmr/data.h"
#include "cmr/encoders.h"
#include "cmr/pipeline.h"
#include "cmr/reports.h"
#include "cmr/retrieval_eval.h"
#include "cmr/ste.h"
#include "cmr/util.h"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <stdexcept>

namespace cmr::tools {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// The corpus name that selects the built-in generator instead of a file.
constexpr const char* kSynthetic = "synthetic";

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

void print_warnings(const std::vector<std::string>& warnings) {
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
}

std::vector<data::RecipePair> load_pairs(const std::string& source) {
    if (source == kSynthetic) return data::generate_synthetic_corpus({});
    auto ds = data::load_corpus(source, data::CorpusFormat::StructuredJsonl);
    print_warnings(ds.warnings);
    data::load_images(ds.pairs, fs::path(source).parent_path());
    return std::move(ds.pairs);
}

std::vector<data::CaptionRecord> load_captions(const std::string& source) {
    if (source == kSynthetic) return data::generate_caption_corpus({});
    auto ds = data::load_corpus(source, data::CorpusFormat::CaptionJsonl);
    print_warnings(ds.warnings);
    data::load_images(ds.captions, fs::path(source).parent_path());
    return std::move(ds.captions);
}

template <typename T>
int image_size_of(const std::vector<T>& items) {
    if (items.empty()) throw std::invalid_argument("empty corpus");
    return items.front().image.height;
}

/// Parses "key=value"; the value is read as JSON when it parses, otherwise
/// kept as a string.
std::pair<std::string, json> parse_assignment(const std::string& text) {
    const auto eq = text.find('=');
    if (eq == std::string::npos || eq == 0) throw std::invalid_argument("expected key=value, got '" + text + "'");
    const std::string value = text.substr(eq + 1);
    json parsed = json::parse(value, nullptr, false);
    return {text.substr(0, eq), parsed.is_discarded() ? json(value) : parsed};
}

// Keys of a training config that describe the run rather than the stage.
struct RunSettings {
    std::string corpus = kSynthetic;
    std::string captions;
    std::string out = "checkpoint";
    std::string log;
    std::string cache;
    std::string encoder = "toy";
    int topk = 5;
    pipeline::ModelConfig model;
    pipeline::StageConfig stage;
};

/// Shared options of pretrain and finetune. Every flag writes a config key,
/// so flags override the file.
struct TrainOptions {
    std::string config;
    std::map<std::string, json> overrides;
    std::vector<std::string> assignments;
    std::string init;

    void add_to(CLI::App& cmd) {
        cmd.add_option("--config", config, "JSON config with flat stage keys and run keys");
        auto key = [&](const char* flag, const char* name, const char* help, bool is_int) {
            cmd.add_option_function<std::string>(
                flag,
                [this, name, is_int](const std::string& v) {
                    overrides[name] = is_int ? json(std::stoll(v)) : json(std::stod(v));
                },
                help);
        };
        auto str = [&](const char* flag, const char* name, const char* help) {
            cmd.add_option_function<std::string>(
                flag, [this, name](const std::string& v) { overrides[name] = v; }, help);
        };
        str("--corpus", "corpus", "Structured corpus (JSON-lines) or 'synthetic'");
        str("--out", "out", "Checkpoint directory to write");
        str("--log", "log", "Epoch log path (default <out>/train.log.jsonl)");
        str("--encoder", "encoder", "Frozen retrieval encoder: toy or file:PATH");
        key("--epochs", "epochs", "Epoch count", true);
        key("--batch-size", "batch_size", "Batch size", true);
        key("--lr", "learning_rate", "Adam learning rate", false);
        key("--lambda-itm", "lambda_itm", "Weight of the matching loss", false);
        key("--seed", "seed", "Seed", true);
        cmd.add_option("--set", assignments, "Override any config key: key=value");
    }

    RunSettings resolve() const {
        json j = config.empty() ? json::object() : read_json_file(config);
        if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
        for (const auto& [k, v] : overrides) j[k] = v;
        for (const auto& a : assignments) {
            auto [k, v] = parse_assignment(a);
            j[k] = v;
        }
        RunSettings s;
        auto take = [&](const char* name, auto& field) {
            if (auto it = j.find(name); it != j.end()) {
                it->get_to(field);
                j.erase(it);
            }
        };
        take("corpus", s.corpus);
        take("captions", s.captions);
        take("out", s.out);
        take("log", s.log);
        take("cache", s.cache);
        take("encoder", s.encoder);
        take("topk", s.topk);
        if (auto it = j.find("model"); it != j.end()) {
            s.model = pipeline::model_config_from_json(*it);
            j.erase(it);
        }
        s.stage = pipeline::stage_config_from_json(j);
        if (s.log.empty()) s.log = (fs::path(s.out) / "train.log.jsonl").string();
        return s;
    }
};

pipeline::EpochCallback epoch_logger(const std::string& path) {
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    auto stream = std::make_shared<std::ofstream>(path);
    if (!*stream) throw std::runtime_error("cannot write log " + path);
    return [s = stream](const pipeline::EpochLog& log) {
        *s << pipeline::to_json(log).dump() << "\n" << std::flush;
        std::cout << "epoch " << log.epoch << "  itc " << log.itc << "  itm " << log.itm << "  total " << log.total
                  << "  margin " << log.margin << (log.frozen ? "  (vision frozen)" : "") << "\n";
    };
}

/// Context cache for `corpus`, reused from `path` when it matches.
pipeline::ContextCache context_cache(const std::vector<data::RecipePair>& corpus, const std::string& encoder,
                                     const fs::path& path) {
    const auto enc = encoders::make_encoder(encoder, image_size_of(corpus));
    const auto indexes = pipeline::build_context_indexes(corpus, enc.text);
    return pipeline::load_or_build_context_cache(path, corpus, indexes, enc.image);
}

std::string default_cache_path(const std::string& cache, const fs::path& dir) {
    return cache.empty() ? (dir / "context_cache.json").string() : cache;
}

std::set<eval::Entity> parse_drop(const std::vector<std::string>& names) {
    std::set<eval::Entity> drop;
    for (const auto& n : names) {
        if (!util::trim(n).empty()) drop.insert(eval::parse_entity(util::trim(n)));
    }
    return drop;
}

json reports_json(const std::array<eval::RetrievalReport, 2>& r) {
    return json::array({eval::to_json(r[0]), eval::to_json(r[1])});
}

}  // namespace

void configure_ste_build(CLI::App& cmd) {
    struct Opts {
        std::string captions, out, index, encoder = "toy";
        std::size_t topk = 5;
    };
    auto o = std::make_shared<Opts>();
    cmd.description("Turn a caption corpus into structured pairs and write the entity index");
    cmd.add_option("--captions", o->captions, "Caption corpus (JSON-lines) or 'synthetic'")->required();
    cmd.add_option("--out", o->out, "Structured corpus to write (JSON-lines)")->required();
    cmd.add_option("--index", o->index, "Entity index file to write")->required();
    cmd.add_option("--topk", o->topk, "Local entities per image")->capture_default_str();
    cmd.add_option("--encoder", o->encoder, "toy or file:PATH")->capture_default_str();
    cmd.callback([o] {
        auto records = load_captions(o->captions);
        const auto enc = encoders::make_encoder(o->encoder, image_size_of(records));
        ste::EntityIndex index;
        auto pairs = pipeline::structure_captions(records, enc.image, enc.text, o->topk, &index);
        const fs::path out(o->out);
        const fs::path out_dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
        fs::create_directories(out_dir);
        const bool synthetic = o->captions == kSynthetic;
        if (!synthetic) {
            const fs::path in_dir = fs::path(o->captions).parent_path();
            for (auto& p : pairs) {
                p.image_path = fs::relative(fs::absolute(in_dir / p.image_path), fs::absolute(out_dir)).generic_string();
            }
        }
        data::save_structured_corpus(out, pairs, synthetic);
        if (fs::path(o->index).has_parent_path()) fs::create_directories(fs::path(o->index).parent_path());
        index.save(o->index);
        std::cout << "structured " << pairs.size() << " captions; index holds " << index.size() << " entities ("
                  << index.embed_dim() << "-d)\n";
    });
}

void configure_synth(CLI::App& cmd) {
    struct Opts {
        std::string out;
        data::SyntheticSpec spec;
    };
    auto o = std::make_shared<Opts>();
    cmd.description("Write the synthetic recipe and caption corpora with their images");
    cmd.add_option("--out", o->out, "Output directory")->required();
    cmd.add_option("--classes", o->spec.num_classes, "Dish classes")->capture_default_str();
    cmd.add_option("--per-class", o->spec.pairs_per_class, "Pairs per class")->capture_default_str();
    cmd.add_option("--image-size", o->spec.image_size, "Image side in pixels")->capture_default_str();
    cmd.add_option("--noise", o->spec.noise_level, "Pixel noise level")->capture_default_str();
    cmd.add_option("--seed", o->spec.seed, "Seed")->capture_default_str();
    cmd.callback([o] {
        const fs::path dir(o->out);
        fs::create_directories(dir);
        auto pairs = data::generate_synthetic_corpus(o->spec);
        data::save_structured_corpus(dir / "recipes.jsonl", pairs);
        auto captions = data::generate_caption_corpus(o->spec);
        data::save_caption_corpus(dir / "captions.jsonl", captions);
        std::ofstream labels(dir / "labels.jsonl");
        for (const auto& p : pairs) labels << json{{"image_id", p.image_id}, {"label", *p.class_id}}.dump() << "\n";
        std::cout << "wrote " << pairs.size() << " recipe pairs, " << captions.size() << " captions and labels to "
                  << dir.string() << "\n";
    });
}

void configure_pretrain(CLI::App& cmd) {
    auto o = std::make_shared<TrainOptions>();
    cmd.description("Stage 1: pretrain the text side against the frozen vision encoder");
    o->add_to(cmd);
    cmd.add_option_function<std::string>(
        "--captions", [o](const std::string& v) { o->overrides["captions"] = v; },
        "Caption corpus structured on the fly (JSON-lines or 'synthetic')");
    cmd.add_option_function<int>(
        "--topk", [o](int v) { o->overrides["topk"] = v; }, "Local entities per caption image");
    cmd.callback([o] {
        auto s = o->resolve();
        s.stage.stage = pipeline::Stage::Vslp;
        std::vector<data::RecipePair> corpus;
        if (!s.captions.empty()) {
            const auto records = load_captions(s.captions);
            const auto enc = encoders::make_encoder(s.encoder, image_size_of(records));
            corpus = pipeline::structure_captions(records, enc.image, enc.text, static_cast<std::size_t>(s.topk));
        } else {
            corpus = load_pairs(s.corpus);
        }
        const auto ckpt = pipeline::train_stage1(corpus, s.stage, s.model, nullptr, epoch_logger(s.log));
        pipeline::save_checkpoint(ckpt, s.out);
        std::cout << "saved " << s.out << " (hash " << ckpt.hash().substr(0, 16) << ")\n";
    });
}

void configure_finetune(CLI::App& cmd) {
    auto o = std::make_shared<TrainOptions>();
    cmd.description("Stage 2: finetune from a checkpoint with context injection");
    o->add_to(cmd);
    cmd.add_option("--init", o->init, "Checkpoint directory to start from")->required();
    cmd.add_option_function<std::string>(
        "--cache", [o](const std::string& v) { o->overrides["cache"] = v; },
        "Context cache file (default <out>/context_cache.json)");
    cmd.add_option_function<int>(
        "--freeze-vision-epochs", [o](int v) { o->overrides["freeze_vision_epochs"] = v; },
        "Epochs before the vision backbone trains");
    cmd.callback([o] {
        auto s = o->resolve();
        s.stage.stage = pipeline::Stage::Finetune;
        const auto corpus = load_pairs(s.corpus);
        const auto init = pipeline::load_checkpoint(o->init);
        std::optional<pipeline::ContextCache> cache;
        if (s.stage.context.enabled()) {
            fs::create_directories(s.out);
            cache = context_cache(corpus, s.encoder, default_cache_path(s.cache, s.out));
        }
        const auto ckpt =
            pipeline::train_stage2(corpus, init, s.stage, cache ? &*cache : nullptr, epoch_logger(s.log));
        pipeline::save_checkpoint(ckpt, s.out);
        std::cout << "saved " << s.out << " (hash " << ckpt.hash().substr(0, 16) << ")\n";
    });
}

void configure_evaluate(CLI::App& cmd) {
    struct Opts {
        std::string ckpt, corpus = kSynthetic, encoder = "toy", cache, out, label;
        int gallery = 0, runs = 0;
        std::uint64_t seed = 0;
        std::vector<std::string> drop;
    };
    auto o = std::make_shared<Opts>();
    cmd.description("Retrieval metrics of a checkpoint in both directions");
    cmd.add_option("--ckpt", o->ckpt, "Checkpoint directory")->required();
    cmd.add_option("--gallery", o->gallery, "Gallery size (default: min(1000, corpus size))");
    cmd.add_option("--runs", o->runs, "Sampled galleries to average (default: protocol default)");
    cmd.add_option("--seed", o->seed, "Gallery sampling seed")->capture_default_str();
    cmd.add_option("--corpus", o->corpus, "Structured corpus or 'synthetic'")->capture_default_str();
    cmd.add_option("--encoder", o->encoder, "Retrieval encoder for context: toy or file:PATH")->capture_default_str();
    cmd.add_option("--cache", o->cache, "Context cache file (default: next to the checkpoint)");
    cmd.add_option("--drop", o->drop, "Entity classes removed from every recipe: title, ingredients, instructions")
        ->delimiter(',');
    cmd.add_option("--label", o->label, "Row label in tables");
    cmd.add_option("--out", o->out, "Write both reports as a JSON array");
    cmd.callback([o] {
        const auto ckpt = pipeline::load_checkpoint(o->ckpt);
        const auto corpus = load_pairs(o->corpus);
        const int n = static_cast<int>(corpus.size());
        eval::ProtocolConfig protocol;
        protocol.gallery_size = o->gallery > 0 ? o->gallery : std::min(1000, n);
        protocol.num_runs = o->runs > 0 ? o->runs : eval::default_runs(protocol.gallery_size);
        protocol.seed = o->seed;
        std::optional<pipeline::ContextCache> cache;
        if (ckpt.context.enabled()) {
            cache = context_cache(corpus, o->encoder, default_cache_path(o->cache, fs::path(o->ckpt).parent_path()));
        }
        const auto model = pipeline::restore_model(ckpt);
        std::array<eval::RetrievalReport, 2> reports;
        const auto drop = parse_drop(o->drop);
        if (drop.empty()) {
            reports = pipeline::evaluate(*model, corpus, ckpt.context, cache ? &*cache : nullptr, protocol);
        } else {
            const auto embs = pipeline::embed_corpus(*model, corpus, ckpt.context, cache ? &*cache : nullptr);
            reports = eval::evaluate_missing_entities(
                [&](const StructuredDocument& d) { return model->encode_text(d); }, data::documents(corpus),
                embs.image, drop, protocol);
        }
        for (auto& r : reports) r.label = o->label;
        std::cout << reports::render_table({reports[0], reports[1]});
        if (!o->out.empty()) write_text(o->out, reports_json(reports).dump(2) + "\n");
    });
}

void configure_ablate(CLI::App& cmd) {
    struct Opts {
        std::string matrix, out;
    };
    auto o = std::make_shared<Opts>();
    cmd.description("Finetune and evaluate every arm of an ablation matrix");
    cmd.add_option("--matrix", o->matrix, "Ablation matrix (JSON)")->required();
    cmd.add_option("--out", o->out, "Output directory (overrides the matrix 'out' key)");
    cmd.callback([o] {
        json m = read_json_file(o->matrix);
        const std::string corpus_src = m.value("corpus", std::string(kSynthetic));
        const std::string encoder = m.value("encoder", std::string("toy"));
        const fs::path out = o->out.empty() ? fs::path(m.value("out", std::string("ablation"))) : fs::path(o->out);
        fs::create_directories(out);
        const auto corpus = load_pairs(corpus_src);
        const auto pretrained = pipeline::load_checkpoint(m.at("init").get<std::string>());
        const auto base = pipeline::stage_config_from_json(m.value("base", json::object()));

        std::vector<pipeline::AblationArm> arms;
        const json arms_spec = m.value("arms", json("context"));
        if (arms_spec.is_string()) {
            if (arms_spec.get<std::string>() != "context") {
                throw std::invalid_argument("arms must be \"context\" or a list of arm objects");
            }
            arms = pipeline::context_ablation_arms(base);
        } else {
            for (json a : arms_spec) {
                pipeline::AblationArm arm;
                arm.label = a.at("label").get<std::string>();
                a.erase("label");
                if (a.contains("use_pretraining")) {
                    arm.use_pretraining = a["use_pretraining"].get<bool>();
                    a.erase("use_pretraining");
                }
                arm.finetune = pipeline::stage_config_from_json(a, base);
                arms.push_back(std::move(arm));
            }
        }
        bool needs_context = false;
        for (const auto& a : arms) needs_context = needs_context || a.finetune.context.enabled();
        std::optional<pipeline::ContextCache> cache;
        if (needs_context) {
            cache = context_cache(corpus, encoder, default_cache_path(m.value("cache", std::string()), out));
        }
        eval::ProtocolConfig protocol;
        protocol.gallery_size = m.value("gallery", std::min(1000, static_cast<int>(corpus.size())));
        protocol.num_runs = m.value("runs", eval::default_runs(protocol.gallery_size));
        protocol.seed = m.value("seed", std::uint64_t{0});
        const auto rows = pipeline::run_ablation(corpus, pretrained, arms, cache ? &*cache : nullptr, protocol);
        json all = json::array();
        for (const auto& r : rows) {
            for (const auto& rep : r.reports) all.push_back(eval::to_json(rep));
        }
        const auto table = reports::render_ablation_table(rows);
        write_text(out / "ablation.txt", table);
        write_text(out / "reports.json", all.dump(2) + "\n");
        std::cout << table;
    });
}

void configure_probe(CLI::App& cmd) {
    struct Opts {
        std::string ckpt, labels, corpus = kSynthetic, features = "image", out;
        std::uint64_t seed = 0;
    };
    auto o = std::make_shared<Opts>();
    cmd.description("Linear probe of frozen embeddings against class labels");
    cmd.add_option("--ckpt", o->ckpt, "Checkpoint directory")->required();
    cmd.add_option("--labels", o->labels, "JSON-lines of {\"image_id\", \"label\"}")->required();
    cmd.add_option("--corpus", o->corpus, "Structured corpus or 'synthetic'")->capture_default_str();
    cmd.add_option("--features", o->features, "Embeddings to probe")
        ->check(CLI::IsMember({"image", "text"}))
        ->capture_default_str();
    cmd.add_option("--seed", o->seed, "Train/test split seed")->capture_default_str();
    cmd.add_option("--out", o->out, "Write the result as JSON");
    cmd.callback([o] {
        std::map<std::string, int> label_of;
        std::ifstream in(o->labels);
        if (!in) throw std::runtime_error("cannot read " + o->labels);
        std::string line;
        for (std::size_t n = 1; std::getline(in, line); ++n) {
            if (util::trim(line).empty()) continue;
            const auto j = json::parse(line, nullptr, false);
            if (j.is_discarded() || !j.contains("image_id") || !j.contains("label")) {
                throw std::runtime_error(o->labels + ":" + std::to_string(n) + ": expected {\"image_id\", \"label\"}");
            }
            label_of[j["image_id"].get<std::string>()] = j["label"].get<int>();
        }
        auto corpus = load_pairs(o->corpus);
        std::erase_if(corpus, [&](const data::RecipePair& p) { return !label_of.count(p.image_id); });
        if (corpus.empty()) throw std::runtime_error("no corpus image has a label");
        std::vector<int> labels;
        for (const auto& p : corpus) labels.push_back(label_of.at(p.image_id));
        const auto ckpt = pipeline::load_checkpoint(o->ckpt);
        const auto model = pipeline::restore_model(ckpt);
        const vision::ContextConfig off{vision::ContextPosition::Off, vision::ContextPosition::Off};
        const auto embs = pipeline::embed_corpus(*model, corpus, off, nullptr);
        eval::ProbeSplit split;
        split.seed = o->seed;
        const double acc = eval::linear_probe(o->features == "image" ? embs.image : embs.text, labels, split);
        std::cout << "linear probe accuracy (" << o->features << ", " << corpus.size() << " examples): " << acc
                  << "\n";
        if (!o->out.empty()) {
            write_text(o->out, json{{"features", o->features}, {"examples", corpus.size()}, {"accuracy", acc}}.dump(2) +
                                   "\n");
        }
    });
}

void configure_report(CLI::App& cmd) {
    struct Opts {
        std::vector<std::string> in;
        std::string out;
    };
    auto o = std::make_shared<Opts>();
    cmd.description("Render retrieval reports as a text table");
    cmd.add_option("--in", o->in, "Report JSON files (one report or an array)")->required()->check(CLI::ExistingFile);
    cmd.add_option("--out", o->out, "Table file (default: stdout only)");
    cmd.callback([o] {
        std::vector<eval::RetrievalReport> all;
        for (const auto& path : o->in) {
            const json j = read_json_file(path);
            if (j.is_array()) {
                for (const auto& r : j) all.push_back(eval::report_from_json(r));
            } else {
                all.push_back(eval::report_from_json(j));
            }
        }
        const auto table = reports::render_table(all);
        if (!o->out.empty()) write_text(o->out, table);
        std::cout << table;
    });
}

void configure_plot(CLI::App& cmd) {
    struct Opts {
        std::string log, out_dir = "plots";
    };
    auto o = std::make_shared<Opts>();
    cmd.description("Plot loss and margin curves from an epoch log");
    cmd.add_option("--log", o->log, "Epoch log (JSON-lines)")->required();
    cmd.add_option("--out-dir", o->out_dir, "Directory for the SVG files")->capture_default_str();
    cmd.callback([o] {
        const auto files = reports::render_curves(o->log, o->out_dir);
        print_warnings(files.warnings);
        std::cout << "wrote " << files.loss.string() << " and " << files.margin.string() << " (" << files.points
                  << " epochs)\n";
    });
}

int run(CLI::App& app, int argc, char** argv) {
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace cmr::tools
