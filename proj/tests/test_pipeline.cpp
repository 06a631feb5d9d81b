#include "cmr/encoders.h"
#include "cmr/pipeline.h"

#include "support.h"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>

namespace cmr {
namespace {

namespace fs = std::filesystem;
using pipeline::Checkpoint;
using pipeline::Model;
using pipeline::Stage;
using pipeline::StageConfig;
using vision::ContextPosition;

struct World {
    World() : corpus(testing::small_corpus()), clip(16) {
        indexes = std::make_unique<pipeline::ContextIndexes>(pipeline::build_context_indexes(corpus, clip.text_fn()));
        cache = pipeline::build_context_cache(corpus, *indexes, clip.image_handle());
    }
    std::vector<data::RecipePair> corpus;
    encoders::ToyClip clip;
    std::unique_ptr<pipeline::ContextIndexes> indexes;
    pipeline::ContextCache cache;
};

StageConfig quick_stage(int epochs, int freeze = 0) {
    StageConfig c;
    c.epochs = epochs;
    c.batch_size = 4;
    c.freeze_vision_epochs = freeze;
    c.seed = 11;
    return c;
}

fs::path temp_path(const std::string& name) {
    auto p = fs::temp_directory_path() / ("cmr_test_" + name);
    fs::remove_all(p);
    return p;
}

TEST(StageConfig, JsonRoundTripAndUnknownKeys) {
    StageConfig c;
    c.epochs = 7;
    c.lambda_itm = 0.25;
    c.context = {ContextPosition::Output, ContextPosition::Input};
    c.margin_schedule.cap = 0.2;
    const auto back = pipeline::stage_config_from_json(pipeline::to_json(c));
    EXPECT_EQ(pipeline::to_json(back).dump(), pipeline::to_json(c).dump());
    EXPECT_THROW(pipeline::stage_config_from_json(nlohmann::json{{"epochz", 3}}), std::invalid_argument);
    const auto flat = pipeline::stage_config_from_json(
        nlohmann::json{{"ing_position", "off"}, {"ttl_position", "input"}, {"margin_start", 0.1}});
    EXPECT_EQ(flat.context.ingredients, ContextPosition::Off);
    EXPECT_EQ(flat.context.titles, ContextPosition::Input);
    EXPECT_DOUBLE_EQ(flat.margin_schedule.start, 0.1);
}

TEST(StageConfig, ValidationAndNormalization) {
    StageConfig c;
    c.batch_size = 1;
    EXPECT_THROW(pipeline::validate(c), std::invalid_argument);
    c = {};
    c.lambda_itm = -1;
    EXPECT_THROW(pipeline::validate(c), std::invalid_argument);
    c = {};
    c.stage = Stage::Vslp;
    c.epochs = 5;
    const auto n = pipeline::normalized(c);
    EXPECT_EQ(n.freeze_vision_epochs, 5);
    EXPECT_FALSE(n.context.enabled());
    EXPECT_FALSE(n.use_semantic);
    EXPECT_EQ(pipeline::parse_stage("pretrain"), Stage::Vslp);
    EXPECT_EQ(pipeline::parse_stage("finetune"), Stage::Finetune);
    EXPECT_THROW(pipeline::parse_stage("stage3"), std::invalid_argument);
}

TEST(ModelConfig, JsonRoundTrip) {
    const auto c = testing::toy_model_config();
    EXPECT_TRUE(pipeline::model_config_from_json(pipeline::to_json(c)) == c);
}

TEST(Model, VisionInitDoesNotDependOnVocabulary) {
    const auto cfg = testing::toy_model_config();
    Model a(cfg, text::Vocabulary::build({"a b c"}), 3);
    Model b(cfg, text::Vocabulary::build({"a b c d e f g h"}), 3);
    EXPECT_EQ(pipeline::vision_hash(a.store()), pipeline::vision_hash(b.store()));
    EXPECT_EQ(pipeline::parameter_hash(a.store(), {"itm"}), pipeline::parameter_hash(b.store(), {"itm"}));
}

TEST(Model, SwapVocabularyResizesEveryTokenTable) {
    Model m(testing::toy_model_config(), text::Vocabulary::build({"a b"}), 1);
    nn::Rng rng(1);
    auto resized = m.swap_vocabulary(text::Vocabulary::build({"a b c d"}), rng);
    EXPECT_EQ(resized.size(), 3u);
    for (const auto& name : resized) EXPECT_EQ(m.store().get(name).rows(), 7);
    EXPECT_EQ(m.vocab().size(), 7);
}

TEST(Trainer, ContextWithoutCacheThrows) {
    World w;
    auto ckpt = pipeline::initial_checkpoint(w.corpus, testing::toy_model_config(), 1);
    auto model = pipeline::restore_model(ckpt);
    EXPECT_THROW(pipeline::Trainer(*model, quick_stage(1), w.corpus, nullptr), std::invalid_argument);
    pipeline::ContextCache partial = w.cache;
    partial.bundles.erase(w.corpus.front().image_id);
    EXPECT_THROW(pipeline::Trainer(*model, quick_stage(1), w.corpus, &partial), std::runtime_error);
    EXPECT_THROW(pipeline::train_stage2(w.corpus, ckpt, quick_stage(1), nullptr), std::invalid_argument);
}

TEST(Trainer, Stage1KeepsVisionBitIdentical) {
    World w;
    auto init = pipeline::initial_checkpoint(w.corpus, testing::toy_model_config(), 1);
    StageConfig s1 = quick_stage(3);
    s1.stage = Stage::Vslp;
    auto trained = pipeline::train_stage1(w.corpus, s1, testing::toy_model_config(), &init);
    EXPECT_EQ(trained.vision_hash(), init.vision_hash());
    EXPECT_NE(trained.hash(), init.hash());
    EXPECT_EQ(pipeline::parameter_hash(pipeline::restore_model(trained)->store(), {"ctx_ing", "ctx_ttl"}),
              pipeline::parameter_hash(pipeline::restore_model(init)->store(), {"ctx_ing", "ctx_ttl"}));
}

TEST(Trainer, Stage2FreezesBackboneForConfiguredEpochs) {
    World w;
    auto init = pipeline::initial_checkpoint(w.corpus, testing::toy_model_config(), 1);
    auto model = pipeline::restore_model(init);
    pipeline::Trainer trainer(*model, quick_stage(4, 2), w.corpus, &w.cache);
    const auto backbone0 = pipeline::parameter_hash(model->store(), {"vit"});
    const auto proj0 = pipeline::parameter_hash(model->store(), {"vit_proj"});
    for (int e = 0; e < 2; ++e) {
        EXPECT_TRUE(trainer.run_epoch().frozen);
        EXPECT_EQ(pipeline::parameter_hash(model->store(), {"vit"}), backbone0) << "epoch " << e;
    }
    EXPECT_NE(pipeline::parameter_hash(model->store(), {"vit_proj"}), proj0);
    EXPECT_FALSE(trainer.run_epoch().frozen);
    EXPECT_NE(pipeline::parameter_hash(model->store(), {"vit"}), backbone0);
}

TEST(Trainer, ZeroLambdaLeavesMatchingHeadUntouched) {
    World w;
    auto init = pipeline::initial_checkpoint(w.corpus, testing::toy_model_config(), 1);
    auto model = pipeline::restore_model(init);
    StageConfig c = quick_stage(2);
    c.lambda_itm = 0.0;
    pipeline::Trainer trainer(*model, c, w.corpus, &w.cache);
    const auto itm0 = pipeline::parameter_hash(model->store(), {"itm"});
    trainer.run_epoch();
    const auto log = trainer.run_epoch();
    EXPECT_EQ(pipeline::parameter_hash(model->store(), {"itm"}), itm0);
    EXPECT_EQ(log.itm, 0.0);
}

TEST(Trainer, MarginFollowsSchedule) {
    World w;
    auto model = pipeline::restore_model(pipeline::initial_checkpoint(w.corpus, testing::toy_model_config(), 1));
    pipeline::Trainer trainer(*model, quick_stage(3), w.corpus, &w.cache);
    EXPECT_DOUBLE_EQ(trainer.run_epoch().margin, 0.05);
    EXPECT_NEAR(trainer.run_epoch().margin, 0.055, 1e-12);
}

TEST(Trainer, LossDecreasesOnTinyCorpus) {
    World w;
    auto init = pipeline::initial_checkpoint(w.corpus, testing::toy_model_config(), 1);
    StageConfig c = quick_stage(30);
    c.learning_rate = 3e-3;
    c.margin_schedule.increment = 0.0;
    std::vector<double> itc;
    pipeline::train_stage2(w.corpus, init, c, &w.cache, [&](const pipeline::EpochLog& l) { itc.push_back(l.itc); });
    ASSERT_EQ(itc.size(), 30u);
    const double first = (itc[0] + itc[1] + itc[2]) / 3, last = (itc[27] + itc[28] + itc[29]) / 3;
    EXPECT_LT(last, first);
}

TEST(Trainer, PretrainingLossDropsOverLongToyRun) {
    data::SyntheticSpec spec;
    spec.image_size = 16;
    const auto corpus = data::generate_synthetic_corpus(spec);
    StageConfig c = quick_stage(200);
    c.stage = Stage::Vslp;
    c.batch_size = 16;
    std::vector<double> total;
    pipeline::train_stage1(corpus, c, testing::toy_model_config(), nullptr,
                           [&](const pipeline::EpochLog& l) { total.push_back(l.total); });
    ASSERT_EQ(total.size(), 200u);
    EXPECT_LT(total.back(), total.front());
}

TEST(Checkpoint, SaveLoadRoundTrip) {
    World w;
    auto init = pipeline::initial_checkpoint(w.corpus, testing::toy_model_config(), 1);
    auto trained = pipeline::train_stage2(w.corpus, init, quick_stage(2), &w.cache);
    const auto dir = temp_path("ckpt");
    pipeline::save_checkpoint(trained, dir);
    for (const char* f : {"manifest.json", "tensors.bin", "optimizer.bin", "vocab.txt"}) {
        EXPECT_TRUE(fs::exists(dir / f)) << f;
    }
    auto back = pipeline::load_checkpoint(dir);
    EXPECT_EQ(back.hash(), trained.hash());
    EXPECT_EQ(back.stage, "finetune");
    EXPECT_EQ(back.epoch, 2);
    EXPECT_EQ(back.adam_steps, trained.adam_steps);
    EXPECT_EQ(back.rng_state, trained.rng_state);
    EXPECT_EQ(back.context, trained.context);
    auto a = pipeline::restore_model(trained), b = pipeline::restore_model(back);
    EXPECT_EQ(a->encode_text(w.corpus[0].doc), b->encode_text(w.corpus[0].doc));
    fs::remove_all(dir);
}

TEST(Checkpoint, CorruptedTensorsAreDetected) {
    World w;
    auto init = pipeline::initial_checkpoint(w.corpus, testing::toy_model_config(), 1);
    const auto dir = temp_path("ckpt_corrupt");
    pipeline::save_checkpoint(init, dir);
    {
        std::fstream f(dir / "tensors.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(64);
        f.put('\x7f');
    }
    EXPECT_THROW(pipeline::load_checkpoint(dir), std::runtime_error);
    EXPECT_THROW(pipeline::load_checkpoint(dir / "absent"), std::runtime_error);
    fs::remove_all(dir);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
    World w;
    auto init = pipeline::initial_checkpoint(w.corpus, testing::toy_model_config(), 1);
    const StageConfig c = quick_stage(4, 1);

    auto straight = pipeline::restore_model(init);
    pipeline::Trainer t1(*straight, c, w.corpus, &w.cache);
    for (int e = 0; e < 4; ++e) t1.run_epoch();

    auto first = pipeline::restore_model(init);
    pipeline::Trainer t2(*first, c, w.corpus, &w.cache);
    t2.run_epoch();
    t2.run_epoch();
    const auto dir = temp_path("ckpt_resume");
    pipeline::save_checkpoint(pipeline::capture(*first, "finetune", 1, &t2), dir);
    auto saved = pipeline::load_checkpoint(dir);
    auto resumed = pipeline::restore_model(saved);
    pipeline::Trainer t3(*resumed, c, w.corpus, &w.cache);
    pipeline::restore_trainer(saved, t3);
    EXPECT_EQ(t3.epoch(), 2);
    t3.run_epoch();
    t3.run_epoch();
    EXPECT_EQ(pipeline::parameter_hash(resumed->store()), pipeline::parameter_hash(straight->store()));
    fs::remove_all(dir);
}

TEST(Pipeline, SameSeedSameCheckpoint) {
    World w;
    StageConfig s1 = quick_stage(2);
    s1.stage = Stage::Vslp;
    auto a1 = pipeline::train_stage1(w.corpus, s1, testing::toy_model_config());
    auto b1 = pipeline::train_stage1(w.corpus, s1, testing::toy_model_config());
    EXPECT_EQ(a1.hash(), b1.hash());
    auto a2 = pipeline::train_stage2(w.corpus, a1, quick_stage(2), &w.cache);
    auto b2 = pipeline::train_stage2(w.corpus, b1, quick_stage(2), &w.cache);
    EXPECT_EQ(a2.hash(), b2.hash());
    StageConfig other = quick_stage(2);
    other.seed = 12;
    EXPECT_NE(pipeline::train_stage2(w.corpus, a1, other, &w.cache).hash(), a2.hash());
}

TEST(ContextCache, CoversCorpusAndRoundTrips) {
    World w;
    EXPECT_EQ(w.cache.bundles.size(), w.corpus.size());
    for (const auto& p : w.corpus) {
        const auto& b = w.cache.at(p.image_id);
        EXPECT_LE(b.titles.size(), vision::kMaxTitles);
        EXPECT_LE(b.ingredients.size(), vision::kMaxIngredients);
        ASSERT_FALSE(b.ingredients.empty());
    }
    EXPECT_THROW(w.cache.at("missing"), std::runtime_error);
    const auto path = temp_path("cache.json");
    w.cache.save(path);
    auto back = pipeline::ContextCache::load(path);
    EXPECT_EQ(back.index_hash, w.cache.index_hash);
    EXPECT_EQ(back.bundles, w.cache.bundles);
    auto reused = pipeline::load_or_build_context_cache(path, w.corpus, *w.indexes, w.clip.image_handle());
    EXPECT_EQ(reused.bundles, w.cache.bundles);
    fs::remove(path);
}

TEST(ContextCache, RetrievesOwnIngredientsOnSyntheticImages) {
    World w;
    for (const auto& p : w.corpus) {
        const auto& got = w.cache.at(p.image_id).ingredients;
        for (const auto& ing : p.doc.local_entities) {
            EXPECT_NE(std::find(got.begin(), got.end(), ing), got.end()) << p.image_id << " " << ing;
        }
    }
}

TEST(StructureCaptions, ProducesValidPairs) {
    data::SyntheticSpec spec;
    spec.pairs_per_class = 2;
    spec.image_size = 16;
    auto records = data::generate_caption_corpus(spec);
    encoders::ToyClip clip(16);
    ste::EntityIndex index;
    auto pairs = pipeline::structure_captions(records, clip.image_handle(), clip.text_fn(), 3, &index);
    ASSERT_EQ(pairs.size(), records.size());
    EXPECT_GT(index.size(), 3u);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        EXPECT_EQ(pairs[i].image_id, records[i].caption.image_id);
        EXPECT_EQ(pairs[i].doc.local_entities.size(), 3u);
        EXPECT_NO_THROW(validate_document(pairs[i].doc));
    }
}

TEST(Ablation, SixArmsWithDefaultFifth) {
    auto arms = pipeline::context_ablation_arms(quick_stage(1));
    ASSERT_EQ(arms.size(), 6u);
    EXPECT_FALSE(arms[0].finetune.context.enabled());
    EXPECT_EQ(arms[4].label, "5 (default)");
    EXPECT_EQ(arms[4].finetune.context, vision::ContextConfig{});
    EXPECT_EQ(arms[3].finetune.context, (vision::ContextConfig{ContextPosition::Input, ContextPosition::Input}));
    EXPECT_EQ(arms[5].finetune.context, (vision::ContextConfig{ContextPosition::Output, ContextPosition::Input}));
}

TEST(Ablation, RunsEveryArm) {
    World w;
    StageConfig s1 = quick_stage(1);
    s1.stage = Stage::Vslp;
    auto pre = pipeline::train_stage1(w.corpus, s1, testing::toy_model_config());
    auto arms = pipeline::context_ablation_arms(quick_stage(1));
    arms.resize(2);
    arms[1].use_pretraining = false;
    auto rows = pipeline::run_ablation(w.corpus, pre, arms, &w.cache, {8, 1, 0});
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[1].reports[0].label, arms[1].label);
    EXPECT_EQ(rows[0].reports[1].gallery_size, 8);
}

TEST(Ablation, IdenticalArmsGiveIdenticalReports) {
    World w;
    StageConfig s1 = quick_stage(1);
    s1.stage = Stage::Vslp;
    auto pre = pipeline::train_stage1(w.corpus, s1, testing::toy_model_config());
    auto arms = pipeline::context_ablation_arms(quick_stage(2));
    arms = {arms[4], arms[4]};
    auto rows = pipeline::run_ablation(w.corpus, pre, arms, &w.cache, {8, 2, 3});
    for (int d = 0; d < 2; ++d) {
        EXPECT_EQ(eval::to_json(rows[0].reports[d]).dump(), eval::to_json(rows[1].reports[d]).dump());
    }
}

TEST(Evaluate, ReportsBothDirections) {
    World w;
    auto model = pipeline::restore_model(pipeline::initial_checkpoint(w.corpus, testing::toy_model_config(), 1));
    auto r = pipeline::evaluate(*model, w.corpus, {}, &w.cache, {8, 1, 0});
    EXPECT_EQ(r[0].direction, eval::Direction::ImageToRecipe);
    EXPECT_EQ(r[1].direction, eval::Direction::RecipeToImage);
    EXPECT_THROW(pipeline::evaluate(*model, w.corpus, {}, nullptr, {8, 1, 0}), std::invalid_argument);
}

}  // namespace
}  // namespace cmr
