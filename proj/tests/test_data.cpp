#include "cmr/data.h"
#include "cmr/retrieval_eval.h"
#include "cmr/util.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

namespace cmr {
namespace {

namespace fs = std::filesystem;
using data::RecipePair;

class TempDir {
public:
    explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / ("cmr_test_" + name)) {
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

int ingredient_index(const std::string& name) {
    const auto& cat = data::SyntheticWorld::ingredient_catalog();
    return static_cast<int>(std::find(cat.begin(), cat.end(), name) - cat.begin());
}

TEST(SyntheticCorpus, SizeAndDeterminism) {
    data::SyntheticSpec spec;
    auto a = data::generate_synthetic_corpus(spec);
    ASSERT_EQ(a.size(), 64u);
    EXPECT_EQ(a, data::generate_synthetic_corpus(spec));
    spec.seed = 2;
    EXPECT_NE(a, data::generate_synthetic_corpus(spec));
}

TEST(SyntheticCorpus, DocumentsAreValidAndTitlesNameTheClass) {
    const auto corpus = data::generate_synthetic_corpus({});
    std::set<std::vector<std::string>> ingredient_sets;
    for (const auto& p : corpus) {
        EXPECT_NO_THROW(validate_document(p.doc));
        ASSERT_TRUE(p.class_id.has_value());
        const auto& dish = data::SyntheticWorld::class_catalog()[static_cast<std::size_t>(*p.class_id)];
        EXPECT_NE(p.doc.title.find(dish), std::string::npos);
        for (const auto& ing : p.doc.local_entities) {
            bool mentioned = false;
            for (const auto& s : p.doc.event) mentioned |= s.find(ing) != std::string::npos;
            EXPECT_TRUE(mentioned) << ing;
        }
        ingredient_sets.insert(p.doc.local_entities);
        EXPECT_EQ(p.image.height, 32);
    }
    EXPECT_EQ(ingredient_sets.size(), corpus.size());
}

TEST(SyntheticCorpus, SameClassSharesHalfTheIngredients) {
    const auto corpus = data::generate_synthetic_corpus({});
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        for (std::size_t j = i + 1; j < corpus.size(); ++j) {
            if (corpus[i].class_id != corpus[j].class_id) continue;
            const auto& a = corpus[i].doc.local_entities;
            const auto& b = corpus[j].doc.local_entities;
            const auto shared = std::count_if(a.begin(), a.end(),
                                              [&](const auto& x) { return std::find(b.begin(), b.end(), x) != b.end(); });
            EXPECT_GE(2 * shared, static_cast<long>(std::max(a.size(), b.size())));
        }
    }
}

TEST(SyntheticCorpus, SameClassImagesAgreeOutsideIngredientCells) {
    const auto corpus = data::generate_synthetic_corpus({});
    data::SyntheticWorld world(32);
    const int cell = 32 / data::SyntheticWorld::kGrid;
    const auto& a = corpus[0];
    for (const auto& b : corpus) {
        if (b.class_id != a.class_id || &b == &a) continue;
        std::set<int> used;
        for (const auto* p : {&a, &b}) {
            for (const auto& ing : p->doc.local_entities) used.insert(world.ingredient_cell(ingredient_index(ing)));
        }
        for (int y = 0; y < 32; ++y) {
            for (int x = 0; x < 32; ++x) {
                if (used.count((y / cell) * data::SyntheticWorld::kGrid + x / cell)) continue;
                for (int c = 0; c < 3; ++c) ASSERT_EQ(a.image.at(y, x, c), b.image.at(y, x, c));
            }
        }
    }
}

TEST(SyntheticCorpus, ZeroClassesThrows) {
    data::SyntheticSpec spec;
    spec.num_classes = 0;
    EXPECT_THROW(data::generate_synthetic_corpus(spec), std::invalid_argument);
    spec.num_classes = 100;
    EXPECT_THROW(data::generate_synthetic_corpus(spec), std::invalid_argument);
}

TEST(SyntheticCorpus, PixelMeansBeatChanceOnALinearProbe) {
    data::SyntheticSpec spec;
    spec.pairs_per_class = 32;
    spec.noise_level = 0.05;
    const auto corpus = data::generate_synthetic_corpus(spec);
    eval::Matrix features(static_cast<Eigen::Index>(corpus.size()), 3);
    std::vector<int> labels;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& img = corpus[i].image;
        for (int c = 0; c < 3; ++c) {
            double s = 0.0;
            for (int y = 0; y < img.height; ++y) {
                for (int x = 0; x < img.width; ++x) s += img.at(y, x, c);
            }
            features(static_cast<Eigen::Index>(i), c) = s / (img.height * img.width);
        }
        labels.push_back(*corpus[i].class_id);
    }
    EXPECT_GT(eval::linear_probe(features, labels), 0.5);
}

TEST(CaptionCorpus, CaptionsMentionDish) {
    const auto records = data::generate_caption_corpus({});
    ASSERT_EQ(records.size(), 64u);
    std::set<std::string> ids;
    for (const auto& r : records) {
        EXPECT_NO_THROW(ste::validate_caption(r.caption));
        ids.insert(r.caption.image_id);
        const auto lower = util::to_lower(r.caption.text);
        bool dish = false;
        for (const auto& d : data::SyntheticWorld::class_catalog()) dish |= lower.find(d) != std::string::npos;
        EXPECT_TRUE(dish) << r.caption.text;
    }
    EXPECT_EQ(ids.size(), records.size());
}

TEST(Npy, RoundTripIsExact) {
    TempDir dir("npy");
    const auto img = data::generate_synthetic_corpus({}).front().image;
    data::save_npy(dir.path() / "a.npy", img);
    EXPECT_EQ(data::load_npy(dir.path() / "a.npy", img.id), img);
    write_file(dir.path() / "bad.npy", "not an array");
    EXPECT_THROW(data::load_npy(dir.path() / "bad.npy"), std::runtime_error);
}

TEST(LoadCorpus, StructuredRoundTrip) {
    TempDir dir("structured");
    data::SyntheticSpec spec;
    spec.pairs_per_class = 3;
    auto corpus = data::generate_synthetic_corpus(spec);
    data::save_structured_corpus(dir.path() / "corpus.jsonl", corpus);
    auto ds = data::load_corpus(dir.path() / "corpus.jsonl", data::CorpusFormat::StructuredJsonl);
    EXPECT_TRUE(ds.warnings.empty());
    data::load_images(ds.pairs, dir.path());
    EXPECT_EQ(ds.pairs, corpus);
}

TEST(LoadCorpus, CaptionRoundTrip) {
    TempDir dir("captions");
    data::SyntheticSpec spec;
    spec.pairs_per_class = 2;
    auto records = data::generate_caption_corpus(spec);
    data::save_caption_corpus(dir.path() / "captions.jsonl", records);
    auto ds = data::load_corpus(dir.path() / "captions.jsonl", data::CorpusFormat::CaptionJsonl);
    data::load_images(ds.captions, dir.path());
    EXPECT_EQ(ds.captions, records);
}

TEST(LoadCorpus, EmptyFileWarns) {
    TempDir dir("empty");
    write_file(dir.path() / "e.jsonl", "");
    auto ds = data::load_corpus(dir.path() / "e.jsonl", data::CorpusFormat::StructuredJsonl);
    EXPECT_TRUE(ds.pairs.empty());
    EXPECT_EQ(ds.warnings.size(), 1u);
}

TEST(LoadCorpus, MissingFieldNamesLine) {
    TempDir dir("missing");
    write_file(dir.path() / "c.jsonl",
               R"({"image_id":"a","image_path":"a.npy","title":"t","ingredients":["x"],"instructions":["y"]})"
               "\n"
               R"({"image_id":"b","image_path":"b.npy","title":"t","instructions":["y"]})"
               "\n");
    try {
        data::load_corpus(dir.path() / "c.jsonl", data::CorpusFormat::StructuredJsonl);
        FAIL() << "expected CorpusError";
    } catch (const data::CorpusError& e) {
        EXPECT_EQ(e.line(), 2u);
        EXPECT_NE(std::string(e.what()).find("ingredients"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos);
    }
}

TEST(LoadCorpus, RejectsMalformedLines) {
    TempDir dir("malformed");
    const auto path = dir.path() / "c.jsonl";
    write_file(path, "{not json}\n");
    EXPECT_THROW(data::load_corpus(path, data::CorpusFormat::CaptionJsonl), data::CorpusError);
    write_file(path, R"({"image_id":"a","image_path":"a.npy","caption":"   "})");
    EXPECT_THROW(data::load_corpus(path, data::CorpusFormat::CaptionJsonl), data::CorpusError);
    write_file(path, R"({"image_id":"a","image_path":"a.npy","caption":"dog"})"
                     "\n"
                     R"({"image_id":"a","image_path":"b.npy","caption":"cat"})");
    EXPECT_THROW(data::load_corpus(path, data::CorpusFormat::CaptionJsonl), data::CorpusError);
    write_file(path, R"({"image_id":"a","image_path":"a.npy","title":"t","ingredients":"x","instructions":[]})");
    EXPECT_THROW(data::load_corpus(path, data::CorpusFormat::StructuredJsonl), data::CorpusError);
    EXPECT_THROW(data::load_corpus(dir.path() / "absent.jsonl", data::CorpusFormat::CaptionJsonl),
                 std::runtime_error);
}

TEST(SplitCorpus, AllTrain) {
    const auto corpus = data::generate_synthetic_corpus({});
    auto s = data::split_corpus(corpus, {1.0, 0.0, 0.0}, 1);
    EXPECT_EQ(s.train.size(), corpus.size());
    EXPECT_TRUE(s.val.empty());
    EXPECT_TRUE(s.test.empty());
}

TEST(SplitCorpus, SeededDisjointAndStratified) {
    const auto corpus = data::generate_synthetic_corpus({});
    auto a = data::split_corpus(corpus, {0.7, 0.15, 0.15}, 3);
    auto b = data::split_corpus(corpus, {0.7, 0.15, 0.15}, 3);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.test, b.test);
    std::set<std::string> ids;
    for (const auto* part : {&a.train, &a.val, &a.test}) {
        for (const auto& p : *part) EXPECT_TRUE(ids.insert(p.image_id).second);
    }
    EXPECT_EQ(ids.size(), corpus.size());
    std::map<int, int> per_class;
    for (const auto& p : a.train) ++per_class[*p.class_id];
    for (const auto& [cls, n] : per_class) EXPECT_LE(std::abs(n - 0.7 * 16), 1.0) << cls;
}

TEST(SplitCorpus, InvalidFractionsThrow) {
    const auto corpus = data::generate_synthetic_corpus({});
    EXPECT_THROW(data::split_corpus(corpus, {1.2, -0.2, 0.0}, 1), std::invalid_argument);
    EXPECT_THROW(data::split_corpus(corpus, {0.5, 0.2, 0.2}, 1), std::invalid_argument);
}

}  // namespace
}  // namespace cmr
