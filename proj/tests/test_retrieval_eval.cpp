#include "cmr/retrieval_eval.h"

#include "support.h"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <random>

namespace cmr {
namespace {

using eval::Direction;
using eval::Matrix;

std::vector<int> counting_oracle(const Matrix& s) {
    std::vector<int> ranks;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        int r = 1;
        for (Eigen::Index j = 0; j < s.cols(); ++j) {
            if (j != i && s(i, j) >= s(i, i)) ++r;
        }
        ranks.push_back(r);
    }
    return ranks;
}

eval::Metrics metrics_oracle(std::vector<int> ranks) {
    std::sort(ranks.begin(), ranks.end());
    const std::size_t n = ranks.size();
    eval::Metrics m;
    m.medr = n % 2 ? ranks[n / 2] : 0.5 * (ranks[n / 2 - 1] + ranks[n / 2]);
    for (int r : ranks) {
        m.r1 += r <= 1;
        m.r5 += r <= 5;
        m.r10 += r <= 10;
    }
    m.r1 /= static_cast<double>(n);
    m.r5 /= static_cast<double>(n);
    m.r10 /= static_cast<double>(n);
    return m;
}

TEST(RankOfTruth, IdentityGivesRankOne) {
    EXPECT_EQ(eval::rank_of_truth(Matrix::Identity(4, 4)), (std::vector<int>(4, 1)));
}

TEST(RankOfTruth, LowestScoreIsLastRank) {
    Matrix s = Matrix::Ones(5, 5);
    s(0, 0) = -1.0;
    EXPECT_EQ(eval::rank_of_truth(s)[0], 5);
}

TEST(RankOfTruth, TiesArePessimistic) {
    EXPECT_EQ(eval::rank_of_truth(Matrix::Zero(3, 3)), (std::vector<int>{3, 3, 3}));
}

TEST(RankOfTruth, NonSquareThrows) {
    EXPECT_THROW(eval::rank_of_truth(Matrix::Zero(2, 3)), std::invalid_argument);
}

TEST(RankOfTruth, MatchesCountingOracleOnRandomMatrices) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 50);
        Matrix s(n, n);
        for (Eigen::Index i = 0; i < s.size(); ++i) {
            // Coarse values so that ties occur.
            s.data()[i] = trial % 2 ? std::round(u(rng) * 4) / 4 : u(rng);
        }
        const auto ranks = eval::rank_of_truth(s);
        ASSERT_EQ(ranks, counting_oracle(s));
        const auto m = eval::compute_metrics(ranks);
        const auto o = metrics_oracle(ranks);
        EXPECT_EQ(m.medr, o.medr);
        EXPECT_EQ(m.r1, o.r1);
        EXPECT_EQ(m.r5, o.r5);
        EXPECT_EQ(m.r10, o.r10);
    }
}

TEST(ComputeMetrics, KnownValues) {
    auto m = eval::compute_metrics({1, 3, 5});
    EXPECT_DOUBLE_EQ(m.medr, 3.0);
    EXPECT_DOUBLE_EQ(m.r1, 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(m.r5, 1.0);
    m = eval::compute_metrics({1, 1, 1, 1});
    EXPECT_DOUBLE_EQ(m.medr, 1.0);
    EXPECT_DOUBLE_EQ(m.r10, 1.0);
    EXPECT_DOUBLE_EQ(eval::compute_metrics({1, 3, 7, 2, 11}).r5, 0.6);
    EXPECT_DOUBLE_EQ(eval::compute_metrics({2, 4}).medr, 3.0);
    EXPECT_THROW(eval::compute_metrics({}), std::invalid_argument);
}

TEST(EvaluateProtocol, PerfectAlignment) {
    std::mt19937_64 rng(2);
    Matrix e = testing::random_unit_rows(30, 8, rng);
    auto r = eval::evaluate_protocol(e, e, {30, 1, 0});
    for (const auto& rep : r) {
        EXPECT_EQ(rep.medr, 1.0);
        EXPECT_EQ(rep.r1, 1.0);
        EXPECT_EQ(rep.gallery_size, 30);
        EXPECT_NEAR(rep.rsum, 300.0, 1e-9);
    }
    EXPECT_EQ(r[0].direction, Direction::ImageToRecipe);
    EXPECT_EQ(r[1].direction, Direction::RecipeToImage);
}

TEST(EvaluateProtocol, DirectionsRankOppositeModalities) {
    // Both texts are identical, so every image query ties and fails, while
    // text 0 still finds image 0 first.
    Matrix t(2, 2), v(2, 2);
    t << 1, 0, 1, 0;
    v << 1, 0, 0, 1;
    auto r = eval::evaluate_protocol(t, v, {2, 1, 0});
    EXPECT_EQ(r[0].r1, 0.0);
    EXPECT_EQ(r[1].r1, 0.5);
}

TEST(EvaluateProtocol, SeededAndByteReproducible) {
    std::mt19937_64 rng(3);
    Matrix t = testing::random_unit_rows(50, 6, rng), v = testing::random_unit_rows(50, 6, rng);
    auto a = eval::evaluate_protocol(t, v, {20, 4, 9});
    auto b = eval::evaluate_protocol(t, v, {20, 4, 9});
    EXPECT_EQ(eval::to_json(a[0]).dump(), eval::to_json(b[0]).dump());
    EXPECT_EQ(eval::to_json(a[1]).dump(), eval::to_json(b[1]).dump());
    EXPECT_EQ(a[0].num_runs, 4);
    EXPECT_EQ(a[0].seed, 9u);
    for (const auto& rep : a) {
        EXPECT_LE(rep.r1, rep.r5);
        EXPECT_LE(rep.r5, rep.r10);
    }
}

TEST(EvaluateProtocol, InsufficientPairsThrows) {
    Matrix e = Matrix::Identity(5, 5);
    EXPECT_THROW(eval::evaluate_protocol(e, e, {6, 1, 0}), std::invalid_argument);
    EXPECT_THROW(eval::evaluate_protocol(e, Matrix::Identity(4, 5), {4, 1, 0}), std::invalid_argument);
}

TEST(EvaluateProtocol, NullModelRecallMatchesChance) {
    const int n = 100, trials = 50;
    std::mt19937_64 rng(4);
    double r1 = 0, r5 = 0, r10 = 0;
    for (int t = 0; t < trials; ++t) {
        Matrix a = testing::random_unit_rows(n, 16, rng), b = testing::random_unit_rows(n, 16, rng);
        auto r = eval::evaluate_protocol(a, b, {n, 1, static_cast<std::uint64_t>(t)});
        r1 += r[0].r1;
        r5 += r[0].r5;
        r10 += r[0].r10;
    }
    for (auto [mean, k] : {std::pair{r1 / trials, 1}, {r5 / trials, 5}, {r10 / trials, 10}}) {
        const double p = static_cast<double>(k) / n;
        const double sigma = std::sqrt(p * (1 - p) / (n * trials));
        EXPECT_NEAR(mean, p, 3 * sigma) << "k=" << k;
    }
}

TEST(ReportJson, RoundTrip) {
    eval::RetrievalReport r;
    r.direction = Direction::RecipeToImage;
    r.medr = 2.5;
    r.r1 = 0.25;
    r.r5 = 0.5;
    r.r10 = 0.75;
    r.rsum = 150;
    r.gallery_size = 100;
    r.num_runs = 3;
    r.seed = 7;
    r.dropped_entities = {"title"};
    r.label = "x";
    auto back = eval::report_from_json(eval::to_json(r));
    EXPECT_EQ(eval::to_json(back).dump(), eval::to_json(r).dump());
    EXPECT_THROW(eval::parse_direction("sideways"), std::invalid_argument);
}

TEST(DefaultRuns, MatchesProtocol) {
    EXPECT_EQ(eval::default_runs(1000), 10);
    EXPECT_EQ(eval::default_runs(10000), 5);
}

TEST(DropEntities, EmptiesSelectedClasses) {
    StructuredDocument doc{"t", {"a", "b"}, {"x."}};
    auto d = eval::drop_entities(doc, {eval::Entity::Title, eval::Entity::Instructions});
    EXPECT_TRUE(d.title.empty());
    EXPECT_EQ(d.local_entities, doc.local_entities);
    EXPECT_TRUE(d.event.empty());
    EXPECT_EQ(eval::drop_entities(doc, {}), doc);
}

TEST(EvaluateMissingEntities, EmptyDropEqualsStandardEvaluation) {
    std::mt19937_64 rng(5);
    std::vector<StructuredDocument> docs;
    Matrix images = testing::random_unit_rows(12, 4, rng);
    for (int i = 0; i < 12; ++i) docs.push_back({"t" + std::to_string(i), {"i" + std::to_string(i)}, {"e"}});
    eval::DocumentEncoder enc = [&](const StructuredDocument& d) {
        EmbeddingVector v = EmbeddingVector::Zero(4);
        if (!d.title.empty()) v(0) = std::stod(d.title.substr(1));
        if (!d.local_entities.empty()) v(1) = std::stod(d.local_entities[0].substr(1));
        v(2) = 1.0;
        return EmbeddingVector(v.normalized());
    };
    Matrix texts(12, 4);
    for (int i = 0; i < 12; ++i) texts.row(i) = enc(docs[static_cast<std::size_t>(i)]).transpose();
    auto full = eval::evaluate_missing_entities(enc, docs, images, {}, {12, 1, 0});
    auto standard = eval::evaluate_protocol(texts, images, {12, 1, 0});
    EXPECT_EQ(eval::to_json(full[0]).dump(), eval::to_json(standard[0]).dump());
    auto dropped = eval::evaluate_missing_entities(enc, docs, images, {eval::Entity::Title}, {12, 1, 0});
    EXPECT_EQ(dropped[0].dropped_entities, (std::vector<std::string>{"title"}));
    EXPECT_THROW(eval::evaluate_missing_entities(
                     enc, docs, images, {eval::Entity::Title, eval::Entity::Ingredients, eval::Entity::Instructions},
                     {12, 1, 0}),
                 std::invalid_argument);
}

TEST(LinearProbe, SeparableFeaturesAreLearned) {
    Matrix f(40, 2);
    std::vector<int> labels;
    std::mt19937_64 rng(6);
    std::normal_distribution<double> g(0.0, 0.1);
    for (int i = 0; i < 40; ++i) {
        const int y = i % 2;
        f(i, 0) = (y ? 2.0 : -2.0) + g(rng);
        f(i, 1) = g(rng);
        labels.push_back(y);
    }
    EXPECT_DOUBLE_EQ(eval::linear_probe(f, labels), 1.0);
    EXPECT_EQ(eval::linear_probe(f, labels), eval::linear_probe(f, labels));
}

TEST(LinearProbe, ShuffledLabelsNearChance) {
    const int n = 600, classes = 4;
    std::mt19937_64 rng(7);
    Matrix f = testing::random_unit_rows(n, 8, rng);
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng() % classes));
    const double acc = eval::linear_probe(f, labels);
    const double sigma = std::sqrt(0.25 * 0.75 / (0.3 * n));
    EXPECT_NEAR(acc, 0.25, 4 * sigma);
}

TEST(LinearProbe, SingleClassThrows) {
    EXPECT_THROW(eval::linear_probe(Matrix::Ones(4, 2), {0, 0, 0, 0}), std::invalid_argument);
}

}  // namespace
}  // namespace cmr
