#include "cmr/losses.h"

#include "support.h"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace cmr {
namespace {

using ag::Matrix;

EmbeddingVector unit(std::initializer_list<double> v) {
    EmbeddingVector e(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) e(i++) = x;
    return e.normalized();
}

// Unit vector at angle theta in the plane; cosine distance to e1 is 1 - cos(theta).
EmbeddingVector at_distance(double d) {
    const double c = 1.0 - d;
    return unit({c, std::sqrt(1.0 - c * c)});
}

double itc_oracle(const Matrix& t, const Matrix& v, double alpha, const std::vector<int>* labels) {
    const auto b = t.rows();
    double inst = 0.0, sem = 0.0;
    int n_inst = 0, n_sem = 0;
    auto d = [](const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) { return 1.0 - a.dot(b); };
    for (Eigen::Index a = 0; a < b; ++a) {
        for (Eigen::Index n = 0; n < b; ++n) {
            if (n == a) continue;
            const double l1 = d(t.row(a), v.row(a)) + alpha - d(t.row(a), v.row(n));
            const double l2 = d(v.row(a), t.row(a)) + alpha - d(v.row(a), t.row(n));
            if (l1 > 0) inst += l1, ++n_inst;
            if (l2 > 0) inst += l2, ++n_inst;
        }
    }
    if (labels) {
        for (Eigen::Index a = 0; a < b; ++a) {
            for (Eigen::Index p = 0; p < b; ++p) {
                if (p == a || (*labels)[a] != (*labels)[p]) continue;
                for (Eigen::Index n = 0; n < b; ++n) {
                    if ((*labels)[n] == (*labels)[a]) continue;
                    const double l1 = d(t.row(a), v.row(p)) + alpha - d(t.row(a), v.row(n));
                    const double l2 = d(v.row(a), t.row(p)) + alpha - d(v.row(a), t.row(n));
                    if (l1 > 0) sem += l1, ++n_sem;
                    if (l2 > 0) sem += l2, ++n_sem;
                }
            }
        }
    }
    return (n_inst ? inst / n_inst : 0.0) + (n_sem ? sem / n_sem : 0.0);
}

TEST(TripletLoss, InactiveHinge) {
    EXPECT_DOUBLE_EQ(losses::triplet_loss(unit({1, 0}), at_distance(0.1), at_distance(0.5), 0.3), 0.0);
}

TEST(TripletLoss, ActiveHinge) {
    EXPECT_NEAR(losses::triplet_loss(unit({1, 0}), at_distance(0.4), at_distance(0.2), 0.3), 0.5, 1e-12);
}

TEST(TripletLoss, BoundaryIsZero) {
    EXPECT_NEAR(losses::triplet_loss(unit({1, 0}), unit({1, 0}), at_distance(0.3), 0.3), 0.0, 1e-12);
}

TEST(TripletLoss, DimensionMismatchThrows) {
    EXPECT_THROW(losses::triplet_loss(unit({1, 0}), unit({1, 0, 0}), unit({0, 1}), 0.1), std::invalid_argument);
}

TEST(ItcBatchLoss, HandComputedBatch) {
    // t0 = e1, t1 = e2, v0 = (e1 + e2) / sqrt2, v1 = (e1 - e2) / sqrt2, alpha 0.3.
    // Text anchors give 0.3 and 0.3 + sqrt2; image anchors mirror them.
    Matrix t(2, 2), v(2, 2);
    t.row(0) = unit({1, 0}).transpose();
    t.row(1) = unit({0, 1}).transpose();
    v.row(0) = unit({1, 1}).transpose();
    v.row(1) = unit({1, -1}).transpose();
    losses::ItcStats stats;
    const double got = losses::itc_batch_loss(ag::constant(t), ag::constant(v), 0.3, nullptr, &stats).scalar();
    EXPECT_NEAR(got, 0.3 + std::sqrt(2.0) / 2.0, 1e-12);
    EXPECT_EQ(stats.active_instance, 4);
    EXPECT_NEAR(got, itc_oracle(t, v, 0.3, nullptr), 1e-12);
}

TEST(ItcBatchLoss, SeparatedBatchIsZero) {
    Matrix t = Matrix::Identity(4, 4);
    Matrix v = t;
    losses::ItcStats stats;
    EXPECT_EQ(losses::itc_batch_loss(ag::constant(t), ag::constant(v), 0.3, nullptr, &stats).scalar(), 0.0);
    EXPECT_EQ(stats.active_instance, 0);
}

TEST(ItcBatchLoss, SingleRowThrows) {
    Matrix t = Matrix::Ones(1, 3).normalized();
    EXPECT_THROW(losses::itc_batch_loss(ag::constant(t), ag::constant(t), 0.1), std::invalid_argument);
}

TEST(ItcBatchLoss, MatchesEnumerationOracleOnRandomBatches) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const int b = 2 + trial % 7;
        const int d = 2 + trial % 15;
        Matrix t = testing::random_unit_rows(b, d, rng), v = testing::random_unit_rows(b, d, rng);
        const double alpha = 0.05 + 0.25 * (trial % 6) / 5.0;
        EXPECT_NEAR(losses::itc_batch_loss(ag::constant(t), ag::constant(v), alpha).scalar(),
                    itc_oracle(t, v, alpha, nullptr), 1e-6);
        std::vector<int> labels(static_cast<std::size_t>(b));
        for (auto& l : labels) l = static_cast<int>(rng() % 3);
        EXPECT_NEAR(losses::itc_batch_loss(ag::constant(t), ag::constant(v), alpha, &labels).scalar(),
                    itc_oracle(t, v, alpha, &labels), 1e-6);
    }
}

TEST(ItcBatchLoss, SwappingModalitiesLeavesTotalInvariant) {
    std::mt19937_64 rng(3);
    Matrix t = testing::random_unit_rows(6, 5, rng), v = testing::random_unit_rows(6, 5, rng);
    EXPECT_NEAR(losses::itc_batch_loss(ag::constant(t), ag::constant(v), 0.2).scalar(),
                losses::itc_batch_loss(ag::constant(v), ag::constant(t), 0.2).scalar(), 1e-12);
}

TEST(ItcBatchLoss, ZeroExactlyWhenNoTripletActive) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        Matrix t = testing::random_unit_rows(4, 3, rng), v = testing::random_unit_rows(4, 3, rng);
        losses::ItcStats stats;
        const double l = losses::itc_batch_loss(ag::constant(t), ag::constant(v), 0.1, nullptr, &stats).scalar();
        EXPECT_GE(l, 0.0);
        EXPECT_EQ(l == 0.0, stats.active_instance == 0);
    }
}

TEST(ItcBatchLoss, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(8);
    nn::ParameterStore store;
    Matrix t = testing::random_unit_rows(6, 5, rng), v = testing::random_unit_rows(6, 5, rng);
    store.add("t", "x", t);
    store.add("v", "x", v);
    std::vector<int> labels = {0, 0, 1, 1, 2, 2};
    auto f = [&] {
        return losses::itc_batch_loss(ag::l2_normalize_rows(store.get("t")), ag::l2_normalize_rows(store.get("v")),
                                      0.25, &labels);
    };
    auto probes = testing::probe_gradients(store, f, 40, 1);
    ASSERT_GE(probes.size(), 20u);
    EXPECT_LT(testing::max_rel_error(probes), 1e-3);
}

TEST(ItmLoss, HalfProbabilityIsLn2) {
    EXPECT_NEAR(losses::itm_loss({0.5}, {1}), 0.693147, 1e-5);
}

TEST(ItmLoss, ConfidentNegativeApproachesZero) {
    EXPECT_LT(losses::itm_loss({1e-12}, {0}), 1e-9);
}

TEST(ItmLoss, MatchesScalarCrossEntropy) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> s(1 + trial % 9);
        std::vector<int> y(s.size());
        double expect = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            s[i] = u(rng);
            y[i] = static_cast<int>(rng() % 2);
            expect += y[i] ? -std::log(s[i]) : -std::log(1.0 - s[i]);
        }
        expect /= static_cast<double>(s.size());
        EXPECT_NEAR(losses::itm_loss(s, y), expect, 1e-7);
    }
}

TEST(ItmLoss, OutOfRangeScoreThrows) {
    EXPECT_THROW(losses::itm_loss({1.0}, {1}), std::invalid_argument);
    EXPECT_THROW(losses::itm_loss({0.0}, {0}), std::invalid_argument);
    EXPECT_THROW(losses::itm_loss({}, {}), std::invalid_argument);
}

TEST(ItmLoss, LogitFormAgreesWithProbabilities) {
    Matrix z(4, 1);
    z << -2.0, 0.3, 1.7, -0.1;
    std::vector<int> y = {0, 1, 1, 0};
    std::vector<double> s;
    for (int i = 0; i < 4; ++i) s.push_back(1.0 / (1.0 + std::exp(-z(i, 0))));
    EXPECT_NEAR(losses::itm_loss_from_logits(ag::constant(z), y).scalar(), losses::itm_loss(s, y), 1e-12);
}

TEST(ItmLoss, LogitGradientMatchesFiniteDifferences) {
    nn::ParameterStore store;
    std::mt19937_64 rng(4);
    store.add("z", "x", nn::normal_init(30, 1, 2.0, rng));
    std::vector<int> y;
    for (int i = 0; i < 30; ++i) y.push_back(i % 2);
    auto probes = testing::probe_gradients(store, [&] { return losses::itm_loss_from_logits(store.get("z"), y); }, 30, 2);
    ASSERT_GE(probes.size(), 20u);
    EXPECT_LT(testing::max_rel_error(probes), 1e-3);
}

TEST(ItmNegatives, TwoExamplesForceCrossPairs) {
    nn::Rng rng(1);
    auto pairs = losses::itm_negatives(2, rng);
    ASSERT_EQ(pairs.size(), 4u);
    int pos = 0;
    for (const auto& p : pairs) {
        if (p.label == 1) {
            ++pos;
            EXPECT_EQ(p.text, p.image);
        } else {
            EXPECT_EQ(p.text, 1 - p.image);
        }
    }
    EXPECT_EQ(pos, 2);
}

TEST(ItmNegatives, SeededAndMismatched) {
    nn::Rng a(9), b(9);
    auto pa = losses::itm_negatives(8, a);
    auto pb = losses::itm_negatives(8, b);
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        EXPECT_EQ(pa[i].text, pb[i].text);
        EXPECT_EQ(pa[i].image, pb[i].image);
        if (pa[i].label == 0) EXPECT_NE(pa[i].text, pa[i].image);
    }
    nn::Rng r(1);
    for (int trial = 0; trial < 200; ++trial) {
        for (const auto& p : losses::itm_negatives(8, r)) {
            if (p.label == 0) ASSERT_NE(p.text, p.image);
        }
    }
    EXPECT_THROW(losses::itm_negatives(1, r), std::invalid_argument);
}

TEST(TotalLoss, WeightedSum) {
    EXPECT_DOUBLE_EQ(losses::total_loss(0.3, 0.7, 1.0), 1.0);
    EXPECT_DOUBLE_EQ(losses::total_loss(0.3, 0.7, 0.0), 0.3);
}

TEST(MarginSchedule, KnownValues) {
    EXPECT_DOUBLE_EQ(losses::margin_at(0), 0.05);
    EXPECT_NEAR(losses::margin_at(10), 0.10, 1e-12);
    EXPECT_DOUBLE_EQ(losses::margin_at(100), 0.3);
    EXPECT_THROW(losses::margin_at(-1), std::invalid_argument);
}

TEST(MarginSchedule, MonotoneAndCappedFromFifty) {
    for (int e = 1; e < 200; ++e) {
        EXPECT_GE(losses::margin_at(e), losses::margin_at(e - 1));
        EXPECT_LE(losses::margin_at(e), 0.3);
        if (e >= 50) EXPECT_NEAR(losses::margin_at(e), 0.3, 1e-12);
    }
    EXPECT_LT(losses::margin_at(49), 0.3);
}

TEST(ItmHead, ScoreStrictlyInsideUnitInterval) {
    nn::ParameterStore store;
    nn::Rng rng(1);
    losses::ItmHead head(store, 8, 6, 8, 2, 16, rng);
    std::mt19937_64 g(2);
    for (int i = 0; i < 10; ++i) {
        double s = head.score(ag::constant(nn::normal_init(5, 8, 3.0, g)), ag::constant(nn::normal_init(4, 6, 3.0, g)));
        EXPECT_GT(s, 0.0);
        EXPECT_LT(s, 1.0);
    }
}

}  // namespace
}  // namespace cmr
