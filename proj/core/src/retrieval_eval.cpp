#include "cmr/retrieval_eval.h"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace cmr::eval {

const char* direction_name(Direction d) {
    return d == Direction::ImageToRecipe ? "image-to-recipe" : "recipe-to-image";
}

Direction parse_direction(const std::string& s) {
    if (s == "image-to-recipe") return Direction::ImageToRecipe;
    if (s == "recipe-to-image") return Direction::RecipeToImage;
    throw std::invalid_argument("unknown direction '" + s + "'");
}

nlohmann::json to_json(const RetrievalReport& r) {
    nlohmann::json j;
    j["direction"] = direction_name(r.direction);
    j["gallery_size"] = r.gallery_size;
    j["num_runs"] = r.num_runs;
    j["seed"] = r.seed;
    j["medR"] = r.medr;
    j["r1"] = r.r1;
    j["r5"] = r.r5;
    j["r10"] = r.r10;
    j["rsum"] = r.rsum;
    j["dropped_entities"] = r.dropped_entities;
    if (!r.label.empty()) j["label"] = r.label;
    return j;
}

RetrievalReport report_from_json(const nlohmann::json& j) {
    RetrievalReport r;
    r.direction = parse_direction(j.at("direction").get<std::string>());
    r.gallery_size = j.at("gallery_size").get<int>();
    r.num_runs = j.at("num_runs").get<int>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.medr = j.at("medR").get<double>();
    r.r1 = j.at("r1").get<double>();
    r.r5 = j.at("r5").get<double>();
    r.r10 = j.at("r10").get<double>();
    r.rsum = j.at("rsum").get<double>();
    r.dropped_entities = j.value("dropped_entities", std::vector<std::string>{});
    r.label = j.value("label", std::string{});
    return r;
}

std::vector<int> rank_of_truth(const Matrix& scores) {
    if (scores.rows() != scores.cols()) throw std::invalid_argument("rank_of_truth: score matrix must be square");
    std::vector<int> ranks(static_cast<std::size_t>(scores.rows()));
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        const double truth = scores(i, i);
        int ahead = 0;
        for (Eigen::Index j = 0; j < scores.cols(); ++j) {
            if (j != i && scores(i, j) >= truth) ++ahead;
        }
        ranks[static_cast<std::size_t>(i)] = ahead + 1;
    }
    return ranks;
}

Metrics compute_metrics(const std::vector<int>& ranks) {
    if (ranks.empty()) throw std::invalid_argument("compute_metrics: no ranks");
    std::vector<int> sorted = ranks;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    Metrics m;
    m.medr = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    auto recall = [&](int k) {
        return static_cast<double>(std::count_if(sorted.begin(), sorted.end(), [k](int r) { return r <= k; })) /
               static_cast<double>(n);
    };
    m.r1 = recall(1);
    m.r5 = recall(5);
    m.r10 = recall(10);
    return m;
}

int default_runs(int gallery_size) { return gallery_size >= 10000 ? 5 : 10; }

std::array<RetrievalReport, 2> evaluate_protocol(const Matrix& text_embs, const Matrix& image_embs,
                                                 const ProtocolConfig& config) {
    const Eigen::Index n = text_embs.rows();
    if (image_embs.rows() != n || image_embs.cols() != text_embs.cols()) {
        throw std::invalid_argument("evaluate_protocol: text/image embedding shapes differ");
    }
    if (config.gallery_size < 1 || config.gallery_size > n) {
        throw std::invalid_argument("evaluate_protocol: need at least " + std::to_string(config.gallery_size) +
                                    " pairs, have " + std::to_string(n));
    }
    if (config.num_runs < 1) throw std::invalid_argument("evaluate_protocol: num_runs must be positive");

    std::array<Metrics, 2> acc{};
    std::vector<int> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), 0);
    for (int run = 0; run < config.num_runs; ++run) {
        std::vector<int> pick;
        if (config.gallery_size == n) {
            pick = all;
        } else {
            std::mt19937_64 rng(config.seed + static_cast<std::uint64_t>(run));
            std::sample(all.begin(), all.end(), std::back_inserter(pick), config.gallery_size, rng);
        }
        Matrix t(config.gallery_size, text_embs.cols());
        Matrix v(config.gallery_size, image_embs.cols());
        for (int i = 0; i < config.gallery_size; ++i) {
            t.row(i) = text_embs.row(pick[static_cast<std::size_t>(i)]);
            v.row(i) = image_embs.row(pick[static_cast<std::size_t>(i)]);
        }
        Matrix i2r = v * t.transpose();
        Matrix r2i = i2r.transpose();
        const std::array<Metrics, 2> m = {compute_metrics(rank_of_truth(i2r)), compute_metrics(rank_of_truth(r2i))};
        for (int d = 0; d < 2; ++d) {
            acc[d].medr += m[d].medr;
            acc[d].r1 += m[d].r1;
            acc[d].r5 += m[d].r5;
            acc[d].r10 += m[d].r10;
        }
    }

    std::array<RetrievalReport, 2> out;
    const double inv = 1.0 / config.num_runs;
    for (int d = 0; d < 2; ++d) {
        auto& r = out[d];
        r.direction = d == 0 ? Direction::ImageToRecipe : Direction::RecipeToImage;
        r.medr = acc[d].medr * inv;
        r.r1 = acc[d].r1 * inv;
        r.r5 = acc[d].r5 * inv;
        r.r10 = acc[d].r10 * inv;
        r.rsum = 100.0 * (r.r1 + r.r5 + r.r10);
        r.gallery_size = config.gallery_size;
        r.num_runs = config.num_runs;
        r.seed = config.seed;
    }
    return out;
}

const char* entity_name(Entity e) {
    switch (e) {
        case Entity::Title: return "title";
        case Entity::Ingredients: return "ingredients";
        case Entity::Instructions: return "instructions";
    }
    return "?";
}

Entity parse_entity(const std::string& s) {
    if (s == "title" || s == "ttl") return Entity::Title;
    if (s == "ingredients" || s == "ing") return Entity::Ingredients;
    if (s == "instructions" || s == "ins") return Entity::Instructions;
    throw std::invalid_argument("unknown entity class '" + s + "'");
}

StructuredDocument drop_entities(const StructuredDocument& doc, const std::set<Entity>& drop) {
    StructuredDocument out = doc;
    if (drop.count(Entity::Title)) out.title.clear();
    if (drop.count(Entity::Ingredients)) out.local_entities.clear();
    if (drop.count(Entity::Instructions)) out.event.clear();
    return out;
}

std::array<RetrievalReport, 2> evaluate_missing_entities(const DocumentEncoder& encoder,
                                                         const std::vector<StructuredDocument>& docs,
                                                         const Matrix& image_embs, const std::set<Entity>& drop,
                                                         const ProtocolConfig& config) {
    if (drop.size() >= 3) throw std::invalid_argument("evaluate_missing_entities: cannot drop every entity class");
    if (docs.empty()) throw std::invalid_argument("evaluate_missing_entities: no documents");
    Matrix text;
    for (std::size_t i = 0; i < docs.size(); ++i) {
        EmbeddingVector e = encoder(drop_entities(docs[i], drop));
        if (i == 0) text.resize(static_cast<Eigen::Index>(docs.size()), e.size());
        text.row(static_cast<Eigen::Index>(i)) = e.transpose();
    }
    auto reports = evaluate_protocol(text, image_embs, config);
    std::vector<std::string> names;
    for (auto e : drop) names.emplace_back(entity_name(e));
    for (auto& r : reports) r.dropped_entities = names;
    return reports;
}

double linear_probe(const Matrix& features, const std::vector<int>& labels, const ProbeSplit& split) {
    const Eigen::Index n = features.rows();
    if (static_cast<Eigen::Index>(labels.size()) != n) throw std::invalid_argument("linear_probe: label count mismatch");
    std::set<int> classes(labels.begin(), labels.end());
    if (classes.size() < 2) throw std::invalid_argument("linear_probe: need at least two classes");
    if (*classes.begin() < 0) throw std::invalid_argument("linear_probe: labels must be non-negative");
    const int num_classes = *classes.rbegin() + 1;

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(split.seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_train = static_cast<Eigen::Index>(std::llround(split.train_fraction * static_cast<double>(n)));
    if (n_train < 1 || n_train >= n) throw std::invalid_argument("linear_probe: split leaves an empty side");

    const Eigen::Index d = features.cols();
    Matrix xtr(n_train, d + 1), xte(n - n_train, d + 1);
    std::vector<int> ytr, yte;
    for (Eigen::Index i = 0; i < n; ++i) {
        const int src = order[static_cast<std::size_t>(i)];
        if (i < n_train) {
            xtr.row(i).head(d) = features.row(src);
            ytr.push_back(labels[static_cast<std::size_t>(src)]);
        } else {
            xte.row(i - n_train).head(d) = features.row(src);
            yte.push_back(labels[static_cast<std::size_t>(src)]);
        }
    }
    Eigen::RowVectorXd mean = xtr.leftCols(d).colwise().mean();
    Eigen::RowVectorXd sd =
        ((xtr.leftCols(d).rowwise() - mean).array().square().colwise().mean()).sqrt().max(1e-12).matrix();
    auto standardize = [&](Matrix& x) {
        x.leftCols(d) = ((x.leftCols(d).rowwise() - mean).array().rowwise() / sd.array()).matrix();
        x.col(d).setOnes();
    };
    standardize(xtr);
    standardize(xte);

    Matrix y = Matrix::Zero(n_train, num_classes);
    for (Eigen::Index i = 0; i < n_train; ++i) y(i, ytr[static_cast<std::size_t>(i)]) = 1.0;

    Matrix w = Matrix::Zero(d + 1, num_classes);
    for (int it = 0; it < split.iterations; ++it) {
        Matrix z = xtr * w;
        for (Eigen::Index i = 0; i < z.rows(); ++i) {
            double mx = z.row(i).maxCoeff();
            z.row(i) = (z.row(i).array() - mx).exp().matrix();
            z.row(i) /= z.row(i).sum();
        }
        Matrix grad = xtr.transpose() * (z - y) / static_cast<double>(n_train);
        grad.topRows(d) += split.l2 * w.topRows(d);
        w -= split.step * grad;
    }

    Matrix scores = xte * w;
    int correct = 0;
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        Eigen::Index arg = 0;
        scores.row(i).maxCoeff(&arg);
        correct += (arg == yte[static_cast<std::size_t>(i)]);
    }
    return static_cast<double>(correct) / static_cast<double>(scores.rows());
}

}  // namespace cmr::eval
