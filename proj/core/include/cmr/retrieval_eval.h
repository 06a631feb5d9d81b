#pragma once

#include "cmr/types.h"

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include <array>
#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <vector>

namespace cmr::eval {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Direction { ImageToRecipe, RecipeToImage };
const char* direction_name(Direction d);
Direction parse_direction(const std::string& s);

struct RetrievalReport {
    Direction direction = Direction::ImageToRecipe;
    double medr = 0.0;
    double r1 = 0.0;
    double r5 = 0.0;
    double r10 = 0.0;
    /// 100 * (r1 + r5 + r10) for this direction; the two directions add up
    /// to the usual RSUM.
    double rsum = 0.0;
    int gallery_size = 0;
    int num_runs = 0;
    std::uint64_t seed = 0;
    std::vector<std::string> dropped_entities;
    /// Free-form arm name used when tabulating.
    std::string label;
};

nlohmann::json to_json(const RetrievalReport& r);
RetrievalReport report_from_json(const nlohmann::json& j);

/// 1-based rank of gallery item i in row i, highest score first. Items tied
/// with the truth count ahead of it. Throws for a non-square matrix.
std::vector<int> rank_of_truth(const Matrix& scores);

struct Metrics {
    double medr = 0.0;
    double r1 = 0.0;
    double r5 = 0.0;
    double r10 = 0.0;
};

/// Median rank (mean of the middle two for even counts) and R@{1,5,10}.
Metrics compute_metrics(const std::vector<int>& ranks);

struct ProtocolConfig {
    int gallery_size = 1000;
    int num_runs = 10;
    std::uint64_t seed = 0;
};

/// Default run counts: 10 for a 1k gallery, 5 for 10k.
int default_runs(int gallery_size);

/// Averages metrics over `num_runs` galleries sampled uniformly without
/// replacement (run r uses seed + r). Both directions share each gallery.
std::array<RetrievalReport, 2> evaluate_protocol(const Matrix& text_embs, const Matrix& image_embs,
                                                 const ProtocolConfig& config);

enum class Entity { Title, Ingredients, Instructions };
const char* entity_name(Entity e);
Entity parse_entity(const std::string& s);

/// Copy of `doc` with the given entity classes emptied.
StructuredDocument drop_entities(const StructuredDocument& doc, const std::set<Entity>& drop);

using DocumentEncoder = std::function<EmbeddingVector(const StructuredDocument&)>;

/// Re-encodes every document with `drop` removed and runs the protocol
/// against fixed image embeddings. Dropping all three classes throws.
std::array<RetrievalReport, 2> evaluate_missing_entities(const DocumentEncoder& encoder,
                                                         const std::vector<StructuredDocument>& docs,
                                                         const Matrix& image_embs, const std::set<Entity>& drop,
                                                         const ProtocolConfig& config);

struct ProbeSplit {
    double train_fraction = 0.7;
    std::uint64_t seed = 0;
    double l2 = 1e-4;
    int iterations = 500;
    double step = 0.5;
};

/// Multinomial logistic regression on frozen features (standardized with
/// training statistics, full-batch gradient descent). Returns test accuracy.
/// Throws with fewer than two classes.
double linear_probe(const Matrix& features, const std::vector<int>& labels, const ProbeSplit& split = {});

}  // namespace cmr::eval
