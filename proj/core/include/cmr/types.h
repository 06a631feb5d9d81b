#pragma once

#include <Eigen/Dense>

#include <functional>
#include <string>
#include <vector>

namespace cmr {

/// Vector in the shared image/text latent space.
using EmbeddingVector = Eigen::VectorXd;

/// RGB image, row-major HxWx3, values in [0, 1].
struct Image {
    std::string id;
    int height = 0;
    int width = 0;
    std::vector<double> pixels;

    double& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    double at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    bool operator==(const Image&) const = default;
};

Image make_image(std::string id, int height, int width, double fill = 0.0);

/// Title (global), local entities (ingredient-like), and event sentences.
struct StructuredDocument {
    std::string title;
    std::vector<std::string> local_entities;
    std::vector<std::string> event;

    bool operator==(const StructuredDocument&) const = default;
};

/// Throws std::invalid_argument naming the broken invariant. Empty entity
/// classes are allowed unless `require_title` is set.
void validate_document(const StructuredDocument& doc, bool require_title = true);

using TextEmbedFn = std::function<EmbeddingVector(const std::string&)>;

struct ImageEncoderHandle {
    std::function<EmbeddingVector(const Image&)> encode;
    int embed_dim = 0;
};

}  // namespace cmr
