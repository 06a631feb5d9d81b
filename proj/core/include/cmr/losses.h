#pragma once

#include "cmr/nn.h"
#include "cmr/types.h"

#include <optional>
#include <vector>

namespace cmr::losses {

using ag::Matrix;
using ag::Var;

struct MarginSchedule {
    double start = 0.05;
    double increment = 0.005;
    double cap = 0.3;
};

/// min(cap, start + increment * epoch)
double margin_at(int epoch, const MarginSchedule& schedule = {});

/// 1 - cos(a, b)
double cosine_distance(const EmbeddingVector& a, const EmbeddingVector& b);

/// [d(a, p) + alpha - d(a, n)]_+ with cosine distance.
double triplet_loss(const EmbeddingVector& anchor, const EmbeddingVector& positive, const EmbeddingVector& negative,
                    double alpha);

struct ItcStats {
    int active_instance = 0;
    int active_semantic = 0;
    double instance = 0.0;
    double semantic = 0.0;
};

/// Bidirectional hinge triplet loss over in-batch negatives on unit-norm rows
/// (cosine = dot product). Row i of `text` and `image` is a matching pair;
/// every other row of the opposite modality is a negative. The summed loss
/// is divided by the number of active (strictly positive) triplets, and is 0
/// when none is active.
///
/// With labels a semantic term is added: anchor i, positive p != i with the
/// same label, negative n with a different label, normalized by its own
/// active count. Instance negatives are unaffected by labels. Throws for
/// fewer than two rows.
Var itc_batch_loss(const Var& text, const Var& image, double alpha, const std::vector<int>* labels = nullptr,
                   ItcStats* stats = nullptr);

/// Mean binary cross-entropy; every score must lie strictly inside (0, 1).
double itm_loss(const std::vector<double>& scores, const std::vector<int>& labels);

/// Same quantity from logits (n x 1), in a numerically stable form.
Var itm_loss_from_logits(const Var& logits, const std::vector<int>& labels);

struct ItmPair {
    int text;
    int image;
    int label;  // 1 matched, 0 mismatched
};

/// One positive and one uniformly drawn in-batch negative per example.
std::vector<ItmPair> itm_negatives(int batch_size, nn::Rng& rng);

/// itc + lambda * itm
double total_loss(double itc, double itm, double lambda);
Var total_loss(const Var& itc, const Var& itm, double lambda);

/// Fusion block over [itm_cls; text tokens; image tokens] followed by a
/// linear scorer. The score is sigmoid(logit).
class ItmHead {
public:
    static constexpr const char* kGroup = "itm";

    ItmHead() = default;
    ItmHead(nn::ParameterStore& store, int text_dim, int image_dim, int d_model, int heads, int ffn_dim,
            nn::Rng& rng);

    Var logit(const Var& text_tokens, const Var& image_tokens) const;
    double score(const Var& text_tokens, const Var& image_tokens) const;

private:
    nn::Linear text_in_;
    nn::Linear image_in_;
    Var cls_;
    nn::TransformerLayer fusion_;
    nn::LayerNorm norm_;
    nn::Linear scorer_;
};

}  // namespace cmr::losses
