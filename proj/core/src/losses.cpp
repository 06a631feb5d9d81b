#include "cmr/losses.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cmr::losses {

double margin_at(int epoch, const MarginSchedule& schedule) {
    if (epoch < 0) throw std::invalid_argument("margin_at: negative epoch");
    return std::min(schedule.cap, schedule.start + schedule.increment * static_cast<double>(epoch));
}

double cosine_distance(const EmbeddingVector& a, const EmbeddingVector& b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine_distance: dimension mismatch");
    return 1.0 - a.dot(b) / (a.norm() * b.norm());
}

double triplet_loss(const EmbeddingVector& anchor, const EmbeddingVector& positive, const EmbeddingVector& negative,
                    double alpha) {
    if (anchor.size() != positive.size() || anchor.size() != negative.size()) {
        throw std::invalid_argument("triplet_loss: dimension mismatch");
    }
    return std::max(0.0, cosine_distance(anchor, positive) + alpha - cosine_distance(anchor, negative));
}

Var itc_batch_loss(const Var& text, const Var& image, double alpha, const std::vector<int>* labels, ItcStats* stats) {
    const Eigen::Index b = text.rows();
    if (b < 2) throw std::invalid_argument("itc_batch_loss: need at least two pairs");
    if (image.rows() != b || image.cols() != text.cols()) {
        throw std::invalid_argument("itc_batch_loss: text/image shape mismatch");
    }
    if (labels && static_cast<Eigen::Index>(labels->size()) != b) {
        throw std::invalid_argument("itc_batch_loss: label count mismatch");
    }

    // s(i, j) = t_i . v_j ; d = 1 - s, so each hinge is [s_neg - s_pos + alpha]_+.
    Matrix s = text.value() * image.value().transpose();
    auto same = [&](Eigen::Index i, Eigen::Index j) { return labels && (*labels)[i] == (*labels)[j]; };

    Matrix g_inst = Matrix::Zero(b, b);
    Matrix g_sem = Matrix::Zero(b, b);
    double sum_inst = 0.0, sum_sem = 0.0;
    int n_inst = 0, n_sem = 0;

    auto hinge = [&](double pos, double neg, Eigen::Index pi, Eigen::Index pj, Eigen::Index ni, Eigen::Index nj,
                     Matrix& g, double& acc, int& count) {
        double l = neg - pos + alpha;
        if (l > 0.0) {
            acc += l;
            ++count;
            g(pi, pj) -= 1.0;
            g(ni, nj) += 1.0;
        }
    };

    for (Eigen::Index i = 0; i < b; ++i) {
        for (Eigen::Index j = 0; j < b; ++j) {
            if (j == i) continue;
            hinge(s(i, i), s(i, j), i, i, i, j, g_inst, sum_inst, n_inst);  // text anchor, image negative
            hinge(s(i, i), s(j, i), i, i, j, i, g_inst, sum_inst, n_inst);  // image anchor, text negative
        }
    }
    if (labels) {
        for (Eigen::Index a = 0; a < b; ++a) {
            for (Eigen::Index p = 0; p < b; ++p) {
                if (p == a || !same(a, p)) continue;
                for (Eigen::Index n = 0; n < b; ++n) {
                    if (same(a, n)) continue;
                    hinge(s(a, p), s(a, n), a, p, a, n, g_sem, sum_sem, n_sem);
                    hinge(s(p, a), s(n, a), p, a, n, a, g_sem, sum_sem, n_sem);
                }
            }
        }
    }

    double inst = n_inst > 0 ? sum_inst / n_inst : 0.0;
    double sem = n_sem > 0 ? sum_sem / n_sem : 0.0;
    if (stats) *stats = {n_inst, n_sem, inst, sem};

    Matrix g = Matrix::Zero(b, b);
    if (n_inst > 0) g += g_inst / n_inst;
    if (n_sem > 0) g += g_sem / n_sem;

    Matrix out(1, 1);
    out(0, 0) = inst + sem;
    return ag::make_op(std::move(out), {text, image}, [text, image, g](ag::Node& self) {
        const double up = self.grad(0, 0);
        if (text.requires_grad()) text.node()->accumulate(up * g * image.value());
        if (image.requires_grad()) image.node()->accumulate(up * g.transpose() * text.value());
    });
}

double itm_loss(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.empty() || scores.size() != labels.size()) {
        throw std::invalid_argument("itm_loss: need equal-length, non-empty scores and labels");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        double s = scores[i];
        if (!(s > 0.0 && s < 1.0)) throw std::invalid_argument("itm_loss: score outside (0, 1)");
        if (labels[i] != 0 && labels[i] != 1) throw std::invalid_argument("itm_loss: label must be 0 or 1");
        acc += -(labels[i] * std::log(s) + (1 - labels[i]) * std::log(1.0 - s));
    }
    return acc / static_cast<double>(scores.size());
}

Var itm_loss_from_logits(const Var& logits, const std::vector<int>& labels) {
    const Eigen::Index n = logits.rows();
    if (n == 0 || logits.cols() != 1 || static_cast<Eigen::Index>(labels.size()) != n) {
        throw std::invalid_argument("itm_loss_from_logits: expected n x 1 logits and n labels");
    }
    // -[y log s + (1-y) log(1-s)] = softplus(z) - y z
    double acc = 0.0;
    Matrix grad(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        double z = logits.value()(i, 0);
        double y = labels[static_cast<std::size_t>(i)];
        double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
        acc += softplus - y * z;
        double sig = 1.0 / (1.0 + std::exp(-z));
        grad(i, 0) = (sig - y) / static_cast<double>(n);
    }
    Matrix out(1, 1);
    out(0, 0) = acc / static_cast<double>(n);
    return ag::make_op(std::move(out), {logits}, [logits, grad](ag::Node& self) {
        logits.node()->accumulate(grad * self.grad(0, 0));
    });
}

std::vector<ItmPair> itm_negatives(int batch_size, nn::Rng& rng) {
    if (batch_size < 2) throw std::invalid_argument("itm_negatives: need at least two pairs");
    std::vector<ItmPair> out;
    out.reserve(static_cast<std::size_t>(2 * batch_size));
    std::uniform_int_distribution<int> pick(0, batch_size - 2);
    for (int i = 0; i < batch_size; ++i) {
        out.push_back({i, i, 1});
        int j = pick(rng);
        if (j >= i) ++j;  // skip the matching partner
        out.push_back({i, j, 0});
    }
    return out;
}

double total_loss(double itc, double itm, double lambda) { return itc + lambda * itm; }

Var total_loss(const Var& itc, const Var& itm, double lambda) {
    if (lambda == 0.0 || !itm.defined()) return itc;
    return ag::add(itc, ag::scale(itm, lambda));
}

ItmHead::ItmHead(nn::ParameterStore& store, int text_dim, int image_dim, int d_model, int heads, int ffn_dim,
                 nn::Rng& rng)
    : text_in_(store, "itm.text_in", kGroup, text_dim, d_model, rng),
      image_in_(store, "itm.image_in", kGroup, image_dim, d_model, rng),
      cls_(store.add("itm.cls", kGroup, nn::normal_init(1, d_model, 0.5, rng))),
      fusion_(store, "itm.fusion", kGroup, d_model, heads, ffn_dim, rng),
      norm_(store, "itm.norm", kGroup, d_model),
      scorer_(store, "itm.scorer", kGroup, d_model, 1, rng) {}

Var ItmHead::logit(const Var& text_tokens, const Var& image_tokens) const {
    std::vector<Var> parts = {cls_, text_in_(text_tokens), image_in_(image_tokens)};
    Var x = fusion_(ag::concat_rows(parts));
    return scorer_(norm_(ag::slice_rows(x, 0, 1)));
}

double ItmHead::score(const Var& text_tokens, const Var& image_tokens) const {
    double z = logit(text_tokens, image_tokens).scalar();
    return 1.0 / (1.0 + std::exp(-z));
}

}  // namespace cmr::losses
