#pragma once

// Shared helpers for the unit and acceptance tests: finite-difference
// gradient probes, toy model dimensions and small synthetic corpora.

#include "cmr/autograd.h"
#include "cmr/data.h"
#include "cmr/nn.h"
#include "cmr/pipeline.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace cmr::testing {

struct GradProbe {
    std::string param;
    Eigen::Index index;
    double analytic;
    double numeric;
    double rel_error;
};

/// Compares the backprop gradient of `loss` with central differences at
/// `probes` random entries drawn from parameters whose analytic gradient
/// magnitude is at least `min_grad`. `loss` must be deterministic.
inline std::vector<GradProbe> probe_gradients(nn::ParameterStore& store, const std::function<ag::Var()>& loss,
                                              int probes, std::uint64_t seed,
                                              const std::vector<std::string>& groups = {}, double h = 1e-5,
                                              double min_grad = 1e-6) {
    store.zero_grad();
    ag::Var l = loss();
    ag::backward(l);
    struct Candidate {
        std::string name;
        Eigen::Index index;
        double grad;
    };
    std::vector<Candidate> candidates;
    for (const auto& [name, p] : store.all()) {
        if (!groups.empty() && std::find(groups.begin(), groups.end(), p.group) == groups.end()) continue;
        if (!p.var.node()->has_grad()) continue;
        const auto& g = p.var.grad();
        for (Eigen::Index i = 0; i < g.size(); ++i) {
            if (std::abs(g.data()[i]) >= min_grad) candidates.push_back({name, i, g.data()[i]});
        }
    }
    std::mt19937_64 rng(seed);
    std::shuffle(candidates.begin(), candidates.end(), rng);
    if (static_cast<int>(candidates.size()) > probes) candidates.resize(static_cast<std::size_t>(probes));

    std::vector<GradProbe> out;
    for (const auto& c : candidates) {
        auto& value = store.get(c.name).node()->value;
        const double old = value.data()[c.index];
        value.data()[c.index] = old + h;
        const double up = loss().scalar();
        value.data()[c.index] = old - h;
        const double down = loss().scalar();
        value.data()[c.index] = old;
        const double numeric = (up - down) / (2.0 * h);
        const double rel = std::abs(numeric - c.grad) / std::max({std::abs(numeric), std::abs(c.grad), 1e-12});
        out.push_back({c.name, c.index, c.grad, numeric, rel});
    }
    store.zero_grad();
    return out;
}

inline double max_rel_error(const std::vector<GradProbe>& probes) {
    double m = 0.0;
    for (const auto& p : probes) m = std::max(m, p.rel_error);
    return m;
}

/// Small dimensions for gradient checks and fast training tests.
inline pipeline::ModelConfig toy_model_config() {
    pipeline::ModelConfig c;
    c.text.d_model = 8;
    c.text.heads = 2;
    c.text.ffn_dim = 16;
    c.text.d_emb = 8;
    c.text.max_seq_len = 10;
    c.vision.image_size = 16;
    c.vision.patch_size = 8;
    c.vision.d_model = 8;
    c.vision.heads = 2;
    c.vision.ffn_dim = 16;
    c.vision.d_emb = 8;
    c.vision.context_d_model = 8;
    c.vision.max_context_len = 16;
    c.itm_d_model = 8;
    c.itm_heads = 2;
    c.itm_ffn_dim = 16;
    return c;
}

/// Synthetic corpus with 16x16 images.
inline std::vector<data::RecipePair> small_corpus(int classes = 2, int per_class = 4, std::uint64_t seed = 1) {
    data::SyntheticSpec spec;
    spec.num_classes = classes;
    spec.pairs_per_class = per_class;
    spec.image_size = 16;
    spec.seed = seed;
    return data::generate_synthetic_corpus(spec);
}

inline ag::Matrix random_unit_rows(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
    std::normal_distribution<double> g;
    ag::Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
    m.rowwise().normalize();
    return m;
}

}  // namespace cmr::testing
