#pragma once

#include "cmr/autograd.h"

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace cmr::nn {

using ag::Matrix;
using ag::Var;
using Rng = std::mt19937_64;

struct Parameter {
    std::string group;
    Var var;
};

/// Named, grouped parameter tensors. Iteration order is lexicographic by name,
/// which fixes checkpoint layout and hashing order.
class ParameterStore {
public:
    Var add(const std::string& name, const std::string& group, Matrix init);
    Var get(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    /// Replaces a tensor in place; existing Var handles see the new value.
    void replace_value(const std::string& name, Matrix value);

    void set_group_trainable(const std::string& group, bool trainable);
    bool group_trainable(const std::string& group) const;
    void zero_grad();

    std::vector<std::string> groups() const;
    std::size_t count(const std::string& group) const;
    const std::map<std::string, Parameter>& all() const { return params_; }

private:
    std::map<std::string, Parameter> params_;
};

Matrix normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

struct Linear {
    Var weight;  // in x out
    Var bias;    // 1 x out

    Linear() = default;
    Linear(ParameterStore& store, const std::string& name, const std::string& group,
           Eigen::Index in, Eigen::Index out, Rng& rng);
    Var operator()(const Var& x) const;
};

struct LayerNorm {
    Var gamma;
    Var beta;

    LayerNorm() = default;
    LayerNorm(ParameterStore& store, const std::string& name, const std::string& group, Eigen::Index dim);
    Var operator()(const Var& x) const;
};

struct MultiHeadAttention {
    Linear q, k, v, o;
    int heads = 1;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParameterStore& store, const std::string& name, const std::string& group,
                       Eigen::Index dim, int heads, Rng& rng);
    /// Queries from `query`, keys/values from `memory`; masked keys are ignored.
    Var operator()(const Var& query, const Var& memory,
                   const std::vector<bool>* key_valid = nullptr) const;
};

/// Pre-norm transformer encoder layer.
struct TransformerLayer {
    LayerNorm ln1, ln2;
    MultiHeadAttention attn;
    Linear ff1, ff2;

    TransformerLayer() = default;
    TransformerLayer(ParameterStore& store, const std::string& name, const std::string& group,
                     Eigen::Index dim, int heads, Eigen::Index ffn_dim, Rng& rng);
    Var operator()(const Var& x, const std::vector<bool>* key_valid = nullptr) const;
};

/// Pre-norm decoder-style block: x attends over a separate memory, then a
/// feed-forward step. Both sublayers are residual on x.
struct CrossAttentionLayer {
    LayerNorm ln_q, ln_mem, ln_ff;
    MultiHeadAttention attn;
    Linear ff1, ff2;

    CrossAttentionLayer() = default;
    CrossAttentionLayer(ParameterStore& store, const std::string& name, const std::string& group,
                        Eigen::Index dim, int heads, Eigen::Index ffn_dim, Rng& rng);
    Var operator()(const Var& x, const Var& memory) const;
};

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam over every trainable parameter that received gradient this step.
class Adam {
public:
    explicit Adam(AdamConfig config = {}) : config_(config) {}

    void step(ParameterStore& store);
    void set_learning_rate(double lr) { config_.learning_rate = lr; }
    const AdamConfig& config() const { return config_; }

    std::int64_t steps() const { return t_; }
    void set_steps(std::int64_t t) { t_ = t; }
    std::map<std::string, Matrix>& first_moments() { return m_; }
    std::map<std::string, Matrix>& second_moments() { return v_; }
    const std::map<std::string, Matrix>& first_moments() const { return m_; }
    const std::map<std::string, Matrix>& second_moments() const { return v_; }

private:
    AdamConfig config_;
    std::int64_t t_ = 0;
    std::map<std::string, Matrix> m_;
    std::map<std::string, Matrix> v_;
};

}  // namespace cmr::nn
