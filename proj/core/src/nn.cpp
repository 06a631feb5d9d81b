#include "cmr/nn.h"

#include <cmath>
#include <set>
#include <stdexcept>

namespace cmr::nn {

Var ParameterStore::add(const std::string& name, const std::string& group, Matrix init) {
    if (params_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    bool trainable = group_trainable(group);
    Var v = ag::leaf(std::move(init), trainable);
    params_.emplace(name, Parameter{group, v});
    return v;
}

Var ParameterStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second.var;
}

void ParameterStore::replace_value(const std::string& name, Matrix value) {
    auto v = get(name);
    v.node()->value = std::move(value);
    v.node()->grad.resize(0, 0);
}

void ParameterStore::set_group_trainable(const std::string& group, bool trainable) {
    for (auto& [_, p] : params_) {
        if (p.group == group) p.var.node()->requires_grad = trainable;
    }
}

bool ParameterStore::group_trainable(const std::string& group) const {
    // A group with no parameters yet is trainable by default.
    for (const auto& [_, p] : params_) {
        if (p.group == group) return p.var.node()->requires_grad;
    }
    return true;
}

void ParameterStore::zero_grad() {
    for (auto& [_, p] : params_) p.var.node()->grad.resize(0, 0);
}

std::vector<std::string> ParameterStore::groups() const {
    std::set<std::string> gs;
    for (const auto& [_, p] : params_) gs.insert(p.group);
    return {gs.begin(), gs.end()};
}

std::size_t ParameterStore::count(const std::string& group) const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += (p.group == group);
    return n;
}

Matrix normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
}

Linear::Linear(ParameterStore& store, const std::string& name, const std::string& group,
               Eigen::Index in, Eigen::Index out, Rng& rng)
    : weight(store.add(name + ".weight", group, normal_init(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng))),
      bias(store.add(name + ".bias", group, Matrix::Zero(1, out))) {}

Var Linear::operator()(const Var& x) const { return ag::add_row(ag::matmul(x, weight), bias); }

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, const std::string& group, Eigen::Index dim)
    : gamma(store.add(name + ".gamma", group, Matrix::Ones(1, dim))),
      beta(store.add(name + ".beta", group, Matrix::Zero(1, dim))) {}

Var LayerNorm::operator()(const Var& x) const { return ag::layer_norm_rows(x, gamma, beta); }

MultiHeadAttention::MultiHeadAttention(ParameterStore& store, const std::string& name, const std::string& group,
                                       Eigen::Index dim, int heads_, Rng& rng)
    : q(store, name + ".q", group, dim, dim, rng),
      k(store, name + ".k", group, dim, dim, rng),
      v(store, name + ".v", group, dim, dim, rng),
      o(store, name + ".o", group, dim, dim, rng),
      heads(heads_) {
    if (heads <= 0 || dim % heads != 0) throw std::invalid_argument("attention: dim not divisible by heads");
}

Var MultiHeadAttention::operator()(const Var& query, const Var& memory, const std::vector<bool>* key_valid) const {
    Var qs = q(query);
    Var ks = k(memory);
    Var vs = v(memory);
    const Eigen::Index dh = qs.cols() / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Var qh = heads == 1 ? qs : ag::slice_cols(qs, h * dh, dh);
        Var kh = heads == 1 ? ks : ag::slice_cols(ks, h * dh, dh);
        Var vh = heads == 1 ? vs : ag::slice_cols(vs, h * dh, dh);
        Var p = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), inv_sqrt), key_valid);
        outs.push_back(ag::matmul(p, vh));
    }
    Var merged = heads == 1 ? outs.front() : ag::concat_cols(outs);
    return o(merged);
}

TransformerLayer::TransformerLayer(ParameterStore& store, const std::string& name, const std::string& group,
                                   Eigen::Index dim, int heads, Eigen::Index ffn_dim, Rng& rng)
    : ln1(store, name + ".ln1", group, dim),
      ln2(store, name + ".ln2", group, dim),
      attn(store, name + ".attn", group, dim, heads, rng),
      ff1(store, name + ".ff1", group, dim, ffn_dim, rng),
      ff2(store, name + ".ff2", group, ffn_dim, dim, rng) {}

Var TransformerLayer::operator()(const Var& x, const std::vector<bool>* key_valid) const {
    Var h = ln1(x);
    Var y = ag::add(x, attn(h, h, key_valid));
    return ag::add(y, ff2(ag::gelu(ff1(ln2(y)))));
}

CrossAttentionLayer::CrossAttentionLayer(ParameterStore& store, const std::string& name, const std::string& group,
                                         Eigen::Index dim, int heads, Eigen::Index ffn_dim, Rng& rng)
    : ln_q(store, name + ".ln_q", group, dim),
      ln_mem(store, name + ".ln_mem", group, dim),
      ln_ff(store, name + ".ln_ff", group, dim),
      attn(store, name + ".attn", group, dim, heads, rng),
      ff1(store, name + ".ff1", group, dim, ffn_dim, rng),
      ff2(store, name + ".ff2", group, ffn_dim, dim, rng) {}

Var CrossAttentionLayer::operator()(const Var& x, const Var& memory) const {
    Var y = ag::add(x, attn(ln_q(x), ln_mem(memory)));
    return ag::add(y, ff2(ag::gelu(ff1(ln_ff(y)))));
}

void Adam::step(ParameterStore& store) {
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (const auto& [name, p] : store.all()) {
        auto& node = *p.var.node();
        if (!node.requires_grad || !node.has_grad()) continue;
        auto& m = m_[name];
        auto& v = v_[name];
        if (m.size() == 0) {
            m = Matrix::Zero(node.value.rows(), node.value.cols());
            v = Matrix::Zero(node.value.rows(), node.value.cols());
        }
        m = config_.beta1 * m + (1.0 - config_.beta1) * node.grad;
        v = config_.beta2 * v + (1.0 - config_.beta2) * node.grad.cwiseAbs2();
        node.value.array() -= config_.learning_rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + config_.eps);
    }
}

}  // namespace cmr::nn
