#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Var is a shared handle to a graph node; ops build the graph
// eagerly and backward() walks it in reverse topological order.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace cmr::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Node {
    Matrix value;
    Matrix grad;  // empty until something flows into it
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void accumulate(const Matrix& g);
    bool has_grad() const { return grad.size() != 0; }
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const Matrix& value() const { return node_->value; }
    Matrix& mutable_value() { return node_->value; }
    const Matrix& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    double scalar() const { return node_->value(0, 0); }
    bool defined() const { return static_cast<bool>(node_); }

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Leaf that never receives gradient.
Var constant(Matrix value);
/// Leaf that accumulates gradient (a parameter or a probe input).
Var leaf(Matrix value, bool requires_grad = true);

Var matmul(const Var& a, const Var& b);
/// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
/// Adds a 1 x n row to every row of a.
Var add_row(const Var& a, const Var& row);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var gelu(const Var& a);

/// Row-wise softmax. Columns with key_valid[j] == false get probability 0.
Var softmax_rows(const Var& a, const std::vector<bool>* key_valid = nullptr);
Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-5);

Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
/// Embedding lookup: row i of the result is table.row(ids[i]).
Var gather_rows(const Var& table, std::span<const int> ids);

Var mean_rows(const Var& a);
Var l2_normalize_rows(const Var& a, double eps = 1e-12);
Var sum(const Var& a);
/// sum(a .* w) for a constant weight matrix; handy for probing gradients.
Var weighted_sum(const Var& a, const Matrix& w);

/// Builds a node from a precomputed value and a closure that pushes
/// node.grad into the parents. Parents that do not require grad are kept
/// out of the graph entirely.
Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

/// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates.
void backward(const Var& root);

}  // namespace cmr::ag
