#include "cmr/autograd.h"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace cmr::ag {

void Node::accumulate(const Matrix& g) {
    if (grad.size() == 0) {
        grad = g;
    } else {
        grad += g;
    }
}

namespace {

void push(const Var& v, const Matrix& g) {
    if (v.requires_grad()) v.node()->accumulate(g);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
    }
}

}  // namespace

Var constant(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
}

Var leaf(Matrix value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
}

Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    for (const auto& p : parents) {
        if (p.requires_grad()) {
            n->requires_grad = true;
            n->parents.push_back(p.node());
        }
    }
    if (n->requires_grad) n->backward_fn = std::move(backward_fn);
    return Var(std::move(n));
}

Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
    Matrix out = a.value() * b.value();
    return make_op(std::move(out), {a, b}, [a, b](Node& self) {
        if (a.requires_grad()) push(a, self.grad * b.value().transpose());
        if (b.requires_grad()) push(b, a.value().transpose() * self.grad);
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
    Matrix out = a.value() * b.value().transpose();
    return make_op(std::move(out), {a, b}, [a, b](Node& self) {
        if (a.requires_grad()) push(a, self.grad * b.value());
        if (b.requires_grad()) push(b, self.grad.transpose() * a.value());
    });
}

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Matrix out = a.value() + b.value();
    return make_op(std::move(out), {a, b}, [a, b](Node& self) {
        push(a, self.grad);
        push(b, self.grad);
    });
}

Var add_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw std::invalid_argument("add_row: row must be 1 x cols");
    }
    Matrix out = a.value().rowwise() + row.value().row(0);
    return make_op(std::move(out), {a, row}, [a, row](Node& self) {
        push(a, self.grad);
        if (row.requires_grad()) push(row, self.grad.colwise().sum());
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Matrix out = a.value() - b.value();
    return make_op(std::move(out), {a, b}, [a, b](Node& self) {
        push(a, self.grad);
        if (b.requires_grad()) push(b, -self.grad);
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Matrix out = a.value().cwiseProduct(b.value());
    return make_op(std::move(out), {a, b}, [a, b](Node& self) {
        if (a.requires_grad()) push(a, self.grad.cwiseProduct(b.value()));
        if (b.requires_grad()) push(b, self.grad.cwiseProduct(a.value()));
    });
}

Var scale(const Var& a, double s) {
    Matrix out = a.value() * s;
    return make_op(std::move(out), {a}, [a, s](Node& self) { push(a, self.grad * s); });
}

Var gelu(const Var& a) {
    static constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    static constexpr double kA = 0.044715;
    const Matrix& x = a.value();
    Matrix t = (kC * (x.array() + kA * x.array().cube())).tanh().matrix();
    Matrix out = (0.5 * x.array() * (1.0 + t.array())).matrix();
    return make_op(std::move(out), {a}, [a, t](Node& self) {
        const auto& xv = a.value().array();
        auto dt = (1.0 - t.array().square()) * kC * (1.0 + 3.0 * kA * xv.square());
        Matrix d = (0.5 * (1.0 + t.array()) + 0.5 * xv * dt).matrix();
        push(a, self.grad.cwiseProduct(d));
    });
}

Var softmax_rows(const Var& a, const std::vector<bool>* key_valid) {
    const Eigen::Index cols = a.cols();
    if (key_valid && static_cast<Eigen::Index>(key_valid->size()) != cols) {
        throw std::invalid_argument("softmax_rows: mask width mismatch");
    }
    Matrix out(a.rows(), cols);
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index c = 0; c < cols; ++c) {
            if (key_valid && !(*key_valid)[c]) continue;
            mx = std::max(mx, a.value()(r, c));
        }
        double z = 0.0;
        for (Eigen::Index c = 0; c < cols; ++c) {
            double e = (key_valid && !(*key_valid)[c]) ? 0.0 : std::exp(a.value()(r, c) - mx);
            out(r, c) = e;
            z += e;
        }
        out.row(r) /= z;
    }
    Matrix p = out;
    return make_op(std::move(out), {a}, [a, p](Node& self) {
        // dL/dx = p * (g - sum(g * p))
        Eigen::VectorXd dots = self.grad.cwiseProduct(p).rowwise().sum();
        Matrix d = p.cwiseProduct(self.grad.colwise() - dots);
        push(a, d);
    });
}

Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps) {
    const Eigen::Index n = a.cols();
    if (gamma.cols() != n || beta.cols() != n) {
        throw std::invalid_argument("layer_norm_rows: gamma/beta width mismatch");
    }
    const Matrix& x = a.value();
    Eigen::VectorXd mean = x.rowwise().mean();
    Matrix centered = x.colwise() - mean;
    Eigen::VectorXd inv_std =
        ((centered.array().square().rowwise().sum() / static_cast<double>(n)) + eps).rsqrt();
    Matrix xhat = centered.array().colwise() * inv_std.array();
    Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
    out.rowwise() += beta.value().row(0);
    return make_op(std::move(out), {a, gamma, beta}, [a, gamma, beta, xhat, inv_std](Node& self) {
        const Matrix& g = self.grad;
        if (gamma.requires_grad()) push(gamma, g.cwiseProduct(xhat).colwise().sum());
        if (beta.requires_grad()) push(beta, g.colwise().sum());
        if (a.requires_grad()) {
            Matrix gx = g.array().rowwise() * gamma.value().row(0).array();
            Eigen::VectorXd m1 = gx.rowwise().mean();
            Eigen::VectorXd m2 = gx.cwiseProduct(xhat).rowwise().mean();
            Matrix d = gx.colwise() - m1;
            d -= (xhat.array().colwise() * m2.array()).matrix();
            d = d.array().colwise() * inv_std.array();
            push(a, d);
        }
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts.front().cols();
    for (const auto& p : parts) {
        if (p.cols() != cols) throw std::invalid_argument("concat_rows: width mismatch");
        rows += p.rows();
    }
    Matrix out(rows, cols);
    Eigen::Index r = 0;
    for (const auto& p : parts) {
        out.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    return make_op(std::move(out), ps, [ps](Node& self) {
        Eigen::Index r0 = 0;
        for (const auto& p : ps) {
            if (p.requires_grad()) push(p, self.grad.middleRows(r0, p.rows()));
            r0 += p.rows();
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    Eigen::Index cols = 0;
    const Eigen::Index rows = parts.front().rows();
    for (const auto& p : parts) {
        if (p.rows() != rows) throw std::invalid_argument("concat_cols: height mismatch");
        cols += p.cols();
    }
    Matrix out(rows, cols);
    Eigen::Index c = 0;
    for (const auto& p : parts) {
        out.middleCols(c, p.cols()) = p.value();
        c += p.cols();
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    return make_op(std::move(out), ps, [ps](Node& self) {
        Eigen::Index c0 = 0;
        for (const auto& p : ps) {
            if (p.requires_grad()) push(p, self.grad.middleCols(c0, p.cols()));
            c0 += p.cols();
        }
    });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.rows()) {
        throw std::out_of_range("slice_rows: range outside matrix");
    }
    Matrix out = a.value().middleRows(start, count);
    return make_op(std::move(out), {a}, [a, start, count](Node& self) {
        Matrix g = Matrix::Zero(a.rows(), a.cols());
        g.middleRows(start, count) = self.grad;
        push(a, g);
    });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.cols()) {
        throw std::out_of_range("slice_cols: range outside matrix");
    }
    Matrix out = a.value().middleCols(start, count);
    return make_op(std::move(out), {a}, [a, start, count](Node& self) {
        Matrix g = Matrix::Zero(a.rows(), a.cols());
        g.middleCols(start, count) = self.grad;
        push(a, g);
    });
}

Var gather_rows(const Var& table, std::span<const int> ids) {
    Matrix out(static_cast<Eigen::Index>(ids.size()), table.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= table.rows()) throw std::out_of_range("gather_rows: id out of range");
        out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
    }
    std::vector<int> idx(ids.begin(), ids.end());
    return make_op(std::move(out), {table}, [table, idx](Node& self) {
        Matrix g = Matrix::Zero(table.rows(), table.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            g.row(idx[i]) += self.grad.row(static_cast<Eigen::Index>(i));
        }
        push(table, g);
    });
}

Var mean_rows(const Var& a) {
    if (a.rows() == 0) throw std::invalid_argument("mean_rows: empty input");
    Matrix out = a.value().colwise().mean();
    const double inv = 1.0 / static_cast<double>(a.rows());
    return make_op(std::move(out), {a}, [a, inv](Node& self) {
        Matrix g = self.grad.replicate(a.rows(), 1) * inv;
        push(a, g);
    });
}

Var l2_normalize_rows(const Var& a, double eps) {
    Eigen::VectorXd norms = a.value().rowwise().norm().array().max(eps);
    Matrix y = a.value().array().colwise() / norms.array();
    Matrix yv = y;
    return make_op(std::move(y), {a}, [a, yv, norms](Node& self) {
        // d/dx (x/|x|) applied to g: (g - y (y.g)) / |x|
        Eigen::VectorXd dots = self.grad.cwiseProduct(yv).rowwise().sum();
        Matrix d = self.grad - (yv.array().colwise() * dots.array()).matrix();
        d = d.array().colwise() / norms.array();
        push(a, d);
    });
}

Var sum(const Var& a) {
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    return make_op(std::move(out), {a}, [a](Node& self) {
        push(a, Matrix::Constant(a.rows(), a.cols(), self.grad(0, 0)));
    });
}

Var weighted_sum(const Var& a, const Matrix& w) {
    if (w.rows() != a.rows() || w.cols() != a.cols()) {
        throw std::invalid_argument("weighted_sum: weight shape mismatch");
    }
    Matrix out(1, 1);
    out(0, 0) = a.value().cwiseProduct(w).sum();
    return make_op(std::move(out), {a}, [a, w](Node& self) { push(a, w * self.grad(0, 0)); });
}

void backward(const Var& root) {
    if (root.rows() != 1 || root.cols() != 1) throw std::invalid_argument("backward: root must be scalar");
    if (!root.requires_grad()) return;

    // Iterative post-order DFS for a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->accumulate(Matrix::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
    }
}

}  // namespace cmr::ag
