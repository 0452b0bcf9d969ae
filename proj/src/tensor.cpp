#include "vicha/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace vicha {

namespace detail {

namespace {
thread_local int no_grad_depth = 0;
}

bool grad_enabled() { return no_grad_depth == 0; }

}  // namespace detail

NoGradGuard::NoGradGuard() { ++detail::no_grad_depth; }
NoGradGuard::~NoGradGuard() { --detail::no_grad_depth; }

double Tensor::item() const {
    if (rows() != 1 || cols() != 1) throw std::logic_error("Tensor::item: not a scalar");
    return node_->value(0, 0);
}

Tensor make_op(Mat value, std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backward) {
    auto n = std::make_shared<detail::Node>();
    n->value = std::move(value);
    bool req = false;
    if (detail::grad_enabled()) {
        for (const auto& p : parents) req = req || p.requires_grad();
    }
    n->requires_grad = req;
    if (req) {
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward = std::move(backward);
    }
    return Tensor(n);
}

void Tensor::backward() const {
    if (rows() != 1 || cols() != 1)
        throw std::logic_error("Tensor::backward: root must be a scalar");
    if (!node_->requires_grad) return;

    // iterative post-order over parents
    std::vector<detail::Node*> order;
    std::vector<std::pair<detail::Node*, size_t>> stack;
    std::unordered_set<detail::Node*> seen;
    stack.push_back({node_.get(), 0});
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            detail::Node* p = n->parents[i++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->accumulate(Mat::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward && n->grad.size() != 0) n->backward(*n);
    }
}

// --- op implementations -----------------------------------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dim mismatch");
    auto an = a.node();
    auto bn = b.node();
    return make_op(an->value * bn->value, {a, b}, [an, bn](detail::Node& n) {
        if (an->requires_grad) an->accumulate(n.grad * bn->value.transpose());
        if (bn->requires_grad) bn->accumulate(an->value.transpose() * n.grad);
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    auto an = a.node();
    auto bn = b.node();
    return make_op(an->value + bn->value, {a, b}, [an, bn](detail::Node& n) {
        if (an->requires_grad) an->accumulate(n.grad);
        if (bn->requires_grad) bn->accumulate(n.grad);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    auto an = a.node();
    auto bn = b.node();
    return make_op(an->value - bn->value, {a, b}, [an, bn](detail::Node& n) {
        if (an->requires_grad) an->accumulate(n.grad);
        if (bn->requires_grad) bn->accumulate(-n.grad);
    });
}

Tensor add_rowvec(const Tensor& a, const Tensor& b) {
    if (b.rows() != 1 || b.cols() != a.cols())
        throw std::invalid_argument("add_rowvec: b must be 1 x cols(a)");
    auto an = a.node();
    auto bn = b.node();
    Mat out = an->value;
    out.rowwise() += bn->value.row(0);
    return make_op(std::move(out), {a, b}, [an, bn](detail::Node& n) {
        if (an->requires_grad) an->accumulate(n.grad);
        if (bn->requires_grad) bn->accumulate(n.grad.colwise().sum());
    });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "hadamard");
    auto an = a.node();
    auto bn = b.node();
    return make_op(an->value.cwiseProduct(bn->value), {a, b}, [an, bn](detail::Node& n) {
        if (an->requires_grad) an->accumulate(n.grad.cwiseProduct(bn->value));
        if (bn->requires_grad) bn->accumulate(n.grad.cwiseProduct(an->value));
    });
}

Tensor scale(const Tensor& a, double s) {
    auto an = a.node();
    return make_op(an->value * s, {a}, [an, s](detail::Node& n) {
        if (an->requires_grad) an->accumulate(n.grad * s);
    });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor transpose(const Tensor& a) {
    auto an = a.node();
    return make_op(an->value.transpose(), {a}, [an](detail::Node& n) {
        if (an->requires_grad) an->accumulate(n.grad.transpose());
    });
}

Tensor relu(const Tensor& a) {
    auto an = a.node();
    return make_op(an->value.cwiseMax(0.0), {a}, [an](detail::Node& n) {
        if (an->requires_grad)
            an->accumulate(
                n.grad.cwiseProduct((an->value.array() > 0.0).cast<double>().matrix()));
    });
}

Tensor gelu(const Tensor& a) {
    auto an = a.node();
    Mat out = an->value.unaryExpr(
        [](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); });
    return make_op(std::move(out), {a}, [an](detail::Node& n) {
        if (!an->requires_grad) return;
        Mat d = an->value.unaryExpr([](double x) {
            double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
            double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
            return cdf + x * pdf;
        });
        an->accumulate(n.grad.cwiseProduct(d));
    });
}

Tensor exp_t(const Tensor& a) {
    auto an = a.node();
    Mat out = an->value.array().exp().matrix();
    Mat out_copy = out;
    return make_op(std::move(out), {a}, [an, out_copy](detail::Node& n) {
        if (an->requires_grad) an->accumulate(n.grad.cwiseProduct(out_copy));
    });
}

Tensor log_t(const Tensor& a) {
    auto an = a.node();
    return make_op(an->value.array().log().matrix(), {a}, [an](detail::Node& n) {
        if (an->requires_grad) an->accumulate(n.grad.cwiseQuotient(an->value));
    });
}

Tensor square(const Tensor& a) {
    auto an = a.node();
    return make_op(an->value.cwiseProduct(an->value), {a}, [an](detail::Node& n) {
        if (an->requires_grad) an->accumulate(2.0 * n.grad.cwiseProduct(an->value));
    });
}

Tensor softmax_rows(const Tensor& a) {
    auto an = a.node();
    Mat out(an->value.rows(), an->value.cols());
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        Eigen::ArrayXd e = (an->value.row(r).array() - an->value.row(r).maxCoeff()).exp();
        out.row(r) = (e / e.sum()).matrix();
    }
    Mat y = out;
    return make_op(std::move(out), {a}, [an, y](detail::Node& n) {
        if (!an->requires_grad) return;
        Mat dx(y.rows(), y.cols());
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
            double dot = n.grad.row(r).dot(y.row(r));
            dx.row(r) = y.row(r).cwiseProduct(n.grad.row(r).array().matrix() -
                                              Mat::Constant(1, y.cols(), dot));
        }
        an->accumulate(dx);
    });
}

Tensor log_softmax_rows(const Tensor& a) {
    auto an = a.node();
    Mat out(an->value.rows(), an->value.cols());
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        double m = an->value.row(r).maxCoeff();
        double lse = m + std::log((an->value.row(r).array() - m).exp().sum());
        out.row(r) = an->value.row(r).array() - lse;
    }
    Mat y = out;
    return make_op(std::move(out), {a}, [an, y](detail::Node& n) {
        if (!an->requires_grad) return;
        Mat dx(y.rows(), y.cols());
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
            double gsum = n.grad.row(r).sum();
            dx.row(r) = n.grad.row(r) - gsum * y.row(r).array().exp().matrix();
        }
        an->accumulate(dx);
    });
}

Tensor normalize_rows(const Tensor& a, double eps) {
    auto an = a.node();
    Mat out(an->value.rows(), an->value.cols());
    Vec norms(an->value.rows());
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        norms(r) = std::max(an->value.row(r).norm(), eps);
        out.row(r) = an->value.row(r) / norms(r);
    }
    Mat y = out;
    return make_op(std::move(out), {a}, [an, y, norms](detail::Node& n) {
        if (!an->requires_grad) return;
        Mat dx(y.rows(), y.cols());
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
            double dot = n.grad.row(r).dot(y.row(r));
            dx.row(r) = (n.grad.row(r) - dot * y.row(r)) / norms(r);
        }
        an->accumulate(dx);
    });
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps) {
    if (gamma.rows() != 1 || gamma.cols() != x.cols() || beta.rows() != 1 ||
        beta.cols() != x.cols())
        throw std::invalid_argument("layer_norm_rows: gamma/beta must be 1 x cols(x)");
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    const Eigen::Index R = x.rows(), C = x.cols();
    Mat xhat(R, C);
    Vec inv_std(R);
    for (Eigen::Index r = 0; r < R; ++r) {
        double mu = xn->value.row(r).mean();
        Eigen::RowVectorXd c = xn->value.row(r).array() - mu;
        double var = c.squaredNorm() / static_cast<double>(C);
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = c * inv_std(r);
    }
    Mat out(R, C);
    for (Eigen::Index r = 0; r < R; ++r)
        out.row(r) = xhat.row(r).cwiseProduct(gn->value.row(0)) + bn->value.row(0);
    return make_op(std::move(out), {x, gamma, beta},
                   [xn, gn, bn, xhat, inv_std, C](detail::Node& n) {
                       if (gn->requires_grad)
                           gn->accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
                       if (bn->requires_grad) bn->accumulate(n.grad.colwise().sum());
                       if (!xn->requires_grad) return;
                       Mat dx(n.grad.rows(), n.grad.cols());
                       const double invC = 1.0 / static_cast<double>(C);
                       for (Eigen::Index r = 0; r < n.grad.rows(); ++r) {
                           Eigen::RowVectorXd dxhat =
                               n.grad.row(r).cwiseProduct(gn->value.row(0));
                           double m1 = dxhat.mean();
                           double m2 = dxhat.dot(xhat.row(r)) * invC;
                           dx.row(r) = inv_std(r) * (dxhat.array() - m1 -
                                                     xhat.row(r).array() * m2)
                                           .matrix();
                       }
                       xn->accumulate(dx);
                   });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts.front().cols();
    for (const auto& p : parts) {
        if (p.cols() != cols) throw std::invalid_argument("concat_rows: col mismatch");
        rows += p.rows();
    }
    Mat out(rows, cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    std::vector<std::shared_ptr<detail::Node>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return make_op(std::move(out), parts, [nodes](detail::Node& n) {
        Eigen::Index at = 0;
        for (auto& p : nodes) {
            if (p->requires_grad) p->accumulate(n.grad.middleRows(at, p->value.rows()));
            at += p->value.rows();
        }
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    Eigen::Index cols = 0;
    const Eigen::Index rows = parts.front().rows();
    for (const auto& p : parts) {
        if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
        cols += p.cols();
    }
    Mat out(rows, cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    std::vector<std::shared_ptr<detail::Node>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return make_op(std::move(out), parts, [nodes](detail::Node& n) {
        Eigen::Index at = 0;
        for (auto& p : nodes) {
            if (p->requires_grad) p->accumulate(n.grad.middleCols(at, p->value.cols()));
            at += p->value.cols();
        }
    });
}

Tensor slice_rows(const Tensor& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.rows())
        throw std::out_of_range("slice_rows: range out of bounds");
    auto an = a.node();
    return make_op(an->value.middleRows(start, count), {a},
                   [an, start, count](detail::Node& n) {
                       if (!an->requires_grad) return;
                       Mat g = Mat::Zero(an->value.rows(), an->value.cols());
                       g.middleRows(start, count) = n.grad;
                       an->accumulate(g);
                   });
}

Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.cols())
        throw std::out_of_range("slice_cols: range out of bounds");
    auto an = a.node();
    return make_op(an->value.middleCols(start, count), {a},
                   [an, start, count](detail::Node& n) {
                       if (!an->requires_grad) return;
                       Mat g = Mat::Zero(an->value.rows(), an->value.cols());
                       g.middleCols(start, count) = n.grad;
                       an->accumulate(g);
                   });
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
    auto an = a.node();
    Mat out(static_cast<Eigen::Index>(idx.size()), an->value.cols());
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= an->value.rows())
            throw std::out_of_range("gather_rows: index out of bounds");
        out.row(static_cast<Eigen::Index>(i)) = an->value.row(idx[i]);
    }
    return make_op(std::move(out), {a}, [an, idx](detail::Node& n) {
        if (!an->requires_grad) return;
        Mat g = Mat::Zero(an->value.rows(), an->value.cols());
        for (size_t i = 0; i < idx.size(); ++i)
            g.row(idx[i]) += n.grad.row(static_cast<Eigen::Index>(i));
        an->accumulate(g);
    });
}

Tensor sum_all(const Tensor& a) {
    auto an = a.node();
    return make_op(Mat::Constant(1, 1, an->value.sum()), {a}, [an](detail::Node& n) {
        if (an->requires_grad)
            an->accumulate(Mat::Constant(an->value.rows(), an->value.cols(), n.grad(0, 0)));
    });
}

Tensor mean_all(const Tensor& a) {
    auto an = a.node();
    const double inv = 1.0 / static_cast<double>(an->value.size());
    return make_op(Mat::Constant(1, 1, an->value.sum() * inv), {a},
                   [an, inv](detail::Node& n) {
                       if (an->requires_grad)
                           an->accumulate(Mat::Constant(an->value.rows(), an->value.cols(),
                                                        n.grad(0, 0) * inv));
                   });
}

Tensor pick(const Tensor& a, const std::vector<int>& col_idx) {
    if (static_cast<Eigen::Index>(col_idx.size()) != a.rows())
        throw std::invalid_argument("pick: one column index per row required");
    auto an = a.node();
    Mat out(a.rows(), 1);
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
        if (col_idx[r] < 0 || col_idx[r] >= a.cols())
            throw std::out_of_range("pick: column index out of bounds");
        out(r, 0) = an->value(r, col_idx[r]);
    }
    return make_op(std::move(out), {a}, [an, col_idx](detail::Node& n) {
        if (!an->requires_grad) return;
        Mat g = Mat::Zero(an->value.rows(), an->value.cols());
        for (Eigen::Index r = 0; r < g.rows(); ++r) g(r, col_idx[r]) += n.grad(r, 0);
        an->accumulate(g);
    });
}

Tensor mul_scalar_t(const Tensor& a, const Tensor& s) {
    if (s.rows() != 1 || s.cols() != 1)
        throw std::invalid_argument("mul_scalar_t: s must be 1x1");
    auto an = a.node();
    auto sn = s.node();
    return make_op(an->value * sn->value(0, 0), {a, s}, [an, sn](detail::Node& n) {
        if (an->requires_grad) an->accumulate(n.grad * sn->value(0, 0));
        if (sn->requires_grad)
            sn->accumulate(Mat::Constant(1, 1, n.grad.cwiseProduct(an->value).sum()));
    });
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets) {
    Tensor ls = log_softmax_rows(logits);
    return neg(mean_all(pick(ls, targets)));
}

}  // namespace vicha
