#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace vicha {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Reverse-mode autodiff over dense double matrices. Every op builds a graph
// node whose backward closure scatters the output gradient into its parents.
// Graphs are rebuilt per step; single-threaded, so evaluation order (and thus
// floating point results) is reproducible on one platform.

class Tensor;

namespace detail {

struct Node {
    Mat value;
    Mat grad;  // allocated on first accumulation
    bool requires_grad = false;
    bool visited = false;  // scratch for topo sort
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;  // reads this->grad, accumulates into parents

    void accumulate(const Mat& g) {
        if (grad.size() == 0) {
            grad = g;
        } else {
            grad += g;
        }
    }
    Mat& grad_ref() {
        if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
        return grad;
    }
};

bool grad_enabled();

}  // namespace detail

// RAII switch that disables graph construction (momentum forwards, eval).
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor constant(Mat v) { return Tensor(std::move(v), false); }
    static Tensor scalar(double v) { return constant(Mat::Constant(1, 1, v)); }
    static Tensor param(Mat v) { return Tensor(std::move(v), true); }

    bool defined() const { return node_ != nullptr; }
    const Mat& value() const { return node_->value; }
    Mat& value_mut() { return node_->value; }  // in-place edits (optimizer, EMA)
    const Mat& grad() const { return node_->grad_ref(); }
    bool requires_grad() const { return node_->requires_grad; }
    void zero_grad() { node_->grad.setZero(); }

    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    double item() const;

    // identity test: two Tensors sharing one node (parameter sharing contract)
    bool same_node(const Tensor& o) const { return node_ == o.node_; }

    // Runs reverse accumulation from this node. Must be a 1x1 scalar.
    void backward() const;

    std::shared_ptr<detail::Node> node() const { return node_; }

private:
    Tensor(Mat v, bool req) : node_(std::make_shared<detail::Node>()) {
        node_->value = std::move(v);
        node_->requires_grad = req;
    }
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

    std::shared_ptr<detail::Node> node_;

    friend Tensor make_op(Mat value, std::vector<Tensor> parents,
                          std::function<void(detail::Node&)> backward);
};

// --- primitive ops ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);           // same shape
Tensor sub(const Tensor& a, const Tensor& b);           // same shape
Tensor add_rowvec(const Tensor& a, const Tensor& b);    // b is 1 x cols, broadcast over rows
Tensor hadamard(const Tensor& a, const Tensor& b);      // elementwise product
Tensor scale(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor transpose(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);                           // exact erf form
Tensor exp_t(const Tensor& a);
Tensor log_t(const Tensor& a);
Tensor square(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
Tensor normalize_rows(const Tensor& a, double eps = 1e-12);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps = 1e-6);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, Eigen::Index start, Eigen::Index count);
Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index count);
Tensor gather_rows(const Tensor& a, const std::vector<int>& idx);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
// per-row entry selection: result is len(idx) x 1 with a(r, idx[r])
Tensor pick(const Tensor& a, const std::vector<int>& col_idx);
// scale by a 1x1 tensor (learned temperature and friends)
Tensor mul_scalar_t(const Tensor& a, const Tensor& s);

inline Tensor row(const Tensor& a, Eigen::Index r) { return slice_rows(a, r, 1); }

// mean cross-entropy over rows of `logits` against integer targets
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets);

}  // namespace vicha
