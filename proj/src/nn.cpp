#include "vicha/nn.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace vicha {

Tensor ParamRegistry::create(const std::string& name, Eigen::Index rows,
                             Eigen::Index cols, Init init, Rng& rng, double init_std) {
    if (contains(name)) throw std::logic_error("ParamRegistry: duplicate name " + name);
    Mat m(rows, cols);
    switch (init) {
        case Init::truncated_normal:
            for (Eigen::Index r = 0; r < rows; ++r)
                for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.truncated_normal(init_std);
            break;
        case Init::zeros:
            m.setZero();
            break;
        case Init::ones:
            m.setOnes();
            break;
    }
    Tensor t = Tensor::param(std::move(m));
    items_.emplace_back(name, t);
    return t;
}

Tensor ParamRegistry::adopt(const std::string& name, const Tensor& t) {
    if (contains(name)) throw std::logic_error("ParamRegistry: duplicate name " + name);
    items_.emplace_back(name, t);
    return t;
}

Tensor ParamRegistry::find(const std::string& name) const {
    for (const auto& [n, t] : items_)
        if (n == name) return t;
    throw std::out_of_range("ParamRegistry: no parameter named " + name);
}

bool ParamRegistry::contains(const std::string& name) const {
    for (const auto& [n, t] : items_)
        if (n == name) return true;
    return false;
}

void ParamRegistry::zero_grad() {
    for (auto& [n, t] : items_) t.zero_grad();
}

size_t ParamRegistry::unique_scalar_count() const {
    std::unordered_set<const void*> seen;
    size_t total = 0;
    for (const auto& [n, t] : items_) {
        if (seen.insert(t.node().get()).second) total += static_cast<size_t>(t.value().size());
    }
    return total;
}

Linear::Linear(ParamRegistry& reg, const std::string& prefix, int in, int out, Rng& rng) {
    w = reg.create(prefix + ".w", in, out, Init::truncated_normal, rng);
    b = reg.create(prefix + ".b", 1, out, Init::zeros, rng);
}

LayerNorm::LayerNorm(ParamRegistry& reg, const std::string& prefix, int dim, Rng& rng) {
    gamma = reg.create(prefix + ".gamma", 1, dim, Init::ones, rng);
    beta = reg.create(prefix + ".beta", 1, dim, Init::zeros, rng);
}

MultiHeadAttention::MultiHeadAttention(ParamRegistry& reg, const std::string& prefix,
                                       int dim, int heads, Rng& rng)
    : wq(reg, prefix + ".wq", dim, dim, rng),
      wk(reg, prefix + ".wk", dim, dim, rng),
      wv(reg, prefix + ".wv", dim, dim, rng),
      wo(reg, prefix + ".wo", dim, dim, rng),
      num_heads(heads),
      head_dim(dim / heads) {
    if (dim % heads != 0)
        throw std::invalid_argument("MultiHeadAttention: dim not divisible by heads");
}

Tensor MultiHeadAttention::forward(const Tensor& q_in, const Tensor& kv_in,
                                   const AttentionOptions& opts) const {
    Tensor q = wq.forward(q_in);
    Tensor k = wk.forward(kv_in);
    Tensor v = wv.forward(kv_in);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(head_dim));

    std::vector<Tensor> head_outputs;
    head_outputs.reserve(static_cast<size_t>(num_heads));
    for (int h = 0; h < num_heads; ++h) {
        Tensor qh = slice_cols(q, static_cast<Eigen::Index>(h) * head_dim, head_dim);
        Tensor kh = slice_cols(k, static_cast<Eigen::Index>(h) * head_dim, head_dim);
        Tensor vh = slice_cols(v, static_cast<Eigen::Index>(h) * head_dim, head_dim);
        Tensor probs;
        if (opts.force_uniform) {
            probs = Tensor::constant(
                Mat::Constant(q_in.rows(), kv_in.rows(), 1.0 / static_cast<double>(kv_in.rows())));
        } else {
            Tensor logits = scale(matmul(qh, transpose(kh)), inv_sqrt_d);
            probs = softmax_rows(logits);
        }
        if (opts.capture) opts.capture->push_back(probs);
        head_outputs.push_back(matmul(probs, vh));
    }
    Tensor merged = num_heads == 1 ? head_outputs[0] : concat_cols(head_outputs);
    return wo.forward(merged);
}

Mlp::Mlp(ParamRegistry& reg, const std::string& prefix, int dim, int hidden, Rng& rng)
    : fc1(reg, prefix + ".fc1", dim, hidden, rng), fc2(reg, prefix + ".fc2", hidden, dim, rng) {}

EncoderBlock::EncoderBlock(ParamRegistry& reg, const std::string& prefix, int dim,
                           int num_heads, Rng& rng)
    : ln1(reg, prefix + ".ln1", dim, rng),
      ln2(reg, prefix + ".ln2", dim, rng),
      attn(reg, prefix + ".attn", dim, num_heads, rng),
      mlp(reg, prefix + ".mlp", dim, dim * 4, rng) {}

Tensor EncoderBlock::forward(const Tensor& x) const {
    Tensor h = ln1.forward(x);
    Tensor y = add(x, attn.forward(h, h));
    return add(y, mlp.forward(ln2.forward(y)));
}

DecoderBlock::DecoderBlock(ParamRegistry& reg, const std::string& prefix, int dim,
                           int num_heads, Rng& rng)
    : ln1(reg, prefix + ".ln1", dim, rng),
      ln2(reg, prefix + ".ln2", dim, rng),
      ln3(reg, prefix + ".ln3", dim, rng),
      self_attn(reg, prefix + ".self", dim, num_heads, rng),
      cross_attn(reg, prefix + ".cross", dim, num_heads, rng),
      mlp(reg, prefix + ".mlp", dim, dim * 4, rng) {}

Tensor DecoderBlock::forward(const Tensor& x, const Tensor& kv,
                             const AttentionOptions& cross_opts) const {
    Tensor h = ln1.forward(x);
    Tensor y = add(x, self_attn.forward(h, h));
    y = add(y, cross_attn.forward(ln2.forward(y), kv, cross_opts));
    return add(y, mlp.forward(ln3.forward(y)));
}

namespace {

Tensor copy_param(ParamRegistry& reg, const std::string& name, const Tensor& src) {
    return reg.adopt(name, Tensor::param(src.value()));
}

}  // namespace

DecoderBlock DecoderBlock::replicate(ParamRegistry& reg, const std::string& prefix) const {
    DecoderBlock out;
    out.ln1.gamma = copy_param(reg, prefix + ".ln1.gamma", ln1.gamma);
    out.ln1.beta = copy_param(reg, prefix + ".ln1.beta", ln1.beta);
    out.ln2.gamma = copy_param(reg, prefix + ".ln2.gamma", ln2.gamma);
    out.ln2.beta = copy_param(reg, prefix + ".ln2.beta", ln2.beta);
    out.ln3.gamma = copy_param(reg, prefix + ".ln3.gamma", ln3.gamma);
    out.ln3.beta = copy_param(reg, prefix + ".ln3.beta", ln3.beta);

    out.self_attn.num_heads = self_attn.num_heads;
    out.self_attn.head_dim = self_attn.head_dim;
    out.self_attn.wq.w = copy_param(reg, prefix + ".self.wq.w", self_attn.wq.w);
    out.self_attn.wq.b = copy_param(reg, prefix + ".self.wq.b", self_attn.wq.b);
    out.self_attn.wk.w = copy_param(reg, prefix + ".self.wk.w", self_attn.wk.w);
    out.self_attn.wk.b = copy_param(reg, prefix + ".self.wk.b", self_attn.wk.b);
    out.self_attn.wv.w = copy_param(reg, prefix + ".self.wv.w", self_attn.wv.w);
    out.self_attn.wv.b = copy_param(reg, prefix + ".self.wv.b", self_attn.wv.b);
    out.self_attn.wo.w = copy_param(reg, prefix + ".self.wo.w", self_attn.wo.w);
    out.self_attn.wo.b = copy_param(reg, prefix + ".self.wo.b", self_attn.wo.b);

    out.cross_attn.num_heads = cross_attn.num_heads;
    out.cross_attn.head_dim = cross_attn.head_dim;
    out.cross_attn.wq.w = copy_param(reg, prefix + ".cross.wq.w", cross_attn.wq.w);
    out.cross_attn.wq.b = copy_param(reg, prefix + ".cross.wq.b", cross_attn.wq.b);
    // key/value projections stay shared with the original branch
    out.cross_attn.wk.w = reg.adopt(prefix + ".cross.wk.w", cross_attn.wk.w);
    out.cross_attn.wk.b = reg.adopt(prefix + ".cross.wk.b", cross_attn.wk.b);
    out.cross_attn.wv.w = reg.adopt(prefix + ".cross.wv.w", cross_attn.wv.w);
    out.cross_attn.wv.b = reg.adopt(prefix + ".cross.wv.b", cross_attn.wv.b);
    out.cross_attn.wo.w = copy_param(reg, prefix + ".cross.wo.w", cross_attn.wo.w);
    out.cross_attn.wo.b = copy_param(reg, prefix + ".cross.wo.b", cross_attn.wo.b);

    out.mlp.fc1.w = copy_param(reg, prefix + ".mlp.fc1.w", mlp.fc1.w);
    out.mlp.fc1.b = copy_param(reg, prefix + ".mlp.fc1.b", mlp.fc1.b);
    out.mlp.fc2.w = copy_param(reg, prefix + ".mlp.fc2.w", mlp.fc2.w);
    out.mlp.fc2.b = copy_param(reg, prefix + ".mlp.fc2.b", mlp.fc2.b);
    return out;
}

}  // namespace vicha
