#pragma once

#include "vicha/rng.hpp"
#include "vicha/tensor.hpp"

#include <memory>
#include <string>
#include <vector>

namespace vicha {

enum class Init { truncated_normal, zeros, ones };

// Ordered, named parameter set. Creation order is fixed by construction
// order, which pins the rng draw sequence and the checkpoint layout.
class ParamRegistry {
public:
    Tensor create(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                  Init init, Rng& rng, double init_std = 0.02);
    // registers an existing tensor under a second name (weight sharing)
    Tensor adopt(const std::string& name, const Tensor& t);

    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    Tensor find(const std::string& name) const;
    bool contains(const std::string& name) const;
    void zero_grad();
    // number of scalars across distinct tensors (shared tensors counted once)
    size_t unique_scalar_count() const;

private:
    std::vector<std::pair<std::string, Tensor>> items_;
};

struct Linear {
    Tensor w;  // in x out
    Tensor b;  // 1 x out

    Linear() = default;
    Linear(ParamRegistry& reg, const std::string& prefix, int in, int out, Rng& rng);
    Tensor forward(const Tensor& x) const { return add_rowvec(matmul(x, w), b); }
};

struct LayerNorm {
    Tensor gamma;
    Tensor beta;

    LayerNorm() = default;
    LayerNorm(ParamRegistry& reg, const std::string& prefix, int dim, Rng& rng);
    Tensor forward(const Tensor& x) const { return layer_norm_rows(x, gamma, beta); }
};

struct AttentionOptions {
    bool force_uniform = false;            // replace attention weights by 1/K (diagnostics)
    std::vector<Tensor>* capture = nullptr;  // receives per-head probability matrices
};

// Multi-head attention; same projections serve self- (q == kv) and
// cross-attention (q != kv).
struct MultiHeadAttention {
    Linear wq, wk, wv, wo;
    int num_heads = 1;
    int head_dim = 1;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamRegistry& reg, const std::string& prefix, int dim,
                       int num_heads, Rng& rng);
    Tensor forward(const Tensor& q_in, const Tensor& kv_in,
                   const AttentionOptions& opts = {}) const;
};

struct Mlp {
    Linear fc1, fc2;

    Mlp() = default;
    Mlp(ParamRegistry& reg, const std::string& prefix, int dim, int hidden, Rng& rng);
    Tensor forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }
};

// Pre-LN encoder block: x += attn(ln1(x)); x += mlp(ln2(x)).
struct EncoderBlock {
    LayerNorm ln1, ln2;
    MultiHeadAttention attn;
    Mlp mlp;

    EncoderBlock() = default;
    EncoderBlock(ParamRegistry& reg, const std::string& prefix, int dim, int num_heads,
                 Rng& rng);
    Tensor forward(const Tensor& x) const;
};

// Pre-LN decoder block with cross-attention between self-attention and MLP.
struct DecoderBlock {
    LayerNorm ln1, ln2, ln3;
    MultiHeadAttention self_attn;
    MultiHeadAttention cross_attn;
    Mlp mlp;

    DecoderBlock() = default;
    DecoderBlock(ParamRegistry& reg, const std::string& prefix, int dim, int num_heads,
                 Rng& rng);
    Tensor forward(const Tensor& x, const Tensor& kv,
                   const AttentionOptions& cross_opts = {}) const;

    // copy with fresh parameters initialized from this block's current values,
    // except the cross-attention key/value projections, which are shared
    DecoderBlock replicate(ParamRegistry& reg, const std::string& prefix) const;
};

}  // namespace vicha
