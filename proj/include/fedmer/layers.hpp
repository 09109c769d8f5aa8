#pragma once

#include <string>
#include <vector>

#include "fedmer/ops.hpp"
#include "fedmer/param_set.hpp"
#include "fedmer/priors.hpp"
#include "fedmer/rng.hpp"

namespace fedmer {

// batch-norm behavior: training uses batch statistics, evaluation uses the
// running ones; update_stats=false keeps forward passes pure (gradient checks)
struct ForwardMode {
    bool training = true;
    bool update_stats = true;
};

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng);
Tensor normal_init(Shape shape, double stddev, Rng& rng);

struct Conv2d {
    Tensor w, b;
    std::size_t pad = 0;

    Conv2d() = default;
    Conv2d(ParamSet& ps, const std::string& prefix, std::size_t in_ch, std::size_t out_ch,
           std::size_t kernel, std::size_t pad, Rng& rng);
    Tensor forward(const Tensor& x) const { return conv2d(x, w, b, pad); }
};

struct LinearLayer {
    Tensor w, b;

    LinearLayer() = default;
    LinearLayer(ParamSet& ps, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng);
    Tensor forward(const Tensor& x) const { return linear(x, w, b); }
};

struct BatchNorm2d {
    Tensor gamma, beta, run_mean, run_var;
    double momentum = 0.1;
    double eps = 1e-5;

    BatchNorm2d() = default;
    BatchNorm2d(ParamSet& ps, const std::string& prefix, std::size_t channels);
    Tensor forward(const Tensor& x, const ForwardMode& mode) const;
};

struct LayerNorm {
    Tensor gamma, beta;
    double eps = 1e-5;

    LayerNorm() = default;
    LayerNorm(ParamSet& ps, const std::string& prefix, std::size_t width);
    Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }
};

// local ROI feature extractor: three 3x3 conv+BN+ReLU stages, padding 1 so
// the 5x5 patch size survives; channels 3 -> mid1 -> mid2 -> 3
struct LfeBlock {
    Conv2d c1, c2, c3;
    BatchNorm2d n1, n2, n3;

    LfeBlock() = default;
    LfeBlock(ParamSet& ps, const std::string& prefix, std::size_t in_ch, std::size_t mid1,
             std::size_t mid2, Rng& rng);
    Tensor forward(const Tensor& x, const ForwardMode& mode) const;
};

// spatial structure encoder: one pre-norm-free transformer encoder layer
// (multi-head attention + residual + LayerNorm, FFN + residual + LayerNorm)
// over one token per ROI with a learned positional embedding
struct SseEncoder {
    std::size_t token_count = 0;
    std::size_t width = 0;
    std::size_t heads = 0;
    std::size_t head_dim = 0;
    Tensor pos_embed;
    std::vector<LinearLayer> wq, wk, wv;
    LinearLayer wo;
    LayerNorm ln1, ln2;
    LinearLayer ffn1, ffn2;
    mutable std::vector<Tensor> last_attention;  // per head, detached

    SseEncoder() = default;
    SseEncoder(ParamSet& ps, const std::string& prefix, std::size_t token_count, std::size_t width,
               std::size_t heads, std::size_t ffn_hidden, Rng& rng);
    Tensor forward(const Tensor& tokens) const;  // (T,width) -> (T,width)
};

// group squeeze-and-excitation: per-ROI channel weights from pooled features
// through a shared FC + sigmoid, applied with a residual (w*Z + Z)
struct GseBlock {
    LinearLayer fc;

    GseBlock() = default;
    GseBlock(ParamSet& ps, const std::string& prefix, std::size_t channels, Rng& rng);
    // override_watt, when given, replaces the computed attention weights
    Tensor forward(const Tensor& group, const Tensor* override_watt = nullptr) const;
};

// AU feature extractor for one ROI group: the group's features stack on the
// channel axis, a 3x3 conv doubles the channels, a 1x1 conv maps down to one
// feature block per AU
struct AfeBlock {
    std::size_t roi_count = 0;
    std::size_t au_count = 0;
    std::size_t channels = 0;
    std::size_t spatial = 0;
    Conv2d c1, c2;
    BatchNorm2d n1, n2;

    AfeBlock() = default;
    AfeBlock(ParamSet& ps, const std::string& prefix, std::size_t roi_count, std::size_t au_count,
             std::size_t channels, std::size_t spatial, Rng& rng);
    Tensor forward(const Tensor& attended, const ForwardMode& mode) const;
};

// one graph-attention layer with a psychological adjacency mask and a
// data-prior mixture: score masked by A, softmax over neighbors, mixed with
// D by weight beta, aggregated, ELU, plus the projected-feature residual
struct GatLayer {
    std::size_t heads = 0;
    std::size_t in_width = 0;
    std::size_t head_width = 0;
    bool average_heads = false;
    double leaky_slope = 0.2;
    std::vector<Tensor> w;       // per head (in,width)
    std::vector<Tensor> a_self;  // per head (width)
    std::vector<Tensor> a_peer;
    mutable std::vector<Tensor> last_attention;  // per head (N,N), detached

    GatLayer() = default;
    GatLayer(ParamSet& ps, const std::string& prefix, std::size_t heads, std::size_t in_width,
             std::size_t head_width, bool average_heads, double leaky_slope, Rng& rng);
    Tensor forward(const Tensor& nodes, const SquareMat& A, const SquareMat& D, double beta) const;
    std::size_t out_width() const { return average_heads ? head_width : heads * head_width; }
};

// two-layer GAT stack; heads concatenate after layer 1 and average after
// layer 2, both layers share the same priors and beta
struct DpkGat {
    GatLayer l1, l2;

    DpkGat() = default;
    DpkGat(ParamSet& ps, const std::string& prefix, std::size_t heads, std::size_t in_width,
           std::size_t head_width, double leaky_slope, Rng& rng);
    Tensor forward(const Tensor& nodes, const PriorPack& pack, double beta) const;
};

// four parallel branches (1x1, 3x3, 5x5, 3x3-pool + 1x1), ReLU after each
// conv, outputs concatenated on channels
struct InceptionBlock {
    Conv2d b1, b2, b3, b4;

    InceptionBlock() = default;
    InceptionBlock(ParamSet& ps, const std::string& prefix, std::size_t in_ch,
                   std::size_t branch_ch, Rng& rng);
    Tensor forward(const Tensor& x) const;
    static std::size_t out_channels(std::size_t branch_ch) { return 4 * branch_ch; }
};

}  // namespace fedmer
