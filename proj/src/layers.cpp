#include "fedmer/layers.hpp"

#include <cmath>

namespace fedmer {

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    return normal_init(std::move(shape), stddev, rng);
}

Tensor normal_init(Shape shape, double stddev, Rng& rng) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = stddev * rng.normal();
    return Tensor::from(std::move(shape), std::move(v));
}

Conv2d::Conv2d(ParamSet& ps, const std::string& prefix, std::size_t in_ch, std::size_t out_ch,
               std::size_t kernel, std::size_t pad_, Rng& rng)
    : pad(pad_) {
    w = ps.add(prefix + ".weight",
               he_normal({out_ch, in_ch, kernel, kernel}, in_ch * kernel * kernel, rng));
    b = ps.add(prefix + ".bias", Tensor::zeros({out_ch}));
}

LinearLayer::LinearLayer(ParamSet& ps, const std::string& prefix, std::size_t in, std::size_t out,
                         Rng& rng) {
    w = ps.add(prefix + ".weight", he_normal({in, out}, in, rng));
    b = ps.add(prefix + ".bias", Tensor::zeros({out}));
}

BatchNorm2d::BatchNorm2d(ParamSet& ps, const std::string& prefix, std::size_t channels) {
    gamma = ps.add(prefix + ".gamma", Tensor::full({channels}, 1.0));
    beta = ps.add(prefix + ".beta", Tensor::zeros({channels}));
    run_mean = ps.add(prefix + ".running_mean", Tensor::zeros({channels}), /*trainable=*/false);
    run_var = ps.add(prefix + ".running_var", Tensor::full({channels}, 1.0), /*trainable=*/false);
}

Tensor BatchNorm2d::forward(const Tensor& x, const ForwardMode& mode) const {
    Tensor rm = run_mean, rv = run_var;
    return batch_norm2d(x, gamma, beta, rm, rv, mode.training, mode.training && mode.update_stats,
                        momentum, eps);
}

LayerNorm::LayerNorm(ParamSet& ps, const std::string& prefix, std::size_t width) {
    gamma = ps.add(prefix + ".gamma", Tensor::full({width}, 1.0));
    beta = ps.add(prefix + ".beta", Tensor::zeros({width}));
}

LfeBlock::LfeBlock(ParamSet& ps, const std::string& prefix, std::size_t in_ch, std::size_t mid1,
                   std::size_t mid2, Rng& rng)
    : c1(ps, prefix + ".conv1", in_ch, mid1, 3, 1, rng),
      c2(ps, prefix + ".conv2", mid1, mid2, 3, 1, rng),
      c3(ps, prefix + ".conv3", mid2, in_ch, 3, 1, rng),
      n1(ps, prefix + ".bn1", mid1),
      n2(ps, prefix + ".bn2", mid2),
      n3(ps, prefix + ".bn3", in_ch) {}

Tensor LfeBlock::forward(const Tensor& x, const ForwardMode& mode) const {
    Tensor h = relu(n1.forward(c1.forward(x), mode));
    h = relu(n2.forward(c2.forward(h), mode));
    return relu(n3.forward(c3.forward(h), mode));
}

SseEncoder::SseEncoder(ParamSet& ps, const std::string& prefix, std::size_t tokens,
                       std::size_t width_, std::size_t heads_, std::size_t ffn_hidden, Rng& rng)
    : token_count(tokens), width(width_), heads(heads_) {
    if (width % heads != 0) {
        throw ContractError("sse: token width " + std::to_string(width) +
                            " not divisible by head count " + std::to_string(heads));
    }
    head_dim = width / heads;
    pos_embed = ps.add(prefix + ".pos_embed", normal_init({tokens, width}, 0.02, rng));
    for (std::size_t h = 0; h < heads; ++h) {
        const std::string hp = prefix + ".head" + std::to_string(h);
        wq.emplace_back(ps, hp + ".wq", width, head_dim, rng);
        wk.emplace_back(ps, hp + ".wk", width, head_dim, rng);
        wv.emplace_back(ps, hp + ".wv", width, head_dim, rng);
    }
    wo = LinearLayer(ps, prefix + ".wo", width, width, rng);
    ln1 = LayerNorm(ps, prefix + ".ln1", width);
    ln2 = LayerNorm(ps, prefix + ".ln2", width);
    ffn1 = LinearLayer(ps, prefix + ".ffn1", width, ffn_hidden, rng);
    ffn2 = LinearLayer(ps, prefix + ".ffn2", ffn_hidden, width, rng);
}

Tensor SseEncoder::forward(const Tensor& tokens) const {
    if (tokens.rank() != 2 || tokens.dim(0) != token_count || tokens.dim(1) != width) {
        throw ContractError("sse: expected " + std::to_string(token_count) + "x" +
                            std::to_string(width) + " tokens, got " + shape_str(tokens.shape()));
    }
    Tensor x = add(tokens, pos_embed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    last_attention.clear();
    std::vector<Tensor> head_outputs;
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor q = wq[h].forward(x);
        Tensor k = wk[h].forward(x);
        Tensor v = wv[h].forward(x);
        Tensor scores = mul_scalar(matmul(q, transpose(k)), scale);
        Tensor att = softmax_rows(scores);
        last_attention.push_back(Tensor::from(att.shape(), att.value()));
        head_outputs.push_back(matmul(att, v));
    }
    Tensor attended = wo.forward(concat(head_outputs, 1));
    Tensor h1 = ln1.forward(add(x, attended));
    Tensor ff = ffn2.forward(relu(ffn1.forward(h1)));
    return ln2.forward(add(h1, ff));
}

GseBlock::GseBlock(ParamSet& ps, const std::string& prefix, std::size_t channels, Rng& rng) {
    fc = LinearLayer(ps, prefix + ".fc", channels, channels, rng);
}

Tensor GseBlock::forward(const Tensor& group, const Tensor* override_watt) const {
    if (group.rank() != 4) {
        throw ContractError("gse: expected (N,C,H,W), got " + shape_str(group.shape()));
    }
    if (group.dim(0) == 0) throw ContractError("gse: empty ROI group");
    Tensor watt;
    if (override_watt != nullptr) {
        watt = *override_watt;
        if (watt.shape() != Shape{group.dim(0), group.dim(1)}) {
            throw ContractError("gse: override weights have wrong shape " +
                                shape_str(watt.shape()));
        }
    } else {
        watt = sigmoid(fc.forward(mean_pool_spatial(group)));
    }
    return add(scale_channels(group, watt), group);
}

AfeBlock::AfeBlock(ParamSet& ps, const std::string& prefix, std::size_t roi_count_,
                   std::size_t au_count_, std::size_t channels_, std::size_t spatial_, Rng& rng)
    : roi_count(roi_count_), au_count(au_count_), channels(channels_), spatial(spatial_) {
    const std::size_t stacked = channels * roi_count;
    c1 = Conv2d(ps, prefix + ".conv1", stacked, 2 * stacked, 3, 1, rng);
    n1 = BatchNorm2d(ps, prefix + ".bn1", 2 * stacked);
    c2 = Conv2d(ps, prefix + ".conv2", 2 * stacked, channels * au_count, 1, 0, rng);
    n2 = BatchNorm2d(ps, prefix + ".bn2", channels * au_count);
}

Tensor AfeBlock::forward(const Tensor& attended, const ForwardMode& mode) const {
    if (attended.shape() != Shape{roi_count, channels, spatial, spatial}) {
        throw ContractError("afe: expected " + std::to_string(roi_count) + " ROI features, got " +
                            shape_str(attended.shape()));
    }
    Tensor stacked = reshape(attended, {1, roi_count * channels, spatial, spatial});
    Tensor h = relu(n1.forward(c1.forward(stacked), mode));
    h = relu(n2.forward(c2.forward(h), mode));
    return reshape(h, {au_count, channels, spatial, spatial});
}

GatLayer::GatLayer(ParamSet& ps, const std::string& prefix, std::size_t heads_,
                   std::size_t in_width_, std::size_t head_width_, bool average_heads_,
                   double leaky_slope_, Rng& rng)
    : heads(heads_),
      in_width(in_width_),
      head_width(head_width_),
      average_heads(average_heads_),
      leaky_slope(leaky_slope_) {
    const double att_std = std::sqrt(1.0 / static_cast<double>(head_width));
    for (std::size_t h = 0; h < heads; ++h) {
        const std::string hp = prefix + ".head" + std::to_string(h);
        w.push_back(ps.add(hp + ".weight", he_normal({in_width, head_width}, in_width, rng)));
        a_self.push_back(ps.add(hp + ".a_self", normal_init({head_width}, att_std, rng)));
        a_peer.push_back(ps.add(hp + ".a_peer", normal_init({head_width}, att_std, rng)));
    }
}

Tensor GatLayer::forward(const Tensor& nodes, const SquareMat& A, const SquareMat& D,
                         double beta) const {
    if (nodes.rank() != 2 || nodes.dim(1) != in_width) {
        throw ContractError("gat: expected (N," + std::to_string(in_width) + ") nodes, got " +
                            shape_str(nodes.shape()));
    }
    const std::size_t n = nodes.dim(0);
    if (A.n != n || D.n != n) {
        throw ContractError("gat: prior dimension " + std::to_string(A.n) +
                            " does not match node count " + std::to_string(n));
    }
    if (beta < 0.0 || beta > 1.0) throw ContractError("gat: beta outside [0,1]");
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (A(i, j) == 0.0 && D(i, j) != 0.0) {
                throw ContractError("gat: D has support outside A");
            }
        }
    }
    Tensor mask = Tensor::from({n, n}, A.m);
    Tensor dmat = Tensor::from({n, n}, D.m);

    last_attention.clear();
    std::vector<Tensor> head_outputs;
    head_outputs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor f = matmul(nodes, w[h]);
        Tensor s_self = flatten(matmul(f, reshape(a_self[h], {head_width, 1})));
        Tensor s_peer = flatten(matmul(f, reshape(a_peer[h], {head_width, 1})));
        Tensor e = leaky_relu(outer_sum(s_self, s_peer), leaky_slope);
        Tensor att = masked_softmax_rows(e, mask);
        Tensor alpha = add(mul_scalar(att, 1.0 - beta), mul_scalar(dmat, beta));
        last_attention.push_back(Tensor::from(alpha.shape(), alpha.value()));
        head_outputs.push_back(add(elu(matmul(alpha, f)), f));
    }
    if (!average_heads) return concat(head_outputs, 1);
    Tensor sum = head_outputs[0];
    for (std::size_t h = 1; h < heads; ++h) sum = add(sum, head_outputs[h]);
    return mul_scalar(sum, 1.0 / static_cast<double>(heads));
}

DpkGat::DpkGat(ParamSet& ps, const std::string& prefix, std::size_t heads, std::size_t in_width,
               std::size_t head_width, double leaky_slope, Rng& rng)
    : l1(ps, prefix + ".layer1", heads, in_width, head_width, /*average_heads=*/false, leaky_slope,
         rng),
      l2(ps, prefix + ".layer2", heads, heads * head_width, head_width, /*average_heads=*/true,
         leaky_slope, rng) {}

Tensor DpkGat::forward(const Tensor& nodes, const PriorPack& pack, double beta) const {
    Tensor h = l1.forward(nodes, pack.A, pack.D, beta);
    return l2.forward(h, pack.A, pack.D, beta);
}

InceptionBlock::InceptionBlock(ParamSet& ps, const std::string& prefix, std::size_t in_ch,
                               std::size_t branch_ch, Rng& rng)
    : b1(ps, prefix + ".b1x1", in_ch, branch_ch, 1, 0, rng),
      b2(ps, prefix + ".b3x3", in_ch, branch_ch, 3, 1, rng),
      b3(ps, prefix + ".b5x5", in_ch, branch_ch, 5, 2, rng),
      b4(ps, prefix + ".bpool", in_ch, branch_ch, 1, 0, rng) {}

Tensor InceptionBlock::forward(const Tensor& x) const {
    std::vector<Tensor> branches;
    branches.push_back(relu(b1.forward(x)));
    branches.push_back(relu(b2.forward(x)));
    branches.push_back(relu(b3.forward(x)));
    branches.push_back(relu(b4.forward(max_pool2d(x, 3, 1, 1))));
    return concat(branches, 1);
}

}  // namespace fedmer
