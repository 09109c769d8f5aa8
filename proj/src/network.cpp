#include "fedmer/network.hpp"

#include <algorithm>
#include <cmath>

namespace fedmer {

void MerConfig::validate(const AuCatalog& catalog) const {
    catalog.validate();
    if (class_count < 2) throw ConfigError("model.class_count", "need at least 2 classes");
    const std::size_t side = static_cast<std::size_t>(std::lround(std::sqrt(
        static_cast<double>(gat_width))));
    if (side * side != gat_width) {
        throw ConfigError("model.gat_width", "must be a perfect square (reshaped for the "
                                             "dual-stream classifier)");
    }
    if (side < 4) {
        throw ConfigError("model.gat_width", "must be >= 16 to survive two pooling stages");
    }
    if (global_of_side < 8) throw ConfigError("model.global_of_side", "must be >= 8");
    if (global_of_side % 4 != 0) {
        throw ConfigError("model.global_of_side", "must be divisible by 4 (two pooling stages)");
    }
    if (token_width() % sse_heads != 0) {
        throw ConfigError("model.sse_heads", "token width must divide evenly across heads");
    }
    for (const auto& group : catalog.roi_groups) {
        for (std::size_t roi : group) {
            if (roi >= roi_count) {
                throw ConfigError("model.roi_count", "catalog group references ROI " +
                                                         std::to_string(roi) + " outside layout");
            }
        }
    }
}

PriorBundle make_prior_bundle(const PriorPack& pack, const AuCatalog& catalog) {
    PriorBundle b;
    b.full = pack;
    b.upper_nodes = catalog.region_nodes(FaceRegion::upper);
    b.lower_nodes = catalog.region_nodes(FaceRegion::lower);
    b.upper = restrict_to(pack, b.upper_nodes);
    b.lower = restrict_to(pack, b.lower_nodes);
    b.global = mask_intra_region(pack, catalog);
    return b;
}

Tensor au_loss(const Tensor& logits, const Tensor& labels) { return bce_logits_mean(logits, labels); }

Tensor mer_loss(const Tensor& ce, const Tensor& la_afe, const Tensor& la_gat,
                const LossWeights& w) {
    if (ce.item() < 0.0 || la_afe.item() < 0.0 || la_gat.item() < 0.0) {
        throw ContractError("mer_loss: loss terms must be non-negative");
    }
    return add(add(mul_scalar(ce, w.alpha1), mul_scalar(la_afe, w.alpha2)),
               mul_scalar(la_gat, w.alpha3));
}

MerNetwork::MerNetwork(const MerConfig& cfg, const AuCatalog& catalog, std::uint64_t init_seed)
    : cfg_(cfg), catalog_(catalog) {
    cfg_.validate(catalog_);
    Rng rng(hash_seed(init_seed, "model-init"));

    const std::size_t width = cfg_.token_width();
    const std::size_t au_count = catalog_.au_count();
    gat_side_ = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(cfg_.gat_width))));

    lfe_ = LfeBlock(params_, "lfe", cfg_.patch_channels, cfg_.lfe_mid1, cfg_.lfe_mid2, rng);
    sse_ = SseEncoder(params_, "sse", cfg_.roi_count, width, cfg_.sse_heads, 2 * width, rng);
    for (std::size_t g = 0; g < catalog_.group_count(); ++g) {
        const std::string gp = "group" + std::to_string(g + 1);
        gse_.emplace_back(params_, gp + ".gse", cfg_.patch_channels, rng);
        afe_.emplace_back(params_, gp + ".afe", catalog_.roi_groups[g].size(),
                          catalog_.au_count_of_group[g], cfg_.patch_channels, cfg_.patch_size, rng);
    }
    afe_head_ = LinearLayer(params_, "afe_head", au_count * cfg_.patch_channels, au_count, rng);

    gat_upper_ = DpkGat(params_, "gat_upper", cfg_.gat_heads, width, cfg_.gat_width,
                        cfg_.leaky_slope, rng);
    gat_lower_ = DpkGat(params_, "gat_lower", cfg_.gat_heads, width, cfg_.gat_width,
                        cfg_.leaky_slope, rng);
    gat_global_ = DpkGat(params_, "gat_global", cfg_.gat_heads, cfg_.gat_width, cfg_.gat_width,
                         cfg_.leaky_slope, rng);
    gat_head_ = LinearLayer(params_, "gat_head", au_count * cfg_.gat_width, au_count, rng);

    const std::size_t bc = cfg_.inception_channels;
    inc_au1_ = InceptionBlock(params_, "dsi.au1", au_count, bc, rng);
    inc_au2_ = InceptionBlock(params_, "dsi.au2", InceptionBlock::out_channels(bc), bc, rng);
    inc_of1_ = InceptionBlock(params_, "dsi.of1", cfg_.patch_channels, bc, rng);
    inc_of2_ = InceptionBlock(params_, "dsi.of2", InceptionBlock::out_channels(bc), bc, rng);

    // two 2x2/stride-2 pools per stream: n -> floor(n/2) each stage
    const std::size_t au_side = (gat_side_ / 2) / 2;
    const std::size_t of_side = cfg_.global_of_side / 4;
    const std::size_t au_flat = InceptionBlock::out_channels(bc) * au_side * au_side;
    const std::size_t of_flat = InceptionBlock::out_channels(bc) * of_side * of_side;
    fused_width_ = au_flat + of_flat;
    classifier_ = LinearLayer(params_, "classifier", fused_width_, cfg_.class_count, rng);

    // the global GAT runs on h_local's row order: upper nodes then lower
    node_order_ = catalog_.region_nodes(FaceRegion::upper);
    const auto lower = catalog_.region_nodes(FaceRegion::lower);
    node_order_.insert(node_order_.end(), lower.begin(), lower.end());
    inverse_order_.assign(node_order_.size(), 0);
    for (std::size_t i = 0; i < node_order_.size(); ++i) inverse_order_[node_order_[i]] = i;
}

MerOutputs MerNetwork::forward(const Sample& sample, const PriorBundle& priors, double beta,
                               const ForwardMode& mode) const {
    const std::size_t r = cfg_.roi_count;
    const std::size_t c = cfg_.patch_channels;
    const std::size_t p = cfg_.patch_size;
    const std::size_t width = cfg_.token_width();
    const std::size_t au_count = catalog_.au_count();

    if (sample.roi_patches.size() != r * c * p * p) {
        throw DimensionError("forward: sample has " + std::to_string(sample.roi_patches.size()) +
                             " patch values, expected " + std::to_string(r * c * p * p));
    }
    if (sample.global_of.size() != 3 * cfg_.global_of_side * cfg_.global_of_side) {
        throw DimensionError("forward: global flow map size mismatch");
    }
    const double eff_beta = cfg_.use_data_prior ? beta : 0.0;

    // LRM: per-ROI convolutional features, then the structure encoder
    Tensor patches = Tensor::from({r, c, p, p}, sample.roi_patches);
    Tensor phi = lfe_.forward(patches, mode);
    Tensor z = sse_.forward(reshape(phi, {r, width}));

    // AFR stage 1: group attention + AU feature extraction
    std::vector<Tensor> group_feats;
    for (std::size_t g = 0; g < catalog_.group_count(); ++g) {
        Tensor rg = reshape(gather_rows(z, catalog_.roi_groups[g]),
                            {catalog_.roi_groups[g].size(), c, p, p});
        Tensor attended = gse_[g].forward(rg);
        group_feats.push_back(afe_[g].forward(attended, mode));
    }
    Tensor au_feats = concat(group_feats, 0);  // (au_count, c, p, p)
    Tensor afe_logits =
        flatten(afe_head_.forward(reshape(mean_pool_spatial(au_feats), {1, au_count * c})));

    // AFR stage 2: regional then cross-regional graph attention
    Tensor au_tokens = reshape(au_feats, {au_count, width});
    Tensor h_upper = gat_upper_.forward(gather_rows(au_tokens, priors.upper_nodes), priors.upper,
                                        eff_beta);
    Tensor h_lower = gat_lower_.forward(gather_rows(au_tokens, priors.lower_nodes), priors.lower,
                                        eff_beta);
    Tensor h_local = concat({h_upper, h_lower}, 0);  // rows follow node_order_

    PriorPack global_perm = restrict_to(priors.global.pack, node_order_);
    Tensor h_global_perm = gat_global_.forward(h_local, global_perm, eff_beta);
    Tensor h_global = gather_rows(h_global_perm, inverse_order_);  // back to catalog order
    Tensor gat_logits =
        flatten(gat_head_.forward(reshape(h_global, {1, au_count * cfg_.gat_width})));

    // DSI: AU-relationship stream and global optical-flow stream
    Tensor au_img = reshape(h_global, {1, au_count, gat_side_, gat_side_});
    Tensor a = max_pool2d(inc_au1_.forward(au_img), 2, 2, 0);
    a = max_pool2d(inc_au2_.forward(a), 2, 2, 0);
    Tensor of_img = Tensor::from({1, 3, cfg_.global_of_side, cfg_.global_of_side},
                                 sample.global_of);
    Tensor o = max_pool2d(inc_of1_.forward(of_img), 2, 2, 0);
    o = max_pool2d(inc_of2_.forward(o), 2, 2, 0);
    Tensor fused = concat({flatten(a), flatten(o)}, 0);
    Tensor logits = flatten(classifier_.forward(reshape(fused, {1, fused_width_})));

    return {logits, afe_logits, gat_logits};
}

Tensor MerNetwork::loss(const Sample& sample, const PriorBundle& priors, double beta,
                        const ForwardMode& mode) const {
    MerOutputs out = forward(sample, priors, beta, mode);
    if (sample.au_labels.size() != catalog_.au_count()) {
        throw ContractError("loss: AU label width does not match catalog");
    }
    if (sample.emotion < 0 || static_cast<std::size_t>(sample.emotion) >= cfg_.class_count) {
        throw ContractError("loss: emotion class out of range");
    }
    std::vector<double> labels(sample.au_labels.begin(), sample.au_labels.end());
    const std::size_t label_count = labels.size();
    Tensor y = Tensor::from({label_count}, std::move(labels));
    Tensor ce = cross_entropy_logits(out.emotion_logits, static_cast<std::size_t>(sample.emotion));
    Tensor la_afe = au_loss(out.au_logits_afe, y);
    Tensor la_gat = au_loss(out.au_logits_gat, y);
    return mer_loss(ce, la_afe, la_gat, cfg_.loss_weights);
}

int MerNetwork::predict(const Sample& sample, const PriorBundle& priors, double beta) const {
    NoGradGuard no_grad;
    ForwardMode mode;
    mode.training = false;
    mode.update_stats = false;
    MerOutputs out = forward(sample, priors, beta, mode);
    const auto& v = out.emotion_logits.value();
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace fedmer
