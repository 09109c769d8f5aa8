#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fedmer/datagen.hpp"
#include "fedmer/layers.hpp"
#include "fedmer/param_set.hpp"
#include "fedmer/priors.hpp"

namespace fedmer {

struct LossWeights {
    double alpha1 = 0.2;  // emotion cross-entropy
    double alpha2 = 0.8;  // AU loss after AFE
    double alpha3 = 0.8;  // AU loss after the global GAT
};

struct MerConfig {
    std::size_t roi_count = 65;
    std::size_t patch_channels = 3;
    std::size_t patch_size = 5;
    std::size_t class_count = 3;
    std::size_t global_of_side = 32;
    std::size_t lfe_mid1 = 32;
    std::size_t lfe_mid2 = 64;
    std::size_t sse_heads = 3;
    std::size_t gat_heads = 3;
    std::size_t gat_width = 64;  // per-head width; must be a perfect square
    double leaky_slope = 0.2;
    std::size_t inception_channels = 8;
    LossWeights loss_weights;
    bool use_psych_prior = true;  // off: adjacency becomes all-ones
    bool use_data_prior = true;   // off: the D mixing term is dropped

    std::size_t token_width() const { return patch_channels * patch_size * patch_size; }
    void validate(const AuCatalog& catalog) const;
};

// the adjacency/attention priors in every form the network consumes;
// immutable after construction
struct PriorBundle {
    PriorPack full;
    PriorPack upper;
    PriorPack lower;
    MaskedPack global;
    std::vector<std::size_t> upper_nodes;  // catalog AU indices per region
    std::vector<std::size_t> lower_nodes;
};

PriorBundle make_prior_bundle(const PriorPack& pack, const AuCatalog& catalog);

struct MerOutputs {
    Tensor emotion_logits;  // (class_count)
    Tensor au_logits_afe;   // (au_count)
    Tensor au_logits_gat;   // (au_count)
};

// mean over AUs of the stable binary cross-entropy with logits
Tensor au_loss(const Tensor& logits, const Tensor& labels);
// alpha1*ce + alpha2*la_afe + alpha3*la_gat
Tensor mer_loss(const Tensor& ce, const Tensor& la_afe, const Tensor& la_gat,
                const LossWeights& w);

// LRM (LFE + SSE) -> AFR (GSE + AFE + upper/lower/global DPK-GAT) -> DSI
class MerNetwork {
public:
    MerNetwork(const MerConfig& cfg, const AuCatalog& catalog, std::uint64_t init_seed);

    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }
    const MerConfig& config() const { return cfg_; }
    const AuCatalog& catalog() const { return catalog_; }

    MerOutputs forward(const Sample& sample, const PriorBundle& priors, double beta,
                       const ForwardMode& mode) const;
    // L_MER for one sample
    Tensor loss(const Sample& sample, const PriorBundle& priors, double beta,
                const ForwardMode& mode) const;
    // argmax emotion under eval mode, no graph
    int predict(const Sample& sample, const PriorBundle& priors, double beta) const;

    // test hooks: attention rows recorded during the latest forward
    const DpkGat& upper_gat() const { return gat_upper_; }
    const DpkGat& lower_gat() const { return gat_lower_; }
    const DpkGat& global_gat() const { return gat_global_; }
    const SseEncoder& sse() const { return sse_; }
    // node order used inside the global GAT (upper nodes then lower nodes)
    const std::vector<std::size_t>& local_node_order() const { return node_order_; }

private:
    MerConfig cfg_;
    AuCatalog catalog_;
    ParamSet params_;

    LfeBlock lfe_;
    SseEncoder sse_;
    std::vector<GseBlock> gse_;
    std::vector<AfeBlock> afe_;
    LinearLayer afe_head_;
    DpkGat gat_upper_, gat_lower_, gat_global_;
    LinearLayer gat_head_;
    InceptionBlock inc_au1_, inc_au2_, inc_of1_, inc_of2_;
    LinearLayer classifier_;

    std::vector<std::size_t> node_order_;    // upper ++ lower (catalog indices)
    std::vector<std::size_t> inverse_order_; // catalog index -> row in node order
    std::size_t gat_side_ = 0;               // sqrt(gat_width)
    std::size_t fused_width_ = 0;
};

}  // namespace fedmer
