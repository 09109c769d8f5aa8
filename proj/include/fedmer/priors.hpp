#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fedmer/tensor.hpp"

namespace fedmer {

struct ConfigError : std::runtime_error {
    std::string field;
    ConfigError(std::string field_path, const std::string& msg)
        : std::runtime_error(field_path + ": " + msg), field(std::move(field_path)) {}
};

struct SquareMat {
    std::size_t n = 0;
    std::vector<double> m;

    SquareMat() = default;
    explicit SquareMat(std::size_t size) : n(size), m(size * size, 0.0) {}
    double& operator()(std::size_t i, std::size_t j) { return m[i * n + j]; }
    double operator()(std::size_t i, std::size_t j) const { return m[i * n + j]; }
};

enum class FaceRegion : std::uint8_t { upper, lower };

// The 12 action units the network models, their group structure, and the
// ROI membership of each group. Group sizes follow the shipped default
// layout: (23, 48, 38, 52) ROIs and (3, 3, 2, 4) AUs per group; groups 1-2
// cover the upper face, 3-4 the lower face. Test configs may use smaller
// catalogs; nothing below hard-codes 12 except the default.
struct AuCatalog {
    std::vector<int> au_ids;                    // e.g. {1,2,4,5,6,7,9,10,12,14,15,17}
    std::vector<int> group_of_au;               // AU index -> group index (0-based)
    std::vector<FaceRegion> region_of_au;       // derived from the group
    std::vector<std::vector<std::size_t>> roi_groups;  // group -> ROI ids (may overlap)
    std::vector<std::size_t> au_count_of_group;

    std::size_t au_count() const { return au_ids.size(); }
    std::size_t group_count() const { return roi_groups.size(); }
    // AU indices (0-based positions) belonging to one region, in catalog order
    std::vector<std::size_t> region_nodes(FaceRegion r) const;
    // position of an AU id in the catalog; throws ConfigError when unknown
    std::size_t index_of(int au_id) const;

    void validate() const;
};

struct BetaSchedule {
    enum class Kind { constant, linear, cosine };
    Kind kind = Kind::linear;
    double start = 0.5;
    double end = 0.0;
    std::size_t horizon = 1;

    // value at step t; t past the horizon clamps to the end value
    double at(std::size_t t) const;

    static Kind kind_from_string(const std::string& s);
    static std::string kind_to_string(Kind k);
};

// Adjacency prior A (symmetric 0/1, zero diagonal), data prior D
// (row-stochastic on A's support), and the mixing schedule.
struct PriorPack {
    SquareMat A;
    SquareMat D;
    BetaSchedule beta;
    std::vector<std::string> warnings;  // fallbacks and normalizations applied

    void validate() const;
};

// PriorPack with intra-region edges removed; rows that lost all neighbors
// are listed in `isolated`.
struct MaskedPack {
    PriorPack pack;
    std::vector<std::size_t> isolated;
};

// Declarative prior config: AU catalog, coordinated pairs, beta schedule.
struct PriorConfig {
    std::vector<int> au_ids;
    std::vector<std::pair<int, int>> coordinated_pairs;
    BetaSchedule beta;

    static PriorConfig from_json_text(const std::string& text);
    static PriorConfig from_file(const std::string& path);
};

// The shipped default: coordinated AU pairs from FACS basic-emotion
// prototypes (brow raise 1+2, Duchenne smile 6+12, disgust 4+9/9+10, ...).
PriorConfig default_prior_config();

// builds A from the coordinated pair list (symmetrized, zero diagonal) and
// seeds D as uniform over each row's neighbors
PriorPack load_adjacency(const PriorConfig& config);

// D[i][j] = count(i and j) / count(i), masked to A's support, diagonal
// zeroed, rows renormalized; empty rows fall back to uniform over A-neighbors
SquareMat compute_cooccurrence(const std::vector<std::vector<std::uint8_t>>& au_labels,
                               const SquareMat& A, std::vector<std::string>* warnings = nullptr);

MaskedPack mask_intra_region(const PriorPack& pack, const AuCatalog& catalog);

// sub-pack over a node subset (upper or lower face); D rows renormalize over
// the surviving support
PriorPack restrict_to(const PriorPack& pack, const std::vector<std::size_t>& nodes);

// all-ones off-diagonal adjacency over n nodes (prior ablation)
SquareMat complete_adjacency(std::size_t n);

}  // namespace fedmer
