#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedmer/priors.hpp"
#include "fedmer/rng.hpp"

namespace fedmer {

// 65 ROI centers on a unit face plane plus the ROI-to-group tables the AU
// catalog uses. Coordinates are (x, y) in [0,1]^2 with y growing downward.
struct RoiLayout {
    struct Roi {
        double x, y;
        FaceRegion region;
        std::string area;  // brow / eye / nose / mouth / cheek / chin / ...
    };
    std::vector<Roi> rois;
    std::vector<std::vector<std::size_t>> groups;  // 4 groups, sizes 23/48/38/52

    std::size_t size() const { return rois.size(); }
    static RoiLayout default_layout();
};

// how one AU writes flow into the face: exclusive primary ROIs at full
// magnitude, shared secondary ROIs attenuated
struct AuRenderRule {
    std::vector<std::size_t> primary;
    std::vector<std::size_t> secondary;
    double dir_x, dir_y;
    bool mirror_x;  // flip dir_x on the left face half (corner pulls etc.)
};

std::vector<AuRenderRule> default_render_rules();

// the default 12-AU catalog wired to the default layout's groups
AuCatalog default_catalog(const RoiLayout& layout);

struct ClassPrototype {
    std::string name;
    std::map<int, double> au_probability;  // AU id -> independent activation probability
    // coordinated AU groups: all members fire together with one shared
    // intensity draw (muscle recruitment); the pair pattern, not the
    // individual AUs, is then the class cue
    std::vector<std::pair<std::vector<int>, double>> joint_groups;
    bool single_region = false;  // explicitly upper-only / lower-only
};

struct GeneratorSpec {
    std::size_t class_count = 3;
    std::vector<ClassPrototype> prototypes;  // defaults filled when empty
    double noise_level = 0.1;                // pixel noise sigma
    double flip_noise = 0.02;                // activation probability for unlisted AUs
    std::size_t subject_count = 30;
    double subject_bias_scale = 0.5;         // heterogeneity knob
    std::size_t samples_per_subject_min = 15;
    std::size_t samples_per_subject_max = 25;
    std::size_t global_of_side = 32;
    std::uint64_t seed = 0;

    void validate(const AuCatalog& catalog) const;
};

std::vector<ClassPrototype> default_prototypes(std::size_t class_count);
// harder variant: every class can show any AU alone, only the coordinated
// pairs (with shared intensity) identify the class
std::vector<ClassPrototype> relational_prototypes(std::size_t class_count);

struct Sample {
    std::vector<double> roi_patches;      // roi_count x 3 x 5 x 5, row-major
    std::vector<double> global_of;        // 3 x S x S
    std::vector<std::uint8_t> au_labels;  // one bit per catalog AU
    int emotion = 0;
    int subject_id = 0;
};

// label phase only (cheap; used for co-occurrence statistics)
struct DrawnLabel {
    int subject_id;
    int emotion;
    std::vector<std::uint8_t> au;
    std::vector<std::uint8_t> joint_fired;  // per prototype joint group
};
std::vector<DrawnLabel> draw_labels(const GeneratorSpec& spec, const AuCatalog& catalog);

// full dataset: deterministic given the spec seed; per-subject streams are
// merged in subject order
std::vector<Sample> generate(const GeneratorSpec& spec, const RoiLayout& layout,
                             const AuCatalog& catalog);

// subjects divided equally across clients (remainder to the lowest client
// ids); all of a subject's samples stay together
std::vector<std::vector<std::size_t>> partition_clients(const std::vector<Sample>& samples,
                                                        std::size_t client_count);

struct SplitPair {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
    bool stratified = true;
};

// `repeats` independent seeded splits of one client's dataset (indices into
// the caller's sample vector); stratified when every present class has >= 2
std::vector<SplitPair> split_train_test(const std::vector<std::size_t>& dataset,
                                        const std::vector<Sample>& samples, double ratio,
                                        std::size_t repeats, std::uint64_t seed);

// binary dataset container (same conventions as the parameter wire format)
std::vector<std::uint8_t> encode_dataset(const std::vector<Sample>& samples,
                                         std::size_t of_side, std::size_t class_count);
std::vector<Sample> decode_dataset(const std::vector<std::uint8_t>& bytes, std::size_t* of_side,
                                   std::size_t* class_count);
void write_dataset_file(const std::string& path, const std::vector<Sample>& samples,
                        std::size_t of_side, std::size_t class_count);
std::vector<Sample> read_dataset_file(const std::string& path, std::size_t* of_side,
                                      std::size_t* class_count);

// per-ROI flow energy (mean squared u,v over the patch), the feature the
// probe oracle and inspect command use
std::vector<double> roi_flow_energy(const Sample& s, std::size_t roi_count);

}  // namespace fedmer
