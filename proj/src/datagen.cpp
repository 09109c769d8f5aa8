#include "fedmer/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "fedmer/wire.hpp"

namespace fedmer {

namespace {

constexpr std::size_t kPatch = 5;
constexpr std::size_t kPatchChannels = 3;
constexpr double kSecondaryAttenuation = 0.35;

void add_area(std::vector<RoiLayout::Roi>& rois, std::initializer_list<std::pair<double, double>> pts,
              FaceRegion region, const char* area) {
    for (auto [x, y] : pts) rois.push_back({x, y, region, area});
}

}  // namespace

RoiLayout RoiLayout::default_layout() {
    RoiLayout layout;
    auto& r = layout.rois;
    r.reserve(65);
    // 0-4 left brow, 5-9 right brow
    add_area(r, {{0.15, 0.22}, {0.22, 0.22}, {0.29, 0.22}, {0.36, 0.22}, {0.42, 0.22}},
             FaceRegion::upper, "brow");
    add_area(r, {{0.58, 0.22}, {0.64, 0.22}, {0.71, 0.22}, {0.78, 0.22}, {0.85, 0.22}},
             FaceRegion::upper, "brow");
    // 10-15 left eye (corners, upper lid, lower lid), 16-21 right eye
    add_area(r, {{0.19, 0.35}, {0.37, 0.35}, {0.24, 0.32}, {0.32, 0.32}, {0.24, 0.38}, {0.32, 0.38}},
             FaceRegion::upper, "eye");
    add_area(r, {{0.63, 0.35}, {0.81, 0.35}, {0.68, 0.32}, {0.76, 0.32}, {0.68, 0.38}, {0.76, 0.38}},
             FaceRegion::upper, "eye");
    // 22-30 nose: bridge, tip, base
    add_area(r,
             {{0.50, 0.38}, {0.50, 0.45}, {0.50, 0.52}, {0.50, 0.56}, {0.42, 0.58}, {0.46, 0.59},
              {0.50, 0.60}, {0.54, 0.59}, {0.58, 0.58}},
             FaceRegion::lower, "nose");
    // 31-42 outer mouth ring, 43-50 inner mouth ring
    for (int k = 0; k < 12; ++k) {
        const double th = 2.0 * 3.141592653589793 * k / 12.0;
        r.push_back({0.5 + 0.14 * std::cos(th), 0.75 + 0.06 * std::sin(th), FaceRegion::lower,
                     "mouth"});
    }
    for (int k = 0; k < 8; ++k) {
        const double th = 2.0 * 3.141592653589793 * k / 8.0;
        r.push_back({0.5 + 0.08 * std::cos(th), 0.75 + 0.03 * std::sin(th), FaceRegion::lower,
                     "mouth"});
    }
    // 51-53 left cheek, 54-56 right cheek
    add_area(r, {{0.18, 0.55}, {0.22, 0.62}, {0.28, 0.68}}, FaceRegion::lower, "cheek");
    add_area(r, {{0.82, 0.55}, {0.78, 0.62}, {0.72, 0.68}}, FaceRegion::lower, "cheek");
    // 57-59 chin
    add_area(r, {{0.42, 0.90}, {0.50, 0.92}, {0.58, 0.90}}, FaceRegion::lower, "chin");
    // 60-61 glabella, 62-64 under-eye midpoints
    add_area(r, {{0.50, 0.25}, {0.50, 0.31}}, FaceRegion::upper, "glabella");
    add_area(r, {{0.28, 0.43}, {0.72, 0.43}, {0.50, 0.41}}, FaceRegion::upper, "under_eye");

    auto ids = [](std::size_t lo, std::size_t hi) {
        std::vector<std::size_t> v(hi - lo + 1);
        std::iota(v.begin(), v.end(), lo);
        return v;
    };
    auto join = [](std::initializer_list<std::vector<std::size_t>> parts) {
        std::vector<std::size_t> v;
        for (const auto& p : parts) v.insert(v.end(), p.begin(), p.end());
        return v;
    };
    // group cardinalities 23 / 48 / 38 / 52 (groups overlap)
    layout.groups = {
        join({ids(0, 9), ids(10, 21), {60}}),                      // brows + eyes + glabella
        join({ids(10, 21), ids(0, 9), ids(51, 56), ids(31, 50)}),  // eyes + brows + cheeks + mouth
        join({ids(22, 30), ids(51, 56), ids(31, 50), ids(57, 59)}),  // nose + cheeks + mouth + chin
        join({ids(31, 50), ids(10, 21), ids(0, 9), ids(22, 30), {57}}),  // mouth + eyes + brows + nose
    };
    return layout;
}

std::vector<AuRenderRule> default_render_rules() {
    // One rule per catalog AU, in catalog order {1,2,4,5,6,7,9,10,12,14,15,17}.
    // Primary sets are mutually exclusive and no secondary set touches any
    // primary, so per-AU flow energy stays linearly separable at zero noise.
    return {
        {{4, 5, 61}, {3, 6, 64}, 0.0, -1.0, false},           // AU1 inner brow raiser
        {{0, 9}, {1, 8}, 0.0, -1.0, false},                   // AU2 outer brow raiser
        {{2, 7, 60}, {1, 3, 6, 8}, 0.0, 1.0, false},          // AU4 brow lowerer
        {{12, 13, 18, 19}, {10, 11, 16, 17}, 0.0, -1.0, false},  // AU5 upper lid raiser
        {{62, 63}, {51, 54, 10, 17}, 0.0, -1.0, false},       // AU6 cheek raiser
        {{14, 15, 20, 21}, {10, 11, 16, 17}, 0.0, -0.7, false},  // AU7 lid tightener
        {{22, 23, 25}, {24, 26, 30, 38, 42}, 0.0, -1.0, false},  // AU9 nose wrinkler
        {{39, 40, 41}, {48, 49, 50, 27, 29}, 0.0, -1.0, false},  // AU10 upper lip raiser
        {{31, 37}, {53, 56, 44, 46}, 0.8, -0.6, true},        // AU12 lip corner puller
        {{43, 47}, {44, 46, 48, 50}, -1.0, 0.1, true},        // AU14 dimpler
        {{32, 36}, {33, 34, 35}, 0.0, 1.0, false},            // AU15 lip corner depressor
        {{57, 58, 59}, {33, 34, 35, 49}, 0.0, -1.0, false},   // AU17 chin raiser
    };
}

AuCatalog default_catalog(const RoiLayout& layout) {
    AuCatalog cat;
    cat.au_ids = {1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17};
    cat.group_of_au = {0, 0, 0, 1, 1, 1, 2, 2, 3, 3, 3, 3};
    cat.region_of_au.resize(cat.au_ids.size());
    for (std::size_t i = 0; i < cat.au_ids.size(); ++i) {
        cat.region_of_au[i] = cat.group_of_au[i] <= 1 ? FaceRegion::upper : FaceRegion::lower;
    }
    cat.roi_groups = layout.groups;
    cat.au_count_of_group = {3, 3, 2, 4};
    cat.validate();
    return cat;
}

std::vector<ClassPrototype> default_prototypes(std::size_t class_count) {
    if (class_count == 3) {
        return {
            {"positive", {{6, 0.90}, {12, 0.95}, {14, 0.30}}, {}, false},
            {"negative",
             {{4, 0.85}, {7, 0.60}, {9, 0.65}, {10, 0.40}, {15, 0.35}, {17, 0.30}},
             {},
             false},
            {"surprised", {{1, 0.90}, {2, 0.85}, {5, 0.80}}, {}, true},
        };
    }
    if (class_count == 7) {
        return {
            {"happiness", {{6, 0.90}, {12, 0.95}, {14, 0.25}}, {}, false},
            {"surprise", {{1, 0.90}, {2, 0.85}, {5, 0.80}}, {}, true},
            {"disgust", {{9, 0.90}, {10, 0.70}, {4, 0.50}, {17, 0.30}}, {}, false},
            {"sadness", {{1, 0.60}, {4, 0.50}, {15, 0.85}, {17, 0.50}}, {}, false},
            {"anger", {{4, 0.90}, {7, 0.70}, {5, 0.35}, {17, 0.40}, {10, 0.30}}, {}, false},
            {"fear", {{1, 0.70}, {2, 0.60}, {4, 0.55}, {5, 0.70}, {7, 0.40}}, {}, false},
            {"contempt", {{12, 0.50}, {14, 0.90}}, {}, true},
        };
    }
    throw ConfigError("data.class_count", "no default prototypes for " +
                                              std::to_string(class_count) + " classes");
}

std::vector<ClassPrototype> relational_prototypes(std::size_t class_count) {
    if (class_count != 3) {
        throw ConfigError("data.prototype_set", "relational prototypes are defined for 3 classes");
    }
    // Each class fires one coordinated pair; the same AUs appear as
    // independent singletons in the other classes, so the marginal activation
    // of an AU carries far less class information than its pairing.
    return {
        {"positive",
         {{4, 0.35}, {9, 0.30}, {15, 0.25}, {14, 0.25}},
         {{{6, 12}, 0.85}},
         false},
        {"negative",
         {{6, 0.35}, {12, 0.35}, {7, 0.35}, {10, 0.25}, {17, 0.25}},
         {{{4, 9}, 0.85}},
         false},
        {"surprised",
         {{6, 0.30}, {12, 0.30}, {4, 0.30}, {9, 0.30}, {7, 0.25}},
         {{{1, 2}, 0.85}, {{1, 5}, 0.45}},
         false},
    };
}

void GeneratorSpec::validate(const AuCatalog& catalog) const {
    if (class_count < 2) throw ConfigError("data.class_count", "need at least 2 classes");
    if (subject_count < 1) throw ConfigError("data.subject_count", "need at least 1 subject");
    if (samples_per_subject_min < 1 || samples_per_subject_max < samples_per_subject_min) {
        throw ConfigError("data.samples_per_subject", "invalid range");
    }
    if (noise_level < 0.0) throw ConfigError("data.noise_level", "must be >= 0");
    if (flip_noise < 0.0 || flip_noise > 1.0) throw ConfigError("data.flip_noise", "must be in [0,1]");
    if (subject_bias_scale < 0.0) throw ConfigError("data.subject_bias_scale", "must be >= 0");
    if (global_of_side < 8) throw ConfigError("data.global_of_side", "must be >= 8");
    const auto protos = prototypes.empty() ? default_prototypes(class_count) : prototypes;
    if (protos.size() != class_count) {
        throw ConfigError("data.prototypes", "need one prototype per class");
    }
    for (const auto& p : protos) {
        bool upper = false, lower = false;
        auto touch = [&](int au) {
            const std::size_t idx = catalog.index_of(au);
            if (catalog.region_of_au[idx] == FaceRegion::upper) upper = true;
            if (catalog.region_of_au[idx] == FaceRegion::lower) lower = true;
        };
        for (const auto& [au, prob] : p.au_probability) {
            if (prob < 0.0 || prob > 1.0) {
                throw ConfigError("data.prototypes", p.name + ": probability out of [0,1]");
            }
            touch(au);
        }
        for (const auto& [aus, prob] : p.joint_groups) {
            if (prob < 0.0 || prob > 1.0) {
                throw ConfigError("data.prototypes", p.name + ": joint probability out of [0,1]");
            }
            if (aus.size() < 2) {
                throw ConfigError("data.prototypes", p.name + ": joint group needs >= 2 AUs");
            }
            for (int au : aus) touch(au);
        }
        if (!p.single_region && !(upper && lower)) {
            throw ConfigError("data.prototypes",
                              p.name + ": must span both regions or be marked single_region");
        }
    }
}

namespace {

double gamma_sample(Rng& rng, double alpha) {
    if (alpha < 1.0) {
        double u = rng.uniform();
        while (u <= 0.0) u = rng.uniform();
        return gamma_sample(rng, alpha + 1.0) * std::pow(u, 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x, v;
        do {
            x = rng.normal();
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        const double u = rng.uniform();
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
        if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
}

struct SubjectTraits {
    std::vector<double> class_probs;
    double gain;
    double angle;
};

SubjectTraits subject_traits(const GeneratorSpec& spec, int subject) {
    Rng rng(hash_seed(spec.seed, "subject", static_cast<std::uint64_t>(subject)));
    SubjectTraits t;
    t.class_probs.assign(spec.class_count, 1.0 / static_cast<double>(spec.class_count));
    if (spec.subject_bias_scale > 0.0) {
        const double alpha = 1.5 / spec.subject_bias_scale;
        double total = 0.0;
        for (std::size_t c = 0; c < spec.class_count; ++c) {
            t.class_probs[c] = gamma_sample(rng, alpha) + 1e-12;
            total += t.class_probs[c];
        }
        for (double& p : t.class_probs) p /= total;
    }
    t.gain = std::clamp(1.0 + spec.subject_bias_scale * 0.3 * rng.normal(), 0.3, 3.0);
    t.angle = spec.subject_bias_scale * 0.25 * rng.normal();
    return t;
}

std::size_t pick_class(Rng& rng, const std::vector<double>& probs) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t c = 0; c < probs.size(); ++c) {
        acc += probs[c];
        if (u < acc) return c;
    }
    return probs.size() - 1;
}

}  // namespace

std::vector<DrawnLabel> draw_labels(const GeneratorSpec& spec, const AuCatalog& catalog) {
    spec.validate(catalog);
    const auto protos = spec.prototypes.empty() ? default_prototypes(spec.class_count)
                                                : spec.prototypes;
    const std::size_t au_count = catalog.au_count();

    std::vector<DrawnLabel> out;
    for (std::size_t s = 0; s < spec.subject_count; ++s) {
        const SubjectTraits traits = subject_traits(spec, static_cast<int>(s));
        Rng rng(hash_seed(spec.seed, "labels", s));
        const std::size_t span = spec.samples_per_subject_max - spec.samples_per_subject_min + 1;
        const std::size_t n = spec.samples_per_subject_min + rng.below(span);
        for (std::size_t k = 0; k < n; ++k) {
            DrawnLabel d;
            d.subject_id = static_cast<int>(s);
            d.emotion = static_cast<int>(pick_class(rng, traits.class_probs));
            d.au.assign(au_count, 0);
            const auto& proto = protos[d.emotion];
            d.joint_fired.assign(proto.joint_groups.size(), 0);
            for (std::size_t g = 0; g < proto.joint_groups.size(); ++g) {
                if (rng.bernoulli(proto.joint_groups[g].second)) {
                    d.joint_fired[g] = 1;
                    for (int au : proto.joint_groups[g].first) d.au[catalog.index_of(au)] = 1;
                }
            }
            std::size_t strongest = 0;
            double strongest_p = -1.0;
            for (std::size_t a = 0; a < au_count; ++a) {
                auto it = proto.au_probability.find(catalog.au_ids[a]);
                const double p = it != proto.au_probability.end() ? it->second : spec.flip_noise;
                if (p > strongest_p) {
                    strongest_p = p;
                    strongest = a;
                }
                if (rng.bernoulli(p)) d.au[a] = 1;
            }
            // every sample carries at least one active AU
            if (std::none_of(d.au.begin(), d.au.end(), [](std::uint8_t b) { return b != 0; })) {
                if (!proto.joint_groups.empty()) {
                    d.joint_fired[0] = 1;
                    for (int au : proto.joint_groups[0].first) d.au[catalog.index_of(au)] = 1;
                } else {
                    d.au[strongest] = 1;
                }
            }
            out.push_back(std::move(d));
        }
    }
    return out;
}

namespace {

// Gaussian bump over the 5x5 patch, peak at the center
double patch_kernel(std::size_t i, std::size_t j) {
    const double di = static_cast<double>(i) - 2.0;
    const double dj = static_cast<double>(j) - 2.0;
    return std::exp(-(di * di + dj * dj) / (2.0 * 1.5 * 1.5));
}

// strain = magnitude of the spatial gradient of the (u, v) field
void fill_strain(const double* u, const double* v, std::size_t h, std::size_t w, double* strain) {
    auto grad = [&](const double* f, std::size_t i, std::size_t j, double& gx, double& gy) {
        const std::size_t jl = j > 0 ? j - 1 : j, jr = j + 1 < w ? j + 1 : j;
        const std::size_t it = i > 0 ? i - 1 : i, ib = i + 1 < h ? i + 1 : i;
        gx = (f[i * w + jr] - f[i * w + jl]) / static_cast<double>(jr - jl == 0 ? 1 : jr - jl);
        gy = (f[ib * w + j] - f[it * w + j]) / static_cast<double>(ib - it == 0 ? 1 : ib - it);
    };
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            double ux, uy, vx, vy;
            grad(u, i, j, ux, uy);
            grad(v, i, j, vx, vy);
            strain[i * w + j] = std::sqrt(ux * ux + uy * uy + vx * vx + vy * vy);
        }
    }
}

}  // namespace

std::vector<Sample> generate(const GeneratorSpec& spec, const RoiLayout& layout,
                             const AuCatalog& catalog) {
    const auto labels = draw_labels(spec, catalog);
    const auto protos = spec.prototypes.empty() ? default_prototypes(spec.class_count)
                                                : spec.prototypes;
    const auto rules = default_render_rules();
    if (rules.size() != catalog.au_count()) {
        throw ContractError("generate: render rules do not cover the AU catalog");
    }
    const std::size_t roi_count = layout.size();
    const std::size_t s_side = spec.global_of_side;
    const std::size_t patch_len = kPatchChannels * kPatch * kPatch;

    std::vector<Sample> out;
    out.reserve(labels.size());
    int current_subject = -1;
    Rng render_rng(0);
    for (const DrawnLabel& lab : labels) {
        if (lab.subject_id != current_subject) {
            current_subject = lab.subject_id;
            render_rng = Rng(hash_seed(spec.seed, "render", static_cast<std::uint64_t>(current_subject)));
        }
        const SubjectTraits traits = subject_traits(spec, lab.subject_id);
        const double ca = std::cos(traits.angle), sa = std::sin(traits.angle);

        Sample smp;
        smp.subject_id = lab.subject_id;
        smp.emotion = lab.emotion;
        smp.au_labels = lab.au;
        smp.roi_patches.assign(roi_count * patch_len, 0.0);
        smp.global_of.assign(3 * s_side * s_side, 0.0);

        // magnitude per active AU; members of a fired coordinated group share
        // one intensity draw
        std::vector<double> mag_of(catalog.au_count(), 0.0);
        const auto& proto = protos[lab.emotion];
        for (std::size_t g = 0; g < proto.joint_groups.size(); ++g) {
            if (g < lab.joint_fired.size() && lab.joint_fired[g]) {
                const double shared =
                    traits.gain * std::clamp(1.0 + 0.25 * render_rng.normal(), 0.4, 2.5);
                for (int au : proto.joint_groups[g].first) {
                    const std::size_t idx = catalog.index_of(au);
                    if (mag_of[idx] == 0.0) mag_of[idx] = shared;
                }
            }
        }
        for (std::size_t a = 0; a < catalog.au_count(); ++a) {
            if (lab.au[a] && mag_of[a] == 0.0) {
                mag_of[a] = traits.gain * std::clamp(1.0 + 0.25 * render_rng.normal(), 0.4, 2.5);
            }
        }

        // per-ROI accumulated flow vector, used for the global splat
        std::vector<double> roi_fx(roi_count, 0.0), roi_fy(roi_count, 0.0);
        for (std::size_t a = 0; a < catalog.au_count(); ++a) {
            if (!lab.au[a]) continue;
            const AuRenderRule& rule = rules[a];
            const double mag = mag_of[a];
            auto deposit = [&](std::size_t roi, double scale) {
                double dx = rule.dir_x, dy = rule.dir_y;
                if (rule.mirror_x && layout.rois[roi].x < 0.5) dx = -dx;
                // subject-specific rotation
                const double rx = ca * dx - sa * dy, ry = sa * dx + ca * dy;
                const double fx = scale * mag * rx, fy = scale * mag * ry;
                roi_fx[roi] += fx;
                roi_fy[roi] += fy;
                double* patch = smp.roi_patches.data() + roi * patch_len;
                for (std::size_t i = 0; i < kPatch; ++i) {
                    for (std::size_t j = 0; j < kPatch; ++j) {
                        const double w = patch_kernel(i, j);
                        patch[0 * kPatch * kPatch + i * kPatch + j] += fx * w;
                        patch[1 * kPatch * kPatch + i * kPatch + j] += fy * w;
                    }
                }
            };
            for (std::size_t roi : rule.primary) deposit(roi, 1.0);
            for (std::size_t roi : rule.secondary) deposit(roi, kSecondaryAttenuation);
        }

        // global field: splat ROI flows at the scaled landmark positions
        double* gu = smp.global_of.data();
        double* gv = smp.global_of.data() + s_side * s_side;
        const double sigma_g = static_cast<double>(s_side) / 16.0;
        const int win = static_cast<int>(std::ceil(2.0 * sigma_g));
        for (std::size_t roi = 0; roi < roi_count; ++roi) {
            if (roi_fx[roi] == 0.0 && roi_fy[roi] == 0.0) continue;
            const double cx = layout.rois[roi].x * static_cast<double>(s_side - 1);
            const double cy = layout.rois[roi].y * static_cast<double>(s_side - 1);
            const int ci = static_cast<int>(std::lround(cy)), cj = static_cast<int>(std::lround(cx));
            for (int di = -win; di <= win; ++di) {
                const int i = ci + di;
                if (i < 0 || i >= static_cast<int>(s_side)) continue;
                for (int dj = -win; dj <= win; ++dj) {
                    const int j = cj + dj;
                    if (j < 0 || j >= static_cast<int>(s_side)) continue;
                    const double dx = static_cast<double>(j) - cx;
                    const double dy = static_cast<double>(i) - cy;
                    const double w = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma_g * sigma_g));
                    gu[i * s_side + j] += roi_fx[roi] * w;
                    gv[i * s_side + j] += roi_fy[roi] * w;
                }
            }
        }

        // pixel noise on the flow channels, then strain from the noisy field
        if (spec.noise_level > 0.0) {
            for (std::size_t roi = 0; roi < roi_count; ++roi) {
                double* patch = smp.roi_patches.data() + roi * patch_len;
                for (std::size_t i = 0; i < 2 * kPatch * kPatch; ++i) {
                    patch[i] += spec.noise_level * render_rng.normal();
                }
            }
            for (std::size_t i = 0; i < 2 * s_side * s_side; ++i) {
                smp.global_of[i] += spec.noise_level * render_rng.normal();
            }
        }
        for (std::size_t roi = 0; roi < roi_count; ++roi) {
            double* patch = smp.roi_patches.data() + roi * patch_len;
            fill_strain(patch, patch + kPatch * kPatch, kPatch, kPatch,
                        patch + 2 * kPatch * kPatch);
        }
        fill_strain(gu, gv, s_side, s_side, smp.global_of.data() + 2 * s_side * s_side);

        out.push_back(std::move(smp));
    }
    return out;
}

std::vector<std::vector<std::size_t>> partition_clients(const std::vector<Sample>& samples,
                                                        std::size_t client_count) {
    if (client_count < 1) throw ContractError("partition: client count must be >= 1");
    std::set<int> subject_set;
    for (const Sample& s : samples) subject_set.insert(s.subject_id);
    std::vector<int> subjects(subject_set.begin(), subject_set.end());
    if (subjects.size() < client_count) {
        throw ContractError("partition: fewer subjects (" + std::to_string(subjects.size()) +
                            ") than clients (" + std::to_string(client_count) + ")");
    }
    const std::size_t base = subjects.size() / client_count;
    const std::size_t extra = subjects.size() % client_count;

    std::map<int, std::size_t> owner;
    std::size_t cursor = 0;
    for (std::size_t c = 0; c < client_count; ++c) {
        const std::size_t take = base + (c < extra ? 1 : 0);
        for (std::size_t k = 0; k < take; ++k) owner[subjects[cursor++]] = c;
    }

    std::vector<std::vector<std::size_t>> clients(client_count);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        clients[owner.at(samples[i].subject_id)].push_back(i);
    }
    return clients;
}

std::vector<SplitPair> split_train_test(const std::vector<std::size_t>& dataset,
                                        const std::vector<Sample>& samples, double ratio,
                                        std::size_t repeats, std::uint64_t seed) {
    if (dataset.empty()) throw ContractError("split: empty dataset");
    if (dataset.size() < 4) throw ContractError("split: dataset smaller than 4 samples");
    if (ratio <= 0.0 || ratio >= 1.0) throw ContractError("split: ratio must be in (0,1)");

    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t idx : dataset) by_class[samples[idx].emotion].push_back(idx);
    bool stratified = true;
    for (const auto& [cls, members] : by_class) {
        if (members.size() < 2) stratified = false;
    }

    const std::size_t total_train =
        static_cast<std::size_t>(std::llround(ratio * static_cast<double>(dataset.size())));

    std::vector<SplitPair> out;
    for (std::size_t r = 0; r < repeats; ++r) {
        Rng rng(hash_seed(seed, "split", r));
        SplitPair split;
        split.stratified = stratified;
        if (stratified) {
            // largest-remainder quotas so the train total is exact
            std::vector<std::pair<int, std::vector<std::size_t>>> classes(by_class.begin(),
                                                                          by_class.end());
            std::vector<std::size_t> quota(classes.size());
            std::vector<std::pair<double, std::size_t>> remainders;
            std::size_t assigned = 0;
            for (std::size_t c = 0; c < classes.size(); ++c) {
                const double exact = ratio * static_cast<double>(classes[c].second.size());
                quota[c] = static_cast<std::size_t>(std::floor(exact));
                assigned += quota[c];
                remainders.push_back({exact - std::floor(exact), c});
            }
            std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return a.second < b.second;
            });
            std::size_t leftover = total_train > assigned ? total_train - assigned : 0;
            for (std::size_t k = 0; k < remainders.size() && leftover > 0; ++k) {
                const std::size_t c = remainders[k].second;
                if (quota[c] < classes[c].second.size()) {
                    ++quota[c];
                    --leftover;
                }
            }
            for (std::size_t c = 0; c < classes.size(); ++c) {
                std::vector<std::size_t> members = classes[c].second;
                rng.shuffle(members);
                for (std::size_t k = 0; k < members.size(); ++k) {
                    (k < quota[c] ? split.train : split.test).push_back(members[k]);
                }
            }
        } else {
            std::vector<std::size_t> all = dataset;
            rng.shuffle(all);
            for (std::size_t k = 0; k < all.size(); ++k) {
                (k < total_train ? split.train : split.test).push_back(all[k]);
            }
        }
        std::sort(split.train.begin(), split.train.end());
        std::sort(split.test.begin(), split.test.end());
        out.push_back(std::move(split));
    }
    return out;
}

namespace {
constexpr char kDatasetMagic[4] = {'F', 'M', 'D', 'S'};
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

std::vector<std::uint8_t> encode_dataset(const std::vector<Sample>& samples, std::size_t of_side,
                                         std::size_t class_count) {
    std::vector<std::uint8_t> out;
    wire::put_bytes(out, kDatasetMagic, 4);
    wire::put_u32(out, kDatasetVersion);
    wire::put_u64(out, samples.size());
    const std::size_t roi_count = samples.empty() ? 65 : samples[0].roi_patches.size() /
                                                             (kPatchChannels * kPatch * kPatch);
    const std::size_t au_count = samples.empty() ? 12 : samples[0].au_labels.size();
    wire::put_u64(out, roi_count);
    wire::put_u64(out, kPatchChannels);
    wire::put_u64(out, kPatch);
    wire::put_u64(out, au_count);
    wire::put_u64(out, of_side);
    wire::put_u64(out, class_count);
    for (const Sample& s : samples) {
        wire::put_u64(out, static_cast<std::uint64_t>(s.subject_id));
        wire::put_u64(out, static_cast<std::uint64_t>(s.emotion));
        std::uint64_t bits = 0;
        for (std::size_t a = 0; a < s.au_labels.size(); ++a) {
            if (s.au_labels[a]) bits |= 1ull << a;
        }
        wire::put_u64(out, bits);
        for (double v : s.roi_patches) wire::put_f64(out, v);
        for (double v : s.global_of) wire::put_f64(out, v);
    }
    return out;
}

std::vector<Sample> decode_dataset(const std::vector<std::uint8_t>& bytes, std::size_t* of_side,
                                   std::size_t* class_count) {
    wire::Reader r{bytes.data(), bytes.size()};
    r.need(4, "magic");
    if (std::memcmp(bytes.data(), kDatasetMagic, 4) != 0) {
        throw FormatError("bad dataset magic", 0);
    }
    r.pos = 4;
    const std::uint32_t version = r.u32("version");
    if (version != kDatasetVersion) {
        throw FormatError("unsupported dataset version " + std::to_string(version), 4);
    }
    const std::uint64_t count = r.u64("sample count");
    const std::uint64_t roi_count = r.u64("roi count");
    const std::uint64_t channels = r.u64("patch channels");
    const std::uint64_t patch = r.u64("patch size");
    const std::uint64_t au_count = r.u64("au count");
    const std::uint64_t side = r.u64("of side");
    const std::uint64_t classes = r.u64("class count");
    if (channels != kPatchChannels || patch != kPatch) {
        throw FormatError("unexpected patch geometry", r.pos);
    }
    if (of_side) *of_side = side;
    if (class_count) *class_count = classes;

    std::vector<Sample> out;
    out.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        Sample s;
        s.subject_id = static_cast<int>(r.u64("subject id"));
        s.emotion = static_cast<int>(r.u64("emotion"));
        const std::uint64_t bits = r.u64("au bits");
        s.au_labels.resize(au_count);
        for (std::uint64_t a = 0; a < au_count; ++a) s.au_labels[a] = (bits >> a) & 1;
        s.roi_patches.resize(roi_count * kPatchChannels * kPatch * kPatch);
        r.f64_array(s.roi_patches.data(), s.roi_patches.size(), "roi patches");
        s.global_of.resize(3 * side * side);
        r.f64_array(s.global_of.data(), s.global_of.size(), "global optical flow");
        out.push_back(std::move(s));
    }
    return out;
}

void write_dataset_file(const std::string& path, const std::vector<Sample>& samples,
                        std::size_t of_side, std::size_t class_count) {
    const auto bytes = encode_dataset(samples, of_side, class_count);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ContractError("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

std::vector<Sample> read_dataset_file(const std::string& path, std::size_t* of_side,
                                      std::size_t* class_count) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ContractError("cannot open dataset file " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return decode_dataset(bytes, of_side, class_count);
}

std::vector<double> roi_flow_energy(const Sample& s, std::size_t roi_count) {
    const std::size_t patch_len = kPatchChannels * kPatch * kPatch;
    std::vector<double> energy(roi_count, 0.0);
    for (std::size_t roi = 0; roi < roi_count; ++roi) {
        const double* patch = s.roi_patches.data() + roi * patch_len;
        double e = 0.0;
        for (std::size_t i = 0; i < 2 * kPatch * kPatch; ++i) e += patch[i] * patch[i];
        energy[roi] = e / static_cast<double>(2 * kPatch * kPatch);
    }
    return energy;
}

}  // namespace fedmer
