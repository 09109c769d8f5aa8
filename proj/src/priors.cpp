#include "fedmer/priors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fedmer {

using json = nlohmann::json;

std::vector<std::size_t> AuCatalog::region_nodes(FaceRegion r) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < region_of_au.size(); ++i) {
        if (region_of_au[i] == r) out.push_back(i);
    }
    return out;
}

std::size_t AuCatalog::index_of(int au_id) const {
    for (std::size_t i = 0; i < au_ids.size(); ++i) {
        if (au_ids[i] == au_id) return i;
    }
    throw ConfigError("au_ids", "AU " + std::to_string(au_id) + " not in catalog");
}

void AuCatalog::validate() const {
    if (au_ids.empty()) throw ConfigError("catalog.au_ids", "empty catalog");
    if (group_of_au.size() != au_ids.size() || region_of_au.size() != au_ids.size()) {
        throw ConfigError("catalog", "per-AU tables do not match AU count");
    }
    std::size_t total = 0;
    for (std::size_t c : au_count_of_group) total += c;
    if (total != au_ids.size()) {
        throw ConfigError("catalog.au_count_of_group",
                          "group AU counts sum to " + std::to_string(total) + ", expected " +
                              std::to_string(au_ids.size()));
    }
}

double BetaSchedule::at(std::size_t t) const {
    if (t > horizon) t = horizon;
    const double frac = horizon == 0 ? 1.0 : static_cast<double>(t) / static_cast<double>(horizon);
    double v = start;
    switch (kind) {
        case Kind::constant:
            v = start;
            break;
        case Kind::linear:
            v = start + (end - start) * frac;
            break;
        case Kind::cosine:
            v = end + (start - end) * 0.5 * (1.0 + std::cos(3.141592653589793 * frac));
            break;
    }
    return std::clamp(v, 0.0, 1.0);
}

BetaSchedule::Kind BetaSchedule::kind_from_string(const std::string& s) {
    if (s == "constant") return Kind::constant;
    if (s == "linear") return Kind::linear;
    if (s == "cosine") return Kind::cosine;
    throw ConfigError("beta.kind", "unknown schedule kind '" + s + "'");
}

std::string BetaSchedule::kind_to_string(Kind k) {
    switch (k) {
        case Kind::constant: return "constant";
        case Kind::linear: return "linear";
        case Kind::cosine: return "cosine";
    }
    return "linear";
}

void PriorPack::validate() const {
    const std::size_t n = A.n;
    if (D.n != n) throw ContractError("prior pack: A and D dimension mismatch");
    for (std::size_t i = 0; i < n; ++i) {
        if (A(i, i) != 0.0) throw ContractError("prior pack: A has nonzero diagonal");
        for (std::size_t j = 0; j < n; ++j) {
            if (A(i, j) != A(j, i)) throw ContractError("prior pack: A not symmetric");
            if (A(i, j) != 0.0 && A(i, j) != 1.0) throw ContractError("prior pack: A not binary");
            if (A(i, j) == 0.0 && D(i, j) != 0.0) {
                throw ContractError("prior pack: D has mass outside A's support");
            }
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        bool any = false;
        for (std::size_t j = 0; j < n; ++j) {
            if (D(i, j) < 0.0) throw ContractError("prior pack: negative D entry");
            row += D(i, j);
            any = any || D(i, j) != 0.0;
        }
        if (any && std::abs(row - 1.0) > 1e-9) {
            throw ContractError("prior pack: D row " + std::to_string(i) + " sums to " +
                                std::to_string(row));
        }
    }
}

PriorConfig PriorConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError("priors", std::string("invalid JSON: ") + e.what());
    }
    PriorConfig cfg;
    if (!j.contains("au_ids") || !j["au_ids"].is_array()) {
        throw ConfigError("priors.au_ids", "missing or not an array");
    }
    for (const auto& v : j["au_ids"]) cfg.au_ids.push_back(v.get<int>());
    if (!j.contains("coordinated_pairs") || !j["coordinated_pairs"].is_array()) {
        throw ConfigError("priors.coordinated_pairs", "missing or not an array");
    }
    for (const auto& p : j["coordinated_pairs"]) {
        if (!p.is_array() || p.size() != 2) {
            throw ConfigError("priors.coordinated_pairs", "each pair must be [au, au]");
        }
        cfg.coordinated_pairs.emplace_back(p[0].get<int>(), p[1].get<int>());
    }
    if (j.contains("beta")) {
        const auto& b = j["beta"];
        if (b.contains("kind")) {
            cfg.beta.kind = BetaSchedule::kind_from_string(b["kind"].get<std::string>());
        }
        if (b.contains("start")) cfg.beta.start = b["start"].get<double>();
        if (b.contains("end")) cfg.beta.end = b["end"].get<double>();
        if (cfg.beta.start < 0.0 || cfg.beta.start > 1.0) {
            throw ConfigError("priors.beta.start", "must be in [0,1]");
        }
        if (cfg.beta.end < 0.0 || cfg.beta.end > 1.0) {
            throw ConfigError("priors.beta.end", "must be in [0,1]");
        }
    }
    return cfg;
}

PriorConfig PriorConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("priors", "cannot open prior config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

PriorConfig default_prior_config() {
    PriorConfig cfg;
    cfg.au_ids = {1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17};
    // Coordinated pairs from FACS basic-emotion prototypes: surprise/fear
    // brow-lid complex (1,2,5), anger/disgust brow-nose complex (4,7,9),
    // Duchenne smile (6,12), disgust mouth complex (9,10 / 10,17), sadness
    // (1,15 / 15,17), contempt (12,14), anger chin press (4,17).
    // Known uncoordinated pairs such as 4+12 and 6+15 are deliberately absent.
    cfg.coordinated_pairs = {{1, 2},  {1, 4},  {1, 5},  {2, 5},  {4, 7},
                             {4, 9},  {6, 7},  {6, 12}, {9, 10}, {10, 17},
                             {12, 14}, {15, 17}, {1, 15}, {7, 9}, {4, 17}};
    cfg.beta = BetaSchedule{BetaSchedule::Kind::linear, 0.5, 0.0, 1};
    return cfg;
}

PriorPack load_adjacency(const PriorConfig& config) {
    const std::size_t n = config.au_ids.size();
    if (n == 0) throw ConfigError("priors.au_ids", "empty AU catalog");
    auto index_of = [&](int au) -> std::size_t {
        for (std::size_t i = 0; i < n; ++i) {
            if (config.au_ids[i] == au) return i;
        }
        throw ConfigError("priors.coordinated_pairs",
                          "AU " + std::to_string(au) + " not in catalog");
    };

    PriorPack pack;
    pack.A = SquareMat(n);
    pack.beta = config.beta;
    for (const auto& [a, b] : config.coordinated_pairs) {
        const std::size_t i = index_of(a), j = index_of(b);
        if (i == j) {
            pack.warnings.push_back("self pair (" + std::to_string(a) + "," + std::to_string(b) +
                                    ") ignored");
            continue;
        }
        if (pack.A(i, j) != 0.0) {
            pack.warnings.push_back("pair (" + std::to_string(a) + "," + std::to_string(b) +
                                    ") listed more than once; normalized to one symmetric edge");
            continue;
        }
        pack.A(i, j) = 1.0;
        pack.A(j, i) = 1.0;
    }

    // seed D uniform over neighbors until co-occurrence statistics exist
    pack.D = SquareMat(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t degree = 0;
        for (std::size_t j = 0; j < n; ++j) degree += pack.A(i, j) != 0.0 ? 1u : 0u;
        if (degree == 0) continue;
        for (std::size_t j = 0; j < n; ++j) {
            if (pack.A(i, j) != 0.0) pack.D(i, j) = 1.0 / static_cast<double>(degree);
        }
    }
    pack.validate();
    return pack;
}

SquareMat compute_cooccurrence(const std::vector<std::vector<std::uint8_t>>& au_labels,
                               const SquareMat& A, std::vector<std::string>* warnings) {
    const std::size_t n = A.n;
    if (au_labels.empty()) throw ContractError("cooccurrence: need at least one label vector");
    for (const auto& v : au_labels) {
        if (v.size() != n) {
            throw ContractError("cooccurrence: label width " + std::to_string(v.size()) +
                                " does not match AU count " + std::to_string(n));
        }
    }
    std::vector<double> count(n, 0.0);
    SquareMat pair_count(n);
    for (const auto& v : au_labels) {
        for (std::size_t i = 0; i < n; ++i) {
            if (!v[i]) continue;
            count[i] += 1.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (j != i && v[j]) pair_count(i, j) += 1.0;
            }
        }
    }

    SquareMat d(n);
    for (std::size_t i = 0; i < n; ++i) {
        double row_sum = 0.0;
        if (count[i] > 0.0) {
            for (std::size_t j = 0; j < n; ++j) {
                if (A(i, j) != 0.0) {
                    d(i, j) = pair_count(i, j) / count[i];
                    row_sum += d(i, j);
                }
            }
        }
        if (row_sum > 0.0) {
            for (std::size_t j = 0; j < n; ++j) d(i, j) /= row_sum;
        } else {
            // AU never seen (or never co-occurring): uniform over A-neighbors
            std::size_t degree = 0;
            for (std::size_t j = 0; j < n; ++j) degree += A(i, j) != 0.0 ? 1u : 0u;
            if (degree > 0) {
                for (std::size_t j = 0; j < n; ++j) {
                    if (A(i, j) != 0.0) d(i, j) = 1.0 / static_cast<double>(degree);
                }
            }
            if (warnings) {
                warnings->push_back("cooccurrence row " + std::to_string(i) +
                                    " fell back to uniform over neighbors");
            }
        }
    }
    return d;
}

namespace {

// re-normalizes D rows over a (possibly shrunken) support; empty rows fall
// back to uniform over the support, rows with no support stay zero
void renormalize_rows(SquareMat& d, const SquareMat& a, std::vector<std::size_t>* isolated) {
    const std::size_t n = d.n;
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        std::size_t degree = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (a(i, j) == 0.0) d(i, j) = 0.0;
            row += d(i, j);
            degree += a(i, j) != 0.0 ? 1u : 0u;
        }
        if (degree == 0) {
            if (isolated) isolated->push_back(i);
            continue;
        }
        if (row > 0.0) {
            for (std::size_t j = 0; j < n; ++j) d(i, j) /= row;
        } else {
            for (std::size_t j = 0; j < n; ++j) {
                if (a(i, j) != 0.0) d(i, j) = 1.0 / static_cast<double>(degree);
            }
        }
    }
}

}  // namespace

MaskedPack mask_intra_region(const PriorPack& pack, const AuCatalog& catalog) {
    const std::size_t n = pack.A.n;
    if (catalog.au_count() != n) {
        throw ContractError("mask_intra_region: catalog size does not match pack");
    }
    MaskedPack out;
    out.pack = pack;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (catalog.region_of_au[i] == catalog.region_of_au[j]) {
                out.pack.A(i, j) = 0.0;
            }
        }
    }
    renormalize_rows(out.pack.D, out.pack.A, &out.isolated);
    out.pack.validate();
    return out;
}

PriorPack restrict_to(const PriorPack& pack, const std::vector<std::size_t>& nodes) {
    const std::size_t n = nodes.size();
    PriorPack out;
    out.A = SquareMat(n);
    out.D = SquareMat(n);
    out.beta = pack.beta;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out.A(i, j) = pack.A(nodes[i], nodes[j]);
            out.D(i, j) = pack.D(nodes[i], nodes[j]);
        }
    }
    renormalize_rows(out.D, out.A, nullptr);
    out.validate();
    return out;
}

SquareMat complete_adjacency(std::size_t n) {
    SquareMat a(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) a(i, j) = i == j ? 0.0 : 1.0;
    }
    return a;
}

}  // namespace fedmer
