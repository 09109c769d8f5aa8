#include "fedmer/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fedmer {

using json = nlohmann::json;

namespace {

double get_num(const json& j, const std::string& path, const std::string& key, double fallback,
               bool* present = nullptr) {
    if (!j.contains(key)) {
        if (present) *present = false;
        return fallback;
    }
    if (present) *present = true;
    if (!j[key].is_number()) throw ConfigError(path + "." + key, "must be a number");
    return j[key].get<double>();
}

bool get_bool(const json& j, const std::string& path, const std::string& key, bool fallback) {
    if (!j.contains(key)) return fallback;
    if (!j[key].is_boolean()) throw ConfigError(path + "." + key, "must be a boolean");
    return j[key].get<bool>();
}

std::size_t get_size(const json& j, const std::string& path, const std::string& key,
                     std::size_t fallback) {
    const double v = get_num(j, path, key, static_cast<double>(fallback));
    if (v < 0.0 || v != std::floor(v)) {
        throw ConfigError(path + "." + key, "must be a non-negative integer");
    }
    return static_cast<std::size_t>(v);
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError("config", std::string("invalid JSON: ") + e.what());
    }
    ExperimentConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(get_num(j, "config", "seed", 0.0));
    if (j.contains("out_dir")) cfg.out_dir = j["out_dir"].get<std::string>();

    if (j.contains("data")) {
        const json& d = j["data"];
        cfg.data.class_count = get_size(d, "data", "class_count", cfg.data.class_count);
        cfg.data.subject_count = get_size(d, "data", "subject_count", cfg.data.subject_count);
        if (d.contains("samples_per_subject")) {
            const json& r = d["samples_per_subject"];
            if (!r.is_array() || r.size() != 2) {
                throw ConfigError("data.samples_per_subject", "must be [min, max]");
            }
            cfg.data.samples_per_subject_min = r[0].get<std::size_t>();
            cfg.data.samples_per_subject_max = r[1].get<std::size_t>();
        }
        cfg.data.noise_level = get_num(d, "data", "noise_level", cfg.data.noise_level);
        cfg.data.flip_noise = get_num(d, "data", "flip_noise", cfg.data.flip_noise);
        cfg.data.subject_bias_scale =
            get_num(d, "data", "subject_bias_scale", cfg.data.subject_bias_scale);
        cfg.data.global_of_side = get_size(d, "data", "global_of_side", cfg.data.global_of_side);
        cfg.data.split_ratio = get_num(d, "data", "split_ratio", cfg.data.split_ratio);
        cfg.data.split_repeats = get_size(d, "data", "split_repeats", cfg.data.split_repeats);
        if (d.contains("prototype_set")) {
            cfg.data.prototype_set = d["prototype_set"].get<std::string>();
            if (cfg.data.prototype_set != "independent" &&
                cfg.data.prototype_set != "relational") {
                throw ConfigError("data.prototype_set", "must be 'independent' or 'relational'");
            }
        }
    }

    if (j.contains("priors")) {
        const json& p = j["priors"];
        if (p.contains("config_path")) cfg.priors.config_path = p["config_path"].get<std::string>();
        if (p.contains("cooccurrence")) {
            const std::string mode = p["cooccurrence"].get<std::string>();
            if (mode == "global") {
                cfg.priors.global_cooccurrence = true;
            } else if (mode == "per_client") {
                cfg.priors.global_cooccurrence = false;
            } else {
                throw ConfigError("priors.cooccurrence", "must be 'per_client' or 'global'");
            }
        }
    }

    if (j.contains("model")) {
        const json& m = j["model"];
        cfg.model.gat_width = get_size(m, "model", "gat_width", cfg.model.gat_width);
        cfg.model.gat_heads = get_size(m, "model", "gat_heads", cfg.model.gat_heads);
        cfg.model.sse_heads = get_size(m, "model", "sse_heads", cfg.model.sse_heads);
        cfg.model.inception_channels =
            get_size(m, "model", "inception_channels", cfg.model.inception_channels);
        if (m.contains("lfe_channels")) {
            const json& ch = m["lfe_channels"];
            if (!ch.is_array() || ch.size() != 2) {
                throw ConfigError("model.lfe_channels", "must be [mid1, mid2]");
            }
            cfg.model.lfe_mid1 = ch[0].get<std::size_t>();
            cfg.model.lfe_mid2 = ch[1].get<std::size_t>();
        }
        if (m.contains("loss_weights")) {
            const json& w = m["loss_weights"];
            if (!w.is_array() || w.size() != 3) {
                throw ConfigError("model.loss_weights", "must be [alpha1, alpha2, alpha3]");
            }
            cfg.model.loss_weights = {w[0].get<double>(), w[1].get<double>(), w[2].get<double>()};
        }
        cfg.model.leaky_slope = get_num(m, "model", "leaky_slope", cfg.model.leaky_slope);
        cfg.model.use_psych_prior = get_bool(m, "model", "use_psych_prior", true);
        cfg.model.use_data_prior = get_bool(m, "model", "use_data_prior", true);
    }

    if (j.contains("train")) {
        const json& t = j["train"];
        cfg.train.lr = get_num(t, "train", "lr", cfg.train.lr);
        cfg.train.momentum = get_num(t, "train", "momentum", cfg.train.momentum);
        cfg.train.batch_size = get_size(t, "train", "batch_size", cfg.train.batch_size);
    }

    if (j.contains("federated")) {
        const json& f = j["federated"];
        if (f.contains("strategies")) {
            if (!f["strategies"].is_array()) {
                throw ConfigError("federated.strategies", "must be an array");
            }
            cfg.federated.strategies.clear();
            for (const auto& s : f["strategies"]) {
                try {
                    cfg.federated.strategies.push_back(strategy_from_string(s.get<std::string>()));
                } catch (const ContractError& e) {
                    throw ConfigError("federated.strategies", e.what());
                }
            }
        }
        cfg.federated.clients = get_size(f, "federated", "clients", cfg.federated.clients);
        cfg.federated.rounds = get_size(f, "federated", "rounds", cfg.federated.rounds);
        cfg.federated.local_epochs =
            get_size(f, "federated", "local_epochs", cfg.federated.local_epochs);
        cfg.federated.theta = get_num(f, "federated", "theta", cfg.federated.theta);
        cfg.federated.alpha4 = get_num(f, "federated", "alpha4", cfg.federated.alpha4);
    }

    // fields implied by the data section
    cfg.model.class_count = cfg.data.class_count;
    cfg.model.global_of_side = cfg.data.global_of_side;
    cfg.validate();
    return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config", "cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

void ExperimentConfig::validate() const {
    if (data.split_ratio <= 0.0 || data.split_ratio >= 1.0) {
        throw ConfigError("data.split_ratio", "must be in (0,1)");
    }
    if (data.split_repeats < 1) throw ConfigError("data.split_repeats", "must be >= 1");
    if (federated.clients < 1) throw ConfigError("federated.clients", "must be >= 1");
    if (federated.rounds < 1) throw ConfigError("federated.rounds", "must be >= 1");
    if (federated.local_epochs < 1) throw ConfigError("federated.local_epochs", "must be >= 1");
    if (federated.theta < 0.0 || federated.theta > 1.0) {
        throw ConfigError("federated.theta", "must be in [0,1]");
    }
    if (federated.alpha4 < 0.0) throw ConfigError("federated.alpha4", "must be >= 0");
    if (federated.strategies.empty()) {
        throw ConfigError("federated.strategies", "need at least one strategy");
    }
    if (train.lr <= 0.0) throw ConfigError("train.lr", "must be positive");
    if (train.momentum < 0.0 || train.momentum >= 1.0) {
        throw ConfigError("train.momentum", "must be in [0,1)");
    }
    if (train.batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
    if (data.subject_count < federated.clients) {
        throw ConfigError("data.subject_count", "need at least one subject per client");
    }
}

MerClient::MerClient(std::size_t id, const MerConfig& cfg, const AuCatalog& catalog,
                     const std::vector<Sample>* samples, std::vector<std::size_t> train_idx,
                     std::vector<std::size_t> test_idx, PriorBundle priors, BetaSchedule beta,
                     const TrainConfig& train, std::uint64_t init_seed)
    : id_(id),
      samples_(samples),
      train_(std::move(train_idx)),
      test_(std::move(test_idx)),
      net_(cfg, catalog, init_seed),
      priors_(std::move(priors)),
      beta_(beta),
      opt_(train.lr, train.momentum),
      batch_(train.batch_size),
      shuffle_rng_(hash_seed(init_seed, "client-shuffle", id)) {
    if (train_.empty()) throw ContractError("client " + std::to_string(id) + " has no train data");
}

std::vector<std::uint8_t> MerClient::upload_params() const { return serialize(net_.params()); }

void MerClient::download_params(const std::vector<std::uint8_t>& bytes) {
    net_.params().assign_values(deserialize(bytes));
}

double MerClient::train_local(std::size_t epochs, double alpha4, std::size_t round_index) {
    const double beta = beta_.at(round_index > 0 ? round_index - 1 : 0);
    std::optional<ParamSet> anchor;
    if (alpha4 > 0.0) anchor = net_.params().clone_values();

    ForwardMode mode;  // training defaults
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        std::vector<std::size_t> order = train_;
        shuffle_rng_.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += batch_) {
            const std::size_t end = std::min(start + batch_, order.size());
            Tensor total = Tensor::scalar(0.0);
            for (std::size_t k = start; k < end; ++k) {
                total = add(total, net_.loss((*samples_)[order[k]], priors_, beta, mode));
            }
            Tensor loss = mul_scalar(total, 1.0 / static_cast<double>(end - start));
            if (anchor) loss = add(loss, proximal_penalty(net_.params(), *anchor, alpha4));
            net_.params().zero_grads();
            backward(loss);
            opt_.step(net_.params());
            loss_sum += loss.item();
            ++batches;
        }
    }
    return batches > 0 ? loss_sum / static_cast<double>(batches) : 0.0;
}

EvalResult MerClient::evaluate(std::size_t round_index) {
    const double beta = beta_.at(round_index > 0 ? round_index - 1 : 0);
    NoGradGuard no_grad;
    ForwardMode mode;
    mode.training = false;
    mode.update_stats = false;

    EvalResult r;
    r.confusion = ConfusionMatrix(net_.config().class_count);
    double loss_sum = 0.0;
    for (std::size_t idx : test_) {
        const Sample& s = (*samples_)[idx];
        MerOutputs out = net_.forward(s, priors_, beta, mode);
        const auto& v = out.emotion_logits.value();
        const std::size_t pred =
            static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
        r.confusion.record(static_cast<std::size_t>(s.emotion), pred);
        std::vector<double> labels(s.au_labels.begin(), s.au_labels.end());
        const std::size_t label_count = labels.size();
        Tensor y = Tensor::from({label_count}, std::move(labels));
        Tensor loss = mer_loss(
            cross_entropy_logits(out.emotion_logits, static_cast<std::size_t>(s.emotion)),
            au_loss(out.au_logits_afe, y), au_loss(out.au_logits_gat, y),
            net_.config().loss_weights);
        loss_sum += loss.item();
    }
    r.loss = test_.empty() ? 0.0 : loss_sum / static_cast<double>(test_.size());
    r.uf1 = uf1(r.confusion).value;
    r.uar = uar(r.confusion).value;
    return r;
}

double MerClient::train_loss_now(std::size_t round_index) {
    const double beta = beta_.at(round_index > 0 ? round_index - 1 : 0);
    NoGradGuard no_grad;
    ForwardMode mode;
    mode.training = false;
    mode.update_stats = false;
    double sum = 0.0;
    for (std::size_t idx : train_) {
        sum += net_.loss((*samples_)[idx], priors_, beta, mode).item();
    }
    return train_.empty() ? 0.0 : sum / static_cast<double>(train_.size());
}

double AggregatedCell::uf1_std() const {
    if (repeats < 2) return 0.0;
    const double n = static_cast<double>(repeats);
    const double mean = uf1;
    const double var = std::max(0.0, uf1_sq / n - mean * mean);
    return std::sqrt(var);
}

const AggregatedCell& ExperimentResult::final_cell(const std::string& strategy,
                                                   std::size_t client) const {
    return cells.at(strategy).at(rounds - 1).at(client);
}

double ExperimentResult::mean_final_uf1(const std::string& strategy) const {
    double sum = 0.0;
    for (std::size_t c = 0; c < clients; ++c) sum += final_cell(strategy, c).uf1;
    return sum / static_cast<double>(clients);
}

namespace {

PriorPack build_base_pack(const ExperimentConfig& cfg, const AuCatalog& catalog) {
    PriorConfig pc = cfg.priors.config_path.empty() ? default_prior_config()
                                                    : PriorConfig::from_file(cfg.priors.config_path);
    if (pc.au_ids != catalog.au_ids) {
        throw ConfigError("priors.au_ids", "prior config catalog does not match the model catalog");
    }
    pc.beta.horizon = cfg.federated.rounds;
    PriorPack pack = load_adjacency(pc);
    if (!cfg.model.use_psych_prior) {
        pack.A = complete_adjacency(catalog.au_count());
        // uniform D over the widened support until co-occurrence replaces it
        pack.D = SquareMat(pack.A.n);
        for (std::size_t i = 0; i < pack.A.n; ++i) {
            for (std::size_t j = 0; j < pack.A.n; ++j) {
                if (pack.A(i, j) != 0.0) pack.D(i, j) = 1.0 / static_cast<double>(pack.A.n - 1);
            }
        }
    }
    return pack;
}

std::vector<std::vector<std::uint8_t>> train_labels_of(const std::vector<Sample>& samples,
                                                       const std::vector<std::size_t>& idx) {
    std::vector<std::vector<std::uint8_t>> labels;
    labels.reserve(idx.size());
    for (std::size_t i : idx) labels.push_back(samples[i].au_labels);
    return labels;
}

}  // namespace

GeneratorSpec generator_spec_from(const DataConfig& data, std::uint64_t master_seed) {
    GeneratorSpec spec;
    spec.class_count = data.class_count;
    spec.noise_level = data.noise_level;
    spec.flip_noise = data.flip_noise;
    spec.subject_count = data.subject_count;
    spec.subject_bias_scale = data.subject_bias_scale;
    spec.samples_per_subject_min = data.samples_per_subject_min;
    spec.samples_per_subject_max = data.samples_per_subject_max;
    spec.global_of_side = data.global_of_side;
    spec.seed = hash_seed(master_seed, "data");
    if (data.prototype_set == "relational") {
        spec.prototypes = relational_prototypes(data.class_count);
    }
    return spec;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const RoiLayout layout = RoiLayout::default_layout();
    const AuCatalog catalog = default_catalog(layout);

    const GeneratorSpec spec = generator_spec_from(cfg.data, cfg.seed);
    const std::vector<Sample> samples = generate(spec, layout, catalog);
    const auto client_idx = partition_clients(samples, cfg.federated.clients);

    // per client: the same `split_repeats` seeded splits reused by every strategy
    std::vector<std::vector<SplitPair>> splits;
    for (std::size_t c = 0; c < client_idx.size(); ++c) {
        splits.push_back(split_train_test(client_idx[c], samples, cfg.data.split_ratio,
                                          cfg.data.split_repeats,
                                          hash_seed(cfg.seed, "split-client", c)));
    }

    const PriorPack base_pack = build_base_pack(cfg, catalog);

    ExperimentResult result;
    result.rounds = cfg.federated.rounds;
    result.clients = cfg.federated.clients;

    for (Strategy strategy : cfg.federated.strategies) {
        const std::string sname = strategy_to_string(strategy);
        result.strategy_order.push_back(sname);
        auto& grid = result.cells[sname];
        grid.assign(cfg.federated.rounds, std::vector<AggregatedCell>(cfg.federated.clients));

        for (std::size_t rep = 0; rep < cfg.data.split_repeats; ++rep) {
            // global co-occurrence pools every client's train labels
            SquareMat global_d;
            if (cfg.priors.global_cooccurrence) {
                std::vector<std::vector<std::uint8_t>> all_labels;
                for (std::size_t c = 0; c < client_idx.size(); ++c) {
                    auto l = train_labels_of(samples, splits[c][rep].train);
                    all_labels.insert(all_labels.end(), l.begin(), l.end());
                }
                global_d = compute_cooccurrence(all_labels, base_pack.A);
            }

            std::vector<std::unique_ptr<MerClient>> clients;
            for (std::size_t c = 0; c < cfg.federated.clients; ++c) {
                PriorPack pack = base_pack;
                pack.D = cfg.priors.global_cooccurrence
                             ? global_d
                             : compute_cooccurrence(train_labels_of(samples, splits[c][rep].train),
                                                    base_pack.A);
                BetaSchedule beta = pack.beta;
                beta.horizon = std::max<std::size_t>(1, cfg.federated.rounds - 1);
                clients.push_back(std::make_unique<MerClient>(
                    c, cfg.model, catalog, &samples, splits[c][rep].train, splits[c][rep].test,
                    make_prior_bundle(pack, catalog), beta, cfg.train,
                    hash_seed(cfg.seed, "init", rep)));
            }
            std::vector<FederatedClient*> ptrs;
            for (auto& c : clients) ptrs.push_back(c.get());

            FederatedConfig fed;
            fed.strategy = strategy;
            fed.rounds = cfg.federated.rounds;
            fed.local_epochs = cfg.federated.local_epochs;
            fed.theta = cfg.federated.theta;
            fed.alpha4 = cfg.federated.alpha4;
            const auto records = run_rounds(fed, ptrs);

            for (const RoundRecord& rec : records) {
                for (const ClientRoundMetrics& m : rec.clients) {
                    AggregatedCell& cell = grid[rec.round - 1][m.client];
                    cell.train_loss += m.train_loss;
                    cell.uf1 += m.uf1;
                    cell.uar += m.uar;
                    cell.uf1_sq += m.uf1 * m.uf1;
                    cell.confusion += m.confusion;
                    ++cell.repeats;
                }
            }
        }
        // sums -> means (uf1_sq stays a sum; uf1_std handles it)
        for (auto& round_row : grid) {
            for (auto& cell : round_row) {
                if (cell.repeats == 0) continue;
                const double n = static_cast<double>(cell.repeats);
                cell.train_loss /= n;
                cell.uf1 /= n;
                cell.uar /= n;
            }
        }
    }
    return result;
}

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

}  // namespace

std::string results_csv(const ExperimentResult& result) {
    std::ostringstream os;
    os << "strategy,round,client,train_loss,uf1,uar\n";
    for (const std::string& s : result.strategy_order) {
        const auto& grid = result.cells.at(s);
        for (std::size_t r = 0; r < result.rounds; ++r) {
            for (std::size_t c = 0; c < result.clients; ++c) {
                const AggregatedCell& cell = grid[r][c];
                os << s << "," << (r + 1) << "," << c << "," << fmt_double(cell.train_loss) << ","
                   << fmt_double(cell.uf1) << "," << fmt_double(cell.uar) << "\n";
            }
        }
    }
    return os.str();
}

ExperimentResult run_experiment_to_dir(const ExperimentConfig& cfg, const std::string& out_dir) {
    ExperimentResult result = run_experiment(cfg);
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    {
        std::ofstream csv(out_dir + "/results.csv", std::ios::binary);
        csv << results_csv(result);
    }

    nlohmann::ordered_json summary;
    summary["seed"] = cfg.seed;
    summary["rounds"] = result.rounds;
    summary["clients"] = result.clients;
    summary["split_repeats"] = cfg.data.split_repeats;
    for (const std::string& s : result.strategy_order) {
        nlohmann::ordered_json per_client = nlohmann::ordered_json::array();
        for (std::size_t c = 0; c < result.clients; ++c) {
            const AggregatedCell& cell = result.final_cell(s, c);
            nlohmann::ordered_json jc;
            jc["client"] = c;
            jc["uf1_mean"] = cell.uf1;
            jc["uf1_std"] = cell.uf1_std();
            jc["uar_mean"] = cell.uar;
            jc["train_loss_mean"] = cell.train_loss;
            const auto flagged = uf1(cell.confusion).zero_support_classes;
            jc["zero_support_classes"] = flagged;
            per_client.push_back(jc);
        }
        summary["strategies"][s]["final_round"] = per_client;
        summary["strategies"][s]["mean_final_uf1"] = result.mean_final_uf1(s);
    }
    {
        std::ofstream js(out_dir + "/summary.json", std::ios::binary);
        js << summary.dump(2) << "\n";
    }

    for (const std::string& s : result.strategy_order) {
        const std::string sdir = out_dir + "/" + s;
        fs::create_directories(sdir);
        const auto& grid = result.cells.at(s);
        for (std::size_t r = 0; r < result.rounds; ++r) {
            for (std::size_t c = 0; c < result.clients; ++c) {
                const ConfusionMatrix& cm = grid[r][c].confusion;
                std::ofstream out(sdir + "/confmat_" + std::to_string(c) + "_" +
                                      std::to_string(r + 1) + ".csv",
                                  std::ios::binary);
                for (std::size_t i = 0; i < cm.n; ++i) {
                    for (std::size_t j = 0; j < cm.n; ++j) {
                        out << cm.at(i, j) << (j + 1 < cm.n ? "," : "\n");
                    }
                }
            }
        }
    }
    return result;
}

}  // namespace fedmer
