#include "fedmer/federated.hpp"

#include <chrono>
#include <cstring>

namespace fedmer {

namespace {
constexpr char kParamsMagic[4] = {'F', 'M', 'P', 'S'};
constexpr std::uint32_t kParamsVersion = 1;
}  // namespace

std::vector<std::uint8_t> serialize(const ParamSet& params) {
    std::vector<std::uint8_t> out;
    wire::put_bytes(out, kParamsMagic, 4);
    wire::put_u32(out, kParamsVersion);
    wire::put_u64(out, params.size());
    for (const auto& e : params.entries()) {
        wire::put_u64(out, e.name.size());
        wire::put_bytes(out, e.name.data(), e.name.size());
        wire::put_u64(out, e.tensor.rank());
        for (std::size_t d : e.tensor.shape()) wire::put_u64(out, d);
        for (double v : e.tensor.value()) wire::put_f64(out, v);
    }
    return out;
}

ParamSet deserialize(const std::vector<std::uint8_t>& bytes) {
    wire::Reader r{bytes.data(), bytes.size()};
    r.need(4, "magic");
    if (std::memcmp(bytes.data(), kParamsMagic, 4) != 0) {
        throw FormatError("bad parameter-set magic", 0);
    }
    r.pos = 4;
    const std::uint32_t version = r.u32("version");
    if (version != kParamsVersion) {
        throw FormatError("unsupported parameter-set version " + std::to_string(version), 4);
    }
    const std::uint64_t count = r.u64("entry count");
    ParamSet out;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t name_len = r.u64("name length");
        const std::string name = r.str(name_len, "name");
        const std::uint64_t rank = r.u64("rank");
        Shape shape(rank);
        std::size_t numel = 1;
        for (std::uint64_t d = 0; d < rank; ++d) {
            shape[d] = r.u64("dimension");
            numel *= shape[d];
        }
        std::vector<double> values(numel);
        r.f64_array(values.data(), numel, "values");
        out.add(name, Tensor::from(std::move(shape), std::move(values)));
    }
    if (r.pos != bytes.size()) {
        throw FormatError("trailing bytes after parameter set", r.pos);
    }
    return out;
}

Strategy strategy_from_string(const std::string& s) {
    if (s == "fedavg") return Strategy::fedavg;
    if (s == "fedprox") return Strategy::fedprox;
    if (s == "pfedprox") return Strategy::pfedprox;
    if (s == "local-only") return Strategy::local_only;
    throw ContractError("unknown strategy '" + s + "'");
}

std::string strategy_to_string(Strategy s) {
    switch (s) {
        case Strategy::fedavg: return "fedavg";
        case Strategy::fedprox: return "fedprox";
        case Strategy::pfedprox: return "pfedprox";
        case Strategy::local_only: return "local-only";
    }
    return "?";
}

std::vector<std::string> strategy_names() {
    return {"fedavg", "fedprox", "pfedprox", "local-only"};
}

ParamSet aggregate_fedavg(const std::vector<std::pair<const ParamSet*, std::size_t>>& models) {
    if (models.empty()) throw ContractError("fedavg: no models to aggregate");
    double total = 0.0;
    for (const auto& [params, n] : models) {
        if (n == 0) throw ContractError("fedavg: client with zero samples");
        total += static_cast<double>(n);
    }
    std::vector<const ParamSet*> sets;
    std::vector<double> weights;
    for (const auto& [params, n] : models) {
        sets.push_back(params);
        weights.push_back(static_cast<double>(n) / total);
    }
    return ParamSet::weighted_sum(sets, weights);
}

std::vector<ParamSet> aggregate_pfedprox(
    const std::vector<std::pair<const ParamSet*, std::size_t>>& models, double theta) {
    return aggregate_pfedprox(models, std::vector<double>(models.size(), theta));
}

std::vector<ParamSet> aggregate_pfedprox(
    const std::vector<std::pair<const ParamSet*, std::size_t>>& models,
    const std::vector<double>& theta_per_client) {
    if (models.empty()) throw ContractError("pfedprox: no models to aggregate");
    if (theta_per_client.size() != models.size()) {
        throw ContractError("pfedprox: need one theta per client");
    }
    for (double theta : theta_per_client) {
        if (theta < 0.0 || theta > 1.0) throw ContractError("pfedprox: theta outside [0,1]");
        if (models.size() == 1 && theta < 1.0) {
            throw ContractError("pfedprox: a single client has no peers to mix");
        }
    }
    std::vector<ParamSet> out;
    out.reserve(models.size());
    for (std::size_t i = 0; i < models.size(); ++i) {
        const double theta = theta_per_client[i];
        double peer_total = 0.0;
        for (std::size_t j = 0; j < models.size(); ++j) {
            if (j != i) peer_total += static_cast<double>(models[j].second);
        }
        std::vector<const ParamSet*> sets;
        std::vector<double> weights;
        sets.push_back(models[i].first);
        weights.push_back(theta);
        for (std::size_t j = 0; j < models.size(); ++j) {
            if (j == i) continue;
            sets.push_back(models[j].first);
            weights.push_back((1.0 - theta) * static_cast<double>(models[j].second) / peer_total);
        }
        out.push_back(ParamSet::weighted_sum(sets, weights));
    }
    return out;
}

void FederatedConfig::validate() const {
    if (rounds < 1) throw ContractError("federated: rounds must be >= 1");
    if (local_epochs < 1) throw ContractError("federated: local epochs must be >= 1");
    if (theta < 0.0 || theta > 1.0) throw ContractError("federated: theta outside [0,1]");
    if (alpha4 < 0.0) throw ContractError("federated: alpha4 must be >= 0");
}

std::vector<RoundRecord> run_rounds(const FederatedConfig& config,
                                    std::vector<FederatedClient*> clients) {
    config.validate();
    if (clients.empty()) throw ContractError("run_rounds: no clients");
    if (config.strategy == Strategy::pfedprox && clients.size() < 2 && config.theta < 1.0) {
        throw ContractError("run_rounds: pfedprox needs at least 2 clients");
    }

    const bool proximal =
        config.strategy == Strategy::fedprox || config.strategy == Strategy::pfedprox;
    const double alpha4 = proximal ? config.alpha4 : 0.0;

    std::vector<RoundRecord> records;
    for (std::size_t round = 1; round <= config.rounds; ++round) {
        const auto started = std::chrono::steady_clock::now();
        RoundRecord rec;
        rec.round = round;
        rec.strategy = strategy_to_string(config.strategy);

        // local training in client-id order
        std::vector<double> train_losses;
        for (FederatedClient* client : clients) {
            try {
                train_losses.push_back(client->train_local(config.local_epochs, alpha4, round));
            } catch (const NumericError& e) {
                throw NumericError("round " + std::to_string(round) + ", client " +
                                   std::to_string(client->id()) + ": " + e.what());
            }
        }

        // collect serialized models and sample counts; aggregate; distribute
        if (config.strategy != Strategy::local_only) {
            std::vector<std::vector<std::uint8_t>> blobs;
            std::vector<std::size_t> counts;
            for (FederatedClient* client : clients) {
                blobs.push_back(client->upload_params());
                counts.push_back(client->sample_count());
            }
            std::vector<ParamSet> received;
            received.reserve(blobs.size());
            for (const auto& b : blobs) received.push_back(deserialize(b));
            std::vector<std::pair<const ParamSet*, std::size_t>> models;
            for (std::size_t i = 0; i < received.size(); ++i) {
                models.emplace_back(&received[i], counts[i]);
            }
            if (config.strategy == Strategy::pfedprox && clients.size() >= 2) {
                std::vector<ParamSet> personalized = aggregate_pfedprox(models, config.theta);
                for (std::size_t i = 0; i < clients.size(); ++i) {
                    clients[i]->download_params(serialize(personalized[i]));
                }
            } else {
                const ParamSet global = aggregate_fedavg(models);
                const auto blob = serialize(global);
                for (FederatedClient* client : clients) client->download_params(blob);
            }
        }

        // metrics on each client's round-end model
        for (std::size_t i = 0; i < clients.size(); ++i) {
            EvalResult ev = clients[i]->evaluate(round);
            ClientRoundMetrics m;
            m.client = clients[i]->id();
            m.train_loss = train_losses[i];
            m.uf1 = ev.uf1;
            m.uar = ev.uar;
            m.confusion = ev.confusion;
            rec.clients.push_back(std::move(m));
        }
        rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace fedmer
