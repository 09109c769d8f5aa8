#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fedmer/metrics.hpp"
#include "fedmer/param_set.hpp"
#include "fedmer/wire.hpp"

namespace fedmer {

// Parameter wire format: magic "FMPS", u32 version, u64 entry count, then per
// entry (u64 name length, name bytes, u64 rank, u64 dims..., f64 values...).
// All integers and floats little-endian; roundtrip is bit-exact.
std::vector<std::uint8_t> serialize(const ParamSet& params);
ParamSet deserialize(const std::vector<std::uint8_t>& bytes);

enum class Strategy { fedavg, fedprox, pfedprox, local_only };
Strategy strategy_from_string(const std::string& s);
std::string strategy_to_string(Strategy s);
std::vector<std::string> strategy_names();

// data-size weighted parameter mean
ParamSet aggregate_fedavg(const std::vector<std::pair<const ParamSet*, std::size_t>>& models);

// personalized aggregation: client i keeps weight theta_i on its own model
// and splits 1-theta_i across peers proportionally to their data sizes
std::vector<ParamSet> aggregate_pfedprox(
    const std::vector<std::pair<const ParamSet*, std::size_t>>& models, double theta);
std::vector<ParamSet> aggregate_pfedprox(
    const std::vector<std::pair<const ParamSet*, std::size_t>>& models,
    const std::vector<double>& theta_per_client);

struct EvalResult {
    double loss = 0.0;
    double uf1 = 0.0;
    double uar = 0.0;
    ConfusionMatrix confusion;
};

// One federated participant. The server side of the protocol only ever sees
// serialized parameter bytes and sample counts through this interface; raw
// samples never cross it.
class FederatedClient {
public:
    virtual ~FederatedClient() = default;
    virtual std::size_t id() const = 0;
    virtual std::size_t sample_count() const = 0;  // training samples held
    virtual std::vector<std::uint8_t> upload_params() const = 0;
    virtual void download_params(const std::vector<std::uint8_t>& bytes) = 0;
    // `epochs` local epochs against the proximal anchor captured at call
    // time; alpha4 = 0 disables the proximal term; returns the mean batch loss
    virtual double train_local(std::size_t epochs, double alpha4, std::size_t round_index) = 0;
    virtual EvalResult evaluate(std::size_t round_index) = 0;
    // loss of the current parameters on the local training data (no update)
    virtual double train_loss_now(std::size_t round_index) = 0;
};

struct FederatedConfig {
    Strategy strategy = Strategy::pfedprox;
    std::size_t rounds = 5;
    std::size_t local_epochs = 1;
    double theta = 0.9;
    double alpha4 = 0.01;

    void validate() const;
};

struct ClientRoundMetrics {
    std::size_t client = 0;
    double train_loss = 0.0;
    double uf1 = 0.0;
    double uar = 0.0;
    ConfusionMatrix confusion;
};

struct RoundRecord {
    std::size_t round = 0;  // 1-based, contiguous
    std::string strategy;
    std::vector<ClientRoundMetrics> clients;
    double wall_seconds = 0.0;  // not part of any deterministic artifact
};

// R rounds of local train -> collect -> aggregate -> distribute -> evaluate.
// Clients execute in id order; everything is deterministic given the client
// implementations. Callers initialize all clients with the same model before
// round 1 (the shared starting point every strategy trains from).
std::vector<RoundRecord> run_rounds(const FederatedConfig& config,
                                    std::vector<FederatedClient*> clients);

}  // namespace fedmer
