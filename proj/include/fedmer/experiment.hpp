#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fedmer/datagen.hpp"
#include "fedmer/federated.hpp"
#include "fedmer/network.hpp"

namespace fedmer {

struct DataConfig {
    std::size_t class_count = 3;
    std::size_t subject_count = 30;
    std::size_t samples_per_subject_min = 15;
    std::size_t samples_per_subject_max = 25;
    double noise_level = 0.25;
    double flip_noise = 0.02;
    double subject_bias_scale = 0.5;
    std::size_t global_of_side = 32;
    double split_ratio = 0.7;
    std::size_t split_repeats = 10;
    // "independent": marginal AU patterns identify the class;
    // "relational": only coordinated AU pairs do
    std::string prototype_set = "independent";
};

struct PriorsSection {
    std::string config_path;  // empty: built-in default
    bool global_cooccurrence = false;
};

struct TrainConfig {
    double lr = 0.02;
    double momentum = 0.9;
    std::size_t batch_size = 8;
};

struct FedRunConfig {
    std::vector<Strategy> strategies = {Strategy::pfedprox};
    std::size_t clients = 5;
    std::size_t rounds = 5;
    std::size_t local_epochs = 1;
    double theta = 0.9;
    double alpha4 = 0.01;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string out_dir = "results";
    DataConfig data;
    PriorsSection priors;
    MerConfig model;
    TrainConfig train;
    FedRunConfig federated;

    static ExperimentConfig from_file(const std::string& path);
    static ExperimentConfig from_json_text(const std::string& text);
    void validate() const;
};

// one federated participant holding a recognition network and a slice of the
// synthetic dataset
class MerClient : public FederatedClient {
public:
    MerClient(std::size_t id, const MerConfig& cfg, const AuCatalog& catalog,
              const std::vector<Sample>* samples, std::vector<std::size_t> train_idx,
              std::vector<std::size_t> test_idx, PriorBundle priors, BetaSchedule beta,
              const TrainConfig& train, std::uint64_t init_seed);

    std::size_t id() const override { return id_; }
    std::size_t sample_count() const override { return train_.size(); }
    std::vector<std::uint8_t> upload_params() const override;
    void download_params(const std::vector<std::uint8_t>& bytes) override;
    double train_local(std::size_t epochs, double alpha4, std::size_t round_index) override;
    EvalResult evaluate(std::size_t round_index) override;
    double train_loss_now(std::size_t round_index) override;

    MerNetwork& network() { return net_; }
    const PriorBundle& priors() const { return priors_; }

private:
    std::size_t id_;
    const std::vector<Sample>* samples_;
    std::vector<std::size_t> train_, test_;
    MerNetwork net_;
    PriorBundle priors_;
    BetaSchedule beta_;
    Sgd opt_;
    std::size_t batch_;
    Rng shuffle_rng_;
};

// per (strategy, round, client) metrics averaged over the split repeats
struct AggregatedCell {
    double train_loss = 0.0;
    double uf1 = 0.0;
    double uar = 0.0;
    double uf1_sq = 0.0;  // for std over repeats
    ConfusionMatrix confusion;
    std::size_t repeats = 0;

    double uf1_std() const;
};

struct ExperimentResult {
    // key: strategy string; index [round-1][client]
    std::map<std::string, std::vector<std::vector<AggregatedCell>>> cells;
    std::vector<std::string> strategy_order;
    std::size_t rounds = 0;
    std::size_t clients = 0;

    const AggregatedCell& final_cell(const std::string& strategy, std::size_t client) const;
    double mean_final_uf1(const std::string& strategy) const;  // mean over clients
};

// the generator spec an experiment uses (seeded off the master seed)
GeneratorSpec generator_spec_from(const DataConfig& data, std::uint64_t master_seed);

// full pipeline: generate -> priors -> partition -> train per strategy and
// split -> aggregate metrics. Does not touch the filesystem.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

// run + write results.csv, summary.json and per-strategy confusion matrices
ExperimentResult run_experiment_to_dir(const ExperimentConfig& cfg, const std::string& out_dir);

// deterministic CSV text for a result (what results.csv contains)
std::string results_csv(const ExperimentResult& result);

}  // namespace fedmer
