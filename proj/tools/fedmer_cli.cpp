#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fedmer/experiment.hpp"

namespace {

using namespace fedmer;

void apply_overrides(ExperimentConfig& cfg, const std::optional<std::string>& strategy,
                     const std::optional<std::uint64_t>& seed,
                     const std::optional<std::size_t>& rounds,
                     const std::optional<std::size_t>& clients) {
    if (strategy) cfg.federated.strategies = {strategy_from_string(*strategy)};
    if (seed) cfg.seed = *seed;
    if (rounds) cfg.federated.rounds = *rounds;
    if (clients) cfg.federated.clients = *clients;
    cfg.validate();
}

int cmd_run(const std::string& config_path, const std::optional<std::string>& strategy,
            const std::optional<std::uint64_t>& seed, const std::optional<std::size_t>& rounds,
            const std::optional<std::size_t>& clients, const std::optional<std::string>& out_dir) {
    ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
    apply_overrides(cfg, strategy, seed, rounds, clients);
    const std::string dir = out_dir ? *out_dir : cfg.out_dir;
    const ExperimentResult result = run_experiment_to_dir(cfg, dir);
    for (const std::string& s : result.strategy_order) {
        std::cout << s << ": mean final UF1 = " << result.mean_final_uf1(s) << "\n";
    }
    std::cout << "wrote " << dir << "/results.csv, summary.json and confusion matrices\n";
    return 0;
}

int cmd_generate(const std::string& config_path, const std::optional<std::uint64_t>& seed,
                 const std::optional<std::size_t>& clients,
                 const std::optional<std::string>& out_dir) {
    ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
    apply_overrides(cfg, std::nullopt, seed, std::nullopt, clients);

    const RoiLayout layout = RoiLayout::default_layout();
    const AuCatalog catalog = default_catalog(layout);
    const GeneratorSpec spec = generator_spec_from(cfg.data, cfg.seed);
    const auto samples = generate(spec, layout, catalog);
    const auto parts = partition_clients(samples, cfg.federated.clients);
    const std::string dir = out_dir ? *out_dir : cfg.out_dir;
    std::filesystem::create_directories(dir);
    for (std::size_t c = 0; c < parts.size(); ++c) {
        std::vector<Sample> local;
        for (std::size_t idx : parts[c]) local.push_back(samples[idx]);
        const std::string path = dir + "/client_" + std::to_string(c) + ".bin";
        write_dataset_file(path, local, spec.global_of_side, spec.class_count);
        std::cout << path << ": " << local.size() << " samples\n";
    }
    return 0;
}

int cmd_inspect_dataset(const std::string& path, std::size_t limit) {
    std::size_t of_side = 0, class_count = 0;
    const auto samples = read_dataset_file(path, &of_side, &class_count);
    std::cout << "{\"samples\": " << samples.size() << ", \"of_side\": " << of_side
              << ", \"class_count\": " << class_count << "}\n";
    const std::size_t n = limit == 0 ? samples.size() : std::min(limit, samples.size());
    for (std::size_t i = 0; i < n; ++i) {
        const Sample& s = samples[i];
        nlohmann::ordered_json j;
        j["index"] = i;
        j["subject"] = s.subject_id;
        j["emotion"] = s.emotion;
        j["au_labels"] = s.au_labels;
        const auto energy = roi_flow_energy(s, s.roi_patches.size() / 75);
        double total = 0.0;
        for (double e : energy) total += e;
        j["roi_energy_total"] = total;
        j["roi_energy"] = energy;
        std::cout << j.dump() << "\n";
    }
    return 0;
}

int cmd_inspect_params(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ContractError("cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    const ParamSet params = deserialize(bytes);
    for (const auto& e : params.entries()) {
        double lo = 0.0, hi = 0.0, sum = 0.0;
        if (!e.tensor.value().empty()) {
            lo = hi = e.tensor.value()[0];
            for (double v : e.tensor.value()) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
                sum += v;
            }
        }
        nlohmann::ordered_json j;
        j["name"] = e.name;
        j["shape"] = e.tensor.shape();
        j["min"] = lo;
        j["max"] = hi;
        j["mean"] = e.tensor.numel() ? sum / static_cast<double>(e.tensor.numel()) : 0.0;
        std::cout << j.dump() << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated micro-expression recognition on synthetic AU-conditioned data"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::string> strategy, out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> rounds, clients;

    auto add_common = [&](CLI::App* cmd, bool need_config) {
        auto* opt = cmd->add_option("--config", config_path, "experiment config file (JSON)");
        if (need_config) opt->required();
        cmd->add_option("--seed", seed, "override the master seed");
        cmd->add_option("--out-dir", out_dir, "override the output directory");
        cmd->add_option("--clients", clients, "override the client count");
    };

    auto* run = app.add_subcommand("run", "run the federated experiment and write results");
    add_common(run, true);
    run->add_option("--strategy", strategy,
                    "run a single strategy (fedavg|fedprox|pfedprox|local-only)");
    run->add_option("--rounds", rounds, "override the round count");

    auto* gen = app.add_subcommand("generate", "generate the dataset only, one file per client");
    add_common(gen, true);

    auto* inspect = app.add_subcommand("inspect", "dump datasets or parameter files as JSON");
    std::string dataset_path, params_path;
    std::size_t limit = 5;
    inspect->add_option("--dataset", dataset_path, "dataset file to dump");
    inspect->add_option("--params", params_path, "serialized parameter file to dump");
    inspect->add_option("--limit", limit, "samples to dump (0 = all)");

    auto* list = app.add_subcommand("list-strategies", "print the available strategies");

    CLI11_PARSE(app, argc, argv);

    try {
        if (list->parsed()) {
            for (const auto& name : fedmer::strategy_names()) std::cout << name << "\n";
            return 0;
        }
        if (run->parsed()) return cmd_run(config_path, strategy, seed, rounds, clients, out_dir);
        if (gen->parsed()) return cmd_generate(config_path, seed, clients, out_dir);
        if (inspect->parsed()) {
            if (!dataset_path.empty()) return cmd_inspect_dataset(dataset_path, limit);
            if (!params_path.empty()) return cmd_inspect_params(params_path);
            std::cerr << "inspect: need --dataset or --params\n";
            return 2;
        }
    } catch (const fedmer::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
