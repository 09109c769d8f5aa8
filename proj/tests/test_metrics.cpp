#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fedmer/experiment.hpp"
#include "fedmer/metrics.hpp"
#include "fedmer/rng.hpp"
#include "support/metric_oracle.hpp"

using namespace fedmer;

TEST_CASE("perfect classification scores one on both metrics") {
    ConfusionMatrix cm(3);
    cm.counts = {5, 0, 0, 0, 7, 0, 0, 0, 2};
    CHECK(uf1(cm).value == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(uar(cm).value == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("hand-computed two-class example") {
    ConfusionMatrix cm(2);
    cm.counts = {3, 1, 2, 4};
    const double expected_uf1 = (2.0 / 3.0 + 8.0 / 11.0) / 2.0;  // ~0.69697
    const double expected_uar = (3.0 / 4.0 + 4.0 / 6.0) / 2.0;   // ~0.70833
    CHECK(std::abs(uf1(cm).value - expected_uf1) < 1e-12);
    CHECK(std::abs(uar(cm).value - expected_uar) < 1e-12);
    CHECK(uf1(cm).value == doctest::Approx(0.69697).epsilon(1e-4));
    CHECK(uar(cm).value == doctest::Approx(0.70833).epsilon(1e-4));
}

TEST_CASE("metrics match the brute-force oracle on random predictions") {
    Rng rng(1);
    for (int trial = 0; trial < 100; ++trial) {
        const int classes = 2 + static_cast<int>(rng.below(5));
        std::vector<std::pair<int, int>> pairs;
        const std::size_t n = 20 + rng.below(100);
        ConfusionMatrix cm(classes);
        for (std::size_t i = 0; i < n; ++i) {
            const int t = static_cast<int>(rng.below(classes));
            const int p = static_cast<int>(rng.below(classes));
            pairs.emplace_back(t, p);
            cm.record(t, p);
        }
        CHECK(cm.total() == n);
        CHECK(std::abs(uf1(cm).value - test::uf1_reference(pairs, classes)) < 1e-12);
        CHECK(std::abs(uar(cm).value - test::uar_reference(pairs, classes)) < 1e-12);
    }
}

TEST_CASE("metrics are invariant under simultaneous class permutation") {
    Rng rng(2);
    ConfusionMatrix cm(4);
    for (int i = 0; i < 200; ++i) {
        cm.record(rng.below(4), rng.below(4));
    }
    const std::size_t perm[4] = {2, 0, 3, 1};
    ConfusionMatrix permuted(4);
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 4; ++j) {
            permuted.counts[perm[i] * 4 + perm[j]] = cm.at(i, j);
        }
    }
    CHECK(std::abs(uf1(cm).value - uf1(permuted).value) < 1e-12);
    CHECK(std::abs(uar(cm).value - uar(permuted).value) < 1e-12);
}

TEST_CASE("a uniform predictor on balanced classes scores about 1/N") {
    Rng rng(3);
    const std::size_t classes = 4;
    ConfusionMatrix cm(classes);
    for (int i = 0; i < 10000; ++i) {
        cm.record(rng.below(classes), rng.below(classes));
    }
    CHECK(std::abs(uar(cm).value - 1.0 / static_cast<double>(classes)) < 0.02);
}

TEST_CASE("zero-support classes contribute zero and are flagged") {
    ConfusionMatrix cm(3);
    cm.counts = {4, 0, 0, 1, 3, 0, 0, 0, 0};  // class 2 never appears
    const auto f1 = uf1(cm);
    const auto rec = uar(cm);
    REQUIRE(f1.zero_support_classes.size() == 1);
    CHECK(f1.zero_support_classes[0] == 2);
    REQUIRE(rec.zero_support_classes.size() == 1);
    CHECK(rec.zero_support_classes[0] == 2);
    CHECK(rec.value == doctest::Approx((1.0 + 0.75 + 0.0) / 3.0).epsilon(1e-12));
}

TEST_CASE("experiment config validation points at the offending field") {
    const char* bad_theta = R"({"seed": 1, "federated": {"theta": 1.5}})";
    try {
        ExperimentConfig::from_json_text(bad_theta);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.field == "federated.theta");
    }
    CHECK_THROWS_AS(ExperimentConfig::from_json_text("{nope"), ConfigError);
    const char* bad_strategy = R"({"federated": {"strategies": ["nope"]}})";
    CHECK_THROWS_AS(ExperimentConfig::from_json_text(bad_strategy), ConfigError);
}

namespace {

ExperimentConfig tiny_experiment() {
    // smallest full-pipeline configuration that still exercises both
    // strategies end to end
    ExperimentConfig cfg;
    cfg.seed = 11;
    cfg.data.class_count = 3;
    cfg.data.subject_count = 4;
    cfg.data.samples_per_subject_min = 4;
    cfg.data.samples_per_subject_max = 5;
    cfg.data.noise_level = 0.2;
    cfg.data.global_of_side = 8;
    cfg.data.split_repeats = 1;
    cfg.model.class_count = 3;
    cfg.model.global_of_side = 8;
    cfg.model.lfe_mid1 = 6;
    cfg.model.lfe_mid2 = 8;
    cfg.model.gat_width = 16;
    cfg.model.inception_channels = 4;
    cfg.train.batch_size = 4;
    cfg.federated.clients = 2;
    cfg.federated.rounds = 2;
    cfg.federated.strategies = {Strategy::fedavg, Strategy::pfedprox};
    return cfg;
}

}  // namespace

TEST_CASE("experiment produces one CSV row per strategy, round, and client") {
    const ExperimentConfig cfg = tiny_experiment();
    const ExperimentResult result = run_experiment(cfg);
    const std::string csv = results_csv(result);
    std::size_t rows = 0;
    for (char c : csv) rows += c == '\n' ? 1 : 0;
    // header + strategies x rounds x clients
    CHECK(rows == 1 + cfg.federated.strategies.size() * cfg.federated.rounds *
                      cfg.federated.clients);
}

TEST_CASE("experiment runs are byte-identical for the same seed") {
    const ExperimentConfig cfg = tiny_experiment();
    const std::string a = results_csv(run_experiment(cfg));
    const std::string b = results_csv(run_experiment(cfg));
    CHECK(a == b);
    CHECK(a.find("pfedprox") != std::string::npos);
}
