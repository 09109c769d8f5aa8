#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "fedmer/network.hpp"
#include "support/gradcheck.hpp"
#include "support/tiny_model.hpp"

using namespace fedmer;
using fedmer::test::GradCheckOptions;
using fedmer::test::gradcheck;
using fedmer::test::tiny_catalog;
using fedmer::test::tiny_config;
using fedmer::test::tiny_priors;
using fedmer::test::tiny_sample;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = scale * rng.normal();
    return Tensor::from(std::move(shape), std::move(v));
}

std::vector<Tensor> trainable_tensors(ParamSet& ps) {
    std::vector<Tensor> out;
    for (auto& e : ps.entries()) {
        if (e.trainable) out.push_back(e.tensor);
    }
    return out;
}

}  // namespace

TEST_CASE("lfe maps zero input to zero output under default init") {
    ParamSet ps;
    Rng rng(1);
    LfeBlock lfe(ps, "lfe", 3, 6, 8, rng);
    Tensor x = Tensor::zeros({4, 3, 5, 5});
    ForwardMode mode;
    mode.update_stats = false;
    Tensor y = lfe.forward(x, mode);
    CHECK(y.shape() == Shape{4, 3, 5, 5});
    for (double v : y.value()) CHECK(v == 0.0);
}

TEST_CASE("lfe preserves the 3x5x5 patch geometry") {
    ParamSet ps;
    Rng rng(2);
    LfeBlock lfe(ps, "lfe", 3, 32, 64, rng);
    Tensor x = random_tensor({65, 3, 5, 5}, rng);
    ForwardMode mode;
    Tensor y = lfe.forward(x, mode);
    CHECK(y.shape() == Shape{65, 3, 5, 5});
}

TEST_CASE("lfe gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        ParamSet ps;
        Rng rng(hash_seed(seed, "lfe-grad"));
        LfeBlock lfe(ps, "lfe", 3, 4, 5, rng);
        Tensor x = random_tensor({2, 3, 5, 5}, rng);
        Tensor r = random_tensor({2, 3, 5, 5}, rng);
        ForwardMode mode;
        mode.update_stats = false;
        GradCheckOptions opt;
        opt.allow_kinks = true;
        const auto report = gradcheck(
            trainable_tensors(ps), [&]() { return sum_all(mul(lfe.forward(x, mode), r)); }, rng,
            opt);
        CHECK(report.pass);
    }
}

TEST_CASE("sse with a single token attends only to itself") {
    ParamSet ps;
    Rng rng(3);
    SseEncoder sse(ps, "sse", 1, 75, 3, 150, rng);
    Tensor tokens = random_tensor({1, 75}, rng);
    sse.forward(tokens);
    REQUIRE(sse.last_attention.size() == 3);
    for (const Tensor& att : sse.last_attention) {
        CHECK(att.value().size() == 1);
        CHECK(att.value()[0] == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("sse attention rows sum to one per head over 65 tokens") {
    ParamSet ps;
    Rng rng(4);
    SseEncoder sse(ps, "sse", 65, 75, 3, 150, rng);
    Tensor tokens = random_tensor({65, 75}, rng);
    sse.forward(tokens);
    for (const Tensor& att : sse.last_attention) {
        for (std::size_t r = 0; r < 65; ++r) {
            double sum = 0.0;
            for (std::size_t c = 0; c < 65; ++c) sum += att.value()[r * 65 + c];
            CHECK(std::abs(sum - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("sse is equivariant to permuting tokens with their embeddings") {
    ParamSet ps;
    Rng rng(5);
    SseEncoder sse(ps, "sse", 6, 75, 3, 150, rng);
    Tensor tokens = random_tensor({6, 75}, rng);
    Tensor out = sse.forward(tokens);

    // swap tokens 1 and 4 together with their positional embedding rows
    auto swap_rows = [](std::vector<double>& data, std::size_t w, std::size_t i, std::size_t j) {
        for (std::size_t c = 0; c < w; ++c) std::swap(data[i * w + c], data[j * w + c]);
    };
    std::vector<double> permuted = tokens.value();
    swap_rows(permuted, 75, 1, 4);
    Tensor tokens_p = Tensor::from({6, 75}, permuted);
    std::vector<double> embed_saved = sse.pos_embed.value();
    swap_rows(sse.pos_embed.value(), 75, 1, 4);
    Tensor out_p = sse.forward(tokens_p);
    sse.pos_embed.value() = embed_saved;

    std::vector<double> expected = out.value();
    swap_rows(expected, 75, 1, 4);
    for (std::size_t i = 0; i < expected.size(); ++i) {
        CHECK(std::abs(out_p.value()[i] - expected[i]) < 1e-9);
    }
}

TEST_CASE("sse rejects a wrong token count") {
    ParamSet ps;
    Rng rng(6);
    SseEncoder sse(ps, "sse", 8, 75, 3, 150, rng);
    CHECK_THROWS_AS(sse.forward(Tensor::zeros({7, 75})), ContractError);
}

TEST_CASE("gse residual identities for forced attention weights") {
    ParamSet ps;
    Rng rng(7);
    GseBlock gse(ps, "gse", 3, rng);
    Tensor group = random_tensor({5, 3, 5, 5}, rng);

    Tensor zeros = Tensor::zeros({5, 3});
    Tensor out0 = gse.forward(group, &zeros);
    for (std::size_t i = 0; i < group.numel(); ++i) {
        CHECK(out0.value()[i] == group.value()[i]);
    }

    Tensor ones = Tensor::full({5, 3}, 1.0);
    Tensor out1 = gse.forward(group, &ones);
    for (std::size_t i = 0; i < group.numel(); ++i) {
        CHECK(out1.value()[i] == doctest::Approx(2.0 * group.value()[i]).epsilon(1e-15));
    }

    CHECK_THROWS_AS(gse.forward(Tensor::zeros({0, 3, 5, 5})), ContractError);
}

TEST_CASE("gse gradients flow through pooling, fc, and residual") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        ParamSet ps;
        Rng rng(hash_seed(seed, "gse-grad"));
        GseBlock gse(ps, "gse", 3, rng);
        Tensor group = random_tensor({4, 3, 5, 5}, rng);
        group.set_requires_grad(true);
        Tensor r = random_tensor({4, 3, 5, 5}, rng);
        auto params = trainable_tensors(ps);
        params.push_back(group);
        const auto report =
            gradcheck(params, [&]() { return sum_all(mul(gse.forward(group), r)); }, rng);
        CHECK(report.pass);
        CHECK(report.max_rel_err < 1e-4);
    }
}

TEST_CASE("afe reduces each ROI group to its AU count") {
    const RoiLayout layout = RoiLayout::default_layout();
    const AuCatalog catalog = default_catalog(layout);
    ParamSet ps;
    Rng rng(8);
    ForwardMode mode;

    std::size_t total = 0;
    for (std::size_t g = 0; g < catalog.group_count(); ++g) {
        AfeBlock afe(ps, "afe" + std::to_string(g), catalog.roi_groups[g].size(),
                     catalog.au_count_of_group[g], 3, 5, rng);
        Tensor in = random_tensor({catalog.roi_groups[g].size(), 3, 5, 5}, rng, 0.3);
        Tensor out = afe.forward(in, mode);
        CHECK(out.shape() == Shape{catalog.au_count_of_group[g], 3, 5, 5});
        total += out.dim(0);
    }
    CHECK(total == 12);
    // paper's table: group 3 keeps 2 AU features, group 4 keeps 4
    CHECK(catalog.au_count_of_group[2] == 2);
    CHECK(catalog.au_count_of_group[3] == 4);
}

TEST_CASE("afe rejects a wrong group cardinality") {
    ParamSet ps;
    Rng rng(9);
    AfeBlock afe(ps, "afe", 6, 2, 3, 5, rng);
    ForwardMode mode;
    CHECK_THROWS_AS(afe.forward(Tensor::zeros({5, 3, 5, 5}), mode), ContractError);
}

TEST_CASE("gat attention honors the mask, the mixture, and the endpoints") {
    Rng rng(10);
    PriorPack pack = tiny_priors();
    ParamSet ps;
    GatLayer gat(ps, "gat", 3, 10, 16, false, 0.2, rng);
    Tensor nodes = random_tensor({4, 10}, rng);

    // beta = 0: rows over neighbors sum to 1
    gat.forward(nodes, pack.A, pack.D, 0.0);
    for (const Tensor& att : gat.last_attention) {
        for (std::size_t i = 0; i < 4; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < 4; ++j) {
                sum += att.value()[i * 4 + j];
                if (pack.A(i, j) == 0.0) CHECK(att.value()[i * 4 + j] == 0.0);
            }
            CHECK(std::abs(sum - 1.0) < 1e-9);
        }
    }

    // beta = 1: attention reproduces D exactly
    gat.forward(nodes, pack.A, pack.D, 1.0);
    for (const Tensor& att : gat.last_attention) {
        for (std::size_t i = 0; i < 16; ++i) CHECK(att.value()[i] == pack.D.m[i]);
    }

    // intermediate beta: mask still exact, rows still stochastic
    gat.forward(nodes, pack.A, pack.D, 0.4);
    for (const Tensor& att : gat.last_attention) {
        for (std::size_t i = 0; i < 4; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < 4; ++j) {
                if (pack.A(i, j) == 0.0) CHECK(att.value()[i * 4 + j] == 0.0);
                sum += att.value()[i * 4 + j];
            }
            CHECK(std::abs(sum - 1.0) < 1e-9);
        }
    }

    CHECK_THROWS_AS(gat.forward(nodes, pack.A, pack.D, 1.5), ContractError);
    SquareMat bad_d = pack.D;
    bad_d(0, 3) = 0.5;  // support outside A
    CHECK_THROWS_AS(gat.forward(nodes, pack.A, bad_d, 0.5), ContractError);
}

TEST_CASE("an isolated node passes through as its projected residual") {
    Rng rng(11);
    SquareMat a(3);  // node 2 isolated
    a(0, 1) = a(1, 0) = 1.0;
    SquareMat d(3);
    d(0, 1) = 1.0;
    d(1, 0) = 1.0;

    ParamSet ps;
    GatLayer gat(ps, "gat", 1, 6, 8, false, 0.2, rng);
    Tensor nodes = random_tensor({3, 6}, rng);
    Tensor out = gat.forward(nodes, a, d, 0.3);

    // expected: f = nodes @ W, isolated row output = ELU(0) + f = f
    const auto& w = ps.at("gat.head0.weight").value();
    for (std::size_t c = 0; c < 8; ++c) {
        double f = 0.0;
        for (std::size_t k = 0; k < 6; ++k) f += nodes.value()[2 * 6 + k] * w[k * 8 + c];
        CHECK(out.value()[2 * 8 + c] == doctest::Approx(f).epsilon(1e-12));
    }
}

TEST_CASE("gat layer gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        Rng rng(hash_seed(seed, "gat-grad"));
        PriorPack pack = tiny_priors();
        ParamSet ps;
        GatLayer gat(ps, "gat", 2, 6, 5, false, 0.2, rng);
        Tensor nodes = random_tensor({4, 6}, rng);
        nodes.set_requires_grad(true);
        Tensor r = random_tensor({4, 10}, rng);
        auto params = trainable_tensors(ps);
        params.push_back(nodes);
        GradCheckOptions opt;
        opt.allow_kinks = true;
        const auto report = gradcheck(
            params, [&]() { return sum_all(mul(gat.forward(nodes, pack.A, pack.D, 0.4), r)); },
            rng, opt);
        CHECK(report.pass);
    }
}

TEST_CASE("inception block concatenates the four branch outputs") {
    ParamSet ps;
    Rng rng(12);
    InceptionBlock block(ps, "inc", 3, 8, rng);
    Tensor x = random_tensor({1, 3, 8, 8}, rng);
    Tensor y = block.forward(x);
    CHECK(y.shape() == Shape{1, 32, 8, 8});
    CHECK(InceptionBlock::out_channels(8) == 32);
}

TEST_CASE("au loss reproduces hand arithmetic and saturates") {
    // zero logits: every AU contributes ln 2 regardless of its label
    Tensor logits = Tensor::zeros({12});
    std::vector<double> lab(12, 0.0);
    lab[0] = 1.0;
    Tensor labels = Tensor::from({12}, lab);
    CHECK(std::abs(au_loss(logits, labels).item() - std::log(2.0)) < 1e-12);

    // confident correct logits contribute almost nothing
    Tensor big = Tensor::full({12}, 30.0);
    Tensor ones = Tensor::full({12}, 1.0);
    CHECK(au_loss(big, ones).item() < 1e-12);

    // permutation invariance of the mean
    Rng rng(13);
    Tensor l2 = random_tensor({6}, rng);
    std::vector<double> y2 = {1, 0, 0, 1, 1, 0};
    Tensor lab2 = Tensor::from({6}, y2);
    const double base = au_loss(l2, lab2).item();
    std::vector<double> lp(6), yp(6);
    const std::size_t perm[6] = {3, 5, 0, 1, 4, 2};
    for (std::size_t i = 0; i < 6; ++i) {
        lp[i] = l2.value()[perm[i]];
        yp[i] = y2[perm[i]];
    }
    CHECK(std::abs(au_loss(Tensor::from({6}, lp), Tensor::from({6}, yp)).item() - base) < 1e-12);
}

TEST_CASE("mer loss composes the three terms with the paper weights") {
    LossWeights w;
    Tensor one = Tensor::scalar(1.0);
    Tensor half = Tensor::scalar(0.5);
    CHECK(mer_loss(one, half, half, w).item() == doctest::Approx(1.0).epsilon(1e-15));

    Tensor zero = Tensor::scalar(0.0);
    CHECK(mer_loss(zero, zero, zero, w).item() == 0.0);

    LossWeights ce_only{1.0, 0.0, 0.0};
    Tensor ce = Tensor::scalar(0.37);
    CHECK(mer_loss(ce, half, half, ce_only).item() == doctest::Approx(0.37).epsilon(1e-15));
}

TEST_CASE("network emits the configured class width") {
    const AuCatalog catalog = tiny_catalog();
    Rng rng(14);

    MerConfig cfg3 = tiny_config();
    MerNetwork net3(cfg3, catalog, 1);
    PriorBundle bundle = make_prior_bundle(tiny_priors(), catalog);
    Sample s = tiny_sample(rng);
    ForwardMode mode;
    mode.update_stats = false;
    MerOutputs out3 = net3.forward(s, bundle, 0.3, mode);
    CHECK(out3.emotion_logits.shape() == Shape{3});
    CHECK(out3.au_logits_afe.shape() == Shape{4});
    CHECK(out3.au_logits_gat.shape() == Shape{4});

    MerConfig cfg7 = tiny_config();
    cfg7.class_count = 7;
    MerNetwork net7(cfg7, catalog, 1);
    MerOutputs out7 = net7.forward(s, bundle, 0.3, mode);
    CHECK(out7.emotion_logits.shape() == Shape{7});
}

TEST_CASE("ablation toggles keep the parameter count fixed") {
    const AuCatalog catalog = tiny_catalog();
    MerConfig base = tiny_config();
    MerConfig no_psych = base;
    no_psych.use_psych_prior = false;
    MerConfig no_data = base;
    no_data.use_data_prior = false;
    MerNetwork a(base, catalog, 3), b(no_psych, catalog, 3), c(no_data, catalog, 3);
    CHECK(a.params().total_values() == b.params().total_values());
    CHECK(a.params().total_values() == c.params().total_values());
    CHECK(a.params().conforms(b.params()));
}

TEST_CASE("local feature order is upper nodes then lower nodes") {
    const AuCatalog catalog = tiny_catalog();
    MerNetwork net(tiny_config(), catalog, 5);
    const auto& order = net.local_node_order();
    REQUIRE(order.size() == 4);
    CHECK(order[0] == 0);
    CHECK(order[1] == 1);
    CHECK(order[2] == 2);
    CHECK(order[3] == 3);
}

TEST_CASE("masked global attention never links same-region AUs") {
    const AuCatalog catalog = tiny_catalog();
    MerNetwork net(tiny_config(), catalog, 6);
    PriorBundle bundle = make_prior_bundle(tiny_priors(), catalog);
    Rng rng(15);
    Sample s = tiny_sample(rng);
    ForwardMode mode;
    mode.update_stats = false;
    net.forward(s, bundle, 0.5, mode);

    const auto& order = net.local_node_order();
    for (const GatLayer* layer : {&net.global_gat().l1, &net.global_gat().l2}) {
        REQUIRE(!layer->last_attention.empty());
        for (const Tensor& att : layer->last_attention) {
            for (std::size_t i = 0; i < order.size(); ++i) {
                for (std::size_t j = 0; j < order.size(); ++j) {
                    if (catalog.region_of_au[order[i]] == catalog.region_of_au[order[j]]) {
                        CHECK(att.value()[i * order.size() + j] == 0.0);
                    }
                }
            }
        }
    }
}

TEST_CASE("beta one reproduces D inside the full network") {
    const AuCatalog catalog = tiny_catalog();
    MerNetwork net(tiny_config(), catalog, 7);
    PriorBundle bundle = make_prior_bundle(tiny_priors(), catalog);
    Rng rng(16);
    Sample s = tiny_sample(rng);
    ForwardMode mode;
    mode.update_stats = false;
    net.forward(s, bundle, 1.0, mode);
    for (const Tensor& att : net.upper_gat().l1.last_attention) {
        for (std::size_t i = 0; i < att.numel(); ++i) {
            CHECK(att.value()[i] == bundle.upper.D.m[i]);
        }
    }
}

TEST_CASE("dropping the data prior zeroes the mixture weight") {
    const AuCatalog catalog = tiny_catalog();
    MerConfig cfg = tiny_config();
    cfg.use_data_prior = false;
    MerNetwork net(cfg, catalog, 8);
    PriorBundle bundle = make_prior_bundle(tiny_priors(), catalog);
    Rng rng(17);
    Sample s = tiny_sample(rng);
    ForwardMode mode;
    mode.update_stats = false;
    net.forward(s, bundle, 0.7, mode);  // beta requested but must be ignored
    for (const Tensor& att : net.upper_gat().l1.last_attention) {
        for (std::size_t i = 0; i < 2; ++i) {
            double sum = 0.0;
            bool any = false;
            for (std::size_t j = 0; j < 2; ++j) {
                sum += att.value()[i * 2 + j];
                any = any || bundle.upper.A(i, j) != 0.0;
            }
            if (any) CHECK(std::abs(sum - 1.0) < 1e-9);  // pure softmax rows
        }
    }
}

TEST_CASE("end-to-end gradients of the full loss match finite differences") {
    const AuCatalog catalog = tiny_catalog();
    MerNetwork net(tiny_config(), catalog, 42);
    PriorBundle bundle = make_prior_bundle(tiny_priors(), catalog);
    Rng rng(18);
    Sample s = tiny_sample(rng);
    ForwardMode mode;
    mode.update_stats = false;

    GradCheckOptions opt;
    opt.allow_kinks = true;
    opt.coords_per_tensor = 4;
    Rng check_rng(19);
    const auto report = gradcheck(
        trainable_tensors(net.params()),
        [&]() { return net.loss(s, bundle, 0.4, mode); }, check_rng, opt);
    CHECK(report.pass);
    CHECK(report.max_rel_err < 1e-4);
    CHECK(report.checked > 200);
}

TEST_CASE("forward pass is deterministic bit for bit") {
    const AuCatalog catalog = tiny_catalog();
    PriorBundle bundle = make_prior_bundle(tiny_priors(), catalog);
    Rng rng(20);
    Sample s = tiny_sample(rng);
    ForwardMode mode;
    mode.update_stats = false;

    MerNetwork n1(tiny_config(), catalog, 99);
    MerNetwork n2(tiny_config(), catalog, 99);
    const auto a = n1.forward(s, bundle, 0.25, mode).emotion_logits.value();
    const auto b = n2.forward(s, bundle, 0.25, mode).emotion_logits.value();
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}
