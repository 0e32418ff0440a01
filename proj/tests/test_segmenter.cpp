#include "doctest.h"
#include "support.hpp"

#include "morphoseg/errors.hpp"
#include "morphoseg/segmenter.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace morphoseg;
using namespace testsupport;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("morphoseg_" + name);
}

std::string read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("reference layers and parameter layout") {
    const auto layers = reference_layers(1, 2);
    REQUIRE(layers.size() == 3);
    CHECK(layers[0] == ConvSpec{1, 8, 3, true});
    CHECK(layers[1] == ConvSpec{8, 16, 3, true});
    CHECK(layers[2] == ConvSpec{16, 2, 1, false});
    const auto p = init_params(layers, 1);
    CHECK(p.flat.size() == 80 + 1168 + 34);
    CHECK(p.offset(2) == 80 + 1168);
    const double bound = std::sqrt(6.0 / (9.0 + 72.0));
    for (std::size_t i = 0; i < 72; ++i) CHECK(std::abs(p.flat[i]) <= bound);
    for (std::size_t i = 72; i < 80; ++i) CHECK(p.flat[i] == 0.0);
    CHECK(init_params(layers, 1).flat == p.flat);
    CHECK(init_params(layers, 2).flat != p.flat);
}

TEST_CASE("forward shape and linearity contracts") {
    Rng rng(1);
    const auto img = random_image(rng, 12, 9);
    auto p = random_params(rng, 1, 2);
    const auto l = forward(p, img);
    CHECK(l.height == 12);
    CHECK(l.width == 9);
    CHECK(l.k == 2);

    auto zero = p;
    std::fill(zero.flat.begin(), zero.flat.end(), 0.0);
    for (double v : forward(zero, img).logits) CHECK(v == 0.0);

    // Freshly initialized biases are zero, so doubling the final weights
    // alone doubles the logits.
    const auto fresh = init_params(reference_layers(1, 2), 5);
    const auto l1 = forward(fresh, img);
    auto doubled = fresh;
    for (std::size_t i = fresh.offset(2); i < fresh.offset(2) + fresh.layers[2].weight_count(); ++i) {
        doubled.flat[i] *= 2.0;
    }
    const auto l2 = forward(doubled, img);
    for (std::size_t i = 0; i < l1.logits.size(); ++i) CHECK(l2.logits[i] == 2.0 * l1.logits[i]);

    CHECK_THROWS_AS(forward(p, random_image(rng, 4, 4, 3)), DataError);
}

TEST_CASE("forward is translation equivariant away from the border") {
    Rng rng(2);
    const auto img = random_image(rng, 16, 16);
    const auto p = random_params(rng, 1, 2);
    Image shifted(16, 16, 1);
    for (int r = 0; r < 16; ++r)
        for (int c = 1; c < 16; ++c) shifted.at(r, c) = img.at(r, c - 1);
    const auto a = forward(p, img), b = forward(p, shifted);
    // Receptive field radius 2: rows/cols within 3 px of the border differ.
    for (int r = 3; r < 13; ++r) {
        for (int c = 4; c < 13; ++c) {
            for (int j = 0; j < 2; ++j) {
                CHECK(b.logits[(static_cast<std::size_t>(r) * 16 + c) * 2 + j] ==
                      a.logits[(static_cast<std::size_t>(r) * 16 + c - 1) * 2 + j]);
            }
        }
    }
}

TEST_CASE("loss_and_grad matches finite differences for every strategy") {
    Rng rng(3);
    for (int t = 0; t < 4; ++t) {
        const auto img = random_image(rng, 8, 8);
        const auto target = random_mask(rng, 8, 8);
        const auto p = random_params(rng, 1, 2);
        const auto batches = random_batches(rng, 2, 200, 20);
        OutlierContext ctx{&batches, 0.2, rng.next_u64()};
        const auto idx = sample_param_indices(p, 60, rng);
        for (auto s : {Strategy::balance, Strategy::norm, Strategy::pareto}) {
            LossSpec spec;
            spec.strategy = s;
            const auto gc = check_gradient(p, img, target, spec, &ctx, idx);
            CHECK(gc.max_rel_error < 1e-4);
            CHECK(gc.checked > idx.size() / 2);
        }
    }
}

TEST_CASE("beta zero ignores the outlier context bit-exactly") {
    Rng rng(4);
    const auto img = random_image(rng, 8, 8);
    const auto target = random_mask(rng, 8, 8);
    const auto p = random_params(rng, 1, 2);
    const auto batches = random_batches(rng, 2, 100, 10);
    OutlierContext ctx{&batches, 0.3, 9};
    LossSpec spec;
    spec.weights.beta = 0.0;
    const auto with = loss_and_grad(p, img, target, spec, &ctx);
    const auto without = loss_and_grad(p, img, target, spec, nullptr);
    CHECK(with.grad == without.grad);
    CHECK(with.report.combined == without.report.combined);
    CHECK_FALSE(with.report.outlier_active);
}

TEST_CASE("uncertainty term equals the losses of the substituted map") {
    Rng rng(5);
    const auto img = random_image(rng, 8, 8);
    const auto target = random_mask(rng, 8, 8);
    const auto p = random_params(rng, 1, 2);
    const auto batches = random_batches(rng, 2, 100, 10);
    OutlierContext ctx{&batches, 0.25, 17};
    const auto r = loss_and_grad(p, img, target, LossSpec{}, &ctx).report;
    const auto syn = build_synthetic_map(forward(p, img), target, batches, 0.25, 17);
    CHECK(r.outlier_active);
    CHECK(r.ce_out == doctest::Approx(ce_loss(syn.logits, target)).epsilon(1e-14));
    CHECK(r.dice_out == doctest::Approx(dice_loss(foreground_probs(syn.logits), target)).epsilon(1e-14));

    OutlierContext none{&batches, 0.0, 17};
    const auto same = loss_and_grad(p, img, target, LossSpec{}, &none).report;
    CHECK(same.ce_out == same.ce);
    CHECK(same.dice_out == same.dice);
}

TEST_CASE("saturated correct prediction has a tiny dice gradient") {
    MaskMap target(6, 6);
    for (int r = 1; r < 5; ++r)
        for (int c = 1; c < 5; ++c) target.at(r, c) = 1;
    LogitMap l(6, 6, 2);
    for (std::size_t px = 0; px < l.pixel_count(); ++px) l.pixel(px)[target.labels[px]] = 30.0;
    const auto g = dice_with_grad(l, target);
    for (double v : g.dlogits) CHECK(std::abs(v) < 1e-9);
}

TEST_CASE("non-finite loss names the component") {
    Rng rng(6);
    auto p = random_params(rng, 1, 2);
    for (std::size_t i = p.offset(2); i < p.flat.size(); ++i) p.flat[i] = (i % 2 ? 1.0 : -1.0) * 1e308;
    const auto img = random_image(rng, 4, 4);
    try {
        loss_and_grad(p, img, random_mask(rng, 4, 4), LossSpec{});
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).rfind("non-finite loss component: ", 0) == 0);
    }
}

TEST_CASE("sgd arithmetic") {
    OptimHyper h;
    h.lr0 = 0.01;
    h.momentum = 0.9;
    h.weight_decay = 0.0;
    SegmenterParams p;
    p.layers = {ConvSpec{1, 1, 1, false}};
    p.flat = {1.0, 0.0};
    auto st = make_optim_state(p, h);
    auto [s1, p1] = sgd_step(st, p, std::vector<double>{1.0, 0.0}, 0);
    CHECK(s1.velocity[0] == 1.0);
    CHECK(p1.flat[0] == 0.99);
    CHECK(s1.step == 1);

    auto [s0, p0] = sgd_step(st, p, std::vector<double>{0.0, 0.0}, 0);
    CHECK(p0.flat == p.flat);

    h.momentum = 0.0;
    auto plain = make_optim_state(p, h);
    auto [a1, q1] = sgd_step(plain, p, std::vector<double>{0.5, -2.0}, 0);
    auto [a2, q2] = sgd_step(a1, q1, std::vector<double>{0.25, 1.0}, 1);
    CHECK(q2.flat[0] == (1.0 - 0.01 * 0.5) - lr_at(h, 1) * 0.25);
    CHECK(q2.flat[1] == (0.0 + 0.01 * 2.0) - lr_at(h, 1) * 1.0);

    CHECK_THROWS_AS(sgd_step(st, p, std::vector<double>{NAN, 0.0}, 0), NumericalError);
    CHECK_THROWS_AS(sgd_step(st, p, std::vector<double>{1.0}, 0), DataError);
}

TEST_CASE("learning rate schedule") {
    OptimHyper h;
    CHECK(lr_at(h, 0) == 0.01);
    CHECK(lr_at(h, 1) == doctest::Approx(0.0098).epsilon(1e-15));
    for (int e = 0; e < 50; ++e) CHECK(lr_at(h, e + 1) <= lr_at(h, e));
    h.momentum = 1.0;
    CHECK_THROWS_AS(h.validate(), ConfigError);
    h.momentum = 0.9;
    h.lr0 = 0.0;
    CHECK_THROWS_AS(h.validate(), ConfigError);
}

TEST_CASE("checkpoint round trip and corruption") {
    Rng rng(7);
    const auto p = random_params(rng, 1, 2);
    auto st = make_optim_state(p, OptimHyper{});
    for (auto& v : st.velocity) v = rng.normal();
    st.step = 42;
    const auto path = temp_file("ckpt_test.ckpt");
    save_checkpoint(p, st, path);
    const auto ck = load_checkpoint(path);
    CHECK(ck.params.flat == p.flat);
    CHECK(ck.params.layers == p.layers);
    CHECK(ck.optim.velocity == st.velocity);
    CHECK(ck.optim.step == 42);
    CHECK(ck.optim.hyper.gamma == st.hyper.gamma);

    const auto bytes = read_bytes(path);
    const auto corrupt = temp_file("ckpt_corrupt.ckpt");
    {
        std::ofstream out(corrupt, std::ios::binary);
        out << "{not json" << bytes.substr(bytes.find('\n'));
    }
    CHECK_THROWS_AS(load_checkpoint(corrupt), DataError);
    {
        std::ofstream out(corrupt, std::ios::binary);
        out << bytes.substr(0, bytes.size() - 8);
    }
    CHECK_THROWS_AS(load_checkpoint(corrupt), DataError);
    {
        std::ofstream out(corrupt, std::ios::binary);
        auto header = bytes.substr(0, bytes.find('\n'));
        const auto pos = header.find("\"version\":1");
        REQUIRE(pos != std::string::npos);
        header.replace(pos, 11, "\"version\":9");
        out << header << bytes.substr(bytes.find('\n'));
    }
    CHECK_THROWS_AS(load_checkpoint(corrupt), DataError);
    std::filesystem::remove(path);
    std::filesystem::remove(corrupt);
}
