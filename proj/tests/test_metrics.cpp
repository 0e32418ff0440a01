#include "doctest.h"
#include "support.hpp"

#include "morphoseg/errors.hpp"
#include "morphoseg/losses.hpp"
#include "morphoseg/metrics.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace morphoseg;
using namespace testsupport;

namespace {

MaskMap from_points(int h, int w, std::initializer_list<std::pair<int, int>> pts) {
    MaskMap m(h, w);
    for (auto [r, c] : pts) m.at(r, c) = 1;
    return m;
}

std::vector<double> as_probs(const MaskMap& m) {
    std::vector<double> p(m.labels.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = m.labels[i] != 0 ? 1.0 : 0.0;
    return p;
}

}  // namespace

TEST_CASE("confusion counts the three pixel sets") {
    const auto pred = from_points(1, 3, {{0, 0}, {0, 1}});
    const auto gt = from_points(1, 3, {{0, 1}, {0, 2}});
    const auto c = confusion(pred, gt);
    CHECK(c.tp == 1);
    CHECK(c.fp == 1);
    CHECK(c.fn == 1);
    CHECK(dsc(c) == doctest::Approx(50.0).epsilon(1e-15));
    CHECK(iou(c) == doctest::Approx(100.0 / 3.0).epsilon(1e-15));

    const auto same = confusion(gt, gt);
    CHECK(same.fp == 0);
    CHECK(same.fn == 0);
    const auto empty = confusion(MaskMap(1, 3), gt);
    CHECK(empty.tp == 0);
    CHECK(empty.fp == 0);
    CHECK(empty.fn == 2);
}

TEST_CASE("dsc and iou conventions") {
    const MaskMap empty(4, 4);
    CHECK(dsc(empty, empty) == 100.0);
    CHECK(iou(empty, empty) == 100.0);
    const auto a = from_points(4, 4, {{0, 0}});
    const auto b = from_points(4, 4, {{3, 3}});
    CHECK(dsc(a, empty) == 0.0);
    CHECK(iou(a, b) == 0.0);
    CHECK(dsc(a, a) == 100.0);
    CHECK_THROWS_AS(dsc(MaskMap(2, 2), MaskMap(2, 3)), DataError);
}

TEST_CASE("hd95 of two single pixels") {
    const auto x = from_points(6, 6, {{0, 0}});
    const auto y = from_points(6, 6, {{3, 4}});
    const auto pool = boundary_distances(x, y);
    REQUIRE(pool.size() == 2);
    CHECK(pool[0] == 5.0);
    CHECK(pool[1] == 5.0);
    CHECK(*hd95(x, y) == 5.0);
    CHECK(*hd95(x, x) == 0.0);
    CHECK_FALSE(hd95(x, MaskMap(6, 6)).has_value());
}

TEST_CASE("metrics agree with brute-force oracles on random masks") {
    Rng rng(101);
    for (int t = 0; t < 300; ++t) {
        const int h = rng.between(1, 20), w = rng.between(1, 20);
        const auto a = random_mask(rng, h, w), b = random_mask(rng, h, w);
        const auto c = confusion(a, b);
        const auto o = count_pixels(a, b);
        REQUIRE(static_cast<long>(c.tp) == o.tp);
        REQUIRE(static_cast<long>(c.fp) == o.fp);
        REQUIRE(static_cast<long>(c.fn) == o.fn);

        const auto got = hd95(a, b);
        const auto want = hd95_oracle(a, b);
        REQUIRE(got.has_value() == want.has_value());
        if (got) {
            CHECK(*got == *want);
            CHECK(*hd95(b, a) == *got);
            CHECK(*got <= *hausdorff(a, b));
            const auto pool = pooled_distances_oracle(a, b);
            CHECK(*hausdorff(a, b) == *std::max_element(pool.begin(), pool.end()));
        }
        CHECK(dsc(a, b) == dsc(b, a));
        CHECK(iou(a, b) == iou(b, a));
        const double d = dsc(a, b), i = iou(a, b);
        CHECK(d >= i);
        if (d == i) CHECK((i == 0.0 || i == 100.0));
    }
}

TEST_CASE("dsc matches the dice loss with zero epsilon on binary predictions") {
    Rng rng(7);
    for (int t = 0; t < 100; ++t) {
        const auto a = random_mask(rng, 8, 8), b = random_mask(rng, 8, 8);
        if (a.foreground_count() + b.foreground_count() == 0) continue;
        const auto p = as_probs(a);
        CHECK(std::abs(dsc(a, b) - 100.0 * (1.0 - dice_loss(p, b, 0.0))) < 1e-12);
    }
}

TEST_CASE("adding a correctly predicted pixel never lowers dsc") {
    Rng rng(8);
    for (int t = 0; t < 200; ++t) {
        auto pred = random_mask(rng, 10, 10);
        auto gt = random_mask(rng, 10, 10);
        std::vector<std::size_t> missed;
        for (std::size_t i = 0; i < gt.labels.size(); ++i) {
            if (gt.labels[i] && !pred.labels[i]) missed.push_back(i);
        }
        if (missed.empty()) continue;
        const double before = dsc(pred, gt);
        pred.labels[missed[rng.below(missed.size())]] = 1;
        CHECK(dsc(pred, gt) >= before);
    }
}

TEST_CASE("aggregate threshold arithmetic") {
    const auto one = aggregate({{"a", 88.0, 2.0, 80.0}});
    CHECK(one.iou_50 == 100.0);
    CHECK(one.iou_75 == 100.0);
    CHECK(one.iou_90 == 0.0);
    // 80 passes 50, 55, ..., 80: seven of ten thresholds.
    CHECK(one.map == doctest::Approx(70.0));

    const auto two = aggregate({{"a", 75.0, 1.0, 60.0}, {"b", 57.0, std::nullopt, 40.0}});
    CHECK(two.iou_50 == 50.0);
    CHECK(two.mean_dsc == 66.0);
    REQUIRE(two.mean_hd95.has_value());
    CHECK(*two.mean_hd95 == 1.0);
    CHECK(two.hd95_skipped == 1);

    const auto perfect = aggregate({{"a", 100.0, 0.0, 100.0}, {"b", 100.0, 0.0, 100.0}});
    CHECK(perfect.map == 100.0);
    CHECK_THROWS_AS(aggregate({}), DataError);
}

TEST_CASE("eval csv marks skipped hd95") {
    const auto rep = aggregate({{"a", 50.0, 3.0, 33.0}, {"b", 0.0, std::nullopt, 0.0}});
    const auto path = std::filesystem::temp_directory_path() / "morphoseg_eval_test.csv";
    write_eval_csv(rep, path);
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    CHECK(ss.str() == "id,dsc,hd95,iou\na,50,3,33\nb,0,SKIP,0\n");
    std::filesystem::remove(path);
    const auto j = to_json(rep);
    CHECK(j["hd95_skipped"] == 1);
    CHECK(j["images"] == 2);
}
