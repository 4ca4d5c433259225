#include <cmath>

#include "doctest.h"
#include "mddet/head.hpp"
#include "mddet/rng.hpp"

using namespace mddet;

namespace {

std::vector<std::pair<double, double>> three_anchors() {
    return {{1.0, 1.0}, {0.5, 1.5}, {2.0, 2.0}};
}

Tensor4 random_raw(int n, int channels, int hg, int wg, std::uint64_t seed) {
    Rng rng(seed);
    Tensor4 t(n, channels, hg, wg);
    for (double& x : t.v) x = rng.uniform(-2.0, 2.0);
    return t;
}

double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace

TEST_CASE("decode channel count requirement") {
    auto anchors5 = std::vector<std::pair<double, double>>(5, {1.0, 1.0});
    CHECK_NOTHROW(decode(Tensor4(1, 125, 2, 2), 0, anchors5, 20));
    CHECK_THROWS_WITH_AS(decode(Tensor4(1, 124, 2, 2), 0, anchors5, 20),
                         doctest::Contains("125"), std::invalid_argument);
}

TEST_CASE("decode of all-zero logits") {
    auto anchors = three_anchors();
    Tensor4 raw(1, 3 * (4 + 5), 4, 4, 0.0);
    DecodedGrid g = decode(raw, 0, anchors, 4);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
            for (int a = 0; a < 3; ++a) {
                const int i = g.idx(y, x, a);
                CHECK(g.obj[i] == doctest::Approx(0.5));
                CHECK(g.box[i].cx == doctest::Approx((x + 0.5) / 4.0));
                CHECK(g.box[i].cy == doctest::Approx((y + 0.5) / 4.0));
                CHECK(g.box[i].w == doctest::Approx(anchors[a].first / 4.0));
                CHECK(g.box[i].h == doctest::Approx(anchors[a].second / 4.0));
                for (int k = 0; k < 4; ++k)
                    CHECK(g.cls[static_cast<std::size_t>(i) * 4 + k] == doctest::Approx(0.25));
            }
}

TEST_CASE("decode saturation: tx = 20 pushes cx to the next cell boundary") {
    auto anchors = three_anchors();
    Tensor4 raw(1, 3 * 9, 4, 4, 0.0);
    raw.at(0, 0, 1, 2) = 20.0;  // anchor 0, cell (y=1, x=2)
    DecodedGrid g = decode(raw, 0, anchors, 4);
    CHECK(g.box[g.idx(1, 2, 0)].cx == doctest::Approx((2.0 + 1.0) / 4.0).epsilon(1e-8));
}

TEST_CASE("decode-encode consistency within 1e-9") {
    auto anchors = three_anchors();
    Rng rng(31);
    Tensor4 raw(1, 3 * 9, 4, 4, 0.0);
    for (int trial = 0; trial < 50; ++trial) {
        const int x = rng.uniform_int(0, 3), y = rng.uniform_int(0, 3);
        const int a = rng.uniform_int(0, 2);
        BBox want;
        want.cx = (x + rng.uniform(0.05, 0.95)) / 4.0;
        want.cy = (y + rng.uniform(0.05, 0.95)) / 4.0;
        want.w = rng.uniform(0.05, 0.9);
        want.h = rng.uniform(0.05, 0.9);
        const int base = a * 9;
        raw.at(0, base + 0, y, x) = logit(want.cx * 4.0 - x);
        raw.at(0, base + 1, y, x) = logit(want.cy * 4.0 - y);
        raw.at(0, base + 2, y, x) = std::log(want.w * 4.0 / anchors[a].first);
        raw.at(0, base + 3, y, x) = std::log(want.h * 4.0 / anchors[a].second);
        DecodedGrid g = decode(raw, 0, anchors, 4);
        const BBox& got = g.box[g.idx(y, x, a)];
        CHECK(std::abs(got.cx - want.cx) <= 1e-9);
        CHECK(std::abs(got.cy - want.cy) <= 1e-9);
        CHECK(std::abs(got.w - want.w) <= 1e-9);
        CHECK(std::abs(got.h - want.h) <= 1e-9);
    }
}

TEST_CASE("decoded class distributions sum to one") {
    auto anchors = three_anchors();
    Tensor4 raw = random_raw(2, 3 * 9, 4, 4, 32);
    for (int s = 0; s < 2; ++s) {
        DecodedGrid g = decode(raw, s, anchors, 4);
        for (int i = 0; i < g.candidates(); ++i) {
            double sum = 0;
            for (int k = 0; k < 4; ++k) sum += g.cls[static_cast<std::size_t>(i) * 4 + k];
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("iou") {
    BBox a{0.5, 0.5, 0.2, 0.2};
    CHECK(iou(a, a) == doctest::Approx(1.0));
    BBox b{0.9, 0.9, 0.1, 0.1};
    CHECK(iou(a, b) == doctest::Approx(0.0));
    // corner boxes (0,0,2,2) and (1,1,3,3) in center format
    BBox c{1.0, 1.0, 2.0, 2.0};
    BBox d{2.0, 2.0, 2.0, 2.0};
    CHECK(iou(c, d) == doctest::Approx(1.0 / 7.0));
    // zero-area union
    BBox z1{0.5, 0.5, 0.0, 0.0}, z2{0.5, 0.5, 0.0, 0.0};
    CHECK(iou(z1, z2) == doctest::Approx(0.0));
}

TEST_CASE("assign_targets") {
    auto anchors = three_anchors();
    Tensor4 raw(1, 3 * 9, 4, 4, 0.0);
    DecodedGrid decoded = decode(raw, 0, anchors, 4);

    SUBCASE("no ground truth: nothing responsible") {
        TargetGrid t = assign_targets({}, 4, 4, anchors, decoded);
        for (int i = 0; i < decoded.candidates(); ++i) {
            CHECK(t.responsible[i] == 0);
            CHECK(t.obj_gt[i] == 0.0);
        }
    }
    SUBCASE("prediction equal to GT gives objectness target 1") {
        // pick the decoded box of anchor 0 at cell (2,1) as the GT itself
        const BBox gt = decoded.box[decoded.idx(2, 1, 0)];
        TargetGrid t = assign_targets({{1, gt}}, 4, 4, anchors, decoded);
        const int i = decoded.idx(2, 1, 0);
        CHECK(t.responsible[i] == 1);
        CHECK(t.obj_gt[i] == doctest::Approx(1.0));
        CHECK(t.cls_gt[i] == 1);
    }
    SUBCASE("anchor with exactly matching shape wins") {
        BBox gt{0.4, 0.6, anchors[1].first / 4.0, anchors[1].second / 4.0};
        TargetGrid t = assign_targets({{0, gt}}, 4, 4, anchors, decoded);
        const int cell_x = static_cast<int>(gt.cx * 4), cell_y = static_cast<int>(gt.cy * 4);
        // enumeration oracle over the anchors
        int best = 0;
        double best_iou = -1;
        for (int a = 0; a < 3; ++a) {
            const double iw = std::min(gt.w, anchors[a].first / 4.0);
            const double ih = std::min(gt.h, anchors[a].second / 4.0);
            const double inter = iw * ih;
            const double u = gt.w * gt.h + anchors[a].first / 4.0 * anchors[a].second / 4.0 - inter;
            const double s = inter / u;
            if (s > best_iou) {
                best_iou = s;
                best = a;
            }
        }
        CHECK(best == 1);
        CHECK(t.responsible[decoded.idx(cell_y, cell_x, best)] == 1);
    }
    SUBCASE("second GT in the same cell takes the remaining best anchor") {
        BBox g1{0.3, 0.3, anchors[0].first / 4.0, anchors[0].second / 4.0};
        BBox g2{0.28, 0.3, anchors[0].first / 4.0, anchors[0].second / 4.0};  // same cell, same shape
        TargetGrid t = assign_targets({{0, g1}, {1, g2}}, 4, 4, anchors, decoded);
        CHECK(t.responsible[decoded.idx(1, 1, 0)] == 1);
        CHECK(t.cls_gt[decoded.idx(1, 1, 0)] == 0);
        int second = -1;
        for (int a = 1; a < 3; ++a)
            if (t.responsible[decoded.idx(1, 1, a)]) second = a;
        REQUIRE(second != -1);
        CHECK(t.cls_gt[decoded.idx(1, 1, second)] == 1);
        CHECK(t.dropped == 0);
    }
    SUBCASE("cells overflow drops the extra GT") {
        std::vector<std::pair<int, BBox>> gts;
        for (int i = 0; i < 4; ++i)
            gts.push_back({0, BBox{0.3, 0.3, 0.2, 0.2}});  // 4 GTs, 3 anchors
        TargetGrid t = assign_targets(gts, 4, 4, anchors, decoded);
        CHECK(t.dropped == 1);
        int responsible = 0;
        for (auto r : t.responsible) responsible += r;
        CHECK(responsible == 3);
    }
    SUBCASE("properties over random scenes") {
        Rng rng(33);
        for (int trial = 0; trial < 30; ++trial) {
            DecodedGrid d = decode(random_raw(1, 27, 4, 4, 100 + trial), 0, anchors, 4);
            std::vector<std::pair<int, BBox>> gts;
            const int n_gt = rng.uniform_int(0, 5);
            for (int i = 0; i < n_gt; ++i) {
                BBox b;
                b.w = rng.uniform(0.05, 0.5);
                b.h = rng.uniform(0.05, 0.5);
                b.cx = rng.uniform(b.w / 2, 1.0 - b.w / 2);
                b.cy = rng.uniform(b.h / 2, 1.0 - b.h / 2);
                gts.push_back({rng.uniform_int(0, 3), b});
            }
            TargetGrid t = assign_targets(gts, 4, 4, anchors, d);
            int responsible = 0;
            for (int i = 0; i < d.candidates(); ++i) {
                if (t.responsible[i]) ++responsible;
                CHECK(t.obj_gt[i] >= 0.0);
                CHECK(t.obj_gt[i] <= 1.0);
                if (!t.responsible[i]) CHECK(t.obj_gt[i] == 0.0);
            }
            CHECK(responsible + t.dropped == n_gt);
            CHECK(responsible <= n_gt);
        }
    }
}

TEST_CASE("flatten_detections") {
    auto anchors = three_anchors();
    DecodedGrid g = decode(random_raw(1, 27, 4, 4, 34), 0, anchors, 4);

    SUBCASE("threshold 0 keeps every candidate") {
        CHECK(flatten_detections(g, 0.0).size() == 4 * 4 * 3);
    }
    SUBCASE("threshold 1 with sub-unit objectness keeps nothing") {
        CHECK(flatten_detections(g, 1.0).empty());
    }
    SUBCASE("scores are objectness times max class prob") {
        auto dets = flatten_detections(g, 0.0);
        std::size_t di = 0;
        for (int i = 0; i < g.candidates(); ++i, ++di) {
            double best = 0;
            for (int k = 0; k < 4; ++k)
                best = std::max(best, g.cls[static_cast<std::size_t>(i) * 4 + k]);
            CHECK(dets[di].score == doctest::Approx(g.obj[i] * best).epsilon(1e-12));
        }
    }
}
