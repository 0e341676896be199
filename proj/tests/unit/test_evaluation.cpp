#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "endosynth/detection/evaluation.hpp"
#include "endosynth/util/rng.hpp"

#include "support/oracles.hpp"

using namespace endosynth;
using namespace endosynth::oracles;
using namespace endosynth::detection;


TEST_CASE("iou") {
    const auto a = corners(0.1, 0.1, 0.4, 0.5);
    CHECK(iou(a, a) == 1.0);
    CHECK(iou(corners(0, 0, 0.2, 0.2), corners(0.5, 0.5, 0.7, 0.7)) == 0.0);
    CHECK(iou(corners(0, 0, 0.2, 0.2), corners(0.1, 0.1, 0.3, 0.3)) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
    util::Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        const auto x = random_box(rng), y = random_box(rng);
        CHECK(iou(x, y) == iou(y, x));
        CHECK(iou(x, y) >= 0.0);
        CHECK(iou(x, y) <= 1.0);
    }
}

TEST_CASE("evaluate trivial cases") {
    GroundTruth gts{{"a", {{LesionCategory::Polyp, {0.5, 0.5, 0.2, 0.2}}}}};
    const std::vector<Detection> perfect{{"a", LesionCategory::Polyp, {0.5, 0.5, 0.2, 0.2}, 0.9}};
    const auto r = evaluate(perfect, gts);
    CHECK(r.precision == 1.0);
    CHECK(r.recall == 1.0);
    CHECK(r.ap50 == 1.0);

    const auto none = evaluate({}, gts);
    CHECK(none.recall == 0.0);
    CHECK(none.ap50 == 0.0);

    // Right box, wrong category.
    const std::vector<Detection> wrong{{"a", LesionCategory::Cyst, {0.5, 0.5, 0.2, 0.2}, 0.9}};
    CHECK(evaluate(wrong, gts).ap50 == 0.0);

    const auto no_gt = evaluate(perfect, GroundTruth{});
    CHECK(no_gt.precision == 0.0);
    CHECK(no_gt.recall == 0.0);
    CHECK_FALSE(no_gt.recall_defined);
}

TEST_CASE("five predictions against three ground truths") {
    GroundTruth gts{
        {"a", {{LesionCategory::Polyp, corners(0.1, 0.1, 0.3, 0.3)}, {LesionCategory::Cyst, corners(0.6, 0.6, 0.9, 0.9)}}},
        {"b", {{LesionCategory::Polyp, corners(0.4, 0.4, 0.6, 0.6)}}},
    };
    const std::vector<Detection> preds{
        {"a", LesionCategory::Polyp, corners(0.1, 0.1, 0.3, 0.3), 0.95},   // TP
        {"b", LesionCategory::Polyp, corners(0.0, 0.0, 0.1, 0.1), 0.90},   // FP (no overlap)
        {"a", LesionCategory::Polyp, corners(0.11, 0.1, 0.3, 0.3), 0.80},  // FP (gt already taken)
        {"a", LesionCategory::Cyst, corners(0.62, 0.6, 0.9, 0.92), 0.70},  // TP
        {"b", LesionCategory::Polyp, corners(0.42, 0.4, 0.62, 0.6), 0.30}, // TP
    };
    const auto oracle = brute_force(preds, gts);
    const auto curve = pr_curve(preds, gts);
    REQUIRE(curve.size() == oracle.tp.size());
    for (std::size_t i = 0; i < curve.size(); ++i) {
        CHECK(curve[i].tp == oracle.tp[i]);
        CHECK(curve[i].fp == oracle.fp[i]);
    }
    const auto r = evaluate(preds, gts);
    CHECK(r.ap50 == oracle.ap);
    // envelope: P = 1 up to recall 1/3, then 3/5 through recall 1
    CHECK(r.ap50 == doctest::Approx(1.0 / 3 + (2.0 / 3) * 0.6));
    CHECK(r.precision == doctest::Approx(0.6));
    CHECK(r.recall == 1.0);
}

TEST_CASE("AP equals the brute-force oracle on random small instances") {
    util::Rng rng(2024);
    for (int trial = 0; trial < 500; ++trial) {
        const auto [preds, gts] = random_instance(rng);
        const auto oracle = brute_force(preds, gts);
        const auto r = evaluate(preds, gts);
        CHECK(r.ap50 == oracle.ap);
        const auto curve = pr_curve(preds, gts);
        REQUIRE(curve.size() == oracle.tp.size());
        for (std::size_t i = 0; i < curve.size(); ++i) {
            CHECK(curve[i].tp == oracle.tp[i]);
            CHECK(curve[i].fp == oracle.fp[i]);
        }
    }
}

TEST_CASE("matching ignores input order across images") {
    util::Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        auto [preds, gts] = random_instance(rng);
        const auto base = evaluate(preds, gts);
        // Stable partition by image keeps each image's internal order.
        auto shuffled = preds;
        std::stable_sort(shuffled.begin(), shuffled.end(),
                         [](const Detection& a, const Detection& b) { return a.image_id > b.image_id; });
        const auto again = evaluate(shuffled, gts);
        CHECK(again.ap50 == base.ap50);
        CHECK(again.precision == base.precision);
        CHECK(again.recall == base.recall);
    }
}

TEST_CASE("adding an unmatched prediction never increases AP") {
    util::Rng rng(9);
    for (int trial = 0; trial < 300; ++trial) {
        auto [preds, gts] = random_instance(rng);
        if (preds.empty()) continue;
        const auto base = evaluate(preds, gts).ap50;
        for (const double conf : {0.0, 0.25, 0.5, 0.75, 1.0}) {
            auto more = preds;
            Detection stray = preds[util::uniform_index(rng, preds.size())];
            stray.box = corners(0.0, 0.0, 0.01, 0.01);
            stray.confidence = conf;
            bool overlaps = false;
            for (const auto& g : gts[stray.image_id]) overlaps |= iou(g.box, stray.box) > 0;
            if (overlaps) continue;
            more.push_back(stray);
            CHECK(evaluate(more, gts).ap50 <= base);
        }
    }
}

TEST_CASE("operating point and per-category breakdown") {
    GroundTruth gts{{"a", {{LesionCategory::Polyp, corners(0.1, 0.1, 0.3, 0.3)}}},
                    {"b", {{LesionCategory::Cyst, corners(0.4, 0.4, 0.6, 0.6)}}}};
    const std::vector<Detection> preds{
        {"a", LesionCategory::Polyp, corners(0.1, 0.1, 0.3, 0.3), 0.9},
        {"b", LesionCategory::Cyst, corners(0.4, 0.4, 0.6, 0.6), 0.6},
        {"a", LesionCategory::Cyst, corners(0.7, 0.7, 0.9, 0.9), 0.2},
    };
    CHECK(best_f1_threshold(preds, gts) == 0.6);
    const auto r = evaluate(preds, gts, 0.5, 0.6);
    CHECK(r.precision == 1.0);
    CHECK(r.recall == 1.0);
    CHECK(r.per_category[category_index(LesionCategory::Polyp)].ap50 == 1.0);
    CHECK(r.per_category[category_index(LesionCategory::Cyst)].n_pred == 2);
    CHECK(evaluate(preds, gts).precision == doctest::Approx(2.0 / 3));
}

TEST_CASE("predictions JSONL round-trip") {
    const std::vector<Detection> preds{{"a", LesionCategory::Papilloma, {0.3, 0.4, 0.1, 0.2}, 0.123456789},
                                       {"b", LesionCategory::Cyst, {0.5, 0.5, 0.5, 0.5}, 1.0}};
    const auto path = std::filesystem::temp_directory_path() / "endosynth_preds.jsonl";
    write_predictions(path, preds);
    CHECK(read_predictions(path) == preds);
}
