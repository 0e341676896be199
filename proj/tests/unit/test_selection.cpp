#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "endosynth/selection.hpp"
#include "endosynth/util/rng.hpp"

using namespace endosynth;
using namespace endosynth::selection;

namespace {

std::vector<UncertaintyRecord> random_ledger(util::Rng& rng, std::size_t n, bool coarse) {
    std::vector<UncertaintyRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
        UncertaintyRecord r;
        r.image_id = "syn_" + std::to_string(util::uniform_index(rng, 100000)) + "_" + std::to_string(i);
        for (auto& c : r.confidence) c = coarse ? util::uniform_index(rng, 3) / 2.0 : util::uniform(rng, 0, 1);
        r.variance = variance3(r.confidence[0], r.confidence[1], r.confidence[2]);
        out.push_back(r);
    }
    return out;
}

} // namespace

TEST_CASE("image_confidence") {
    CHECK(image_confidence(std::span<const double>{}) == 0.0);
    const std::vector<double> one{0.7}, three{0.3, 0.9, 0.5};
    CHECK(image_confidence(one) == 0.7);
    CHECK(image_confidence(three) == *std::max_element(three.begin(), three.end()));

    const std::vector<detection::Detection> dets{{"x", LesionCategory::Cyst, {0.5, 0.5, 0.1, 0.1}, 0.4},
                                                 {"x", LesionCategory::Cyst, {0.2, 0.5, 0.1, 0.1}, 0.8}};
    CHECK(image_confidence(dets) == 0.8);
}

TEST_CASE("variance3") {
    CHECK(variance3(0.9, 0.9, 0.9) == 0.0);
    CHECK(variance3(1.0, 0.0, 0.5) == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
    CHECK(std::abs(variance3(1.0, 0.0, 0.5) - 1.0 / 6.0) <= 1e-9);
    CHECK(variance3(0, 0, 1) == variance3(0, 1, 0));
    CHECK(variance3(0, 0, 1) == variance3(1, 0, 0));

    util::Rng rng(4);
    for (int i = 0; i < 200; ++i) {
        const double a = util::uniform(rng, 0, 0.5), b = util::uniform(rng, 0, 0.5), c = util::uniform(rng, 0, 0.5);
        const double k = util::uniform(rng, 0, 0.5), s = util::uniform(rng, 0.1, 2.0);
        CHECK(variance3(a + k, b + k, c + k) == doctest::Approx(variance3(a, b, c)).epsilon(1e-9));
        CHECK(variance3(s * a, s * b, s * c) == doctest::Approx(s * s * variance3(a, b, c)).epsilon(1e-9));
    }
}

TEST_CASE("select_top_uncertain sizes and ordering") {
    util::Rng rng(1);
    CHECK(select_top_uncertain(random_ledger(rng, 727, false), 0.10).selected_count == 73);

    std::vector<UncertaintyRecord> flat;
    for (int i = 9; i >= 0; --i) flat.push_back({"id" + std::to_string(i), {0.5, 0.5, 0.5}, 0.0});
    const auto s = select_top_uncertain(flat, 0.10);
    REQUIRE(s.selected_count == 1);
    CHECK(s.selected()[0].image_id == "id0");

    std::vector<UncertaintyRecord> graded;
    for (int i = 0; i < 10; ++i) graded.push_back({"g" + std::to_string(i), {}, i / 10.0});
    const auto g = select_top_uncertain(graded, 0.10);
    REQUIRE(g.selected_count == 1);
    CHECK(g.selected()[0].variance == 0.9);
    CHECK(g.ledger.size() == 10);

    CHECK_THROWS(select_top_uncertain({}, 0.1));
    CHECK_THROWS(select_top_uncertain(graded, 0.0));
    CHECK_THROWS(select_top_uncertain(graded, 1.5));
}

TEST_CASE("selection is deterministic and respects the variance threshold") {
    util::Rng rng(77);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + util::uniform_index(rng, 120);
        auto ledger = random_ledger(rng, n, trial % 2 == 0);
        const double frac = util::uniform(rng, 0.01, 1.0);
        const auto a = select_top_uncertain(ledger, frac);
        std::reverse(ledger.begin(), ledger.end());
        const auto b = select_top_uncertain(ledger, frac);
        REQUIRE(a.selected_count == b.selected_count);
        CHECK(a.selected_count == static_cast<std::size_t>(std::ceil(frac * n - 1e-9)));
        for (std::size_t i = 0; i < a.ledger.size(); ++i) CHECK(a.ledger[i].image_id == b.ledger[i].image_id);
        double min_sel = 1e9, max_unsel = -1;
        for (std::size_t i = 0; i < a.ledger.size(); ++i) {
            if (i < a.selected_count) min_sel = std::min(min_sel, a.ledger[i].variance);
            else max_unsel = std::max(max_unsel, a.ledger[i].variance);
        }
        CHECK(min_sel >= max_unsel);
    }
}

TEST_CASE("records from three prediction lists") {
    std::array<std::vector<detection::Detection>, 3> preds;
    preds[0] = {{"a", LesionCategory::Cyst, {0.5, 0.5, 0.1, 0.1}, 1.0}};
    preds[1] = {{"a", LesionCategory::Cyst, {0.5, 0.5, 0.1, 0.1}, 0.0}};
    preds[2] = {{"a", LesionCategory::Cyst, {0.5, 0.5, 0.1, 0.1}, 0.5}, {"b", LesionCategory::Cyst, {0.5, 0.5, 0.1, 0.1}, 0.3}};
    const std::vector<std::string> ids{"a", "b", "c"};
    const auto recs = build_records(ids, preds);
    REQUIRE(recs.size() == 3);
    CHECK(recs[0].variance == doctest::Approx(1.0 / 6.0));
    CHECK(recs[1].confidence == std::array<double, 3>{0.0, 0.0, 0.3});
    CHECK(recs[2].variance == 0.0);

    const auto sel = select_top_uncertain(recs, 0.34);
    const auto csv = ledger_csv(sel);
    CHECK(csv.rfind("image_id,c1,c2,c3,variance,selected\n", 0) == 0);
    CHECK(csv.find("a,1,0,0.5,") != std::string::npos);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
}
