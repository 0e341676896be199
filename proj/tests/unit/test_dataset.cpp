#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "endosynth/dataset.hpp"
#include "endosynth/error.hpp"
#include "endosynth/util/io.hpp"
#include "endosynth/util/rng.hpp"

using namespace endosynth;
using namespace endosynth::dataset;

namespace {

// Independent reader: stream extraction per line, no validation.
std::vector<Annotation> naive_reader(const std::string& text) {
    std::vector<Annotation> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        int idx;
        double cx, cy, w, h;
        if (ls >> idx >> cx >> cy >> w >> h) out.push_back({category_from_index(idx), {cx, cy, w, h}});
    }
    return out;
}

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("endosynth_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

DatasetManifest manifest_of(std::size_t n) {
    DatasetManifest m;
    for (std::size_t i = 0; i < n; ++i) {
        AnnotatedImage e;
        e.image_id = "img_" + std::to_string(i);
        e.image_path = "images/" + e.image_id + ".png";
        m.entries.push_back(e);
    }
    return m;
}

} // namespace

TEST_CASE("parse_label_file reads the documented line format") {
    const auto one = parse_label_file("3 0.5 0.5 0.2 0.1");
    REQUIRE(one.size() == 1);
    CHECK(one[0].category == LesionCategory::Polyp);
    CHECK(one[0].box == BoundingBox{0.5, 0.5, 0.2, 0.1});

    CHECK(parse_label_file("").empty());
    CHECK(parse_label_file("\n  \n").empty());

    const std::string two = "0 0.25 0.3 0.1 0.2\n6 0.75 0.6 0.3 0.25\n";
    const auto parsed = parse_label_file(two);
    CHECK(parsed == naive_reader(two));
    CHECK(parsed[0].category == LesionCategory::Cyst);
    CHECK(parsed[1].category == LesionCategory::SquamousCellCarcinoma);
}

TEST_CASE("parse_label_file errors carry the line number") {
    try {
        parse_label_file("1 0.5 0.5 0.1 0.1\n2 0.5 0.5 0.1\n");
        FAIL("expected ParseError");
    } catch (const CategoryError&) {
        FAIL("wrong error type");
    } catch (const RangeError&) {
        FAIL("wrong error type");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
    }
    try {
        parse_label_file("7 0.5 0.5 0.1 0.1");
        FAIL("expected CategoryError");
    } catch (const CategoryError& e) {
        CHECK(e.line() == 1);
    }
    try {
        parse_label_file("\n\n1 1.5 0.5 0.1 0.1");
        FAIL("expected RangeError");
    } catch (const RangeError& e) {
        CHECK(e.line() == 3);
    }
    CHECK_THROWS_AS(parse_label_file("1 0.5 0.5 0 0.1"), RangeError);
    CHECK_THROWS_AS(parse_label_file("x 0.5 0.5 0.1 0.1"), ParseError);
    CHECK_THROWS_AS(parse_label_file("1 0.5 abc 0.1 0.1"), ParseError);
    CHECK_THROWS_AS(parse_label_file("-1 0.5 0.5 0.1 0.1"), CategoryError);
}

TEST_CASE("boxes reaching past the border are clamped into the unit square") {
    const auto a = parse_label_file("2 0.95 0.5 0.2 0.1");
    REQUIRE(a.size() == 1);
    CHECK(a[0].box.valid());
    CHECK(a[0].box.x1() == doctest::Approx(1.0));
    CHECK(a[0].box.x0() == doctest::Approx(0.85));
}

TEST_CASE("serialize/parse round-trip on random annotation lists") {
    util::Rng rng(11);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<Annotation> anns;
        const auto n = util::uniform_index(rng, 6);
        for (std::uint64_t k = 0; k < n; ++k) {
            const double w = util::uniform(rng, 0.01, 0.6), h = util::uniform(rng, 0.01, 0.6);
            const BoundingBox b{util::uniform(rng, w / 2, 1 - w / 2), util::uniform(rng, h / 2, 1 - h / 2), w, h};
            REQUIRE(b.valid());
            anns.push_back({category_from_index(static_cast<int>(util::uniform_index(rng, 7))), b});
        }
        CHECK(parse_label_file(serialize_labels(anns)) == anns);
    }
}

TEST_CASE("split counts follow largest-remainder apportionment") {
    CHECK(split_counts(909, {0.8, 0.1, 0.1}) == SplitCounts{727, 91, 91});
    CHECK(split_counts(10, {0.8, 0.1, 0.1}) == SplitCounts{8, 1, 1});
    CHECK(split_counts(200, {0.8, 0.1, 0.1}) == SplitCounts{160, 20, 20});
    CHECK_THROWS(split_counts(10, {0.5, 0.1, 0.1}));
}

TEST_CASE("split_dataset is a deterministic exact partition") {
    const auto m = split_dataset(manifest_of(909), {0.8, 0.1, 0.1}, 42);
    CHECK(m.in_split(Split::Train).size() == 727);
    CHECK(m.in_split(Split::Val).size() == 91);
    CHECK(m.in_split(Split::Test).size() == 91);

    const auto again = split_dataset(manifest_of(909), {0.8, 0.1, 0.1}, 42);
    for (std::size_t i = 0; i < m.entries.size(); ++i) CHECK(m.entries[i].split == again.entries[i].split);

    const auto other = split_dataset(manifest_of(909), {0.8, 0.1, 0.1}, 43);
    bool differs = false;
    for (std::size_t i = 0; i < m.entries.size(); ++i) differs |= m.entries[i].split != other.entries[i].split;
    CHECK(differs);

    util::Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 3 + util::uniform_index(rng, 200);
        const auto s = split_dataset(manifest_of(n), {0.8, 0.1, 0.1}, trial);
        std::set<std::string> seen;
        for (const auto& e : s.entries) {
            REQUIRE(e.split.has_value());
            CHECK(seen.insert(e.image_id).second);
        }
        const auto c = split_counts(n, {0.8, 0.1, 0.1});
        CHECK(s.in_split(Split::Train).size() == c.train);
        CHECK(s.in_split(Split::Val).size() == c.val);
        CHECK(s.in_split(Split::Test).size() == c.test);
        CHECK(c.train + c.val + c.test == n);
    }

    CHECK(split_dataset(manifest_of(10), {0.8, 0.1, 0.1}, 1).in_split(Split::Train).size() == 8);
    CHECK_THROWS(split_dataset(manifest_of(2), {0.8, 0.1, 0.1}, 1));
}

TEST_CASE("toy boxes fit their ellipses within one pixel") {
    const int S = 64;
    const auto ds = make_toy_dataset(10, 7, S);
    REQUIRE(ds.images.size() == 10);
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        const auto& anns = ds.manifest.entries[i].annotations;
        REQUIRE(anns.size() == ds.lesions[i].size());
        for (std::size_t k = 0; k < anns.size(); ++k) {
            const auto& l = ds.lesions[i][k];
            const auto& b = anns[k].box;
            CHECK(b.valid());
            CHECK(anns[k].category == l.category);
            // Oracle: analytic extents of the rotated ellipse.
            const double c = std::cos(l.theta), s = std::sin(l.theta);
            const double ex = std::sqrt(l.a * l.a * c * c + l.b * l.b * s * s);
            const double ey = std::sqrt(l.a * l.a * s * s + l.b * l.b * c * c);
            CHECK(std::abs(b.x0() * S - (l.cx - ex)) <= 1.0);
            CHECK(std::abs(b.x1() * S - (l.cx + ex)) <= 1.0);
            CHECK(std::abs(b.y0() * S - (l.cy - ey)) <= 1.0);
            CHECK(std::abs(b.y1() * S - (l.cy + ey)) <= 1.0);
        }
        // Every lesion-coloured pixel lies inside some box.
        const auto map = lesion_pixel_map(ds.images[i], ds.manifest.entries[i].modality);
        for (int r = 0; r < S; ++r) {
            for (int cc = 0; cc < S; ++cc) {
                if (!map[r * S + cc]) continue;
                bool inside = false;
                for (const auto& a : anns) {
                    inside |= (cc + 0.5) / S >= a.box.x0() && (cc + 0.5) / S <= a.box.x1() && (r + 0.5) / S >= a.box.y0() &&
                              (r + 0.5) / S <= a.box.y1();
                }
                CHECK(inside);
            }
        }
    }
}

TEST_CASE("toy generator options and errors") {
    ToyOptions empty;
    empty.force_empty = true;
    const auto ds = make_toy_dataset(1, 3, 64, empty);
    CHECK(ds.manifest.entries.size() == 1);
    CHECK(ds.manifest.entries[0].annotations.empty());

    CHECK_THROWS(make_toy_dataset(0, 1, 64));
    CHECK_THROWS(make_toy_dataset(5, 1, 16));

    ToyOptions ext;
    ext.domain = ToyDomain::External;
    const auto e = make_toy_dataset(3, 3, 64, ext);
    CHECK(e.manifest.entries[0].image_id.rfind("ext_", 0) == 0);
    CHECK(e.manifest.origin == Origin::External);

    // One category per image.
    const auto many = make_toy_dataset(40, 9, 64);
    for (const auto& entry : many.manifest.entries) {
        for (const auto& a : entry.annotations) CHECK(a.category == entry.annotations.front().category);
    }
}

TEST_CASE("toy datasets are byte-identical for the same inputs") {
    const auto a = temp_dir("toy_a"), b = temp_dir("toy_b");
    write_dataset(make_toy_dataset(6, 21, 64), a);
    write_dataset(make_toy_dataset(6, 21, 64), b);
    CHECK(util::read_text(a / "manifest.jsonl") == util::read_text(b / "manifest.jsonl"));
    for (int i = 0; i < 6; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "toy_%05d", i);
        CHECK(util::read_text(a / "images" / (std::string(name) + ".png")) ==
              util::read_text(b / "images" / (std::string(name) + ".png")));
    }

    const auto back = read_manifest(a / "manifest.jsonl");
    const auto orig = make_toy_dataset(6, 21, 64);
    REQUIRE(back.entries.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(back.entries[i].annotations == orig.manifest.entries[i].annotations);
        CHECK(load_image(back, back.entries[i]) == from_raster8(to_raster8(orig.images[i])));
    }
}

TEST_CASE("manifest rejects duplicate ids") {
    auto m = manifest_of(3);
    m.entries[2].image_id = m.entries[0].image_id;
    CHECK_THROWS(m.validate());
}
