#include "endosynth/types.hpp"

#include <algorithm>

#include "endosynth/error.hpp"

namespace endosynth {

namespace {

constexpr std::array<std::string_view, kNumCategories> kCategoryNames = {
    "cyst", "granuloma", "leukoplakia", "polyp", "papilloma", "reinke_edema", "squamous_cell_carcinoma",
};

// Slack for boxes whose extent touches the border after float round-off.
constexpr double kEdgeEps = 1e-9;

} // namespace

std::string_view to_string(LesionCategory c) { return kCategoryNames[category_index(c)]; }

std::string_view to_string(Modality m) { return m == Modality::WL ? "WL" : "NBI"; }

std::string_view to_string(Split s) {
    switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    }
    return "train";
}

std::string_view to_string(Origin o) {
    switch (o) {
    case Origin::Internal: return "internal";
    case Origin::External: return "external";
    case Origin::Toy: return "toy";
    case Origin::Synthetic: return "synthetic";
    }
    return "toy";
}

int category_index(LesionCategory c) { return static_cast<int>(c); }

LesionCategory category_from_index(int idx) {
    if (idx < 0 || idx >= kNumCategories) {
        throw Error("lesion category index out of range: " + std::to_string(idx));
    }
    return static_cast<LesionCategory>(idx);
}

std::optional<LesionCategory> category_from_name(std::string_view name) {
    auto it = std::find(kCategoryNames.begin(), kCategoryNames.end(), name);
    if (it == kCategoryNames.end()) return std::nullopt;
    return static_cast<LesionCategory>(it - kCategoryNames.begin());
}

std::optional<Modality> modality_from_name(std::string_view name) {
    if (name == "WL") return Modality::WL;
    if (name == "NBI") return Modality::NBI;
    return std::nullopt;
}

std::optional<Split> split_from_name(std::string_view name) {
    if (name == "train") return Split::Train;
    if (name == "val") return Split::Val;
    if (name == "test") return Split::Test;
    return std::nullopt;
}

std::optional<Origin> origin_from_name(std::string_view name) {
    if (name == "internal") return Origin::Internal;
    if (name == "external") return Origin::External;
    if (name == "toy") return Origin::Toy;
    if (name == "synthetic") return Origin::Synthetic;
    return std::nullopt;
}

bool BoundingBox::valid() const {
    if (!(cx >= 0 && cx <= 1 && cy >= 0 && cy <= 1)) return false;
    if (!(w > 0 && w <= 1 && h > 0 && h <= 1)) return false;
    return x0() >= -kEdgeEps && y0() >= -kEdgeEps && x1() <= 1 + kEdgeEps && y1() <= 1 + kEdgeEps;
}

BoundingBox BoundingBox::clamped() const {
    return from_corners(std::clamp(x0(), 0.0, 1.0), std::clamp(y0(), 0.0, 1.0), std::clamp(x1(), 0.0, 1.0),
                        std::clamp(y1(), 0.0, 1.0));
}

BoundingBox BoundingBox::from_corners(double x0, double y0, double x1, double y1) {
    return BoundingBox{(x0 + x1) / 2, (y0 + y1) / 2, std::max(0.0, x1 - x0), std::max(0.0, y1 - y0)};
}

} // namespace endosynth
