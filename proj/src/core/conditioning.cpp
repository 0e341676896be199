#include "endosynth/conditioning.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "endosynth/error.hpp"
#include "endosynth/util/rng.hpp"

namespace endosynth::conditioning {

namespace {

constexpr std::string_view kPrefix = "A ";
constexpr std::string_view kMiddle = " endoscopic image of a larynx with the presence of a ";

constexpr std::array<std::string_view, 2> kModalityPhrase = {"white-light", "narrow-band imaging"};

constexpr std::array<std::string_view, kNumCategories> kCategoryPhrase = {
    "cyst", "granuloma", "leukoplakia", "polyp", "papilloma", "Reinke's edema", "squamous cell carcinoma",
};

} // namespace

Caption build_caption(Modality modality, LesionCategory category) {
    std::string text;
    text += kPrefix;
    text += kModalityPhrase[static_cast<int>(modality)];
    text += kMiddle;
    text += kCategoryPhrase[category_index(category)];
    return {std::move(text), modality, category};
}

Caption parse_caption(std::string_view text) {
    for (auto m : kAllModalities) {
        for (auto c : kAllCategories) {
            auto cap = build_caption(m, c);
            if (cap.text == text) return cap;
        }
    }
    throw Error("caption is not in the template set: \"" + std::string(text) + "\"");
}

int caption_index(const Caption& c) { return static_cast<int>(c.modality) * kNumCategories + category_index(c.category); }

Caption caption_for(const dataset::AnnotatedImage& image) {
    if (image.annotations.empty()) throw Error("cannot caption image without lesions: " + image.image_id);
    const auto largest = std::max_element(image.annotations.begin(), image.annotations.end(),
                                          [](const Annotation& a, const Annotation& b) { return a.box.area() < b.box.area(); });
    return build_caption(image.modality, largest->category);
}

ControlMask rasterize_mask(std::span<const BoundingBox> boxes, int height, int width) {
    if (height < 8 || width < 8) throw Error("rasterize_mask: height and width must be >= 8");
    ControlMask mask{Raster8(height, width, 0)};
    for (const auto& b : boxes) {
        const long c0 = std::clamp(std::lround(b.x0() * width), 0L, static_cast<long>(width));
        const long c1 = std::clamp(std::lround(b.x1() * width), 0L, static_cast<long>(width));
        const long r0 = std::clamp(std::lround(b.y0() * height), 0L, static_cast<long>(height));
        const long r1 = std::clamp(std::lround(b.y1() * height), 0L, static_cast<long>(height));
        if (c1 <= c0 || r1 <= r0) throw Error("rasterize_mask: box rounds to zero area");
        for (long r = r0; r < r1; ++r) {
            for (long c = c0; c < c1; ++c) {
                for (int ch = 0; ch < 3; ++ch) mask.pixels.at(static_cast<int>(r), static_cast<int>(c), ch) = 255;
            }
        }
    }
    return mask;
}

std::size_t count_nonzero(const ControlMask& m) {
    std::size_t n = 0;
    for (int r = 0; r < m.pixels.height; ++r) {
        for (int c = 0; c < m.pixels.width; ++c) n += m.pixels.at(r, c, 0) != 0;
    }
    return n;
}

MaskAugmentation sample_augmentation(std::uint64_t seed, const AugmentationRanges& ranges) {
    if (ranges.max_rotation_deg < 0 || ranges.scale_min <= 0 || ranges.scale_max < ranges.scale_min) {
        throw Error("invalid augmentation ranges");
    }
    util::Rng rng(util::derive_seed(seed, "mask-augment"));
    MaskAugmentation aug;
    aug.rotation_deg = util::uniform(rng, -ranges.max_rotation_deg, ranges.max_rotation_deg);
    aug.scale = util::uniform(rng, ranges.scale_min, ranges.scale_max);
    aug.seed = seed;
    return aug;
}

AugmentResult augment_boxes(std::span<const BoundingBox> boxes, const MaskAugmentation& aug, int height, int width) {
    if (aug.scale <= 0) throw Error("augment_boxes: scale must be positive");
    AugmentResult out;
    if (aug.rotation_deg == 0.0 && aug.scale == 1.0) {
        for (std::size_t i = 0; i < boxes.size(); ++i) {
            out.boxes.push_back(boxes[i]);
            out.kept.push_back(i);
        }
        if (out.boxes.empty() && !boxes.empty()) throw Error("augment_boxes: all boxes dropped");
        return out;
    }

    const double th = aug.rotation_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(th), sn = std::sin(th);
    // Work in pixel units so rotation is rigid on non-square images.
    const double W = width, H = height;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        const auto& b = boxes[i];
        const double px = b.cx * W - W / 2, py = b.cy * H - H / 2;
        const double rx = cs * px - sn * py + W / 2;
        const double ry = sn * px + cs * py + H / 2;
        const double hw = b.w * W * aug.scale / 2, hh = b.h * H * aug.scale / 2;
        // Half-extents of the rotated rectangle's axis-aligned enclosure.
        const double ex = std::abs(cs) * hw + std::abs(sn) * hh;
        const double ey = std::abs(sn) * hw + std::abs(cs) * hh;
        auto nb = BoundingBox::from_corners((rx - ex) / W, (ry - ey) / H, (rx + ex) / W, (ry + ey) / H).clamped();
        if (nb.w < 2.0 / W || nb.h < 2.0 / H) {
            ++out.dropped;
            continue;
        }
        out.boxes.push_back(nb);
        out.kept.push_back(i);
    }
    if (out.boxes.empty() && !boxes.empty()) throw Error("augment_boxes: all boxes dropped");
    return out;
}

} // namespace endosynth::conditioning
