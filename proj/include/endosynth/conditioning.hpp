#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "endosynth/dataset.hpp"
#include "endosynth/image.hpp"
#include "endosynth/types.hpp"

namespace endosynth::conditioning {

struct Caption {
    std::string text;
    Modality modality = Modality::WL;
    LesionCategory category = LesionCategory::Cyst;

    friend bool operator==(const Caption&, const Caption&) = default;
};

/// "A {modality phrase} endoscopic image of a larynx with the presence of a {category phrase}"
Caption build_caption(Modality modality, LesionCategory category);

/// Inverse of build_caption; throws endosynth::Error for text outside the template set.
Caption parse_caption(std::string_view text);

/// Index of a caption in the closed 14-element set: modality * 7 + category.
int caption_index(const Caption& c);

/// Caption for an annotated image: category of its largest-area lesion.
/// Throws when the image has no annotations.
Caption caption_for(const dataset::AnnotatedImage& image);

/// 3-channel binary mask; all channels identical, values in {0, 255}.
struct ControlMask {
    Raster8 pixels;
    friend bool operator==(const ControlMask&, const ControlMask&) = default;
};

/// Pixel span per axis is [round((c - w/2) * W), round((c + w/2) * W)).
/// Throws when height or width < 8 or when a box rounds to zero area.
ControlMask rasterize_mask(std::span<const BoundingBox> boxes, int height, int width);

std::size_t count_nonzero(const ControlMask& m);

struct AugmentationRanges {
    double max_rotation_deg = 15.0;
    double scale_min = 0.8;
    double scale_max = 1.2;
};

struct MaskAugmentation {
    double rotation_deg = 0.0;
    double scale = 1.0;
    std::uint64_t seed = 0;
};

/// Draws rotation and scale uniformly inside the ranges; deterministic per seed.
MaskAugmentation sample_augmentation(std::uint64_t seed, const AugmentationRanges& ranges = {});

struct AugmentResult {
    std::vector<BoundingBox> boxes;
    std::vector<std::size_t> kept;  // input index of each output box
    std::size_t dropped = 0;
};

/// Rotates each box center about the image center, scales its size, takes the
/// axis-aligned enclosure of the rotated rectangle and clamps it to the unit
/// square. Boxes thinner than 2 pixels after clamping are dropped; throws if
/// every box is dropped.
AugmentResult augment_boxes(std::span<const BoundingBox> boxes, const MaskAugmentation& aug, int height, int width);

} // namespace endosynth::conditioning
