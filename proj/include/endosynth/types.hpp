#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace endosynth {

inline constexpr int kNumCategories = 7;

enum class LesionCategory : std::uint8_t {
    Cyst = 0,
    Granuloma = 1,
    Leukoplakia = 2,
    Polyp = 3,
    Papilloma = 4,
    ReinkeEdema = 5,
    SquamousCellCarcinoma = 6,
};

enum class Modality : std::uint8_t { WL = 0, NBI = 1 };

enum class Split : std::uint8_t { Train, Val, Test };

enum class Origin : std::uint8_t { Internal, External, Toy, Synthetic };

inline constexpr std::array<LesionCategory, kNumCategories> kAllCategories = {
    LesionCategory::Cyst,      LesionCategory::Granuloma,   LesionCategory::Leukoplakia,
    LesionCategory::Polyp,     LesionCategory::Papilloma,   LesionCategory::ReinkeEdema,
    LesionCategory::SquamousCellCarcinoma,
};

inline constexpr std::array<Modality, 2> kAllModalities = {Modality::WL, Modality::NBI};

std::string_view to_string(LesionCategory c);
std::string_view to_string(Modality m);
std::string_view to_string(Split s);
std::string_view to_string(Origin o);

int category_index(LesionCategory c);
/// Throws endosynth::Error when idx is outside 0..6.
LesionCategory category_from_index(int idx);
std::optional<LesionCategory> category_from_name(std::string_view name);
std::optional<Modality> modality_from_name(std::string_view name);
std::optional<Split> split_from_name(std::string_view name);
std::optional<Origin> origin_from_name(std::string_view name);

/// Normalized YOLO-style box: center and size in [0,1].
struct BoundingBox {
    double cx = 0.5;
    double cy = 0.5;
    double w = 0.0;
    double h = 0.0;

    double x0() const { return cx - w / 2; }
    double y0() const { return cy - h / 2; }
    double x1() const { return cx + w / 2; }
    double y1() const { return cy + h / 2; }
    double area() const { return w * h; }

    /// True if 0 <= cx,cy <= 1, 0 < w,h <= 1 and the extent lies inside the unit square.
    bool valid() const;

    /// Clip the extent to [0,1]^2; the result may have zero size.
    BoundingBox clamped() const;

    static BoundingBox from_corners(double x0, double y0, double x1, double y1);

    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct Annotation {
    LesionCategory category = LesionCategory::Cyst;
    BoundingBox box;

    friend bool operator==(const Annotation&, const Annotation&) = default;
};

} // namespace endosynth
