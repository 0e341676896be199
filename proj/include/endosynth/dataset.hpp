#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "endosynth/image.hpp"
#include "endosynth/types.hpp"

namespace endosynth::dataset {

struct AnnotatedImage {
    std::string image_id;
    std::string image_path;  // relative to the manifest root
    std::string label_path;  // relative to the manifest root
    std::vector<Annotation> annotations;
    Modality modality = Modality::WL;
    std::optional<Split> split;
    Origin origin = Origin::Toy;
    std::string caption;    // filled by conditioning
    std::string mask_path;  // filled by conditioning

    friend bool operator==(const AnnotatedImage&, const AnnotatedImage&) = default;
};

struct DatasetManifest {
    std::vector<AnnotatedImage> entries;
    Origin origin = Origin::Toy;
    std::uint64_t seed = 0;
    /// Directory the relative paths resolve against; not serialized.
    std::filesystem::path root;

    /// Throws on duplicate image ids or invalid boxes.
    void validate() const;
    std::vector<const AnnotatedImage*> in_split(Split s) const;
    std::filesystem::path resolve(const std::string& rel) const { return root / rel; }
};

// ---------------------------------------------------------------------------
// Label files: one object per line, "idx cx cy w h".
// ---------------------------------------------------------------------------

/// Throws ParseError (malformed line), CategoryError (idx outside 0..6) or
/// RangeError (coordinate outside [0,1] or non-positive size). Errors carry
/// the 1-based line number.
std::vector<Annotation> parse_label_file(std::string_view text);
std::string serialize_labels(std::span<const Annotation> annotations);

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitCounts {
    std::size_t train = 0, val = 0, test = 0;
    friend bool operator==(const SplitCounts&, const SplitCounts&) = default;
};

/// Largest-remainder apportionment of n items over the three ratios.
SplitCounts split_counts(std::size_t n, const std::array<double, 3>& ratios);

/// Seeded shuffle then assignment by split_counts. Requires >= 3 images and
/// ratios summing to 1.
DatasetManifest split_dataset(DatasetManifest manifest, const std::array<double, 3>& ratios, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Manifest I/O (JSON Lines)
// ---------------------------------------------------------------------------

nlohmann::json to_json(const AnnotatedImage& e, std::uint64_t seed);
AnnotatedImage entry_from_json(const nlohmann::json& j);

/// Writes manifest.jsonl records; labels are loaded from label_path on read.
void write_manifest(const std::filesystem::path& path, const DatasetManifest& m);
DatasetManifest read_manifest(const std::filesystem::path& path, bool load_labels = true);

Image load_image(const DatasetManifest& m, const AnnotatedImage& e);

// ---------------------------------------------------------------------------
// Procedural toy data
// ---------------------------------------------------------------------------

/// Background texture family. The external domain uses a different base tone,
/// finer texture and its own texture seed.
enum class ToyDomain : std::uint8_t { Internal, External };

struct ToyOptions {
    ToyDomain domain = ToyDomain::Internal;
    double nbi_fraction = 0.3;
    double two_lesion_fraction = 0.3;
    double empty_fraction = 0.0;
    bool force_empty = false;
    std::string id_prefix;  // defaults to "toy" / "ext"
};

/// Ellipse parameters in pixel units (center, semi-axes, rotation in radians).
struct ToyLesion {
    LesionCategory category = LesionCategory::Cyst;
    double cx = 0, cy = 0, a = 0, b = 0, theta = 0;
    bool contains(double x, double y) const;
};

struct ToyDataset {
    DatasetManifest manifest;
    std::vector<Image> images;
    std::vector<std::vector<ToyLesion>> lesions;
};

/// Throws when n < 1 or image_size < 32. Deterministic in (n, seed, size, options).
ToyDataset make_toy_dataset(int n, std::uint64_t seed, int image_size, const ToyOptions& options = {});

/// Writes images/<id>.png, labels/<id>.txt and manifest.jsonl under dir.
void write_dataset(const ToyDataset& ds, const std::filesystem::path& dir);

/// Colour-recipe classifier shared with the generator: true when the RGB value
/// (in [-1,1]) is nearer to some lesion recipe colour than to the background
/// tone line for this modality and domain.
bool is_lesion_colored(const float* rgb, Modality modality, ToyDomain domain = ToyDomain::Internal);

/// Boolean map (row-major) of is_lesion_colored over an image.
std::vector<std::uint8_t> lesion_pixel_map(const Image& img, Modality modality, ToyDomain domain = ToyDomain::Internal);

} // namespace endosynth::dataset
