#include "endosynth/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "endosynth/error.hpp"
#include "endosynth/util/io.hpp"
#include "endosynth/util/rng.hpp"

namespace endosynth::dataset {

namespace {

std::vector<std::string_view> tokenize(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        std::size_t j = i;
        while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
        if (j > i) out.push_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

template <class T>
bool parse_number(std::string_view tok, T& out) {
    const char* end = tok.data() + tok.size();
    auto [ptr, ec] = std::from_chars(tok.data(), end, out);
    return ec == std::errc{} && ptr == end;
}

} // namespace

void DatasetManifest::validate() const {
    std::set<std::string> seen;
    for (const auto& e : entries) {
        if (!seen.insert(e.image_id).second) throw Error("duplicate image_id in manifest: " + e.image_id);
        for (const auto& a : e.annotations) {
            if (!a.box.valid()) throw Error("invalid bounding box in " + e.image_id);
        }
    }
}

std::vector<const AnnotatedImage*> DatasetManifest::in_split(Split s) const {
    std::vector<const AnnotatedImage*> out;
    for (const auto& e : entries) {
        if (e.split == s) out.push_back(&e);
    }
    return out;
}

std::vector<Annotation> parse_label_file(std::string_view text) {
    std::vector<Annotation> out;
    std::size_t lineno = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        std::string_view line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++lineno;

        const auto tok = tokenize(line);
        if (tok.empty()) continue;
        if (tok.size() != 5) {
            throw ParseError(lineno, "expected 5 fields \"idx cx cy w h\", got " + std::to_string(tok.size()));
        }
        int idx = 0;
        if (!parse_number(tok[0], idx)) throw ParseError(lineno, "bad category index '" + std::string(tok[0]) + "'");
        if (idx < 0 || idx >= kNumCategories) {
            throw CategoryError(lineno, "category index " + std::to_string(idx) + " not in 0..6");
        }
        std::array<double, 4> v{};
        for (int k = 0; k < 4; ++k) {
            if (!parse_number(tok[k + 1], v[k]) || !std::isfinite(v[k])) {
                throw ParseError(lineno, "bad coordinate '" + std::string(tok[k + 1]) + "'");
            }
            if (v[k] < 0.0 || v[k] > 1.0) {
                throw RangeError(lineno, "coordinate " + std::string(tok[k + 1]) + " outside [0,1]");
            }
        }
        if (v[2] <= 0.0 || v[3] <= 0.0) throw RangeError(lineno, "box width and height must be positive");

        BoundingBox box{v[0], v[1], v[2], v[3]};
        if (!box.valid()) box = box.clamped();
        out.push_back({category_from_index(idx), box});
    }
    return out;
}

std::string serialize_labels(std::span<const Annotation> annotations) {
    std::string out;
    for (const auto& a : annotations) {
        out += std::to_string(category_index(a.category));
        for (double v : {a.box.cx, a.box.cy, a.box.w, a.box.h}) {
            out += ' ';
            out += util::format_double(v);
        }
        out += '\n';
    }
    return out;
}

SplitCounts split_counts(std::size_t n, const std::array<double, 3>& ratios) {
    const double sum = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(sum - 1.0) > 1e-6) throw Error("split ratios must sum to 1");
    for (double r : ratios) {
        if (r < 0) throw Error("split ratios must be non-negative");
    }
    std::array<std::size_t, 3> counts{};
    std::array<double, 3> frac{};
    std::size_t assigned = 0;
    for (int k = 0; k < 3; ++k) {
        const double exact = ratios[k] * static_cast<double>(n);
        counts[k] = static_cast<std::size_t>(std::floor(exact + 1e-9));
        frac[k] = exact - static_cast<double>(counts[k]);
        assigned += counts[k];
    }
    // Hand leftovers to the largest fractional parts; ties go to the earlier split.
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b] + 1e-12; });
    for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[order[k % 3]];
    return {counts[0], counts[1], counts[2]};
}

DatasetManifest split_dataset(DatasetManifest manifest, const std::array<double, 3>& ratios, std::uint64_t seed) {
    const std::size_t n = manifest.entries.size();
    if (n < 3) throw Error("split_dataset needs at least 3 images, got " + std::to_string(n));
    const auto counts = split_counts(n, ratios);

    // Shuffle a sorted id order so the result does not depend on input order.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return manifest.entries[a].image_id < manifest.entries[b].image_id; });
    util::Rng rng(util::derive_seed(seed, "split"));
    util::shuffle(order.begin(), order.end(), rng);

    for (std::size_t k = 0; k < n; ++k) {
        Split s = k < counts.train ? Split::Train : (k < counts.train + counts.val ? Split::Val : Split::Test);
        manifest.entries[order[k]].split = s;
    }
    manifest.seed = seed;
    return manifest;
}

nlohmann::json to_json(const AnnotatedImage& e, std::uint64_t seed) {
    nlohmann::json j{
        {"image_id", e.image_id},
        {"image_path", e.image_path},
        {"label_path", e.label_path},
        {"modality", to_string(e.modality)},
        {"split", e.split ? nlohmann::json(to_string(*e.split)) : nlohmann::json(nullptr)},
        {"origin", to_string(e.origin)},
        {"seed", seed},
    };
    if (!e.caption.empty()) j["caption"] = e.caption;
    if (!e.mask_path.empty()) j["mask_path"] = e.mask_path;
    return j;
}

AnnotatedImage entry_from_json(const nlohmann::json& j) {
    AnnotatedImage e;
    e.image_id = j.at("image_id").get<std::string>();
    e.image_path = j.at("image_path").get<std::string>();
    e.label_path = j.value("label_path", std::string{});
    const auto mod = modality_from_name(j.at("modality").get<std::string>());
    if (!mod) throw Error("unknown modality in manifest record " + e.image_id);
    e.modality = *mod;
    if (j.contains("split") && !j["split"].is_null()) {
        const auto s = split_from_name(j["split"].get<std::string>());
        if (!s) throw Error("unknown split in manifest record " + e.image_id);
        e.split = *s;
    }
    const auto o = origin_from_name(j.value("origin", std::string{"toy"}));
    if (!o) throw Error("unknown origin in manifest record " + e.image_id);
    e.origin = *o;
    e.caption = j.value("caption", std::string{});
    e.mask_path = j.value("mask_path", std::string{});
    return e;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
    std::vector<nlohmann::json> records;
    records.reserve(m.entries.size());
    for (const auto& e : m.entries) records.push_back(to_json(e, m.seed));
    util::write_jsonl(path, records);
}

DatasetManifest read_manifest(const std::filesystem::path& path, bool load_labels) {
    DatasetManifest m;
    m.root = path.parent_path();
    for (const auto& j : util::read_jsonl(path)) {
        auto e = entry_from_json(j);
        m.origin = e.origin;
        m.seed = j.value("seed", std::uint64_t{0});
        if (load_labels && !e.label_path.empty()) {
            try {
                e.annotations = parse_label_file(util::read_text(m.resolve(e.label_path)));
            } catch (const ParseError& err) {
                throw Error(e.label_path + ": " + err.what());
            }
        }
        m.entries.push_back(std::move(e));
    }
    m.validate();
    return m;
}

Image load_image(const DatasetManifest& m, const AnnotatedImage& e) { return read_png(m.resolve(e.image_path)); }

// ---------------------------------------------------------------------------
// Toy generator
// ---------------------------------------------------------------------------

namespace {

using Rgb = std::array<double, 3>;

struct DomainRecipe {
    Rgb background;
    double wavelength_min, wavelength_max;
    double amplitude;
    double vignette;
    std::uint64_t texture_salt;
};

constexpr DomainRecipe kInternal{{0.78, 0.42, 0.38}, 18.0, 36.0, 0.05, 0.30, 0x1a};
constexpr DomainRecipe kExternal{{0.70, 0.47, 0.46}, 7.0, 14.0, 0.07, 0.40, 0x2b};

const DomainRecipe& recipe(ToyDomain d) { return d == ToyDomain::Internal ? kInternal : kExternal; }

// White-light base colours per category, indexed by category.
constexpr std::array<Rgb, kNumCategories> kLesionColor = {{
    {0.95, 0.88, 0.45},  // cyst: yellow
    {0.55, 0.10, 0.30},  // granuloma: dark magenta
    {0.97, 0.97, 0.95},  // leukoplakia: white
    {0.98, 0.62, 0.72},  // polyp: light pink
    {0.80, 0.72, 0.95},  // papilloma: lavender
    {0.50, 0.75, 0.95},  // reinke_edema: light blue
    {0.30, 0.20, 0.08},  // squamous_cell_carcinoma: dark brown
}};

// Brightness range the background tone can take after texture and vignette.
constexpr double kToneMin = 0.55, kToneMax = 1.20;

Rgb tint(const Rgb& c, Modality m) {
    if (m == Modality::WL) return {c[0] * 1.04, c[1] * 0.97, c[2] * 0.90};
    // Narrow-band: red suppressed, green/blue emphasised.
    return {0.30 * c[0] + 0.15 * c[1] + 0.05 * c[2], 0.45 * c[0] + 0.45 * c[1] + 0.10 * c[2],
            0.35 * c[0] + 0.25 * c[1] + 0.40 * c[2]};
}

double dist2(const Rgb& a, const Rgb& b) {
    double s = 0;
    for (int k = 0; k < 3; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return s;
}

// Squared distance from p to the segment {s * base : s in [kToneMin, kToneMax]}.
double dist2_to_tone_line(const Rgb& p, const Rgb& base) {
    const double bb = dist2(base, {0, 0, 0});
    double s = (p[0] * base[0] + p[1] * base[1] + p[2] * base[2]) / bb;
    s = std::clamp(s, kToneMin, kToneMax);
    return dist2(p, {s * base[0], s * base[1], s * base[2]});
}

struct Wave {
    double kx, ky, phase;
};

std::vector<Wave> make_waves(util::Rng& rng, const DomainRecipe& r, int size) {
    std::vector<Wave> waves;
    for (int k = 0; k < 3; ++k) {
        const double lambda = util::uniform(rng, r.wavelength_min, r.wavelength_max) * size / 64.0;
        const double ang = util::uniform(rng, 0, std::numbers::pi);
        const double k_mag = 2 * std::numbers::pi / lambda;
        waves.push_back({k_mag * std::cos(ang), k_mag * std::sin(ang), util::uniform(rng, 0, 2 * std::numbers::pi)});
    }
    return waves;
}

void pixel_extent(const ToyLesion& l, double& ex, double& ey) {
    const double c = std::cos(l.theta), s = std::sin(l.theta);
    ex = std::sqrt(l.a * l.a * c * c + l.b * l.b * s * s);
    ey = std::sqrt(l.a * l.a * s * s + l.b * l.b * c * c);
}

} // namespace

bool ToyLesion::contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(theta), s = std::sin(theta);
    const double u = (dx * c + dy * s) / a;
    const double v = (-dx * s + dy * c) / b;
    return u * u + v * v <= 1.0;
}

bool is_lesion_colored(const float* rgb, Modality modality, ToyDomain domain) {
    const Rgb p{(rgb[0] + 1.0) / 2, (rgb[1] + 1.0) / 2, (rgb[2] + 1.0) / 2};
    const double bg = dist2_to_tone_line(p, tint(recipe(domain).background, modality));
    double best = 1e9;
    for (const auto& c : kLesionColor) best = std::min(best, dist2(p, tint(c, modality)));
    return best < bg;
}

std::vector<std::uint8_t> lesion_pixel_map(const Image& img, Modality modality, ToyDomain domain) {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(img.height) * img.width);
    for (int r = 0; r < img.height; ++r) {
        for (int c = 0; c < img.width; ++c) {
            out[static_cast<std::size_t>(r) * img.width + c] = is_lesion_colored(img.data.data() + (static_cast<std::size_t>(r) * img.width + c) * 3, modality, domain);
        }
    }
    return out;
}

ToyDataset make_toy_dataset(int n, std::uint64_t seed, int image_size, const ToyOptions& options) {
    if (n < 1) throw Error("make_toy_dataset: n must be >= 1");
    if (image_size < 32) throw Error("make_toy_dataset: image_size must be >= 32");

    const DomainRecipe& dom = recipe(options.domain);
    const bool external = options.domain == ToyDomain::External;
    const std::string prefix = options.id_prefix.empty() ? (external ? "ext" : "toy") : options.id_prefix;
    const int S = image_size;
    const double scale = S / 64.0;

    ToyDataset ds;
    ds.manifest.origin = external ? Origin::External : Origin::Internal;
    ds.manifest.seed = seed;

    for (int i = 0; i < n; ++i) {
        util::Rng rng(util::derive_seed(seed ^ dom.texture_salt, "toy-image", static_cast<std::uint64_t>(i)));
        char idbuf[32];
        std::snprintf(idbuf, sizeof idbuf, "%s_%05d", prefix.c_str(), i);

        AnnotatedImage meta;
        meta.image_id = idbuf;
        meta.image_path = "images/" + meta.image_id + ".png";
        meta.label_path = "labels/" + meta.image_id + ".txt";
        meta.origin = ds.manifest.origin;
        meta.modality = util::uniform(rng, 0, 1) < options.nbi_fraction ? Modality::NBI : Modality::WL;

        const auto category = category_from_index(static_cast<int>(util::uniform_index(rng, kNumCategories)));
        int n_lesions = util::uniform(rng, 0, 1) < options.two_lesion_fraction ? 2 : 1;
        if (options.force_empty || util::uniform(rng, 0, 1) < options.empty_fraction) n_lesions = 0;

        // Place non-overlapping ellipses, retrying a bounded number of times.
        std::vector<ToyLesion> lesions;
        std::vector<BoundingBox> placed;
        for (int attempt = 0; attempt < 40 && static_cast<int>(lesions.size()) < n_lesions; ++attempt) {
            ToyLesion l;
            l.category = category;
            l.a = util::uniform(rng, 4.5, 11.0) * scale;
            l.b = util::uniform(rng, 3.5, 8.0) * scale;
            l.theta = util::uniform(rng, 0, std::numbers::pi);
            double ex, ey;
            pixel_extent(l, ex, ey);
            l.cx = util::uniform(rng, ex + 1, S - ex - 1);
            l.cy = util::uniform(rng, ey + 1, S - ey - 1);
            const auto candidate = BoundingBox::from_corners(l.cx - ex - 2, l.cy - ey - 2, l.cx + ex + 2, l.cy + ey + 2);
            const bool overlaps = std::any_of(placed.begin(), placed.end(), [&](const BoundingBox& b) {
                return candidate.x0() < b.x1() && b.x0() < candidate.x1() && candidate.y0() < b.y1() &&
                       b.y0() < candidate.y1();
            });
            if (overlaps) continue;
            placed.push_back(candidate);
            lesions.push_back(l);
        }

        const auto waves = make_waves(rng, dom, S);
        const Rgb bg_tinted = tint(dom.background, meta.modality);
        std::vector<Rgb> lesion_tinted;
        for (const auto& c : kLesionColor) lesion_tinted.push_back(tint(c, meta.modality));

        Image img(S, S);
        std::vector<int> owner(static_cast<std::size_t>(S) * S, -1);
        for (int r = 0; r < S; ++r) {
            for (int c = 0; c < S; ++c) {
                const double x = c + 0.5, y = r + 0.5;
                double tex = 1.0;
                for (const auto& w : waves) tex += dom.amplitude * std::sin(w.kx * x + w.ky * y + w.phase);
                const double rr = std::hypot(x - S / 2.0, y - S / 2.0) / (S / 2.0);
                const double tone = std::clamp(tex * (1.0 - dom.vignette * std::min(rr * rr, 1.0)), kToneMin, kToneMax);
                Rgb px{bg_tinted[0] * tone, bg_tinted[1] * tone, bg_tinted[2] * tone};
                for (std::size_t k = 0; k < lesions.size(); ++k) {
                    const auto& l = lesions[k];
                    if (!l.contains(x, y)) continue;
                    owner[static_cast<std::size_t>(r) * S + c] = static_cast<int>(k);
                    const Rgb& lc = lesion_tinted[category_index(l.category)];
                    // Mild radial shading; papilloma gets a speckled surface.
                    const double d = std::hypot(x - l.cx, y - l.cy) / std::max(l.a, l.b);
                    double shade = 1.02 - 0.10 * d * d;
                    if (l.category == LesionCategory::Papilloma && ((r / 2 + c / 2) % 2 == 0)) shade *= 0.90;
                    px = {lc[0] * shade, lc[1] * shade, lc[2] * shade};
                }
                for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = static_cast<float>(std::clamp(px[ch], 0.0, 1.0) * 2 - 1);
            }
        }

        // Tight boxes from the rasterized pixels.
        for (std::size_t k = 0; k < lesions.size(); ++k) {
            int x0 = S, y0 = S, x1 = -1, y1 = -1;
            for (int r = 0; r < S; ++r) {
                for (int c = 0; c < S; ++c) {
                    if (owner[static_cast<std::size_t>(r) * S + c] != static_cast<int>(k)) continue;
                    x0 = std::min(x0, c), x1 = std::max(x1, c);
                    y0 = std::min(y0, r), y1 = std::max(y1, r);
                }
            }
            if (x1 < 0) continue;
            auto box = BoundingBox::from_corners(double(x0) / S, double(y0) / S, double(x1 + 1) / S, double(y1 + 1) / S);
            meta.annotations.push_back({lesions[k].category, box.valid() ? box : box.clamped()});
        }

        ds.manifest.entries.push_back(std::move(meta));
        ds.images.push_back(std::move(img));
        ds.lesions.push_back(std::move(lesions));
    }
    return ds;
}

void write_dataset(const ToyDataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "images");
    std::filesystem::create_directories(dir / "labels");
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        const auto& e = ds.manifest.entries[i];
        write_png(dir / e.image_path, ds.images[i]);
        util::write_text_atomic(dir / e.label_path, serialize_labels(e.annotations));
    }
    write_manifest(dir / "manifest.jsonl", ds.manifest);
}

} // namespace endosynth::dataset
