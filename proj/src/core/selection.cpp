#include "endosynth/selection.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "endosynth/error.hpp"
#include "endosynth/util/io.hpp"

namespace endosynth::selection {

double image_confidence(std::span<const double> confidences) {
    double best = 0.0;
    for (double c : confidences) best = std::max(best, c);
    return best;
}

double image_confidence(std::span<const detection::Detection> preds) {
    double best = 0.0;
    for (const auto& p : preds) best = std::max(best, p.confidence);
    return best;
}

double variance3(double c1, double c2, double c3) {
    const double mean = (c1 + c2 + c3) / 3.0;
    const double d1 = c1 - mean, d2 = c2 - mean, d3 = c3 - mean;
    return (d1 * d1 + d2 * d2 + d3 * d3) / 3.0;
}

std::vector<UncertaintyRecord> build_records(std::span<const std::string> image_ids,
                                             const std::array<std::vector<detection::Detection>, kEnsembleSize>& preds) {
    std::vector<std::map<std::string, double>> best(kEnsembleSize);
    for (int m = 0; m < kEnsembleSize; ++m) {
        for (const auto& p : preds[m]) {
            auto& slot = best[m][p.image_id];
            slot = std::max(slot, p.confidence);
        }
    }
    std::vector<UncertaintyRecord> out;
    out.reserve(image_ids.size());
    for (const auto& id : image_ids) {
        UncertaintyRecord r;
        r.image_id = id;
        for (int m = 0; m < kEnsembleSize; ++m) {
            auto it = best[m].find(id);
            r.confidence[m] = it == best[m].end() ? 0.0 : it->second;
        }
        r.variance = variance3(r.confidence[0], r.confidence[1], r.confidence[2]);
        out.push_back(std::move(r));
    }
    return out;
}

Selection select_top_uncertain(std::vector<UncertaintyRecord> records, double fraction) {
    if (records.empty()) throw Error("select_top_uncertain: no records");
    if (!(fraction > 0 && fraction <= 1)) throw Error("select_top_uncertain: fraction must be in (0,1]");
    std::sort(records.begin(), records.end(), [](const UncertaintyRecord& a, const UncertaintyRecord& b) {
        if (a.variance != b.variance) return a.variance > b.variance;
        return a.image_id < b.image_id;
    });
    Selection s;
    // The small epsilon keeps exact products such as 0.1 * 10 from rounding up.
    s.selected_count = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(records.size()) - 1e-9));
    s.selected_count = std::clamp<std::size_t>(s.selected_count, 1, records.size());
    s.ledger = std::move(records);
    return s;
}

std::string ledger_csv(const Selection& s) {
    std::string out = "image_id,c1,c2,c3,variance,selected\n";
    for (std::size_t i = 0; i < s.ledger.size(); ++i) {
        const auto& r = s.ledger[i];
        out += r.image_id;
        for (double c : r.confidence) out += "," + util::format_double(c);
        out += "," + util::format_double(r.variance);
        out += i < s.selected_count ? ",1\n" : ",0\n";
    }
    return out;
}

void write_ledger(const std::filesystem::path& path, const Selection& s) { util::write_text_atomic(path, ledger_csv(s)); }

} // namespace endosynth::selection
