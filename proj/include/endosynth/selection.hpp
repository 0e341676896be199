#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "endosynth/detection/evaluation.hpp"

namespace endosynth::selection {

inline constexpr int kEnsembleSize = 3;

struct UncertaintyRecord {
    std::string image_id;
    std::array<double, kEnsembleSize> confidence{};
    double variance = 0;
};

/// Highest confidence among one model's predictions for one image; 0 when there are none.
double image_confidence(std::span<const double> confidences);
double image_confidence(std::span<const detection::Detection> preds);

/// Population variance (divide by 3).
double variance3(double c1, double c2, double c3);

/// Builds one record per image id from three per-model prediction lists.
/// Images missing from a model's predictions get confidence 0 for that model.
std::vector<UncertaintyRecord> build_records(std::span<const std::string> image_ids,
                                             const std::array<std::vector<detection::Detection>, kEnsembleSize>& preds);

struct Selection {
    std::vector<UncertaintyRecord> ledger;  // every record, descending variance
    std::size_t selected_count = 0;         // the first selected_count ledger entries

    std::span<const UncertaintyRecord> selected() const { return {ledger.data(), selected_count}; }
};

/// ceil(fraction * N) records with the highest variance; ties by ascending image id.
Selection select_top_uncertain(std::vector<UncertaintyRecord> records, double fraction = 0.10);

/// CSV: image_id,c1,c2,c3,variance,selected
std::string ledger_csv(const Selection& s);
void write_ledger(const std::filesystem::path& path, const Selection& s);

} // namespace endosynth::selection
