#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "endosynth/detection/detector.hpp"

namespace endosynth::detection {

/// How many synthetic images a fraction adds: round(fraction x real count).
std::size_t synthetic_count(double fraction, std::size_t n_real);

struct MixSpec {
    double fraction = 0;
    std::string selection = "none";  // none | random | uncertainty
    std::uint64_t seed = 0;
    std::vector<std::string> synthetic_ids;

    nlohmann::json to_json() const;
};

/// Test sets a run is scored on.
struct EvalSets {
    const DetectionSet* val = nullptr;
    const DetectionSet* internal = nullptr;
    const DetectionSet* external = nullptr;
};

struct RunResult {
    MixSpec mix;
    std::size_t n_real = 0;
    EvalResult val, internal, external;
    double threshold = 0;
    TrainHistory history;

    nlohmann::json to_json() const;
};

/// Scores a trained model on the evaluation sets at its operating threshold.
RunResult score_run(DetectorModel& model, const MixSpec& mix, std::size_t n_real, const EvalSets& sets);

/// Trains on real + synthetic.subset(mix) and scores the result.
RunResult run_mix(const DetectorConfig& cfg, const DetectionSet& real, const DetectionSet& synthetic_subset,
                  const MixSpec& mix, const EvalSets& sets, DetectorModel* trained = nullptr);

/// Seeded sample of k distinct pool indices, in ascending order.
std::vector<std::size_t> random_subset(std::size_t pool, std::size_t k, std::uint64_t seed);

/// k pairwise-disjoint subsets of `count` indices each. Throws when the pool
/// holds fewer than k x count images.
std::vector<std::vector<std::size_t>> disjoint_subsets(std::size_t pool, std::size_t k, std::size_t count,
                                                       std::uint64_t seed);

struct MeanStd {
    double mean = 0;
    double std = 0;  // population
};
MeanStd mean_std(std::span<const double> values);

/// "+9.0%": (ap_mix - ap_real) in AP points, one decimal.
std::string format_ap_delta(double ap_mix, double ap_real);

/// One Table-1 row: precision, recall and AP50 on the internal and external tests.
struct TableRow {
    std::string label;
    std::array<double, 6> values{};
};
TableRow table_row(const std::string& label, const RunResult& r);

/// Rows real, fold1..k, mean±std and (when given) ue, with columns
/// internal/external x precision/recall/ap50.
std::string table1_csv(const TableRow& real, std::span<const TableRow> folds, const TableRow* ue);

/// Fig. 3a data: seed,fraction,n_synthetic,{internal,external}_{precision,recall,ap50}
std::string fig3a_csv(std::span<const std::pair<std::uint64_t, RunResult>> runs);

} // namespace endosynth::detection
