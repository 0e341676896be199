#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "endosynth/types.hpp"

namespace endosynth::detection {

struct Detection {
    std::string image_id;
    LesionCategory category = LesionCategory::Cyst;
    BoundingBox box;
    double confidence = 0;

    friend bool operator==(const Detection&, const Detection&) = default;
};

/// Ground-truth annotations keyed by image id.
using GroundTruth = std::map<std::string, std::vector<Annotation>>;

double iou(const BoundingBox& a, const BoundingBox& b);

/// Cumulative counts after admitting every prediction with confidence >= threshold.
struct PrPoint {
    double threshold = 0;
    std::size_t tp = 0;
    std::size_t fp = 0;
};

struct CategoryEval {
    std::size_t n_gt = 0;
    std::size_t n_pred = 0;
    double precision = 0;
    double recall = 0;
    double ap50 = 0;
};

struct EvalResult {
    double precision = 0;
    double recall = 0;
    double ap50 = 0;
    /// False when there is no ground truth at all; recall is then reported as 0.
    bool recall_defined = true;
    double conf_threshold = 0;
    std::size_t n_gt = 0;
    std::size_t n_pred = 0;
    std::array<CategoryEval, kNumCategories> per_category{};
};

/// Order in which predictions are matched: descending confidence, ties by
/// image id, then by the prediction's position among its image's predictions.
std::vector<std::size_t> matching_order(std::span<const Detection> preds);

/// Greedy matching in matching_order; returns, per prediction (input order),
/// whether it was a true positive. A match needs equal category, IoU >= thresh
/// and a ground truth not claimed by an earlier prediction.
std::vector<bool> match(std::span<const Detection> preds, const GroundTruth& gts, double iou_thresh = 0.5);

/// One point per distinct confidence level, in descending confidence.
std::vector<PrPoint> pr_curve(std::span<const Detection> preds, const GroundTruth& gts, double iou_thresh = 0.5);

/// All-point interpolated area under the PR curve.
double average_precision(std::span<const PrPoint> curve, std::size_t n_gt);

/// AP over every prediction; precision/recall at predictions with confidence >= conf_threshold.
EvalResult evaluate(std::span<const Detection> preds, const GroundTruth& gts, double iou_thresh = 0.5,
                    double conf_threshold = 0.0);

/// Confidence threshold maximizing F1; 0 when there are no predictions.
double best_f1_threshold(std::span<const Detection> preds, const GroundTruth& gts, double iou_thresh = 0.5);

std::size_t count_gt(const GroundTruth& gts);

nlohmann::json to_json(const Detection& d);
Detection detection_from_json(const nlohmann::json& j);
void write_predictions(const std::filesystem::path& path, std::span<const Detection> preds);
std::vector<Detection> read_predictions(const std::filesystem::path& path);

nlohmann::json to_json(const EvalResult& r);

} // namespace endosynth::detection
