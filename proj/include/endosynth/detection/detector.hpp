#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "endosynth/dataset.hpp"
#include "endosynth/detection/evaluation.hpp"

namespace endosynth::detection {

struct DetectorConfig {
    int channels = 32;
    int epochs = 100;
    int batch_size = 32;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    int patience = 50;  // epochs without validation AP improvement
    int eval_every = 1;
    std::uint64_t seed = 0;
    bool hflip = true;
    double jitter = 0.1;  // brightness/contrast amplitude
    int max_detections = 20;
    double min_score = 0.01;

    void validate() const;
    nlohmann::json to_json() const;
    static DetectorConfig from_json(const nlohmann::json& j);
};

/// Images (Nx3xHxW in [-1,1]) with their boxes.
struct DetectionSet {
    torch::Tensor images;
    std::vector<std::string> ids;
    std::vector<std::vector<Annotation>> annotations;

    std::size_t size() const { return ids.size(); }
    GroundTruth ground_truth() const;
    DetectionSet subset(std::span<const std::size_t> indices) const;
    static DetectionSet concat(const DetectionSet& a, const DetectionSet& b);
};

/// Loads the images of one split (or every entry) of a manifest.
DetectionSet load_detection_set(const dataset::DatasetManifest& m, std::optional<Split> split = std::nullopt);
DetectionSet make_detection_set(std::span<const Image> images, std::span<const dataset::AnnotatedImage> entries);

/// Anchor-free single-scale detector: stride-4 class heatmaps plus box size and
/// sub-cell offset regressions.
class CenterNetImpl : public torch::nn::Module {
public:
    explicit CenterNetImpl(int channels = 32);

    struct Output {
        torch::Tensor heatmap;  // N x 7 x h x w logits
        torch::Tensor size;     // N x 2 x h x w, box size in output cells
        torch::Tensor offset;   // N x 2 x h x w
    };
    Output forward(const torch::Tensor& x);
    torch::Tensor backbone(const torch::Tensor& x);
    int feature_dim() const { return 2 * channels_; }

private:
    int channels_;
    torch::nn::Sequential backbone_{nullptr};
    torch::nn::Sequential head_{nullptr};
};
TORCH_MODULE(CenterNet);

struct TrainHistory {
    std::vector<std::pair<int, double>> val_ap;  // (epoch, AP50)
    int best_epoch = -1;
    double best_val_ap = 0;
    int epochs_run = 0;
    bool stopped_early = false;

    nlohmann::json to_json() const;
};

struct DetectorModel {
    DetectorConfig config;
    CenterNet net{nullptr};
    double threshold = 0;  // operating point for precision/recall
    TrainHistory history;
    nlohmann::json provenance = nlohmann::json::object();

    static DetectorModel create(const DetectorConfig& cfg);
    void save(const std::filesystem::path& path) const;
    static DetectorModel load(const std::filesystem::path& path);
};

/// Trains with AdamW, horizontal flips and colour jitter, keeps the weights of
/// the best validation AP and stops after `patience` epochs without
/// improvement. The operating threshold maximizes F1 on validation.
DetectorModel train_detector(const DetectionSet& train, const DetectionSet& val, const DetectorConfig& cfg,
                             nlohmann::json provenance = nlohmann::json::object());

std::vector<Detection> predict(DetectorModel& model, const DetectionSet& set);

/// Globally pooled backbone features, N x feature_dim.
torch::Tensor detector_features(DetectorModel& model, const torch::Tensor& images);
/// Softmax over the per-category maximum heatmap logits, N x 7.
torch::Tensor category_probabilities(DetectorModel& model, const torch::Tensor& images);

/// Gaussian radius (in output cells) for a box of the given size, as in the reference
/// CenterNet code. That formula overestimates the radius for the stated overlap.
double gaussian_radius(double h, double w, double min_overlap = 0.7);

} // namespace endosynth::detection
