#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "endosynth/conditioning.hpp"
#include "endosynth/detection/detector.hpp"
#include "endosynth/diffusion/models.hpp"
#include "endosynth/diffusion/sampler.hpp"
#include "endosynth/diffusion/trainer.hpp"

namespace endosynth::pipeline {

struct DatasetParams {
    int n_internal = 200;
    int n_external = 100;
    int image_size = 64;
    std::array<double, 3> split_ratios{0.8, 0.1, 0.1};
    double nbi_fraction = 0.3;
    double two_lesion_fraction = 0.3;
};

struct DetectionParams {
    detection::DetectorConfig detector;
    std::vector<double> fractions{0.0, 0.05, 0.10, 0.20, 0.40, 0.80};
    int cv_folds = 3;
    double cv_fraction = 0.10;
};

struct StudyParams {
    std::string votes;  // optional votes CSV consumed by the report
    int per_class = 10;
};

/// Every tunable of one experiment. Parsed from JSON; keys not in the schema
/// are rejected.
struct ExperimentConfig {
    std::uint64_t seed = 1;
    std::filesystem::path output_dir = "runs/experiment";
    DatasetParams dataset;
    conditioning::AugmentationRanges augmentation;
    int pool_size = 0;  // synthetic images to generate; 0 means one per real training image
    diffusion::AutoencoderConfig autoencoder;
    diffusion::TrainConfig autoencoder_training;
    diffusion::DenoiserConfig denoiser;
    diffusion::TrainConfig ldm_training;
    diffusion::TrainConfig control_training;
    int schedule_steps = 1000;
    double beta_start = 1e-4, beta_end = 0.02;
    diffusion::SamplerConfig sampler;
    int is_splits = 10;
    int localization_samples = 50;
    DetectionParams detection;
    double selection_fraction = 0.10;
    StudyParams study;

    /// Full JSON form (defaults filled in); output_dir is not included.
    nlohmann::json to_json() const;
    /// FNV-1a of the canonical JSON form, as 16 hex digits.
    std::string hash() const;
};

/// Default configuration as JSON: the schema accepted by parse_config.
nlohmann::json default_config_json();

/// Throws ConfigError on unknown keys, wrong types or invalid values.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

} // namespace endosynth::pipeline
