#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "endosynth/diffusion/models.hpp"
#include "endosynth/diffusion/sampler.hpp"
#include "endosynth/error.hpp"
#include "endosynth/pipeline/config.hpp"

namespace endosynth::pipeline {

/// Stage order of a full run.
const std::vector<std::string>& stage_names();

class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what) : Error(stage + ": " + what), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

struct RunOptions {
    std::string until;  // last stage to execute; empty runs every stage
    std::function<void(const std::string&)> log;
};

struct RunSummary {
    std::vector<std::string> executed;
    std::vector<std::string> skipped;  // resumed from persisted artifacts
};

/// Runs the experiment stage by stage. A stage whose marker in
/// <output_dir>/stages matches the config hash is skipped unless an earlier
/// stage ran again. Failures are recorded in <output_dir>/failure.json and
/// rethrown as StageError.
RunSummary run_pipeline(const ExperimentConfig& cfg, const RunOptions& opts = {});

/// Builds the report bundle from whatever artifacts exist under an experiment
/// directory and returns report.json. Missing pieces are listed under "gaps".
nlohmann::json render_reports(const std::filesystem::path& dir);

struct LocalizationProbe {
    int caption = 0;
    Modality modality = Modality::WL;
    BoundingBox box;
};

struct LocalizationResult {
    double inside_rate = 0;   // lesion-coloured fraction of pixels inside the box, averaged over samples
    double outside_rate = 0;  // same outside the box
    double ratio = 0;
    int samples = 0;

    nlohmann::json to_json() const;
};

/// Generates one image per single-box probe and scores it with the toy
/// colour-recipe classifier.
LocalizationResult localization_probe(diffusion::LdmModel& model, std::span<const LocalizationProbe> probes,
                                      const diffusion::SamplerConfig& sampler);

} // namespace endosynth::pipeline
