#pragma once

#include <cstdint>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "endosynth/diffusion/models.hpp"

namespace endosynth::diffusion {

struct SamplerConfig {
    int steps = 50;
    double conditioning_scale = 1.0;
    double guidance_scale = 1.0;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static SamplerConfig from_json(const nlohmann::json& j);
};

/// Deterministic DDIM reverse process from z_T ~ N(0,1). Sample i starts from
/// noise seeded by (seed, i). masks: Nx1xHxW at image resolution, or undefined
/// for caption-only sampling. Returns latents.
torch::Tensor sample_latents(LdmModel& model, const torch::Tensor& captions, const torch::Tensor& masks,
                             const SamplerConfig& cfg);

/// sample_latents followed by decoding; Nx3xHxW in [-1,1].
torch::Tensor sample(LdmModel& model, const torch::Tensor& captions, const torch::Tensor& masks,
                     const SamplerConfig& cfg);

} // namespace endosynth::diffusion
