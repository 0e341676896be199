#include "endosynth/diffusion/sampler.hpp"

#include <cmath>

#include "endosynth/diffusion/tensor_ops.hpp"
#include "endosynth/diffusion/trainer.hpp"
#include "endosynth/error.hpp"
#include "endosynth/util/rng.hpp"

namespace endosynth::diffusion {

void SamplerConfig::validate() const {
    if (steps < 1) throw Error("sampler steps must be >= 1");
    if (conditioning_scale < 0 || guidance_scale < 0) throw Error("sampler scales must be >= 0");
}

nlohmann::json SamplerConfig::to_json() const {
    return {{"steps", steps}, {"conditioning_scale", conditioning_scale}, {"guidance_scale", guidance_scale}, {"seed", seed}};
}

SamplerConfig SamplerConfig::from_json(const nlohmann::json& j) {
    SamplerConfig c;
    c.steps = j.value("steps", c.steps);
    c.conditioning_scale = j.value("conditioning_scale", c.conditioning_scale);
    c.guidance_scale = j.value("guidance_scale", c.guidance_scale);
    c.seed = j.value("seed", c.seed);
    return c;
}

torch::Tensor sample_latents(LdmModel& model, const torch::Tensor& captions, const torch::Tensor& masks,
                             const SamplerConfig& cfg) {
    cfg.validate();
    if (!model.denoiser_trained) throw Error("sample: denoiser is untrained");
    const bool controlled = masks.defined();
    if (controlled && !model.adapter_trained) throw Error("sample: control adapter is untrained");
    const auto n = captions.size(0);
    const int h = model.latent_size(), w = model.latent_size();
    if (controlled && (masks.size(0) != n || masks.size(2) != model.config.image_size || masks.size(3) != model.config.image_size))
        throw Error("sample: masks must be Nx1xHxW at the training resolution");
    const int c = model.config.denoiser.latent_channels;

    torch::NoGradGuard ng;
    const auto ts = model.schedule.sampling_timesteps(cfg.steps);
    auto z_all = per_row_normal(n, {c, h, w}, util::derive_seed(cfg.seed, "sample"));
    const auto lmask_all = controlled ? pool_mask(masks, h, w) : torch::Tensor();
    std::vector<torch::Tensor> out;
    constexpr std::int64_t chunk = 64;
    for (std::int64_t s = 0; s < n; s += chunk) {
        const auto e = std::min(n, s + chunk);
        auto z = z_all.slice(0, s, e).clone();
        const auto m = e - s;
        const auto cemb = model.embedder->forward(captions.slice(0, s, e));
        const auto uemb = model.embedder->forward(torch::full({m}, kNullCaption, torch::kInt64));
        const auto lmask = controlled ? lmask_all.slice(0, s, e) : torch::Tensor();

        auto predict = [&](const torch::Tensor& zt, const torch::Tensor& tt, const torch::Tensor& caption_emb) {
            if (!controlled) return model.denoiser->forward(zt, tt, caption_emb);
            const auto res = model.adapter->forward(zt, lmask, model.denoiser->embed(tt, caption_emb));
            return model.denoiser->forward(zt, tt, caption_emb, &res, cfg.conditioning_scale);
        };

        for (std::size_t k = 0; k < ts.size(); ++k) {
            const auto tt = torch::full({m}, ts[k], torch::kInt64);
            auto eps = predict(z, tt, cemb);
            if (cfg.guidance_scale != 1.0) {
                const auto eps_u = predict(z, tt, uemb);
                eps = eps_u + cfg.guidance_scale * (eps - eps_u);
            }
            const double ab = model.schedule.alpha_bar(ts[k]);
            const double ab_prev = k + 1 < ts.size() ? model.schedule.alpha_bar(ts[k + 1]) : 1.0;
            const auto x0 = (z - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
            z = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps;
        }
        out.push_back(z);
    }
    return torch::cat(out);
}

torch::Tensor sample(LdmModel& model, const torch::Tensor& captions, const torch::Tensor& masks, const SamplerConfig& cfg) {
    if (!model.autoencoder_trained && model.config.autoencoder.factor != 1) throw Error("sample: autoencoder is untrained");
    return decode_all(model, sample_latents(model, captions, masks, cfg));
}

} // namespace endosynth::diffusion
