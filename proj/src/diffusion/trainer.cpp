#include "endosynth/diffusion/trainer.hpp"

#include <cmath>

#include "endosynth/diffusion/tensor_ops.hpp"
#include "endosynth/util/rng.hpp"

namespace endosynth::diffusion {

nlohmann::json TrainConfig::to_json() const {
    return {{"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr}, {"seed", seed},
            {"caption_dropout", caption_dropout}, {"val_size", val_size}, {"grad_clip", grad_clip}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.seed = j.value("seed", c.seed);
    c.caption_dropout = j.value("caption_dropout", c.caption_dropout);
    c.val_size = j.value("val_size", c.val_size);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    return c;
}

nlohmann::json TrainReport::to_json() const {
    return {{"epoch_loss", epoch_loss}, {"initial_val_loss", initial_val_loss}, {"final_val_loss", final_val_loss},
            {"steps", steps}};
}

torch::Tensor eq2_loss(const torch::Tensor& eps, const torch::Tensor& pred) {
    if (!eps.sizes().equals(pred.sizes())) throw Error("eq2_loss: prediction shape differs from noise");
    return (eps - pred).pow(2).flatten(1).sum(1).mean();
}

namespace {

void check_finite(const torch::Tensor& loss) {
    if (!std::isfinite(loss.item<double>())) throw Error("non-finite diffusion loss");
}

void check_config(const TrainConfig& cfg) {
    if (cfg.epochs < 0 || cfg.batch_size < 1 || !(cfg.lr > 0)) throw Error("invalid training configuration");
    if (cfg.caption_dropout < 0 || cfg.caption_dropout >= 1) throw Error("caption_dropout must be in [0,1)");
}

torch::Generator generator(std::uint64_t seed) { return at::detail::createCPUGenerator(seed); }

torch::Tensor drop_captions(const torch::Tensor& captions, double p, std::uint64_t seed) {
    if (p <= 0) return captions;
    auto gen = generator(seed);
    auto drop = torch::rand({captions.size(0)}, gen) < p;
    return torch::where(drop, torch::full_like(captions, kNullCaption), captions);
}

// Runs the shared epoch/batch loop; `step_loss` returns the loss of one batch.
template <class StepLoss, class ValLoss>
TrainReport run_training(torch::nn::Module& trained, std::vector<torch::Tensor> params, std::int64_t n,
                         const TrainConfig& cfg, StepLoss step_loss, ValLoss val_loss) {
    TrainReport report;
    {
        torch::NoGradGuard ng;
        report.initial_val_loss = val_loss();
    }
    report.final_val_loss = report.initial_val_loss;
    if (cfg.epochs == 0) return report;

    torch::optim::Adam opt(params, torch::optim::AdamOptions(cfg.lr));
    auto good = snapshot(trained);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto gen = generator(util::derive_seed(cfg.seed, "epoch", epoch));
        const auto perm = torch::randperm(n, gen, torch::kInt64);
        double total = 0;
        std::int64_t batches = 0;
        for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
            const auto idx = perm.slice(0, start, std::min(n, start + cfg.batch_size));
            opt.zero_grad();
            auto loss = step_loss(idx, report.steps);
            const double v = loss.template item<double>();
            if (!std::isfinite(v)) {
                restore(trained, good);
                throw TrainingDiverged(epoch, "training diverged at epoch " + std::to_string(epoch) +
                                                  "; parameters rolled back to the last completed epoch");
            }
            loss.backward();
            if (cfg.grad_clip > 0) torch::nn::utils::clip_grad_norm_(params, cfg.grad_clip);
            opt.step();
            total += v;
            ++batches;
            ++report.steps;
        }
        report.epoch_loss.push_back(total / static_cast<double>(batches));
        good = snapshot(trained);
    }
    torch::NoGradGuard ng;
    report.final_val_loss = val_loss();
    return report;
}

LdmBatch val_batch(const torch::Tensor& latents, const torch::Tensor& captions, const torch::Tensor& masks,
                   const NoiseSchedule& schedule, const TrainConfig& cfg) {
    const auto k = std::min<std::int64_t>(cfg.val_size, latents.size(0));
    return make_batch(latents.slice(0, 0, k), captions.slice(0, 0, k), masks.defined() ? masks.slice(0, 0, k) : masks,
                      schedule, util::derive_seed(cfg.seed, "val"));
}

// Module holding several sub-modules so one snapshot covers them all.
struct Group : torch::nn::Module {
    Group(std::initializer_list<std::pair<std::string, std::shared_ptr<torch::nn::Module>>> mods) {
        for (auto& [name, m] : mods) register_module(name, m);
    }
};

} // namespace

LdmBatch make_batch(const torch::Tensor& z0, const torch::Tensor& captions, const torch::Tensor& masks,
                    const NoiseSchedule& schedule, std::uint64_t seed) {
    auto gen = generator(seed);
    LdmBatch b;
    b.z0 = z0;
    b.captions = captions;
    b.masks = masks;
    b.t = torch::randint(1, schedule.steps() + 1, {z0.size(0)}, gen, torch::kInt64);
    b.noise = torch::randn(z0.sizes(), gen, z0.scalar_type());
    return b;
}

torch::Tensor ldm_loss(const EpsPredictor& eps_theta, const LdmBatch& batch, const NoiseSchedule& schedule) {
    const auto z_t = forward_diffuse(batch.z0, batch.t, schedule, batch.noise);
    auto loss = eq2_loss(batch.noise, eps_theta(z_t, batch.t, batch));
    check_finite(loss);
    return loss;
}

torch::Tensor ldm_loss(LdmModel& model, const LdmBatch& batch, bool with_control) {
    return ldm_loss(
        [&](const torch::Tensor& z_t, const torch::Tensor& t, const LdmBatch& b) {
            const auto cemb = model.embedder->forward(b.captions);
            if (!with_control) return model.denoiser->forward(z_t, t, cemb);
            if (!b.masks.defined()) throw Error("control loss needs masks");
            const auto res = model.adapter->forward(z_t, b.masks, model.denoiser->embed(t, cemb));
            return model.denoiser->forward(z_t, t, cemb, &res);
        },
        batch, model.schedule);
}

TrainReport train_autoencoder(LdmModel& model, const torch::Tensor& images, const TrainConfig& cfg) {
    check_config(cfg);
    auto& ae = model.autoencoder;
    if (ae->config().factor == 1) {
        model.autoencoder_trained = true;
        return {};
    }
    const auto n = images.size(0);
    const auto val = images.slice(0, 0, std::min<std::int64_t>(cfg.val_size, n));
    auto report = run_training(
        *ae, ae->parameters(), n, cfg,
        [&](const torch::Tensor& idx, std::int64_t) {
            const auto x = images.index_select(0, idx);
            const auto y = ae->forward(x);
            return torch::mse_loss(y, x) + 0.5 * torch::l1_loss(y, x);
        },
        [&] { return torch::mse_loss(ae->forward(val), val).item<double>(); });
    if (cfg.epochs > 0) {
        ae->set_latent_scale(1.0);
        torch::NoGradGuard ng;
        std::vector<torch::Tensor> zs;
        for (std::int64_t s = 0; s < n; s += 64) zs.push_back(ae->encode(images.slice(0, s, std::min(n, s + 64))));
        ae->set_latent_scale(1.0 / torch::cat(zs).std().item<double>());
        model.autoencoder_trained = true;
    }
    return report;
}

torch::Tensor encode_all(LdmModel& model, const torch::Tensor& images, int chunk) {
    torch::NoGradGuard ng;
    std::vector<torch::Tensor> out;
    for (std::int64_t s = 0; s < images.size(0); s += chunk)
        out.push_back(model.autoencoder->encode(images.slice(0, s, std::min(images.size(0), s + chunk))));
    return torch::cat(out);
}

torch::Tensor decode_all(LdmModel& model, const torch::Tensor& latents, int chunk) {
    torch::NoGradGuard ng;
    std::vector<torch::Tensor> out;
    for (std::int64_t s = 0; s < latents.size(0); s += chunk)
        out.push_back(model.autoencoder->decode(latents.slice(0, s, std::min(latents.size(0), s + chunk))));
    return torch::cat(out).clamp(-1, 1);
}

TrainReport train_ldm(LdmModel& model, const torch::Tensor& latents, const torch::Tensor& captions,
                      const TrainConfig& cfg) {
    check_config(cfg);
    if (latents.size(0) == 0 || latents.size(0) != captions.size(0)) throw Error("train_ldm: latents and captions must pair up");
    Group group({{"embedder", model.embedder.ptr()}, {"denoiser", model.denoiser.ptr()}});
    auto params = model.denoiser->parameters();
    for (auto& p : model.embedder->parameters()) params.push_back(p);
    const auto vb = val_batch(latents, captions, {}, model.schedule, cfg);
    auto report = run_training(
        group, params, latents.size(0), cfg,
        [&](const torch::Tensor& idx, std::int64_t step) {
            const auto caps = drop_captions(captions.index_select(0, idx), cfg.caption_dropout,
                                            util::derive_seed(cfg.seed, "dropout", step));
            const auto b = make_batch(latents.index_select(0, idx), caps, {}, model.schedule,
                                      util::derive_seed(cfg.seed, "batch", step));
            return ldm_loss(model, b, false) / static_cast<double>(latents[0].numel());
        },
        [&] { return ldm_loss(model, vb, false).item<double>(); });
    if (cfg.epochs > 0) model.denoiser_trained = true;
    return report;
}

TrainReport train_control(LdmModel& model, const torch::Tensor& latents, const torch::Tensor& captions,
                          const torch::Tensor& masks, const TrainConfig& cfg) {
    check_config(cfg);
    if (!model.denoiser_trained) throw Error("train_control needs a trained denoiser");
    if (latents.size(0) == 0 || latents.size(0) != captions.size(0) || latents.size(0) != masks.size(0))
        throw Error("train_control: latents, captions and masks must pair up");
    if (!model.adapter_trained) model.adapter->init_from(*model.denoiser);
    const auto lmask = pool_mask(masks, static_cast<int>(latents.size(2)), static_cast<int>(latents.size(3)));

    std::vector<std::pair<torch::Tensor, bool>> frozen;
    for (auto& p : model.denoiser->parameters()) frozen.emplace_back(p, p.requires_grad());
    for (auto& p : model.embedder->parameters()) frozen.emplace_back(p, p.requires_grad());
    for (auto& [p, _] : frozen) p.set_requires_grad(false);

    const auto vb = val_batch(latents, captions, lmask, model.schedule, cfg);
    TrainReport report;
    try {
        report = run_training(
            *model.adapter, model.adapter->parameters(), latents.size(0), cfg,
            [&](const torch::Tensor& idx, std::int64_t step) {
                const auto caps = drop_captions(captions.index_select(0, idx), cfg.caption_dropout,
                                                util::derive_seed(cfg.seed, "dropout", step));
                const auto b = make_batch(latents.index_select(0, idx), caps, lmask.index_select(0, idx), model.schedule,
                                          util::derive_seed(cfg.seed, "batch", step));
                return ldm_loss(model, b, true) / static_cast<double>(latents[0].numel());
            },
            [&] { return ldm_loss(model, vb, true).item<double>(); });
    } catch (...) {
        for (auto& [p, rg] : frozen) p.set_requires_grad(rg);
        throw;
    }
    for (auto& [p, rg] : frozen) p.set_requires_grad(rg);
    if (cfg.epochs > 0) model.adapter_trained = true;
    return report;
}

} // namespace endosynth::diffusion
