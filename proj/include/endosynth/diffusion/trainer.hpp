#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "endosynth/diffusion/models.hpp"
#include "endosynth/error.hpp"

namespace endosynth::diffusion {

/// Thrown when a loss turns non-finite; parameters are rolled back to the
/// last completed epoch first.
class TrainingDiverged : public Error {
public:
    TrainingDiverged(int epoch, const std::string& what) : Error(what), epoch_(epoch) {}
    int epoch() const { return epoch_; }

private:
    int epoch_;
};

struct TrainConfig {
    int epochs = 30;
    int batch_size = 16;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    double caption_dropout = 0.1;  // ldm only
    int val_size = 32;
    double grad_clip = 1.0;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainReport {
    std::vector<double> epoch_loss;
    double initial_val_loss = 0;
    double final_val_loss = 0;
    std::int64_t steps = 0;

    nlohmann::json to_json() const;
};

/// Per-sample squared L2 norm of (eps - pred), averaged over the batch.
torch::Tensor eq2_loss(const torch::Tensor& eps, const torch::Tensor& pred);

struct LdmBatch {
    torch::Tensor z0;        // NxCxhxw
    torch::Tensor captions;  // int64 N
    torch::Tensor masks;     // Nx1xhxw, undefined when unconditioned
    torch::Tensor t;         // int64 N, values in 1..T
    torch::Tensor noise;     // like z0
};

/// Predictor signature used by ldm_loss: (z_t, t, batch) -> eps estimate.
using EpsPredictor = std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&, const LdmBatch&)>;

/// Diffuses the batch to z_t and scores the predictor. Throws on a non-finite loss.
torch::Tensor ldm_loss(const EpsPredictor& eps_theta, const LdmBatch& batch, const NoiseSchedule& schedule);
/// Model-backed predictor; the adapter is used when `with_control` is set.
torch::Tensor ldm_loss(LdmModel& model, const LdmBatch& batch, bool with_control);

/// Draws t ~ U[1,T] and eps ~ N(0,1) for a batch of latents.
LdmBatch make_batch(const torch::Tensor& z0, const torch::Tensor& captions, const torch::Tensor& masks,
                    const NoiseSchedule& schedule, std::uint64_t seed);

/// Trains the autoencoder on Nx3xHxW images (L1 + MSE reconstruction) and sets
/// the latent scale to 1/std of the training latents.
TrainReport train_autoencoder(LdmModel& model, const torch::Tensor& images, const TrainConfig& cfg);

/// Encodes images in chunks without gradients.
torch::Tensor encode_all(LdmModel& model, const torch::Tensor& images, int chunk = 64);
torch::Tensor decode_all(LdmModel& model, const torch::Tensor& latents, int chunk = 64);

/// Trains embedder + denoiser on latents with caption dropout.
TrainReport train_ldm(LdmModel& model, const torch::Tensor& latents, const torch::Tensor& captions,
                      const TrainConfig& cfg);

/// Trains only the control adapter; masks are Nx1xHxW at image resolution.
/// The denoiser and embedder stay frozen.
TrainReport train_control(LdmModel& model, const torch::Tensor& latents, const torch::Tensor& captions,
                          const torch::Tensor& masks, const TrainConfig& cfg);

} // namespace endosynth::diffusion
