#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "endosynth/conditioning.hpp"
#include "endosynth/diffusion/schedule.hpp"

namespace endosynth::diffusion {

struct AutoencoderConfig {
    int factor = 4;           // 1 gives a parameter-free identity path
    int latent_channels = 4;  // ignored (3) when factor == 1
    int channels = 32;
};

class AutoencoderImpl : public torch::nn::Module {
public:
    explicit AutoencoderImpl(AutoencoderConfig cfg = {});

    /// Nx3xHxW in [-1,1] -> NxCx(H/f)x(W/f), multiplied by the latent scale.
    torch::Tensor encode(const torch::Tensor& x);
    torch::Tensor decode(const torch::Tensor& z);
    torch::Tensor forward(const torch::Tensor& x) { return decode(encode(x)); }

    const AutoencoderConfig& config() const { return cfg_; }
    int latent_channels() const { return cfg_.factor == 1 ? 3 : cfg_.latent_channels; }
    double latent_scale() const { return latent_scale_.item<double>(); }
    void set_latent_scale(double s);

private:
    void check_input(const torch::Tensor& x) const;

    AutoencoderConfig cfg_;
    torch::nn::Sequential encoder_{nullptr}, decoder_{nullptr};
    torch::Tensor latent_scale_;
};
TORCH_MODULE(Autoencoder);

/// Lookup embedding over the 14 template captions plus a null entry used for
/// unconditional (guidance) predictions.
inline constexpr int kCaptionCount = 14;
inline constexpr int kNullCaption = 14;

class CaptionEmbedderImpl : public torch::nn::Module {
public:
    explicit CaptionEmbedderImpl(int dim = 128);

    torch::Tensor forward(const torch::Tensor& indices);
    torch::Tensor embed(const conditioning::Caption& c);
    /// Throws for text outside the template set.
    torch::Tensor embed(std::string_view caption_text);
    int dim() const { return dim_; }

private:
    int dim_;
    torch::nn::Embedding table_{nullptr};
};
TORCH_MODULE(CaptionEmbedder);

struct DenoiserConfig {
    int latent_channels = 4;
    int channels = 64;
    int emb_dim = 128;
};

class ResBlockImpl : public torch::nn::Module {
public:
    ResBlockImpl(int in, int out, int emb_dim);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb);

private:
    torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
    torch::nn::Linear emb_proj_{nullptr};
};
TORCH_MODULE(ResBlock);

/// Encoder half of the UNet, shared in shape by the denoiser and the control adapter.
/// Returns the three skip features and the bottleneck.
class UNetEncoderImpl : public torch::nn::Module {
public:
    UNetEncoderImpl(const DenoiserConfig& cfg);
    std::array<torch::Tensor, 4> forward(const torch::Tensor& h0, const torch::Tensor& emb);

    torch::nn::Conv2d conv_in{nullptr};

private:
    ResBlock res1_{nullptr}, res2_{nullptr}, res3_{nullptr}, mid_{nullptr};
    torch::nn::Conv2d down1_{nullptr}, down2_{nullptr};
};
TORCH_MODULE(UNetEncoder);

using ControlResiduals = std::array<torch::Tensor, 4>;

/// Noise predictor eps_theta(z_t, t, caption) on latents whose sides are
/// divisible by 4.
class DenoiserImpl : public torch::nn::Module {
public:
    explicit DenoiserImpl(DenoiserConfig cfg = {});

    /// Time plus caption embedding.
    torch::Tensor embed(const torch::Tensor& t, const torch::Tensor& caption_emb);
    torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& caption_emb,
                          const ControlResiduals* control = nullptr, double control_scale = 1.0);

    const DenoiserConfig& config() const { return cfg_; }
    UNetEncoder encoder{nullptr};

private:
    DenoiserConfig cfg_;
    torch::nn::Sequential time_mlp_{nullptr};
    torch::nn::Linear caption_proj_{nullptr};
    ResBlock up3_{nullptr}, up2_{nullptr}, up1_{nullptr};
    torch::nn::Conv2d upconv3_{nullptr}, upconv2_{nullptr};
    torch::nn::GroupNorm norm_out_{nullptr};
    torch::nn::Conv2d conv_out_{nullptr};
};
TORCH_MODULE(Denoiser);

/// Sinusoidal timestep features.
torch::Tensor timestep_embedding(const torch::Tensor& t, int dim);

/// Trainable copy of the denoiser encoder fed with the latent-resolution mask.
/// The hint convolution and every output projection start at zero, so a fresh
/// adapter contributes exactly nothing.
class ControlAdapterImpl : public torch::nn::Module {
public:
    explicit ControlAdapterImpl(DenoiserConfig cfg = {});

    /// Copies encoder weights from a denoiser.
    void init_from(DenoiserImpl& denoiser);
    ControlResiduals forward(const torch::Tensor& z, const torch::Tensor& mask, const torch::Tensor& emb);

private:
    DenoiserConfig cfg_;
    torch::nn::Sequential hint_{nullptr};
    UNetEncoder encoder_{nullptr};
    torch::nn::ModuleList zero_out_{nullptr};
};
TORCH_MODULE(ControlAdapter);

/// Zeroes weight and bias of every Conv2d/Linear in `m`.
void zero_module(torch::nn::Module& m);

struct LdmConfig {
    int image_size = 64;
    AutoencoderConfig autoencoder;
    DenoiserConfig denoiser;

    nlohmann::json to_json() const;
    static LdmConfig from_json(const nlohmann::json& j);
};

/// Autoencoder, caption embedder, denoiser and control adapter with the noise
/// schedule and training provenance. Saved as one self-describing archive.
struct LdmModel {
    LdmConfig config;
    NoiseSchedule schedule = NoiseSchedule::linear();
    Autoencoder autoencoder{nullptr};
    CaptionEmbedder embedder{nullptr};
    Denoiser denoiser{nullptr};
    ControlAdapter adapter{nullptr};
    std::uint64_t seed = 0;
    bool autoencoder_trained = false;
    bool denoiser_trained = false;
    bool adapter_trained = false;
    nlohmann::json provenance = nlohmann::json::object();

    static LdmModel create(const LdmConfig& cfg, std::uint64_t seed, NoiseSchedule schedule = NoiseSchedule::linear());

    int latent_size() const { return config.image_size / config.autoencoder.factor; }
    void save(const std::filesystem::path& path) const;
    static LdmModel load(const std::filesystem::path& path);
};

/// Flattened copies of every parameter and buffer, for equality checks.
std::vector<torch::Tensor> snapshot(const torch::nn::Module& m);
bool same_parameters(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b);
void restore(torch::nn::Module& m, const std::vector<torch::Tensor>& snap);

} // namespace endosynth::diffusion
