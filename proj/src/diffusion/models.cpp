#include "endosynth/diffusion/models.hpp"

#include <cmath>

#include "endosynth/error.hpp"
#include "endosynth/util/rng.hpp"

namespace endosynth::diffusion {

namespace nn = torch::nn;

namespace {

nn::Conv2d conv(int in, int out, int k = 3, int stride = 1) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2));
}

nn::GroupNorm group_norm(int ch) { return nn::GroupNorm(nn::GroupNormOptions(std::min(8, ch), ch)); }

torch::Tensor upsample2(const torch::Tensor& x) {
    return torch::nn::functional::interpolate(
        x, torch::nn::functional::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
}

struct Upsample2Impl : nn::Module {
    torch::Tensor forward(const torch::Tensor& x) { return upsample2(x); }
};
TORCH_MODULE(Upsample2);

} // namespace

// ---------------------------------------------------------------------------
// Autoencoder
// ---------------------------------------------------------------------------

AutoencoderImpl::AutoencoderImpl(AutoencoderConfig cfg) : cfg_(cfg) {
    if (cfg_.factor != 1 && cfg_.factor != 2 && cfg_.factor != 4 && cfg_.factor != 8)
        throw Error("autoencoder factor must be 1, 2, 4 or 8");
    latent_scale_ = register_buffer("latent_scale", torch::ones({1}, torch::kFloat32));
    if (cfg_.factor == 1) return;
    if (cfg_.latent_channels < 1 || cfg_.channels < 1) throw Error("autoencoder channel counts must be positive");

    const int levels = static_cast<int>(std::lround(std::log2(cfg_.factor)));
    auto width = [&](int level) { return cfg_.channels * std::min(1 << level, 2); };

    encoder_ = nn::Sequential();
    encoder_->push_back(conv(3, width(0)));
    encoder_->push_back(nn::SiLU());
    for (int l = 0; l < levels; ++l) {
        encoder_->push_back(conv(width(l), width(l + 1), 3, 2));
        encoder_->push_back(nn::SiLU());
        encoder_->push_back(conv(width(l + 1), width(l + 1)));
        encoder_->push_back(nn::SiLU());
    }
    encoder_->push_back(conv(width(levels), cfg_.latent_channels, 1));

    decoder_ = nn::Sequential();
    decoder_->push_back(conv(cfg_.latent_channels, width(levels)));
    decoder_->push_back(nn::SiLU());
    decoder_->push_back(conv(width(levels), width(levels)));
    decoder_->push_back(nn::SiLU());
    for (int l = levels - 1; l >= 0; --l) {
        decoder_->push_back(Upsample2());
        decoder_->push_back(conv(width(l + 1), width(l)));
        decoder_->push_back(nn::SiLU());
        decoder_->push_back(conv(width(l), width(l)));
        decoder_->push_back(nn::SiLU());
    }
    decoder_->push_back(conv(width(0), 3));

    register_module("encoder", encoder_);
    register_module("decoder", decoder_);
}

void AutoencoderImpl::check_input(const torch::Tensor& x) const {
    if (x.dim() != 4 || x.size(1) != 3) throw Error("autoencoder input must be Nx3xHxW");
    if (x.size(2) % cfg_.factor || x.size(3) % cfg_.factor)
        throw Error("autoencoder input sides must be divisible by " + std::to_string(cfg_.factor));
}

torch::Tensor AutoencoderImpl::encode(const torch::Tensor& x) {
    check_input(x);
    if (cfg_.factor == 1) return x * latent_scale_;
    return encoder_->forward(x) * latent_scale_;
}

torch::Tensor AutoencoderImpl::decode(const torch::Tensor& z) {
    if (z.dim() != 4 || z.size(1) != latent_channels()) throw Error("latent must be NxCxhxw with C=" + std::to_string(latent_channels()));
    if (cfg_.factor == 1) return z / latent_scale_;
    return decoder_->forward(z / latent_scale_);
}

void AutoencoderImpl::set_latent_scale(double s) {
    if (!(s > 0) || !std::isfinite(s)) throw Error("latent scale must be positive");
    torch::NoGradGuard ng;
    latent_scale_.fill_(s);
}

// ---------------------------------------------------------------------------
// Caption embedder
// ---------------------------------------------------------------------------

CaptionEmbedderImpl::CaptionEmbedderImpl(int dim) : dim_(dim) {
    table_ = register_module("table", nn::Embedding(kCaptionCount + 1, dim));
}

torch::Tensor CaptionEmbedderImpl::forward(const torch::Tensor& indices) {
    if (indices.numel() && (indices.min().item<std::int64_t>() < 0 || indices.max().item<std::int64_t>() > kNullCaption))
        throw Error("caption index outside 0.." + std::to_string(kNullCaption));
    return table_->forward(indices.to(torch::kInt64));
}

torch::Tensor CaptionEmbedderImpl::embed(const conditioning::Caption& c) {
    return forward(torch::tensor({static_cast<std::int64_t>(conditioning::caption_index(c))}))[0];
}

torch::Tensor CaptionEmbedderImpl::embed(std::string_view caption_text) {
    return embed(conditioning::parse_caption(caption_text));
}

// ---------------------------------------------------------------------------
// UNet
// ---------------------------------------------------------------------------

ResBlockImpl::ResBlockImpl(int in, int out, int emb_dim) {
    norm1_ = register_module("norm1", group_norm(in));
    conv1_ = register_module("conv1", conv(in, out));
    emb_proj_ = register_module("emb_proj", nn::Linear(emb_dim, out));
    norm2_ = register_module("norm2", group_norm(out));
    conv2_ = register_module("conv2", conv(out, out));
    if (in != out) skip_ = register_module("skip", conv(in, out, 1));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
    auto h = conv1_->forward(torch::silu(norm1_->forward(x)));
    h = h + emb_proj_->forward(torch::silu(emb)).unsqueeze(-1).unsqueeze(-1);
    h = conv2_->forward(torch::silu(norm2_->forward(h)));
    return (skip_ ? skip_->forward(x) : x) + h;
}

UNetEncoderImpl::UNetEncoderImpl(const DenoiserConfig& cfg) {
    const int c = cfg.channels, e = cfg.emb_dim;
    conv_in = register_module("conv_in", conv(cfg.latent_channels, c));
    res1_ = register_module("res1", ResBlock(c, c, e));
    down1_ = register_module("down1", conv(c, c, 3, 2));
    res2_ = register_module("res2", ResBlock(c, 2 * c, e));
    down2_ = register_module("down2", conv(2 * c, 2 * c, 3, 2));
    res3_ = register_module("res3", ResBlock(2 * c, 2 * c, e));
    mid_ = register_module("mid", ResBlock(2 * c, 2 * c, e));
}

std::array<torch::Tensor, 4> UNetEncoderImpl::forward(const torch::Tensor& h0, const torch::Tensor& emb) {
    auto h1 = res1_->forward(h0, emb);
    auto h2 = res2_->forward(down1_->forward(h1), emb);
    auto h3 = res3_->forward(down2_->forward(h2), emb);
    auto m = mid_->forward(h3, emb);
    return {h1, h2, h3, m};
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int dim) {
    const int half = dim / 2;
    auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / half);
    auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
    auto emb = torch::cat({torch::cos(args), torch::sin(args)}, 1);
    if (dim % 2) emb = torch::cat({emb, torch::zeros({emb.size(0), 1})}, 1);
    return emb;
}

DenoiserImpl::DenoiserImpl(DenoiserConfig cfg) : cfg_(cfg) {
    const int c = cfg.channels, e = cfg.emb_dim;
    if (c < 8 || c % 8) throw Error("denoiser channels must be a positive multiple of 8");
    time_mlp_ = register_module("time_mlp", nn::Sequential(nn::Linear(e, e), nn::SiLU(), nn::Linear(e, e)));
    caption_proj_ = register_module("caption_proj", nn::Linear(e, e));
    encoder = register_module("encoder", UNetEncoder(cfg));
    up3_ = register_module("up3", ResBlock(4 * c, 2 * c, e));
    upconv3_ = register_module("upconv3", conv(2 * c, 2 * c));
    up2_ = register_module("up2", ResBlock(4 * c, 2 * c, e));
    upconv2_ = register_module("upconv2", conv(2 * c, c));
    up1_ = register_module("up1", ResBlock(2 * c, c, e));
    norm_out_ = register_module("norm_out", group_norm(c));
    conv_out_ = register_module("conv_out", conv(c, cfg.latent_channels));
}

torch::Tensor DenoiserImpl::embed(const torch::Tensor& t, const torch::Tensor& caption_emb) {
    return time_mlp_->forward(timestep_embedding(t, cfg_.emb_dim)) + caption_proj_->forward(caption_emb);
}

torch::Tensor DenoiserImpl::forward(const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& caption_emb,
                                    const ControlResiduals* control, double control_scale) {
    if (z.dim() != 4 || z.size(1) != cfg_.latent_channels || z.size(2) % 4 || z.size(3) % 4)
        throw Error("denoiser input must be NxCxhxw with C=" + std::to_string(cfg_.latent_channels) +
                    " and sides divisible by 4");
    const auto emb = embed(t, caption_emb);
    auto feats = encoder->forward(encoder->conv_in->forward(z), emb);
    if (control) {
        for (std::size_t i = 0; i < feats.size(); ++i) feats[i] = feats[i] + control_scale * (*control)[i];
    }
    auto [h1, h2, h3, m] = feats;
    auto x = up3_->forward(torch::cat({m, h3}, 1), emb);
    x = upconv3_->forward(upsample2(x));
    x = up2_->forward(torch::cat({x, h2}, 1), emb);
    x = upconv2_->forward(upsample2(x));
    x = up1_->forward(torch::cat({x, h1}, 1), emb);
    return conv_out_->forward(torch::silu(norm_out_->forward(x)));
}

// ---------------------------------------------------------------------------
// Control adapter
// ---------------------------------------------------------------------------

void zero_module(nn::Module& m) {
    torch::NoGradGuard ng;
    for (auto& p : m.parameters()) p.zero_();
}

ControlAdapterImpl::ControlAdapterImpl(DenoiserConfig cfg) : cfg_(cfg) {
    const int c = cfg.channels;
    auto hint_out = conv(32, c);
    zero_module(*hint_out);
    hint_ = register_module("hint", nn::Sequential(conv(1, 16), nn::SiLU(), conv(16, 32), nn::SiLU(), hint_out));
    encoder_ = register_module("encoder", UNetEncoder(cfg));
    zero_out_ = register_module("zero_out", nn::ModuleList());
    for (int ch : {c, 2 * c, 2 * c, 2 * c}) {
        auto proj = conv(ch, ch, 1);
        zero_module(*proj);
        zero_out_->push_back(proj);
    }
}

void ControlAdapterImpl::init_from(DenoiserImpl& denoiser) {
    torch::NoGradGuard ng;
    auto src = denoiser.encoder->named_parameters(true);
    for (auto& p : encoder_->named_parameters(true)) p.value().copy_(src[p.key()]);
}

ControlResiduals ControlAdapterImpl::forward(const torch::Tensor& z, const torch::Tensor& mask, const torch::Tensor& emb) {
    if (mask.dim() != 4 || mask.size(1) != 1 || mask.size(2) != z.size(2) || mask.size(3) != z.size(3))
        throw Error("control mask must be Nx1xhxw at latent resolution");
    auto h0 = encoder_->conv_in->forward(z) + hint_->forward(mask);
    auto feats = encoder_->forward(h0, emb);
    ControlResiduals out;
    for (std::size_t i = 0; i < feats.size(); ++i) out[i] = zero_out_[i]->as<nn::Conv2d>()->forward(feats[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Bundle
// ---------------------------------------------------------------------------

nlohmann::json LdmConfig::to_json() const {
    return {{"image_size", image_size},
            {"autoencoder", {{"factor", autoencoder.factor}, {"latent_channels", autoencoder.latent_channels}, {"channels", autoencoder.channels}}},
            {"denoiser", {{"latent_channels", denoiser.latent_channels}, {"channels", denoiser.channels}, {"emb_dim", denoiser.emb_dim}}}};
}

LdmConfig LdmConfig::from_json(const nlohmann::json& j) {
    LdmConfig c;
    c.image_size = j.at("image_size");
    const auto& a = j.at("autoencoder");
    c.autoencoder = {a.at("factor"), a.at("latent_channels"), a.at("channels")};
    const auto& d = j.at("denoiser");
    c.denoiser = {d.at("latent_channels"), d.at("channels"), d.at("emb_dim")};
    return c;
}

LdmModel LdmModel::create(const LdmConfig& cfg, std::uint64_t seed, NoiseSchedule schedule) {
    if (cfg.image_size % (4 * cfg.autoencoder.factor)) throw Error("image size must be divisible by 4 x autoencoder factor");
    LdmModel m;
    m.config = cfg;
    m.config.denoiser.latent_channels = cfg.autoencoder.factor == 1 ? 3 : cfg.autoencoder.latent_channels;
    m.schedule = std::move(schedule);
    m.seed = seed;
    torch::manual_seed(util::derive_seed(seed, "init.autoencoder"));
    m.autoencoder = Autoencoder(cfg.autoencoder);
    torch::manual_seed(util::derive_seed(seed, "init.embedder"));
    m.embedder = CaptionEmbedder(m.config.denoiser.emb_dim);
    torch::manual_seed(util::derive_seed(seed, "init.denoiser"));
    m.denoiser = Denoiser(m.config.denoiser);
    torch::manual_seed(util::derive_seed(seed, "init.adapter"));
    m.adapter = ControlAdapter(m.config.denoiser);
    m.adapter->init_from(*m.denoiser);
    return m;
}

void LdmModel::save(const std::filesystem::path& path) const {
    nlohmann::json meta = {{"config", config.to_json()},
                           {"schedule", schedule.to_json()},
                           {"seed", seed},
                           {"autoencoder_trained", autoencoder_trained},
                           {"denoiser_trained", denoiser_trained},
                           {"adapter_trained", adapter_trained},
                           {"provenance", provenance}};
    torch::serialize::OutputArchive root;
    root.write("meta", c10::IValue(meta.dump()));
    auto put = [&](const char* key, const nn::Module& mod) {
        torch::serialize::OutputArchive sub;
        mod.save(sub);
        root.write(key, sub);
    };
    put("autoencoder", *autoencoder);
    put("embedder", *embedder);
    put("denoiser", *denoiser);
    put("adapter", *adapter);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    root.save_to(tmp);
    std::filesystem::rename(tmp, path);
}

LdmModel LdmModel::load(const std::filesystem::path& path) {
    torch::serialize::InputArchive root;
    try {
        root.load_from(path.string());
    } catch (const c10::Error& e) {
        throw Error("cannot read checkpoint " + path.string());
    }
    c10::IValue v;
    root.read("meta", v);
    const auto meta = nlohmann::json::parse(v.toStringRef());
    auto m = create(LdmConfig::from_json(meta.at("config")), meta.at("seed").get<std::uint64_t>(),
                    NoiseSchedule::from_json(meta.at("schedule")));
    auto get = [&](const char* key, nn::Module& mod) {
        torch::serialize::InputArchive sub;
        root.read(key, sub);
        mod.load(sub);
    };
    get("autoencoder", *m.autoencoder);
    get("embedder", *m.embedder);
    get("denoiser", *m.denoiser);
    get("adapter", *m.adapter);
    m.autoencoder_trained = meta.at("autoencoder_trained");
    m.denoiser_trained = meta.at("denoiser_trained");
    m.adapter_trained = meta.at("adapter_trained");
    m.provenance = meta.value("provenance", nlohmann::json::object());
    return m;
}

std::vector<torch::Tensor> snapshot(const nn::Module& m) {
    std::vector<torch::Tensor> out;
    for (const auto& p : m.parameters(true)) out.push_back(p.detach().clone());
    for (const auto& b : m.buffers(true)) out.push_back(b.detach().clone());
    return out;
}

bool same_parameters(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!a[i].sizes().equals(b[i].sizes()) || !torch::equal(a[i], b[i])) return false;
    return true;
}

void restore(nn::Module& m, const std::vector<torch::Tensor>& snap) {
    torch::NoGradGuard ng;
    std::size_t i = 0;
    for (auto& p : m.parameters(true)) p.copy_(snap.at(i++));
    for (auto& b : m.buffers(true)) b.copy_(snap.at(i++));
}

} // namespace endosynth::diffusion
