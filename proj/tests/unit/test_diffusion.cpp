#include "support/torch_doctest.hpp"

#include <cmath>
#include <filesystem>

#include "endosynth/conditioning.hpp"
#include "endosynth/dataset.hpp"
#include "endosynth/diffusion/models.hpp"
#include "endosynth/diffusion/sampler.hpp"
#include "endosynth/diffusion/tensor_ops.hpp"
#include "endosynth/diffusion/trainer.hpp"
#include "endosynth/util/rng.hpp"

using namespace endosynth;
using namespace endosynth::diffusion;

namespace {

struct TorchSetup {
    TorchSetup() { configure_torch(1); }
} const torch_setup;

struct ToyBatch {
    torch::Tensor images, captions, masks;
};

ToyBatch toy_batch(int n, std::uint64_t seed) {
    const auto ds = dataset::make_toy_dataset(n, seed, 64);
    ToyBatch b;
    b.images = to_batch(ds.images);
    std::vector<std::int64_t> caps;
    std::vector<conditioning::ControlMask> masks;
    for (const auto& e : ds.manifest.entries) {
        const auto c = e.annotations.empty() ? conditioning::build_caption(e.modality, LesionCategory::Polyp)
                                             : conditioning::caption_for(e);
        caps.push_back(conditioning::caption_index(c));
        std::vector<BoundingBox> boxes;
        for (const auto& a : e.annotations) boxes.push_back(a.box);
        masks.push_back(conditioning::rasterize_mask(boxes, 64, 64));
    }
    b.captions = torch::tensor(caps, torch::kInt64);
    b.masks = mask_batch(masks);
    return b;
}

LdmConfig small_config() {
    LdmConfig c;
    c.autoencoder.channels = 8;
    c.denoiser.channels = 16;
    c.denoiser.emb_dim = 32;
    return c;
}

TrainConfig quick(int epochs, std::uint64_t seed = 3) {
    TrainConfig t;
    t.epochs = epochs;
    t.seed = seed;
    t.val_size = 8;
    return t;
}

// Small model with every component trained for one epoch.
LdmModel trained_small_model() {
    auto m = LdmModel::create(small_config(), 11);
    const auto b = toy_batch(16, 5);
    train_autoencoder(m, b.images, quick(1));
    const auto z = encode_all(m, b.images);
    train_ldm(m, z, b.captions, quick(1));
    train_control(m, z, b.captions, b.masks, quick(1));
    return m;
}

bool bit_equal(const torch::Tensor& a, const torch::Tensor& b) { return a.sizes() == b.sizes() && torch::equal(a, b); }

} // namespace

TEST_CASE("noise schedule invariants") {
    const auto s = NoiseSchedule::linear();
    CHECK(s.steps() == 1000);
    CHECK(s.alpha_bar(0) == 1.0);
    for (int t = 1; t <= s.steps(); ++t) CHECK_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    CHECK_LT(s.alpha_bar(s.steps()), 0.02);
    const auto ts = s.sampling_timesteps(50);
    CHECK(ts.size() == 50);
    CHECK(ts.front() == 1000);
    CHECK(ts.back() >= 1);
    for (std::size_t i = 1; i < ts.size(); ++i) CHECK_LT(ts[i], ts[i - 1]);
    CHECK_THROWS(NoiseSchedule({0.5, 1.5}));
    CHECK_THROWS(NoiseSchedule::linear(10, 1e-4, 2e-4));  // alpha_bar_T too large
    CHECK(NoiseSchedule::from_json(s.to_json()) == s);
}

TEST_CASE("forward_diffuse identity at t=0 and errors") {
    const auto s = NoiseSchedule::linear();
    const auto z0 = seeded_normal({2, 4, 8, 8}, 1);
    const auto noise = seeded_normal({2, 4, 8, 8}, 2);
    CHECK(bit_equal(forward_diffuse(z0, 0, s, noise), z0));
    CHECK_THROWS(forward_diffuse(z0, -1, s, noise));
    CHECK_THROWS(forward_diffuse(z0, 1001, s, noise));
    CHECK_THROWS(forward_diffuse(z0, 5, s, seeded_normal({2, 4, 8, 4}, 2)));
}

TEST_CASE("forward_diffuse at t=T is standard normal") {
    const auto s = NoiseSchedule::linear();
    const auto z0 = torch::full({10000, 1}, 0.7, torch::kFloat64);
    const auto zt = forward_diffuse(z0, s.steps(), s, seeded_normal({10000, 1}, 9).to(torch::kFloat64));
    CHECK(std::abs(zt.mean().item<double>()) < 0.05);
    CHECK(std::abs(zt.var().item<double>() - 1.0) < 0.05);
}

TEST_CASE("closed-form marginal matches the stepwise chain") {
    const auto s = NoiseSchedule::linear();
    constexpr std::int64_t n = 10000;
    const auto z0 = torch::tensor({-1.5, -0.3, 0.0, 0.8, 2.0}, torch::kFloat64).unsqueeze(0).expand({n, 5}).contiguous();
    for (int t : {1, 10, 100, 400}) {
        CAPTURE(t);
        auto chain = z0.clone();
        for (int k = 1; k <= t; ++k) {
            const auto eps = seeded_normal({n, 5}, util::derive_seed(100, "chain", static_cast<std::uint64_t>(t * 10000 + k)))
                                 .to(torch::kFloat64);
            chain = std::sqrt(1.0 - s.beta(k)) * chain + std::sqrt(s.beta(k)) * eps;
        }
        const auto closed = forward_diffuse(z0, t, s, seeded_normal({n, 5}, 200 + t).to(torch::kFloat64));
        const double var = 1.0 - s.alpha_bar(t);
        for (int j = 0; j < 5; ++j) {
            const auto a = chain.select(1, j), b = closed.select(1, j);
            const double mean_se = std::sqrt(2.0 * var / n);
            const double var_se = var * std::sqrt(2.0 * 2.0 / (n - 1));
            CHECK(std::abs(a.mean().item<double>() - b.mean().item<double>()) < 3 * mean_se);
            CHECK(std::abs(a.var().item<double>() - b.var().item<double>()) < 3 * var_se);
            CHECK(std::abs(b.mean().item<double>() - std::sqrt(s.alpha_bar(t)) * z0[0][j].item<double>()) < 3 * std::sqrt(var / n));
        }
    }
}

TEST_CASE("per-row noise does not depend on batch size") {
    const auto a = per_row_normal(3, {4, 2, 2}, 7);
    const auto b = per_row_normal(5, {4, 2, 2}, 7);
    CHECK(bit_equal(a, b.slice(0, 0, 3)));
}

TEST_CASE("autoencoder shapes and identity path") {
    torch::manual_seed(0);
    Autoencoder ae(AutoencoderConfig{4, 4, 8});
    const auto x = torch::rand({2, 3, 64, 64}) * 2 - 1;
    CHECK(ae->encode(x).sizes() == torch::IntArrayRef({2, 4, 16, 16}));
    CHECK(ae->decode(ae->encode(x)).sizes() == x.sizes());
    CHECK_THROWS(ae->encode(torch::zeros({2, 1, 64, 64})));
    CHECK_THROWS(ae->encode(torch::zeros({2, 3, 62, 64})));

    Autoencoder id(AutoencoderConfig{1, 4, 8});
    CHECK(bit_equal(id->decode(id->encode(x)), x));
}

TEST_CASE("caption embeddings are deterministic and injective") {
    torch::NoGradGuard ng;
    torch::manual_seed(0);
    CaptionEmbedder emb(32);
    std::vector<torch::Tensor> all;
    for (auto m : {Modality::WL, Modality::NBI})
        for (auto c : kAllCategories) all.push_back(emb->embed(conditioning::build_caption(m, c)));
    REQUIRE(all.size() == 14);
    for (std::size_t i = 0; i < all.size(); ++i)
        for (std::size_t j = i + 1; j < all.size(); ++j) CHECK_FALSE(torch::equal(all[i], all[j]));
    const auto polyp = conditioning::build_caption(Modality::WL, LesionCategory::Polyp);
    CHECK(bit_equal(emb->embed(polyp), emb->embed(polyp.text)));
    CHECK_FALSE(torch::equal(emb->embed(polyp), emb->embed(conditioning::build_caption(Modality::NBI, LesionCategory::Polyp))));
    CHECK_THROWS(emb->embed("an endoscopic image of a cat"));
}

TEST_CASE("loss sanity: clairvoyant and zero predictors") {
    const auto s = NoiseSchedule::linear();
    const auto z0 = seeded_normal({1000, 4, 16, 16}, 4);
    const auto b = make_batch(z0, torch::zeros({1000}, torch::kInt64), {}, s, 8);
    const auto clairvoyant = ldm_loss([](const torch::Tensor&, const torch::Tensor&, const LdmBatch& bb) { return bb.noise; }, b, s);
    CHECK(clairvoyant.item<double>() == 0.0);
    const auto zero = ldm_loss([](const torch::Tensor& zt, const torch::Tensor&, const LdmBatch&) { return torch::zeros_like(zt); }, b, s);
    CHECK(zero.item<double>() == doctest::Approx(4 * 16 * 16).epsilon(0.05));
    CHECK_THROWS(ldm_loss([](const torch::Tensor& zt, const torch::Tensor&, const LdmBatch&) {
        return torch::full_like(zt, std::nan(""));
    }, b, s));
}

TEST_CASE("fresh control adapter is an exact no-op") {
    auto m = LdmModel::create(small_config(), 21);
    torch::NoGradGuard ng;
    const auto z = seeded_normal({3, 4, 16, 16}, 1);
    const auto t = torch::tensor({1, 500, 1000}, torch::kInt64);
    const auto cemb = m.embedder->forward(torch::tensor({0, 5, 13}, torch::kInt64));
    const auto masks = pool_mask(toy_batch(3, 2).masks, 16, 16);
    const auto emb = m.denoiser->embed(t, cemb);
    const auto res = m.adapter->forward(z, masks, emb);
    for (const auto& r : res) CHECK(r.abs().max().item<double>() == 0.0);
    CHECK(bit_equal(m.denoiser->forward(z, t, cemb, &res), m.denoiser->forward(z, t, cemb)));

    m.adapter->init_from(*m.denoiser);
    const auto res2 = m.adapter->forward(z, masks, emb);
    CHECK(bit_equal(m.denoiser->forward(z, t, cemb, &res2), m.denoiser->forward(z, t, cemb)));

    auto b = make_batch(z, torch::tensor({0, 5, 13}, torch::kInt64), masks, m.schedule, 4);
    CHECK(ldm_loss(m, b, true).item<double>() == ldm_loss(m, b, false).item<double>());
}

TEST_CASE("zero epochs leaves parameters unchanged") {
    auto m = LdmModel::create(small_config(), 2);
    const auto b = toy_batch(8, 1);
    const auto before = snapshot(*m.autoencoder);
    train_autoencoder(m, b.images, quick(0));
    CHECK(same_parameters(before, snapshot(*m.autoencoder)));
    const auto z = encode_all(m, b.images);
    const auto d0 = snapshot(*m.denoiser), e0 = snapshot(*m.embedder);
    train_ldm(m, z, b.captions, quick(0));
    CHECK(same_parameters(d0, snapshot(*m.denoiser)));
    CHECK(same_parameters(e0, snapshot(*m.embedder)));
    CHECK_FALSE(m.denoiser_trained);
}

TEST_CASE("training is deterministic and control training touches only the adapter") {
    auto run = [] {
        auto m = LdmModel::create(small_config(), 31);
        const auto b = toy_batch(16, 3);
        train_autoencoder(m, b.images, quick(1));
        const auto z = encode_all(m, b.images);
        const auto r = train_ldm(m, z, b.captions, quick(2));
        return std::make_pair(r.final_val_loss, std::move(m));
    };
    auto [loss_a, a] = run();
    auto [loss_b, b] = run();
    CHECK(loss_a == loss_b);
    CHECK(same_parameters(snapshot(*a.denoiser), snapshot(*b.denoiser)));

    const auto tb = toy_batch(16, 3);
    const auto z = encode_all(a, tb.images);
    const auto den = snapshot(*a.denoiser), emb = snapshot(*a.embedder), ae = snapshot(*a.autoencoder);
    const auto ad = snapshot(*a.adapter);
    train_control(a, z, tb.captions, tb.masks, quick(1));
    CHECK(same_parameters(den, snapshot(*a.denoiser)));
    CHECK(same_parameters(emb, snapshot(*a.embedder)));
    CHECK(same_parameters(ae, snapshot(*a.autoencoder)));
    CHECK_FALSE(same_parameters(ad, snapshot(*a.adapter)));
    CHECK(a.adapter_trained);
}

TEST_CASE("control training needs a trained denoiser") {
    auto m = LdmModel::create(small_config(), 1);
    const auto b = toy_batch(4, 1);
    CHECK_THROWS(train_control(m, seeded_normal({4, 4, 16, 16}, 1), b.captions, b.masks, quick(1)));
}

TEST_CASE("ldm validation loss drops on the toy dataset within 30 epochs") {
    LdmConfig c;
    c.autoencoder.channels = 16;
    c.denoiser.channels = 32;
    c.denoiser.emb_dim = 64;
    auto m = LdmModel::create(c, 5);
    const auto b = toy_batch(200, 17);
    train_autoencoder(m, b.images, quick(5));
    const auto z = encode_all(m, b.images);
    auto tc = quick(30);
    tc.val_size = 32;
    const auto r = train_ldm(m, z, b.captions, tc);
    MESSAGE("initial " << r.initial_val_loss << " final " << r.final_val_loss);
    CHECK(r.final_val_loss < 0.9 * r.initial_val_loss);
    CHECK(r.epoch_loss.size() == 30);
}

TEST_CASE("sampler contracts") {
    auto m = trained_small_model();
    SamplerConfig sc;
    sc.steps = 4;
    sc.seed = 42;
    const auto caps = torch::tensor({0, 7}, torch::kInt64);
    const auto masks = toy_batch(2, 9).masks;
    const auto a = sample(m, caps, masks, sc);
    const auto b = sample(m, caps, masks, sc);
    CHECK(bit_equal(a, b));
    CHECK(a.sizes() == torch::IntArrayRef({2, 3, 64, 64}));
    CHECK(a.min().item<double>() >= -1.0);
    CHECK(a.max().item<double>() <= 1.0);
    sc.seed = 43;
    CHECK_FALSE(torch::equal(a, sample(m, caps, masks, sc)));

    // Sample i does not depend on the batch it is drawn in, up to kernel rounding.
    sc.seed = 42;
    CHECK(torch::allclose(sample(m, caps.slice(0, 0, 1), masks.slice(0, 0, 1), sc), a.slice(0, 0, 1), 1e-4, 1e-4));

    sc.guidance_scale = 2.0;
    CHECK(sample(m, caps, masks, sc).sizes() == a.sizes());
    CHECK_THROWS(sample(m, caps, torch::zeros({2, 1, 32, 32}), sc));
    sc.steps = 0;
    CHECK_THROWS(sc.validate());

    auto untrained = LdmModel::create(small_config(), 1);
    CHECK_THROWS(sample(untrained, caps, masks, SamplerConfig{}));
}

TEST_CASE("checkpoint round trip") {
    auto m = trained_small_model();
    const auto path = std::filesystem::temp_directory_path() / "endosynth_ckpt_test.pt";
    m.provenance = {{"stage", "test"}};
    m.save(path);
    auto l = LdmModel::load(path);
    CHECK(l.adapter_trained);
    CHECK(l.seed == m.seed);
    CHECK(l.provenance == m.provenance);
    CHECK(l.schedule == m.schedule);
    CHECK(l.autoencoder->latent_scale() == m.autoencoder->latent_scale());
    SamplerConfig sc;
    sc.steps = 3;
    const auto caps = torch::tensor({3}, torch::kInt64);
    const auto masks = toy_batch(1, 4).masks;
    CHECK(bit_equal(sample(m, caps, masks, sc), sample(l, caps, masks, sc)));
    std::filesystem::remove(path);
}
