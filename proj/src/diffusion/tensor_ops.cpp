#include "endosynth/diffusion/tensor_ops.hpp"

#include <cmath>
#include <cstring>

#include "endosynth/error.hpp"
#include "endosynth/util/rng.hpp"

namespace endosynth::diffusion {

void configure_torch(int threads) {
    torch::set_num_threads(threads);
    at::globalContext().setDeterministicAlgorithms(true, false);
}

torch::Tensor to_tensor(const Image& img) {
    auto t = torch::from_blob(const_cast<float*>(img.data.data()), {img.height, img.width, 3}, torch::kFloat32);
    return t.permute({2, 0, 1}).contiguous().clone();
}

torch::Tensor to_batch(std::span<const Image> images) {
    if (images.empty()) throw Error("to_batch: no images");
    std::vector<torch::Tensor> ts;
    ts.reserve(images.size());
    for (const auto& im : images) {
        if (im.height != images[0].height || im.width != images[0].width) throw Error("to_batch: image sizes differ");
        ts.push_back(to_tensor(im));
    }
    return torch::stack(ts);
}

Image to_image(const torch::Tensor& chw) {
    if (chw.dim() != 3 || chw.size(0) != 3) throw Error("to_image: expected a 3xHxW tensor");
    const auto hwc = chw.detach().to(torch::kFloat32).clamp(-1, 1).permute({1, 2, 0}).contiguous();
    Image img(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)));
    std::memcpy(img.data.data(), hwc.data_ptr<float>(), img.data.size() * sizeof(float));
    return img;
}

torch::Tensor mask_tensor(const conditioning::ControlMask& mask) {
    const auto& r = mask.pixels;
    auto t = torch::empty({1, r.height, r.width}, torch::kFloat32);
    auto* p = t.data_ptr<float>();
    for (int y = 0; y < r.height; ++y)
        for (int x = 0; x < r.width; ++x) p[y * r.width + x] = r.at(y, x, 0) ? 1.0f : 0.0f;
    return t;
}

torch::Tensor mask_batch(std::span<const conditioning::ControlMask> masks) {
    if (masks.empty()) throw Error("mask_batch: no masks");
    std::vector<torch::Tensor> ts;
    for (const auto& m : masks) ts.push_back(mask_tensor(m));
    return torch::stack(ts);
}

torch::Tensor pool_mask(const torch::Tensor& masks, int h, int w) {
    if (masks.dim() != 4 || masks.size(1) != 1) throw Error("pool_mask: expected Nx1xHxW masks");
    if (masks.size(2) == h && masks.size(3) == w) return masks;
    return std::get<0>(torch::adaptive_max_pool2d(masks, {h, w}));
}

torch::Tensor seeded_normal(torch::IntArrayRef shape, std::uint64_t seed) {
    auto gen = at::detail::createCPUGenerator(seed);
    return torch::randn(shape, gen, torch::kFloat32);
}

torch::Tensor per_row_normal(std::int64_t n, torch::IntArrayRef row_shape, std::uint64_t seed) {
    std::vector<torch::Tensor> rows;
    rows.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) rows.push_back(seeded_normal(row_shape, util::derive_seed(seed, "row", i)));
    return torch::stack(rows);
}

torch::Tensor alpha_bar_tensor(const NoiseSchedule& schedule) {
    std::vector<double> ab(schedule.steps() + 1);
    for (int t = 0; t <= schedule.steps(); ++t) ab[t] = schedule.alpha_bar(t);
    return torch::tensor(ab, torch::kFloat64);
}

torch::Tensor forward_diffuse(const torch::Tensor& z0, int t, const NoiseSchedule& schedule, const torch::Tensor& noise) {
    if (t < 0 || t > schedule.steps()) throw Error("forward_diffuse: t=" + std::to_string(t) + " outside 0.." +
                                                   std::to_string(schedule.steps()));
    if (!z0.sizes().equals(noise.sizes())) throw Error("forward_diffuse: noise shape differs from z0");
    if (t == 0) return z0.clone();
    const double ab = schedule.alpha_bar(t);
    return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * noise;
}

torch::Tensor forward_diffuse(const torch::Tensor& z0, const torch::Tensor& t, const NoiseSchedule& schedule,
                              const torch::Tensor& noise) {
    if (!z0.sizes().equals(noise.sizes())) throw Error("forward_diffuse: noise shape differs from z0");
    if (t.dim() != 1 || t.size(0) != z0.size(0)) throw Error("forward_diffuse: need one timestep per sample");
    if (t.min().item<std::int64_t>() < 0 || t.max().item<std::int64_t>() > schedule.steps())
        throw Error("forward_diffuse: timestep outside 0.." + std::to_string(schedule.steps()));
    std::vector<std::int64_t> view(z0.dim(), 1);
    view[0] = z0.size(0);
    const auto ab = alpha_bar_tensor(schedule).index_select(0, t.to(torch::kInt64)).to(z0.scalar_type()).view(view);
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * noise;
}

} // namespace endosynth::diffusion
