#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "endosynth/conditioning.hpp"
#include "endosynth/diffusion/schedule.hpp"
#include "endosynth/image.hpp"

namespace endosynth::diffusion {

/// Single-threaded, deterministic CPU execution.
void configure_torch(int threads = 1);

/// HWC image -> 3xHxW float tensor, and back (values clamped to [-1,1]).
torch::Tensor to_tensor(const Image& img);
torch::Tensor to_batch(std::span<const Image> images);
Image to_image(const torch::Tensor& chw);

/// Control mask -> 1xHxW tensor with values in {0,1}.
torch::Tensor mask_tensor(const conditioning::ControlMask& mask);
torch::Tensor mask_batch(std::span<const conditioning::ControlMask> masks);

/// Area-max pooling of Nx1xHxW masks to Nx1xhxw: a cell is set when any pixel in it is.
torch::Tensor pool_mask(const torch::Tensor& masks, int h, int w);

/// Standard normal draws from a generator seeded with `seed`.
torch::Tensor seeded_normal(torch::IntArrayRef shape, std::uint64_t seed);
/// Row i of the result is drawn from derive_seed(seed, "row", i), so rows do
/// not depend on how many others are drawn alongside them.
torch::Tensor per_row_normal(std::int64_t n, torch::IntArrayRef row_shape, std::uint64_t seed);

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) noise. Throws when t is outside
/// 0..T or the shapes differ.
torch::Tensor forward_diffuse(const torch::Tensor& z0, int t, const NoiseSchedule& schedule, const torch::Tensor& noise);
/// Per-sample timesteps (int64 tensor of length N).
torch::Tensor forward_diffuse(const torch::Tensor& z0, const torch::Tensor& t, const NoiseSchedule& schedule,
                              const torch::Tensor& noise);

/// alpha_bar_0..alpha_bar_T as a float64 tensor.
torch::Tensor alpha_bar_tensor(const NoiseSchedule& schedule);

} // namespace endosynth::diffusion
