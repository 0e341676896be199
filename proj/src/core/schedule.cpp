#include "endosynth/diffusion/schedule.hpp"

#include <cmath>

#include "endosynth/error.hpp"

namespace endosynth::diffusion {

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
    if (betas_.empty()) throw Error("noise schedule needs at least one step");
    alpha_bar_.assign(betas_.size() + 1, 1.0);
    for (std::size_t t = 1; t <= betas_.size(); ++t) {
        const double b = betas_[t - 1];
        if (!(b > 0 && b < 1)) throw Error("noise schedule: beta must lie in (0,1)");
        alpha_bar_[t] = alpha_bar_[t - 1] * (1.0 - b);
        if (!(alpha_bar_[t] < alpha_bar_[t - 1])) throw Error("noise schedule: alpha_bar must strictly decrease");
    }
    if (!(alpha_bar_.back() < 0.02)) throw Error("noise schedule: alpha_bar_T must be below 0.02");
}

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw Error("noise schedule needs at least one step");
    std::vector<double> b(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i) {
        b[i] = steps == 1 ? beta_end : beta_start + (beta_end - beta_start) * i / (steps - 1);
    }
    return NoiseSchedule(std::move(b));
}

double NoiseSchedule::beta(int t) const {
    if (t < 1 || t > steps()) throw Error("timestep out of range: " + std::to_string(t));
    return betas_[t - 1];
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t < 0 || t > steps()) throw Error("timestep out of range: " + std::to_string(t));
    return alpha_bar_[t];
}

std::vector<int> NoiseSchedule::sampling_timesteps(int n) const {
    if (n < 1) throw Error("sampler needs at least one step");
    n = std::min(n, steps());
    std::vector<int> ts;
    for (int k = 0; k < n; ++k) {
        const double frac = n == 1 ? 0.0 : static_cast<double>(k) / (n - 1);
        ts.push_back(static_cast<int>(std::lround(steps() - frac * (steps() - 1))));
    }
    return ts;
}

nlohmann::json NoiseSchedule::to_json() const { return {{"kind", "explicit"}, {"betas", betas_}}; }

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) { return NoiseSchedule(j.at("betas").get<std::vector<double>>()); }

} // namespace endosynth::diffusion
