#pragma once

#include <vector>

#include <nlohmann/json.hpp>

namespace endosynth::diffusion {

/// Variance schedule beta_1..beta_T with cumulative products
/// alpha_bar_t = prod_{s<=t} (1 - beta_s) and alpha_bar_0 = 1.
class NoiseSchedule {
public:
    /// Validates 0 < beta < 1, strictly decreasing alpha_bar and alpha_bar_T < 0.02.
    explicit NoiseSchedule(std::vector<double> betas);

    static NoiseSchedule linear(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);

    int steps() const { return static_cast<int>(betas_.size()); }
    /// t in 1..T
    double beta(int t) const;
    /// t in 0..T
    double alpha_bar(int t) const;
    const std::vector<double>& betas() const { return betas_; }

    /// n timesteps evenly spaced from T down to 1 (strictly decreasing).
    std::vector<int> sampling_timesteps(int n) const;

    nlohmann::json to_json() const;
    static NoiseSchedule from_json(const nlohmann::json& j);

    friend bool operator==(const NoiseSchedule&, const NoiseSchedule&) = default;

private:
    std::vector<double> betas_;
    std::vector<double> alpha_bar_;  // index 0..T
};

} // namespace endosynth::diffusion
