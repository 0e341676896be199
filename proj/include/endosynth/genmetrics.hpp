#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "endosynth/image.hpp"

namespace endosynth::genmetrics {

struct FeatureSet {
    Eigen::MatrixXd features;  // N x D, one row per sample
    std::string extractor_id;

    Eigen::Index size() const { return features.rows(); }
    Eigen::Index dim() const { return features.cols(); }
    /// N < D + 1: the covariance estimate is rank deficient.
    bool rank_deficient() const { return features.rows() < features.cols() + 1; }
};

struct GaussianStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;  // unbiased (N - 1) estimate
};

GaussianStats gaussian_stats(const FeatureSet& fs);

/// Fréchet distance between two Gaussians: |mu_a - mu_b|^2 + Tr(A + B - 2 (A B)^{1/2}).
/// Eigenvalues of the symmetric sqrt(A) B sqrt(A) down to -1e-6 (relative to the
/// largest) are clamped to zero; anything more negative throws.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

/// FID between two feature sets. Requires equal D and N >= 2 on both sides.
double fid(const FeatureSet& a, const FeatureSet& b);

/// 1 - (fid_rs - fid_rr) / fid_rs. Throws when fid_rs <= 0 or fid_rr < 0.
double fid_ratio(double fid_rs, double fid_rr);

struct FidReport {
    double fid_rs = 0;
    double fid_rr = 0;
    double fid_ratio = 0;
    std::string extractor_id;
    bool rank_deficient = false;
};

struct ISReport {
    double mean = 0;
    double std = 0;
    int splits = 0;
};

/// Number of IS splits actually used: the request, lowered to max(1, N / K) when N < 10 K.
int effective_is_splits(std::size_t n, std::size_t k, int requested);

/// Inception Score over an N x K matrix of class probabilities. Each split s
/// contributes exp(mean_x KL(p(y|x) || p_s(y))); the report holds the mean and
/// population standard deviation across splits. Rows must sum to 1 (+-1e-6).
ISReport inception_score(const Eigen::MatrixXd& probs, int splits);

/// Seeded random projection of raw pixels (area-downsampled to 16x16) to dim features.
class PixelProjectionExtractor {
public:
    PixelProjectionExtractor(int dim, std::uint64_t seed);
    Eigen::VectorXd extract(const Image& img) const;
    FeatureSet extract_all(std::span<const Image> images) const;
    std::string id() const;

private:
    int dim_;
    std::uint64_t seed_;
    Eigen::MatrixXd projection_;  // dim x (16*16*3)
};

nlohmann::json to_json(const FidReport& r);
nlohmann::json to_json(const ISReport& r);

} // namespace endosynth::genmetrics
