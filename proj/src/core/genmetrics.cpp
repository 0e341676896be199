#include "endosynth/genmetrics.hpp"

#include <cmath>
#include <random>

#include <Eigen/Eigenvalues>

#include "endosynth/error.hpp"
#include "endosynth/util/rng.hpp"

namespace endosynth::genmetrics {

namespace {

constexpr double kSqrtTolerance = 1e-6;

void check_finite(const FeatureSet& fs) {
    if (!fs.features.allFinite()) throw Error("feature set '" + fs.extractor_id + "' contains non-finite values");
}

// Symmetric PSD square root; small negative eigenvalues are treated as round-off.
Eigen::MatrixXd sym_sqrt(const Eigen::MatrixXd& m, const char* what) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    Eigen::VectorXd ev = es.eigenvalues();
    const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev[i] < -kSqrtTolerance * scale) {
            throw Error(std::string("matrix square root: ") + what + " is not positive semi-definite");
        }
        ev[i] = std::sqrt(std::max(0.0, ev[i]));
    }
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

} // namespace

GaussianStats gaussian_stats(const FeatureSet& fs) {
    if (fs.size() < 2) throw Error("need at least 2 samples for covariance");
    check_finite(fs);
    GaussianStats s;
    s.mean = fs.features.colwise().mean().transpose();
    const Eigen::MatrixXd centered = fs.features.rowwise() - s.mean.transpose();
    s.cov = (centered.transpose() * centered) / static_cast<double>(fs.size() - 1);
    return s;
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
    if (a.mean.size() != b.mean.size()) throw Error("frechet_distance: dimension mismatch");
    const Eigen::MatrixXd sa = sym_sqrt(a.cov, "covariance A");
    // Tr((A B)^{1/2}) == Tr((A^{1/2} B A^{1/2})^{1/2}), and the latter is symmetric.
    const Eigen::MatrixXd inner = sa * b.cov * sa;
    const double tr_covmean = sym_sqrt(inner, "sqrt(A) B sqrt(A)").trace();
    const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_covmean;
    // Tiny negatives are round-off of an exact zero.
    return std::max(0.0, d);
}

double fid(const FeatureSet& a, const FeatureSet& b) {
    if (a.dim() != b.dim()) throw Error("fid: feature dimensions differ");
    if (a.size() < 2 || b.size() < 2) throw Error("fid: each set needs at least 2 samples");
    return frechet_distance(gaussian_stats(a), gaussian_stats(b));
}

double fid_ratio(double fid_rs, double fid_rr) {
    if (!(fid_rs > 0)) throw Error("fid_ratio undefined for fid_rs <= 0");
    if (fid_rr < 0) throw Error("fid_ratio: fid_rr must be non-negative");
    return 1.0 - (fid_rs - fid_rr) / fid_rs;
}

int effective_is_splits(std::size_t n, std::size_t k, int requested) {
    if (requested < 1) throw Error("inception_score: splits must be >= 1");
    int s = requested;
    if (n < 10 * k) s = std::min<int>(s, static_cast<int>(std::max<std::size_t>(1, n / std::max<std::size_t>(k, 1))));
    return std::min<int>(s, static_cast<int>(std::max<std::size_t>(n, 1)));
}

ISReport inception_score(const Eigen::MatrixXd& probs, int splits) {
    const auto n = probs.rows();
    const auto k = probs.cols();
    if (n == 0 || k == 0) throw Error("inception_score: empty probability matrix");
    if (splits < 1 || splits > n) throw Error("inception_score: need 1 <= splits <= N");
    for (Eigen::Index i = 0; i < n; ++i) {
        const double sum = probs.row(i).sum();
        if (!probs.row(i).allFinite() || probs.row(i).minCoeff() < 0 || std::abs(sum - 1.0) > 1e-6) {
            throw Error("inception_score: row " + std::to_string(i) + " is not a probability vector");
        }
    }

    std::vector<double> scores;
    for (int s = 0; s < splits; ++s) {
        const Eigen::Index lo = s * n / splits, hi = (s + 1) * n / splits;
        const Eigen::MatrixXd part = probs.middleRows(lo, hi - lo);
        const Eigen::RowVectorXd marginal = part.colwise().mean();
        double kl_sum = 0;
        for (Eigen::Index i = 0; i < part.rows(); ++i) {
            for (Eigen::Index j = 0; j < k; ++j) {
                const double p = part(i, j);
                if (p > 0) kl_sum += p * (std::log(p) - std::log(marginal[j]));
            }
        }
        scores.push_back(std::exp(kl_sum / static_cast<double>(part.rows())));
    }
    double mean = 0;
    for (double v : scores) mean += v;
    mean /= scores.size();
    double var = 0;
    for (double v : scores) var += (v - mean) * (v - mean);
    var /= scores.size();
    return {mean, std::sqrt(var), splits};
}

PixelProjectionExtractor::PixelProjectionExtractor(int dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
    if (dim < 1) throw Error("projection dimension must be >= 1");
    constexpr int kIn = 16 * 16 * 3;
    std::mt19937_64 rng(util::derive_seed(seed, "pixel-projection"));
    std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(kIn)));
    projection_.resize(dim, kIn);
    for (int i = 0; i < dim; ++i) {
        for (int j = 0; j < kIn; ++j) projection_(i, j) = nd(rng);
    }
}

Eigen::VectorXd PixelProjectionExtractor::extract(const Image& img) const {
    if (img.height % 16 != 0 || img.width % 16 != 0) throw Error("pixel projection needs sides divisible by 16");
    const int fy = img.height / 16, fx = img.width / 16;
    Eigen::VectorXd pooled = Eigen::VectorXd::Zero(16 * 16 * 3);
    for (int r = 0; r < img.height; ++r) {
        for (int c = 0; c < img.width; ++c) {
            for (int ch = 0; ch < 3; ++ch) pooled[((r / fy) * 16 + c / fx) * 3 + ch] += img.at(r, c, ch);
        }
    }
    pooled /= static_cast<double>(fy * fx);
    return projection_ * pooled;
}

FeatureSet PixelProjectionExtractor::extract_all(std::span<const Image> images) const {
    FeatureSet fs;
    fs.extractor_id = id();
    fs.features.resize(static_cast<Eigen::Index>(images.size()), dim_);
    for (std::size_t i = 0; i < images.size(); ++i) fs.features.row(static_cast<Eigen::Index>(i)) = extract(images[i]).transpose();
    return fs;
}

std::string PixelProjectionExtractor::id() const {
    return "pixel-projection-d" + std::to_string(dim_) + "-s" + std::to_string(seed_);
}

nlohmann::json to_json(const FidReport& r) {
    return {{"fid_rs", r.fid_rs},
            {"fid_rr", r.fid_rr},
            {"fid_ratio", r.fid_ratio},
            {"extractor_id", r.extractor_id},
            {"rank_deficient", r.rank_deficient}};
}

nlohmann::json to_json(const ISReport& r) { return {{"mean", r.mean}, {"std", r.std}, {"splits", r.splits}}; }

} // namespace endosynth::genmetrics
