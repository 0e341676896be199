// Acceptance runner: one PASS/FAIL line per primary criterion.
//
//   acceptance --workdir DIR [--seeds 1,2,3] [--skip-toy]
//
// Toy experiment directories under DIR are reused when their stage markers
// match the config, so a second invocation only re-renders reports.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "endosynth/detection/experiments.hpp"
#include "endosynth/diffusion/models.hpp"
#include "endosynth/diffusion/tensor_ops.hpp"
#include "endosynth/diffusion/trainer.hpp"
#include "endosynth/pipeline/pipeline.hpp"
#include "endosynth/selection.hpp"
#include "endosynth/util/io.hpp"
#include "support/oracles.hpp"

using namespace endosynth;
using namespace endosynth::oracles;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Tolerances.
constexpr double kFidIdenticalTol = 1e-6;
constexpr double kFidOracleRel = 0.05;
constexpr double kFidSymmetryTol = 1e-9;
constexpr double kFidSeconds = 10;
constexpr double kRatioTol = 1e-12;
constexpr double kIsTol = 1e-9;
constexpr double kApSeconds = 30;
constexpr double kAucTol = 1e-12;
constexpr double kVarianceTol = 1e-9;
constexpr double kSigmas = 3;
constexpr double kChainSeconds = 60;
constexpr double kZeroLossRel = 0.05;
constexpr double kLocalizationRatio = 2.0;
constexpr int kSeedsRequired = 2;

int failures = 0;

void report(const std::string& name, bool ok, const std::string& detail) {
    std::cout << (ok ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
    if (!ok) ++failures;
}

std::string fmt(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- metric oracles

void check_fid() {
    const auto t0 = std::chrono::steady_clock::now();
    const int d = 6, n = 100000;
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd;
    auto random_cov = [&] {
        Eigen::MatrixXd a(d, d);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) a(i, j) = nd(rng);
        return Eigen::MatrixXd(a * a.transpose() / d + 0.5 * Eigen::MatrixXd::Identity(d, d));
    };
    Eigen::VectorXd ma(d), mb(d);
    for (int i = 0; i < d; ++i) ma[i] = nd(rng), mb[i] = ma[i] + 0.5 * nd(rng);
    const auto ca = random_cov(), cb = random_cov();
    const auto a = gaussian_sample(ma, ca, n, 11), b = gaussian_sample(mb, cb, n, 12);
    const double got = genmetrics::fid(a, b), want = analytic_frechet(ma, ca, mb, cb);
    const double ab_ba = std::abs(got - genmetrics::fid(b, a));
    const double same = genmetrics::fid(a, a);
    const double secs = seconds_since(t0);
    report("fid.identical", same <= kFidIdenticalTol, "FID(a,a)=" + fmt(same));
    report("fid.gaussian_oracle", std::abs(got - want) <= kFidOracleRel * want,
           "N=1e5 d=6 fid=" + fmt(got, 6) + " closed-form=" + fmt(want, 6));
    report("fid.symmetry", ab_ba <= kFidSymmetryTol, "|FID(a,b)-FID(b,a)|=" + fmt(ab_ba));
    report("fid.runtime", secs < kFidSeconds, fmt(secs, 3) + " s");
}

void check_fid_ratio() {
    const double r = genmetrics::fid_ratio(10.0, 8.36);
    const double eq = genmetrics::fid_ratio(7.5, 7.5);
    const double zero = genmetrics::fid_ratio(10.0, 0.0);
    report("fid_ratio.fixed_points",
           std::abs(r - 0.836) <= kRatioTol && std::abs(eq - 1.0) <= kRatioTol && std::abs(zero) <= kRatioTol,
           "(10,8.36)->" + fmt(r, 12) + " equal->" + fmt(eq) + " rr=0->" + fmt(zero));
}

void check_is() {
    const int k = 7;
    const Eigen::MatrixXd uniform = Eigen::MatrixXd::Constant(70, k, 1.0 / k);
    const double u = genmetrics::inception_score(uniform, 1).mean;
    Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(70, k);
    for (int i = 0; i < 70; ++i) onehot(i, i % k) = 1;
    const double oh = genmetrics::inception_score(onehot, 1).mean;
    double worst = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const auto p = random_probs(60, k, 100 + trial);
        const double single = genmetrics::inception_score(p, 1).mean;
        worst = std::max(worst, std::abs(single - is_oracle_split(p, 0, 60)));
        const auto two = genmetrics::inception_score(p, 2);
        const double m = (is_oracle_split(p, 0, 30) + is_oracle_split(p, 30, 60)) / 2;
        worst = std::max(worst, std::abs(two.mean - m));
    }
    report("is.oracles", std::abs(u - 1) <= kIsTol && std::abs(oh - k) <= kIsTol && worst <= kIsTol,
           "uniform=" + fmt(u, 12) + " one-hot=" + fmt(oh, 12) + " max|IS-oracle|=" + fmt(worst));
}

void check_ap() {
    const auto t0 = std::chrono::steady_clock::now();
    util::Rng rng(99);
    int mismatches = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const auto [preds, gts] = random_instance(rng);
        if (detection::evaluate(preds, gts).ap50 != brute_force(preds, gts).ap) ++mismatches;
    }
    const double secs = seconds_since(t0);
    report("ap.brute_force", mismatches == 0 && secs < kApSeconds,
           std::to_string(mismatches) + "/200 mismatches, " + fmt(secs, 3) + " s");
}

void check_likert() {
    const std::array<double, 6> want{0.05, 0.23, 0.41, 0.50, 0.77, 0.95};
    bool values = true;
    for (std::size_t i = 0; i < 6; ++i) values = values && study::likert_to_prob(study::kLikertLevels[i]) == want[i];

    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> lv(0, 5);
    double worst = 0;
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<study::LikertVote> vs;
        for (int i = 0; i < 20; ++i)
            vs.push_back({"r", "i" + std::to_string(i), study::likert_from_index(lv(rng)),
                          i < 10 ? study::Truth::Real : study::Truth::Synthetic, ""});
        worst = std::max(worst, std::abs(study::rater_auc(vs) - pairs_auc(vs, study::likert_to_prob)));
    }
    std::vector<study::LikertVote> perfect, tied;
    for (int i = 0; i < 10; ++i) {
        const auto truth = i < 5 ? study::Truth::Real : study::Truth::Synthetic;
        perfect.push_back({"p", "i" + std::to_string(i),
                           truth == study::Truth::Real ? study::Likert::StronglyAgree : study::Likert::StronglyDisagree,
                           truth, ""});
        tied.push_back({"t", "i" + std::to_string(i), study::Likert::Agree, truth, ""});
    }
    const double ap = study::rater_auc(perfect), at = study::rater_auc(tied);
    report("likert.values", values, "six levels map to 0.05..0.95");
    report("likert.auc", worst <= kAucTol && ap == 1.0 && at == 0.5,
           "max|AUC-oracle|=" + fmt(worst) + " perfect=" + fmt(ap) + " tied=" + fmt(at));
}

void check_ue() {
    const double v = selection::variance3(1.0, 0.0, 0.5);
    std::vector<selection::UncertaintyRecord> recs(727);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0, 1);
    for (std::size_t i = 0; i < recs.size(); ++i) {
        recs[i].image_id = "img" + std::to_string(i);
        for (auto& c : recs[i].confidence) c = u(rng);
        recs[i].variance = selection::variance3(recs[i].confidence[0], recs[i].confidence[1], recs[i].confidence[2]);
    }
    const auto count = selection::select_top_uncertain(recs, 0.10).selected_count;

    int bad = 0;
    std::uniform_int_distribution<int> size(1, 60), level(0, 4);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<selection::UncertaintyRecord> ledger(static_cast<std::size_t>(size(rng)));
        for (std::size_t i = 0; i < ledger.size(); ++i) {
            ledger[i].image_id = "id" + std::to_string(i);
            for (auto& c : ledger[i].confidence) c = level(rng) / 4.0;  // coarse values produce ties
            ledger[i].variance = selection::variance3(ledger[i].confidence[0], ledger[i].confidence[1], ledger[i].confidence[2]);
        }
        const auto a = selection::select_top_uncertain(ledger, 0.10);
        auto shuffled = ledger;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        const auto b = selection::select_top_uncertain(shuffled, 0.10);
        bool ok = a.selected_count == static_cast<std::size_t>(std::ceil(0.10 * ledger.size())) &&
                  a.selected_count == b.selected_count;
        for (std::size_t i = 0; ok && i < a.ledger.size(); ++i) ok = a.ledger[i].image_id == b.ledger[i].image_id;
        double min_sel = 1e9, max_rest = -1;
        for (std::size_t i = 0; i < a.ledger.size(); ++i) {
            if (i < a.selected_count)
                min_sel = std::min(min_sel, a.ledger[i].variance);
            else
                max_rest = std::max(max_rest, a.ledger[i].variance);
        }
        if (!ok || min_sel < max_rest) ++bad;
    }
    report("ue.selection", std::abs(v - 1.0 / 6) <= kVarianceTol && count == 73 && bad == 0,
           "var(1,0,0.5)=" + fmt(v, 12) + " top10%(727)=" + std::to_string(count) + " ledger violations " +
               std::to_string(bad) + "/1000");
}

// ---------------------------------------------------------------- diffusion

void check_forward_diffuse() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto s = diffusion::NoiseSchedule::linear();
    constexpr std::int64_t n = 10000;
    const auto z0 = torch::tensor({-1.5, -0.3, 0.0, 0.8, 2.0}, torch::kFloat64).unsqueeze(0).expand({n, 5}).contiguous();
    int violations = 0, checks = 0;
    for (int t : {1, 10, 100, 500, 1000}) {
        auto chain = z0.clone();
        for (int k = 1; k <= t; ++k) {
            const auto eps = diffusion::seeded_normal({n, 5}, util::derive_seed(7, "chain", static_cast<std::uint64_t>(t * 10000 + k)))
                                 .to(torch::kFloat64);
            chain = std::sqrt(1.0 - s.beta(k)) * chain + std::sqrt(s.beta(k)) * eps;
        }
        const auto closed = diffusion::forward_diffuse(z0, t, s, diffusion::seeded_normal({n, 5}, 500 + t).to(torch::kFloat64));
        const double var = 1.0 - s.alpha_bar(t);
        for (int j = 0; j < 5; ++j) {
            const auto a = chain.select(1, j), b = closed.select(1, j);
            checks += 2;
            if (std::abs(a.mean().item<double>() - b.mean().item<double>()) > kSigmas * std::sqrt(2.0 * var / n)) ++violations;
            if (std::abs(a.var().item<double>() - b.var().item<double>()) > kSigmas * var * std::sqrt(4.0 / (n - 1))) ++violations;
        }
    }
    const auto noise = diffusion::seeded_normal({n, 5}, 1).to(torch::kFloat64);
    const bool identity = torch::equal(diffusion::forward_diffuse(z0, 0, s, noise), z0);
    const double secs = seconds_since(t0);
    report("diffusion.forward_marginal", violations == 0 && identity && secs < kChainSeconds,
           std::to_string(violations) + "/" + std::to_string(checks) + " moments outside 3 sigma, t=0 identity " +
               (identity ? "exact" : "broken") + ", " + fmt(secs, 3) + " s");
}

void check_zero_adapter() {
    bool identical = true;
    for (std::uint64_t seed : {1, 2, 3}) {
        diffusion::LdmConfig cfg;
        cfg.denoiser.channels = 32;
        cfg.denoiser.emb_dim = 64;
        auto m = diffusion::LdmModel::create(cfg, seed);
        torch::NoGradGuard ng;
        const auto z = diffusion::seeded_normal({4, 4, 16, 16}, seed);
        const auto t = torch::tensor({1, 250, 600, 1000}, torch::kInt64);
        const auto cemb = m.embedder->forward(torch::tensor({0, 3, 9, 14}, torch::kInt64));
        const auto mask = (diffusion::seeded_normal({4, 1, 16, 16}, seed + 10) > 0).to(torch::kFloat32);
        const auto res = m.adapter->forward(z, mask, m.denoiser->embed(t, cemb));
        identical = identical && torch::equal(m.denoiser->forward(z, t, cemb, &res), m.denoiser->forward(z, t, cemb));
        m.adapter->init_from(*m.denoiser);
        const auto res2 = m.adapter->forward(z, mask, m.denoiser->embed(t, cemb));
        identical = identical && torch::equal(m.denoiser->forward(z, t, cemb, &res2), m.denoiser->forward(z, t, cemb));
    }
    report("diffusion.zero_init_adapter", identical, identical ? "bit-identical on 3 seeds" : "outputs differ");
}

void check_loss_sanity() {
    const auto s = diffusion::NoiseSchedule::linear();
    const auto z0 = diffusion::seeded_normal({1000, 4, 16, 16}, 4);
    const auto b = diffusion::make_batch(z0, torch::zeros({1000}, torch::kInt64), {}, s, 8);
    const double clair =
        diffusion::ldm_loss([](const torch::Tensor&, const torch::Tensor&, const diffusion::LdmBatch& bb) { return bb.noise; }, b, s)
            .item<double>();
    const double zero =
        diffusion::ldm_loss([](const torch::Tensor& zt, const torch::Tensor&, const diffusion::LdmBatch&) { return torch::zeros_like(zt); },
                            b, s)
            .item<double>();
    const double dims = 4 * 16 * 16;
    report("diffusion.loss_sanity", clair == 0.0 && std::abs(zero - dims) <= kZeroLossRel * dims,
           "clairvoyant=" + fmt(clair) + " zero-predictor=" + fmt(zero, 6) + " (dims " + fmt(dims) + ")");
}

// ---------------------------------------------------------------- toy end to end

struct SeedOutcome {
    std::uint64_t seed = 0;
    json report;
    fs::path dir;
};

void check_toy(const fs::path& workdir, const std::vector<std::uint64_t>& seeds) {
    const auto base = pipeline::load_config(fs::path(ENDOSYNTH_SOURCE_DIR) / "configs" / "toy.json");
    std::vector<SeedOutcome> runs;
    for (auto seed : seeds) {
        auto cfg = base;
        auto j = cfg.to_json();
        j["seed"] = seed;
        cfg = pipeline::parse_config(j);
        cfg.output_dir = workdir / ("toy_seed" + std::to_string(seed));
        const auto t0 = std::chrono::steady_clock::now();
        pipeline::RunOptions o;
        o.log = [seed](const std::string& m) { std::cerr << "[toy seed " << seed << "] " << m << "\n"; };
        try {
            pipeline::run_pipeline(cfg, o);
        } catch (const std::exception& e) {
            report("toy.seed" + std::to_string(seed), false, e.what());
            continue;
        }
        std::cerr << "[toy seed " << seed << "] done in " << fmt(seconds_since(t0), 4) << " s\n";
        runs.push_back({seed, json::parse(util::read_text(cfg.output_dir / "report/report.json")), cfg.output_dir});
    }
    if (runs.empty()) return;

    // (a) localization.
    std::string detail;
    int loc_ok = 0;
    for (const auto& r : runs) {
        const auto& loc = r.report.at("genmetrics").at("localization");
        const double ratio = loc.at("ratio");
        loc_ok += ratio >= kLocalizationRatio;
        detail += " seed" + std::to_string(r.seed) + ":in=" + fmt(loc.at("inside_rate")) + ",out=" + fmt(loc.at("outside_rate")) +
                  ",ratio=" + fmt(ratio, 3) + "(n=" + std::to_string(loc.at("samples").get<int>()) + ")";
    }
    report("toy.a_localization", loc_ok == static_cast<int>(runs.size()), "ratio >= 2 in every seed;" + detail);

    // (b) +10% synthetic vs real-only on the external split.
    int b_ok = 0;
    detail.clear();
    for (const auto& r : runs) {
        const double real = r.report.at("real").at("external").at("ap50");
        double mix = -1;
        for (const auto& e : r.report.at("sweep"))
            if (std::abs(e.at("fraction").get<double>() - 0.10) < 1e-9) mix = e.at("metrics").at("external").at("ap50");
        b_ok += mix > real;
        detail += " seed" + std::to_string(r.seed) + ":real=" + fmt(real) + ",+10%=" + fmt(mix);
    }
    report("toy.b_synthetic_gain", b_ok >= kSeedsRequired,
           std::to_string(b_ok) + "/" + std::to_string(runs.size()) + " seeds improve external AP50;" + detail);

    // (c) UE-selected 10% vs mean of the random folds.
    int c_ok = 0;
    detail.clear();
    for (const auto& r : runs) {
        const double ue = r.report.at("ue").at("external").at("ap50");
        const double folds = r.report.at("folds").at("mean").at(5);
        c_ok += ue >= folds;
        detail += " seed" + std::to_string(r.seed) + ":ue=" + fmt(ue) + ",folds=" + fmt(folds);
    }
    report("toy.c_uncertainty_selection", c_ok >= kSeedsRequired,
           std::to_string(c_ok) + "/" + std::to_string(runs.size()) + " seeds with UE >= random-fold mean (external AP50);" +
               detail);

    // Report formats, from the first seed's bundle.
    std::ifstream in(runs.front().dir / "report/table1.csv");
    std::vector<std::string> lines;
    for (std::string l; std::getline(in, l);) lines.push_back(l);
    const std::vector<std::string> labels{"real", "fold1", "fold2", "fold3", "mean±std", "ue"};
    bool layout = lines.size() == 7 && lines[0] ==
                                           "train_dataset,internal_precision,internal_recall,internal_ap50,"
                                           "external_precision,external_recall,external_ap50";
    for (std::size_t i = 0; layout && i < labels.size(); ++i) {
        layout = lines[i + 1].rfind(labels[i] + ",", 0) == 0 && std::count(lines[i + 1].begin(), lines[i + 1].end(), ',') == 6;
        if (labels[i] == "mean±std") {
            // every metric cell is "m±s"
            std::stringstream cells(lines[i + 1].substr(labels[i].size() + 1));
            for (std::string cell; layout && std::getline(cells, cell, ',');) layout = cell.find("±") != std::string::npos;
        }
    }
    const bool deltas = detection::format_ap_delta(0.888, 0.798) == "+9.0%" && detection::format_ap_delta(0.580, 0.359) == "+22.1%" &&
                        detection::format_ap_delta(0.880, 0.798) == "+8.2%" && detection::format_ap_delta(0.519, 0.359) == "+16.0%";
    const std::string ue_delta = runs.front().report.at("ue").at("delta_vs_real").at("external");
    report("report.formats", layout && deltas,
           std::string("table1 rows {real,fold1-3,mean±std,ue} x 6 metric columns ") + (layout ? "ok" : "malformed") +
               ", delta convention " + (deltas ? "+9.0%/+22.1% reproduced" : "wrong") + ", toy UE external delta " + ue_delta);
}

void check_reproducibility(const fs::path& workdir) {
    auto cfg = pipeline::load_config(fs::path(ENDOSYNTH_SOURCE_DIR) / "configs" / "smoke.json");
    std::array<std::string, 2> reports;
    for (int i = 0; i < 2; ++i) {
        cfg.output_dir = workdir / ("repro_" + std::to_string(i));
        fs::remove_all(cfg.output_dir);
        pipeline::run_pipeline(cfg);
        reports[i] = util::read_text(cfg.output_dir / "report/report.json");
    }
    report("pipeline.reproducible", reports[0] == reports[1],
           "two fresh run-all invocations, report.json " + std::string(reports[0] == reports[1] ? "byte-identical" : "differs"));
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::string workdir = "acceptance_work", seeds_arg = "1,2,3";
    bool skip_toy = false;
    app.add_option("--workdir", workdir);
    app.add_option("--seeds", seeds_arg);
    app.add_flag("--skip-toy", skip_toy, "Skip the three-seed toy experiments");
    CLI11_PARSE(app, argc, argv);

    std::vector<std::uint64_t> seeds;
    std::stringstream ss(seeds_arg);
    for (std::string tok; std::getline(ss, tok, ',');) seeds.push_back(std::stoull(tok));
    fs::create_directories(workdir);
    diffusion::configure_torch(1);

    auto guarded = [](const std::string& name, auto&& fn) {
        try {
            fn();
        } catch (const std::exception& e) {
            report(name, false, std::string("threw: ") + e.what());
        }
    };
    guarded("fid", check_fid);
    guarded("fid_ratio", check_fid_ratio);
    guarded("is", check_is);
    guarded("ap", check_ap);
    guarded("likert", check_likert);
    guarded("ue", check_ue);
    guarded("diffusion.forward_marginal", check_forward_diffuse);
    guarded("diffusion.zero_init_adapter", check_zero_adapter);
    guarded("diffusion.loss_sanity", check_loss_sanity);
    guarded("pipeline.reproducible", [&] { check_reproducibility(workdir); });
    if (skip_toy)
        std::cout << "SKIP toy end-to-end criteria (--skip-toy)" << std::endl;
    else
        guarded("toy", [&] { check_toy(workdir, seeds); });

    std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " criteria failed") << std::endl;
    return failures == 0 ? 0 : 1;
}
