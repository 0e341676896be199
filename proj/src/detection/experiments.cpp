#include "endosynth/detection/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "endosynth/error.hpp"
#include "endosynth/util/io.hpp"
#include "endosynth/util/rng.hpp"

namespace endosynth::detection {

std::size_t synthetic_count(double fraction, std::size_t n_real) {
    if (fraction < 0 || !std::isfinite(fraction)) throw Error("synthetic fraction must be >= 0");
    return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n_real)));
}

nlohmann::json MixSpec::to_json() const {
    return {{"fraction", fraction}, {"selection", selection}, {"seed", seed}, {"synthetic_ids", synthetic_ids}};
}

nlohmann::json RunResult::to_json() const {
    return {{"mix", mix.to_json()},
            {"n_real", n_real},
            {"n_synthetic", mix.synthetic_ids.size()},
            {"threshold", threshold},
            {"val", detection::to_json(val)},
            {"internal", detection::to_json(internal)},
            {"external", detection::to_json(external)},
            {"history", history.to_json()}};
}

RunResult score_run(DetectorModel& model, const MixSpec& mix, std::size_t n_real, const EvalSets& sets) {
    RunResult r;
    r.mix = mix;
    r.n_real = n_real;
    r.threshold = model.threshold;
    r.history = model.history;
    auto score = [&](const DetectionSet* s) {
        if (!s) return EvalResult{};
        return evaluate(predict(model, *s), s->ground_truth(), 0.5, model.threshold);
    };
    r.val = score(sets.val);
    r.internal = score(sets.internal);
    r.external = score(sets.external);
    return r;
}

RunResult run_mix(const DetectorConfig& cfg, const DetectionSet& real, const DetectionSet& synthetic_subset,
                  const MixSpec& mix, const EvalSets& sets, DetectorModel* trained) {
    if (!sets.val) throw Error("run_mix needs a validation set");
    auto model = train_detector(DetectionSet::concat(real, synthetic_subset), *sets.val, cfg,
                                {{"mix", mix.to_json()}, {"n_real", real.size()}});
    auto r = score_run(model, mix, real.size(), sets);
    if (trained) *trained = std::move(model);
    return r;
}

std::vector<std::size_t> random_subset(std::size_t pool, std::size_t k, std::uint64_t seed) {
    if (k > pool) throw Error("cannot draw " + std::to_string(k) + " of " + std::to_string(pool) + " images");
    std::vector<std::size_t> idx(pool);
    std::iota(idx.begin(), idx.end(), 0);
    util::Rng rng(seed);
    util::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::vector<std::vector<std::size_t>> disjoint_subsets(std::size_t pool, std::size_t k, std::size_t count,
                                                       std::uint64_t seed) {
    if (k * count > pool)
        throw Error("synthetic pool of " + std::to_string(pool) + " is too small for " + std::to_string(k) +
                    " disjoint subsets of " + std::to_string(count));
    std::vector<std::size_t> idx(pool);
    std::iota(idx.begin(), idx.end(), 0);
    util::Rng rng(seed);
    util::shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::vector<std::size_t>> out(k);
    for (std::size_t f = 0; f < k; ++f) {
        out[f].assign(idx.begin() + static_cast<std::ptrdiff_t>(f * count),
                      idx.begin() + static_cast<std::ptrdiff_t>((f + 1) * count));
        std::sort(out[f].begin(), out[f].end());
    }
    return out;
}

MeanStd mean_std(std::span<const double> v) {
    if (v.empty()) throw Error("mean_std of no values");
    double m = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

std::string format_ap_delta(double ap_mix, double ap_real) {
    double d = std::round((ap_mix - ap_real) * 1000.0) / 10.0;
    if (d == 0) d = 0;  // no "-0.0%"
    char buf[32];
    std::snprintf(buf, sizeof buf, "%+.1f%%", d);
    return buf;
}

TableRow table_row(const std::string& label, const RunResult& r) {
    return {label, {r.internal.precision, r.internal.recall, r.internal.ap50, r.external.precision, r.external.recall,
                    r.external.ap50}};
}

std::string table1_csv(const TableRow& real, std::span<const TableRow> folds, const TableRow* ue) {
    std::string out = "train_dataset,internal_precision,internal_recall,internal_ap50,external_precision,"
                      "external_recall,external_ap50\n";
    auto row = [&](const TableRow& r) {
        out += r.label;
        for (double v : r.values) out += "," + util::format_fixed(v, 3);
        out += "\n";
    };
    row(real);
    for (const auto& f : folds) row(f);
    if (!folds.empty()) {
        out += "mean±std";
        for (std::size_t c = 0; c < 6; ++c) {
            std::vector<double> col;
            for (const auto& f : folds) col.push_back(f.values[c]);
            const auto ms = mean_std(col);
            out += "," + util::format_fixed(ms.mean, 3) + "±" + util::format_fixed(ms.std, 3);
        }
        out += "\n";
    }
    if (ue) row(*ue);
    return out;
}

std::string fig3a_csv(std::span<const std::pair<std::uint64_t, RunResult>> runs) {
    std::string out = "seed,fraction,n_synthetic,internal_precision,internal_recall,internal_ap50,"
                      "external_precision,external_recall,external_ap50\n";
    for (const auto& [seed, r] : runs) {
        out += std::to_string(seed) + "," + util::format_double(r.mix.fraction) + "," +
               std::to_string(r.mix.synthetic_ids.size());
        for (double v : table_row("", r).values) out += "," + util::format_fixed(v, 4);
        out += "\n";
    }
    return out;
}

} // namespace endosynth::detection
