#include <algorithm>
#include <map>

#include "endosynth/detection/experiments.hpp"
#include "endosynth/pipeline/pipeline.hpp"
#include "endosynth/study/analysis.hpp"
#include "endosynth/util/io.hpp"

namespace endosynth::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::optional<json> try_json(const fs::path& p) {
    if (!fs::exists(p)) return std::nullopt;
    return json::parse(util::read_text(p));
}

detection::EvalResult eval_from_json(const json& j) {
    detection::EvalResult e;
    e.precision = j.at("precision");
    e.recall = j.at("recall");
    e.ap50 = j.at("ap50");
    return e;
}

// Enough of a RunResult to feed the table and figure writers.
detection::RunResult run_from_json(const json& j) {
    detection::RunResult r;
    r.mix.fraction = j.at("mix").at("fraction");
    r.mix.selection = j.at("mix").value("selection", "none");
    r.mix.synthetic_ids = j.at("mix").value("synthetic_ids", std::vector<std::string>{});
    r.n_real = j.value("n_real", std::size_t{0});
    r.threshold = j.value("threshold", 0.0);
    r.internal = eval_from_json(j.at("internal"));
    r.external = eval_from_json(j.at("external"));
    return r;
}

json delta_json(const detection::RunResult& mix, const detection::RunResult& real) {
    return {{"internal", detection::format_ap_delta(mix.internal.ap50, real.internal.ap50)},
            {"external", detection::format_ap_delta(mix.external.ap50, real.external.ap50)}};
}

json metrics_json(const detection::RunResult& r) {
    return {{"internal", {{"precision", r.internal.precision}, {"recall", r.internal.recall}, {"ap50", r.internal.ap50}}},
            {"external", {{"precision", r.external.precision}, {"recall", r.external.recall}, {"ap50", r.external.ap50}}}};
}

std::string rel(const fs::path& p, const fs::path& dir) { return fs::relative(p, dir).generic_string(); }

} // namespace

json render_reports(const fs::path& dir) {
    const auto out = dir / "report";
    fs::create_directories(out);
    json report = {{"artifacts", json::object()}, {"gaps", json::array()}};
    auto gap = [&](const std::string& what) { report["gaps"].push_back(what); };

    const auto cfg = try_json(dir / "config.json");
    if (cfg) {
        report["config_hash"] = cfg->at("config_hash");
        report["seed"] = cfg->at("config").at("seed");
    } else {
        gap("config.json missing");
    }

    for (const auto* name : {"autoencoder", "ldm", "control"}) {
        if (auto j = try_json(dir / name / "report.json")) {
            report["training"][name] = *j;
            report["artifacts"][std::string("models/") + name + ".pt"] = j->value("provenance", json::object());
        } else {
            gap(std::string(name) + " training report missing");
        }
    }

    if (auto gm = try_json(dir / "genmetrics/genmetrics.json")) {
        report["genmetrics"] = *gm;
        util::write_text_atomic(out / "genmetrics.json", gm->dump(2) + "\n");
    } else {
        gap("generation metrics missing");
    }

    std::optional<detection::RunResult> real;
    if (auto j = try_json(dir / "detect/real/result.json")) {
        real = run_from_json(*j);
        report["real"] = metrics_json(*real);
    } else {
        gap("real-only detector result missing");
    }

    // Sweep, ordered by fraction.
    std::vector<std::pair<std::uint64_t, detection::RunResult>> sweep;
    if (fs::exists(dir / "detect/sweep")) {
        std::vector<fs::path> runs;
        for (const auto& e : fs::directory_iterator(dir / "detect/sweep"))
            if (fs::exists(e.path() / "result.json")) runs.push_back(e.path());
        std::sort(runs.begin(), runs.end());
        const std::uint64_t seed = report.value("seed", std::uint64_t{0});
        for (const auto& p : runs) sweep.emplace_back(seed, run_from_json(*try_json(p / "result.json")));
        std::stable_sort(sweep.begin(), sweep.end(),
                         [](const auto& a, const auto& b) { return a.second.mix.fraction < b.second.mix.fraction; });
    }
    if (sweep.empty()) {
        gap("fraction sweep missing");
    } else {
        util::write_text_atomic(out / "fig3a.csv", detection::fig3a_csv(sweep));
        json js = json::array();
        for (const auto& [seed, r] : sweep) {
            json e = {{"fraction", r.mix.fraction}, {"n_synthetic", r.mix.synthetic_ids.size()}, {"metrics", metrics_json(r)}};
            if (real) e["delta_vs_real"] = delta_json(r, *real);
            js.push_back(e);
        }
        report["sweep"] = js;
    }

    std::vector<detection::RunResult> folds;
    for (int f = 1; f <= 16; ++f) {
        auto j = try_json(dir / "detect/cv" / ("fold" + std::to_string(f)) / "result.json");
        if (!j) break;
        folds.push_back(run_from_json(*j));
    }
    std::optional<detection::RunResult> ue;
    if (auto j = try_json(dir / "detect/ue/result.json")) ue = run_from_json(*j);
    if (folds.empty()) gap("random-fold detector results missing");
    if (!ue) gap("uncertainty-selected detector result missing");

    if (real && !folds.empty()) {
        std::vector<detection::TableRow> rows;
        for (std::size_t f = 0; f < folds.size(); ++f)
            rows.push_back(detection::table_row("fold" + std::to_string(f + 1), folds[f]));
        const auto ue_row = ue ? std::optional(detection::table_row("ue", *ue)) : std::nullopt;
        util::write_text_atomic(out / "table1.csv", detection::table1_csv(detection::table_row("real", *real), rows,
                                                                          ue_row ? &*ue_row : nullptr));
        json table = json::array();
        std::array<std::vector<double>, 6> cols;
        for (const auto& r : rows)
            for (std::size_t c = 0; c < 6; ++c) cols[c].push_back(r.values[c]);
        json mean = json::array(), sd = json::array();
        for (const auto& c : cols) {
            const auto ms = detection::mean_std(c);
            mean.push_back(ms.mean);
            sd.push_back(ms.std);
        }
        detection::RunResult mean_run;
        mean_run.internal.ap50 = mean[2];
        mean_run.external.ap50 = mean[5];
        report["folds"] = {{"mean", mean}, {"std", sd}, {"delta_vs_real", delta_json(mean_run, *real)}};
        if (ue) {
            report["ue"] = metrics_json(*ue);
            report["ue"]["delta_vs_real"] = delta_json(*ue, *real);
            report["ue"]["n_synthetic"] = ue->mix.synthetic_ids.size();
        }
    } else {
        gap("table1 incomplete: needs the real-only run and at least one fold");
    }

    if (auto sel = try_json(dir / "select/selected.json")) {
        report["selection"] = {{"count", sel->at("count")}, {"pool", sel->at("pool")}, {"fraction", sel->at("fraction")}};
    }

    const std::string votes = cfg ? cfg->at("config").at("study").value("votes", "") : "";
    if (!votes.empty()) {
        const fs::path vp = fs::path(votes).is_absolute() ? fs::path(votes) : dir / votes;
        if (fs::exists(vp)) {
            const auto parsed = study::parse_votes_csv(util::read_text(vp));
            const auto res = study::aggregate_study(parsed);
            util::write_text_atomic(out / "fig3b.csv", study::scatter_csv(parsed));
            util::write_text_atomic(out / "study.json", study::to_json(res).dump(2) + "\n");
            report["study"] = study::to_json(res);
        } else {
            gap("study votes file not found: " + votes);
        }
    } else {
        gap("no study votes supplied; fig3b and study summary omitted");
    }

    for (const auto& [name, path] : std::map<std::string, fs::path>{{"synthetic/manifest.jsonl", dir / "synthetic/manifest.jsonl"},
                                                                     {"select/ledger.csv", dir / "select/ledger.csv"}}) {
        if (fs::exists(path)) report["artifacts"][name] = rel(path, dir);
    }

    util::write_text_atomic(out / "report.json", report.dump(2) + "\n");
    return report;
}

} // namespace endosynth::pipeline
