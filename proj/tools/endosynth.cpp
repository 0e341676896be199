// endosynth command line: one subcommand per stage plus run-all and report.

#include <csignal>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "endosynth/conditioning.hpp"
#include "endosynth/dataset.hpp"
#include "endosynth/detection/experiments.hpp"
#include "endosynth/diffusion/tensor_ops.hpp"
#include "endosynth/genmetrics.hpp"
#include "endosynth/pipeline/pipeline.hpp"
#include "endosynth/selection.hpp"
#include "endosynth/study/service.hpp"
#include "endosynth/util/io.hpp"
#include "endosynth/util/rng.hpp"

namespace fs = std::filesystem;
using namespace endosynth;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

study::StudyService* g_service = nullptr;

void print(const json& j) { std::cout << j.dump(2) << "\n"; }

std::array<double, 3> parse_ratios(const std::string& s) {
    std::array<double, 3> r{};
    std::stringstream ss(s);
    std::string tok;
    for (auto& v : r) {
        if (!std::getline(ss, tok, ',')) throw ConfigError("ratios need three comma-separated values");
        v = std::stod(tok);
    }
    return r;
}

pipeline::ExperimentConfig config_from(const std::string& path, const std::string& out) {
    auto cfg = path.empty() ? pipeline::parse_config(json::object()) : pipeline::load_config(path);
    if (!out.empty()) cfg.output_dir = out;
    return cfg;
}

void run_until(const std::string& config, const std::string& out, const std::string& stage) {
    const auto cfg = config_from(config, out);
    pipeline::RunOptions opts;
    opts.until = stage;
    opts.log = [](const std::string& m) { std::cerr << "[endosynth] " << m << "\n"; };
    const auto s = pipeline::run_pipeline(cfg, opts);
    print({{"executed", s.executed}, {"skipped", s.skipped}, {"output_dir", cfg.output_dir.string()}});
}

detection::DetectionSet load_set(const std::string& manifest, const std::string& split) {
    const auto m = dataset::read_manifest(manifest);
    if (split.empty() || split == "all") return detection::load_detection_set(m);
    const auto s = split_from_name(split);
    if (!s) throw ConfigError("unknown split '" + split + "'");
    return detection::load_detection_set(m, *s);
}

std::vector<BoundingBox> parse_boxes(const std::vector<std::string>& specs) {
    std::vector<BoundingBox> boxes;
    for (const auto& s : specs) {
        std::stringstream ss(s);
        std::string tok;
        std::array<double, 4> v{};
        for (auto& x : v) {
            if (!std::getline(ss, tok, ',')) throw ConfigError("box needs cx,cy,w,h: " + s);
            x = std::stod(tok);
        }
        boxes.push_back({v[0], v[1], v[2], v[3]});
    }
    return boxes;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Synthetic endoscopy augmentation toolkit"};
    app.require_subcommand(1);
    std::string config, out;

    // dataset
    auto* ds = app.add_subcommand("dataset", "Toy data generation and splitting")->require_subcommand(1);
    int n = 200, size = 64;
    std::uint64_t seed = 1;
    bool external = false;
    std::string ratios = "0.8,0.1,0.1", manifest;
    auto* mk = ds->add_subcommand("make-toy", "Write a procedural toy dataset");
    mk->add_option("--n", n)->check(CLI::PositiveNumber);
    mk->add_option("--seed", seed);
    mk->add_option("--size", size);
    mk->add_flag("--external", external, "Use the shifted external colour domain");
    mk->add_option("--ratios", ratios, "train,val,test");
    mk->add_option("--out", out)->required();
    auto* sp = ds->add_subcommand("split", "Re-split an existing manifest in place");
    sp->add_option("--manifest", manifest)->required();
    sp->add_option("--ratios", ratios);
    sp->add_option("--seed", seed);

    // condition
    auto* cond = app.add_subcommand("condition", "Captions, masks and mask augmentation")->require_subcommand(1);
    auto* cb = cond->add_subcommand("build", "Caption and mask a dataset (run-all stages data..condition)");
    cb->add_option("--config", config);
    cb->add_option("--out", out);
    auto* ca = cond->add_subcommand("augment", "Build the augmented mask pool");
    ca->add_option("--config", config);
    ca->add_option("--out", out);

    // diffusion
    auto* dif = app.add_subcommand("diffusion", "Latent diffusion training and sampling")->require_subcommand(1);
    auto* tae = dif->add_subcommand("train-ae", "Train the autoencoder");
    auto* tldm = dif->add_subcommand("train-ldm", "Train the caption-conditioned denoiser");
    auto* tctl = dif->add_subcommand("train-control", "Train the mask adapter");
    for (auto* c : {tae, tldm, tctl}) {
        c->add_option("--config", config);
        c->add_option("--out", out);
    }
    std::string checkpoint, caption;
    std::vector<std::string> box_specs;
    diffusion::SamplerConfig sampler;
    auto* smp = dif->add_subcommand("sample", "Generate images from a checkpoint");
    smp->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
    smp->add_option("--caption", caption)->required();
    smp->add_option("--box", box_specs, "cx,cy,w,h (repeatable)");
    smp->add_option("--n", n);
    smp->add_option("--seed", sampler.seed);
    smp->add_option("--steps", sampler.steps);
    smp->add_option("--conditioning-scale", sampler.conditioning_scale);
    smp->add_option("--guidance-scale", sampler.guidance_scale);
    smp->add_option("--out", out)->required();

    // genmetrics
    auto* gm = app.add_subcommand("genmetrics", "Generation metrics")->require_subcommand(1);
    double fid_rs = 0, fid_rr = 0;
    auto* fr = gm->add_subcommand("fid-ratio", "1 - (FID_rs - FID_rr) / FID_rs");
    fr->add_option("--rs", fid_rs)->required();
    fr->add_option("--rr", fid_rr)->required();
    std::string probs_path;
    int splits = 10;
    auto* is = gm->add_subcommand("is", "Inception score of a probability CSV (one row per image)");
    is->add_option("--probs", probs_path)->required()->check(CLI::ExistingFile);
    is->add_option("--splits", splits);
    auto* gmr = gm->add_subcommand("run", "Run the generation metrics stage");
    gmr->add_option("--config", config);
    gmr->add_option("--out", out);

    // detect
    auto* det = app.add_subcommand("detect", "Detector training and evaluation")->require_subcommand(1);
    std::string model_path, det_config, split = "test";
    auto* dtr = det->add_subcommand("train", "Train on the train split of a manifest");
    dtr->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
    dtr->add_option("--detector-config", det_config, "DetectorConfig JSON");
    dtr->add_option("--out", model_path)->required();
    auto* dev = det->add_subcommand("eval", "Evaluate a model on a manifest split");
    auto* dpr = det->add_subcommand("predict", "Write predictions as JSON Lines");
    for (auto* c : {dev, dpr}) {
        c->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
        c->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
        c->add_option("--split", split, "train|val|test|all");
    }
    dpr->add_option("--out", out)->required();
    auto* dsw = det->add_subcommand("sweep", "Synthetic-fraction sweep");
    auto* dcv = det->add_subcommand("cv", "Random-subset folds");
    for (auto* c : {dsw, dcv}) {
        c->add_option("--config", config);
        c->add_option("--out", out);
    }

    // select
    auto* sel = app.add_subcommand("select", "Ensemble uncertainty selection")->require_subcommand(1);
    std::vector<std::string> pred_paths;
    double fraction = 0.10;
    auto* ue = sel->add_subcommand("ue", "Rank pool images by confidence variance");
    ue->add_option("--manifest", manifest, "Pool manifest")->required()->check(CLI::ExistingFile);
    ue->add_option("--predictions", pred_paths, "Three prediction files")->required()->expected(3);
    ue->add_option("--fraction", fraction);
    ue->add_option("--out", out, "Ledger CSV")->required();

    // study
    auto* st = app.add_subcommand("study", "Blinded realism study")->require_subcommand(1);
    std::string pool_path, log_path, host = "127.0.0.1", votes_path;
    int port = 8080, per_class = 10;
    auto* ss = st->add_subcommand("serve", "Run the study HTTP service");
    ss->add_option("--pool", pool_path)->required()->check(CLI::ExistingFile);
    ss->add_option("--log", log_path)->required();
    ss->add_option("--host", host);
    ss->add_option("--port", port);
    ss->add_option("--per-class", per_class);
    auto* sa = st->add_subcommand("analyze", "Summarize exported votes");
    sa->add_option("--votes", votes_path)->required()->check(CLI::ExistingFile);
    sa->add_option("--out", out, "Directory for study.json and fig3b.csv");

    // run-all, report
    std::string until;
    auto* ra = app.add_subcommand("run-all", "Run every stage, resuming from persisted artifacts");
    ra->add_option("--config", config)->required();
    ra->add_option("--out", out);
    ra->add_option("--until", until, "Last stage to run");
    auto* cs = app.add_subcommand("config", "Print the resolved configuration (defaults when --config is omitted)");
    cs->add_option("--config", config);
    std::string report_dir;
    auto* rp = app.add_subcommand("report", "Render reports from an experiment directory");
    rp->add_option("--dir", report_dir)->required()->check(CLI::ExistingDirectory);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (mk->parsed()) {
            dataset::ToyOptions o;
            if (external) o.domain = dataset::ToyDomain::External;
            auto d = dataset::make_toy_dataset(n, seed, size, o);
            if (external) {
                for (auto& e : d.manifest.entries) e.split = Split::Test;
            } else {
                d.manifest = dataset::split_dataset(d.manifest, parse_ratios(ratios), util::derive_seed(seed, "split"));
            }
            dataset::write_dataset(d, out);
            print({{"images", d.manifest.entries.size()}, {"manifest", (fs::path(out) / "manifest.jsonl").string()}});
        } else if (sp->parsed()) {
            auto m = dataset::read_manifest(manifest);
            m = dataset::split_dataset(m, parse_ratios(ratios), seed);
            dataset::write_manifest(manifest, m);
            const auto c = dataset::split_counts(m.entries.size(), parse_ratios(ratios));
            print({{"train", c.train}, {"val", c.val}, {"test", c.test}});
        } else if (cb->parsed()) {
            run_until(config, out, "condition");
        } else if (ca->parsed()) {
            run_until(config, out, "augment");
        } else if (tae->parsed()) {
            run_until(config, out, "autoencoder");
        } else if (tldm->parsed()) {
            run_until(config, out, "ldm");
        } else if (tctl->parsed()) {
            run_until(config, out, "control");
        } else if (smp->parsed()) {
            sampler.validate();
            diffusion::configure_torch(1);
            auto model = diffusion::LdmModel::load(checkpoint);
            const int sz = model.config.image_size;
            const auto boxes = parse_boxes(box_specs);
            const auto cap = conditioning::caption_index(conditioning::parse_caption(caption));
            std::vector<conditioning::ControlMask> masks;
            if (!boxes.empty())
                for (int i = 0; i < n; ++i) masks.push_back(conditioning::rasterize_mask(boxes, sz, sz));
            const auto imgs = diffusion::sample(model, torch::full({n}, cap, torch::kInt64),
                                                masks.empty() ? torch::Tensor() : diffusion::mask_batch(masks), sampler);
            fs::create_directories(out);
            for (int i = 0; i < n; ++i) {
                char name[32];
                std::snprintf(name, sizeof name, "sample_%04d.png", i);
                write_png(fs::path(out) / name, diffusion::to_image(imgs[i]));
            }
            print({{"samples", n}, {"out", out}, {"sampler", sampler.to_json()}});
        } else if (fr->parsed()) {
            print({{"fid_ratio", genmetrics::fid_ratio(fid_rs, fid_rr)}});
        } else if (is->parsed()) {
            std::vector<std::vector<double>> rows;
            std::stringstream text(util::read_text(probs_path));
            std::string line, tok;
            while (std::getline(text, line)) {
                if (line.empty()) continue;
                std::stringstream ls(line);
                rows.emplace_back();
                while (std::getline(ls, tok, ',')) rows.back().push_back(std::stod(tok));
            }
            if (rows.empty()) throw ConfigError("empty probability file");
            Eigen::MatrixXd p(rows.size(), rows[0].size());
            for (std::size_t i = 0; i < rows.size(); ++i) {
                if (rows[i].size() != rows[0].size()) throw ConfigError("ragged probability rows");
                for (std::size_t k = 0; k < rows[i].size(); ++k) p(i, k) = rows[i][k];
            }
            const int eff = genmetrics::effective_is_splits(rows.size(), rows[0].size(), splits);
            print(genmetrics::to_json(genmetrics::inception_score(p, eff)));
        } else if (gmr->parsed()) {
            run_until(config, out, "genmetrics");
        } else if (dtr->parsed()) {
            diffusion::configure_torch(1);
            detection::DetectorConfig dc;
            if (!det_config.empty()) dc = detection::DetectorConfig::from_json(json::parse(util::read_text(det_config)));
            dc.validate();
            const auto train = load_set(manifest, "train");
            const auto val = load_set(manifest, "val");
            auto model = detection::train_detector(train, val, dc);
            model.save(model_path);
            print({{"model", model_path}, {"threshold", model.threshold}, {"history", model.history.to_json()}});
        } else if (dev->parsed()) {
            diffusion::configure_torch(1);
            auto model = detection::DetectorModel::load(model_path);
            const auto set = load_set(manifest, split);
            const auto preds = detection::predict(model, set);
            print(detection::to_json(detection::evaluate(preds, set.ground_truth(), 0.5, model.threshold)));
        } else if (dpr->parsed()) {
            diffusion::configure_torch(1);
            auto model = detection::DetectorModel::load(model_path);
            const auto preds = detection::predict(model, load_set(manifest, split));
            detection::write_predictions(out, preds);
            print({{"predictions", preds.size()}, {"out", out}});
        } else if (dsw->parsed()) {
            run_until(config, out, "sweep");
        } else if (dcv->parsed()) {
            run_until(config, out, "cv");
        } else if (ue->parsed()) {
            const auto m = dataset::read_manifest(manifest, false);
            std::vector<std::string> ids;
            for (const auto& e : m.entries) ids.push_back(e.image_id);
            std::array<std::vector<detection::Detection>, selection::kEnsembleSize> preds;
            for (int i = 0; i < selection::kEnsembleSize; ++i) preds[i] = detection::read_predictions(pred_paths[i]);
            const auto s = selection::select_top_uncertain(selection::build_records(ids, preds), fraction);
            selection::write_ledger(out, s);
            print({{"selected", s.selected_count}, {"pool", s.ledger.size()}, {"ledger", out}});
        } else if (ss->parsed()) {
            study::SessionStore store(study::read_pool(pool_path), log_path, static_cast<std::size_t>(per_class));
            study::StudyService service(store);
            const int bound = service.bind(host, port);
            g_service = &service;
            std::signal(SIGINT, [](int) {
                if (g_service) g_service->stop();
            });
            std::signal(SIGTERM, [](int) {
                if (g_service) g_service->stop();
            });
            std::cerr << "[endosynth] study service on http://" << host << ":" << bound << "\n";
            service.listen();
            g_service = nullptr;
        } else if (sa->parsed()) {
            const auto votes = study::parse_votes_csv(util::read_text(votes_path));
            const auto res = study::aggregate_study(votes);
            if (!out.empty()) {
                fs::create_directories(out);
                util::write_text_atomic(fs::path(out) / "study.json", study::to_json(res).dump(2) + "\n");
                util::write_text_atomic(fs::path(out) / "fig3b.csv", study::scatter_csv(votes));
            }
            print(study::to_json(res));
        } else if (ra->parsed()) {
            auto cfg = config_from(config, out);
            pipeline::RunOptions opts;
            opts.until = until;
            opts.log = [](const std::string& m) { std::cerr << "[endosynth] " << m << "\n"; };
            const auto s = pipeline::run_pipeline(cfg, opts);
            print({{"executed", s.executed}, {"skipped", s.skipped}, {"output_dir", cfg.output_dir.string()}});
        } else if (cs->parsed()) {
            auto j = config_from(config, "").to_json();
            j["config_hash"] = config_from(config, "").hash();
            print(j);
        } else if (rp->parsed()) {
            const auto r = pipeline::render_reports(report_dir);
            print({{"report", (fs::path(report_dir) / "report" / "report.json").string()}, {"gaps", r.at("gaps")}});
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const pipeline::StageError& e) {
        std::cerr << "stage '" << e.stage() << "' failed: " << e.what() << "\n";
        return kExitStage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitStage;
    }
    return 0;
}
