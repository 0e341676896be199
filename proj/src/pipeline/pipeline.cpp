#include "endosynth/pipeline/pipeline.hpp"

#include <cstdio>
#include <map>
#include <optional>

#include "endosynth/conditioning.hpp"
#include "endosynth/dataset.hpp"
#include "endosynth/detection/experiments.hpp"
#include "endosynth/diffusion/tensor_ops.hpp"
#include "endosynth/diffusion/trainer.hpp"
#include "endosynth/genmetrics.hpp"
#include "endosynth/selection.hpp"
#include "endosynth/util/io.hpp"
#include "endosynth/util/rng.hpp"

namespace endosynth::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using detection::DetectionSet;

const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names = {"data",    "condition", "autoencoder", "ldm",    "control",
                                                   "augment", "generate",  "genmetrics",  "sweep",  "cv",
                                                   "select",  "ue",        "report"};
    return names;
}

json LocalizationResult::to_json() const {
    return {{"inside_rate", inside_rate}, {"outside_rate", outside_rate}, {"ratio", ratio}, {"samples", samples}};
}

LocalizationResult localization_probe(diffusion::LdmModel& model, std::span<const LocalizationProbe> probes,
                                      const diffusion::SamplerConfig& sampler) {
    LocalizationResult r;
    if (probes.empty()) return r;
    const int size = model.config.image_size;
    std::vector<conditioning::ControlMask> masks;
    std::vector<std::int64_t> captions;
    for (const auto& p : probes) {
        masks.push_back(conditioning::rasterize_mask(std::span(&p.box, 1), size, size));
        captions.push_back(p.caption);
    }
    const auto images = diffusion::sample(model, torch::tensor(captions, torch::kInt64), diffusion::mask_batch(masks), sampler);
    for (std::size_t i = 0; i < probes.size(); ++i) {
        const auto img = diffusion::to_image(images[static_cast<std::int64_t>(i)]);
        const auto lesion = dataset::lesion_pixel_map(img, probes[i].modality);
        double in = 0, in_hit = 0, out = 0, out_hit = 0;
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                const bool inside = masks[i].pixels.at(y, x, 0) != 0;
                const double hit = lesion[static_cast<std::size_t>(y) * size + x];
                (inside ? in : out) += 1;
                (inside ? in_hit : out_hit) += hit;
            }
        }
        r.inside_rate += in > 0 ? in_hit / in : 0;
        r.outside_rate += out > 0 ? out_hit / out : 0;
    }
    r.samples = static_cast<int>(probes.size());
    r.inside_rate /= r.samples;
    r.outside_rate /= r.samples;
    r.ratio = r.outside_rate > 0 ? r.inside_rate / r.outside_rate : (r.inside_rate > 0 ? 1e9 : 0);
    return r;
}

namespace {

std::string fraction_tag(double f) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", f);
    return buf;
}

json read_json(const fs::path& p) { return json::parse(util::read_text(p)); }

void write_json(const fs::path& p, const json& j) {
    fs::create_directories(p.parent_path());
    util::write_text_atomic(p, j.dump(2) + "\n");
}

class Runner {
public:
    Runner(const ExperimentConfig& cfg, const RunOptions& opts)
        : cfg_(cfg), out_(cfg.output_dir), hash_(cfg.hash()), opts_(opts) {}

    RunSummary run() {
        fs::create_directories(out_ / "stages");
        json cj = cfg_.to_json();
        write_json(out_ / "config.json", {{"config", cj}, {"config_hash", hash_}});
        fs::remove(out_ / "failure.json");

        RunSummary summary;
        bool dirty = false;
        for (const auto& stage : stage_names()) {
            const auto marker = out_ / "stages" / (stage + ".json");
            bool fresh = false;
            if (!dirty && stage != "report" && fs::exists(marker)) {
                try {
                    fresh = read_json(marker).value("config_hash", "") == hash_;
                } catch (const std::exception&) {
                    fresh = false;
                }
            }
            if (fresh) {
                summary.skipped.push_back(stage);
                log("skip " + stage + " (artifacts present)");
            } else {
                log("run " + stage);
                try {
                    execute(stage);
                } catch (const std::exception& e) {
                    write_json(out_ / "failure.json", {{"stage", stage}, {"error", e.what()}, {"config_hash", hash_}});
                    throw StageError(stage, e.what());
                }
                write_json(marker, provenance(stage));
                summary.executed.push_back(stage);
                dirty = true;
            }
            if (stage == opts_.until) break;
        }
        return summary;
    }

private:
    void log(const std::string& msg) const {
        if (opts_.log) opts_.log(msg);
    }

    json provenance(const std::string& stage) const {
        return {{"config_hash", hash_}, {"stage", stage}, {"seed", cfg_.seed}};
    }

    void execute(const std::string& stage) {
        if (stage == "data") return stage_data();
        if (stage == "condition") return stage_condition();
        if (stage == "autoencoder") return stage_autoencoder();
        if (stage == "ldm") return stage_ldm();
        if (stage == "control") return stage_control();
        if (stage == "augment") return stage_augment();
        if (stage == "generate") return stage_generate();
        if (stage == "genmetrics") return stage_genmetrics();
        if (stage == "sweep") return stage_sweep();
        if (stage == "cv") return stage_cv();
        if (stage == "select") return stage_select();
        if (stage == "ue") return stage_ue();
        if (stage == "report") {
            render_reports(out_);
            return;
        }
        throw Error("unknown stage " + stage);
    }

    // ---- shared inputs, loaded lazily from persisted artifacts ----

    const dataset::DatasetManifest& internal() {
        if (!internal_) internal_ = dataset::read_manifest(out_ / "data/internal/manifest.jsonl");
        return *internal_;
    }
    const dataset::DatasetManifest& conditioned() {
        if (!conditioned_) conditioned_ = dataset::read_manifest(out_ / "condition/manifest.jsonl");
        return *conditioned_;
    }
    const DetectionSet& split_set(Split s) {
        auto& slot = sets_[static_cast<int>(s)];
        if (!slot) slot = detection::load_detection_set(internal(), s);
        return *slot;
    }
    const DetectionSet& external_set() {
        if (!external_) external_ = detection::load_detection_set(dataset::read_manifest(out_ / "data/external/manifest.jsonl"));
        return *external_;
    }
    const DetectionSet& pool_set() {
        if (!pool_) pool_ = detection::load_detection_set(dataset::read_manifest(out_ / "synthetic/manifest.jsonl"));
        return *pool_;
    }
    detection::EvalSets eval_sets() {
        return {&split_set(Split::Val), &split_set(Split::Test), &external_set()};
    }

    diffusion::LdmModel new_model() const {
        diffusion::LdmConfig lc;
        lc.image_size = cfg_.dataset.image_size;
        lc.autoencoder = cfg_.autoencoder;
        lc.denoiser = cfg_.denoiser;
        return diffusion::LdmModel::create(lc, cfg_.seed,
                                           diffusion::NoiseSchedule::linear(cfg_.schedule_steps, cfg_.beta_start, cfg_.beta_end));
    }

    torch::Tensor conditioned_images() {
        std::vector<Image> imgs;
        for (const auto& e : conditioned().entries) imgs.push_back(dataset::load_image(conditioned(), e));
        return diffusion::to_batch(imgs);
    }

    torch::Tensor conditioned_captions() {
        std::vector<std::int64_t> caps;
        for (const auto& e : conditioned().entries)
            caps.push_back(conditioning::caption_index(conditioning::parse_caption(e.caption)));
        return torch::tensor(caps, torch::kInt64);
    }

    // ---- stages ----

    void stage_data() {
        dataset::ToyOptions io;
        io.nbi_fraction = cfg_.dataset.nbi_fraction;
        io.two_lesion_fraction = cfg_.dataset.two_lesion_fraction;
        auto in = dataset::make_toy_dataset(cfg_.dataset.n_internal, util::derive_seed(cfg_.seed, "toy.internal"),
                                            cfg_.dataset.image_size, io);
        in.manifest = dataset::split_dataset(in.manifest, cfg_.dataset.split_ratios, util::derive_seed(cfg_.seed, "split"));
        fs::remove_all(out_ / "data");
        dataset::write_dataset(in, out_ / "data/internal");

        auto eo = io;
        eo.domain = dataset::ToyDomain::External;
        auto ex = dataset::make_toy_dataset(cfg_.dataset.n_external, util::derive_seed(cfg_.seed, "toy.external"),
                                            cfg_.dataset.image_size, eo);
        for (auto& e : ex.manifest.entries) e.split = Split::Test;
        dataset::write_dataset(ex, out_ / "data/external");
        internal_.reset();
    }

    void stage_condition() {
        const auto& m = internal();
        dataset::DatasetManifest out;
        out.origin = m.origin;
        out.seed = cfg_.seed;
        out.root = out_ / "condition";
        fs::remove_all(out.root);
        fs::create_directories(out.root / "masks");
        const int size = cfg_.dataset.image_size;
        for (const auto* e : m.in_split(Split::Train)) {
            if (e->annotations.empty()) continue;
            auto c = *e;
            c.caption = conditioning::caption_for(*e).text;
            std::vector<BoundingBox> boxes;
            for (const auto& a : e->annotations) boxes.push_back(a.box);
            c.mask_path = "masks/" + e->image_id + ".png";
            write_png(out.root / c.mask_path, conditioning::rasterize_mask(boxes, size, size).pixels);
            c.image_path = "../data/internal/" + e->image_path;
            c.label_path = "../data/internal/" + e->label_path;
            out.entries.push_back(std::move(c));
        }
        if (out.entries.empty()) throw Error("no annotated training images to condition on");
        dataset::write_manifest(out.root / "manifest.jsonl", out);
        conditioned_.reset();
    }

    void stage_autoencoder() {
        auto model = new_model();
        const auto images = conditioned_images();
        const auto report = diffusion::train_autoencoder(model, images, cfg_.autoencoder_training);
        const auto& val = split_set(Split::Val);
        const auto rec = diffusion::decode_all(model, diffusion::encode_all(model, val.images));
        double psnr_sum = 0;
        for (std::int64_t i = 0; i < rec.size(0); ++i)
            psnr_sum += psnr(diffusion::to_image(val.images[i]), diffusion::to_image(rec[i]));
        model.provenance = provenance("autoencoder");
        model.save(out_ / "models/autoencoder.pt");
        write_json(out_ / "autoencoder/report.json", {{"training", report.to_json()},
                                                      {"val_psnr_db", psnr_sum / static_cast<double>(rec.size(0))},
                                                      {"latent_scale", model.autoencoder->latent_scale()},
                                                      {"provenance", provenance("autoencoder")}});
    }

    void stage_ldm() {
        auto model = diffusion::LdmModel::load(out_ / "models/autoencoder.pt");
        const auto latents = diffusion::encode_all(model, conditioned_images());
        const auto report = diffusion::train_ldm(model, latents, conditioned_captions(), cfg_.ldm_training);
        model.provenance = provenance("ldm");
        model.save(out_ / "models/ldm.pt");
        write_json(out_ / "ldm/report.json", {{"training", report.to_json()}, {"provenance", provenance("ldm")}});
    }

    void stage_control() {
        auto model = diffusion::LdmModel::load(out_ / "models/ldm.pt");
        const auto latents = diffusion::encode_all(model, conditioned_images());
        std::vector<conditioning::ControlMask> masks;
        for (const auto& e : conditioned().entries)
            masks.push_back({read_png8(conditioned().resolve(e.mask_path))});
        const auto report = diffusion::train_control(model, latents, conditioned_captions(), diffusion::mask_batch(masks),
                                                     cfg_.control_training);
        model.provenance = provenance("control");
        model.save(out_ / "models/control.pt");
        write_json(out_ / "control/report.json", {{"training", report.to_json()}, {"provenance", provenance("control")}});
    }

    std::size_t pool_size() {
        return cfg_.pool_size > 0 ? static_cast<std::size_t>(cfg_.pool_size) : split_set(Split::Train).size();
    }

    void stage_augment() {
        const auto& src = conditioned().entries;
        const int size = cfg_.dataset.image_size;
        std::vector<std::size_t> order(src.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        util::Rng rng(util::derive_seed(cfg_.seed, "augment.order"));
        util::shuffle(order.begin(), order.end(), rng);

        std::vector<json> records;
        const auto n = pool_size();
        for (std::size_t i = 0; i < n; ++i) {
            const auto& e = src[order[i % order.size()]];
            std::vector<BoundingBox> boxes;
            for (const auto& a : e.annotations) boxes.push_back(a.box);
            auto aug = conditioning::sample_augmentation(util::derive_seed(cfg_.seed, "augment", i), cfg_.augmentation);
            conditioning::AugmentResult res;
            try {
                res = conditioning::augment_boxes(boxes, aug, size, size);
            } catch (const Error&) {
                aug.rotation_deg = 0;
                aug.scale = 1;
                res = conditioning::augment_boxes(boxes, aug, size, size);
            }
            json jb = json::array();
            for (std::size_t k = 0; k < res.boxes.size(); ++k) {
                const auto& b = res.boxes[k];
                jb.push_back({{"category", category_index(e.annotations[res.kept[k]].category)},
                              {"cx", b.cx}, {"cy", b.cy}, {"w", b.w}, {"h", b.h}});
            }
            char id[32];
            std::snprintf(id, sizeof id, "syn_%05zu", i);
            records.push_back({{"image_id", id},
                               {"source_id", e.image_id},
                               {"caption", e.caption},
                               {"modality", to_string(e.modality)},
                               {"rotation_deg", aug.rotation_deg},
                               {"scale", aug.scale},
                               {"augmentation_seed", aug.seed},
                               {"dropped", res.dropped},
                               {"boxes", jb}});
        }
        fs::create_directories(out_ / "augment");
        util::write_jsonl(out_ / "augment/pool.jsonl", records);
    }

    static std::vector<Annotation> record_annotations(const json& r) {
        std::vector<Annotation> anns;
        for (const auto& b : r.at("boxes"))
            anns.push_back({category_from_index(b.at("category")), {b.at("cx"), b.at("cy"), b.at("w"), b.at("h")}});
        return anns;
    }

    void stage_generate() {
        auto model = diffusion::LdmModel::load(out_ / "models/control.pt");
        const auto records = util::read_jsonl(out_ / "augment/pool.jsonl");
        const int size = cfg_.dataset.image_size;
        std::vector<conditioning::ControlMask> masks;
        std::vector<std::int64_t> captions;
        for (const auto& r : records) {
            std::vector<BoundingBox> boxes;
            for (const auto& a : record_annotations(r)) boxes.push_back(a.box);
            masks.push_back(conditioning::rasterize_mask(boxes, size, size));
            captions.push_back(conditioning::caption_index(conditioning::parse_caption(r.at("caption").get<std::string>())));
        }
        const auto images = diffusion::sample(model, torch::tensor(captions, torch::kInt64), diffusion::mask_batch(masks), cfg_.sampler);

        const auto root = out_ / "synthetic";
        fs::remove_all(root);
        for (const char* d : {"images", "labels", "masks", "sidecars"}) fs::create_directories(root / d);
        dataset::DatasetManifest m;
        m.origin = Origin::Synthetic;
        m.seed = cfg_.seed;
        m.root = root;
        for (std::size_t i = 0; i < records.size(); ++i) {
            const auto& r = records[i];
            dataset::AnnotatedImage e;
            e.image_id = r.at("image_id");
            e.image_path = "images/" + e.image_id + ".png";
            e.label_path = "labels/" + e.image_id + ".txt";
            e.mask_path = "masks/" + e.image_id + ".png";
            e.annotations = record_annotations(r);
            e.modality = *modality_from_name(r.at("modality").get<std::string>());
            e.split = Split::Train;
            e.origin = Origin::Synthetic;
            e.caption = r.at("caption");
            write_png(root / e.image_path, diffusion::to_image(images[static_cast<std::int64_t>(i)]));
            write_png(root / e.mask_path, masks[i].pixels);
            util::write_text_atomic(root / e.label_path, dataset::serialize_labels(e.annotations));
            write_json(root / "sidecars" / (e.image_id + ".json"),
                       {{"caption", e.caption},
                        {"mask_path", e.mask_path},
                        {"seed", cfg_.sampler.seed},
                        {"sample_index", i},
                        {"model_checkpoint", "models/control.pt"},
                        {"sampler", cfg_.sampler.to_json()},
                        {"source_id", r.at("source_id")},
                        {"provenance", provenance("generate")}});
            m.entries.push_back(std::move(e));
        }
        dataset::write_manifest(root / "manifest.jsonl", m);
        pool_.reset();
    }

    // Real-only detector shared by genmetrics (feature extractor) and the
    // fraction-0 point of the sweep.
    json train_real_detector() {
        const auto dir = out_ / "detect/real";
        detection::DetectorModel model;
        const detection::MixSpec mix{0.0, "none", cfg_.seed, {}};
        auto r = detection::run_mix(cfg_.detection.detector, split_set(Split::Train), DetectionSet{}, mix, eval_sets(), &model);
        model.provenance["run"] = provenance("genmetrics");
        model.save(dir / "model.pt");
        auto j = r.to_json();
        j["provenance"] = provenance("genmetrics");
        write_json(dir / "result.json", j);
        return j;
    }

    void stage_genmetrics() {
        train_real_detector();
        auto det = detection::DetectorModel::load(out_ / "detect/real/model.pt");
        const auto& real = split_set(Split::Train);
        const auto& synth = pool_set();
        auto features = [&](const torch::Tensor& images) {
            const auto f = detection::detector_features(det, images).to(torch::kFloat64).contiguous();
            genmetrics::FeatureSet fs;
            fs.features = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                f.data_ptr<double>(), f.size(0), f.size(1));
            fs.extractor_id = "toy-detector-penultimate-d" + std::to_string(f.size(1));
            return fs;
        };
        const auto fr = features(real.images), fsyn = features(synth.images);

        // Real/real baseline: seeded disjoint halves of the real training set.
        const auto halves = detection::disjoint_subsets(real.size(), 2, real.size() / 2, util::derive_seed(cfg_.seed, "fid.rr"));
        auto rows = [&](const std::vector<std::size_t>& idx) {
            genmetrics::FeatureSet s;
            s.extractor_id = fr.extractor_id;
            s.features.resize(static_cast<Eigen::Index>(idx.size()), fr.features.cols());
            for (std::size_t i = 0; i < idx.size(); ++i) s.features.row(static_cast<Eigen::Index>(i)) = fr.features.row(static_cast<Eigen::Index>(idx[i]));
            return s;
        };
        genmetrics::FidReport fidr;
        fidr.extractor_id = fr.extractor_id;
        fidr.fid_rs = genmetrics::fid(fr, fsyn);
        const auto ha = rows(halves[0]), hb = rows(halves[1]);
        fidr.fid_rr = genmetrics::fid(ha, hb);
        fidr.fid_ratio = genmetrics::fid_ratio(fidr.fid_rs, fidr.fid_rr);
        fidr.rank_deficient = fr.rank_deficient() || fsyn.rank_deficient() || ha.rank_deficient() || hb.rank_deficient();

        auto probs = [&](const torch::Tensor& images) {
            auto p = detection::category_probabilities(det, images).to(torch::kFloat64);
            p = p / p.sum(1, true);
            p = p.contiguous();
            return Eigen::MatrixXd(Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                p.data_ptr<double>(), p.size(0), p.size(1)));
        };
        const auto pr = probs(real.images), ps = probs(synth.images);
        const auto is_real = genmetrics::inception_score(pr, genmetrics::effective_is_splits(real.size(), kNumCategories, cfg_.is_splits));
        const auto is_synth = genmetrics::inception_score(ps, genmetrics::effective_is_splits(synth.size(), kNumCategories, cfg_.is_splits));

        // Localization: single-box probes taken from the augmented pool.
        const auto records = util::read_jsonl(out_ / "augment/pool.jsonl");
        std::vector<LocalizationProbe> probes;
        for (std::size_t i = 0; probes.size() < static_cast<std::size_t>(cfg_.localization_samples) && !records.empty(); ++i) {
            const auto& r = records[i % records.size()];
            const auto anns = record_annotations(r);
            probes.push_back({conditioning::caption_index(conditioning::parse_caption(r.at("caption").get<std::string>())),
                              *modality_from_name(r.at("modality").get<std::string>()), anns.front().box});
        }
        auto model = diffusion::LdmModel::load(out_ / "models/control.pt");
        auto sampler = cfg_.sampler;
        sampler.seed = util::derive_seed(cfg_.seed, "localization");
        const auto loc = localization_probe(model, probes, sampler);

        auto j = genmetrics::to_json(fidr);
        j["is_real"] = genmetrics::to_json(is_real);
        j["is_synth"] = genmetrics::to_json(is_synth);
        j["n_real"] = real.size();
        j["n_synth"] = synth.size();
        j["seeds"] = {{"experiment", cfg_.seed}, {"fid_rr_split", util::derive_seed(cfg_.seed, "fid.rr")},
                      {"localization", sampler.seed}};
        j["fid_rr_protocol"] = "seeded disjoint 50/50 split of the real training set";
        j["localization"] = loc.to_json();
        j["provenance"] = provenance("genmetrics");
        write_json(out_ / "genmetrics/genmetrics.json", j);
    }

    // Runs (or reuses) one detector training whose result lives in dir.
    json cached_run(const fs::path& dir, const std::string& stage, const std::vector<std::size_t>& subset,
                    detection::MixSpec mix, bool predict_pool) {
        const auto result = dir / "result.json";
        if (fs::exists(result)) {
            const auto j = read_json(result);
            if (j.value("provenance", json::object()).value("config_hash", "") == hash_ &&
                (!predict_pool || fs::exists(dir / "pool_predictions.jsonl")))
                return j;
        }
        const auto& pool = pool_set();
        const auto synth = pool.subset(subset);
        mix.synthetic_ids = synth.ids;
        detection::DetectorModel model;
        auto r = detection::run_mix(cfg_.detection.detector, split_set(Split::Train), synth, mix, eval_sets(), &model);
        auto j = r.to_json();
        j["provenance"] = provenance(stage);
        if (predict_pool) {
            model.provenance["run"] = provenance(stage);
            model.save(dir / "model.pt");
            detection::write_predictions(dir / "pool_predictions.jsonl", detection::predict(model, pool));
        }
        write_json(result, j);
        return j;
    }

    void stage_sweep() {
        const auto n_real = split_set(Split::Train).size();
        const auto& fr = cfg_.detection.fractions;
        for (std::size_t k = 0; k < fr.size(); ++k) {
            const auto dir = out_ / "detect/sweep" / ("f" + fraction_tag(fr[k]));
            const auto count = detection::synthetic_count(fr[k], n_real);
            if (count == 0) {
                auto j = read_json(out_ / "detect/real/result.json");
                j["mix"]["fraction"] = fr[k];
                j["provenance"] = provenance("sweep");
                write_json(dir / "result.json", j);
                continue;
            }
            if (count > pool_set().size())
                throw Error("fraction " + util::format_double(fr[k]) + " needs " + std::to_string(count) +
                            " synthetic images but the pool holds " + std::to_string(pool_set().size()));
            const auto seed = util::derive_seed(cfg_.seed, "sweep", k);
            log("  sweep fraction " + util::format_double(fr[k]));
            cached_run(dir, "sweep", detection::random_subset(pool_set().size(), count, seed), {fr[k], "random", seed, {}}, false);
        }
    }

    void stage_cv() {
        const auto n_real = split_set(Split::Train).size();
        const auto count = detection::synthetic_count(cfg_.detection.cv_fraction, n_real);
        const auto seed = util::derive_seed(cfg_.seed, "cv");
        const auto folds = detection::disjoint_subsets(pool_set().size(), static_cast<std::size_t>(cfg_.detection.cv_folds), count, seed);
        for (std::size_t f = 0; f < folds.size(); ++f) {
            log("  cv fold " + std::to_string(f + 1));
            cached_run(out_ / "detect/cv" / ("fold" + std::to_string(f + 1)), "cv", folds[f],
                       {cfg_.detection.cv_fraction, "random", seed, {}}, true);
        }
    }

    void stage_select() {
        if (cfg_.detection.cv_folds != selection::kEnsembleSize)
            throw Error("uncertainty selection needs exactly " + std::to_string(selection::kEnsembleSize) + " fold models");
        std::array<std::vector<detection::Detection>, selection::kEnsembleSize> preds;
        for (int f = 0; f < selection::kEnsembleSize; ++f)
            preds[f] = detection::read_predictions(out_ / "detect/cv" / ("fold" + std::to_string(f + 1)) / "pool_predictions.jsonl");
        const auto sel = selection::select_top_uncertain(selection::build_records(pool_set().ids, preds), cfg_.selection_fraction);
        selection::write_ledger(out_ / "select/ledger.csv", sel);
        std::vector<std::string> ids;
        for (const auto& r : sel.selected()) ids.push_back(r.image_id);
        write_json(out_ / "select/selected.json", {{"selected", ids},
                                                   {"count", sel.selected_count},
                                                   {"pool", sel.ledger.size()},
                                                   {"fraction", cfg_.selection_fraction},
                                                   {"provenance", provenance("select")}});
    }

    void stage_ue() {
        const auto sel = read_json(out_ / "select/selected.json");
        std::map<std::string, std::size_t> pos;
        const auto& pool = pool_set();
        for (std::size_t i = 0; i < pool.size(); ++i) pos[pool.ids[i]] = i;
        std::vector<std::size_t> idx;
        for (const auto& id : sel.at("selected")) idx.push_back(pos.at(id.get<std::string>()));
        const double fraction = static_cast<double>(idx.size()) / static_cast<double>(split_set(Split::Train).size());
        cached_run(out_ / "detect/ue", "ue", idx, {fraction, "uncertainty", cfg_.seed, {}}, false);
    }

    const ExperimentConfig& cfg_;
    fs::path out_;
    std::string hash_;
    RunOptions opts_;
    std::optional<dataset::DatasetManifest> internal_, conditioned_;
    std::array<std::optional<DetectionSet>, 3> sets_;
    std::optional<DetectionSet> external_, pool_;
};

} // namespace

RunSummary run_pipeline(const ExperimentConfig& cfg, const RunOptions& opts) {
    if (!opts.until.empty() &&
        std::find(stage_names().begin(), stage_names().end(), opts.until) == stage_names().end())
        throw ConfigError("unknown stage '" + opts.until + "'");
    diffusion::configure_torch(1);
    Runner runner(cfg, opts);
    return runner.run();
}

} // namespace endosynth::pipeline
