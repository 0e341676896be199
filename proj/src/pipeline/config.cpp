#include "endosynth/pipeline/config.hpp"

#include "endosynth/error.hpp"
#include "endosynth/util/io.hpp"
#include "endosynth/util/rng.hpp"

namespace endosynth::pipeline {

using nlohmann::json;

namespace {

json train_json(const diffusion::TrainConfig& t, bool captions) {
    json j = {{"epochs", t.epochs}, {"batch_size", t.batch_size}, {"lr", t.lr}, {"val_size", t.val_size},
              {"grad_clip", t.grad_clip}};
    if (captions) j["caption_dropout"] = t.caption_dropout;
    return j;
}

diffusion::TrainConfig train_from(const json& j, std::uint64_t seed) {
    diffusion::TrainConfig t;
    t.epochs = j.at("epochs");
    t.batch_size = j.at("batch_size");
    t.lr = j.at("lr");
    t.val_size = j.at("val_size");
    t.grad_clip = j.at("grad_clip");
    t.caption_dropout = j.value("caption_dropout", 0.0);
    t.seed = seed;
    return t;
}

bool same_kind(const json& a, const json& b) {
    if (a.is_number() && b.is_number()) return !(a.is_number_integer() && b.is_number_float());
    return a.type() == b.type();
}

// Overlays `given` on `defaults`, rejecting keys the schema does not know.
void overlay(json& defaults, const json& given, const std::string& path) {
    if (!given.is_object()) throw ConfigError("config" + path + " must be an object");
    for (const auto& [key, value] : given.items()) {
        const auto where = path + "." + key;
        if (!defaults.contains(key)) throw ConfigError("unknown config key '" + where.substr(1) + "'");
        auto& slot = defaults[key];
        if (slot.is_object()) {
            overlay(slot, value, where);
        } else if (!same_kind(slot, value)) {
            throw ConfigError("config key '" + where.substr(1) + "' has the wrong type (expected " + slot.type_name() + ")");
        } else {
            slot = value;
        }
    }
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

} // namespace

json default_config_json() {
    ExperimentConfig c;
    auto j = c.to_json();
    j["output_dir"] = c.output_dir.string();
    return j;
}

json ExperimentConfig::to_json() const {
    const auto& d = detection.detector;
    return {
        {"seed", seed},
        {"dataset",
         {{"n_internal", dataset.n_internal},
          {"n_external", dataset.n_external},
          {"image_size", dataset.image_size},
          {"split_ratios", dataset.split_ratios},
          {"nbi_fraction", dataset.nbi_fraction},
          {"two_lesion_fraction", dataset.two_lesion_fraction}}},
        {"conditioning",
         {{"max_rotation_deg", augmentation.max_rotation_deg},
          {"scale_min", augmentation.scale_min},
          {"scale_max", augmentation.scale_max},
          {"pool_size", pool_size}}},
        {"autoencoder",
         {{"factor", autoencoder.factor},
          {"latent_channels", autoencoder.latent_channels},
          {"channels", autoencoder.channels},
          {"training", train_json(autoencoder_training, false)}}},
        {"ldm",
         {{"channels", denoiser.channels}, {"emb_dim", denoiser.emb_dim}, {"training", train_json(ldm_training, true)}}},
        {"control", {{"training", train_json(control_training, true)}}},
        {"schedule", {{"steps", schedule_steps}, {"beta_start", beta_start}, {"beta_end", beta_end}}},
        {"sampler",
         {{"steps", sampler.steps},
          {"conditioning_scale", sampler.conditioning_scale},
          {"guidance_scale", sampler.guidance_scale}}},
        {"genmetrics", {{"is_splits", is_splits}, {"localization_samples", localization_samples}}},
        {"detection",
         {{"channels", d.channels},
          {"epochs", d.epochs},
          {"batch_size", d.batch_size},
          {"lr", d.lr},
          {"weight_decay", d.weight_decay},
          {"patience", d.patience},
          {"eval_every", d.eval_every},
          {"hflip", d.hflip},
          {"jitter", d.jitter},
          {"max_detections", d.max_detections},
          {"min_score", d.min_score},
          {"fractions", detection.fractions},
          {"cv_folds", detection.cv_folds},
          {"cv_fraction", detection.cv_fraction}}},
        {"selection", {{"fraction", selection_fraction}}},
        {"study", {{"votes", study.votes}, {"per_class", study.per_class}}},
    };
}

std::string ExperimentConfig::hash() const { return util::hex64(util::fnv1a(to_json().dump())); }

ExperimentConfig parse_config(const json& given) {
    json j = default_config_json();
    overlay(j, given, "");

    ExperimentConfig c;
    try {
        c.seed = j.at("seed").get<std::uint64_t>();
        c.output_dir = j.at("output_dir").get<std::string>();
        const auto& ds = j.at("dataset");
        c.dataset.n_internal = ds.at("n_internal");
        c.dataset.n_external = ds.at("n_external");
        c.dataset.image_size = ds.at("image_size");
        require(ds.at("split_ratios").size() == 3, "dataset.split_ratios needs three values");
        for (int i = 0; i < 3; ++i) c.dataset.split_ratios[i] = ds.at("split_ratios")[i].get<double>();
        c.dataset.nbi_fraction = ds.at("nbi_fraction");
        c.dataset.two_lesion_fraction = ds.at("two_lesion_fraction");

        const auto& co = j.at("conditioning");
        c.augmentation = {co.at("max_rotation_deg"), co.at("scale_min"), co.at("scale_max")};
        c.pool_size = co.at("pool_size");

        const auto& ae = j.at("autoencoder");
        c.autoencoder = {ae.at("factor"), ae.at("latent_channels"), ae.at("channels")};
        c.autoencoder_training = train_from(ae.at("training"), util::derive_seed(c.seed, "train.autoencoder"));
        const auto& ldm = j.at("ldm");
        c.denoiser.latent_channels = c.autoencoder.factor == 1 ? 3 : c.autoencoder.latent_channels;
        c.denoiser.channels = ldm.at("channels");
        c.denoiser.emb_dim = ldm.at("emb_dim");
        c.ldm_training = train_from(ldm.at("training"), util::derive_seed(c.seed, "train.ldm"));
        c.control_training = train_from(j.at("control").at("training"), util::derive_seed(c.seed, "train.control"));

        const auto& sc = j.at("schedule");
        c.schedule_steps = sc.at("steps");
        c.beta_start = sc.at("beta_start");
        c.beta_end = sc.at("beta_end");
        const auto& sa = j.at("sampler");
        c.sampler.steps = sa.at("steps");
        c.sampler.conditioning_scale = sa.at("conditioning_scale");
        c.sampler.guidance_scale = sa.at("guidance_scale");
        c.sampler.seed = util::derive_seed(c.seed, "sampler");

        c.is_splits = j.at("genmetrics").at("is_splits");
        c.localization_samples = j.at("genmetrics").at("localization_samples");

        const auto& de = j.at("detection");
        auto& d = c.detection.detector;
        d.channels = de.at("channels");
        d.epochs = de.at("epochs");
        d.batch_size = de.at("batch_size");
        d.lr = de.at("lr");
        d.weight_decay = de.at("weight_decay");
        d.patience = de.at("patience");
        d.eval_every = de.at("eval_every");
        d.hflip = de.at("hflip");
        d.jitter = de.at("jitter");
        d.max_detections = de.at("max_detections");
        d.min_score = de.at("min_score");
        d.seed = util::derive_seed(c.seed, "detector");
        c.detection.fractions = de.at("fractions").get<std::vector<double>>();
        c.detection.cv_folds = de.at("cv_folds");
        c.detection.cv_fraction = de.at("cv_fraction");

        c.selection_fraction = j.at("selection").at("fraction");
        c.study.votes = j.at("study").at("votes");
        c.study.per_class = j.at("study").at("per_class");
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }

    require(c.dataset.n_internal >= 10, "dataset.n_internal must be >= 10");
    require(c.dataset.n_external >= 1, "dataset.n_external must be >= 1");
    require(c.autoencoder.factor == 1 || c.autoencoder.factor == 2 || c.autoencoder.factor == 4 || c.autoencoder.factor == 8,
            "autoencoder.factor must be 1, 2, 4 or 8");
    require(c.dataset.image_size >= 32 && c.dataset.image_size % (4 * c.autoencoder.factor) == 0,
            "dataset.image_size must be >= 32 and divisible by 4 x autoencoder.factor");
    double ratio_sum = 0;
    for (double r : c.dataset.split_ratios) {
        require(r > 0, "dataset.split_ratios must be positive");
        ratio_sum += r;
    }
    require(std::abs(ratio_sum - 1) < 1e-9, "dataset.split_ratios must sum to 1");
    require(c.augmentation.max_rotation_deg >= 0 && c.augmentation.scale_min > 0 &&
                c.augmentation.scale_min <= c.augmentation.scale_max,
            "invalid conditioning augmentation ranges");
    require(c.denoiser.channels >= 8 && c.denoiser.channels % 8 == 0, "ldm.channels must be a positive multiple of 8");
    require(c.denoiser.emb_dim >= 2 && c.denoiser.emb_dim % 2 == 0, "ldm.emb_dim must be even");
    require(c.autoencoder.channels >= 1 && c.autoencoder.latent_channels >= 1, "autoencoder channel counts must be positive");
    require(c.pool_size >= 0, "conditioning.pool_size must be >= 0");
    require(c.schedule_steps >= 2 && c.beta_start > 0 && c.beta_start <= c.beta_end && c.beta_end < 1,
            "invalid noise schedule");
    require(c.is_splits >= 1 && c.localization_samples >= 0, "invalid genmetrics settings");
    require(!c.detection.fractions.empty(), "detection.fractions must not be empty");
    for (double f : c.detection.fractions) require(f >= 0 && f <= 10, "detection.fractions must be in [0,10]");
    require(c.detection.cv_folds >= 2, "detection.cv_folds must be >= 2");
    require(c.detection.cv_fraction > 0, "detection.cv_fraction must be > 0");
    require(c.selection_fraction > 0 && c.selection_fraction <= 1, "selection.fraction must be in (0,1]");
    require(c.study.per_class >= 1, "study.per_class must be >= 1");
    try {
        c.sampler.validate();
        c.detection.detector.validate();
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    for (const auto* t : {&c.autoencoder_training, &c.ldm_training, &c.control_training})
        require(t->epochs >= 0 && t->batch_size >= 1 && t->lr > 0 && t->val_size >= 1, "invalid training settings");
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(util::read_text(path));
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    return parse_config(j);
}

} // namespace endosynth::pipeline
