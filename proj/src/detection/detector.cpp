#include "endosynth/detection/detector.hpp"

#include <algorithm>
#include <cmath>

#include "endosynth/diffusion/models.hpp"
#include "endosynth/diffusion/tensor_ops.hpp"
#include "endosynth/error.hpp"
#include "endosynth/util/rng.hpp"

namespace endosynth::detection {

namespace nn = torch::nn;

void DetectorConfig::validate() const {
    if (channels < 4 || epochs < 0 || batch_size < 1 || !(lr > 0) || weight_decay < 0 || patience < 1 || eval_every < 1)
        throw Error("invalid detector configuration");
    if (jitter < 0 || jitter >= 1) throw Error("detector jitter must be in [0,1)");
    if (max_detections < 1 || min_score < 0 || min_score >= 1) throw Error("invalid detector decoding settings");
}

nlohmann::json DetectorConfig::to_json() const {
    return {{"channels", channels}, {"epochs", epochs},   {"batch_size", batch_size},
            {"lr", lr},             {"weight_decay", weight_decay}, {"patience", patience},
            {"eval_every", eval_every}, {"seed", seed},   {"hflip", hflip},
            {"jitter", jitter},     {"max_detections", max_detections}, {"min_score", min_score}};
}

DetectorConfig DetectorConfig::from_json(const nlohmann::json& j) {
    DetectorConfig c;
    c.channels = j.value("channels", c.channels);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.patience = j.value("patience", c.patience);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.seed = j.value("seed", c.seed);
    c.hflip = j.value("hflip", c.hflip);
    c.jitter = j.value("jitter", c.jitter);
    c.max_detections = j.value("max_detections", c.max_detections);
    c.min_score = j.value("min_score", c.min_score);
    return c;
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

GroundTruth DetectionSet::ground_truth() const {
    GroundTruth g;
    for (std::size_t i = 0; i < ids.size(); ++i) g[ids[i]] = annotations[i];
    return g;
}

DetectionSet DetectionSet::subset(std::span<const std::size_t> indices) const {
    DetectionSet s;
    std::vector<std::int64_t> idx;
    for (auto i : indices) {
        if (i >= size()) throw Error("detection subset index out of range");
        idx.push_back(static_cast<std::int64_t>(i));
        s.ids.push_back(ids[i]);
        s.annotations.push_back(annotations[i]);
    }
    s.images = idx.empty() ? torch::empty({0, images.size(1), images.size(2), images.size(3)})
                           : images.index_select(0, torch::tensor(idx, torch::kInt64));
    return s;
}

DetectionSet DetectionSet::concat(const DetectionSet& a, const DetectionSet& b) {
    if (a.size() == 0) return b;
    if (b.size() == 0) return a;
    DetectionSet s = a;
    s.images = torch::cat({a.images, b.images});
    s.ids.insert(s.ids.end(), b.ids.begin(), b.ids.end());
    s.annotations.insert(s.annotations.end(), b.annotations.begin(), b.annotations.end());
    return s;
}

DetectionSet make_detection_set(std::span<const Image> images, std::span<const dataset::AnnotatedImage> entries) {
    if (images.size() != entries.size()) throw Error("make_detection_set: images and entries differ in count");
    DetectionSet s;
    s.images = diffusion::to_batch(images);
    for (const auto& e : entries) {
        s.ids.push_back(e.image_id);
        s.annotations.push_back(e.annotations);
    }
    return s;
}

DetectionSet load_detection_set(const dataset::DatasetManifest& m, std::optional<Split> split) {
    std::vector<Image> images;
    std::vector<dataset::AnnotatedImage> entries;
    for (const auto& e : m.entries) {
        if (split && e.split != split) continue;
        images.push_back(dataset::load_image(m, e));
        entries.push_back(e);
    }
    if (entries.empty()) throw Error("no images in the requested split");
    return make_detection_set(images, entries);
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

namespace {

void conv_bn(nn::Sequential& seq, int in, int out, int stride = 1) {
    seq->push_back(nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
    seq->push_back(nn::BatchNorm2d(out));
    seq->push_back(nn::ReLU());
}

constexpr int kStride = 4;
constexpr int kHeadChannels = kNumCategories + 4;

} // namespace

CenterNetImpl::CenterNetImpl(int channels) : channels_(channels) {
    const int c = channels;
    backbone_ = nn::Sequential();
    conv_bn(backbone_, 3, c, 2);
    conv_bn(backbone_, c, c);
    conv_bn(backbone_, c, 2 * c, 2);
    conv_bn(backbone_, 2 * c, 2 * c);
    conv_bn(backbone_, 2 * c, 2 * c);
    register_module("backbone", backbone_);
    auto out = nn::Conv2d(nn::Conv2dOptions(2 * c, kHeadChannels, 1));
    {
        torch::NoGradGuard ng;
        // Heatmap prior of 0.1 so the focal loss starts stable.
        out->bias.slice(0, 0, kNumCategories).fill_(-2.19);
    }
    head_ = register_module("head", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(2 * c, 2 * c, 3).padding(1)), nn::ReLU(), out));
}

torch::Tensor CenterNetImpl::backbone(const torch::Tensor& x) {
    if (x.dim() != 4 || x.size(1) != 3 || x.size(2) % kStride || x.size(3) % kStride)
        throw Error("detector input must be Nx3xHxW with sides divisible by 4");
    return backbone_->forward(x);
}

CenterNetImpl::Output CenterNetImpl::forward(const torch::Tensor& x) {
    const auto h = head_->forward(backbone(x));
    return {h.slice(1, 0, kNumCategories), h.slice(1, kNumCategories, kNumCategories + 2),
            h.slice(1, kNumCategories + 2, kNumCategories + 4)};
}

double gaussian_radius(double h, double w, double o) {
    const double b1 = h + w, c1 = w * h * (1 - o) / (1 + o);
    const double r1 = (b1 + std::sqrt(b1 * b1 - 4 * c1)) / 2;
    const double b2 = 2 * (h + w), c2 = (1 - o) * w * h;
    const double r2 = (b2 + std::sqrt(b2 * b2 - 16 * c2)) / 2;
    const double a3 = 4 * o, b3 = -2 * o * (h + w), c3 = (o - 1) * w * h;
    const double r3 = (b3 + std::sqrt(b3 * b3 - 4 * a3 * c3)) / 2;
    return std::min({r1, r2, r3});
}

nlohmann::json TrainHistory::to_json() const {
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& [e, ap] : val_ap) curve.push_back({e, ap});
    return {{"val_ap", curve}, {"best_epoch", best_epoch}, {"best_val_ap", best_val_ap},
            {"epochs_run", epochs_run}, {"stopped_early", stopped_early}};
}

DetectorModel DetectorModel::create(const DetectorConfig& cfg) {
    cfg.validate();
    DetectorModel m;
    m.config = cfg;
    torch::manual_seed(util::derive_seed(cfg.seed, "detector.init"));
    m.net = CenterNet(cfg.channels);
    return m;
}

void DetectorModel::save(const std::filesystem::path& path) const {
    nlohmann::json meta = {{"config", config.to_json()}, {"threshold", threshold}, {"history", history.to_json()},
                           {"provenance", provenance}};
    torch::serialize::OutputArchive root, sub;
    root.write("meta", c10::IValue(meta.dump()));
    net->save(sub);
    root.write("net", sub);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    root.save_to(tmp);
    std::filesystem::rename(tmp, path);
}

DetectorModel DetectorModel::load(const std::filesystem::path& path) {
    torch::serialize::InputArchive root, sub;
    try {
        root.load_from(path.string());
    } catch (const c10::Error&) {
        throw Error("cannot read detector checkpoint " + path.string());
    }
    c10::IValue v;
    root.read("meta", v);
    const auto meta = nlohmann::json::parse(v.toStringRef());
    auto m = create(DetectorConfig::from_json(meta.at("config")));
    root.read("net", sub);
    m.net->load(sub);
    m.threshold = meta.at("threshold");
    const auto& h = meta.at("history");
    for (const auto& p : h.at("val_ap")) m.history.val_ap.emplace_back(p[0].get<int>(), p[1].get<double>());
    m.history.best_epoch = h.at("best_epoch");
    m.history.best_val_ap = h.at("best_val_ap");
    m.history.epochs_run = h.at("epochs_run");
    m.history.stopped_early = h.at("stopped_early");
    m.provenance = meta.value("provenance", nlohmann::json::object());
    m.net->eval();
    return m;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct Targets {
    torch::Tensor heatmap, size, offset, mask;
};

Targets build_targets(const std::vector<std::vector<Annotation>>& anns, int h, int w) {
    const auto n = static_cast<std::int64_t>(anns.size());
    Targets t{torch::zeros({n, kNumCategories, h, w}), torch::zeros({n, 2, h, w}), torch::zeros({n, 2, h, w}),
              torch::zeros({n, 1, h, w})};
    auto hm = t.heatmap.accessor<float, 4>();
    auto sz = t.size.accessor<float, 4>();
    auto off = t.offset.accessor<float, 4>();
    auto mk = t.mask.accessor<float, 4>();
    for (std::int64_t i = 0; i < n; ++i) {
        for (const auto& a : anns[static_cast<std::size_t>(i)]) {
            const double cx = a.box.cx * w, cy = a.box.cy * h, bw = a.box.w * w, bh = a.box.h * h;
            const int ix = std::clamp(static_cast<int>(cx), 0, w - 1), iy = std::clamp(static_cast<int>(cy), 0, h - 1);
            const int k = category_index(a.category);
            const double r = std::max(0.0, std::floor(gaussian_radius(bh, bw)));
            const double sigma = (2 * r + 1) / 6;
            const int ir = static_cast<int>(r);
            for (int y = std::max(0, iy - ir); y <= std::min(h - 1, iy + ir); ++y) {
                for (int x = std::max(0, ix - ir); x <= std::min(w - 1, ix + ir); ++x) {
                    const double d2 = (x - ix) * (x - ix) + (y - iy) * (y - iy);
                    const float g = static_cast<float>(std::exp(-d2 / (2 * sigma * sigma)));
                    hm[i][k][y][x] = std::max(hm[i][k][y][x], g);
                }
            }
            sz[i][0][iy][ix] = static_cast<float>(bw);
            sz[i][1][iy][ix] = static_cast<float>(bh);
            off[i][0][iy][ix] = static_cast<float>(cx - ix);
            off[i][1][iy][ix] = static_cast<float>(cy - iy);
            mk[i][0][iy][ix] = 1.0f;
        }
    }
    return t;
}

torch::Tensor focal_loss(const torch::Tensor& logits, const torch::Tensor& target) {
    const auto pos = target.eq(1.0f).to(torch::kFloat32);
    const auto neg = 1.0f - pos;
    const auto p = torch::sigmoid(logits).clamp(1e-4, 1 - 1e-4);
    const auto pos_loss = -torch::log_sigmoid(logits) * (1 - p).pow(2) * pos;
    const auto neg_loss = -torch::log_sigmoid(-logits) * p.pow(2) * (1 - target).pow(4) * neg;
    const auto num_pos = pos.sum().clamp_min(1.0);
    return (pos_loss.sum() + neg_loss.sum()) / num_pos;
}

torch::Tensor detection_loss(CenterNetImpl::Output& out, const Targets& t) {
    const auto num = t.mask.sum().clamp_min(1.0);
    const auto size_l = (torch::abs(out.size - t.size) * t.mask).sum() / num;
    const auto off_l = (torch::abs(out.offset - t.offset) * t.mask).sum() / num;
    return focal_loss(out.heatmap, t.heatmap) + 0.1 * size_l + off_l;
}

void augment(torch::Tensor& x, std::vector<std::vector<Annotation>>& anns, const DetectorConfig& cfg, std::uint64_t seed) {
    auto gen = at::detail::createCPUGenerator(seed);
    const auto n = x.size(0);
    const auto u = torch::rand({n, 3}, gen);
    if (cfg.hflip) {
        const auto flip = u.select(1, 0) < 0.5;
        x = torch::where(flip.view({n, 1, 1, 1}), x.flip({3}), x);
        auto f = flip.accessor<bool, 1>();
        for (std::int64_t i = 0; i < n; ++i)
            if (f[i])
                for (auto& a : anns[static_cast<std::size_t>(i)]) a.box.cx = 1.0 - a.box.cx;
    }
    if (cfg.jitter > 0) {
        const auto contrast = (1 + cfg.jitter * (2 * u.select(1, 1) - 1)).view({n, 1, 1, 1});
        const auto bright = (cfg.jitter * (2 * u.select(1, 2) - 1)).view({n, 1, 1, 1});
        const auto mean = x.mean({1, 2, 3}, true);
        x = ((x - mean) * contrast + mean + bright).clamp(-1, 1);
    }
}

} // namespace

std::vector<Detection> predict(DetectorModel& model, const DetectionSet& set) {
    torch::NoGradGuard ng;
    model.net->eval();
    std::vector<Detection> out;
    const auto n = static_cast<std::int64_t>(set.size());
    for (std::int64_t s = 0; s < n; s += 64) {
        const auto e = std::min(n, s + 64);
        auto o = model.net->forward(set.images.slice(0, s, e));
        const auto p = torch::sigmoid(o.heatmap);
        const auto peaks = p * (torch::max_pool2d(p, 3, 1, 1) == p).to(torch::kFloat32);
        const int h = static_cast<int>(p.size(2)), w = static_cast<int>(p.size(3));
        const int k = std::min<int>(model.config.max_detections, kNumCategories * h * w);
        const auto [scores, idx] = peaks.flatten(1).topk(k, 1);
        auto sc = scores.accessor<float, 2>();
        auto ix = idx.accessor<std::int64_t, 2>();
        auto sz = o.size.accessor<float, 4>();
        auto off = o.offset.accessor<float, 4>();
        for (std::int64_t i = 0; i < e - s; ++i) {
            for (int j = 0; j < k; ++j) {
                const double score = sc[i][j];
                if (score < model.config.min_score) break;
                const auto flat = ix[i][j];
                const int cat = static_cast<int>(flat / (h * w));
                const int cell = static_cast<int>(flat % (h * w));
                const int y = cell / w, x = cell % w;
                const double cx = (x + std::clamp<double>(off[i][0][y][x], 0, 1)) / w;
                const double cy = (y + std::clamp<double>(off[i][1][y][x], 0, 1)) / h;
                const double bw = std::max<double>(sz[i][0][y][x], 0.25) / w;
                const double bh = std::max<double>(sz[i][1][y][x], 0.25) / h;
                Detection d;
                d.image_id = set.ids[static_cast<std::size_t>(s + i)];
                d.category = category_from_index(cat);
                d.box = BoundingBox{cx, cy, bw, bh}.clamped();
                d.confidence = std::clamp(score, 0.0, 1.0);
                if (d.box.w > 0 && d.box.h > 0) out.push_back(d);
            }
        }
    }
    return out;
}

DetectorModel train_detector(const DetectionSet& train, const DetectionSet& val, const DetectorConfig& cfg,
                             nlohmann::json provenance) {
    if (train.size() == 0) throw Error("train_detector: empty training set");
    if (val.size() == 0) throw Error("train_detector: empty validation set");
    auto model = DetectorModel::create(cfg);
    model.provenance = std::move(provenance);
    const auto gts = val.ground_truth();
    const auto n = static_cast<std::int64_t>(train.size());
    const int oh = static_cast<int>(train.images.size(2)) / kStride, ow = static_cast<int>(train.images.size(3)) / kStride;

    torch::optim::AdamW opt(model.net->parameters(), torch::optim::AdamWOptions(cfg.lr).weight_decay(cfg.weight_decay));
    std::vector<torch::Tensor> best;
    double best_ap = -1;
    int since = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        model.net->train();
        auto gen = at::detail::createCPUGenerator(util::derive_seed(cfg.seed, "detector.epoch", epoch));
        const auto perm = torch::randperm(n, gen, torch::kInt64);
        auto pa = perm.accessor<std::int64_t, 1>();
        std::int64_t batch_no = 0;
        for (std::int64_t s = 0; s < n; s += cfg.batch_size, ++batch_no) {
            const auto e = std::min(n, s + cfg.batch_size);
            if (e - s < 2 && n >= 2) continue;  // batch norm needs more than one sample
            const auto idx = perm.slice(0, s, e);
            auto x = train.images.index_select(0, idx);
            std::vector<std::vector<Annotation>> anns;
            for (std::int64_t i = s; i < e; ++i) anns.push_back(train.annotations[static_cast<std::size_t>(pa[i])]);
            augment(x, anns, cfg, util::derive_seed(cfg.seed, "detector.aug", epoch * 100003 + batch_no));
            opt.zero_grad();
            auto out = model.net->forward(x);
            auto loss = detection_loss(out, build_targets(anns, oh, ow));
            if (!std::isfinite(loss.item<double>())) throw Error("detector loss diverged at epoch " + std::to_string(epoch));
            loss.backward();
            opt.step();
        }
        model.history.epochs_run = epoch + 1;
        if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
            const auto preds = predict(model, val);
            const double ap = evaluate(preds, gts).ap50;
            model.history.val_ap.emplace_back(epoch + 1, ap);
            if (ap > best_ap) {
                best_ap = ap;
                best = diffusion::snapshot(*model.net);
                model.history.best_epoch = epoch + 1;
                model.history.best_val_ap = ap;
                since = 0;
            } else {
                since += cfg.eval_every;
                if (since >= cfg.patience) {
                    model.history.stopped_early = true;
                    break;
                }
            }
        }
    }
    if (!best.empty()) diffusion::restore(*model.net, best);
    model.net->eval();
    model.threshold = best_f1_threshold(predict(model, val), gts);
    return model;
}

torch::Tensor detector_features(DetectorModel& model, const torch::Tensor& images) {
    torch::NoGradGuard ng;
    model.net->eval();
    std::vector<torch::Tensor> out;
    for (std::int64_t s = 0; s < images.size(0); s += 64)
        out.push_back(model.net->backbone(images.slice(0, s, std::min(images.size(0), s + 64))).mean({2, 3}));
    return torch::cat(out);
}

torch::Tensor category_probabilities(DetectorModel& model, const torch::Tensor& images) {
    torch::NoGradGuard ng;
    model.net->eval();
    std::vector<torch::Tensor> out;
    for (std::int64_t s = 0; s < images.size(0); s += 64) {
        const auto o = model.net->forward(images.slice(0, s, std::min(images.size(0), s + 64)));
        out.push_back(torch::softmax(o.heatmap.flatten(2).amax(2), 1));
    }
    return torch::cat(out);
}

} // namespace endosynth::detection
