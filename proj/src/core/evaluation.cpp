#include "endosynth/detection/evaluation.hpp"

#include <algorithm>
#include <numeric>

#include "endosynth/error.hpp"
#include "endosynth/util/io.hpp"

namespace endosynth::detection {

double iou(const BoundingBox& a, const BoundingBox& b) {
    const double iw = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
    const double ih = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

std::size_t count_gt(const GroundTruth& gts) {
    std::size_t n = 0;
    for (const auto& [id, anns] : gts) n += anns.size();
    return n;
}

std::vector<std::size_t> matching_order(std::span<const Detection> preds) {
    std::map<std::string, std::size_t> seen;
    std::vector<std::size_t> rank_in_image(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) rank_in_image[i] = seen[preds[i].image_id]++;

    std::vector<std::size_t> order(preds.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (preds[a].confidence != preds[b].confidence) return preds[a].confidence > preds[b].confidence;
        if (preds[a].image_id != preds[b].image_id) return preds[a].image_id < preds[b].image_id;
        return rank_in_image[a] < rank_in_image[b];
    });
    return order;
}

std::vector<bool> match(std::span<const Detection> preds, const GroundTruth& gts, double iou_thresh) {
    std::map<std::string, std::vector<bool>> claimed;
    for (const auto& [id, anns] : gts) claimed[id].assign(anns.size(), false);

    std::vector<bool> tp(preds.size(), false);
    for (std::size_t i : matching_order(preds)) {
        const auto& p = preds[i];
        auto it = gts.find(p.image_id);
        if (it == gts.end()) continue;
        auto& used = claimed[p.image_id];
        double best = -1;
        std::size_t best_j = 0;
        for (std::size_t j = 0; j < it->second.size(); ++j) {
            const auto& g = it->second[j];
            if (used[j] || g.category != p.category) continue;
            const double v = iou(p.box, g.box);
            if (v > best) best = v, best_j = j;
        }
        if (best >= iou_thresh) {
            used[best_j] = true;
            tp[i] = true;
        }
    }
    return tp;
}

std::vector<PrPoint> pr_curve(std::span<const Detection> preds, const GroundTruth& gts, double iou_thresh) {
    const auto tp = match(preds, gts, iou_thresh);
    const auto order = matching_order(preds);
    std::vector<PrPoint> curve;
    PrPoint cur;
    for (std::size_t k = 0; k < order.size(); ++k) {
        const auto i = order[k];
        (tp[i] ? cur.tp : cur.fp) += 1;
        const bool group_end = k + 1 == order.size() || preds[order[k + 1]].confidence != preds[i].confidence;
        if (group_end) {
            cur.threshold = preds[i].confidence;
            curve.push_back(cur);
        }
    }
    return curve;
}

double average_precision(std::span<const PrPoint> curve, std::size_t n_gt) {
    if (n_gt == 0 || curve.empty()) return 0.0;
    // Precision envelope from the right, then sum envelope * recall increment.
    std::vector<double> envelope(curve.size());
    double running = 0;
    for (std::size_t i = curve.size(); i-- > 0;) {
        const double p = static_cast<double>(curve[i].tp) / static_cast<double>(curve[i].tp + curve[i].fp);
        running = std::max(running, p);
        envelope[i] = running;
    }
    double ap = 0;
    std::size_t prev_tp = 0;
    for (std::size_t i = 0; i < curve.size(); ++i) {
        ap += static_cast<double>(curve[i].tp - prev_tp) / static_cast<double>(n_gt) * envelope[i];
        prev_tp = curve[i].tp;
    }
    return ap;
}

namespace {

CategoryEval eval_subset(std::span<const Detection> preds, const GroundTruth& gts, double iou_thresh,
                         double conf_threshold, bool& recall_defined) {
    CategoryEval out;
    out.n_gt = count_gt(gts);
    out.n_pred = preds.size();
    const auto curve = pr_curve(preds, gts, iou_thresh);
    out.ap50 = average_precision(curve, out.n_gt);

    // Operating point: last curve point whose threshold is >= conf_threshold.
    PrPoint at{};
    for (const auto& p : curve) {
        if (p.threshold >= conf_threshold) at = p;
    }
    const std::size_t admitted = at.tp + at.fp;
    out.precision = admitted ? static_cast<double>(at.tp) / static_cast<double>(admitted) : 0.0;
    recall_defined = out.n_gt > 0;
    out.recall = recall_defined ? static_cast<double>(at.tp) / static_cast<double>(out.n_gt) : 0.0;
    return out;
}

} // namespace

EvalResult evaluate(std::span<const Detection> preds, const GroundTruth& gts, double iou_thresh, double conf_threshold) {
    EvalResult r;
    const auto all = eval_subset(preds, gts, iou_thresh, conf_threshold, r.recall_defined);
    r.precision = all.precision;
    r.recall = all.recall;
    r.ap50 = all.ap50;
    r.n_gt = all.n_gt;
    r.n_pred = all.n_pred;
    r.conf_threshold = conf_threshold;

    for (auto cat : kAllCategories) {
        std::vector<Detection> sub;
        for (const auto& p : preds) {
            if (p.category == cat) sub.push_back(p);
        }
        GroundTruth gsub;
        for (const auto& [id, anns] : gts) {
            auto& dst = gsub[id];
            for (const auto& a : anns) {
                if (a.category == cat) dst.push_back(a);
            }
        }
        bool defined = true;
        r.per_category[category_index(cat)] = eval_subset(sub, gsub, iou_thresh, conf_threshold, defined);
    }
    return r;
}

double best_f1_threshold(std::span<const Detection> preds, const GroundTruth& gts, double iou_thresh) {
    const auto curve = pr_curve(preds, gts, iou_thresh);
    const std::size_t n_gt = count_gt(gts);
    double best_f1 = -1, best_t = 0;
    for (const auto& p : curve) {
        const double prec = static_cast<double>(p.tp) / static_cast<double>(p.tp + p.fp);
        const double rec = n_gt ? static_cast<double>(p.tp) / static_cast<double>(n_gt) : 0.0;
        const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
        if (f1 > best_f1) best_f1 = f1, best_t = p.threshold;
    }
    return best_t;
}

nlohmann::json to_json(const Detection& d) {
    return {{"image_id", d.image_id}, {"category", category_index(d.category)}, {"cx", d.box.cx}, {"cy", d.box.cy},
            {"w", d.box.w},           {"h", d.box.h},                           {"confidence", d.confidence}};
}

Detection detection_from_json(const nlohmann::json& j) {
    Detection d;
    d.image_id = j.at("image_id").get<std::string>();
    const auto& cat = j.at("category");
    if (cat.is_string()) {
        auto c = category_from_name(cat.get<std::string>());
        if (!c) throw Error("unknown category in prediction: " + cat.get<std::string>());
        d.category = *c;
    } else {
        d.category = category_from_index(cat.get<int>());
    }
    d.box = {j.at("cx").get<double>(), j.at("cy").get<double>(), j.at("w").get<double>(), j.at("h").get<double>()};
    d.confidence = j.at("confidence").get<double>();
    if (!(d.confidence >= 0 && d.confidence <= 1)) throw Error("prediction confidence outside [0,1] for " + d.image_id);
    return d;
}

void write_predictions(const std::filesystem::path& path, std::span<const Detection> preds) {
    std::vector<nlohmann::json> recs;
    recs.reserve(preds.size());
    for (const auto& d : preds) recs.push_back(to_json(d));
    util::write_jsonl(path, recs);
}

std::vector<Detection> read_predictions(const std::filesystem::path& path) {
    std::vector<Detection> out;
    for (const auto& j : util::read_jsonl(path)) out.push_back(detection_from_json(j));
    return out;
}

nlohmann::json to_json(const EvalResult& r) {
    nlohmann::json per = nlohmann::json::object();
    for (auto cat : kAllCategories) {
        const auto& c = r.per_category[category_index(cat)];
        if (c.n_gt == 0 && c.n_pred == 0) continue;
        per[std::string(to_string(cat))] = {
            {"n_gt", c.n_gt}, {"n_pred", c.n_pred}, {"precision", c.precision}, {"recall", c.recall}, {"ap50", c.ap50}};
    }
    return {{"precision", r.precision},
            {"recall", r.recall},
            {"ap50", r.ap50},
            {"recall_defined", r.recall_defined},
            {"conf_threshold", r.conf_threshold},
            {"n_gt", r.n_gt},
            {"n_pred", r.n_pred},
            {"ap_interpolation", "all-point"},
            {"per_category", per}};
}

} // namespace endosynth::detection
