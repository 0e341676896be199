#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "endosynth/conditioning.hpp"
#include "endosynth/dataset.hpp"
#include "endosynth/detection/evaluation.hpp"
#include "endosynth/error.hpp"
#include "endosynth/genmetrics.hpp"
#include "endosynth/selection.hpp"
#include "endosynth/study/analysis.hpp"

namespace py = pybind11;
using namespace endosynth;
using nlohmann::json;

namespace {

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_py(const py::handle& obj) {
    return json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

BoundingBox box_of(const std::array<double, 4>& b) { return {b[0], b[1], b[2], b[3]}; }

LesionCategory category_of(const json& c) {
    if (c.is_string()) {
        auto cat = category_from_name(c.get<std::string>());
        if (!cat) throw Error("unknown category: " + c.get<std::string>());
        return *cat;
    }
    return category_from_index(c.get<int>());
}

Modality modality_of(const std::string& name) {
    auto m = modality_from_name(name);
    if (!m) throw Error("unknown modality: " + name);
    return *m;
}

genmetrics::FeatureSet features(const Eigen::MatrixXd& m) { return {m, "python"}; }

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "endosynth core bindings";
    py::register_exception<Error>(m, "Error", PyExc_ValueError);

    m.def("fid", [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) { return genmetrics::fid(features(a), features(b)); },
          py::arg("a"), py::arg("b"), "FID between two N x D feature matrices.");
    m.def(
        "frechet_distance",
        [](const Eigen::VectorXd& mu_a, const Eigen::MatrixXd& cov_a, const Eigen::VectorXd& mu_b,
           const Eigen::MatrixXd& cov_b) { return genmetrics::frechet_distance({mu_a, cov_a}, {mu_b, cov_b}); },
        py::arg("mu_a"), py::arg("cov_a"), py::arg("mu_b"), py::arg("cov_b"));
    m.def("fid_ratio", &genmetrics::fid_ratio, py::arg("fid_rs"), py::arg("fid_rr"));
    m.def(
        "inception_score",
        [](const Eigen::MatrixXd& probs, int splits) { return to_py(genmetrics::to_json(genmetrics::inception_score(probs, splits))); },
        py::arg("probs"), py::arg("splits") = 10, "IS over an N x K probability matrix; returns {mean, std, splits}.");

    m.def(
        "iou", [](const std::array<double, 4>& a, const std::array<double, 4>& b) { return detection::iou(box_of(a), box_of(b)); },
        py::arg("a"), py::arg("b"), "IoU of two (cx, cy, w, h) boxes.");

    // predictions: [{image_id, category, cx, cy, w, h, confidence}]
    // ground_truth: {image_id: [{category, cx, cy, w, h}]}
    m.def(
        "evaluate",
        [](const py::list& predictions, const py::dict& ground_truth, double iou_thresh, double conf_threshold) {
            std::vector<detection::Detection> preds;
            for (const auto& p : predictions) preds.push_back(detection::detection_from_json(from_py(p)));
            detection::GroundTruth gts;
            const json gt = from_py(ground_truth);
            for (const auto& [id, anns] : gt.items()) {
                auto& v = gts[id];
                for (const auto& a : anns)
                    v.push_back({category_of(a.at("category")),
                                 {a.at("cx").get<double>(), a.at("cy").get<double>(), a.at("w").get<double>(),
                                  a.at("h").get<double>()}});
            }
            return to_py(detection::to_json(detection::evaluate(preds, gts, iou_thresh, conf_threshold)));
        },
        py::arg("predictions"), py::arg("ground_truth"), py::arg("iou_thresh") = 0.5, py::arg("conf_threshold") = 0.0);

    m.def(
        "select_top_uncertain",
        [](const std::vector<std::tuple<std::string, double, double, double>>& rows, double fraction) {
            std::vector<selection::UncertaintyRecord> recs;
            for (const auto& [id, c1, c2, c3] : rows) recs.push_back({id, {c1, c2, c3}, selection::variance3(c1, c2, c3)});
            const auto s = selection::select_top_uncertain(std::move(recs), fraction);
            py::list out;
            for (std::size_t i = 0; i < s.ledger.size(); ++i) {
                const auto& r = s.ledger[i];
                py::dict d;
                d["image_id"] = r.image_id;
                d["confidence"] = py::make_tuple(r.confidence[0], r.confidence[1], r.confidence[2]);
                d["variance"] = r.variance;
                d["selected"] = i < s.selected_count;
                out.append(d);
            }
            return out;
        },
        py::arg("records"), py::arg("fraction") = 0.10,
        "Ledger of (image_id, c1, c2, c3) rows in descending variance, with the selected flag.");

    m.def("likert_to_prob", [](int level) { return study::likert_to_prob(study::likert_from_index(level)); }, py::arg("level"));
    m.def(
        "rater_auc",
        [](const std::vector<int>& levels, const std::vector<std::string>& truths) {
            if (levels.size() != truths.size()) throw Error("levels and truths differ in length");
            std::vector<study::LikertVote> votes;
            for (std::size_t i = 0; i < levels.size(); ++i) {
                auto t = study::truth_from_name(truths[i]);
                if (!t) throw Error("unknown truth label: " + truths[i]);
                votes.push_back({"r", std::to_string(i), study::likert_from_index(levels[i]), *t, ""});
            }
            return study::rater_auc(votes);
        },
        py::arg("levels"), py::arg("truths"));
    m.def(
        "aggregate_study", [](const std::string& csv) { return to_py(study::to_json(study::aggregate_study(study::parse_votes_csv(csv)))); },
        py::arg("votes_csv"));

    m.def(
        "build_caption",
        [](const std::string& modality, const py::object& category) {
            return conditioning::build_caption(modality_of(modality), category_of(from_py(category))).text;
        },
        py::arg("modality"), py::arg("category"));
    m.def(
        "parse_caption",
        [](const std::string& text) {
            const auto c = conditioning::parse_caption(text);
            return py::make_tuple(std::string(to_string(c.modality)), std::string(to_string(c.category)));
        },
        py::arg("text"));

    m.def(
        "split_counts",
        [](std::size_t n, const std::array<double, 3>& ratios) {
            const auto c = dataset::split_counts(n, ratios);
            return py::make_tuple(c.train, c.val, c.test);
        },
        py::arg("n"), py::arg("ratios") = std::array<double, 3>{0.8, 0.1, 0.1});
}
