#include "endosynth/study/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "endosynth/error.hpp"
#include "endosynth/util/io.hpp"

namespace endosynth::study {

namespace {

constexpr std::array<double, 6> kProb = {0.05, 0.23, 0.41, 0.50, 0.77, 0.95};
constexpr std::array<std::string_view, 6> kLabel = {"Strongly disagree", "Disagree",       "Slightly disagree",
                                                    "Slightly agree",    "Agree",          "Strongly agree"};
constexpr std::array<std::string_view, 6> kSnake = {"strongly_disagree", "disagree",       "slightly_disagree",
                                                    "slightly_agree",    "agree",          "strongly_agree"};

void mean_std(const std::vector<double>& v, double& mean, double& sd) {
    mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    sd = std::sqrt(ss / static_cast<double>(v.size()));
}

std::vector<std::string_view> split_csv_line(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

} // namespace

double likert_to_prob(Likert level) { return kProb[static_cast<int>(level)]; }

Likert likert_from_index(int idx) {
    if (idx < 0 || idx > 5) throw Error("Likert level index out of range: " + std::to_string(idx));
    return static_cast<Likert>(idx);
}

std::string_view to_string(Likert level) { return kLabel[static_cast<int>(level)]; }

std::optional<Likert> likert_from_name(std::string_view name) {
    for (int i = 0; i < 6; ++i) {
        if (name == kLabel[i] || name == kSnake[i]) return static_cast<Likert>(i);
    }
    return std::nullopt;
}

std::string_view to_string(Truth t) { return t == Truth::Real ? "real" : "synthetic"; }

std::optional<Truth> truth_from_name(std::string_view name) {
    if (name == "real") return Truth::Real;
    if (name == "synthetic") return Truth::Synthetic;
    return std::nullopt;
}

bool predicts_real(Likert level) { return likert_to_prob(level) > 0.5; }

bool vote_correct(const LikertVote& v) { return predicts_real(v.level) == (v.truth == Truth::Real); }

double rater_auc(std::span<const LikertVote> votes) {
    // Average ranks over tied mapped probabilities, then U = R_pos - n_pos (n_pos + 1) / 2.
    std::vector<std::pair<double, bool>> scored;
    for (const auto& v : votes) scored.emplace_back(likert_to_prob(v.level), v.truth == Truth::Real);
    const auto n_pos = static_cast<double>(std::count_if(scored.begin(), scored.end(), [](auto& s) { return s.second; }));
    const double n_neg = static_cast<double>(scored.size()) - n_pos;
    if (n_pos == 0 || n_neg == 0) throw Error("rater_auc: votes must cover both real and synthetic images");

    std::sort(scored.begin(), scored.end(), [](auto& a, auto& b) { return a.first < b.first; });
    double rank_sum = 0;
    for (std::size_t i = 0; i < scored.size();) {
        std::size_t j = i;
        while (j < scored.size() && scored[j].first == scored[i].first) ++j;
        const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k) {
            if (scored[k].second) rank_sum += avg_rank;
        }
        i = j;
    }
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg);
}

double rater_accuracy(std::span<const LikertVote> votes) {
    if (votes.empty()) throw Error("rater_accuracy: no votes");
    const auto correct = std::count_if(votes.begin(), votes.end(), vote_correct);
    return static_cast<double>(correct) / static_cast<double>(votes.size());
}

StudyResult aggregate_study(std::span<const LikertVote> votes) {
    std::vector<std::string> order;
    std::map<std::string, std::vector<LikertVote>> by_rater;
    for (const auto& v : votes) {
        if (!by_rater.contains(v.rater_id)) order.push_back(v.rater_id);
        by_rater[v.rater_id].push_back(v);
    }
    StudyResult res;
    std::vector<double> aucs, accs;
    for (const auto& id : order) {
        const auto& vs = by_rater[id];
        try {
            RaterResult r{id, rater_auc(vs), rater_accuracy(vs), vs.size()};
            aucs.push_back(r.auc);
            accs.push_back(r.accuracy);
            res.raters.push_back(std::move(r));
        } catch (const Error&) {
            res.skipped.push_back(id);
        }
    }
    if (res.raters.empty()) throw Error("aggregate_study: no rater with votes on both classes");
    mean_std(aucs, res.auc_mean, res.auc_std);
    mean_std(accs, res.accuracy_mean, res.accuracy_std);
    return res;
}

std::string votes_csv(std::span<const LikertVote> votes) {
    std::string out = "rater_id,image_id,level,mapped_prob,truth,correct\n";
    for (const auto& v : votes) {
        out += v.rater_id + "," + v.image_id + "," + std::string(to_string(v.level)) + "," +
               util::format_double(likert_to_prob(v.level)) + "," + std::string(to_string(v.truth)) + "," +
               (vote_correct(v) ? "1" : "0") + "\n";
    }
    return out;
}

std::vector<LikertVote> parse_votes_csv(std::string_view text) {
    std::vector<LikertVote> out;
    std::size_t pos = 0, lineno = 0;
    std::vector<std::string_view> header;
    while (pos < text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        std::string_view line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) continue;
        auto cols = split_csv_line(line);
        if (header.empty()) {
            header = cols;
            continue;
        }
        if (cols.size() != header.size()) throw ParseError(lineno, "column count mismatch in votes CSV");
        LikertVote v;
        bool have_level = false, have_truth = false;
        for (std::size_t k = 0; k < cols.size(); ++k) {
            const auto& h = header[k];
            if (h == "rater_id") v.rater_id = cols[k];
            else if (h == "image_id") v.image_id = cols[k];
            else if (h == "level") {
                auto l = likert_from_name(cols[k]);
                if (!l) throw ParseError(lineno, "unknown Likert level '" + std::string(cols[k]) + "'");
                v.level = *l;
                have_level = true;
            } else if (h == "truth") {
                auto t = truth_from_name(cols[k]);
                if (!t) throw ParseError(lineno, "unknown truth '" + std::string(cols[k]) + "'");
                v.truth = *t;
                have_truth = true;
            } else if (h == "timestamp") v.timestamp = cols[k];
        }
        if (!have_level || !have_truth || v.rater_id.empty()) throw ParseError(lineno, "votes CSV needs rater_id, level and truth");
        out.push_back(std::move(v));
    }
    return out;
}

std::string scatter_csv(std::span<const LikertVote> votes) {
    std::string out = "rater_id,image_id,confidence,truth,correct\n";
    for (const auto& v : votes) {
        out += v.rater_id + "," + v.image_id + "," + util::format_double(likert_to_prob(v.level)) + "," +
               std::string(to_string(v.truth)) + "," + (vote_correct(v) ? "1" : "0") + "\n";
    }
    return out;
}

nlohmann::json to_json(const StudyResult& r) {
    nlohmann::json raters = nlohmann::json::array();
    for (const auto& x : r.raters) {
        raters.push_back({{"rater_id", x.rater_id}, {"auc", x.auc}, {"accuracy", x.accuracy}, {"n_votes", x.n_votes}});
    }
    return {{"raters", raters},
            {"auc", {{"mean", r.auc_mean}, {"std", r.auc_std}}},
            {"accuracy", {{"mean", r.accuracy_mean}, {"std", r.accuracy_std}}},
            {"skipped_raters", r.skipped},
            {"accuracy_rule", "real iff mapped probability > 0.50"},
            {"auc_method", "mann-whitney"}};
}

} // namespace endosynth::study
