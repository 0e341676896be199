#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace endosynth::study {

/// Six-level agreement with "This is a REAL image", in scale order.
enum class Likert : int {
    StronglyDisagree = 0,
    Disagree,
    SlightlyDisagree,
    SlightlyAgree,
    Agree,
    StronglyAgree,
};

inline constexpr std::array<Likert, 6> kLikertLevels = {Likert::StronglyDisagree, Likert::Disagree,
                                                        Likert::SlightlyDisagree, Likert::SlightlyAgree,
                                                        Likert::Agree,            Likert::StronglyAgree};

enum class Truth { Real, Synthetic };

double likert_to_prob(Likert level);
/// Throws endosynth::Error for values outside 0..5.
Likert likert_from_index(int idx);
std::string_view to_string(Likert level);
/// Accepts the display label ("Strongly agree") or snake case ("strongly_agree").
std::optional<Likert> likert_from_name(std::string_view name);

std::string_view to_string(Truth t);
std::optional<Truth> truth_from_name(std::string_view name);

struct LikertVote {
    std::string rater_id;
    std::string image_id;
    Likert level = Likert::SlightlyAgree;
    Truth truth = Truth::Real;
    std::string timestamp;

    friend bool operator==(const LikertVote&, const LikertVote&) = default;
};

/// Predicted "real" iff the mapped probability is strictly above 0.5.
bool predicts_real(Likert level);
bool vote_correct(const LikertVote& v);

/// Mann-Whitney AUC with real as the positive class; ties count 1/2.
/// Throws when the votes do not contain both classes.
double rater_auc(std::span<const LikertVote> votes);
double rater_accuracy(std::span<const LikertVote> votes);

struct RaterResult {
    std::string rater_id;
    double auc = 0;
    double accuracy = 0;
    std::size_t n_votes = 0;
};

struct StudyResult {
    std::vector<RaterResult> raters;
    double auc_mean = 0, auc_std = 0;
    double accuracy_mean = 0, accuracy_std = 0;
    std::vector<std::string> skipped;  // raters without both classes
};

/// Groups votes by rater (first-appearance order); mean and population std over
/// raters with a defined AUC. Throws when no rater qualifies.
StudyResult aggregate_study(std::span<const LikertVote> votes);

/// CSV: rater_id,image_id,level,mapped_prob,truth,correct
std::string votes_csv(std::span<const LikertVote> votes);
std::vector<LikertVote> parse_votes_csv(std::string_view text);

/// Scatter data for the per-rater confidence plot: rater_id,image_id,confidence,truth,correct
std::string scatter_csv(std::span<const LikertVote> votes);

nlohmann::json to_json(const StudyResult& r);

} // namespace endosynth::study
