#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "endosynth/study/analysis.hpp"

namespace endosynth::study {

struct PoolImage {
    std::string image_id;
    std::filesystem::path path;
    Truth truth = Truth::Real;
};

/// Pool file: JSON Lines {image_id, image_path, truth}; relative paths resolve
/// against the file's directory.
std::vector<PoolImage> read_pool(const std::filesystem::path& path);

struct RecordedVote {
    Likert level = Likert::SlightlyAgree;
    std::string timestamp;
    std::string client_timestamp;
};

struct StudySession {
    std::string session_id;
    std::string rater_id;
    std::uint64_t seed = 0;
    std::vector<std::string> order;  // pool image ids, fixed at creation
    std::vector<RecordedVote> votes; // votes[k] answers order[k]

    std::size_t cursor() const { return votes.size(); }
    bool completed() const { return votes.size() == order.size(); }
};

struct Progress {
    std::size_t voted = 0;
    std::size_t total = 0;
    bool completed = false;
};

enum class VoteStatus { Recorded, Duplicate, OutOfOrder, UnknownSession, InvalidIndex };

struct VoteResult {
    VoteStatus status = VoteStatus::Recorded;
    std::optional<Likert> recorded;  // the retained vote for Duplicate
};

/// Blinded study sessions over a labelled image pool. Every state change is
/// appended to a JSON Lines log and replayed on construction, so a restarted
/// service resumes where it stopped. All methods are thread-safe.
class SessionStore {
public:
    SessionStore(std::vector<PoolImage> pool, std::filesystem::path log_path, std::size_t per_class = 10);

    SessionStore(const SessionStore&) = delete;
    SessionStore& operator=(const SessionStore&) = delete;

    /// Draws per_class real and per_class synthetic images and shuffles them.
    /// Throws on an invalid rater id or when the pool is too small.
    StudySession create_session(const std::string& rater_id, std::optional<std::uint64_t> seed = std::nullopt);

    std::optional<StudySession> session(const std::string& session_id) const;
    std::optional<Progress> progress(const std::string& session_id) const;

    VoteResult record_vote(const std::string& session_id, std::size_t index, Likert level,
                           const std::string& client_timestamp = {});

    /// The image behind a session item, or nullptr.
    const PoolImage* item_image(const std::string& session_id, std::size_t index) const;

    /// Votes joined with truth labels, in presentation order.
    std::optional<std::vector<LikertVote>> export_votes(const std::string& session_id) const;

    std::size_t per_class() const { return per_class_; }

private:
    void replay();
    void append(const nlohmann::json& record);
    std::string new_session_id();

    std::vector<PoolImage> pool_;
    std::map<std::string, std::size_t> pool_index_;
    std::filesystem::path log_path_;
    std::size_t per_class_;
    std::map<std::string, StudySession> sessions_;
    std::ofstream log_;
    std::uint64_t counter_ = 0;
    mutable std::mutex mu_;
};

} // namespace endosynth::study
