#include "endosynth/study/session_store.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <ctime>
#include <random>

#include "endosynth/error.hpp"
#include "endosynth/util/io.hpp"
#include "endosynth/util/rng.hpp"

namespace endosynth::study {

namespace {

bool valid_rater_id(const std::string& id) {
    if (id.empty() || id.size() > 64) return false;
    return std::all_of(id.begin(), id.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.'; });
}

std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const auto t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

} // namespace

std::vector<PoolImage> read_pool(const std::filesystem::path& path) {
    std::vector<PoolImage> pool;
    for (const auto& j : util::read_jsonl(path)) {
        PoolImage p;
        p.image_id = j.at("image_id").get<std::string>();
        p.path = j.at("image_path").get<std::string>();
        if (p.path.is_relative()) p.path = path.parent_path() / p.path;
        const auto t = truth_from_name(j.at("truth").get<std::string>());
        if (!t) throw Error("pool record " + p.image_id + ": truth must be 'real' or 'synthetic'");
        p.truth = *t;
        pool.push_back(std::move(p));
    }
    return pool;
}

SessionStore::SessionStore(std::vector<PoolImage> pool, std::filesystem::path log_path, std::size_t per_class)
    : pool_(std::move(pool)), log_path_(std::move(log_path)), per_class_(per_class) {
    if (per_class_ == 0) throw Error("study sessions need at least one image per class");
    for (std::size_t i = 0; i < pool_.size(); ++i) {
        if (!pool_index_.emplace(pool_[i].image_id, i).second) throw Error("duplicate pool image " + pool_[i].image_id);
    }
    if (log_path_.has_parent_path()) std::filesystem::create_directories(log_path_.parent_path());
    replay();
    log_.open(log_path_, std::ios::app);
    if (!log_) throw Error("cannot open session log " + log_path_.string());
}

void SessionStore::replay() {
    if (!std::filesystem::exists(log_path_)) return;
    for (const auto& rec : util::read_jsonl(log_path_)) {
        const auto type = rec.at("type").get<std::string>();
        if (type == "session") {
            StudySession s;
            s.session_id = rec.at("session_id").get<std::string>();
            s.rater_id = rec.at("rater_id").get<std::string>();
            s.seed = rec.at("seed").get<std::uint64_t>();
            s.order = rec.at("order").get<std::vector<std::string>>();
            for (const auto& id : s.order) {
                if (!pool_index_.contains(id)) throw Error("session log references unknown image " + id);
            }
            sessions_[s.session_id] = std::move(s);
            ++counter_;
        } else if (type == "vote") {
            auto& s = sessions_.at(rec.at("session_id").get<std::string>());
            if (rec.at("index").get<std::size_t>() != s.cursor()) throw Error("session log has out-of-order vote");
            s.votes.push_back({likert_from_index(rec.at("level").get<int>()), rec.value("timestamp", std::string{}),
                               rec.value("client_timestamp", std::string{})});
        }
    }
}

void SessionStore::append(const nlohmann::json& record) {
    log_ << record.dump() << '\n';
    log_.flush();
    if (!log_) throw Error("failed to append to session log");
}

std::string SessionStore::new_session_id() {
    std::random_device rd;
    const std::uint64_t r = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
    return util::hex64(util::mix64(r ^ ++counter_));
}

StudySession SessionStore::create_session(const std::string& rater_id, std::optional<std::uint64_t> seed) {
    if (!valid_rater_id(rater_id)) throw Error("invalid rater id (use letters, digits, '_', '-', '.')");
    std::lock_guard lock(mu_);

    std::vector<std::string> real, synth;
    for (const auto& p : pool_) (p.truth == Truth::Real ? real : synth).push_back(p.image_id);
    if (real.size() < per_class_ || synth.size() < per_class_) {
        throw Error("image pool needs at least " + std::to_string(per_class_) + " real and synthetic images");
    }

    StudySession s;
    s.rater_id = rater_id;
    s.seed = seed.value_or(util::derive_seed(std::random_device{}(), "study-session", counter_));
    util::Rng rng(util::derive_seed(s.seed, "study-order"));
    util::shuffle(real.begin(), real.end(), rng);
    util::shuffle(synth.begin(), synth.end(), rng);
    s.order.assign(real.begin(), real.begin() + static_cast<std::ptrdiff_t>(per_class_));
    s.order.insert(s.order.end(), synth.begin(), synth.begin() + static_cast<std::ptrdiff_t>(per_class_));
    util::shuffle(s.order.begin(), s.order.end(), rng);

    do {
        s.session_id = new_session_id();
    } while (sessions_.contains(s.session_id));

    append({{"type", "session"}, {"session_id", s.session_id}, {"rater_id", s.rater_id}, {"seed", s.seed},
            {"order", s.order}, {"timestamp", utc_now()}});
    sessions_[s.session_id] = s;
    return s;
}

std::optional<StudySession> SessionStore::session(const std::string& session_id) const {
    std::lock_guard lock(mu_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) return std::nullopt;
    return it->second;
}

std::optional<Progress> SessionStore::progress(const std::string& session_id) const {
    std::lock_guard lock(mu_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) return std::nullopt;
    return Progress{it->second.cursor(), it->second.order.size(), it->second.completed()};
}

VoteResult SessionStore::record_vote(const std::string& session_id, std::size_t index, Likert level,
                                     const std::string& client_timestamp) {
    std::lock_guard lock(mu_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) return {VoteStatus::UnknownSession, std::nullopt};
    auto& s = it->second;
    if (index >= s.order.size()) return {VoteStatus::InvalidIndex, std::nullopt};
    if (index < s.cursor()) return {VoteStatus::Duplicate, s.votes[index].level};
    if (index > s.cursor()) return {VoteStatus::OutOfOrder, std::nullopt};

    RecordedVote v{level, utc_now(), client_timestamp};
    append({{"type", "vote"}, {"session_id", session_id}, {"index", index}, {"level", static_cast<int>(level)},
            {"timestamp", v.timestamp}, {"client_timestamp", client_timestamp}});
    s.votes.push_back(std::move(v));
    return {VoteStatus::Recorded, level};
}

const PoolImage* SessionStore::item_image(const std::string& session_id, std::size_t index) const {
    std::lock_guard lock(mu_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end() || index >= it->second.order.size()) return nullptr;
    return &pool_[pool_index_.at(it->second.order[index])];
}

std::optional<std::vector<LikertVote>> SessionStore::export_votes(const std::string& session_id) const {
    std::lock_guard lock(mu_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) return std::nullopt;
    const auto& s = it->second;
    std::vector<LikertVote> out;
    for (std::size_t k = 0; k < s.votes.size(); ++k) {
        const auto& img = pool_[pool_index_.at(s.order[k])];
        out.push_back({s.rater_id, img.image_id, s.votes[k].level, img.truth, s.votes[k].timestamp});
    }
    return out;
}

} // namespace endosynth::study
