#include "endosynth/study/service.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "endosynth/error.hpp"
#include "endosynth/util/io.hpp"

namespace endosynth::study {

namespace {

using nlohmann::json;

void send_json(httplib::Response& res, int status, json body) {
    body["api_version"] = kApiVersion;
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& msg) { send_json(res, status, {{"error", msg}}); }

std::string content_type_for(const std::filesystem::path& p) {
    const auto ext = p.extension().string();
    if (ext == ".png") return "image/png";
    if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
    return "application/octet-stream";
}

} // namespace

StudyService::StudyService(SessionStore& store) : store_(store), server_(std::make_unique<httplib::Server>()) {
    install_routes();
}

StudyService::~StudyService() { stop(); }

void StudyService::install_routes() {
    auto& srv = *server_;

    srv.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
        json body;
        try {
            body = json::parse(req.body.empty() ? "{}" : req.body);
        } catch (const json::parse_error&) {
            return send_error(res, 400, "malformed JSON");
        }
        if (!body.contains("rater_id") || !body["rater_id"].is_string()) return send_error(res, 400, "rater_id required");
        std::optional<std::uint64_t> seed;
        if (body.contains("seed") && body["seed"].is_number_unsigned()) seed = body["seed"].get<std::uint64_t>();
        try {
            const auto s = store_.create_session(body["rater_id"].get<std::string>(), seed);
            send_json(res, 201, {{"session_id", s.session_id}, {"total", s.order.size()}});
        } catch (const Error& e) {
            send_error(res, 400, e.what());
        }
    });

    srv.Get(R"(/sessions/([0-9a-f]+)/next)", [this](const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        const auto p = store_.progress(id);
        if (!p) return send_error(res, 404, "unknown session");
        if (p->completed) return send_json(res, 200, {{"completed", true}, {"total", p->total}});
        send_json(res, 200,
                  {{"completed", false},
                   {"index", p->voted},
                   {"total", p->total},
                   {"image_url", "/sessions/" + id + "/images/" + std::to_string(p->voted)}});
    });

    srv.Get(R"(/sessions/([0-9a-f]+)/images/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        const auto idx = std::stoul(req.matches[2]);
        const auto* img = store_.item_image(id, idx);
        if (!img) return send_error(res, 404, "unknown session item");
        try {
            res.set_content(util::read_text(img->path), content_type_for(img->path));
            res.set_header("Cache-Control", "no-store");
        } catch (const Error&) {
            send_error(res, 500, "image unavailable");
        }
    });

    srv.Post(R"(/sessions/([0-9a-f]+)/votes)", [this](const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        json body;
        try {
            body = json::parse(req.body);
        } catch (const json::parse_error&) {
            return send_error(res, 400, "malformed JSON");
        }
        if (!body.contains("index") || !body["index"].is_number_unsigned()) return send_error(res, 400, "index required");
        std::optional<Likert> level;
        if (body.contains("level")) {
            if (body["level"].is_string()) level = likert_from_name(body["level"].get<std::string>());
            else if (body["level"].is_number_integer() && body["level"].get<int>() >= 0 && body["level"].get<int>() <= 5)
                level = likert_from_index(body["level"].get<int>());
        }
        if (!level) return send_error(res, 400, "level must be one of the six Likert levels");
        const auto result = store_.record_vote(id, body["index"].get<std::size_t>(), *level,
                                               body.value("client_timestamp", std::string{}));
        switch (result.status) {
        case VoteStatus::Recorded: {
            const auto p = store_.progress(id);
            return send_json(res, 201, {{"recorded", true}, {"voted", p->voted}, {"total", p->total}, {"completed", p->completed}});
        }
        case VoteStatus::Duplicate:
            return send_json(res, 409, {{"error", "already voted"}, {"recorded_level", std::string(to_string(*result.recorded))}});
        case VoteStatus::OutOfOrder: return send_error(res, 400, "vote out of order");
        case VoteStatus::InvalidIndex: return send_error(res, 400, "index outside session");
        case VoteStatus::UnknownSession: return send_error(res, 404, "unknown session");
        }
    });

    srv.Get(R"(/sessions/([0-9a-f]+)/progress)", [this](const httplib::Request& req, httplib::Response& res) {
        const auto p = store_.progress(req.matches[1]);
        if (!p) return send_error(res, 404, "unknown session");
        send_json(res, 200, {{"voted", p->voted}, {"total", p->total}, {"completed", p->completed}});
    });

    srv.Get(R"(/sessions/([0-9a-f]+)/export)", [this](const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        const auto p = store_.progress(id);
        if (!p) return send_error(res, 404, "unknown session");
        if (!p->completed) return send_error(res, 409, "session not completed");
        const auto votes = store_.export_votes(id);
        res.status = 200;
        res.set_content(votes_csv(*votes), "text/csv");
    });
}

int StudyService::bind(const std::string& host, int port) {
    if (port == 0) {
        const int bound = server_->bind_to_any_port(host);
        if (bound < 0) throw Error("cannot bind study service on " + host);
        return bound;
    }
    if (!server_->bind_to_port(host, port)) throw Error("cannot bind study service on " + host + ":" + std::to_string(port));
    return port;
}

void StudyService::listen() { server_->listen_after_bind(); }

void StudyService::stop() {
    if (server_) server_->stop();
}

bool StudyService::running() const { return server_->is_running(); }

} // namespace endosynth::study
