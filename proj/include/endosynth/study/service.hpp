#pragma once

#include <memory>
#include <string>

#include "endosynth/study/session_store.hpp"

namespace httplib {
class Server;
}

namespace endosynth::study {

inline constexpr const char* kApiVersion = "1";

/// JSON-over-HTTP front end for a SessionStore.
///
///   POST /sessions                  {"rater_id", "seed"?}   -> 201 {session_id, total}
///   GET  /sessions/{id}/next                                -> 200 {index, total, image_url} | {completed: true}
///   GET  /sessions/{id}/images/{k}                          -> image bytes
///   POST /sessions/{id}/votes       {"index", "level", "client_timestamp"?}
///                                   -> 201 recorded | 409 already voted | 400 out of order
///   GET  /sessions/{id}/progress                            -> 200 {voted, total, completed}
///   GET  /sessions/{id}/export                              -> 200 CSV once completed, else 409
///
/// Truth labels and pool image ids appear only in the export.
class StudyService {
public:
    explicit StudyService(SessionStore& store);
    ~StudyService();

    StudyService(const StudyService&) = delete;
    StudyService& operator=(const StudyService&) = delete;

    /// Binds host:port (port 0 picks a free one) and returns the bound port.
    int bind(const std::string& host, int port);
    /// Serves until stop(); call after bind().
    void listen();
    void stop();
    bool running() const;

private:
    void install_routes();

    SessionStore& store_;
    std::unique_ptr<httplib::Server> server_;
};

} // namespace endosynth::study
