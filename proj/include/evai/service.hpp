#pragma once

#include <cstdint>
#include <filesystem>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "evai/bundle.hpp"
#include "evai/evidence_report.hpp"

namespace evai {

/// Transport-independent response: status, content type and body.
struct ServiceResponse {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;

    nlohmann::json json() const { return nlohmann::json::parse(body); }
};

struct ServiceOptions {
    std::size_t cache_size = 256;
    /// Reloads without a path argument read from here.
    std::filesystem::path bundle_path;
};

/// Wire form of an evidence report.
nlohmann::json report_json(const EvidenceReport& report, const std::string& method, Eigen::Index k);

/// The evidence endpoints, independent of the HTTP layer. Every handler maps
/// errors to {code, message, detail} bodies and never throws.
class EvidenceService {
public:
    EvidenceService(std::shared_ptr<const ModelBundle> bundle, ServiceOptions options = {});

    ServiceResponse upload_image(std::span<const std::uint8_t> bytes);
    ServiceResponse catalog() const;
    /// Body: {image_id, hypothesis, method?, k?}
    ServiceResponse evidence(const std::string& request_body);
    ServiceResponse prototypes(const std::string& concept_id, const std::string& method,
                               const std::string& k = {}) const;
    ServiceResponse annotation(const std::string& image_id, const std::string& concept_id,
                               const std::string& method, const std::string& k = {}, bool png = false);
    ServiceResponse image_bytes(const std::string& image_id);
    ServiceResponse prototype_image(const std::string& image_id) const;
    /// Loads a bundle and swaps it in atomically; empty path = configured path.
    ServiceResponse reload(const std::string& request_body);

    void replace_bundle(std::shared_ptr<const ModelBundle> bundle);
    std::shared_ptr<const ModelBundle> bundle() const;
    std::size_t cached_sessions() const;

private:
    struct Session {
        std::string image_id;
        std::vector<std::uint8_t> bytes;
        std::mutex mutex;
        std::string backbone_id;
        std::optional<FeatureBatch> features;
        std::map<std::string, ConceptScoreMap> maps;  // keyed by basis hash
    };

    std::shared_ptr<Session> find_session(const std::string& image_id);
    std::shared_ptr<Session> make_session(std::string image_id, std::vector<std::uint8_t> bytes) const;
    ConceptScoreMap scores_for(Session& session, const ModelBundle& bundle, const BasisEntry& entry) const;
    void prepare(Session& session, const ModelBundle& bundle) const;

    mutable std::mutex bundle_mutex_;
    std::shared_ptr<const ModelBundle> bundle_;
    ServiceOptions options_;

    mutable std::mutex session_mutex_;
    std::unordered_map<std::string, std::shared_ptr<Session>> pinned_;  // example images
    std::list<std::string> lru_;
    std::unordered_map<std::string, std::pair<std::shared_ptr<Session>, std::list<std::string>::iterator>> sessions_;
    std::uint64_t next_id_ = 1;
    std::uint64_t id_salt_ = 0;
};

struct ServerConfig {
    std::string host = "0.0.0.0";
    int port = 8080;
    std::filesystem::path bundle_path;
    std::size_t cache_size = 256;
    /// Directory of static UI assets served at "/" (optional).
    std::filesystem::path static_dir;
};

/// Blocks serving `service` over HTTP until stop() is called from another thread.
class HttpServer {
public:
    explicit HttpServer(EvidenceService& service);
    ~HttpServer();

    /// Binds (port 0 picks a free port) and returns the bound port.
    int bind(const std::string& host, int port);
    void mount_static(const std::filesystem::path& dir);
    void listen();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace evai
