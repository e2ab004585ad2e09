#include "evai/service.hpp"

#include <random>
#include <sstream>

#include <httplib.h>

#include "evai/concept_discovery.hpp"
#include "evai/errors.hpp"
#include "evai/feature_pipeline.hpp"
#include "evai/hash.hpp"
#include "evai/json_schema.hpp"

namespace evai {
namespace {

using nlohmann::json;

/// An error with its HTTP status already decided.
struct ApiError {
    int status;
    std::string code;
    std::string message;
    json detail = json::object();
};

ServiceResponse json_response(int status, const json& body) {
    return {status, "application/json", body.dump()};
}

ServiceResponse error_response(const ApiError& e) {
    return json_response(e.status, {{"code", e.code}, {"message", e.message}, {"detail", e.detail}});
}

int status_for(const Error& e) {
    const auto& code = e.code();
    if (code == "NotFoundError") return 404;
    if (code == "LabelError" || code == "IntegrityError") return 422;
    return 400;
}

template <typename Fn>
ServiceResponse guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const ApiError& e) {
        return error_response(e);
    } catch (const Error& e) {
        return error_response({status_for(e), e.code(), e.what()});
    } catch (const std::exception& e) {
        return error_response({500, "InternalError", e.what()});
    }
}

std::string image_content_type(std::span<const std::uint8_t> bytes) {
    if (bytes.size() >= 8 && bytes[0] == 0x89 && bytes[1] == 'P' && bytes[2] == 'N' && bytes[3] == 'G')
        return "image/png";
    if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) return "image/jpeg";
    return "application/octet-stream";
}

Eigen::Index parse_k(const std::string& text) {
    if (text.empty()) return 0;
    try {
        std::size_t used = 0;
        const long v = std::stol(text, &used);
        if (used == text.size() && v >= 0) return v;
    } catch (const std::exception&) {
    }
    throw ApiError{400, "BadRequest", "k must be a non-negative integer", {{"k", text}}};
}

Eigen::Index parse_concept(const std::string& text, Eigen::Index k) {
    Eigen::Index v = -1;
    try {
        std::size_t used = 0;
        v = std::stol(text, &used);
        if (used != text.size()) v = -1;
    } catch (const std::exception&) {
    }
    if (v < 0) throw ApiError{400, "BadRequest", "concept_id must be a non-negative integer", {{"concept_id", text}}};
    if (v >= k)
        throw ApiError{404, "NotFound", "no concept " + text, {{"concept_id", v}, {"k", k}}};
    return v;
}

const BasisEntry& basis_or_422(const ModelBundle& bundle, const std::string& method, Eigen::Index k) {
    auto m = bundle.methods.find(method);
    if (m == bundle.methods.end())
        throw ApiError{422, "UnknownMethod", "method '" + method + "' is not available",
                       {{"available", bundle.method_names()}}};
    const auto key = k == 0 ? m->second.default_k : k;
    auto b = m->second.bases.find(key);
    if (b == m->second.bases.end()) {
        std::vector<Eigen::Index> ks;
        for (const auto& [kk, entry] : m->second.bases) ks.push_back(kk);
        throw ApiError{422, "UnknownBasis", "method '" + method + "' has no basis with k = " + std::to_string(key),
                       {{"available_k", ks}}};
    }
    return b->second;
}

json annotation_json(const Annotation& a) {
    json polygon = json::array();
    for (const auto& [x, y] : a.polygon) polygon.push_back({x, y});
    const auto png = a.mask.empty() ? std::vector<std::uint8_t>{} : encode_mask_png(a);
    return {{"width", a.width}, {"height", a.height}, {"mask_png_base64", base64_encode(png)}, {"polygon", polygon}};
}

std::string preprocess_key(const ModelBundle& b) {
    std::ostringstream key;
    key.precision(17);
    key << b.backbone->id() << '|' << b.preprocess.side;
    for (int c = 0; c < 3; ++c) key << '|' << b.preprocess.mean[c] << '|' << b.preprocess.std[c];
    return key.str();
}

}  // namespace

json report_json(const EvidenceReport& report, const std::string& method, Eigen::Index k) {
    json concepts = json::array();
    for (const auto& c : report.concepts)
        concepts.push_back({{"id", c.id},
                            {"display_name", c.display_name},
                            {"woe_value", c.woe_value},
                            {"annotation", annotation_json(c.annotation)},
                            {"prototype_ids", c.prototype_ids}});
    return {{"image_id", report.image_id},
            {"hypothesis", report.hypothesis},
            {"hypothesis_index", report.decomposition.hypothesis},
            {"method", method},
            {"k", k},
            {"concepts", concepts},
            {"total_woe", report.decomposition.total_woe},
            {"prior_log_odds", report.decomposition.prior_log_odds},
            {"posterior_log_odds", report.decomposition.posterior_log_odds}};
}

EvidenceService::EvidenceService(std::shared_ptr<const ModelBundle> bundle, ServiceOptions options)
    : options_(std::move(options)) {
    if (!bundle) throw ConfigError("the evidence service needs a model bundle");
    if (options_.cache_size == 0) throw ConfigError("cache size must be at least 1");
    id_salt_ = std::random_device{}();
    replace_bundle(std::move(bundle));
}

void EvidenceService::replace_bundle(std::shared_ptr<const ModelBundle> bundle) {
    bundle->validate();
    std::unordered_map<std::string, std::shared_ptr<Session>> pinned;
    for (const auto& e : bundle->examples) {
        auto s = make_session(e.image_id, e.bytes);
        prepare(*s, *bundle);
        pinned.emplace(e.image_id, std::move(s));
    }
    std::scoped_lock lock(bundle_mutex_, session_mutex_);
    bundle_ = std::move(bundle);
    pinned_ = std::move(pinned);
}

std::shared_ptr<const ModelBundle> EvidenceService::bundle() const {
    std::lock_guard lock(bundle_mutex_);
    return bundle_;
}

std::size_t EvidenceService::cached_sessions() const {
    std::lock_guard lock(session_mutex_);
    return sessions_.size();
}

std::shared_ptr<EvidenceService::Session> EvidenceService::make_session(std::string image_id,
                                                                        std::vector<std::uint8_t> bytes) const {
    auto s = std::make_shared<Session>();
    s->image_id = std::move(image_id);
    s->bytes = std::move(bytes);
    return s;
}

void EvidenceService::prepare(Session& s, const ModelBundle& bundle) const {
    // Caller holds s.mutex or owns s exclusively.
    const auto key = preprocess_key(bundle);
    if (s.features && s.backbone_id == key) return;
    const auto image = preprocess_image(s.bytes, bundle.preprocess);
    const std::vector<NormalizedImage> images{image};
    const std::vector<std::string> ids{s.image_id};
    s.features = extract_features(*bundle.backbone, images, ids);
    s.backbone_id = key;
    s.maps.clear();
}

ConceptScoreMap EvidenceService::scores_for(Session& s, const ModelBundle& bundle, const BasisEntry& entry) const {
    std::lock_guard lock(s.mutex);
    prepare(s, bundle);
    auto it = s.maps.find(entry.hash);
    if (it == s.maps.end()) it = s.maps.emplace(entry.hash, transform_scores(*s.features, entry.basis).at(0)).first;
    return it->second;
}

std::shared_ptr<EvidenceService::Session> EvidenceService::find_session(const std::string& image_id) {
    std::lock_guard lock(session_mutex_);
    if (auto p = pinned_.find(image_id); p != pinned_.end()) return p->second;
    auto it = sessions_.find(image_id);
    if (it == sessions_.end())
        throw ApiError{404, "NotFound", "unknown image id '" + image_id + "'", {{"image_id", image_id}}};
    lru_.splice(lru_.begin(), lru_, it->second.second);
    return it->second.first;
}

ServiceResponse EvidenceService::upload_image(std::span<const std::uint8_t> bytes) {
    return guarded([&] {
        const auto snapshot = bundle();
        std::string id;
        {
            std::lock_guard lock(session_mutex_);
            std::ostringstream os;
            os << "img-" << next_id_++ << '-' << std::hex << (id_salt_ & 0xffffff);
            id = os.str();
        }
        auto s = make_session(id, {bytes.begin(), bytes.end()});
        prepare(*s, *snapshot);  // raises DecodeError before the id is issued
        {
            std::lock_guard lock(session_mutex_);
            lru_.push_front(id);
            sessions_[id] = {s, lru_.begin()};
            while (sessions_.size() > options_.cache_size) {
                sessions_.erase(lru_.back());
                lru_.pop_back();
            }
        }
        return json_response(200, {{"image_id", id},
                                   {"content_type", image_content_type(bytes)},
                                   {"bytes", bytes.size()}});
    });
}

ServiceResponse EvidenceService::catalog() const {
    return guarded([&] {
        const auto b = bundle();
        json examples = json::array();
        for (const auto& e : b->examples) examples.push_back(e.image_id);
        json methods = json::array();
        for (const auto& name : b->method_names()) {
            const auto& m = b->methods.at(name);
            std::vector<Eigen::Index> ks;
            for (const auto& [k, entry] : m.bases) ks.push_back(k);
            methods.push_back({{"name", name}, {"default_k", m.default_k}, {"k_values", ks}});
        }
        return json_response(200, {{"hypotheses", b->hypotheses},
                                   {"examples", examples},
                                   {"methods", b->method_names()},
                                   {"method_details", methods}});
    });
}

ServiceResponse EvidenceService::evidence(const std::string& request_body) {
    return guarded([&] {
        json req;
        try {
            req = json::parse(request_body);
        } catch (const json::exception& e) {
            throw ApiError{400, "BadRequest", "request body is not JSON", {{"parser", e.what()}}};
        }
        if (!req.is_object() || !req.contains("image_id") || !req["image_id"].is_string() ||
            !req.contains("hypothesis") || !req["hypothesis"].is_string())
            throw ApiError{400, "BadRequest", "expected {image_id: string, hypothesis: string, method?, k?}"};
        const auto image_id = req["image_id"].get<std::string>();
        const auto hypothesis = req["hypothesis"].get<std::string>();
        const auto method = req.value("method", std::string("ice"));
        Eigen::Index k = 0;
        if (req.contains("k") && !req["k"].is_null()) {
            if (!req["k"].is_number_integer() || req["k"].get<long>() < 0)
                throw ApiError{400, "BadRequest", "k must be a non-negative integer"};
            k = req["k"].get<Eigen::Index>();
        }

        const auto b = bundle();
        auto session = find_session(image_id);
        const int h = class_index(b->hypotheses, hypothesis);
        if (h < 0)
            throw ApiError{422, "UnknownHypothesis", "unknown hypothesis '" + hypothesis + "'",
                           {{"hypotheses", b->hypotheses}}};
        const auto& entry = basis_or_422(*b, method, k);
        const auto map = scores_for(*session, *b, entry);
        const auto report =
            evidence_report(entry.model, entry.basis, map, pool_scores(map), entry.prototypes, h, b->annotation);
        auto body = report_json(report, method, entry.basis.k());
        body["basis_hash"] = entry.hash;
        return json_response(200, body);
    });
}

ServiceResponse EvidenceService::prototypes(const std::string& concept_id, const std::string& method,
                                            const std::string& k) const {
    return guarded([&] {
        const auto b = bundle();
        const auto& entry = basis_or_422(*b, method.empty() ? "ice" : method, parse_k(k));
        const auto j = parse_concept(concept_id, entry.basis.k());
        json list = json::array();
        if (!entry.prototypes.empty())
            for (const auto& id : entry.prototypes[static_cast<std::size_t>(j)])
                list.push_back({{"image_id", id}, {"has_image", b->prototype_images.count(id) > 0}});
        return json_response(200, {{"method", method.empty() ? "ice" : method},
                                   {"k", entry.basis.k()},
                                   {"concept_id", j},
                                   {"display_name", entry.basis.display_name(j)},
                                   {"prototypes", list}});
    });
}

ServiceResponse EvidenceService::annotation(const std::string& image_id, const std::string& concept_id,
                                            const std::string& method, const std::string& k, bool png) {
    return guarded([&] {
        const auto b = bundle();
        auto session = find_session(image_id);
        const auto m = method.empty() ? std::string("ice") : method;
        const auto& entry = basis_or_422(*b, m, parse_k(k));
        const auto j = parse_concept(concept_id, entry.basis.k());
        const auto map = scores_for(*session, *b, entry);
        const auto a = concept_heatmap(map, static_cast<std::size_t>(j), b->annotation.width, b->annotation.height,
                                       b->annotation.threshold);
        if (png) {
            const auto bytes = encode_mask_png(a);
            return ServiceResponse{200, "image/png", std::string(bytes.begin(), bytes.end())};
        }
        auto body = annotation_json(a);
        body["image_id"] = image_id;
        body["method"] = m;
        body["k"] = entry.basis.k();
        body["concept_id"] = j;
        body["display_name"] = entry.basis.display_name(j);
        return json_response(200, body);
    });
}

ServiceResponse EvidenceService::image_bytes(const std::string& image_id) {
    return guarded([&] {
        auto s = find_session(image_id);
        return ServiceResponse{200, image_content_type(s->bytes), std::string(s->bytes.begin(), s->bytes.end())};
    });
}

ServiceResponse EvidenceService::prototype_image(const std::string& image_id) const {
    return guarded([&] {
        const auto b = bundle();
        auto it = b->prototype_images.find(image_id);
        if (it == b->prototype_images.end())
            throw ApiError{404, "NotFound", "no prototype image '" + image_id + "'"};
        return ServiceResponse{200, image_content_type(it->second), std::string(it->second.begin(), it->second.end())};
    });
}

ServiceResponse EvidenceService::reload(const std::string& request_body) {
    return guarded([&] {
        std::filesystem::path path = options_.bundle_path;
        if (!request_body.empty()) {
            json req;
            try {
                req = json::parse(request_body);
            } catch (const json::exception&) {
                throw ApiError{400, "BadRequest", "request body is not JSON"};
            }
            if (req.contains("path")) path = req["path"].get<std::string>();
        }
        if (path.empty()) throw ApiError{400, "BadRequest", "no bundle path configured"};
        auto loaded = std::make_shared<const ModelBundle>(load_bundle(path));
        replace_bundle(loaded);
        return json_response(200, {{"status", "reloaded"}, {"path", path.string()}});
    });
}

struct HttpServer::Impl {
    EvidenceService& service;
    httplib::Server server;
    explicit Impl(EvidenceService& s) : service(s) {}
};

namespace {

void send(httplib::Response& res, const ServiceResponse& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type.c_str());
}

std::string param(const httplib::Request& req, const char* name) {
    return req.has_param(name) ? req.get_param_value(name) : std::string();
}

}  // namespace

HttpServer::HttpServer(EvidenceService& service) : impl_(std::make_unique<Impl>(service)) {
    auto& srv = impl_->server;
    auto& svc = impl_->service;
    srv.set_payload_max_length(64u << 20);

    srv.Get("/api/health", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(R"({"status":"ok"})", "application/json");
    });
    srv.Get("/api/catalog", [&svc](const httplib::Request&, httplib::Response& res) { send(res, svc.catalog()); });
    srv.Get("/api/schema/evidence", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(evidence_report_schema().dump(2), "application/schema+json");
    });
    srv.Post("/api/images", [&svc](const httplib::Request& req, httplib::Response& res) {
        const std::string body =
            req.is_multipart_form_data() && req.has_file("file") ? req.get_file_value("file").content : req.body;
        const auto* data = reinterpret_cast<const std::uint8_t*>(body.data());
        send(res, svc.upload_image({data, body.size()}));
    });
    srv.Get(R"(/api/images/([^/]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
        send(res, svc.image_bytes(req.matches[1]));
    });
    srv.Get(R"(/api/images/([^/]+)/annotation/([^/]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
        send(res, svc.annotation(req.matches[1], req.matches[2], param(req, "method"), param(req, "k"),
                                 param(req, "format") == "png"));
    });
    srv.Post("/api/evidence", [&svc](const httplib::Request& req, httplib::Response& res) {
        send(res, svc.evidence(req.body));
    });
    srv.Get(R"(/api/prototypes/([^/]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
        send(res, svc.prototypes(req.matches[1], param(req, "method"), param(req, "k")));
    });
    srv.Get(R"(/api/prototype-images/([^/]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
        send(res, svc.prototype_image(req.matches[1]));
    });
    srv.Post("/api/admin/reload", [&svc](const httplib::Request& req, httplib::Response& res) {
        send(res, svc.reload(req.body));
    });
    srv.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
        if (!res.body.empty()) return;
        const json body{{"code", res.status == 404 ? "NotFound" : "HttpError"},
                        {"message", "no route for " + req.method + " " + req.path},
                        {"detail", json::object()}};
        res.set_content(body.dump(), "application/json");
    });
}

HttpServer::~HttpServer() = default;

int HttpServer::bind(const std::string& host, int port) {
    if (port == 0) {
        const int bound = impl_->server.bind_to_any_port(host.c_str());
        if (bound < 0) throw IOError("cannot bind " + host);
        return bound;
    }
    if (!impl_->server.bind_to_port(host.c_str(), port))
        throw IOError("cannot bind " + host + ":" + std::to_string(port));
    return port;
}

void HttpServer::mount_static(const std::filesystem::path& dir) {
    if (!impl_->server.set_mount_point("/", dir.string()))
        throw IOError("static directory " + dir.string() + " does not exist");
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() { impl_->server.stop(); }

}  // namespace evai
