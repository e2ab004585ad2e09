#include <doctest.h>

#include <cmath>
#include <fstream>
#include <future>
#include <thread>

#include "evai/bundle.hpp"
#include "evai/errors.hpp"
#include "evai/hash.hpp"
#include "evai/json_schema.hpp"
#include "evai/service.hpp"
#include "evai/synthetic.hpp"
#include "support.hpp"

// After Eigen: <resolv.h> defines a _res macro that clashes with Eigen internals.
#include <httplib.h>

using namespace evai;
using nlohmann::json;

namespace {

std::shared_ptr<const ModelBundle> demo() {
    static const auto bundle = std::make_shared<const ModelBundle>(make_demo_bundle());
    return bundle;
}

std::string evidence_body(const std::string& id, const std::string& h, const std::string& method = "ice") {
    return json{{"image_id", id}, {"hypothesis", h}, {"method", method}}.dump();
}

}  // namespace

TEST_CASE("catalog lists seven hypotheses, three examples and both methods") {
    EvidenceService svc(demo());
    auto r = svc.catalog();
    REQUIRE(r.status == 200);
    auto j = r.json();
    CHECK(j["hypotheses"] == json({"AKIEC", "BCC", "BKL", "DF", "MEL", "NV", "VASC"}));
    CHECK(j["examples"].size() == 3);
    CHECK(j["methods"] == json({"ice", "pcbm"}));

    auto ice_only = std::make_shared<ModelBundle>(*demo());
    ice_only->methods.erase("pcbm");
    EvidenceService svc2(ice_only);
    CHECK(svc2.catalog().json()["methods"] == json({"ice"}));
}

TEST_CASE("upload issues fresh ids and rejects undecodable bytes") {
    EvidenceService svc(demo());
    const auto png = synthetic_lesion_png(2, 99);
    auto a = svc.upload_image(png), b = svc.upload_image(png);
    REQUIRE(a.status == 200);
    REQUIRE(b.status == 200);
    CHECK(a.json()["image_id"] != b.json()["image_id"]);

    std::vector<std::uint8_t> truncated(png.begin(), png.begin() + static_cast<long>(png.size() / 3));
    auto bad = svc.upload_image(truncated);
    CHECK(bad.status == 400);
    auto body = bad.json();
    CHECK(body["code"] == "DecodeError");
    CHECK(body.contains("message"));
    CHECK(body.contains("detail"));
    CHECK(svc.cached_sessions() == 2);
}

TEST_CASE("ICE evidence for an example image") {
    EvidenceService svc(demo());
    auto r = svc.evidence(evidence_body("example1", "MEL"));
    REQUIRE(r.status == 200);
    auto j = r.json();
    REQUIRE(j["concepts"].size() == 8);
    for (std::size_t i = 0; i < 8; ++i) {
        CHECK(j["concepts"][i]["display_name"] == "Feature " + std::to_string(i + 1));
        CHECK(j["concepts"][i]["prototype_ids"].size() == 5);
        CHECK(std::isfinite(j["concepts"][i]["woe_value"].get<double>()));
    }
    CHECK(j["hypothesis"] == "MEL");
    // Seven hypotheses: the per-concept values need not add up to total_woe.
    CHECK(j["posterior_log_odds"].get<double>() ==
          doctest::Approx(j["prior_log_odds"].get<double>() + j["total_woe"].get<double>()));
    CHECK(svc.evidence(evidence_body("example1", "MEL")).body == r.body);
    CHECK(svc.evidence(evidence_body("example1", "mel")).body == r.body);
}

TEST_CASE("PCBM evidence carries the named concepts") {
    EvidenceService svc(demo());
    auto j = svc.evidence(evidence_body("example2", "NV", "pcbm")).json();
    REQUIRE(j["concepts"].size() == 12);
    bool found = false;
    for (const auto& c : j["concepts"]) found = found || c["display_name"] == "Regular Pigmentation";
    CHECK(found);
}

TEST_CASE("evidence request errors") {
    EvidenceService svc(demo());
    CHECK(svc.evidence(evidence_body("nope", "MEL")).status == 404);
    auto unknown = svc.evidence(evidence_body("example1", "XYZ"));
    CHECK(unknown.status == 422);
    CHECK(unknown.json()["detail"]["hypotheses"].size() == 7);
    CHECK(svc.evidence("{not json").status == 400);
    CHECK(svc.evidence(R"({"image_id": "example1"})").status == 400);
    CHECK(svc.evidence(evidence_body("example1", "MEL", "tcav")).status == 422);
    CHECK(svc.evidence(R"({"image_id": "example1", "hypothesis": "MEL", "k": 40})").status == 422);
    CHECK(svc.evidence(R"({"image_id": "example1", "hypothesis": "MEL", "k": 8})").status == 200);
}

TEST_CASE("every example, hypothesis and method validates against the schema") {
    EvidenceService svc(demo());
    const auto& schema = evidence_report_schema();
    int checked = 0;
    for (const auto& id : {"example1", "example2", "example3"})
        for (const auto& h : demo()->hypotheses)
            for (const auto& m : {"ice", "pcbm"}) {
                auto r = svc.evidence(evidence_body(id, h, m));
                REQUIRE(r.status == 200);
                const auto violations = schema_violations(schema, r.json());
                CHECK_MESSAGE(violations.empty(), (violations.empty() ? "" : violations.front()));
                ++checked;
            }
    CHECK(checked == 42);
}

TEST_CASE("concurrent requests match serial execution") {
    EvidenceService svc(demo());
    std::vector<std::string> bodies, expected;
    for (const auto& id : {"example1", "example2", "example3"})
        for (const auto& h : demo()->hypotheses) {
            bodies.push_back(evidence_body(id, h, h.size() % 2 ? "ice" : "pcbm"));
        }
    EvidenceService serial(demo());
    for (const auto& b : bodies) expected.push_back(serial.evidence(b).body);
    std::vector<std::future<std::string>> futures;
    for (int round = 0; round < 3; ++round)
        for (const auto& b : bodies)
            futures.push_back(std::async(std::launch::async, [&svc, b] { return svc.evidence(b).body; }));
    for (std::size_t i = 0; i < futures.size(); ++i) CHECK(futures[i].get() == expected[i % bodies.size()]);
}

TEST_CASE("bundle roundtrip reproduces responses") {
    test::TempDir dir;
    save_bundle(dir / "bundle", *demo());
    auto loaded = std::make_shared<const ModelBundle>(load_bundle(dir / "bundle"));
    EvidenceService a(demo()), b(loaded);
    for (const auto& m : {"ice", "pcbm"})
        CHECK(a.evidence(evidence_body("example3", "BCC", m)).body == b.evidence(evidence_body("example3", "BCC", m)).body);
    CHECK(a.catalog().body == b.catalog().body);

    CHECK_THROWS_AS(load_bundle(dir / "missing"), IOError);

    // Priors summing to 0.9.
    const auto model_path = dir / "bundle" / "models" / "ice_k8.json";
    json model;
    {
        std::ifstream in(model_path);
        model = json::parse(in);
    }
    for (auto& p : model["priors"]) p = 0.9 / 7;
    {
        std::ofstream out(model_path);
        out << model.dump();
    }
    CHECK_THROWS_AS(load_bundle(dir / "bundle"), IntegrityError);
}

TEST_CASE("tampered basis is rejected") {
    test::TempDir dir;
    save_bundle(dir / "b", *demo());
    auto path = dir / "b" / "bases" / "ice_k8.basis";
    auto bytes = read_file_bytes(path);
    bytes[40] ^= 0x01;
    write_file_bytes(path, bytes);
    CHECK_THROWS_AS(load_bundle(dir / "b"), IntegrityError);
}

TEST_CASE("session cache evicts the least recently used upload") {
    EvidenceService svc(demo(), {2, {}});
    std::vector<std::string> ids;
    for (int i = 0; i < 3; ++i) ids.push_back(svc.upload_image(synthetic_lesion_png(i, 5)).json()["image_id"]);
    CHECK(svc.cached_sessions() == 2);
    CHECK(svc.evidence(evidence_body(ids[0], "MEL")).status == 404);
    CHECK(svc.evidence(evidence_body(ids[2], "MEL")).status == 200);
    CHECK(svc.evidence(evidence_body("example1", "MEL")).status == 200);
}

TEST_CASE("annotation and prototype endpoints") {
    EvidenceService svc(demo());
    auto a = svc.annotation("example1", "3", "ice");
    REQUIRE(a.status == 200);
    auto j = a.json();
    CHECK(j["width"] == 224);
    CHECK(j["display_name"] == "Feature 4");
    CHECK(!j["polygon"].empty());
    auto png = svc.annotation("example1", "3", "ice", "", true);
    CHECK(png.content_type == "image/png");
    cv::Mat mask = cv::imdecode(std::vector<std::uint8_t>(png.body.begin(), png.body.end()), cv::IMREAD_GRAYSCALE);
    CHECK(mask.cols == 224);
    CHECK(svc.annotation("example1", "8", "ice").status == 404);
    CHECK(svc.annotation("example1", "x", "ice").status == 400);
    CHECK(svc.annotation("ghost", "0", "ice").status == 404);

    auto p = svc.prototypes("6", "pcbm").json();
    CHECK(p["display_name"] == "Regular Pigmentation");
    REQUIRE(p["prototypes"].size() == 5);
    CHECK(p["prototypes"][0]["has_image"] == true);
    CHECK(svc.prototype_image(p["prototypes"][0]["image_id"]).content_type == "image/png");
    CHECK(svc.prototypes("0", "ice", "x").status == 400);
    CHECK(svc.image_bytes("example2").content_type == "image/png");
}

TEST_CASE("reload swaps the bundle") {
    test::TempDir dir;
    auto ice_only = *demo();
    ice_only.methods.erase("pcbm");
    save_bundle(dir / "ice", ice_only);
    EvidenceService svc(demo(), {8, dir / "ice"});
    CHECK(svc.reload("").status == 200);
    CHECK(svc.catalog().json()["methods"] == json({"ice"}));
    CHECK(svc.evidence(evidence_body("example1", "MEL", "pcbm")).status == 422);
    CHECK(svc.reload(json{{"path", (dir / "none").string()}}.dump()).status == 400);
    CHECK(svc.catalog().json()["methods"] == json({"ice"}));
}

TEST_CASE("schema validator reports violations") {
    const json schema = json::parse(R"({"type": "object", "required": ["a"], "additionalProperties": false,
        "properties": {"a": {"type": "integer", "minimum": 0}, "b": {"enum": ["x", "y"]},
                       "c": {"type": "array", "maxItems": 1, "items": {"type": "string"}}}})");
    CHECK(schema_violations(schema, json{{"a", 1}}).empty());
    CHECK(schema_violations(schema, json::object()).size() == 1);
    CHECK(schema_violations(schema, json{{"a", -1}}).size() == 1);
    CHECK(schema_violations(schema, json{{"a", 1.5}}).size() == 1);
    CHECK(schema_violations(schema, json{{"a", 1}, {"z", 0}}).size() == 1);
    CHECK(schema_violations(schema, json{{"a", 1}, {"b", "q"}}).size() == 1);
    CHECK(schema_violations(schema, json{{"a", 1}, {"c", {1, "s"}}}).size() == 2);
    CHECK(schema_violations(schema, json::array()).size() == 1);
    const auto v = schema_violations(schema, json{{"a", "s"}});
    REQUIRE(v.size() == 1);
    CHECK(v[0].rfind("/a", 0) == 0);
}

TEST_CASE("HTTP round trip") {
    EvidenceService svc(demo());
    HttpServer server(svc);
    const int port = server.bind("127.0.0.1", 0);
    std::thread worker([&] { server.listen(); });
    httplib::Client client("127.0.0.1", port);
    client.set_read_timeout(30, 0);

    auto catalog = client.Get("/api/catalog");
    REQUIRE(catalog);
    CHECK(catalog->status == 200);
    CHECK(json::parse(catalog->body)["hypotheses"].size() == 7);

    const auto png = synthetic_lesion_png(1, 3);
    auto up = client.Post("/api/images", std::string(png.begin(), png.end()), "image/png");
    REQUIRE(up);
    CHECK(up->status == 200);
    const auto id = json::parse(up->body)["image_id"].get<std::string>();

    auto ev = client.Post("/api/evidence", evidence_body(id, "BCC"), "application/json");
    REQUIRE(ev);
    CHECK(ev->status == 200);
    CHECK(schema_violations(evidence_report_schema(), json::parse(ev->body)).empty());

    auto missing = client.Post("/api/evidence", evidence_body("ghost", "BCC"), "application/json");
    REQUIRE(missing);
    CHECK(missing->status == 404);
    CHECK(json::parse(missing->body)["code"] == "NotFound");

    auto ann = client.Get(("/api/images/" + id + "/annotation/0?method=ice").c_str());
    REQUIRE(ann);
    CHECK(ann->status == 200);
    auto protos = client.Get("/api/prototypes/2?method=pcbm");
    REQUIRE(protos);
    CHECK(json::parse(protos->body)["display_name"] == "Blue Whitish Veil");
    auto nowhere = client.Get("/api/nowhere");
    REQUIRE(nowhere);
    CHECK(nowhere->status == 404);
    CHECK(json::parse(nowhere->body).contains("code"));

    server.stop();
    worker.join();
}
