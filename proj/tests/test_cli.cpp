#include <doctest.h>

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cli.hpp"
#include "evai/bundle.hpp"
#include "evai/concept_basis.hpp"
#include "evai/hash.hpp"
#include "support.hpp"

using nlohmann::json;

namespace {

struct Run {
    int rc = 0;
    std::string out, err;
};

Run evai_cli(const test::TempDir& dir, std::vector<std::string> args) {
    args.insert(args.begin(), {"--workdir", dir.path().string()});
    std::ostringstream out, err;
    const int rc = evai::cli::run(args, out, err);
    return {rc, out.str(), err.str()};
}

json read(const std::filesystem::path& p) {
    std::ifstream in(p);
    return json::parse(in);
}

const std::string kClasses = "class0,class1,class2";

}  // namespace

TEST_CASE("help, usage errors and failures have distinct exit codes") {
    test::TempDir dir;
    CHECK(evai_cli(dir, {"--help"}).rc == 0);
    CHECK(evai_cli(dir, {"fit-reducer", "--help"}).rc == 0);
    CHECK(evai_cli(dir, {"frobnicate"}).rc == 2);
    CHECK(evai_cli(dir, {"fit-reducer", "--features", "a", "--out", "b", "--bogus"}).rc == 2);
    CHECK(evai_cli(dir, {"fit-reducer", "--features", "a"}).rc == 2);
    CHECK(evai_cli(dir, {"fit-reducer", "--features", "a", "--out", "b", "--kind", "ica"}).rc == 2);

    auto r = evai_cli(dir, {"fit-reducer", "--features", "missing.features", "--out", "b"});
    CHECK(r.rc == 1);
    auto line = json::parse(r.err);
    CHECK(line["error"]["code"] == "IOError");
    CHECK(line["error"]["verb"] == "fit-reducer");
}

TEST_CASE("synth, fit-reducer, fit-head and evaluate chain with manifests") {
    test::TempDir dir;
    REQUIRE(evai_cli(dir, {"synth", "--out", "data"}).rc == 0);
    auto m = read(dir / "data/manifest.json");
    CHECK(m["verb"] == "synth");
    CHECK(m["outputs"].size() == 3);

    REQUIRE(evai_cli(dir, {"fit-reducer", "--features", "data/train.features", "--k", "3", "--out", "basis.bin"}).rc == 0);
    m = read(dir / "basis.bin.manifest.json");
    CHECK(m["inputs"][0]["sha256"] == evai::sha256_file(dir / "data/train.features"));
    CHECK(m["outputs"][0]["sha256"] == evai::sha256_file(dir / "basis.bin"));
    CHECK(m["settings"]["k"] == 3);

    for (const std::string head : {"woe", "gnb"}) {
        INFO(head);
        REQUIRE(evai_cli(dir, {"fit-head", "--head", head, "--features", "data/train.features", "--metadata",
                               "data/metadata.csv", "--classes", kClasses, "--basis", "basis.bin", "--out",
                               head + ".json"})
                    .rc == 0);
        auto r = evai_cli(dir, {"evaluate", "--head-file", head + ".json", "--basis", "basis.bin", "--test-features",
                                "data/test.features", "--metadata", "data/metadata.csv", "--classes", kClasses,
                                "--out", head + "-metrics.json"});
        REQUIRE(r.rc == 0);
        CHECK(read(dir / (head + "-metrics.json"))["f1"].get<double>() >= 90.0);
    }
}

TEST_CASE("a head refuses a basis it was not fitted on") {
    test::TempDir dir;
    REQUIRE(evai_cli(dir, {"synth", "--out", "."}).rc == 0);
    REQUIRE(evai_cli(dir, {"fit-reducer", "--features", "train.features", "--k", "3", "--out", "a.bin"}).rc == 0);
    REQUIRE(evai_cli(dir, {"fit-reducer", "--features", "train.features", "--k", "2", "--out", "b.bin"}).rc == 0);
    REQUIRE(evai_cli(dir, {"fit-head", "--features", "train.features", "--metadata", "metadata.csv", "--classes",
                           kClasses, "--basis", "a.bin", "--out", "h.json"})
                .rc == 0);
    auto r = evai_cli(dir, {"evaluate", "--head-file", "h.json", "--basis", "b.bin", "--test-features",
                            "test.features", "--metadata", "metadata.csv", "--classes", kClasses});
    CHECK(r.rc == 1);
    CHECK(json::parse(r.err)["error"]["code"] == "IntegrityError");
}

TEST_CASE("seeded evaluation writes runs and a summary") {
    test::TempDir dir;
    REQUIRE(evai_cli(dir, {"synth", "--out", "."}).rc == 0);
    auto r = evai_cli(dir, {"evaluate", "--model", "ice+woe", "--k", "3", "--seeds", "3", "--train-features",
                            "train.features", "--test-features", "test.features", "--metadata", "metadata.csv",
                            "--classes", kClasses, "--out-dir", "run"});
    REQUIRE(r.rc == 0);
    CHECK(r.out.find("ICE(3)+WoE |") != std::string::npos);
    std::ifstream csv(dir / "run/runs.csv");
    std::string line;
    int rows = 0;
    while (std::getline(csv, line)) ++rows;
    CHECK(rows == 4);
    CHECK(read(dir / "run/summary.json")["runs"].size() == 3);
    CHECK(read(dir / "run/manifest.json")["settings"]["k"] == 3);

    // --head woe is shorthand for the ICE+WoE model.
    auto alias = evai_cli(dir, {"evaluate", "--head", "woe", "--k", "3", "--seeds", "3", "--train-features",
                                "train.features", "--test-features", "test.features", "--metadata", "metadata.csv",
                                "--classes", kClasses});
    CHECK(alias.out == r.out);
}

TEST_CASE("sweep over k and reducers") {
    test::TempDir dir;
    REQUIRE(evai_cli(dir, {"synth", "--out", "."}).rc == 0);
    auto r = evai_cli(dir, {"sweep", "--k", "2..4", "--models", "ice+woe,original", "--reducers", "nmf,pca",
                            "--train-features", "train.features", "--test-features", "test.features", "--metadata",
                            "metadata.csv", "--classes", kClasses, "--out-dir", "sw"});
    REQUIRE(r.rc == 0);
    std::ifstream csv(dir / "sw/sweep.csv");
    std::string header, line;
    std::getline(csv, header);
    CHECK(header == "model_tag,reducer,k,seed,precision,recall,f1");
    int rows = 0;
    while (std::getline(csv, line)) ++rows;
    CHECK(rows == 2 * 2 * 3);
    CHECK(evai_cli(dir, {"sweep", "--k", "4..2", "--train-features", "train.features", "--test-features",
                         "test.features", "--metadata", "metadata.csv", "--classes", kClasses, "--out-dir", "x"})
              .rc == 1);
}

TEST_CASE("config file supplies defaults that flags override") {
    test::TempDir dir;
    REQUIRE(evai_cli(dir, {"synth", "--out", "."}).rc == 0);
    {
        std::ofstream ini(dir / "evai.ini");
        ini << "[fit-reducer]\nk=2\nkind=pca\n";
    }
    REQUIRE(evai_cli(dir, {"--config", (dir / "evai.ini").string(), "fit-reducer", "--features", "train.features",
                           "--out", "a.bin"})
                .rc == 0);
    CHECK(evai::load_basis(dir / "a.bin").k() == 2);
    CHECK(evai::load_basis(dir / "a.bin").kind == evai::BasisKind::pca);
    REQUIRE(evai_cli(dir, {"--config", (dir / "evai.ini").string(), "fit-reducer", "--features", "train.features",
                           "--k", "3", "--out", "b.bin"})
                .rc == 0);
    CHECK(evai::load_basis(dir / "b.bin").k() == 3);
}

TEST_CASE("demo bundle loads and carries a manifest") {
    test::TempDir dir;
    REQUIRE(evai_cli(dir, {"demo-bundle", "--out", "demo", "--k", "4", "--no-pcbm"}).rc == 0);
    const auto b = evai::load_bundle(dir / "demo");
    CHECK(b.method_names() == std::vector<std::string>{"ice"});
    CHECK(b.basis("ice", 4).basis.k() == 4);
    CHECK(read(dir / "demo/manifest.json")["verb"] == "demo-bundle");
}
