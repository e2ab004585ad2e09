#include "evai/bundle.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <set>

#include "evai/classes.hpp"
#include "evai/concept_bank.hpp"
#include "evai/concept_discovery.hpp"
#include "evai/errors.hpp"
#include "evai/eval_harness.hpp"
#include "evai/hash.hpp"
#include "evai/synthetic.hpp"

namespace evai {
namespace {

constexpr int kBundleVersion = 1;

nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IOError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("malformed " + path.string() + ": " + e.what());
    }
}

std::string basis_stem(const std::string& method, Eigen::Index k) {
    return method + "_k" + std::to_string(k);
}

std::string safe_file_name(const std::string& id) {
    std::string out;
    for (char ch : id) out += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_') ? ch : '_';
    return out + "_" + sha256_hex(id).substr(0, 8);
}

FeatureBatch features_of(const Backbone& backbone, const PreprocessConfig& pre,
                         const std::vector<std::vector<std::uint8_t>>& images, const std::vector<std::string>& ids,
                         unsigned threads) {
    std::vector<NormalizedImage> normalized;
    normalized.reserve(images.size());
    for (const auto& bytes : images) normalized.push_back(preprocess_image(bytes, pre));
    return extract_features(backbone, normalized, ids, threads);
}

std::vector<std::vector<std::string>> prototypes_for(const Eigen::MatrixXd& scores,
                                                     const std::vector<std::string>& ids) {
    std::vector<ConceptScoreVector> vectors;
    for (Eigen::Index i = 0; i < scores.rows(); ++i)
        vectors.push_back({ids[static_cast<std::size_t>(i)], scores.row(i).transpose()});
    std::vector<std::vector<std::string>> out;
    for (Eigen::Index j = 0; j < scores.cols(); ++j)
        out.push_back(top_prototypes(vectors, static_cast<std::size_t>(j), 5));
    return out;
}

}  // namespace

std::vector<std::string> ModelBundle::method_names() const {
    std::vector<std::string> out;
    for (const char* name : {"ice", "pcbm"})
        if (methods.count(name)) out.emplace_back(name);
    return out;
}

const BasisEntry& ModelBundle::basis(const std::string& method, Eigen::Index k) const {
    auto m = methods.find(method);
    if (m == methods.end()) throw NotFoundError("method '" + method + "' is not available");
    const auto key = k == 0 ? m->second.default_k : k;
    auto b = m->second.bases.find(key);
    if (b == m->second.bases.end())
        throw NotFoundError("method '" + method + "' has no basis with k = " + std::to_string(key));
    return b->second;
}

void ModelBundle::validate() const {
    if (hypotheses.size() < 2) throw IntegrityError("bundle needs at least two hypotheses");
    if (std::set<std::string>(hypotheses.begin(), hypotheses.end()).size() != hypotheses.size())
        throw IntegrityError("bundle hypotheses are not unique");
    if (!backbone) throw IntegrityError("bundle has no backbone");
    if (methods.empty()) throw IntegrityError("bundle has no concept basis");
    std::set<std::string> ids;
    for (const auto& e : examples)
        if (!ids.insert(e.image_id).second) throw IntegrityError("duplicate example id '" + e.image_id + "'");
    for (const auto& [name, method] : methods) {
        if (name != "ice" && name != "pcbm") throw IntegrityError("unknown method '" + name + "'");
        if (!method.bases.count(method.default_k))
            throw IntegrityError(name + ": default k = " + std::to_string(method.default_k) + " has no basis");
        for (const auto& [k, entry] : method.bases) {
            const std::string where = name + " k=" + std::to_string(k) + ": ";
            entry.basis.validate(1e-5);
            entry.model.validate();
            if (entry.basis.k() != k) throw IntegrityError(where + "basis holds " + std::to_string(entry.basis.k()) + " concepts");
            if (entry.model.concepts() != k) throw IntegrityError(where + "evidence model concept count differs");
            if (entry.model.hypothesis_names != hypotheses)
                throw IntegrityError(where + "evidence model hypotheses differ from the bundle's");
            if (!entry.prototypes.empty() && entry.prototypes.size() != static_cast<std::size_t>(k))
                throw IntegrityError(where + "prototype lists do not match the concept count");
            if (entry.hash != entry.basis.hash()) throw IntegrityError(where + "basis hash mismatch");
            if (!entry.model.basis_hash.empty() && entry.model.basis_hash != entry.hash)
                throw IntegrityError(where + "evidence model was fitted on a different basis");
            if (!entry.basis.backbone_id.empty() && entry.basis.backbone_id != backbone->id())
                throw IntegrityError(where + "basis comes from backbone '" + entry.basis.backbone_id + "', bundle uses '" +
                                     backbone->id() + "'");
            if ((name == "pcbm") != (entry.basis.kind == BasisKind::cav))
                throw IntegrityError(where + "basis kind does not fit the method");
        }
    }
}

std::shared_ptr<const Backbone> make_backbone(const nlohmann::json& spec, const std::filesystem::path& root) {
    try {
        const auto type = spec.at("type").get<std::string>();
        if (type == "grid_stats")
            return std::make_shared<GridStatsBackbone>(spec.at("side").get<int>(), spec.at("grid").get<int>(),
                                                       spec.at("channels").get<int>(),
                                                       spec.value("seed", std::uint64_t{0}));
        if (type == "onnx") {
            auto path = std::filesystem::path(spec.at("path").get<std::string>());
            if (path.is_relative()) path = root / path;
            return std::make_shared<OnnxBackbone>(path, spec.at("side").get<int>(), spec.value("layer", ""),
                                                  spec.value("id", ""));
        }
        throw ConfigError("unknown backbone type '" + type + "'");
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("bad backbone description: " + std::string(e.what()));
    }
}

void add_basis(ModelBundle& bundle, const std::string& method, ConceptBasis basis, GaussianEvidenceModel model,
               std::vector<std::vector<std::string>> prototypes) {
    basis.round_to_storage();
    BasisEntry entry;
    entry.hash = basis.hash();
    entry.basis = std::move(basis);
    entry.model = std::move(model);
    entry.prototypes = std::move(prototypes);
    auto& m = bundle.methods[method];
    const auto k = entry.basis.k();
    if (m.bases.empty()) m.default_k = k;
    m.bases[k] = std::move(entry);
}

void save_bundle(const std::filesystem::path& dir, const ModelBundle& bundle) {
    bundle.validate();
    for (const char* sub : {"bases", "models", "examples", "prototypes"})
        std::filesystem::create_directories(dir / sub);

    nlohmann::json j;
    j["format"] = "evai-bundle";
    j["version"] = kBundleVersion;
    j["hypotheses"] = bundle.hypotheses;
    j["preprocess"] = {{"side", bundle.preprocess.side},
                       {"mean", bundle.preprocess.mean},
                       {"std", bundle.preprocess.std}};
    j["backbone"] = bundle.backbone_spec;
    j["annotation"] = {{"width", bundle.annotation.width},
                       {"height", bundle.annotation.height},
                       {"threshold", bundle.annotation.threshold}};
    j["examples"] = nlohmann::json::array();
    for (const auto& e : bundle.examples) {
        const auto rel = "examples/" + safe_file_name(e.image_id) + ".img";
        write_file_bytes(dir / rel, e.bytes);
        j["examples"].push_back({{"image_id", e.image_id}, {"file", rel}, {"sha256", sha256_hex(e.bytes)}});
    }
    j["methods"] = nlohmann::json::object();
    for (const auto& [name, method] : bundle.methods) {
        nlohmann::json bases = nlohmann::json::array();
        for (const auto& [k, entry] : method.bases) {
            const auto stem = basis_stem(name, k);
            save_basis(dir / "bases" / (stem + ".basis"), entry.basis);
            save_evidence_model(dir / "models" / (stem + ".json"), entry.model);
            bases.push_back({{"k", k},
                             {"basis", "bases/" + stem + ".basis"},
                             {"model", "models/" + stem + ".json"},
                             {"hash", entry.hash},
                             {"prototypes", entry.prototypes}});
        }
        j["methods"][name] = {{"default_k", method.default_k}, {"bases", bases}};
    }
    j["prototype_images"] = nlohmann::json::array();
    for (const auto& [id, bytes] : bundle.prototype_images) {
        const auto rel = "prototypes/" + safe_file_name(id) + ".img";
        write_file_bytes(dir / rel, bytes);
        j["prototype_images"].push_back({{"image_id", id}, {"file", rel}});
    }
    std::ofstream out(dir / "bundle.json");
    if (!out) throw IOError("cannot write " + (dir / "bundle.json").string());
    out << j.dump(2) << '\n';
}

ModelBundle load_bundle(const std::filesystem::path& dir) {
    const auto manifest = dir / "bundle.json";
    if (!std::filesystem::exists(manifest)) throw IOError("no bundle at " + dir.string() + " (missing bundle.json)");
    const auto j = read_json(manifest);
    ModelBundle b;
    try {
        if (j.at("format") != "evai-bundle") throw IntegrityError("not a model bundle: " + manifest.string());
        if (j.at("version").get<int>() != kBundleVersion)
            throw IntegrityError("unsupported bundle version " + j.at("version").dump());
        b.hypotheses = j.at("hypotheses").get<std::vector<std::string>>();
        const auto& pre = j.at("preprocess");
        b.preprocess.side = pre.at("side").get<int>();
        b.preprocess.mean = pre.at("mean").get<std::array<double, 3>>();
        b.preprocess.std = pre.at("std").get<std::array<double, 3>>();
        b.backbone_spec = j.at("backbone");
        if (j.contains("annotation")) {
            const auto& a = j["annotation"];
            b.annotation.width = a.value("width", 224);
            b.annotation.height = a.value("height", 224);
            b.annotation.threshold = a.value("threshold", 0.5);
        }
        for (const auto& e : j.at("examples")) {
            ExampleImage ex{e.at("image_id").get<std::string>(),
                            read_file_bytes(dir / e.at("file").get<std::string>())};
            if (e.contains("sha256") && e["sha256"] != sha256_hex(ex.bytes))
                throw IntegrityError("example '" + ex.image_id + "' does not match its recorded hash");
            b.examples.push_back(std::move(ex));
        }
        for (const auto& [name, m] : j.at("methods").items()) {
            MethodEntry method;
            method.default_k = m.at("default_k").get<Eigen::Index>();
            for (const auto& e : m.at("bases")) {
                BasisEntry entry;
                entry.basis = load_basis(dir / e.at("basis").get<std::string>());
                entry.model = load_evidence_model(dir / e.at("model").get<std::string>());
                entry.prototypes = e.value("prototypes", std::vector<std::vector<std::string>>{});
                entry.hash = entry.basis.hash();
                if (e.contains("hash") && e["hash"] != entry.hash)
                    throw IntegrityError(name + ": basis file does not match its recorded hash");
                method.bases[e.at("k").get<Eigen::Index>()] = std::move(entry);
            }
            b.methods[name] = std::move(method);
        }
        for (const auto& p : j.value("prototype_images", nlohmann::json::array()))
            b.prototype_images[p.at("image_id").get<std::string>()] = read_file_bytes(dir / p.at("file").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("malformed bundle manifest: " + std::string(e.what()));
    }
    b.preprocess.validate();
    b.backbone = make_backbone(b.backbone_spec, dir);
    b.validate();
    return b;
}

ModelBundle make_demo_bundle(const DemoBundleOptions& o) {
    ModelBundle b;
    b.hypotheses = skin_lesion_classes();
    b.preprocess.side = o.side;
    b.backbone_spec = {{"type", "grid_stats"}, {"side", o.side}, {"grid", o.grid}, {"channels", o.channels}, {"seed", o.seed}};
    b.backbone = make_backbone(b.backbone_spec, {});
    const auto& backbone = *b.backbone;

    std::vector<std::vector<std::uint8_t>> images;
    std::vector<std::string> ids;
    std::vector<int> labels;
    for (std::size_t i = 0; i < o.train_per_class; ++i)
        for (int c = 0; c < static_cast<int>(b.hypotheses.size()); ++c) {
            images.push_back(synthetic_lesion_png(c, o.seed * 100003 + i + 1, o.side));
            ids.push_back("train_" + b.hypotheses[static_cast<std::size_t>(c)] + "_" + std::to_string(i));
            labels.push_back(c);
        }
    const auto train = features_of(backbone, b.preprocess, images, ids, o.threads);
    std::set<std::string> referenced;

    auto fit_entry = [&](const std::string& method, ConceptBasis basis) {
        basis.round_to_storage();
        const Eigen::MatrixXd scores = concept_scores(train, basis);
        auto model = fit_gnb(scores, labels, b.hypotheses, PriorMode::uniform);
        model.basis_hash = basis.hash();
        auto protos = prototypes_for(scores, ids);
        for (const auto& list : protos) referenced.insert(list.begin(), list.end());
        add_basis(b, method, std::move(basis), std::move(model), std::move(protos));
    };

    for (auto k : o.ice_k) {
        NmfOptions nmf;
        nmf.k = k;
        nmf.iters = 200;
        nmf.seed = o.seed;
        fit_entry("ice", fit_nmf(train, nmf).basis);
    }
    // K = 8 is the default when it was built.
    if (b.methods.count("ice") && b.methods["ice"].bases.count(8)) b.methods["ice"].default_k = 8;

    if (o.with_pcbm) {
        const auto names = dermoscopic_concepts();
        std::vector<ConceptExamples> all;
        for (std::size_t j = 0; j < names.size(); ++j) {
            std::vector<std::vector<std::uint8_t>> pos, neg;
            std::vector<std::string> pos_ids, neg_ids;
            for (std::size_t i = 0; i < o.concept_examples; ++i) {
                pos.push_back(synthetic_concept_png(static_cast<int>(j), true, o.seed * 1009 + i, o.side));
                neg.push_back(synthetic_concept_png(static_cast<int>(j), false, o.seed * 1009 + i, o.side));
                pos_ids.push_back("p" + std::to_string(i));
                neg_ids.push_back("n" + std::to_string(i));
            }
            const Eigen::MatrixXd p = pooled_features(features_of(backbone, b.preprocess, pos, pos_ids, o.threads));
            const Eigen::MatrixXd n = pooled_features(features_of(backbone, b.preprocess, neg, neg_ids, o.threads));
            ConceptExamples ex;
            ex.name = names[j];
            for (Eigen::Index r = 0; r < p.rows(); ++r) ex.positives.push_back(p.row(r).transpose());
            for (Eigen::Index r = 0; r < n.rows(); ++r) ex.negatives.push_back(n.row(r).transpose());
            all.push_back(std::move(ex));
        }
        CavOptions cav;
        cav.seed = o.seed;
        fit_entry("pcbm", build_bank(all, cav, backbone.id(), o.threads).basis);
    }

    for (std::size_t i = 0; i < ids.size(); ++i)
        if (referenced.count(ids[i])) b.prototype_images[ids[i]] = images[i];

    // Three held-out examples with seeds disjoint from the training draws.
    const std::array<int, 3> example_classes{4, 5, 1};
    for (std::size_t i = 0; i < example_classes.size(); ++i)
        b.examples.push_back({"example" + std::to_string(i + 1),
                              synthetic_lesion_png(example_classes[i], (o.seed + 1) * 7777777 + i, o.side)});
    b.validate();
    return b;
}

}  // namespace evai
