#include "cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "evai/bundle.hpp"
#include "evai/classes.hpp"
#include "evai/concept_bank.hpp"
#include "evai/concept_discovery.hpp"
#include "evai/errors.hpp"
#include "evai/eval_harness.hpp"
#include "evai/feature_batch.hpp"
#include "evai/hash.hpp"
#include "evai/linear_head.hpp"
#include "evai/service.hpp"
#include "evai/synthetic.hpp"

namespace evai::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kVersion = "1.0.0";

json file_entry(const fs::path& p) {
    if (fs::is_directory(p)) {
        json files = json::array();
        std::vector<fs::path> all;
        for (const auto& e : fs::recursive_directory_iterator(p))
            if (e.is_regular_file() && e.path().filename() != "manifest.json") all.push_back(e.path());
        std::sort(all.begin(), all.end());
        for (const auto& f : all) files.push_back({{"path", fs::relative(f, p).string()}, {"sha256", sha256_file(f)}});
        return {{"path", p.string()}, {"files", files}};
    }
    return {{"path", p.string()}, {"sha256", sha256_file(p)}};
}

/// Inputs' hashes, outputs' hashes, the exact arguments and any extra settings.
void write_manifest(const fs::path& path, const std::string& verb, const std::vector<std::string>& args,
                    const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs, json extra) {
    json m{{"tool", "evai"}, {"version", kVersion}, {"verb", verb}, {"args", args}};
    m["inputs"] = json::array();
    for (const auto& p : inputs) m["inputs"].push_back(file_entry(p));
    m["outputs"] = json::array();
    for (const auto& p : outputs) m["outputs"].push_back(file_entry(p));
    m["settings"] = std::move(extra);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IOError("cannot write " + path.string());
    out << m.dump(2) << '\n';
}

fs::path manifest_for(const fs::path& artifact) { return fs::path(artifact.string() + ".manifest.json"); }

void write_json(const fs::path& path, const json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IOError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IOError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw IntegrityError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

struct BackboneFlags {
    std::string type = "grid_stats";
    std::string model;
    int side = 224;
    std::string layer;
    int grid = 7;
    int channels = 64;
    std::uint64_t seed = 0;
    std::vector<double> mean{0.485, 0.456, 0.406};
    std::vector<double> std{0.229, 0.224, 0.225};

    void add(CLI::App* cmd) {
        cmd->add_option("--backbone", type, "grid_stats or onnx")->check(CLI::IsMember({"grid_stats", "onnx"}));
        cmd->add_option("--model", model, "ONNX backbone file");
        cmd->add_option("--side", side, "Input side length in pixels");
        cmd->add_option("--layer", layer, "ONNX output layer (default: the network output)");
        cmd->add_option("--grid", grid, "grid_stats: cells per side");
        cmd->add_option("--channels", channels, "grid_stats: output channels");
        cmd->add_option("--backbone-seed", seed, "grid_stats: weight seed");
        cmd->add_option("--mean", mean, "Per-channel RGB mean")->delimiter(',')->expected(3);
        cmd->add_option("--std", std, "Per-channel RGB std")->delimiter(',')->expected(3);
    }

    json spec() const {
        if (type == "onnx") {
            if (model.empty()) throw ConfigError("--backbone onnx needs --model");
            json j{{"type", "onnx"}, {"path", fs::absolute(model).string()}, {"side", side}};
            if (!layer.empty()) j["layer"] = layer;
            return j;
        }
        return {{"type", "grid_stats"}, {"side", side}, {"grid", grid}, {"channels", channels}, {"seed", seed}};
    }

    PreprocessConfig preprocess() const {
        PreprocessConfig p;
        p.side = side;
        std::copy(mean.begin(), mean.end(), p.mean.begin());
        std::copy(std.begin(), std.end(), p.std.begin());
        p.validate();
        return p;
    }
};

struct MetadataFlags {
    std::string csv;
    std::string image_dir;
    std::string ext = ".jpg";
    std::string id_column = "image_id";
    std::string label_column = "dx";
    std::vector<std::string> classes = skin_lesion_classes();

    void add(CLI::App* cmd, bool required) {
        auto* o = cmd->add_option("--metadata", csv, "Metadata CSV with image ids and labels");
        if (required) o->required();
        cmd->add_option("--image-dir", image_dir, "Directory holding the images");
        cmd->add_option("--ext", ext, "Image file extension");
        cmd->add_option("--id-column", id_column, "Image id column");
        cmd->add_option("--label-column", label_column, "Label column");
        cmd->add_option("--classes", classes, "Hypothesis names in catalog order")->delimiter(',');
    }

    MetadataConfig config() const {
        MetadataConfig c;
        c.id_column = id_column;
        c.label_column = label_column;
        c.classes = classes;
        c.image_dir = image_dir;
        c.image_extension = ext;
        return c;
    }
};

struct Context {
    std::vector<std::string> args;
    std::ostream& out;
    unsigned threads = 1;
};

FeatureBatch extract_records(const std::vector<ImageRecord>& records, const Backbone& backbone,
                             const PreprocessConfig& pre, unsigned threads) {
    FeatureBatch all;
    constexpr std::size_t chunk = 256;
    for (std::size_t start = 0; start < records.size(); start += chunk) {
        const auto end = std::min(records.size(), start + chunk);
        std::vector<NormalizedImage> images;
        std::vector<std::string> ids;
        for (std::size_t i = start; i < end; ++i) {
            images.push_back(preprocess_image(read_file_bytes(records[i].source_path), pre));
            ids.push_back(records[i].image_id);
        }
        auto part = extract_features(backbone, images, ids, threads);
        if (all.n == 0) {
            all = std::move(part);
            continue;
        }
        all.values.insert(all.values.end(), part.values.begin(), part.values.end());
        all.image_ids.insert(all.image_ids.end(), part.image_ids.begin(), part.image_ids.end());
        all.n += part.n;
    }
    if (all.n == 0) throw DataError("no images to extract");
    return all;
}

std::vector<std::uint64_t> seed_list(std::size_t count, std::uint64_t first) {
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < count; ++i) seeds.push_back(first + i);
    return seeds;
}

/// "5..40", "5..40:5" or "5,8,12".
std::vector<Eigen::Index> parse_k_list(const std::string& text) {
    std::vector<Eigen::Index> out;
    auto number = [&](const std::string& s) {
        try {
            std::size_t used = 0;
            const long v = std::stol(s, &used);
            if (used == s.size() && v > 0) return static_cast<Eigen::Index>(v);
        } catch (const std::exception&) {
        }
        throw ConfigError("bad k value '" + s + "' in '" + text + "'");
    };
    const auto dots = text.find("..");
    if (dots != std::string::npos) {
        const auto colon = text.find(':', dots);
        const auto lo = number(text.substr(0, dots));
        const auto hi = number(text.substr(dots + 2, colon == std::string::npos ? std::string::npos : colon - dots - 2));
        const auto step = colon == std::string::npos ? 1 : number(text.substr(colon + 1));
        for (auto k = lo; k <= hi; k += step) out.push_back(k);
    } else {
        std::stringstream ss(text);
        for (std::string part; std::getline(ss, part, ',');) out.push_back(number(part));
    }
    if (out.empty()) throw ConfigError("empty k list '" + text + "'");
    return out;
}

ModelKind model_from_head(const std::string& head) {
    if (head == "woe") return ModelKind::ice_woe;
    if (head == "gnb") return ModelKind::ice_gnb;
    if (head == "ridge") return ModelKind::pcbm;
    return parse_model_kind(head);
}

std::string table_row(const ExperimentResult& r) {
    return r.model_tag + " | " + format_summary(r.precision) + " | " + format_summary(r.recall) + " | " +
           format_summary(r.f1);
}

// ---- verbs ----------------------------------------------------------------

struct ExtractArgs {
    BackboneFlags backbone;
    MetadataFlags meta;
    std::string out, out_test;
    std::size_t test_per_class = 0;
    std::uint64_t split_seed = 0;
};

void run_extract(const ExtractArgs& a, Context& ctx) {
    const auto records = load_metadata(a.meta.csv, a.meta.config());
    const auto spec = a.backbone.spec();
    const auto backbone = make_backbone(spec, fs::current_path());
    const auto pre = a.backbone.preprocess();
    std::vector<fs::path> outputs{a.out};
    json settings{{"backbone", spec}, {"side", pre.side}};
    if (a.test_per_class > 0) {
        if (a.out_test.empty()) throw ConfigError("--test-per-class needs --out-test");
        const auto split = split_test_set(records, a.test_per_class, a.split_seed, a.meta.classes.size());
        save_feature_batch(a.out, extract_records(split.train, *backbone, pre, ctx.threads));
        save_feature_batch(a.out_test, extract_records(split.test, *backbone, pre, ctx.threads));
        outputs.push_back(a.out_test);
        settings["split_seed"] = a.split_seed;
        settings["test_per_class"] = a.test_per_class;
        ctx.out << "extracted " << split.train.size() << " training and " << split.test.size() << " test images\n";
    } else {
        save_feature_batch(a.out, extract_records(records, *backbone, pre, ctx.threads));
        ctx.out << "extracted " << records.size() << " images\n";
    }
    write_manifest(manifest_for(a.out), "extract", ctx.args, {a.meta.csv}, outputs, settings);
}

struct FitReducerArgs {
    std::string features, out;
    std::string kind = "nmf";
    Eigen::Index k = 8;
    int iters = 400;
    double tol = 1e-5;
    std::uint64_t seed = 0;
};

void run_fit_reducer(const FitReducerArgs& a, Context& ctx) {
    const auto batch = load_feature_batch(a.features);
    json settings{{"kind", a.kind}, {"k", a.k}, {"seed", a.seed}};
    ConceptBasis basis;
    if (a.kind == "nmf") {
        NmfOptions o;
        o.k = a.k;
        o.iters = a.iters;
        o.tol = a.tol;
        o.seed = a.seed;
        auto fit = fit_nmf(batch, o);
        const double err = fit.factors.relative_error(flatten_locations(batch));
        settings["iterations"] = fit.factors.iterations;
        settings["relative_error"] = err;
        ctx.out << "nmf k=" << a.k << " iterations=" << fit.factors.iterations << " relative_error=" << err << '\n';
        basis = std::move(fit.basis);
    } else {
        basis = fit_pca(batch, a.k);
        ctx.out << "pca k=" << a.k << '\n';
    }
    save_basis(a.out, basis);
    write_manifest(manifest_for(a.out), "fit-reducer", ctx.args, {a.features}, {a.out, a.out + ".json"}, settings);
}

struct BuildBankArgs {
    std::string examples, manifest, out, backbone_id;
    CavOptions cav;
};

void run_build_bank(const BuildBankArgs& a, Context& ctx) {
    if (a.examples.empty() == a.manifest.empty()) throw ConfigError("give exactly one of --examples or --concepts");
    const auto all = a.examples.empty() ? load_concept_manifest(a.manifest) : load_concept_examples(a.examples);
    const auto bank = build_bank(all, a.cav, a.backbone_id, ctx.threads);
    json accuracy = json::object();
    for (const auto& cav : bank.cavs) {
        accuracy[cav.name] = cav.train_accuracy;
        ctx.out << cav.name << ": train accuracy " << cav.train_accuracy << '\n';
    }
    save_basis(a.out, bank.basis);
    write_manifest(manifest_for(a.out), "build-bank", ctx.args, {a.examples.empty() ? a.manifest : a.examples},
                   {a.out, a.out + ".json"},
                   {{"regularization", a.cav.regularization}, {"lr", a.cav.lr}, {"epochs", a.cav.epochs},
                    {"seed", a.cav.seed}, {"train_accuracy", accuracy}});
}

struct FitHeadArgs {
    MetadataFlags meta;
    std::string features, basis, out;
    std::string head = "woe";
    double lambda = 1.0;
    double var_floor = 1e-6;
    std::size_t per_class = 0;
    std::uint64_t seed = 0;
    bool no_augment = false;
};

void run_fit_head(const FitHeadArgs& a, Context& ctx) {
    const auto batch = load_feature_batch(a.features);
    const auto records = load_metadata(a.meta.csv, a.meta.config());
    TrainingSample sample{batch, labels_for(batch, records)};
    if (a.per_class > 0)
        sample = resample_training(batch, sample.labels, a.per_class, a.seed, !a.no_augment, a.meta.classes.size());

    json wrapper{{"head", a.head}};
    std::vector<fs::path> inputs{a.features, a.meta.csv};
    std::optional<ConceptBasis> basis;
    if (!a.basis.empty()) {
        basis = load_basis(a.basis);
        wrapper["basis_hash"] = basis->hash();
        inputs.emplace_back(a.basis);
    }
    if (a.head != "original" && !basis) throw ConfigError("--head " + a.head + " needs --basis");

    std::size_t correct = 0;
    if (a.head == "woe" || a.head == "gnb") {
        const Eigen::MatrixXd scores = concept_scores(sample.batch, *basis);
        auto model = fit_gnb(scores, sample.labels, a.meta.classes,
                             a.head == "woe" ? PriorMode::uniform : PriorMode::empirical, a.var_floor);
        model.basis_hash = basis->hash();
        for (Eigen::Index j = 0; j < basis->k(); ++j) model.concept_names.push_back(basis->display_name(j));
        for (Eigen::Index i = 0; i < scores.rows(); ++i) {
            const Eigen::VectorXd e = scores.row(i).transpose();
            const auto p = a.head == "woe" ? woe_argmax(model, e) : classify(model, e);
            correct += p == sample.labels[static_cast<std::size_t>(i)];
        }
        wrapper["model"] = to_json(model);
    } else if (a.head == "ridge" || a.head == "original") {
        const Eigen::MatrixXd x = a.head == "ridge" ? concept_scores(sample.batch, *basis) : pooled_features(sample.batch);
        auto head = fit_ridge(x, sample.labels, a.meta.classes, a.lambda);
        if (a.head == "original") head.kind = HeadKind::original;
        for (Eigen::Index i = 0; i < x.rows(); ++i)
            correct += apply_head(head, x.row(i).transpose()) == sample.labels[static_cast<std::size_t>(i)];
        wrapper["model"] = to_json(head);
    }
    write_json(a.out, wrapper);
    const double acc = static_cast<double>(correct) / static_cast<double>(sample.labels.size());
    ctx.out << a.head << " head fitted on " << sample.labels.size() << " images, training accuracy " << acc << '\n';
    write_manifest(manifest_for(a.out), "fit-head", ctx.args, inputs, {a.out},
                   {{"head", a.head}, {"lambda", a.lambda}, {"var_floor", a.var_floor}, {"per_class", a.per_class},
                    {"seed", a.seed}, {"train_accuracy", acc}});
}

struct ExperimentArgs {
    MetadataFlags meta;
    std::string train_features, test_features;
    std::string head_file, basis;  // fitted-artifact evaluation
    std::string head = "woe";
    std::string model;
    std::string reducer = "nmf";
    std::string bank, original_head;
    std::string k_text = "8";
    Eigen::Index k = 8;
    std::size_t seeds = 1;
    std::uint64_t first_seed = 0;
    std::size_t per_class = 0;
    bool no_augment = false;
    int nmf_iters = 400;
    double lambda = 1.0;
    std::string out, out_dir;
    std::vector<std::string> models{"ice", "ice+woe", "original"};
    std::vector<std::string> reducers{"nmf", "pca"};

    ExperimentConfig config(ModelKind kind, unsigned threads) const {
        ExperimentConfig c;
        c.model = kind;
        c.reducer = parse_basis_kind(reducer);
        c.k = k;
        c.seeds = seed_list(seeds, first_seed);
        c.per_class = per_class;
        c.augment = !no_augment;
        c.nmf_iters = nmf_iters;
        c.ridge_lambda = lambda;
        c.threads = threads;
        return c;
    }

    ExperimentData data() const {
        ExperimentInputs in;
        in.train_features = train_features;
        in.test_features = test_features;
        in.metadata = meta.csv;
        in.metadata_config = meta.config();
        if (!bank.empty()) in.bank = bank;
        if (!original_head.empty()) {
            // Accept both a bare linear head and a fit-head wrapper.
            auto j = read_json(original_head);
            if (j.contains("model")) j = j["model"];
            auto d = load_experiment_data(in);
            d.original_head = linear_head_from_json(j);
            return d;
        }
        return load_experiment_data(in);
    }
};

void evaluate_artifacts(const ExperimentArgs& a, Context& ctx) {
    const auto wrapper = read_json(a.head_file);
    const auto head = wrapper.at("head").get<std::string>();
    const auto batch = load_feature_batch(a.test_features);
    const auto records = load_metadata(a.meta.csv, a.meta.config());
    const auto labels = labels_for(batch, records);
    std::optional<ConceptBasis> basis;
    if (!a.basis.empty()) basis = load_basis(a.basis);
    if (wrapper.contains("basis_hash") && (!basis || basis->hash() != wrapper["basis_hash"]))
        throw IntegrityError("head " + a.head_file + " was fitted on a different basis than --basis");

    std::vector<int> predictions;
    std::string tag;
    if (head == "woe" || head == "gnb") {
        const auto model = evidence_model_from_json(wrapper.at("model"));
        const Eigen::MatrixXd scores = concept_scores(batch, *basis);
        for (Eigen::Index i = 0; i < scores.rows(); ++i) {
            const Eigen::VectorXd e = scores.row(i).transpose();
            predictions.push_back(static_cast<int>(head == "woe" ? woe_argmax(model, e) : classify(model, e)));
        }
        tag = model_tag(head == "woe" ? ModelKind::ice_woe : ModelKind::ice_gnb, basis->k());
        if (basis->kind == BasisKind::cav) tag = head == "woe" ? "PCBM+WoE" : "PCBM+GNB";
    } else {
        const auto linear = linear_head_from_json(wrapper.at("model"));
        if (head == "ridge") {
            if (!basis) throw ConfigError("a ridge head needs --basis");
            const Eigen::MatrixXd scores = concept_scores(batch, *basis);
            for (Eigen::Index i = 0; i < scores.rows(); ++i)
                predictions.push_back(static_cast<int>(apply_head(linear, scores.row(i).transpose())));
            tag = "PCBM";
        } else if (basis) {
            // Original head on features rebuilt from pooled concept scores.
            const Eigen::MatrixXd scores = concept_scores(batch, *basis);
            for (Eigen::Index i = 0; i < scores.rows(); ++i)
                predictions.push_back(static_cast<int>(
                    apply_head(linear, reconstruct_features({{}, scores.row(i).transpose()}, *basis))));
            tag = model_tag(ModelKind::ice, basis->k());
        } else {
            const Eigen::MatrixXd pooled = pooled_features(batch);
            for (Eigen::Index i = 0; i < pooled.rows(); ++i)
                predictions.push_back(static_cast<int>(apply_head(linear, pooled.row(i).transpose())));
            tag = "Original";
        }
    }
    auto m = compute_metrics(predictions, labels, static_cast<int>(a.meta.classes.size()));
    ctx.out << tag << " | precision " << m.precision << " | recall " << m.recall << " | f1 " << m.f1 << '\n';
    if (!a.out.empty()) {
        json confusion = json::array();
        for (Eigen::Index r = 0; r < m.confusion.rows(); ++r) {
            json row = json::array();
            for (Eigen::Index c = 0; c < m.confusion.cols(); ++c) row.push_back(m.confusion(r, c));
            confusion.push_back(row);
        }
        write_json(a.out, {{"model_tag", tag},
                           {"precision", m.precision},
                           {"recall", m.recall},
                           {"f1", m.f1},
                           {"class_f1", m.class_f1},
                           {"confusion", confusion},
                           {"predictions", predictions}});
    }
}

void run_evaluate(ExperimentArgs a, Context& ctx) {
    if (!a.head_file.empty()) return evaluate_artifacts(a, ctx);
    if (a.train_features.empty()) throw ConfigError("evaluate needs --head-file or --train-features");
    a.k = parse_k_list(a.k_text).front();
    const auto kind = a.model.empty() ? model_from_head(a.head) : parse_model_kind(a.model);
    const auto config = a.config(kind, ctx.threads);
    const auto result = run_experiment(a.data(), config);
    ctx.out << "model | precision | recall | f1\n" << table_row(result) << '\n';
    if (!a.out_dir.empty()) {
        write_runs_csv(fs::path(a.out_dir) / "runs.csv", result);
        write_json(fs::path(a.out_dir) / "summary.json", summary_json(result, config));
        std::vector<fs::path> inputs{a.train_features, a.test_features, a.meta.csv};
        write_manifest(fs::path(a.out_dir) / "manifest.json", "evaluate", ctx.args, inputs,
                       {fs::path(a.out_dir) / "runs.csv", fs::path(a.out_dir) / "summary.json"}, config.to_json());
    }
}

void run_sweep(ExperimentArgs a, Context& ctx) {
    if (a.out_dir.empty()) throw ConfigError("sweep needs --out-dir");
    const auto ks = parse_k_list(a.k_text);
    const auto data = a.data();
    std::vector<SweepCurve> curves;
    for (const auto& reducer : a.reducers) {
        a.reducer = reducer;
        for (const auto& name : a.models) {
            const auto kind = model_from_head(name);
            auto config = a.config(kind, ctx.threads);
            SweepCurve curve;
            if (kind == ModelKind::original) {
                // Independent of k: one run repeated along the axis.
                const auto r = run_experiment(data, config);
                curve.model_tag = r.model_tag;
                curve.reducer = config.reducer;
                for (auto k : ks) {
                    curve.k_values.push_back(k);
                    curve.f1.push_back(r.f1);
                    curve.results.push_back(r);
                }
            } else {
                curve = concept_sweep(data, config, ks);
            }
            for (std::size_t i = 0; i < ks.size(); ++i)
                ctx.out << curve.model_tag << ' ' << reducer << " k=" << ks[i] << " f1 " << format_summary(curve.f1[i])
                        << '\n';
            curves.push_back(std::move(curve));
        }
    }
    const fs::path dir(a.out_dir);
    write_sweep_csv(dir / "sweep.csv", curves);
    write_json(dir / "sweep.json", sweep_json(curves));
    write_manifest(dir / "manifest.json", "sweep", ctx.args, {a.train_features, a.test_features, a.meta.csv},
                   {dir / "sweep.csv", dir / "sweep.json"},
                   {{"k", ks}, {"reducers", a.reducers}, {"models", a.models}, {"seeds", a.seeds},
                    {"first_seed", a.first_seed}, {"per_class", a.per_class}});
}

struct BundleArgs {
    BackboneFlags backbone;
    MetadataFlags meta;
    std::string train_features, bank, out;
    std::vector<std::string> ice_bases, examples;
    Eigen::Index default_k = 0;
    int annotation_size = 224;
};

void run_bundle(const BundleArgs& a, Context& ctx) {
    const auto train = load_feature_batch(a.train_features);
    const auto records = load_metadata(a.meta.csv, a.meta.config());
    const auto labels = labels_for(train, records);
    const fs::path out(a.out);
    fs::create_directories(out);

    ModelBundle b;
    b.hypotheses = a.meta.classes;
    b.preprocess = a.backbone.preprocess();
    b.backbone_spec = a.backbone.spec();
    if (a.backbone.type == "onnx") {
        fs::copy_file(a.backbone.model, out / "backbone.onnx", fs::copy_options::overwrite_existing);
        b.backbone_spec["path"] = "backbone.onnx";
    }
    b.backbone = make_backbone(b.backbone_spec, out);
    b.annotation.width = b.annotation.height = a.annotation_size;

    std::set<std::string> referenced;
    std::vector<fs::path> inputs{a.train_features, a.meta.csv};
    auto add = [&](const std::string& method, const std::string& path) {
        auto basis = load_basis(path);
        basis.round_to_storage();
        const Eigen::MatrixXd scores = concept_scores(train, basis);
        auto model = fit_gnb(scores, labels, b.hypotheses, PriorMode::uniform);
        model.basis_hash = basis.hash();
        std::vector<ConceptScoreVector> vectors;
        for (Eigen::Index i = 0; i < scores.rows(); ++i)
            vectors.push_back({train.image_ids[static_cast<std::size_t>(i)], scores.row(i).transpose()});
        std::vector<std::vector<std::string>> protos;
        for (Eigen::Index j = 0; j < basis.k(); ++j) {
            protos.push_back(top_prototypes(vectors, static_cast<std::size_t>(j), 5));
            referenced.insert(protos.back().begin(), protos.back().end());
        }
        add_basis(b, method, std::move(basis), std::move(model), std::move(protos));
        inputs.emplace_back(path);
    };
    for (const auto& p : a.ice_bases) add("ice", p);
    if (!a.bank.empty()) add("pcbm", a.bank);
    if (a.default_k > 0) b.methods.at("ice").default_k = a.default_k;

    for (const auto& p : a.examples) {
        b.examples.push_back({fs::path(p).stem().string(), read_file_bytes(p)});
        inputs.emplace_back(p);
    }
    if (!a.meta.image_dir.empty())
        for (const auto& id : referenced) {
            const auto path = fs::path(a.meta.image_dir) / (id + a.meta.ext);
            if (fs::exists(path)) b.prototype_images[id] = read_file_bytes(path);
        }
    save_bundle(out, b);
    ctx.out << "bundle written to " << out.string() << " (methods:";
    for (const auto& m : b.method_names()) ctx.out << ' ' << m;
    ctx.out << ")\n";
    write_manifest(out / "manifest.json", "bundle", ctx.args, inputs, {out}, {{"backbone", b.backbone_spec}});
}

struct ServeArgs {
    ServerConfig server;
};

std::atomic<bool> g_stop{false};

void run_serve(const ServeArgs& a, Context& ctx) {
    if (a.server.bundle_path.empty()) throw ConfigError("serve needs --bundle (or EVAI_BUNDLE)");
    auto bundle = std::make_shared<const ModelBundle>(load_bundle(a.server.bundle_path));
    EvidenceService service(bundle, {a.server.cache_size, a.server.bundle_path});
    HttpServer server(service);
    if (!a.server.static_dir.empty()) server.mount_static(a.server.static_dir);
    const int port = server.bind(a.server.host, a.server.port);
    ctx.out << "listening on " << a.server.host << ':' << port << std::endl;
    g_stop = false;
    std::signal(SIGINT, [](int) { g_stop = true; });
    std::signal(SIGTERM, [](int) { g_stop = true; });
    std::thread watcher([&] {
        while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
        server.stop();
    });
    server.listen();
    g_stop = true;
    watcher.join();
}

struct SynthArgs {
    PlantedOptions planted;
    std::string out;
};

void run_synth(const SynthArgs& a, Context& ctx) {
    const auto d = planted_concept_dataset(a.planted);
    const fs::path dir(a.out);
    fs::create_directories(dir);
    save_feature_batch(dir / "train.features", d.train);
    save_feature_batch(dir / "test.features", d.test);
    {
        std::ofstream csv(dir / "metadata.csv");
        csv << "image_id,dx\n";
        for (std::size_t i = 0; i < d.train.n; ++i) csv << d.train.image_ids[i] << ',' << d.hypotheses[static_cast<std::size_t>(d.train_labels[i])] << '\n';
        for (std::size_t i = 0; i < d.test.n; ++i) csv << d.test.image_ids[i] << ',' << d.hypotheses[static_cast<std::size_t>(d.test_labels[i])] << '\n';
    }
    std::string classes;
    for (const auto& h : d.hypotheses) classes += (classes.empty() ? "" : ",") + h;
    ctx.out << "planted dataset: " << d.train.n << " training, " << d.test.n << " test images; pass --classes "
            << classes << '\n';
    write_manifest(dir / "manifest.json", "synth", ctx.args, {},
                   {dir / "train.features", dir / "test.features", dir / "metadata.csv"},
                   {{"seed", a.planted.seed}, {"classes", d.hypotheses}, {"grid", a.planted.grid},
                    {"channels", a.planted.channels}, {"noise", a.planted.noise}});
}

struct DemoArgs {
    DemoBundleOptions options;
    std::string out;
};

void run_demo_bundle(const DemoArgs& a, Context& ctx) {
    auto o = a.options;
    o.threads = ctx.threads;
    const auto b = make_demo_bundle(o);
    save_bundle(a.out, b);
    ctx.out << "demo bundle written to " << a.out << '\n';
    write_manifest(fs::path(a.out) / "manifest.json", "demo-bundle", ctx.args, {}, {a.out},
                   {{"seed", o.seed}, {"side", o.side}, {"train_per_class", o.train_per_class}, {"k", o.ice_k}});
}

void add_experiment_flags(CLI::App* cmd, ExperimentArgs& a, bool sweep) {
    a.meta.add(cmd, true);
    cmd->add_option("--train-features", a.train_features, "Training pool features");
    cmd->add_option("--test-features", a.test_features, "Test features")->required();
    if (!sweep) cmd->add_option("--reducer", a.reducer, "nmf or pca")->check(CLI::IsMember({"nmf", "pca"}));
    cmd->add_option("--bank", a.bank, "CAV bank for the PCBM models");
    cmd->add_option("--original-head", a.original_head, "Backbone classifier (linear head JSON)");
    cmd->add_option("--k", a.k_text, "Concept count (sweep: 5..40, 5..40:5 or 5,8,12)");
    cmd->add_option("--seeds", a.seeds, "Number of seeds");
    cmd->add_option("--first-seed", a.first_seed, "First seed");
    cmd->add_option("--per-class", a.per_class, "Training images per class after resampling (0 = whole pool)");
    cmd->add_flag("--no-augment", a.no_augment, "Resample duplicates without spatial augmentation");
    cmd->add_option("--nmf-iters", a.nmf_iters, "NMF iterations");
    cmd->add_option("--lambda", a.lambda, "Ridge penalty");
    cmd->add_option("--out-dir", a.out_dir, "Directory for CSV/JSON results");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Concept-based evidence toolkit: features, concepts, weight of evidence, evaluation, serving",
                 "evai"};
    app.set_version_flag("--version", kVersion);
    app.set_config("--config", "", "INI/TOML file with option defaults; flags override it");
    std::string workdir;
    unsigned threads = 1;
    app.add_option("--workdir", workdir, "Resolve every relative path against this directory");
    app.add_option("--threads", threads, "Worker threads")->check(CLI::Range(1u, 256u));
    app.require_subcommand(1);
    app.fallthrough();

    ExtractArgs extract;
    auto* c_extract = app.add_subcommand("extract", "Images to feature files");
    extract.backbone.add(c_extract);
    extract.meta.add(c_extract, true);
    c_extract->add_option("--out", extract.out, "Feature file (training pool when splitting)")->required();
    c_extract->add_option("--out-test", extract.out_test, "Test feature file");
    c_extract->add_option("--test-per-class", extract.test_per_class, "Hold out this many images per class");
    c_extract->add_option("--split-seed", extract.split_seed, "Seed of the test split");

    FitReducerArgs reducer;
    auto* c_reducer = app.add_subcommand("fit-reducer", "Fit an NMF or PCA concept basis");
    c_reducer->add_option("--features", reducer.features, "Training features")->required();
    c_reducer->add_option("--kind", reducer.kind, "nmf or pca")->check(CLI::IsMember({"nmf", "pca"}));
    c_reducer->add_option("--k", reducer.k, "Number of concepts")->check(CLI::PositiveNumber);
    c_reducer->add_option("--iters", reducer.iters, "NMF iterations");
    c_reducer->add_option("--tol", reducer.tol, "NMF relative-error tolerance");
    c_reducer->add_option("--seed", reducer.seed, "NMF initialization seed");
    c_reducer->add_option("--out", reducer.out, "Basis file")->required();

    BuildBankArgs bank;
    auto* c_bank = app.add_subcommand("build-bank", "Train one CAV per labelled concept");
    c_bank->add_option("--examples", bank.examples, "Root of <concept>/{pos,neg}/*.features");
    c_bank->add_option("--concepts", bank.manifest, "JSON manifest of concept examples");
    c_bank->add_option("--backbone-id", bank.backbone_id, "Backbone the examples came from");
    c_bank->add_option("--regularization", bank.cav.regularization, "L2 penalty");
    c_bank->add_option("--lr", bank.cav.lr, "Gradient step");
    c_bank->add_option("--epochs", bank.cav.epochs, "Gradient epochs");
    c_bank->add_option("--seed", bank.cav.seed, "Shuffle seed");
    c_bank->add_option("--out", bank.out, "Bank file")->required();

    FitHeadArgs head;
    auto* c_head = app.add_subcommand("fit-head", "Fit a woe, gnb, ridge or original head");
    head.meta.add(c_head, true);
    c_head->add_option("--head", head.head, "woe | gnb | ridge | original")
        ->check(CLI::IsMember({"woe", "gnb", "ridge", "original"}));
    c_head->add_option("--features", head.features, "Training features")->required();
    c_head->add_option("--basis", head.basis, "Concept basis or bank");
    c_head->add_option("--lambda", head.lambda, "Ridge penalty");
    c_head->add_option("--var-floor", head.var_floor, "Variance floor");
    c_head->add_option("--per-class", head.per_class, "Resample to this many images per class");
    c_head->add_option("--seed", head.seed, "Resampling seed");
    c_head->add_flag("--no-augment", head.no_augment, "Resample duplicates without augmentation");
    c_head->add_option("--out", head.out, "Head file")->required();

    ExperimentArgs evaluate;
    auto* c_eval = app.add_subcommand("evaluate", "Macro precision/recall/F1 over seeds, or of fitted artifacts");
    add_experiment_flags(c_eval, evaluate, false);
    c_eval->add_option("--head", evaluate.head, "woe | gnb | ridge | original | ice | pcbm+woe ...");
    c_eval->add_option("--model", evaluate.model, "original | ice | ice+gnb | ice+woe | pcbm | pcbm+woe");
    c_eval->add_option("--head-file", evaluate.head_file, "Evaluate this fitted head instead of running seeds");
    c_eval->add_option("--basis", evaluate.basis, "Basis the head file was fitted on");
    c_eval->add_option("--out", evaluate.out, "Metrics JSON (fitted-artifact mode)");

    ExperimentArgs sweep;
    auto* c_sweep = app.add_subcommand("sweep", "F1 against the number of concepts");
    add_experiment_flags(c_sweep, sweep, true);
    sweep.k_text = "5..40";
    c_sweep->add_option("--reducers,--reducer", sweep.reducers, "Reducers, e.g. nmf,pca")
        ->delimiter(',')
        ->check(CLI::IsMember({"nmf", "pca"}));
    c_sweep->add_option("--models", sweep.models, "Models, e.g. ice,ice+woe,original")->delimiter(',');

    BundleArgs bundle;
    auto* c_bundle = app.add_subcommand("bundle", "Assemble a service bundle");
    bundle.backbone.add(c_bundle);
    bundle.meta.add(c_bundle, true);
    c_bundle->add_option("--train-features", bundle.train_features, "Features the evidence models are fitted on")->required();
    c_bundle->add_option("--ice-basis", bundle.ice_bases, "NMF/PCA basis (repeatable)")->required();
    c_bundle->add_option("--bank", bundle.bank, "CAV bank for the pcbm method");
    c_bundle->add_option("--example", bundle.examples, "Example image (repeatable)");
    c_bundle->add_option("--default-k", bundle.default_k, "Default ICE basis");
    c_bundle->add_option("--annotation-size", bundle.annotation_size, "Heatmap side in pixels");
    c_bundle->add_option("--out", bundle.out, "Bundle directory")->required();

    ServeArgs serve;
    auto* c_serve = app.add_subcommand("serve", "Serve the evidence API");
    c_serve->add_option("--bundle", serve.server.bundle_path, "Bundle directory")->envname("EVAI_BUNDLE");
    c_serve->add_option("--port", serve.server.port, "Port (0 = any free port)")->envname("EVAI_PORT");
    c_serve->add_option("--host", serve.server.host, "Bind address")->envname("EVAI_HOST");
    c_serve->add_option("--cache-size", serve.server.cache_size, "Uploaded images kept in memory")
        ->envname("EVAI_CACHE_SIZE");
    c_serve->add_option("--static-dir", serve.server.static_dir, "UI assets served at /");

    SynthArgs synth;
    auto* c_synth = app.add_subcommand("synth", "Write a planted-concept feature dataset");
    c_synth->add_option("--out", synth.out, "Output directory")->required();
    c_synth->add_option("--classes", synth.planted.classes, "Number of classes");
    c_synth->add_option("--train-per-class", synth.planted.train_per_class, "Training images per class");
    c_synth->add_option("--test-per-class", synth.planted.test_per_class, "Test images per class");
    c_synth->add_option("--grid", synth.planted.grid, "Feature grid side");
    c_synth->add_option("--channels", synth.planted.channels, "Feature channels");
    c_synth->add_option("--noise", synth.planted.noise, "Noise scale");
    c_synth->add_option("--seed", synth.planted.seed, "Seed");

    DemoArgs demo;
    auto* c_demo = app.add_subcommand("demo-bundle", "Write a self-contained demo bundle over synthetic images");
    c_demo->add_option("--out", demo.out, "Bundle directory")->required();
    c_demo->add_option("--seed", demo.options.seed, "Seed");
    c_demo->add_option("--side", demo.options.side, "Image side");
    c_demo->add_option("--train-per-class", demo.options.train_per_class, "Training images per class");
    c_demo->add_option("--k", demo.options.ice_k, "ICE concept counts")->delimiter(',');
    c_demo->add_flag("!--no-pcbm", demo.options.with_pcbm, "Leave out the labelled-concept bank");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::CallForVersion&) {
        out << kVersion << '\n';
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    const auto* cmd = app.get_subcommands().front();
    const std::string verb = cmd->get_name();
    Context ctx{args, out, threads};
    try {
        const auto previous = fs::current_path();
        struct Restore {
            fs::path dir;
            ~Restore() {
                std::error_code ec;
                fs::current_path(dir, ec);
            }
        } restore{previous};
        if (!workdir.empty()) {
            fs::create_directories(workdir);
            fs::current_path(workdir);
        }
        if (verb == "extract") run_extract(extract, ctx);
        else if (verb == "fit-reducer") run_fit_reducer(reducer, ctx);
        else if (verb == "build-bank") run_build_bank(bank, ctx);
        else if (verb == "fit-head") run_fit_head(head, ctx);
        else if (verb == "evaluate") run_evaluate(evaluate, ctx);
        else if (verb == "sweep") run_sweep(sweep, ctx);
        else if (verb == "bundle") run_bundle(bundle, ctx);
        else if (verb == "serve") run_serve(serve, ctx);
        else if (verb == "synth") run_synth(synth, ctx);
        else if (verb == "demo-bundle") run_demo_bundle(demo, ctx);
        return 0;
    } catch (const Error& e) {
        err << json{{"error", {{"verb", verb}, {"code", e.code()}, {"message", e.what()}}}}.dump() << '\n';
    } catch (const std::exception& e) {
        err << json{{"error", {{"verb", verb}, {"code", "InternalError"}, {"message", e.what()}}}}.dump() << '\n';
    }
    return 1;
}

}  // namespace evai::cli
