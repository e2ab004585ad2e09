#include "evai/concept_bank.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <thread>

#include "evai/errors.hpp"
#include "evai/feature_batch.hpp"
#include "evai/rng.hpp"

namespace evai {
namespace {

struct Example {
    const Eigen::VectorXd* x;
    double y;
};

bool canonical_less(const Example& a, const Example& b) {
    if (a.y != b.y) return a.y > b.y;
    return std::lexicographical_compare(a.x->data(), a.x->data() + a.x->size(), b.x->data(),
                                        b.x->data() + b.x->size());
}

std::vector<Eigen::VectorXd> embeddings_in(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw DataError("missing example directory " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".features") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    std::vector<Eigen::VectorXd> out;
    for (const auto& f : files) {
        const auto pooled = pooled_features(load_feature_batch(f));
        for (Eigen::Index r = 0; r < pooled.rows(); ++r) out.emplace_back(pooled.row(r).transpose());
    }
    return out;
}

}  // namespace

Cav train_cav(const ConceptExamples& examples, const CavOptions& options) {
    if (examples.positives.empty() || examples.negatives.empty())
        throw DataError("concept '" + examples.name + "' needs both positive and negative examples");
    if (!(options.regularization > 0.0)) throw ConfigError("CAV regularization must be > 0");
    if (!(options.lr > 0.0) || options.epochs < 1) throw ConfigError("CAV needs lr > 0 and epochs >= 1");

    const auto dim = examples.positives.front().size();
    std::vector<Example> data;
    for (const auto& x : examples.positives) data.push_back({&x, 1.0});
    for (const auto& x : examples.negatives) data.push_back({&x, -1.0});
    for (const auto& e : data)
        if (e.x->size() != dim) throw ShapeError("concept '" + examples.name + "' mixes embedding sizes");

    std::sort(data.begin(), data.end(), canonical_less);
    Rng rng(options.seed);
    for (std::size_t i = data.size(); i > 1; --i) std::swap(data[i - 1], data[rng.below(i)]);

    Cav cav;
    cav.name = examples.name;
    cav.weights.resize(dim);
    for (Eigen::Index i = 0; i < dim; ++i) cav.weights(i) = 0.01 * rng.normal();
    cav.bias = 0.0;

    const double n = static_cast<double>(data.size());
    Eigen::VectorXd grad_w(dim);
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        grad_w.setZero();
        double grad_b = 0.0;
        for (const auto& e : data) {
            const double margin = e.y * (cav.weights.dot(*e.x) + cav.bias);
            const double g = -e.y / (1.0 + std::exp(margin));
            grad_w += g * *e.x;
            grad_b += g;
        }
        grad_w = grad_w / n + options.regularization * cav.weights;
        grad_b /= n;
        cav.weights -= options.lr * grad_w;
        cav.bias -= options.lr * grad_b;
    }
    if (!cav.weights.allFinite()) throw DataError("CAV training for '" + examples.name + "' diverged");
    if (cav.weights.squaredNorm() == 0.0) throw DataError("CAV for '" + examples.name + "' is all zeros");

    std::size_t correct = 0;
    for (const auto& e : data) {
        const double predicted = cav.decision(*e.x) > 0.0 ? 1.0 : -1.0;
        if (predicted == e.y) ++correct;
    }
    cav.train_accuracy = static_cast<double>(correct) / n;
    return cav;
}

ConceptBank build_bank(std::span<const ConceptExamples> all_examples, const CavOptions& options,
                       std::string backbone_id, unsigned threads) {
    if (all_examples.empty()) throw ConfigError("concept bank needs at least one concept");
    std::set<std::string> names;
    for (const auto& ex : all_examples)
        if (!names.insert(ex.name).second) throw ConfigError("duplicate concept name '" + ex.name + "'");

    ConceptBank bank;
    bank.cavs.resize(all_examples.size());
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(all_examples.size())));
    auto work = [&](std::size_t begin) {
        for (std::size_t i = begin; i < all_examples.size(); i += threads)
            bank.cavs[i] = train_cav(all_examples[i], options);
    };
    if (threads == 1) {
        work(0);
    } else {
        std::vector<std::exception_ptr> errors(threads);
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < threads; ++t)
            pool.emplace_back([&, t] {
                try {
                    work(t);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    const auto dim = bank.cavs.front().weights.size();
    bank.basis.kind = BasisKind::cav;
    bank.basis.backbone_id = std::move(backbone_id);
    bank.basis.directions.resize(static_cast<Eigen::Index>(bank.cavs.size()), dim);
    nlohmann::json accuracy = nlohmann::json::object();
    for (std::size_t i = 0; i < bank.cavs.size(); ++i) {
        if (bank.cavs[i].weights.size() != dim) throw ShapeError("concepts use different embedding sizes");
        bank.basis.directions.row(static_cast<Eigen::Index>(i)) = bank.cavs[i].weights.transpose();
        bank.basis.names.push_back(bank.cavs[i].name);
        accuracy[bank.cavs[i].name] = bank.cavs[i].train_accuracy;
    }
    bank.basis.config = {{"learner", "logistic-l2-gd"},
                         {"regularization", options.regularization},
                         {"lr", options.lr},
                         {"epochs", options.epochs},
                         {"seed", options.seed},
                         {"train_accuracy", accuracy}};
    return bank;
}

ConceptScoreVector project_concepts(const Eigen::VectorXd& embedding, const ConceptBasis& bank) {
    if (bank.kind != BasisKind::cav) throw ConfigError("project_concepts needs a CAV bank");
    if (embedding.size() != bank.channels())
        throw ShapeError("embedding length " + std::to_string(embedding.size()) + " does not match bank width " +
                         std::to_string(bank.channels()));
    ConceptScoreVector out;
    out.scores.resize(bank.k());
    for (Eigen::Index j = 0; j < bank.k(); ++j) {
        const auto w = bank.directions.row(j);
        out.scores(j) = w.dot(embedding) / w.squaredNorm();
    }
    return out;
}

std::vector<ConceptExamples> load_concept_examples(const std::filesystem::path& root) {
    if (!std::filesystem::is_directory(root)) throw IOError("concept directory not found: " + root.string());
    std::vector<std::filesystem::path> dirs;
    for (const auto& entry : std::filesystem::directory_iterator(root))
        if (entry.is_directory()) dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());
    std::vector<ConceptExamples> out;
    for (const auto& d : dirs) {
        ConceptExamples ex;
        ex.name = d.filename().string();
        ex.positives = embeddings_in(d / "pos");
        ex.negatives = embeddings_in(d / "neg");
        out.push_back(std::move(ex));
    }
    if (out.empty()) throw DataError("no concept directories under " + root.string());
    return out;
}

std::vector<ConceptExamples> load_concept_manifest(const std::filesystem::path& manifest) {
    std::ifstream in(manifest);
    if (!in) throw IOError("cannot open concept manifest " + manifest.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed concept manifest: " + std::string(e.what()));
    }
    const auto base = manifest.parent_path();
    auto gather = [&](const nlohmann::json& paths) {
        std::vector<Eigen::VectorXd> out;
        for (const auto& p : paths) {
            const auto pooled = pooled_features(load_feature_batch(base / p.get<std::string>()));
            for (Eigen::Index r = 0; r < pooled.rows(); ++r) out.emplace_back(pooled.row(r).transpose());
        }
        return out;
    };
    std::vector<ConceptExamples> out;
    for (const auto& c : j.at("concepts")) {
        ConceptExamples ex;
        ex.name = c.at("name").get<std::string>();
        ex.positives = gather(c.at("positives"));
        ex.negatives = gather(c.at("negatives"));
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace evai
