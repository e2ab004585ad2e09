#include "evai/eval_harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <thread>
#include <unordered_map>

#include <boost/math/distributions/students_t.hpp>

#include "evai/concept_bank.hpp"
#include "evai/errors.hpp"

namespace evai {
namespace {

double safe_ratio(double num, double den) { return den > 0.0 ? num / den : 0.0; }

std::string reducer_column(const ExperimentConfig& config) {
    switch (config.model) {
        case ModelKind::original: return "none";
        case ModelKind::pcbm:
        case ModelKind::pcbm_woe: return "cav";
        default: return std::string(to_string(config.reducer));
    }
}

LinearHead original_head(const ExperimentData& data, const TrainingSample& sample, double lambda) {
    if (data.original_head) return *data.original_head;
    auto head = fit_ridge(pooled_features(sample.batch), sample.labels, data.hypotheses, lambda);
    head.kind = HeadKind::original;
    return head;
}

std::vector<int> predict_seed(const ExperimentData& data, const TrainingSample& sample,
                              const ExperimentConfig& config, std::uint64_t seed) {
    const auto n_test = static_cast<Eigen::Index>(data.test.n);
    std::vector<int> predictions(static_cast<std::size_t>(n_test));
    auto each = [&](auto&& predict) {
        for (Eigen::Index i = 0; i < n_test; ++i) predictions[static_cast<std::size_t>(i)] = static_cast<int>(predict(i));
    };

    switch (config.model) {
        case ModelKind::original: {
            const auto head = original_head(data, sample, config.ridge_lambda);
            const Eigen::MatrixXd test = pooled_features(data.test);
            each([&](Eigen::Index i) { return apply_head(head, test.row(i).transpose()); });
            break;
        }
        case ModelKind::ice:
        case ModelKind::ice_gnb:
        case ModelKind::ice_woe: {
            ConceptBasis basis;
            if (config.reducer == BasisKind::nmf) {
                NmfOptions nmf;
                nmf.k = config.k;
                nmf.iters = config.nmf_iters;
                nmf.tol = config.nmf_tol;
                nmf.seed = seed;
                basis = fit_nmf(sample.batch, nmf).basis;
            } else if (config.reducer == BasisKind::pca) {
                basis = fit_pca(sample.batch, config.k);
            } else {
                throw ConfigError("ICE models need an nmf or pca reducer");
            }
            const Eigen::MatrixXd test = concept_scores(data.test, basis, config.transform, config.pool);
            if (config.model == ModelKind::ice) {
                const auto head = original_head(data, sample, config.ridge_lambda);
                each([&](Eigen::Index i) {
                    const ConceptScoreVector s{{}, test.row(i).transpose()};
                    return apply_head(head, reconstruct_features(s, basis));
                });
                break;
            }
            const Eigen::MatrixXd train = concept_scores(sample.batch, basis, config.transform, config.pool);
            const auto prior = config.model == ModelKind::ice_gnb ? PriorMode::empirical : PriorMode::uniform;
            const auto model = fit_gnb(train, sample.labels, data.hypotheses, prior, config.var_floor);
            if (config.model == ModelKind::ice_gnb)
                each([&](Eigen::Index i) { return classify(model, test.row(i).transpose()); });
            else
                each([&](Eigen::Index i) { return woe_argmax(model, test.row(i).transpose()); });
            break;
        }
        case ModelKind::pcbm:
        case ModelKind::pcbm_woe: {
            if (!data.bank) throw ConfigError("PCBM models need a concept bank");
            const Eigen::MatrixXd train = concept_scores(sample.batch, *data.bank, config.transform, config.pool);
            const Eigen::MatrixXd test = concept_scores(data.test, *data.bank, config.transform, config.pool);
            if (config.model == ModelKind::pcbm) {
                const auto head = fit_ridge(train, sample.labels, data.hypotheses, config.ridge_lambda);
                each([&](Eigen::Index i) { return apply_head(head, test.row(i).transpose()); });
            } else {
                const auto model = fit_gnb(train, sample.labels, data.hypotheses, PriorMode::uniform, config.var_floor);
                each([&](Eigen::Index i) { return woe_argmax(model, test.row(i).transpose()); });
            }
            break;
        }
    }
    return predictions;
}

template <typename Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(count, 1))));
    if (threads == 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t)
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = t; i < count; i += threads) fn(i);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

std::string fixed(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

}  // namespace

Eigen::Index woe_argmax(const GaussianEvidenceModel& model, const Eigen::VectorXd& e) {
    Eigen::Index best = 0;
    double best_value = -std::numeric_limits<double>::infinity();
    for (Eigen::Index h = 0; h < model.hypotheses(); ++h) {
        const double v = woe(model, h, e).posterior_log_odds;
        if (v > best_value) {
            best_value = v;
            best = h;
        }
    }
    return best;
}

MetricsRecord compute_metrics(std::span<const int> predictions, std::span<const int> labels, int num_classes) {
    if (predictions.size() != labels.size())
        throw ShapeError("compute_metrics: " + std::to_string(predictions.size()) + " predictions for " +
                         std::to_string(labels.size()) + " labels");
    if (labels.empty()) throw ShapeError("compute_metrics needs at least one sample");
    if (num_classes <= 0) {
        int top = 0;
        for (std::size_t i = 0; i < labels.size(); ++i) top = std::max({top, labels[i], predictions[i]});
        num_classes = top + 1;
    }
    MetricsRecord r;
    r.confusion = Eigen::MatrixXi::Zero(num_classes, num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes || predictions[i] < 0 || predictions[i] >= num_classes)
            throw DataError("class index out of range at sample " + std::to_string(i));
        ++r.confusion(labels[i], predictions[i]);
    }
    for (int c = 0; c < num_classes; ++c) {
        const double tp = r.confusion(c, c);
        const double predicted = r.confusion.col(c).sum();
        const double actual = r.confusion.row(c).sum();
        const double p = safe_ratio(tp, predicted);
        const double rec = safe_ratio(tp, actual);
        r.class_precision.push_back(100.0 * p);
        r.class_recall.push_back(100.0 * rec);
        r.class_f1.push_back(100.0 * safe_ratio(2.0 * p * rec, p + rec));
    }
    auto mean = [&](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / num_classes; };
    r.precision = mean(r.class_precision);
    r.recall = mean(r.class_recall);
    r.f1 = mean(r.class_f1);
    return r;
}

RunSummary summarize(std::span<const double> values) {
    RunSummary s;
    s.n = values.size();
    if (values.empty()) return s;
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
    double sq = 0.0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(sq / static_cast<double>(s.n));
    return s;
}

TTestResult compare_runs(const RunSummary& a, const RunSummary& b) {
    if (a.n < 2 || b.n < 2) throw ConfigError("compare_runs needs n >= 2 in both runs");
    if (a.std < 0.0 || b.std < 0.0) throw ConfigError("standard deviations must be >= 0");
    const double na = static_cast<double>(a.n), nb = static_cast<double>(b.n);
    TTestResult r;
    r.df = na + nb - 2.0;
    const double pooled = std::sqrt(((na - 1.0) * a.std * a.std + (nb - 1.0) * b.std * b.std) / r.df);
    const double diff = a.mean - b.mean;
    if (pooled == 0.0) {
        if (diff == 0.0) return r;
        r.t = std::copysign(std::numeric_limits<double>::infinity(), diff);
        r.cohens_d = r.t;
        r.p_two_tailed = 0.0;
        return r;
    }
    r.t = diff / (pooled * std::sqrt(1.0 / na + 1.0 / nb));
    r.cohens_d = diff / pooled;
    const boost::math::students_t dist(r.df);
    r.p_two_tailed = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
    return r;
}

std::string_view to_string(ModelKind kind) {
    switch (kind) {
        case ModelKind::original: return "original";
        case ModelKind::ice: return "ice";
        case ModelKind::ice_gnb: return "ice+gnb";
        case ModelKind::ice_woe: return "ice+woe";
        case ModelKind::pcbm: return "pcbm";
        case ModelKind::pcbm_woe: return "pcbm+woe";
    }
    return "ice+woe";
}

ModelKind parse_model_kind(std::string_view text) {
    for (auto kind : {ModelKind::original, ModelKind::ice, ModelKind::ice_gnb, ModelKind::ice_woe, ModelKind::pcbm,
                      ModelKind::pcbm_woe})
        if (text == to_string(kind)) return kind;
    throw ConfigError("unknown model '" + std::string(text) +
                      "' (expected original, ice, ice+gnb, ice+woe, pcbm or pcbm+woe)");
}

std::string model_tag(ModelKind kind, Eigen::Index k) {
    const std::string ice = "ICE(" + std::to_string(k) + ")";
    switch (kind) {
        case ModelKind::original: return "Original";
        case ModelKind::ice: return ice;
        case ModelKind::ice_gnb: return ice + "+GNB";
        case ModelKind::ice_woe: return ice + "+WoE";
        case ModelKind::pcbm: return "PCBM";
        case ModelKind::pcbm_woe: return "PCBM+WoE";
    }
    return ice;
}

nlohmann::json ExperimentConfig::to_json() const {
    return {{"model", evai::to_string(model)},
            {"reducer", evai::to_string(reducer)},
            {"k", k},
            {"seeds", seeds},
            {"per_class", per_class},
            {"augment", augment},
            {"nmf_iters", nmf_iters},
            {"nmf_tol", nmf_tol},
            {"transform_iters", transform.iters},
            {"transform_tol", transform.tol},
            {"ridge_lambda", ridge_lambda},
            {"var_floor", var_floor},
            {"pool", pool == PoolMode::mean ? "mean" : "max"}};
}

Eigen::MatrixXd concept_scores(const FeatureBatch& batch, const ConceptBasis& basis,
                               const TransformOptions& transform, PoolMode pool) {
    if (basis.kind == BasisKind::cav && pool == PoolMode::mean) {
        const Eigen::MatrixXd pooled = pooled_features(batch);
        Eigen::MatrixXd out(pooled.rows(), basis.k());
        for (Eigen::Index i = 0; i < pooled.rows(); ++i)
            out.row(i) = project_concepts(pooled.row(i).transpose(), basis).scores.transpose();
        return out;
    }
    return stack_scores(pool_scores(transform_scores(batch, basis, transform), pool));
}

TrainingSample resample_training(const FeatureBatch& pool, std::span<const int> labels, std::size_t per_class,
                                 std::uint64_t seed, bool augment, std::size_t num_classes) {
    if (labels.size() != pool.n) throw ShapeError("training labels do not match the feature pool");
    std::vector<ImageRecord> records(pool.n);
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < pool.n; ++i) {
        records[i].image_id = pool.image_ids[i];
        records[i].label = labels[i];
        index.emplace(pool.image_ids[i], i);
    }
    const auto chosen = prepare_training_set(records, per_class, seed, AugmentConfig{augment}, num_classes);

    TrainingSample out;
    out.batch.n = chosen.size();
    out.batch.h = pool.h;
    out.batch.w = pool.w;
    out.batch.c = pool.c;
    out.batch.backbone_id = pool.backbone_id;
    out.batch.layer = pool.layer;
    out.batch.values.reserve(out.batch.n * pool.h * pool.w * pool.c);
    for (const auto& r : chosen) {
        const auto src = index.at(r.is_augmented ? r.origin_id : r.image_id);
        if (r.augmentation.is_identity()) {
            const auto img = pool.image(src);
            out.batch.values.insert(out.batch.values.end(), img.begin(), img.end());
        } else {
            const auto moved = apply_augmentation(pool, src, r.augmentation);
            out.batch.values.insert(out.batch.values.end(), moved.values.begin(), moved.values.end());
        }
        out.batch.image_ids.push_back(r.image_id);
        out.labels.push_back(r.label);
    }
    return out;
}

std::vector<int> labels_for(const FeatureBatch& batch, std::span<const ImageRecord> records) {
    std::unordered_map<std::string, int> by_id;
    for (const auto& r : records) by_id.emplace(r.image_id, r.label);
    std::vector<int> out;
    out.reserve(batch.n);
    for (const auto& id : batch.image_ids) {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw DataError("image '" + id + "' has no metadata row");
        out.push_back(it->second);
    }
    return out;
}

ExperimentData load_experiment_data(const ExperimentInputs& inputs) {
    std::vector<std::filesystem::path> required{inputs.train_features, inputs.test_features, inputs.metadata};
    if (inputs.original_head) required.push_back(*inputs.original_head);
    if (inputs.bank) required.push_back(*inputs.bank);
    std::string missing;
    for (const auto& p : required)
        if (!std::filesystem::exists(p)) missing += (missing.empty() ? "" : ", ") + p.string();
    if (!missing.empty()) throw IOError("missing experiment artifacts: " + missing);

    ExperimentData data;
    data.train = load_feature_batch(inputs.train_features);
    data.test = load_feature_batch(inputs.test_features);
    const auto records = load_metadata(inputs.metadata, inputs.metadata_config);
    data.train_labels = labels_for(data.train, records);
    data.test_labels = labels_for(data.test, records);
    data.hypotheses = inputs.metadata_config.classes;
    if (inputs.original_head) {
        std::ifstream in(*inputs.original_head);
        data.original_head = linear_head_from_json(nlohmann::json::parse(in));
    }
    if (inputs.bank) data.bank = load_basis(*inputs.bank);
    return data;
}

ExperimentResult run_experiment(const ExperimentData& data, const ExperimentConfig& config) {
    data.train.validate();
    data.test.validate();
    if (data.train_labels.size() != data.train.n || data.test_labels.size() != data.test.n)
        throw ShapeError("labels do not match feature batches");
    if (data.train.c != data.test.c) throw ShapeError("train and test features differ in channel count");
    if (data.hypotheses.size() < 2) throw ConfigError("an experiment needs at least two hypotheses");
    if (config.seeds.empty()) throw ConfigError("an experiment needs at least one seed");
    const bool pcbm = config.model == ModelKind::pcbm || config.model == ModelKind::pcbm_woe;
    if (pcbm && !data.bank) throw ConfigError("PCBM models need a concept bank");

    ExperimentResult result;
    result.model_tag = model_tag(config.model, pcbm ? (data.bank ? data.bank->k() : 0) : config.k);
    result.runs.resize(config.seeds.size());
    const auto num_classes = data.hypotheses.size();
    parallel_for(config.seeds.size(), config.threads, [&](std::size_t i) {
        const auto seed = config.seeds[i];
        TrainingSample sample;
        if (config.per_class > 0) {
            sample = resample_training(data.train, data.train_labels, config.per_class, seed, config.augment,
                                       num_classes);
        } else {
            sample.batch = data.train;
            sample.labels = data.train_labels;
        }
        const auto predictions = predict_seed(data, sample, config, seed);
        auto record = compute_metrics(predictions, data.test_labels, static_cast<int>(num_classes));
        record.seed = seed;
        record.model_tag = result.model_tag;
        result.runs[i] = std::move(record);
    });

    std::vector<double> p, r, f;
    for (const auto& run : result.runs) {
        p.push_back(run.precision);
        r.push_back(run.recall);
        f.push_back(run.f1);
    }
    result.precision = summarize(p);
    result.recall = summarize(r);
    result.f1 = summarize(f);
    return result;
}

std::string format_summary(const RunSummary& s) {
    return fixed(s.mean, 2) + " ± " + fixed(s.std, 2);
}

SweepCurve concept_sweep(const ExperimentData& data, const ExperimentConfig& config,
                         std::span<const Eigen::Index> k_values) {
    if (k_values.empty()) throw ConfigError("concept sweep needs at least one k");
    for (std::size_t i = 1; i < k_values.size(); ++i)
        if (k_values[i] <= k_values[i - 1]) throw ConfigError("sweep k values must be strictly increasing");
    for (auto k : k_values)
        if (k < 1 || k > static_cast<Eigen::Index>(data.train.c))
            throw ConfigError("sweep k = " + std::to_string(k) + " outside 1.." + std::to_string(data.train.c));

    SweepCurve curve;
    curve.reducer = config.reducer;
    for (auto k : k_values) {
        auto c = config;
        c.k = k;
        auto result = run_experiment(data, c);
        curve.k_values.push_back(k);
        curve.f1.push_back(result.f1);
        curve.results.push_back(std::move(result));
    }
    std::string tag = model_tag(config.model, 0);
    const auto pos = tag.find("(0)");
    if (pos != std::string::npos) tag.erase(pos, 3);
    curve.model_tag = tag;
    return curve;
}

void write_runs_csv(const std::filesystem::path& path, const ExperimentResult& result) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IOError("cannot write " + path.string());
    out << "model_tag,seed,precision,recall,f1\n";
    for (const auto& r : result.runs)
        out << r.model_tag << ',' << r.seed << ',' << fixed(r.precision) << ',' << fixed(r.recall) << ','
            << fixed(r.f1) << '\n';
}

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepCurve> curves) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IOError("cannot write " + path.string());
    out << "model_tag,reducer,k,seed,precision,recall,f1\n";
    for (const auto& curve : curves)
        for (std::size_t i = 0; i < curve.k_values.size(); ++i)
            for (const auto& r : curve.results[i].runs)
                out << curve.model_tag << ',' << to_string(curve.reducer) << ',' << curve.k_values[i] << ','
                    << r.seed << ',' << fixed(r.precision) << ',' << fixed(r.recall) << ',' << fixed(r.f1) << '\n';
}

nlohmann::json summary_json(const ExperimentResult& result, const ExperimentConfig& config) {
    auto stat = [](const RunSummary& s) { return nlohmann::json{{"mean", s.mean}, {"std", s.std}, {"n", s.n}}; };
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : result.runs) {
        nlohmann::json confusion = nlohmann::json::array();
        for (Eigen::Index i = 0; i < r.confusion.rows(); ++i) {
            std::vector<int> row(static_cast<std::size_t>(r.confusion.cols()));
            for (Eigen::Index j = 0; j < r.confusion.cols(); ++j) row[static_cast<std::size_t>(j)] = r.confusion(i, j);
            confusion.push_back(row);
        }
        runs.push_back({{"seed", r.seed},
                        {"precision", r.precision},
                        {"recall", r.recall},
                        {"f1", r.f1},
                        {"class_f1", r.class_f1},
                        {"confusion", confusion}});
    }
    return {{"model_tag", result.model_tag},
            {"reducer", reducer_column(config)},
            {"config", config.to_json()},
            {"precision", stat(result.precision)},
            {"recall", stat(result.recall)},
            {"f1", stat(result.f1)},
            {"row", result.model_tag + " & " + format_summary(result.precision) + " & " +
                        format_summary(result.recall) + " & " + format_summary(result.f1)},
            {"runs", runs}};
}

nlohmann::json sweep_json(std::span<const SweepCurve> curves) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& c : curves) {
        nlohmann::json points = nlohmann::json::array();
        for (std::size_t i = 0; i < c.k_values.size(); ++i)
            points.push_back({{"k", c.k_values[i]}, {"f1_mean", c.f1[i].mean}, {"f1_std", c.f1[i].std}});
        out.push_back({{"model_tag", c.model_tag}, {"reducer", to_string(c.reducer)}, {"points", points}});
    }
    return out;
}

}  // namespace evai
