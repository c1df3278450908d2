#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "seqshort/checkpoint.hpp"
#include "seqshort/data.hpp"
#include "seqshort/encoder.hpp"

namespace seqshort {

struct TrainConfig {
    std::size_t epochs = 50;
    std::size_t warmup_epochs = 2;
    std::size_t cosine_cycles = 1;
    double max_lr = 2e-3;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::string preset = "toy";

    void validate() const {
        if (epochs == 0) throw ConfigError("train: epochs must be >= 1");
        if (warmup_epochs >= epochs) throw ConfigError("train: warmup_epochs must be < epochs");
        if (cosine_cycles == 0) throw ConfigError("train: cosine_cycles must be >= 1");
        if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
        if (!(max_lr > 0.0)) throw ConfigError("train: max_lr must be > 0");
    }

    /// Lymph-node preset: 5 warmup epochs, one cosine cycle, lr 1e-4, batch 16.
    static TrainConfig lnm() {
        TrainConfig cfg;
        cfg.epochs = 200;
        cfg.warmup_epochs = 5;
        cfg.cosine_cycles = 1;
        cfg.max_lr = 1e-4;
        cfg.batch_size = 16;
        cfg.preset = "lnm";
        return cfg;
    }

    /// Subtyping preset: 10 warmup epochs, two cosine cycles, lr 5e-5, batch 32.
    static TrainConfig subtype() {
        TrainConfig cfg;
        cfg.epochs = 200;
        cfg.warmup_epochs = 10;
        cfg.cosine_cycles = 2;
        cfg.max_lr = 5e-5;
        cfg.batch_size = 32;
        cfg.preset = "subtype";
        return cfg;
    }

    static TrainConfig toy() { return TrainConfig{}; }

    static TrainConfig from_preset(const std::string& name) {
        if (name == "toy") return toy();
        if (name == "lnm") return lnm();
        if (name == "subtype") return subtype();
        throw ConfigError("unknown training preset '" + name + "' (expected toy, lnm or subtype)");
    }

    nlohmann::json to_json() const {
        return {{"epochs", epochs},   {"warmup_epochs", warmup_epochs}, {"cosine_cycles", cosine_cycles},
                {"max_lr", max_lr},   {"batch_size", batch_size},       {"seed", seed},
                {"beta1", beta1},     {"beta2", beta2},                 {"adam_eps", adam_eps},
                {"preset", preset}};
    }
};

/// Per-step learning rate: a linear ramp reaching max_lr at the end of warmup,
/// then `cosine_cycles` equal half-cosine segments, each restarting at max_lr.
inline double lr_at(std::size_t step, std::size_t steps_per_epoch, const TrainConfig& cfg) {
    const double warmup = static_cast<double>(cfg.warmup_epochs * steps_per_epoch);
    const double total = static_cast<double>(cfg.epochs * steps_per_epoch);
    const double s = static_cast<double>(step);
    if (s < warmup) return cfg.max_lr * (s + 1.0) / warmup;
    const double segment = (total - warmup) / static_cast<double>(cfg.cosine_cycles);
    if (!(segment > 0.0)) return cfg.max_lr;
    const double offset = s - warmup;
    const double cycle = std::min(std::floor(offset / segment), static_cast<double>(cfg.cosine_cycles - 1));
    const double tau = std::min(offset - cycle * segment, segment);
    return cfg.max_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * tau / segment));
}

template <class T>
struct AdamState {
    struct Moments {
        Tensor<double> m;
        Tensor<double> v;
    };
    std::map<std::string, Moments> moments;
    std::size_t step = 0;
};

/// Bias-corrected Adam over every trainable parameter, then clears all grads.
/// Frozen parameters are never touched.
template <class T>
void adam_step(const std::vector<Parameter<T>*>& params, AdamState<T>& state, double lr, const TrainConfig& cfg) {
    for (const auto* p : params) {
        if (p->trainable() && !p->has_grad()) {
            throw StateError("adam_step: trainable parameter '" + p->name() + "' has no gradient");
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto* p : params) {
        if (!p->trainable()) {
            p->zero_grad();
            continue;
        }
        auto [it, fresh] = state.moments.try_emplace(p->name());
        if (fresh) {
            it->second.m = Tensor<double>(p->value().shape());
            it->second.v = Tensor<double>(p->value().shape());
        }
        auto& mom = it->second;
        auto value = p->value().values();
        const auto grad = p->grad().values();
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double g = grad[i];
            mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
            mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
            const double m_hat = mom.m[i] / c1;
            const double v_hat = mom.v[i] / c2;
            value[i] = static_cast<T>(value[i] - lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps));
        }
        p->zero_grad();
    }
}

// ---------------------------------------------------------------------------
// Metrics

/// Mann-Whitney AUROC with midranks for ties. Labels are 1 (positive) or 0.
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw MetricError("auroc: scores and labels differ in length");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    std::vector<double> rank(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) rank[order[t]] = mid;
        i = j + 1;
    }
    double pos = 0.0, rank_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] != 0) {
            pos += 1.0;
            rank_sum += rank[i];
        }
    }
    const double neg = static_cast<double>(n) - pos;
    if (pos == 0.0 || neg == 0.0) throw MetricError("auroc: both positive and negative samples are required");
    return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

struct AurocReport {
    double macro = 0.0;
    std::vector<double> per_class;  // one-vs-rest; for C=2 a single entry
};

/// C=2: AUROC of the class-1 probability. C>2: unweighted mean of the
/// one-vs-rest AUROCs over softmax scores.
inline AurocReport classification_auroc(const std::vector<std::vector<double>>& probs,
                                        const std::vector<std::size_t>& labels, std::size_t num_classes) {
    AurocReport out;
    auto column = [&](std::size_t c) {
        std::vector<double> s(probs.size());
        std::vector<int> y(labels.size());
        for (std::size_t i = 0; i < probs.size(); ++i) {
            s[i] = probs[i].at(c);
            y[i] = labels[i] == c ? 1 : 0;
        }
        return auroc(s, y);
    };
    if (num_classes == 2) {
        out.per_class.push_back(column(1));
        out.macro = out.per_class.front();
        return out;
    }
    for (std::size_t c = 0; c < num_classes; ++c) out.per_class.push_back(column(c));
    out.macro = std::accumulate(out.per_class.begin(), out.per_class.end(), 0.0) / static_cast<double>(num_classes);
    return out;
}

// ---------------------------------------------------------------------------
// Training loop

template <class T>
std::vector<double> predict_proba(const ClassifierModel<T>& model, const BagRecord& bag) {
    const auto result = model.forward(to_model_dtype<T>(bag.features));
    const auto probs = kernels::softmax_rows(result.logits.value().template cast<double>());
    return {probs.values().begin(), probs.values().end()};
}

struct EvalResult {
    AurocReport auroc;
    double mean_loss = 0.0;
    std::vector<std::size_t> class_counts;
};

template <class T>
EvalResult evaluate(const ClassifierModel<T>& model, const std::vector<BagRecord>& bags) {
    if (bags.empty()) throw DataError("evaluate: empty split");
    const std::size_t classes = model.config().encoder.num_classes;
    EvalResult out;
    out.class_counts.assign(classes, 0);
    std::vector<std::vector<double>> probs;
    std::vector<std::size_t> labels;
    for (const auto& bag : bags) {
        probs.push_back(predict_proba(model, bag));
        labels.push_back(bag.label);
        ++out.class_counts.at(bag.label);
        out.mean_loss -= std::log(std::max(probs.back()[bag.label], 1e-300));
    }
    out.mean_loss /= static_cast<double>(bags.size());
    out.auroc = classification_auroc(probs, labels, classes);
    return out;
}

/// Forward and backward each bag in turn with its loss scaled by 1/B, so the
/// parameter grads end up holding the mean of the per-bag gradients.
template <class T>
double accumulate_batch(const ClassifierModel<T>& model, const std::vector<const BagRecord*>& batch) {
    double total = 0.0;
    const T weight = static_cast<T>(1.0 / static_cast<double>(batch.size()));
    for (const BagRecord* bag : batch) {
        const auto result = model.forward(to_model_dtype<T>(bag->features));
        const Var<T> loss = cross_entropy(result.logits, bag->label);
        const double value = loss.value()[0];
        if (!std::isfinite(value)) throw NumericalError("non-finite loss on bag '" + bag->id + "'");
        total += value;
        backward(scale(loss, weight));
    }
    return total / static_cast<double>(batch.size());
}

struct EpochMetrics {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_auroc = 0.0;
};

struct TrainReport {
    std::vector<double> loss_curve;  // mean batch loss per optimizer step
    std::vector<double> lr_curve;
    std::vector<EpochMetrics> history;
    double initial_train_loss = 0.0;
    double final_train_loss = 0.0;
    double final_val_auroc = 0.0;
    std::vector<double> final_val_auroc_per_class;
    std::size_t steps_per_epoch = 0;
    std::size_t trainable_parameters = 0;
    std::size_t total_parameters = 0;
    std::string checkpoint_path;

    nlohmann::json to_json() const {
        nlohmann::json hist = nlohmann::json::array();
        for (const auto& h : history) {
            hist.push_back({{"epoch", h.epoch}, {"train_loss", h.train_loss}, {"val_loss", h.val_loss},
                            {"val_auroc", h.val_auroc}});
        }
        return {{"loss_curve", loss_curve},
                {"lr_curve", lr_curve},
                {"history", hist},
                {"initial_train_loss", initial_train_loss},
                {"final_train_loss", final_train_loss},
                {"final_val_auroc", final_val_auroc},
                {"final_val_auroc_per_class", final_val_auroc_per_class},
                {"steps_per_epoch", steps_per_epoch},
                {"trainable_parameters", trainable_parameters},
                {"total_parameters", total_parameters},
                {"checkpoint", checkpoint_path}};
    }
};

struct TrainOptions {
    std::filesystem::path checkpoint;  // written after the last epoch when non-empty
    bool validate_every_epoch = true;
};

/// Trains on in-memory bags. Each optimizer step accumulates the mean loss of
/// `batch_size` bags processed one at a time; bag order is shuffled per epoch
/// from cfg.seed.
template <class T>
TrainReport train(ClassifierModel<T>& model, const std::vector<BagRecord>& train_bags,
                  const std::vector<BagRecord>& val_bags, const TrainConfig& cfg, const TrainOptions& options = {}) {
    cfg.validate();
    if (train_bags.empty()) throw DataError("train: the training split is empty");
    if (val_bags.empty()) throw DataError("train: the validation split is empty");
    TrainReport report;
    report.trainable_parameters = count_parameters(model, true);
    report.total_parameters = count_parameters(model, false);
    report.steps_per_epoch = (train_bags.size() + cfg.batch_size - 1) / cfg.batch_size;
    report.initial_train_loss = evaluate(model, train_bags).mean_loss;

    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(train_bags.size());
    std::iota(order.begin(), order.end(), 0);
    AdamState<T> state;
    const auto params = model.parameters();
    model.zero_grad();
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::vector<const BagRecord*> batch;
            for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) {
                batch.push_back(&train_bags[order[i]]);
            }
            const double loss = accumulate_batch(model, batch);
            const double lr = lr_at(step, report.steps_per_epoch, cfg);
            adam_step(params, state, lr, cfg);
            report.loss_curve.push_back(loss);
            report.lr_curve.push_back(lr);
            epoch_loss += loss * static_cast<double>(batch.size());
            ++step;
        }
        EpochMetrics metrics;
        metrics.epoch = epoch + 1;
        metrics.train_loss = epoch_loss / static_cast<double>(train_bags.size());
        if (options.validate_every_epoch || epoch + 1 == cfg.epochs) {
            const auto val = evaluate(model, val_bags);
            metrics.val_loss = val.mean_loss;
            metrics.val_auroc = val.auroc.macro;
        }
        report.history.push_back(metrics);
    }
    report.final_train_loss = evaluate(model, train_bags).mean_loss;
    const auto val = evaluate(model, val_bags);
    report.final_val_auroc = val.auroc.macro;
    report.final_val_auroc_per_class = val.auroc.per_class;
    if (!options.checkpoint.empty()) {
        checkpoint_save(model, options.checkpoint);
        report.checkpoint_path = options.checkpoint.string();
    }
    return report;
}

/// Manifest-driven overload: uses the "train" and "val" splits.
template <class T>
TrainReport train(ClassifierModel<T>& model, const DatasetManifest& manifest, const TrainConfig& cfg,
                  const TrainOptions& options = {}) {
    if (manifest.feature_dim != model.config().seqshort.input_dim) {
        throw DataError("train: manifest feature_dim " + std::to_string(manifest.feature_dim) +
                        " does not match model input_dim " + std::to_string(model.config().seqshort.input_dim));
    }
    if (manifest.num_classes != model.config().encoder.num_classes) {
        throw DataError("train: manifest has " + std::to_string(manifest.num_classes) + " classes, model has " +
                        std::to_string(model.config().encoder.num_classes));
    }
    const auto train_bags = load_bags(manifest.filter("train"));
    const auto val_bags = load_bags(manifest.filter("val"));
    return train(model, train_bags, val_bags, cfg, options);
}

}  // namespace seqshort
