#pragma once

// Frozen-feature evaluation: linear probes over encoder features, class
// balanced accuracy, bootstrap confidence intervals, and the fixed transfer
// task suite that mu_tx averages over.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "caplab/errors.hpp"
#include "caplab/matrix.hpp"
#include "caplab/rng.hpp"
#include "caplab/trainer.hpp"
#include "caplab/world.hpp"

namespace caplab {
namespace evalkit {

using numkit::DenseMatrix;

enum class TaskKind { multiclass, multilabel };

// ---------------------------------------------------------------------------
// Probe configuration
// ---------------------------------------------------------------------------

/// Defaults are the published probing protocol: 250 epochs of SGD, batch 256,
/// weight decay 1e-6, momentum 0.9, learning rate grid searched on the
/// validation set between 3e-2 and 10, three probe seeds.
struct ProbeConfig {
    std::uint32_t epochs{250};
    std::uint32_t batch_size{256};
    double weight_decay{1e-6};
    double momentum{0.9};
    std::vector<double> lr_grid{0.03, 0.1, 0.3, 1.0, 3.0, 10.0};
    std::uint32_t seeds{3};

    void validate() const {
        if (epochs < 1) throw ParameterError("ProbeConfig: epochs must be >= 1");
        if (batch_size < 1) throw ParameterError("ProbeConfig: batch_size must be >= 1");
        if (weight_decay < 0.0)
            throw ParameterError("ProbeConfig: weight_decay must be >= 0");
        if (!(momentum >= 0.0 && momentum < 1.0))
            throw ParameterError("ProbeConfig: momentum must be in [0,1)");
        if (lr_grid.empty()) throw ParameterError("ProbeConfig: lr_grid must be non-empty");
        for (std::size_t i = 0; i < lr_grid.size(); ++i) {
            if (!(lr_grid[i] > 0.0))
                throw ParameterError("ProbeConfig: lr_grid entries must be > 0");
            if (i > 0 && !(lr_grid[i] > lr_grid[i - 1]))
                throw ParameterError("ProbeConfig: lr_grid must be strictly increasing");
        }
        if (seeds < 1) throw ParameterError("ProbeConfig: seeds must be >= 1");
    }
};

inline ProbeConfig default_probe_config() { return {}; }

// Same protocol at a cost that suits sweeps: fewer epochs, smaller batches.
inline ProbeConfig desk_probe_config() {
    ProbeConfig cfg;
    cfg.epochs = 40;
    cfg.batch_size = 64;
    return cfg;
}

inline nlohmann::json to_json(const ProbeConfig& c) {
    return {{"epochs", c.epochs},     {"batch_size", c.batch_size},
            {"weight_decay", c.weight_decay}, {"momentum", c.momentum},
            {"lr_grid", c.lr_grid},   {"seeds", c.seeds}};
}

inline ProbeConfig probe_config_from_json(const nlohmann::json& j, const std::string& context) {
    world::require_exact_keys(
        j, {"epochs", "batch_size", "weight_decay", "momentum", "lr_grid", "seeds"}, context);
    ProbeConfig c;
    c.epochs = j.at("epochs").get<std::uint32_t>();
    c.batch_size = j.at("batch_size").get<std::uint32_t>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.momentum = j.at("momentum").get<double>();
    c.lr_grid = j.at("lr_grid").get<std::vector<double>>();
    c.seeds = j.at("seeds").get<std::uint32_t>();
    return c;
}

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

/// Encoder output before the projection head, one row per image. The encoder
/// is frozen: only forward caches are touched, never parameters.
inline DenseMatrix extract_features(const trainer::TrainedModel& model,
                                    const DenseMatrix& images) {
    if (images.cols != model.arch.input_dim)
        throw DimensionError("extract_features: images are " + images.shape_str() +
                             " but the model expects input_dim " +
                             std::to_string(model.arch.input_dim));
    auto& stack = const_cast<objective::EncoderStack&>(model.stack); // caches only
    DenseMatrix out = stack.features(images);
    if (!numkit::all_finite(out))
        throw DataError("extract_features: non-finite features");
    return out;
}

inline DenseMatrix extract_features(const trainer::TrainedModel& model,
                                    const std::vector<world::Example>& examples) {
    DenseMatrix images(examples.size(), model.arch.input_dim);
    for (std::size_t i = 0; i < examples.size(); ++i) {
        if (examples[i].image.size() != model.arch.input_dim)
            throw DimensionError("extract_features: example " + std::to_string(i) +
                                 " has image dim " + std::to_string(examples[i].image.size()));
        for (std::size_t j = 0; j < images.cols; ++j) images.at(i, j) = examples[i].image[j];
    }
    return extract_features(model, images);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Labels are id lists per example: exactly one id for multiclass, any subset
/// for multilabel. Predictions use the same shape.
using LabelList = std::vector<std::vector<std::uint32_t>>;

namespace detail {

inline void check_label_ids(const LabelList& labels, std::uint32_t num_classes,
                            const std::string& what) {
    for (const auto& row : labels)
        for (const auto id : row)
            if (id >= num_classes)
                throw DataError(what + ": label id " + std::to_string(id) +
                                " out of range for " + std::to_string(num_classes) +
                                " classes");
}

inline std::vector<std::uint32_t> single_ids(const LabelList& labels, const std::string& what) {
    std::vector<std::uint32_t> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i].size() != 1)
            throw ParameterError(what + ": multiclass rows must hold exactly one label id");
        out[i] = labels[i][0];
    }
    return out;
}

inline std::vector<std::uint8_t> multihot(const std::vector<std::uint32_t>& ids,
                                          std::uint32_t num_classes) {
    std::vector<std::uint8_t> row(num_classes, 0);
    for (const auto id : ids) row[id] = 1;
    return row;
}

} // namespace detail

/// Multiclass: mean per-class recall over classes present in `labels`.
/// Multilabel: mean over labels of (TPR + TNR) / 2. A class with no positives
/// (or, for multilabel, no negatives) cannot be scored; it is excluded with a
/// warning on stderr.
inline double class_balanced_accuracy(const LabelList& predictions, const LabelList& labels,
                                      std::uint32_t num_classes, TaskKind kind) {
    if (predictions.empty() || predictions.size() != labels.size())
        throw DataError("class_balanced_accuracy: predictions and labels must be aligned "
                        "and non-empty");
    if (num_classes < 1) throw ParameterError("class_balanced_accuracy: num_classes >= 1");
    detail::check_label_ids(predictions, num_classes, "class_balanced_accuracy");
    detail::check_label_ids(labels, num_classes, "class_balanced_accuracy");

    if (kind == TaskKind::multiclass) {
        const auto pred = detail::single_ids(predictions, "class_balanced_accuracy");
        const auto truth = detail::single_ids(labels, "class_balanced_accuracy");
        std::vector<std::uint64_t> count(num_classes, 0), hit(num_classes, 0);
        for (std::size_t i = 0; i < truth.size(); ++i) {
            ++count[truth[i]];
            if (pred[i] == truth[i]) ++hit[truth[i]];
        }
        double sum = 0.0;
        std::uint32_t scored = 0;
        for (std::uint32_t c = 0; c < num_classes; ++c) {
            if (count[c] == 0) {
                std::fprintf(stderr,
                             "warning: class %u absent from labels; excluded from balanced "
                             "accuracy\n",
                             c);
                continue;
            }
            sum += static_cast<double>(hit[c]) / static_cast<double>(count[c]);
            ++scored;
        }
        return sum / static_cast<double>(scored); // scored >= 1: labels are non-empty
    }

    std::vector<std::uint64_t> pos(num_classes, 0), tp(num_classes, 0), tn(num_classes, 0);
    const std::uint64_t n = labels.size();
    for (std::size_t i = 0; i < n; ++i) {
        const auto t = detail::multihot(labels[i], num_classes);
        const auto p = detail::multihot(predictions[i], num_classes);
        for (std::uint32_t c = 0; c < num_classes; ++c) {
            if (t[c]) {
                ++pos[c];
                if (p[c]) ++tp[c];
            } else if (!p[c]) {
                ++tn[c];
            }
        }
    }
    double sum = 0.0;
    std::uint32_t scored = 0;
    for (std::uint32_t c = 0; c < num_classes; ++c) {
        if (pos[c] == 0 || pos[c] == n) {
            std::fprintf(stderr,
                         "warning: label %u is constant in labels; excluded from balanced "
                         "accuracy\n",
                         c);
            continue;
        }
        const double tpr = static_cast<double>(tp[c]) / static_cast<double>(pos[c]);
        const double tnr = static_cast<double>(tn[c]) / static_cast<double>(n - pos[c]);
        sum += 0.5 * (tpr + tnr);
        ++scored;
    }
    if (scored == 0)
        throw DegenerateTaskError("class_balanced_accuracy: every label is constant");
    return sum / static_cast<double>(scored);
}

struct ConfidenceInterval {
    double low{0.0};
    double high{0.0};
};

/// Percentile bootstrap of the mean. Same rng state implies the same resample
/// draws, so intervals at increasing levels nest.
inline ConfidenceInterval bootstrap_ci(const std::vector<double>& values, double level,
                                       std::size_t resamples, Rng& rng) {
    if (values.empty()) throw DataError("bootstrap_ci: empty input");
    if (!(level > 0.0 && level < 1.0))
        throw ParameterError("bootstrap_ci: level must be in (0,1)");
    if (resamples < 100) throw ParameterError("bootstrap_ci: resamples must be >= 100");

    const std::size_t n = values.size();
    std::vector<double> means(resamples);
    for (auto& m : means) {
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            sum += values[rng.uniform_int(n)];
        m = sum / static_cast<double>(n);
    }
    std::sort(means.begin(), means.end());
    const auto quantile = [&](double q) {
        const double pos = q * static_cast<double>(resamples - 1);
        const std::size_t lo = static_cast<std::size_t>(pos);
        const double frac = pos - static_cast<double>(lo);
        if (lo + 1 >= resamples) return means.back();
        return means[lo] * (1.0 - frac) + means[lo + 1] * frac;
    };
    const double alpha = 1.0 - level;
    return {quantile(alpha / 2.0), quantile(1.0 - alpha / 2.0)};
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

struct LabeledFeatures {
    DenseMatrix x; // n x feature dim
    LabelList labels;
};

struct ProbeModel {
    DenseMatrix weight; // classes x feature dim
    std::vector<double> bias;
    TaskKind kind{TaskKind::multiclass};
};

inline DenseMatrix probe_logits(const ProbeModel& m, const DenseMatrix& x) {
    if (x.cols != m.weight.cols)
        throw DimensionError("probe_logits: features are " + x.shape_str() +
                             " but the probe expects dim " + std::to_string(m.weight.cols));
    DenseMatrix logits = numkit::matmul_a_bt(x, m.weight);
    for (std::size_t i = 0; i < logits.rows; ++i)
        for (std::size_t c = 0; c < logits.cols; ++c) logits.at(i, c) += m.bias[c];
    return logits;
}

/// Multiclass: argmax (ties to the lowest id). Multilabel: ids with logit >= 0.
inline LabelList predict(const ProbeModel& m, const DenseMatrix& x) {
    const DenseMatrix logits = probe_logits(m, x);
    LabelList out(logits.rows);
    for (std::size_t i = 0; i < logits.rows; ++i) {
        if (m.kind == TaskKind::multiclass) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < logits.cols; ++c)
                if (logits.at(i, c) > logits.at(i, best)) best = c;
            out[i] = {static_cast<std::uint32_t>(best)};
        } else {
            for (std::size_t c = 0; c < logits.cols; ++c)
                if (logits.at(i, c) >= 0.0) out[i].push_back(static_cast<std::uint32_t>(c));
        }
    }
    return out;
}

namespace detail {

// Inverse-frequency weights; a class with no training examples gets weight 0.
// Multilabel weighs each label's positives and negatives to equal mass; a
// label constant across the training set contributes no loss at all.
struct ClassWeights {
    std::vector<double> multiclass;          // per class
    std::vector<double> pos, neg;            // per label
};

inline ClassWeights class_weights(const LabelList& labels, std::uint32_t num_classes,
                                  TaskKind kind) {
    ClassWeights w;
    const double n = static_cast<double>(labels.size());
    if (kind == TaskKind::multiclass) {
        std::vector<std::uint64_t> count(num_classes, 0);
        for (const auto& row : labels) ++count[row[0]];
        std::uint32_t present = 0;
        for (const auto c : count)
            if (c > 0) ++present;
        if (present < 2)
            throw DegenerateTaskError("train_probe: training labels hold a single class");
        w.multiclass.assign(num_classes, 0.0);
        for (std::uint32_t c = 0; c < num_classes; ++c)
            if (count[c] > 0)
                w.multiclass[c] = n / (static_cast<double>(present) *
                                       static_cast<double>(count[c]));
        return w;
    }
    std::vector<std::uint64_t> pos(num_classes, 0);
    for (const auto& row : labels)
        for (const auto id : row) ++pos[id];
    w.pos.assign(num_classes, 0.0);
    w.neg.assign(num_classes, 0.0);
    std::uint32_t usable = 0;
    for (std::uint32_t c = 0; c < num_classes; ++c) {
        if (pos[c] == 0 || pos[c] == labels.size()) continue;
        w.pos[c] = n / (2.0 * static_cast<double>(pos[c]));
        w.neg[c] = n / (2.0 * static_cast<double>(labels.size() - pos[c]));
        ++usable;
    }
    if (usable == 0)
        throw DegenerateTaskError("train_probe: every training label is constant");
    return w;
}

struct ProbeRun {
    ProbeModel model;
    double val_accuracy{0.0};
    bool diverged{false};
};

// One SGD run at a fixed learning rate. Partial final batches are kept: the
// probe should see every example each epoch. A run that goes non-finite
// scores 0 so the grid search routes around it.
inline ProbeRun run_probe(const LabeledFeatures& train, const LabeledFeatures& val,
                          std::uint32_t num_classes, TaskKind kind, const ProbeConfig& cfg,
                          const ClassWeights& cw, double lr, Rng rng) {
    const std::size_t n = train.x.rows;
    const std::size_t d = train.x.cols;

    ProbeRun run;
    run.model.kind = kind;
    run.model.weight = DenseMatrix::gaussian(num_classes, d, 0.01, rng);
    run.model.bias.assign(num_classes, 0.0);
    DenseMatrix vel_w(num_classes, d);
    std::vector<double> vel_b(num_classes, 0.0);

    // Targets as multi-hot rows; multiclass rows carry the single true class.
    std::vector<std::vector<std::uint8_t>> target(n);
    for (std::size_t i = 0; i < n; ++i) target[i] = multihot(train.labels[i], num_classes);

    std::vector<std::size_t> order(n);
    DenseMatrix grad_w(num_classes, d);
    for (std::uint32_t epoch = 0; epoch < cfg.epochs && !run.diverged; ++epoch) {
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        rng.shuffle(order);
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t stop = std::min(n, start + cfg.batch_size);
            const std::size_t bsz = stop - start;
            DenseMatrix xb(bsz, d);
            for (std::size_t b = 0; b < bsz; ++b) {
                const auto row = train.x.row(order[start + b]);
                std::copy(row.begin(), row.end(), xb.row(b).begin());
            }
            DenseMatrix logits = probe_logits(run.model, xb);
            if (!numkit::all_finite(logits)) {
                run.diverged = true;
                break;
            }

            // dL/dlogits, weighted and normalized by the batch's weight mass.
            DenseMatrix dlogits(bsz, num_classes);
            double weight_mass = 0.0;
            for (std::size_t b = 0; b < bsz; ++b) {
                const auto& t = target[order[start + b]];
                if (kind == TaskKind::multiclass) {
                    const std::uint32_t y = train.labels[order[start + b]][0];
                    const double wy = cw.multiclass[y];
                    weight_mass += wy;
                    double mx = logits.at(b, 0);
                    for (std::size_t c = 1; c < num_classes; ++c)
                        mx = std::max(mx, logits.at(b, c));
                    double z = 0.0;
                    for (std::size_t c = 0; c < num_classes; ++c)
                        z += std::exp(logits.at(b, c) - mx);
                    for (std::size_t c = 0; c < num_classes; ++c) {
                        const double p = std::exp(logits.at(b, c) - mx) / z;
                        dlogits.at(b, c) = wy * (p - (t[c] ? 1.0 : 0.0));
                    }
                } else {
                    for (std::size_t c = 0; c < num_classes; ++c) {
                        const double w = t[c] ? cw.pos[c] : cw.neg[c];
                        weight_mass += w;
                        const double s = 1.0 / (1.0 + std::exp(-logits.at(b, c)));
                        dlogits.at(b, c) = w * (s - (t[c] ? 1.0 : 0.0));
                    }
                }
            }
            if (weight_mass > 0.0) numkit::scale_inplace(dlogits, 1.0 / weight_mass);

            grad_w = numkit::matmul_at_b(dlogits, xb);
            for (std::size_t i = 0; i < grad_w.data.size(); ++i) {
                const double g = grad_w.data[i] + cfg.weight_decay * run.model.weight.data[i];
                vel_w.data[i] = cfg.momentum * vel_w.data[i] + g;
                run.model.weight.data[i] -= lr * vel_w.data[i];
            }
            for (std::size_t c = 0; c < num_classes; ++c) {
                double g = 0.0;
                for (std::size_t b = 0; b < bsz; ++b) g += dlogits.at(b, c);
                vel_b[c] = cfg.momentum * vel_b[c] + g;
                run.model.bias[c] -= lr * vel_b[c];
            }
        }
    }
    if (run.diverged || !numkit::all_finite(run.model.weight)) {
        run.diverged = true;
        run.val_accuracy = 0.0;
        return run;
    }
    run.val_accuracy =
        class_balanced_accuracy(predict(run.model, val.x), val.labels, num_classes, kind);
    return run;
}

} // namespace detail

struct ProbeOutcome {
    std::vector<ProbeModel> seed_models; // cfg.seeds probes at the winning lr
    std::vector<double> seed_val_accuracy;
    double best_lr{0.0};
    double validation_accuracy{0.0}; // mean over seeds at best_lr
};

/// Grid search over cfg.lr_grid, cfg.seeds runs per grid point, winner by
/// mean validation balanced accuracy (ties to the smaller rate).
inline ProbeOutcome train_probe(const LabeledFeatures& train, const LabeledFeatures& val,
                                std::uint32_t num_classes, TaskKind kind,
                                const ProbeConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (num_classes < 2) throw ParameterError("train_probe: num_classes must be >= 2");
    if (train.x.rows == 0 || val.x.rows == 0)
        throw DataError("train_probe: empty split");
    if (train.x.rows != train.labels.size() || val.x.rows != val.labels.size())
        throw DimensionError("train_probe: features and labels misaligned");
    if (train.x.cols != val.x.cols)
        throw DimensionError("train_probe: train and val feature dims differ");
    if (!numkit::all_finite(train.x) || !numkit::all_finite(val.x))
        throw DataError("train_probe: non-finite features");
    detail::check_label_ids(train.labels, num_classes, "train_probe");
    detail::check_label_ids(val.labels, num_classes, "train_probe");
    if (kind == TaskKind::multiclass) {
        detail::single_ids(train.labels, "train_probe");
        detail::single_ids(val.labels, "train_probe");
    }
    const detail::ClassWeights cw = detail::class_weights(train.labels, num_classes, kind);

    std::vector<std::vector<detail::ProbeRun>> runs(cfg.lr_grid.size());
    for (std::size_t li = 0; li < cfg.lr_grid.size(); ++li) {
        runs[li].reserve(cfg.seeds);
        for (std::uint32_t s = 0; s < cfg.seeds; ++s) {
            Rng rng = derive_stream(seed, "probe_run", li * cfg.seeds + s);
            runs[li].push_back(detail::run_probe(train, val, num_classes, kind, cfg, cw,
                                                 cfg.lr_grid[li], rng));
        }
    }

    std::size_t best = 0;
    double best_mean = -1.0;
    for (std::size_t li = 0; li < cfg.lr_grid.size(); ++li) {
        double mean = 0.0;
        for (const auto& r : runs[li]) mean += r.val_accuracy;
        mean /= static_cast<double>(cfg.seeds);
        if (mean > best_mean) {
            best_mean = mean;
            best = li;
        }
    }

    ProbeOutcome out;
    out.best_lr = cfg.lr_grid[best];
    out.validation_accuracy = best_mean;
    for (auto& r : runs[best]) {
        out.seed_models.push_back(std::move(r.model));
        out.seed_val_accuracy.push_back(r.val_accuracy);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Transfer task suite
// ---------------------------------------------------------------------------

/// Version tag of the task suite; mu_tx values are only comparable within one
/// suite version.
inline constexpr char kSuiteVersion[] = "v1";

struct TaskSplit {
    DenseMatrix images; // n x embed_dim, rendered in shifted universes
    LabelList labels;
};

struct TaskData {
    std::string name;
    TaskKind kind{TaskKind::multiclass};
    std::uint32_t num_classes{2};
    TaskSplit train, val, test;
};

namespace detail {

inline std::vector<double> random_saliences(std::size_t k, Rng& rng) {
    std::vector<double> s(k);
    double sum = 0.0;
    for (auto& v : s) {
        v = rng.uniform(0.2, 1.0);
        sum += v;
    }
    for (auto& v : s) v /= sum;
    return s;
}

inline std::vector<std::uint32_t> sorted_ids(std::vector<std::uint32_t> ids) {
    std::sort(ids.begin(), ids.end());
    return ids;
}

// Every example draws from its own stream keyed by absolute index, so the
// three splits are disjoint and reproducible element-wise.
template <typename SceneFn>
TaskSplit render_split(const world::ObjectUniverse& u, double sigma, std::uint64_t task_seed,
                       std::uint64_t offset, std::uint64_t n, SceneFn&& fn) {
    TaskSplit split;
    split.images = DenseMatrix(n, u.config.embed_dim);
    split.labels.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        Rng rng = derive_stream(task_seed, "task_example", offset + i);
        auto [scene, label_ids] = fn(i, rng);
        const auto img = world::render_image(scene, u, sigma, rng);
        std::copy(img.begin(), img.end(), split.images.row(i).begin());
        split.labels.push_back(std::move(label_ids));
    }
    return split;
}

} // namespace detail

/// The six fixed transfer tasks of suite v1, built over the probed model's
/// own object universe. Tasks keep the object directions and shift the scene
/// statistics instead: new noise levels, a stretched scene-size distribution,
/// and fixed pair or dominant-object compositions the pretraining sampler
/// never pins down. Probes therefore measure whether the frozen features
/// expose the universe's object structure, not whether training scenes were
/// memorized. Multiclass splits are exactly class balanced by construction;
/// the multilabel test split pairs every scene with its complement so each
/// label is present in exactly half the examples (making balanced accuracy
/// coincide with plain per-label accuracy).
inline std::vector<TaskData> suite_v1(const world::ObjectUniverse& universe,
                                      std::uint64_t seed) {
    constexpr std::uint64_t kTrain = 480, kVal = 240, kTest = 480;
    if (universe.config.num_objects < 16)
        throw ParameterError("suite_v1: universe must have at least 16 objects");
    const std::uint32_t pool = universe.config.num_objects;

    std::vector<TaskData> suite;
    const auto add = [&](const std::string& name, TaskKind kind, std::uint32_t num_classes,
                         double sigma, auto&& fn) {
        const std::uint64_t task_seed = hash_combine(seed, hash_str(name));

        TaskData task;
        task.name = name;
        task.kind = kind;
        task.num_classes = num_classes;
        task.train = detail::render_split(universe, sigma, task_seed, 0, kTrain, fn);
        task.val = detail::render_split(universe, sigma, task_seed, kTrain, kVal, fn);
        task.test =
            detail::render_split(universe, sigma, task_seed, kTrain + kVal, kTest, fn);
        suite.push_back(std::move(task));
    };

    using Sample = std::pair<world::LatentScene, std::vector<std::uint32_t>>;

    // Single object per image, near-clean rendering.
    add("object16-clean", TaskKind::multiclass, 16, 0.05, [](std::uint64_t i, Rng&) {
        const auto c = static_cast<std::uint32_t>(i % 16);
        return Sample{world::make_scene({c}, {1.0}), {c}};
    });

    // Same shape under much heavier image noise than pretraining uses.
    add("object16-noisy", TaskKind::multiclass, 16, 0.4, [](std::uint64_t i, Rng&) {
        const auto c = static_cast<std::uint32_t>(i % 16);
        return Sample{world::make_scene({c}, {1.0}), {c}};
    });

    // Class = which fixed object pair composes the scene.
    add("pair-compose", TaskKind::multiclass, 8, 0.2, [](std::uint64_t i, Rng& rng) {
        const auto c = static_cast<std::uint32_t>(i % 8);
        return Sample{world::make_scene({2 * c, 2 * c + 1}, detail::random_saliences(2, rng)),
                      {c}};
    });

    // Class = number of objects in the scene (1..4), objects irrelevant.
    add("scene-size", TaskKind::multiclass, 4, 0.15, [pool](std::uint64_t i, Rng& rng) {
        const auto c = static_cast<std::uint32_t>(i % 4);
        return Sample{world::sample_scene_sized(c + 1, pool, 0, rng), {c}};
    });

    // Three objects, one dominant; class = the dominant one.
    add("dominant-object", TaskKind::multiclass, 12, 0.1, [](std::uint64_t i, Rng& rng) {
        const auto c = static_cast<std::uint32_t>(i % 12);
        std::uint32_t d1 = c, d2 = c;
        while (d1 == c) d1 = static_cast<std::uint32_t>(rng.uniform_int(12));
        while (d2 == c || d2 == d1) d2 = static_cast<std::uint32_t>(rng.uniform_int(12));
        return Sample{world::make_scene({c, d1, d2}, {0.6, 0.2, 0.2}), {c}};
    });

    // Predict which of 8 objects are present. The test stream pairs each
    // 4-object scene with its complement (both siblings re-derive the same
    // pair stream), pinning every label to exactly half the examples.
    {
        const std::uint64_t task_seed = hash_combine(seed, hash_str("multilabel8"));
        const auto scene_of = [](const std::vector<std::uint32_t>& ids, Rng& rng) {
            return world::make_scene(ids, detail::random_saliences(ids.size(), rng));
        };
        const auto train_fn = [&](std::uint64_t, Rng& rng) {
            const auto scene = world::sample_scene_sized(4, 8, 0, rng);
            return Sample{scene, detail::sorted_ids(scene.object_ids)};
        };
        const auto test_fn = [&](std::uint64_t i, Rng& rng) {
            Rng pair_rng = derive_stream(task_seed, "task_pair", i / 2);
            std::vector<std::uint32_t> ids;
            std::vector<bool> in(8, false);
            while (ids.size() < 4) {
                const auto id = static_cast<std::uint32_t>(pair_rng.uniform_int(8));
                if (!in[id]) {
                    in[id] = true;
                    ids.push_back(id);
                }
            }
            if (i % 2 == 1) {
                ids.clear();
                for (std::uint32_t id = 0; id < 8; ++id)
                    if (!in[id]) ids.push_back(id);
            }
            return Sample{scene_of(ids, rng), detail::sorted_ids(ids)};
        };

        TaskData task;
        task.name = "multilabel8";
        task.kind = TaskKind::multilabel;
        task.num_classes = 8;
        task.train = detail::render_split(universe, 0.15, task_seed, 0, kTrain, train_fn);
        task.val = detail::render_split(universe, 0.15, task_seed, kTrain, kVal, train_fn);
        task.test =
            detail::render_split(universe, 0.15, task_seed, kTrain + kVal, kTest, test_fn);
        suite.push_back(std::move(task));
    }

    return suite;
}

// ---------------------------------------------------------------------------
// Suite evaluation and reports
// ---------------------------------------------------------------------------

struct TaskResult {
    std::string task;
    double mean{0.0};
    double ci_low{0.0};
    double ci_high{0.0};
    double best_lr{0.0};
};

struct ProbeReport {
    std::vector<TaskResult> tasks;
    double mu_tx_mean{0.0};
    double mu_tx_low{0.0};
    double mu_tx_high{0.0};

    void validate() const {
        const auto check = [](double mean, double lo, double hi, const std::string& what) {
            if (!(lo <= mean && mean <= hi))
                throw DataError("ProbeReport: " + what + " mean outside its interval");
            if (!(0.0 <= lo && hi <= 1.0))
                throw DataError("ProbeReport: " + what + " bounds outside [0,1]");
        };
        for (const auto& t : tasks) check(t.mean, t.ci_low, t.ci_high, t.task);
        check(mu_tx_mean, mu_tx_low, mu_tx_high, "mu_tx");
    }
};

inline constexpr double kReportLevel = 0.95;
inline constexpr std::size_t kReportResamples = 1000;

/// Train probes on every suite task and report test accuracy. Per task the
/// mean is the seed-average of class balanced test accuracy; the interval is
/// a joint bootstrap over (probe seed, test example) correctness pairs, which
/// coincides with the balanced metric on the suite's balanced test splits.
/// mu_tx averages task means uniformly; its interval bootstraps each task's
/// correctness pool independently and averages the resampled means. Probe
/// trainings for distinct tasks run on `workers` threads; results do not
/// depend on the worker count.
inline ProbeReport evaluate_model(const trainer::TrainedModel& model,
                                  const std::vector<TaskData>& suite, const ProbeConfig& cfg,
                                  std::uint64_t seed, std::uint32_t workers = 1) {
    cfg.validate();
    if (suite.empty()) throw DataError("evaluate_model: empty suite");
    if (workers < 1) throw ParameterError("evaluate_model: workers must be >= 1");

    // Feature extraction shares the model's forward caches: sequential.
    struct Prepared {
        LabeledFeatures train, val;
        DenseMatrix test_x;
    };
    std::vector<Prepared> prep(suite.size());
    for (std::size_t t = 0; t < suite.size(); ++t) {
        prep[t].train = {extract_features(model, suite[t].train.images),
                         suite[t].train.labels};
        prep[t].val = {extract_features(model, suite[t].val.images), suite[t].val.labels};
        prep[t].test_x = extract_features(model, suite[t].test.images);
    }

    std::vector<TaskResult> results(suite.size());
    std::vector<std::vector<double>> correctness(suite.size());
    std::vector<std::exception_ptr> errors(suite.size());
    std::atomic<std::size_t> next{0};

    const auto worker = [&] {
        for (;;) {
            const std::size_t t = next.fetch_add(1);
            if (t >= suite.size()) return;
            try {
                const TaskData& task = suite[t];
                const std::uint64_t task_seed = hash_combine(seed, hash_str(task.name));
                const ProbeOutcome probe = train_probe(prep[t].train, prep[t].val,
                                                       task.num_classes, task.kind, cfg,
                                                       task_seed);

                std::vector<double>& v = correctness[t];
                v.reserve(probe.seed_models.size() * task.test.labels.size());
                double balanced_sum = 0.0;
                for (const auto& pm : probe.seed_models) {
                    const LabelList preds = predict(pm, prep[t].test_x);
                    balanced_sum += class_balanced_accuracy(preds, task.test.labels,
                                                            task.num_classes, task.kind);
                    for (std::size_t i = 0; i < preds.size(); ++i) {
                        if (task.kind == TaskKind::multiclass) {
                            v.push_back(preds[i] == task.test.labels[i] ? 1.0 : 0.0);
                        } else {
                            const auto p = detail::multihot(preds[i], task.num_classes);
                            const auto y =
                                detail::multihot(task.test.labels[i], task.num_classes);
                            std::size_t agree = 0;
                            for (std::size_t c = 0; c < p.size(); ++c)
                                if (p[c] == y[c]) ++agree;
                            v.push_back(static_cast<double>(agree) /
                                        static_cast<double>(task.num_classes));
                        }
                    }
                }
                results[t].task = task.name;
                results[t].mean =
                    balanced_sum / static_cast<double>(probe.seed_models.size());
                results[t].best_lr = probe.best_lr;
            } catch (...) {
                errors[t] = std::current_exception();
                return;
            }
        }
    };

    std::vector<std::thread> pool;
    const std::size_t width = std::min<std::size_t>(workers, suite.size());
    for (std::size_t i = 0; i < width; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    // Intervals are widened to include the point estimate; that only binds on
    // custom unbalanced test splits where plain and balanced accuracy diverge.
    ProbeReport report;
    double mu = 0.0;
    for (std::size_t t = 0; t < suite.size(); ++t) {
        Rng rng = derive_stream(seed, "boot_task", hash_str(suite[t].name));
        const ConfidenceInterval ci =
            bootstrap_ci(correctness[t], kReportLevel, kReportResamples, rng);
        results[t].ci_low = std::min(ci.low, results[t].mean);
        results[t].ci_high = std::max(ci.high, results[t].mean);
        mu += results[t].mean;
        report.tasks.push_back(results[t]);
    }
    report.mu_tx_mean = mu / static_cast<double>(suite.size());

    std::vector<Rng> mu_rngs;
    for (const auto& task : suite)
        mu_rngs.push_back(derive_stream(seed, "boot_mu", hash_str(task.name)));
    std::vector<double> mu_means(kReportResamples);
    for (auto& m : mu_means) {
        double sum = 0.0;
        for (std::size_t t = 0; t < suite.size(); ++t) {
            const std::vector<double>& v = correctness[t];
            double s = 0.0;
            for (std::size_t i = 0; i < v.size(); ++i) s += v[mu_rngs[t].uniform_int(v.size())];
            sum += s / static_cast<double>(v.size());
        }
        m = sum / static_cast<double>(suite.size());
    }
    std::sort(mu_means.begin(), mu_means.end());
    const auto quantile = [&](double q) {
        const double pos = q * static_cast<double>(kReportResamples - 1);
        const std::size_t lo = static_cast<std::size_t>(pos);
        const double frac = pos - static_cast<double>(lo);
        if (lo + 1 >= kReportResamples) return mu_means.back();
        return mu_means[lo] * (1.0 - frac) + mu_means[lo + 1] * frac;
    };
    const double alpha = 1.0 - kReportLevel;
    report.mu_tx_low = std::min(quantile(alpha / 2.0), report.mu_tx_mean);
    report.mu_tx_high = std::max(quantile(1.0 - alpha / 2.0), report.mu_tx_mean);

    report.validate();
    return report;
}

// "61.3 ± 0.2" for mean 0.613, half-width 0.002: percent, one decimal.
inline std::string format_mean_pm(double mean, double half_width) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.1f ± %.1f", 100.0 * mean, 100.0 * half_width);
    return buf;
}

inline std::string format_report_table(const ProbeReport& report) {
    std::size_t name_width = 5; // "mu_tx"
    for (const auto& t : report.tasks) name_width = std::max(name_width, t.task.size());
    std::string out = "task";
    out.append(name_width - 4 + 2, ' ');
    out += "accuracy\n";
    const auto line = [&](const std::string& name, double mean, double lo, double hi) {
        out += name;
        out.append(name_width - name.size() + 2, ' ');
        out += format_mean_pm(mean, 0.5 * (hi - lo));
        out += '\n';
    };
    for (const auto& t : report.tasks) line(t.task, t.mean, t.ci_low, t.ci_high);
    line("mu_tx", report.mu_tx_mean, report.mu_tx_low, report.mu_tx_high);
    return out;
}

inline nlohmann::json to_json(const ProbeReport& report) {
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& t : report.tasks)
        tasks.push_back({{"task", t.task},
                         {"mean", t.mean},
                         {"ci_low", t.ci_low},
                         {"ci_high", t.ci_high},
                         {"best_lr", t.best_lr}});
    return {{"suite_version", kSuiteVersion},
            {"tasks", tasks},
            {"mu_tx",
             {{"mean", report.mu_tx_mean},
              {"ci_low", report.mu_tx_low},
              {"ci_high", report.mu_tx_high}}}};
}

inline ProbeReport report_from_json(const nlohmann::json& j, const std::string& context) {
    world::require_exact_keys(j, {"suite_version", "tasks", "mu_tx"}, context);
    try {
        if (j.at("suite_version").get<std::string>() != kSuiteVersion)
            throw SerializationError(context + ": unsupported suite version");
        ProbeReport report;
        for (const auto& tj : j.at("tasks")) {
            world::require_exact_keys(tj, {"task", "mean", "ci_low", "ci_high", "best_lr"},
                                      context + " task");
            TaskResult t;
            t.task = tj.at("task").get<std::string>();
            t.mean = tj.at("mean").get<double>();
            t.ci_low = tj.at("ci_low").get<double>();
            t.ci_high = tj.at("ci_high").get<double>();
            t.best_lr = tj.at("best_lr").get<double>();
            report.tasks.push_back(std::move(t));
        }
        const auto& mj = j.at("mu_tx");
        world::require_exact_keys(mj, {"mean", "ci_low", "ci_high"}, context + " mu_tx");
        report.mu_tx_mean = mj.at("mean").get<double>();
        report.mu_tx_low = mj.at("ci_low").get<double>();
        report.mu_tx_high = mj.at("ci_high").get<double>();
        report.validate();
        return report;
    } catch (const nlohmann::json::exception& e) {
        throw SerializationError(context + ": " + e.what());
    }
}

} // namespace evalkit
} // namespace caplab
