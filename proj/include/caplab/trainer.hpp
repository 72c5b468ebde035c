#pragma once

// Training loop: binds dataset, objective and optimizer. One run is single
// threaded and fully determined by (seed, dataset, config, arch).

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "caplab/bytes.hpp"
#include "caplab/dataset_io.hpp"
#include "caplab/encoder.hpp"
#include "caplab/errors.hpp"
#include "caplab/objective.hpp"
#include "caplab/optim.hpp"
#include "caplab/rng.hpp"
#include "caplab/world.hpp"

namespace caplab {
namespace trainer {

using objective::EncoderConfig;
using objective::EncoderStack;

// ---------------------------------------------------------------------------
// Contrastive mode
// ---------------------------------------------------------------------------

enum class ModeKind { simclr, clip, clip_s };

// clip_s resamples one of the first `captions_k` captions at every visit;
// clip always trains on caption 0. captions_k is meaningful only for clip_s.
struct ContrastiveMode {
    ModeKind kind{ModeKind::clip};
    std::uint32_t captions_k{1};

    bool uses_text() const { return kind != ModeKind::simclr; }

    void validate() const {
        if (kind == ModeKind::clip_s && captions_k < 1)
            throw ParameterError("ContrastiveMode: clip_s needs K >= 1");
    }

    bool operator==(const ContrastiveMode&) const = default;
};

inline ContrastiveMode simclr_mode() { return {ModeKind::simclr, 1}; }
inline ContrastiveMode clip_mode() { return {ModeKind::clip, 1}; }
inline ContrastiveMode clip_s_mode(std::uint32_t k) {
    ContrastiveMode m{ModeKind::clip_s, k};
    m.validate();
    return m;
}

inline std::string to_string(const ContrastiveMode& mode) {
    switch (mode.kind) {
        case ModeKind::simclr: return "simclr";
        case ModeKind::clip: return "clip";
        case ModeKind::clip_s: return "clip_s:" + std::to_string(mode.captions_k);
    }
    throw ParameterError("to_string: unknown mode kind");
}

// Accepts "simclr", "clip", "clip_s:K" with K >= 1.
inline ContrastiveMode parse_mode(const std::string& text) {
    if (text == "simclr") return simclr_mode();
    if (text == "clip") return clip_mode();
    const std::string prefix = "clip_s:";
    if (text.rfind(prefix, 0) == 0) {
        const std::string arg = text.substr(prefix.size());
        if (!arg.empty() && arg.size() <= 6 &&
            arg.find_first_not_of("0123456789") == std::string::npos) {
            const unsigned long k = std::stoul(arg);
            if (k >= 1) return clip_s_mode(static_cast<std::uint32_t>(k));
        }
        throw ConfigError("parse_mode: clip_s needs a count >= 1, got '" + text + "'");
    }
    throw ConfigError("parse_mode: unknown mode '" + text + "'");
}

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

struct TrainConfig {
    ContrastiveMode mode;
    std::uint32_t batch_size{64};
    std::uint32_t epochs{30};
    std::uint32_t warmup_epochs{3};
    double lr{1e-3};
    double weight_decay{0.1};
    double temperature{1.0};
    std::uint64_t seed{1};

    void validate() const {
        mode.validate();
        if (batch_size < 2) throw ParameterError("TrainConfig: batch_size must be >= 2");
        if (epochs < 1) throw ParameterError("TrainConfig: epochs must be >= 1");
        if (warmup_epochs < 1 || warmup_epochs >= epochs)
            throw ParameterError("TrainConfig: need 1 <= warmup_epochs < epochs");
        if (lr < 0.0) throw ParameterError("TrainConfig: lr must be >= 0");
        if (weight_decay < 0.0) throw ParameterError("TrainConfig: weight_decay must be >= 0");
        if (!(temperature > 0.0)) throw ParameterError("TrainConfig: temperature must be > 0");
    }
};

// The published defaults: batch 1024, 200 epochs with 10 warmup for every
// mode; lr 1e-2 / wd 1e-6 for the image-only model, lr 1e-3 / wd 0.1 for the
// image-text models (caption sampling inherits the image-text row). These are
// full-scale settings; see desk_config for sizes that run in seconds.
// Temperature is not part of the published table (it defers to standard
// implementations); 1.0 is this library's calibrated default.
inline TrainConfig default_config(const ContrastiveMode& mode) {
    mode.validate();
    TrainConfig cfg;
    cfg.mode = mode;
    cfg.batch_size = 1024;
    cfg.epochs = 200;
    cfg.warmup_epochs = 10;
    if (mode.kind == ModeKind::simclr) {
        cfg.lr = 1e-2;
        cfg.weight_decay = 1e-6;
    } else {
        cfg.lr = 1e-3;
        cfg.weight_decay = 0.1;
    }
    cfg.temperature = 1.0;
    return cfg;
}

// Same optimizer settings at a size that trains in seconds on one core.
inline TrainConfig desk_config(const ContrastiveMode& mode) {
    TrainConfig cfg = default_config(mode);
    cfg.batch_size = 64;
    cfg.epochs = 30;
    cfg.warmup_epochs = 3;
    return cfg;
}

// The transformation T(x) defining each mode: image-only training draws two
// heavily augmented views; image-text training pairs a lightly masked image
// with a caption.
inline world::AugmentPolicy augment_policy_for(const ContrastiveMode& mode) {
    world::AugmentPolicy policy;
    policy.kind = mode.kind == ModeKind::simclr ? world::AugmentKind::simclr_analog
                                                : world::AugmentKind::clip_analog;
    return policy;
}

// ---------------------------------------------------------------------------
// Caption selection
// ---------------------------------------------------------------------------

// clip pins caption 0; clip_s(K) draws uniformly over the first K captions,
// fresh at every visit. K = 1 consumes no rng state, so clip_s(1) follows
// clip's trajectory bitwise. The epoch is part of the visit contract but does
// not influence the draw.
inline std::size_t select_caption(const world::Example& example, const ContrastiveMode& mode,
                                  std::uint32_t /*epoch*/, Rng& rng) {
    switch (mode.kind) {
        case ModeKind::simclr:
            throw ParameterError("select_caption: image-only mode has no captions");
        case ModeKind::clip:
            return 0;
        case ModeKind::clip_s:
            if (mode.captions_k > example.captions.size())
                throw DataError("select_caption: mode needs " +
                                std::to_string(mode.captions_k) + " captions, example has " +
                                std::to_string(example.captions.size()));
            return rng.uniform_int(mode.captions_k);
    }
    throw ParameterError("select_caption: unknown mode kind");
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainedModel {
    EncoderStack stack;
    std::vector<double> loss_curve; // per-epoch mean loss
    TrainConfig config;
    EncoderConfig arch; // final, vocab_size filled in for text modes
    std::uint64_t data_fingerprint{0};
};

inline TrainedModel train(const world::Dataset& ds, const TrainConfig& config,
                          const EncoderConfig& arch) {
    config.validate();
    const std::size_t n = ds.examples.size();
    if (n < config.batch_size)
        throw DataError("train: dataset of " + std::to_string(n) +
                        " examples is smaller than one batch of " +
                        std::to_string(config.batch_size));
    if (arch.input_dim != ds.universe_config.embed_dim)
        throw DimensionError("train: arch input_dim " + std::to_string(arch.input_dim) +
                             " does not match image dim " +
                             std::to_string(ds.universe_config.embed_dim));
    if (config.mode.kind == ModeKind::clip_s &&
        config.mode.captions_k > ds.spec.captions_per_image)
        throw DataError("train: clip_s K " + std::to_string(config.mode.captions_k) +
                        " exceeds captions_per_image " +
                        std::to_string(ds.spec.captions_per_image));

    const world::ObjectUniverse universe = world::make_universe(ds.universe_config);
    EncoderConfig arch_final = arch;
    if (config.mode.uses_text()) arch_final.vocab_size = universe.vocab_size();

    EncoderStack stack = config.mode.kind == ModeKind::simclr
                             ? EncoderStack::make_shared_image(arch_final, config.seed)
                             : EncoderStack::make_image_text(arch_final, config.seed);
    stack.set_temperature(config.temperature);

    const std::size_t steps_per_epoch = n / config.batch_size; // last partial batch dropped
    numkit::ScheduleConfig sched;
    sched.base_lr = config.lr;
    sched.warmup_epochs = config.warmup_epochs;
    sched.total_epochs = config.epochs;
    sched.steps_per_epoch = steps_per_epoch;
    sched.validate();

    const world::AugmentPolicy policy = augment_policy_for(config.mode);
    std::vector<std::size_t> order(n);
    std::vector<double> loss_curve;
    loss_curve.reserve(config.epochs);

    for (std::uint32_t epoch = 0; epoch < config.epochs; ++epoch) {
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        Rng shuffle_rng = derive_stream(config.seed, "shuffle", epoch);
        shuffle_rng.shuffle(order);

        double epoch_loss = 0.0;
        for (std::size_t step = 0; step < steps_per_epoch; ++step) {
            const std::uint64_t global_step = epoch * steps_per_epoch + step;
            std::vector<world::Example> batch;
            batch.reserve(config.batch_size);
            for (std::uint32_t b = 0; b < config.batch_size; ++b)
                batch.push_back(ds.examples[order[step * config.batch_size + b]]);

            Rng augment_rng = derive_stream(config.seed, "augment", global_step);
            objective::BatchLossResult res;
            if (config.mode.kind == ModeKind::simclr) {
                res = objective::simclr_batch_loss(batch, policy, stack, augment_rng);
            } else {
                Rng select_rng = derive_stream(config.seed, "select", global_step);
                std::vector<std::size_t> captions(batch.size());
                for (std::size_t b = 0; b < batch.size(); ++b)
                    captions[b] = select_caption(batch[b], config.mode, epoch, select_rng);
                res = objective::clip_batch_loss(batch, captions, stack, universe,
                                                 objective::LossDirection::symmetric, &policy,
                                                 &augment_rng);
            }

            const std::string where =
                " at epoch " + std::to_string(epoch) + " step " + std::to_string(step);
            if (!std::isfinite(res.loss))
                throw DivergedError("train: non-finite loss" + where);
            epoch_loss += res.loss;

            const double lr = numkit::lr_at(sched, global_step);
            try {
                for (numkit::ParamTensor* p : stack.params())
                    numkit::adam_step(*p, lr, config.weight_decay);
            } catch (const DivergedError& e) {
                throw DivergedError(std::string(e.what()) + where);
            }
        }
        loss_curve.push_back(epoch_loss / static_cast<double>(steps_per_epoch));
    }

    TrainedModel model;
    model.stack = std::move(stack);
    model.loss_curve = std::move(loss_curve);
    model.config = config;
    model.arch = arch_final;
    model.data_fingerprint = world::fingerprint(ds);
    return model;
}

// ---------------------------------------------------------------------------
// Checkpoints: "CLCK", version, JSON header, parameter tensors, checksum.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointMagic = 0x4b434c43; // "CLCK"
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"mode", to_string(c.mode)},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"warmup_epochs", c.warmup_epochs},
            {"lr", c.lr},
            {"weight_decay", c.weight_decay},
            {"temperature", c.temperature},
            {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& context) {
    world::require_exact_keys(j,
                              {"mode", "batch_size", "epochs", "warmup_epochs", "lr",
                               "weight_decay", "temperature", "seed"},
                              context);
    TrainConfig c;
    c.mode = parse_mode(j.at("mode").get<std::string>());
    c.batch_size = j.at("batch_size").get<std::uint32_t>();
    c.epochs = j.at("epochs").get<std::uint32_t>();
    c.warmup_epochs = j.at("warmup_epochs").get<std::uint32_t>();
    c.lr = j.at("lr").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.temperature = j.at("temperature").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

inline nlohmann::json to_json(const EncoderConfig& c) {
    return {{"input_dim", c.input_dim},         {"hidden_width", c.hidden_width},
            {"feature_dim", c.feature_dim},     {"proj_dim", c.proj_dim},
            {"text_token_dim", c.text_token_dim}, {"vocab_size", c.vocab_size}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j,
                                              const std::string& context) {
    world::require_exact_keys(j,
                              {"input_dim", "hidden_width", "feature_dim", "proj_dim",
                               "text_token_dim", "vocab_size"},
                              context);
    EncoderConfig c;
    c.input_dim = j.at("input_dim").get<std::size_t>();
    c.hidden_width = j.at("hidden_width").get<std::size_t>();
    c.feature_dim = j.at("feature_dim").get<std::size_t>();
    c.proj_dim = j.at("proj_dim").get<std::size_t>();
    c.text_token_dim = j.at("text_token_dim").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    return c;
}

inline void save_checkpoint(const TrainedModel& model, const std::string& path) {
    const nlohmann::json header = {{"config", to_json(model.config)},
                                   {"arch", to_json(model.arch)},
                                   {"data_fingerprint", world::hash_to_hex(model.data_fingerprint)},
                                   {"loss_curve", model.loss_curve}};
    const std::string header_str = header.dump();

    std::string buf;
    bytes::put_u32(buf, kCheckpointMagic);
    bytes::put_u32(buf, kCheckpointVersion);
    bytes::put_u64(buf, header_str.size());
    buf += header_str;

    EncoderStack& stack = const_cast<EncoderStack&>(model.stack); // params() is non-const
    const auto params = stack.params();
    bytes::put_u64(buf, params.size());
    for (const numkit::ParamTensor* p : params) {
        bytes::put_u64(buf, p->value.rows);
        bytes::put_u64(buf, p->value.cols);
        for (double v : p->value.data) bytes::put_f64(buf, v);
    }
    bytes::put_u64(buf, fnv1a(buf.data(), buf.size()));
    bytes::write_file_bytes(path, buf, "save_checkpoint");
}

inline TrainedModel load_checkpoint(const std::string& path) {
    const std::string buf = bytes::read_file_bytes(path, "load_checkpoint");
    bytes::ByteReader r(buf, "load_checkpoint");
    if (r.u32() != kCheckpointMagic) throw SerializationError("load_checkpoint: bad magic");
    if (r.u32() != kCheckpointVersion)
        throw SerializationError("load_checkpoint: unsupported version");

    const std::uint64_t header_len = r.u64();
    if (header_len > r.remaining())
        throw SerializationError("load_checkpoint: truncated header");
    TrainedModel model;
    try {
        const nlohmann::json header = nlohmann::json::parse(r.raw(header_len));
        world::require_exact_keys(header, {"config", "arch", "data_fingerprint", "loss_curve"},
                                  "checkpoint header");
        model.config = train_config_from_json(header.at("config"), "checkpoint config");
        model.arch = encoder_config_from_json(header.at("arch"), "checkpoint arch");
        model.data_fingerprint =
            world::hash_from_hex(header.at("data_fingerprint").get<std::string>());
        model.loss_curve = header.at("loss_curve").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw SerializationError(std::string("load_checkpoint: bad header: ") + e.what());
    }

    // Rebuild the stack shape from the header, then overwrite every weight.
    model.stack = model.config.mode.kind == ModeKind::simclr
                      ? EncoderStack::make_shared_image(model.arch, 0)
                      : EncoderStack::make_image_text(model.arch, 0);
    model.stack.set_temperature(model.config.temperature);

    const auto params = model.stack.params();
    if (r.u64() != params.size())
        throw SerializationError("load_checkpoint: parameter count mismatch");
    for (numkit::ParamTensor* p : params) {
        const std::uint64_t rows = r.u64();
        const std::uint64_t cols = r.u64();
        if (rows != p->value.rows || cols != p->value.cols)
            throw SerializationError("load_checkpoint: tensor shape mismatch");
        for (double& v : p->value.data) v = r.f64();
    }
    const std::size_t payload_end = r.pos();
    const std::uint64_t checksum = r.u64();
    if (!r.at_end()) throw SerializationError("load_checkpoint: trailing bytes");
    if (fnv1a(buf.data(), payload_end) != checksum)
        throw SerializationError("load_checkpoint: checksum mismatch");
    return model;
}

} // namespace trainer
} // namespace caplab
