#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "caplab/trainer.hpp"

using namespace caplab;
using trainer::ContrastiveMode;
using trainer::ModeKind;
using trainer::TrainConfig;

namespace {

world::ObjectUniverse small_universe() {
    world::UniverseConfig cfg;
    cfg.num_objects = 16;
    cfg.embed_dim = 16;
    cfg.synonyms_per_object = 2;
    cfg.noise_vocab_size = 24;
    cfg.seed = 301;
    return world::make_universe(cfg);
}

world::Dataset small_dataset(const world::ObjectUniverse& u, std::uint64_t n,
                             std::uint32_t captions, std::uint64_t seed) {
    world::DatasetSpec spec;
    spec.n = n;
    spec.captions_per_image = captions;
    spec.seed = seed;
    return world::build_dataset(spec, u);
}

objective::EncoderConfig small_arch() {
    objective::EncoderConfig arch;
    arch.input_dim = 16;
    arch.hidden_width = 32;
    arch.feature_dim = 32;
    arch.proj_dim = 16;
    arch.text_token_dim = 16;
    return arch;
}

// batch 16 over 64 examples: four steps per epoch, runs in milliseconds.
TrainConfig fast_config(const ContrastiveMode& mode) {
    TrainConfig cfg = trainer::desk_config(mode);
    cfg.batch_size = 16;
    cfg.epochs = 6;
    cfg.warmup_epochs = 2;
    return cfg;
}

} // namespace

// --- mode parsing ----------------------------------------------------------

TEST(ContrastiveModeTest, ParseRoundTripsAllForms) {
    for (const std::string text : {"simclr", "clip", "clip_s:1", "clip_s:5", "clip_s:200"}) {
        const ContrastiveMode mode = trainer::parse_mode(text);
        EXPECT_EQ(trainer::to_string(mode), text);
        EXPECT_EQ(trainer::parse_mode(trainer::to_string(mode)), mode);
    }
    EXPECT_EQ(trainer::parse_mode("simclr"), trainer::simclr_mode());
    EXPECT_EQ(trainer::parse_mode("clip"), trainer::clip_mode());
    EXPECT_EQ(trainer::parse_mode("clip_s:3"), trainer::clip_s_mode(3));
}

TEST(ContrastiveModeTest, ParseRejectsMalformedInput) {
    for (const std::string text : {"", "CLIP", "simclr ", "clipz", "clip_s", "clip_s:",
                                   "clip_s:0", "clip_s:-2", "clip_s:3x", "clip_s:9999999"}) {
        EXPECT_THROW(trainer::parse_mode(text), ConfigError) << text;
    }
}

TEST(ContrastiveModeTest, ClipSNeedsPositiveCount) {
    EXPECT_THROW(trainer::clip_s_mode(0), ParameterError);
    EXPECT_TRUE(trainer::clip_s_mode(1).uses_text());
    EXPECT_TRUE(trainer::clip_mode().uses_text());
    EXPECT_FALSE(trainer::simclr_mode().uses_text());
}

// --- configs ---------------------------------------------------------------

TEST(TrainConfigTest, DefaultsMatchPublishedRows) {
    const TrainConfig sim = trainer::default_config(trainer::simclr_mode());
    EXPECT_EQ(sim.batch_size, 1024u);
    EXPECT_EQ(sim.epochs, 200u);
    EXPECT_EQ(sim.warmup_epochs, 10u);
    EXPECT_EQ(sim.lr, 1e-2);
    EXPECT_EQ(sim.weight_decay, 1e-6);

    const TrainConfig clip = trainer::default_config(trainer::clip_mode());
    EXPECT_EQ(clip.batch_size, 1024u);
    EXPECT_EQ(clip.epochs, 200u);
    EXPECT_EQ(clip.warmup_epochs, 10u);
    EXPECT_EQ(clip.lr, 1e-3);
    EXPECT_EQ(clip.weight_decay, 0.1);

    // Caption resampling changes the data stream, not the optimizer row.
    const TrainConfig clip_s = trainer::default_config(trainer::clip_s_mode(3));
    EXPECT_EQ(clip_s.batch_size, clip.batch_size);
    EXPECT_EQ(clip_s.epochs, clip.epochs);
    EXPECT_EQ(clip_s.warmup_epochs, clip.warmup_epochs);
    EXPECT_EQ(clip_s.lr, clip.lr);
    EXPECT_EQ(clip_s.weight_decay, clip.weight_decay);
    EXPECT_EQ(clip_s.mode, trainer::clip_s_mode(3));
}

TEST(TrainConfigTest, DeskConfigShrinksOnlyTheSchedule) {
    for (const auto& mode : {trainer::simclr_mode(), trainer::clip_mode()}) {
        const TrainConfig full = trainer::default_config(mode);
        const TrainConfig desk = trainer::desk_config(mode);
        EXPECT_EQ(desk.batch_size, 64u);
        EXPECT_EQ(desk.epochs, 30u);
        EXPECT_EQ(desk.warmup_epochs, 3u);
        EXPECT_EQ(desk.lr, full.lr);
        EXPECT_EQ(desk.weight_decay, full.weight_decay);
        EXPECT_EQ(desk.temperature, full.temperature);
    }
}

TEST(TrainConfigTest, ValidateRejectsBadFields) {
    const auto broken = [](auto mutate) {
        TrainConfig cfg = trainer::desk_config(trainer::clip_mode());
        mutate(cfg);
        return cfg;
    };
    EXPECT_THROW(broken([](TrainConfig& c) { c.batch_size = 1; }).validate(), ParameterError);
    EXPECT_THROW(broken([](TrainConfig& c) { c.epochs = 0; }).validate(), ParameterError);
    EXPECT_THROW(broken([](TrainConfig& c) { c.warmup_epochs = 0; }).validate(), ParameterError);
    EXPECT_THROW(broken([](TrainConfig& c) { c.warmup_epochs = c.epochs; }).validate(),
                 ParameterError);
    EXPECT_THROW(broken([](TrainConfig& c) { c.lr = -1e-3; }).validate(), ParameterError);
    EXPECT_THROW(broken([](TrainConfig& c) { c.weight_decay = -0.1; }).validate(),
                 ParameterError);
    EXPECT_THROW(broken([](TrainConfig& c) { c.temperature = 0.0; }).validate(), ParameterError);
    EXPECT_THROW(broken([](TrainConfig& c) { c.temperature = -1.0; }).validate(),
                 ParameterError);
    EXPECT_NO_THROW(broken([](TrainConfig& c) { c.lr = 0.0; }).validate());
}

// --- caption selection -----------------------------------------------------

TEST(SelectCaptionTest, ClipAlwaysPinsCaptionZero) {
    const auto u = small_universe();
    const auto ds = small_dataset(u, 4, 3, 51);
    Rng rng = derive_stream(9, "select");
    const Rng before = rng;
    for (const auto& ex : ds.examples)
        EXPECT_EQ(trainer::select_caption(ex, trainer::clip_mode(), 0, rng), 0u);
    Rng a = rng;
    Rng b = before;
    EXPECT_EQ(a.uniform(), b.uniform()); // no stream state consumed
}

TEST(SelectCaptionTest, ClipSOneConsumesNoRngState) {
    const auto u = small_universe();
    const auto ds = small_dataset(u, 1, 2, 52);
    Rng rng = derive_stream(9, "select");
    const Rng before = rng;
    EXPECT_EQ(trainer::select_caption(ds.examples[0], trainer::clip_s_mode(1), 0, rng), 0u);
    Rng a = rng;
    Rng b = before;
    EXPECT_EQ(a.uniform(), b.uniform());
}

TEST(SelectCaptionTest, ClipSDrawsUniformlyOverFirstK) {
    const auto u = small_universe();
    const auto ds = small_dataset(u, 1, 5, 53);
    const auto mode = trainer::clip_s_mode(5);
    Rng rng = derive_stream(77, "select");
    std::array<std::size_t, 5> counts{};
    const std::size_t trials = 10000;
    for (std::size_t i = 0; i < trials; ++i) {
        const std::size_t pick = trainer::select_caption(ds.examples[0], mode, 0, rng);
        ASSERT_LT(pick, counts.size());
        ++counts[pick];
    }
    for (const std::size_t c : counts) {
        const double freq = static_cast<double>(c) / static_cast<double>(trials);
        EXPECT_NEAR(freq, 0.2, 0.02);
    }
}

TEST(SelectCaptionTest, RejectsImpossibleRequests) {
    const auto u = small_universe();
    const auto ds = small_dataset(u, 1, 2, 54);
    Rng rng = derive_stream(1, "select");
    EXPECT_THROW(trainer::select_caption(ds.examples[0], trainer::simclr_mode(), 0, rng),
                 ParameterError);
    EXPECT_THROW(trainer::select_caption(ds.examples[0], trainer::clip_s_mode(3), 0, rng),
                 DataError);
}

// --- training --------------------------------------------------------------

TEST(TrainTest, RejectsMismatchedInputs) {
    const auto u = small_universe();
    const auto ds = small_dataset(u, 32, 2, 61);
    const auto arch = small_arch();

    TrainConfig cfg = fast_config(trainer::clip_mode());
    cfg.batch_size = 64; // larger than the dataset
    EXPECT_THROW(trainer::train(ds, cfg, arch), DataError);

    objective::EncoderConfig wrong = arch;
    wrong.input_dim = 8;
    EXPECT_THROW(trainer::train(ds, fast_config(trainer::clip_mode()), wrong), DimensionError);

    EXPECT_THROW(trainer::train(ds, fast_config(trainer::clip_s_mode(3)), arch), DataError);
}

TEST(TrainTest, RerunIsBitwiseIdentical) {
    const auto u = small_universe();
    const auto ds = small_dataset(u, 64, 2, 62);
    const auto arch = small_arch();
    for (const auto& mode :
         {trainer::simclr_mode(), trainer::clip_mode(), trainer::clip_s_mode(2)}) {
        TrainConfig cfg = fast_config(mode);
        cfg.seed = 5;
        auto a = trainer::train(ds, cfg, arch);
        auto b = trainer::train(ds, cfg, arch);
        EXPECT_EQ(a.stack.fingerprint(), b.stack.fingerprint()) << trainer::to_string(mode);
        ASSERT_EQ(a.loss_curve.size(), cfg.epochs);
        for (std::size_t e = 0; e < a.loss_curve.size(); ++e)
            EXPECT_EQ(a.loss_curve[e], b.loss_curve[e]);
        EXPECT_EQ(a.data_fingerprint, world::fingerprint(ds));

        TrainConfig other = cfg;
        other.seed = 6;
        auto c = trainer::train(ds, other, arch);
        EXPECT_NE(a.stack.fingerprint(), c.stack.fingerprint()) << trainer::to_string(mode);
    }
}

TEST(TrainTest, ClipSOneMatchesClipBitwise) {
    const auto u = small_universe();
    const auto ds = small_dataset(u, 64, 2, 63);
    const auto arch = small_arch();
    TrainConfig clip_cfg = fast_config(trainer::clip_mode());
    TrainConfig s1_cfg = fast_config(trainer::clip_s_mode(1));
    clip_cfg.seed = s1_cfg.seed = 11;

    const auto clip = trainer::train(ds, clip_cfg, arch);
    const auto s1 = trainer::train(ds, s1_cfg, arch);
    EXPECT_EQ(clip.stack.fingerprint(), s1.stack.fingerprint());
    ASSERT_EQ(clip.loss_curve.size(), s1.loss_curve.size());
    for (std::size_t e = 0; e < clip.loss_curve.size(); ++e)
        EXPECT_EQ(clip.loss_curve[e], s1.loss_curve[e]);
}

// A freshly initialized model scores every candidate near-uniformly, so the
// first epoch's mean loss sits close to the log of the candidate count:
// 2B-1 for the image-only objective, B per direction for image-text.
TEST(TrainTest, FirstEpochLossIsNearLogCandidateCount) {
    world::UniverseConfig uc;
    uc.num_objects = 32;
    uc.embed_dim = 32;
    uc.synonyms_per_object = 3;
    uc.noise_vocab_size = 64;
    uc.seed = 11;
    const auto u = world::make_universe(uc);
    const auto ds = small_dataset(u, 512, 1, 21);
    objective::EncoderConfig arch; // defaults sized for 32-dim images

    for (const auto& mode : {trainer::simclr_mode(), trainer::clip_mode()}) {
        for (const std::uint64_t seed : {1, 2, 3}) {
            TrainConfig cfg = trainer::desk_config(mode);
            cfg.epochs = 2;
            cfg.warmup_epochs = 1;
            cfg.seed = seed;
            const auto model = trainer::train(ds, cfg, arch);
            const double candidates = mode.kind == ModeKind::simclr
                                          ? 2.0 * cfg.batch_size - 1.0
                                          : 1.0 * cfg.batch_size;
            const double target = std::log(candidates);
            EXPECT_NEAR(model.loss_curve[0], target, 0.15 * target)
                << trainer::to_string(mode) << " seed " << seed;
        }
    }
}

TEST(TrainTest, ZeroLearningRateLeavesParametersAtInit) {
    const auto u = small_universe();
    const auto ds = small_dataset(u, 32, 1, 64);
    const auto arch = small_arch();
    for (const auto& mode : {trainer::simclr_mode(), trainer::clip_mode()}) {
        TrainConfig cfg = fast_config(mode);
        cfg.batch_size = 16;
        cfg.epochs = 2;
        cfg.warmup_epochs = 1;
        cfg.lr = 0.0;
        cfg.seed = 31;
        const auto model = trainer::train(ds, cfg, arch);

        objective::EncoderConfig arch_final = arch;
        if (mode.uses_text()) arch_final.vocab_size = u.vocab_size();
        auto fresh = mode.kind == ModeKind::simclr
                         ? objective::EncoderStack::make_shared_image(arch_final, cfg.seed)
                         : objective::EncoderStack::make_image_text(arch_final, cfg.seed);
        EXPECT_EQ(model.stack.fingerprint(), fresh.fingerprint()) << trainer::to_string(mode);
        for (const double l : model.loss_curve) EXPECT_TRUE(std::isfinite(l));
    }
}

TEST(TrainTest, LossDecreasesOverTraining) {
    const auto u = small_universe();
    const auto ds = small_dataset(u, 128, 2, 65);
    const auto arch = small_arch();
    for (const auto& mode :
         {trainer::simclr_mode(), trainer::clip_mode(), trainer::clip_s_mode(2)}) {
        for (const std::uint64_t seed : {1, 2, 3}) {
            TrainConfig cfg = fast_config(mode);
            cfg.epochs = 12;
            cfg.warmup_epochs = 2;
            cfg.seed = seed;
            const auto model = trainer::train(ds, cfg, arch);
            EXPECT_LT(model.loss_curve.back(), model.loss_curve.front())
                << trainer::to_string(mode) << " seed " << seed;
        }
    }
}

// --- checkpoints -----------------------------------------------------------

namespace {

trainer::TrainedModel checkpoint_fixture(const ContrastiveMode& mode) {
    const auto u = small_universe();
    const auto ds = small_dataset(u, 32, 2, 71);
    TrainConfig cfg = fast_config(mode);
    cfg.batch_size = 16;
    cfg.epochs = 3;
    cfg.warmup_epochs = 1;
    cfg.seed = 13;
    return trainer::train(ds, cfg, small_arch());
}

std::string checkpoint_path(const std::string& name) { return testing::TempDir() + name; }

} // namespace

TEST(CheckpointTest, RoundTripPreservesEverything) {
    for (const auto& mode : {trainer::simclr_mode(), trainer::clip_s_mode(2)}) {
        const auto model = checkpoint_fixture(mode);
        const std::string path = checkpoint_path("ckpt_rt.bin");
        trainer::save_checkpoint(model, path);
        auto loaded = trainer::load_checkpoint(path);

        EXPECT_EQ(loaded.stack.fingerprint(), model.stack.fingerprint());
        EXPECT_EQ(trainer::to_json(loaded.config), trainer::to_json(model.config));
        EXPECT_EQ(loaded.arch, model.arch);
        EXPECT_EQ(loaded.data_fingerprint, model.data_fingerprint);
        ASSERT_EQ(loaded.loss_curve.size(), model.loss_curve.size());
        for (std::size_t e = 0; e < model.loss_curve.size(); ++e)
            EXPECT_EQ(loaded.loss_curve[e], model.loss_curve[e]);
        EXPECT_EQ(loaded.stack.temperature(), model.config.temperature);
    }
}

TEST(CheckpointTest, SaveIsDeterministic) {
    const auto model = checkpoint_fixture(trainer::clip_mode());
    const std::string a = checkpoint_path("ckpt_a.bin");
    const std::string b = checkpoint_path("ckpt_b.bin");
    trainer::save_checkpoint(model, a);
    trainer::save_checkpoint(model, b);
    EXPECT_EQ(bytes::read_file_bytes(a, "test"), bytes::read_file_bytes(b, "test"));
}

namespace {

std::uint64_t read_u64_at(const std::string& buf, std::size_t off) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
    return v;
}

void write_u64_at(std::string& buf, std::size_t off, std::uint64_t v) {
    for (std::size_t i = 0; i < 8; ++i)
        buf[off + i] = static_cast<char>((v >> (8 * i)) & 0xff);
}

} // namespace

TEST(CheckpointTest, RejectsCorruptedFiles) {
    const auto model = checkpoint_fixture(trainer::clip_mode());
    const std::string path = checkpoint_path("ckpt_base.bin");
    trainer::save_checkpoint(model, path);
    const std::string good = bytes::read_file_bytes(path, "test");
    const std::size_t header_len = static_cast<std::size_t>(read_u64_at(good, 8));

    const auto expect_rejected = [&](const std::string& name, std::string bad) {
        const std::string p = checkpoint_path(name);
        bytes::write_file_bytes(p, bad, "test");
        EXPECT_THROW(trainer::load_checkpoint(p), SerializationError) << name;
    };

    { // magic
        std::string bad = good;
        bad[0] ^= 0x01;
        expect_rejected("ckpt_magic.bin", bad);
    }
    { // version
        std::string bad = good;
        bad[4] ^= 0x01;
        expect_rejected("ckpt_version.bin", bad);
    }
    { // header claims more bytes than the file holds
        std::string bad = good;
        write_u64_at(bad, 8, good.size());
        expect_rejected("ckpt_hlen.bin", bad);
    }
    { // flipped bit inside tensor data: caught by the checksum
        std::string bad = good;
        bad[good.size() - 20] ^= 0x10;
        expect_rejected("ckpt_flip.bin", bad);
    }
    { // truncated
        expect_rejected("ckpt_trunc.bin", good.substr(0, good.size() - 3));
    }
    { // trailing bytes
        expect_rejected("ckpt_trail.bin", good + "x");
    }
    { // tensor count mismatch
        std::string bad = good;
        const std::size_t count_off = 16 + header_len;
        write_u64_at(bad, count_off, read_u64_at(good, count_off) + 1);
        expect_rejected("ckpt_count.bin", bad);
    }
    { // first tensor shape mismatch
        std::string bad = good;
        const std::size_t rows_off = 16 + header_len + 8;
        write_u64_at(bad, rows_off, read_u64_at(good, rows_off) + 1);
        expect_rejected("ckpt_shape.bin", bad);
    }

    EXPECT_THROW(trainer::load_checkpoint(checkpoint_path("ckpt_missing.bin")),
                 SerializationError);
}

TEST(CheckpointTest, ConfigJsonRejectsUnknownOrMissingKeys) {
    const TrainConfig cfg = trainer::desk_config(trainer::clip_s_mode(2));
    nlohmann::json j = trainer::to_json(cfg);
    EXPECT_EQ(trainer::to_json(trainer::train_config_from_json(j, "test")), j);

    nlohmann::json extra = j;
    extra["surplus"] = 1;
    EXPECT_THROW(trainer::train_config_from_json(extra, "test"), ConfigError);

    nlohmann::json missing = j;
    missing.erase("lr");
    EXPECT_THROW(trainer::train_config_from_json(missing, "test"), ConfigError);

    const auto arch = small_arch();
    nlohmann::json aj = trainer::to_json(arch);
    EXPECT_EQ(trainer::encoder_config_from_json(aj, "test"), arch);
    aj.erase("vocab_size");
    EXPECT_THROW(trainer::encoder_config_from_json(aj, "test"), ConfigError);
}
