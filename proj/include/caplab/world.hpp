#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iterator>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "caplab/errors.hpp"
#include "caplab/matrix.hpp"
#include "caplab/rng.hpp"

namespace caplab {
namespace world {

using numkit::DenseMatrix;

// ---------------------------------------------------------------------------
// Universe: the fixed ground truth every image and caption is generated from.
// ---------------------------------------------------------------------------

struct UniverseConfig {
    std::uint32_t num_objects{64};
    std::uint32_t embed_dim{32};
    std::uint32_t synonyms_per_object{4};
    std::uint32_t num_templates{6};
    std::uint32_t noise_vocab_size{256};
    std::uint64_t seed{7};

    bool operator==(const UniverseConfig&) const = default;

    void validate() const {
        if (num_objects == 0 || embed_dim == 0)
            throw ParameterError("UniverseConfig: num_objects and embed_dim must be >= 1");
        if (synonyms_per_object == 0)
            throw ParameterError("UniverseConfig: each object needs at least one synonym");
        if (num_templates == 0 || num_templates > 6)
            throw ParameterError("UniverseConfig: num_templates must be in 1..6");
        if (noise_vocab_size == 0)
            throw ParameterError("UniverseConfig: noise_vocab_size must be >= 1");
    }
};

struct CaptionTemplate {
    std::vector<std::string> prefix;
    std::vector<std::string> suffix;
};

/// The generated multimodal universe: object directions in image space,
/// per-object synonym sets, caption templates and an object-uninformative
/// noise vocabulary. Token sets are pairwise disjoint by construction.
struct ObjectUniverse {
    UniverseConfig config;
    DenseMatrix object_embeddings;                  // num_objects x embed_dim, unit rows
    std::vector<std::vector<std::string>> synonyms; // [object][synonym]
    std::vector<CaptionTemplate> templates;
    std::vector<std::string> noise_vocab;

    // Closed vocabulary: synonyms (object-major), template words, noise words.
    std::vector<std::string> vocab;
    std::unordered_map<std::string, std::uint32_t> token_ids;

    std::uint32_t vocab_size() const { return static_cast<std::uint32_t>(vocab.size()); }

    bool is_noise_token(const std::string& t) const {
        return noise_token_set_.count(t) > 0;
    }

    /// Object index a token refers to, or -1 for template/noise tokens.
    int object_of_token(const std::string& t) const {
        auto it = synonym_object_.find(t);
        return it == synonym_object_.end() ? -1 : static_cast<int>(it->second);
    }

    std::vector<std::uint32_t> tokens_to_ids(const std::vector<std::string>& tokens) const {
        std::vector<std::uint32_t> ids;
        ids.reserve(tokens.size());
        for (const auto& t : tokens) {
            auto it = token_ids.find(t);
            if (it == token_ids.end())
                throw DataError("unknown token '" + t + "' for this universe");
            ids.push_back(it->second);
        }
        return ids;
    }

    std::uint64_t content_hash() const {
        std::uint64_t h = hash_str("universe");
        h = hash_combine(h, config.num_objects);
        h = hash_combine(h, config.embed_dim);
        h = hash_combine(h, config.synonyms_per_object);
        h = hash_combine(h, config.num_templates);
        h = hash_combine(h, config.noise_vocab_size);
        h = hash_combine(h, config.seed);
        h = numkit::fingerprint(object_embeddings, h);
        for (const auto& t : vocab) h = hash_str(t, h);
        return h;
    }

    // filled by make_universe
    std::unordered_set<std::string> noise_token_set_;
    std::unordered_map<std::string, std::uint32_t> synonym_object_;
};

namespace detail {

/// Pronounceable pseudo-word from random syllables (e.g. "miku", "brato").
inline std::string make_word(Rng& rng) {
    static const char* onsets[] = {"b", "d",  "f",  "g",  "h",  "j",  "k",  "l",
                                   "m", "n",  "p",  "r",  "s",  "t",  "v",  "w",
                                   "z", "br", "dr", "gr", "kl", "pl", "st", "tr"};
    static const char* vowels[] = {"a", "e", "i", "o", "u", "ai", "ea", "ou"};
    const std::size_t syllables = 2 + rng.uniform_int(2);
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
        w += onsets[rng.uniform_int(std::size(onsets))];
        w += vowels[rng.uniform_int(std::size(vowels))];
    }
    return w;
}

inline std::string make_unique_word(Rng& rng, std::unordered_set<std::string>& used) {
    for (;;) {
        std::string w = make_word(rng);
        if (used.insert(w).second) return w;
    }
}

inline const std::vector<CaptionTemplate>& builtin_templates() {
    static const std::vector<CaptionTemplate> t = {
        {{"a", "photo", "of"}, {}},
        {{"i", "see"}, {}},
        {{"there", "is"}, {}},
        {{"an", "image", "showing"}, {}},
        {{}, {"together"}},
        {{"this", "picture", "has"}, {}},
    };
    return t;
}

} // namespace detail

inline ObjectUniverse make_universe(const UniverseConfig& config) {
    config.validate();
    ObjectUniverse u;
    u.config = config;

    Rng emb_rng = derive_stream(config.seed, "object_embeddings");
    u.object_embeddings = DenseMatrix(config.num_objects, config.embed_dim);
    for (std::uint32_t i = 0; i < config.num_objects; ++i) {
        std::vector<double> row(config.embed_dim);
        for (auto& x : row) x = emb_rng.normal();
        row = numkit::l2_normalize(row);
        for (std::uint32_t j = 0; j < config.embed_dim; ++j)
            u.object_embeddings.at(i, j) = row[j];
    }

    u.templates.assign(detail::builtin_templates().begin(),
                       detail::builtin_templates().begin() + config.num_templates);

    std::unordered_set<std::string> used;
    for (const auto& t : detail::builtin_templates()) {
        for (const auto& w : t.prefix) used.insert(w);
        for (const auto& w : t.suffix) used.insert(w);
    }

    Rng word_rng = derive_stream(config.seed, "words");
    u.synonyms.resize(config.num_objects);
    for (std::uint32_t i = 0; i < config.num_objects; ++i) {
        for (std::uint32_t s = 0; s < config.synonyms_per_object; ++s) {
            std::string w = detail::make_unique_word(word_rng, used);
            u.synonyms[i].push_back(w);
            u.synonym_object_[w] = i;
        }
    }
    for (std::uint32_t k = 0; k < config.noise_vocab_size; ++k) {
        std::string w = detail::make_unique_word(word_rng, used);
        u.noise_vocab.push_back(w);
        u.noise_token_set_.insert(w);
    }

    // Vocabulary order: synonyms object-major, then template words in
    // template order (deduplicated), then noise words.
    auto add_token = [&u](const std::string& t) {
        if (u.token_ids.count(t)) return;
        u.token_ids[t] = static_cast<std::uint32_t>(u.vocab.size());
        u.vocab.push_back(t);
    };
    for (const auto& set : u.synonyms)
        for (const auto& w : set) add_token(w);
    for (const auto& t : u.templates) {
        for (const auto& w : t.prefix) add_token(w);
        for (const auto& w : t.suffix) add_token(w);
    }
    for (const auto& w : u.noise_vocab) add_token(w);
    return u;
}

// ---------------------------------------------------------------------------
// Scenes and images
// ---------------------------------------------------------------------------

/// Ground-truth object set behind one example; the shared cause of its image
/// and captions. Saliences are positive and sum to one.
struct LatentScene {
    std::vector<std::uint32_t> object_ids;
    std::vector<double> saliences;

    void validate() const {
        if (object_ids.empty()) throw ParameterError("LatentScene: empty object set");
        if (object_ids.size() != saliences.size())
            throw ParameterError("LatentScene: ids/saliences length mismatch");
        double sum = 0.0;
        for (double s : saliences) {
            if (!(s > 0.0) || s > 1.0)
                throw ParameterError("LatentScene: saliences must lie in (0,1]");
            sum += s;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw ParameterError("LatentScene: saliences must sum to 1");
    }
};

inline LatentScene make_scene(std::vector<std::uint32_t> ids, std::vector<double> saliences) {
    LatentScene s{std::move(ids), std::move(saliences)};
    s.validate();
    return s;
}

/// Scene with `size` distinct objects drawn from [0, pool_size) and
/// normalized random saliences. pool_offset shifts the pool, which lets
/// transfer tasks use object ranges the probe has to tell apart.
inline LatentScene sample_scene_sized(std::size_t size, std::uint32_t pool_size,
                                      std::uint32_t pool_offset, Rng& rng) {
    if (size == 0 || size > pool_size)
        throw ParameterError("sample_scene_sized: size out of range");
    std::vector<std::uint32_t> ids;
    std::set<std::uint32_t> seen;
    while (ids.size() < size) {
        const auto id = pool_offset + static_cast<std::uint32_t>(rng.uniform_int(pool_size));
        if (seen.insert(id).second) ids.push_back(id);
    }
    std::vector<double> sal(size);
    double sum = 0.0;
    for (auto& s : sal) {
        s = rng.uniform(0.2, 1.0);
        sum += s;
    }
    for (auto& s : sal) s /= sum;
    return make_scene(std::move(ids), std::move(sal));
}

/// Default pre-training scene distribution: 1..6 objects over the full universe.
inline LatentScene sample_scene(const ObjectUniverse& universe, Rng& rng) {
    const std::uint32_t max_size =
        std::min<std::uint32_t>(6, universe.config.num_objects);
    const std::size_t size = 1 + rng.uniform_int(max_size);
    return sample_scene_sized(size, universe.config.num_objects, 0, rng);
}

/// image = sum_i salience_i * embedding_i + sigma * gaussian noise.
inline std::vector<double> render_image(const LatentScene& scene,
                                        const ObjectUniverse& universe, double sigma,
                                        Rng& rng) {
    if (sigma < 0.0) throw ParameterError("render_image: sigma must be >= 0");
    scene.validate();
    std::vector<double> img(universe.config.embed_dim, 0.0);
    for (std::size_t k = 0; k < scene.object_ids.size(); ++k) {
        const auto row = universe.object_embeddings.row(scene.object_ids[k]);
        for (std::size_t j = 0; j < img.size(); ++j) img[j] += scene.saliences[k] * row[j];
    }
    for (auto& x : img) x += sigma * rng.normal();
    return img;
}

// ---------------------------------------------------------------------------
// Image augmentation: feature-space analogs of the pixel transforms.
// Masking stands in for cropping, global scaling for color jitter, additive
// noise for blur. The image-text policy masks only, mirroring the weaker
// transform set that image-text training traditionally uses.
// ---------------------------------------------------------------------------

enum class AugmentKind { simclr_analog, clip_analog };

struct AugmentPolicy {
    AugmentKind kind{AugmentKind::simclr_analog};
    double mask_rate_max{0.3};
    double scale_min{0.8};
    double scale_max{1.2};
    double noise_sigma{0.05};
};

inline std::vector<double> augment_image(const std::vector<double>& image,
                                         const AugmentPolicy& policy, Rng& rng) {
    std::vector<double> out = image;
    const double mask_rate = rng.uniform(0.0, policy.mask_rate_max);
    for (auto& x : out)
        if (rng.bernoulli(mask_rate)) x = 0.0;
    if (policy.kind == AugmentKind::simclr_analog) {
        const double scale = rng.uniform(policy.scale_min, policy.scale_max);
        for (auto& x : out) x = x * scale + policy.noise_sigma * rng.normal();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Captions
// ---------------------------------------------------------------------------

/// Independent caption knobs: descriptiveness delta (fraction of object
/// mentions that survive noise replacement), consistency (fixed synonym per
/// object), completeness (mention all objects vs a random subset) and
/// whether the sentence template is fixed.
struct CaptionKnobs {
    double delta{1.0};
    bool consistent{true};
    bool complete{true};
    double mention_prob{0.5};
    bool fixed_template{true};

    void validate() const {
        if (!(delta >= 0.0 && delta <= 1.0))
            throw ParameterError("CaptionKnobs: delta must be in [0,1]");
        if (!(mention_prob > 0.0 && mention_prob <= 1.0))
            throw ParameterError("CaptionKnobs: mention_prob must be in (0,1]");
    }
};

inline std::vector<std::string> generate_caption(const LatentScene& scene,
                                                 const ObjectUniverse& universe,
                                                 const CaptionKnobs& knobs, Rng& rng) {
    knobs.validate();
    scene.validate();

    // Mentioned objects: everything, or an independently thinned non-empty subset.
    std::vector<std::uint32_t> mentioned;
    if (knobs.complete) {
        mentioned = scene.object_ids;
    } else {
        do {
            mentioned.clear();
            for (auto id : scene.object_ids)
                if (rng.bernoulli(knobs.mention_prob)) mentioned.push_back(id);
        } while (mentioned.empty());
    }

    std::vector<std::string> content;
    content.reserve(mentioned.size());
    for (auto id : mentioned) {
        const auto& syns = universe.synonyms[id];
        content.push_back(knobs.consistent ? syns[0] : syns[rng.uniform_int(syns.size())]);
    }

    const std::size_t tmpl_idx =
        knobs.fixed_template ? 0 : rng.uniform_int(universe.templates.size());

    for (auto& tok : content)
        if (rng.bernoulli(1.0 - knobs.delta))
            tok = universe.noise_vocab[rng.uniform_int(universe.noise_vocab.size())];

    rng.shuffle(content);

    const auto& tmpl = universe.templates[tmpl_idx];
    std::vector<std::string> caption = tmpl.prefix;
    caption.insert(caption.end(), content.begin(), content.end());
    caption.insert(caption.end(), tmpl.suffix.begin(), tmpl.suffix.end());
    return caption;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i > 0) out += ' ';
        out += tokens[i];
    }
    return out;
}

inline std::vector<std::string> split_tokens(const std::string& text) {
    std::vector<std::string> tokens;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && text[i] == ' ') ++i;
        std::size_t start = i;
        while (i < text.size() && text[i] != ' ') ++i;
        if (i > start) tokens.push_back(text.substr(start, i - start));
    }
    return tokens;
}

// ---------------------------------------------------------------------------
// Examples and datasets
// ---------------------------------------------------------------------------

struct Example {
    std::vector<double> image;
    std::vector<std::vector<std::string>> captions;
    std::vector<std::uint8_t> labels; // multi-hot over universe objects

    std::vector<std::uint32_t> label_ids() const {
        std::vector<std::uint32_t> ids;
        for (std::uint32_t i = 0; i < labels.size(); ++i)
            if (labels[i]) ids.push_back(i);
        return ids;
    }
};

struct DatasetSpec {
    std::uint64_t n{1024};
    std::uint32_t captions_per_image{1};
    CaptionKnobs knobs;
    double image_noise_sigma{0.1};
    std::uint64_t seed{1};

    void validate() const {
        if (n == 0) throw ParameterError("DatasetSpec: n must be >= 1");
        if (captions_per_image == 0)
            throw ParameterError("DatasetSpec: captions_per_image must be >= 1");
        if (image_noise_sigma < 0.0)
            throw ParameterError("DatasetSpec: image_noise_sigma must be >= 0");
        knobs.validate();
    }
};

struct Dataset {
    DatasetSpec spec;
    UniverseConfig universe_config;
    std::uint64_t universe_hash{0};
    std::vector<Example> examples;

    std::size_t size() const { return examples.size(); }
};

/// The scene, image and captions of example `index`, all drawn from the
/// example's own stream so generation order (and worker count) cannot
/// matter.
inline Example generate_example(const DatasetSpec& spec, const ObjectUniverse& universe,
                                std::uint64_t index) {
    Rng ex_rng = derive_stream(spec.seed, "example", index);
    const LatentScene scene = sample_scene(universe, ex_rng);
    Example ex;
    ex.image = render_image(scene, universe, spec.image_noise_sigma, ex_rng);
    for (std::uint32_t k = 0; k < spec.captions_per_image; ++k)
        ex.captions.push_back(generate_caption(scene, universe, spec.knobs, ex_rng));
    ex.labels.assign(universe.config.num_objects, 0);
    for (auto id : scene.object_ids) ex.labels[id] = 1;
    return ex;
}

inline Dataset build_dataset(const DatasetSpec& spec, const ObjectUniverse& universe) {
    spec.validate();
    Dataset ds;
    ds.spec = spec;
    ds.universe_config = universe.config;
    ds.universe_hash = universe.content_hash();
    ds.examples.reserve(spec.n);
    for (std::uint64_t i = 0; i < spec.n; ++i)
        ds.examples.push_back(generate_example(spec, universe, i));
    return ds;
}

inline std::uint64_t fingerprint(const Dataset& ds) {
    std::uint64_t h = hash_str("dataset");
    h = hash_combine(h, ds.universe_hash);
    h = hash_combine(h, ds.spec.seed);
    h = hash_combine(h, ds.examples.size());
    for (const auto& ex : ds.examples) {
        h = fnv1a(ex.image.data(), ex.image.size() * sizeof(double), h);
        for (const auto& cap : ex.captions)
            for (const auto& tok : cap) h = hash_str(tok, h);
        h = fnv1a(ex.labels.data(), ex.labels.size(), h);
    }
    return h;
}

} // namespace world
} // namespace caplab
