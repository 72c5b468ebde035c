#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "caplab/bytes.hpp"
#include "caplab/errors.hpp"
#include "caplab/rng.hpp"
#include "caplab/world.hpp"

namespace caplab {
namespace captionops {

// ---------------------------------------------------------------------------
// Hashed bag-of-ngrams features (unigrams + bigrams) for the caption filter.
// ---------------------------------------------------------------------------

/// Sparse feature vector: (bucket, count) pairs with strictly increasing
/// bucket indices.
using SparseVec = std::vector<std::pair<std::uint32_t, double>>;

inline constexpr std::uint32_t kDefaultFilterBuckets = 1u << 18;
// Joins bigram halves; unit separator cannot appear inside a token.
inline constexpr char kBigramJoiner = '\x1f';

inline SparseVec hash_ngrams(const std::vector<std::string>& tokens, std::uint32_t buckets) {
    if (buckets < 2) throw ParameterError("hash_ngrams: buckets must be >= 2");
    std::map<std::uint32_t, double> acc;
    for (const auto& tok : tokens)
        acc[static_cast<std::uint32_t>(hash_str(tok) % buckets)] += 1.0;
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
        const std::string bigram = tokens[i] + kBigramJoiner + tokens[i + 1];
        acc[static_cast<std::uint32_t>(hash_str(bigram) % buckets)] += 1.0;
    }
    return SparseVec(acc.begin(), acc.end());
}

// ---------------------------------------------------------------------------
// Linear caption filter trained with logistic SGD.
// ---------------------------------------------------------------------------

struct NGramFilterModel {
    std::uint32_t buckets{kDefaultFilterBuckets};
    std::vector<double> weights; // dense, size == buckets
    double bias{0.0};
    double threshold{0.5};

    double score_features(const SparseVec& x) const {
        double z = bias;
        for (const auto& [idx, cnt] : x) z += weights[idx] * cnt;
        return 1.0 / (1.0 + std::exp(-z));
    }

    double score(const std::vector<std::string>& tokens) const {
        return score_features(hash_ngrams(tokens, buckets));
    }

    bool keeps(const std::vector<std::string>& tokens) const {
        return score(tokens) >= threshold;
    }
};

struct FilterTrainConfig {
    std::uint32_t buckets{kDefaultFilterBuckets};
    std::uint32_t epochs{5};
    double lr{0.1};
    double holdout_frac{0.2};
    double threshold{0.5};
    std::uint64_t seed{1};
};

struct FilterTrainResult {
    NGramFilterModel model;
    double holdout_accuracy{0.0};
    std::size_t train_size{0};
    std::size_t holdout_size{0};
};

inline FilterTrainResult train_filter(const std::vector<std::vector<std::string>>& positives,
                                      const std::vector<std::vector<std::string>>& negatives,
                                      const FilterTrainConfig& cfg = {}) {
    if (positives.size() < 2 || negatives.size() < 2)
        throw DataError("train_filter: need at least 2 documents per class");
    if (!(cfg.holdout_frac > 0.0 && cfg.holdout_frac < 1.0))
        throw ParameterError("train_filter: holdout_frac must be in (0,1)");
    if (!(cfg.threshold > 0.0 && cfg.threshold < 1.0))
        throw ParameterError("train_filter: threshold must be in (0,1)");

    struct Doc {
        SparseVec x;
        double y;
    };
    auto featurize = [&cfg](const std::vector<std::vector<std::string>>& corpus, double label,
                            std::vector<Doc>& out) {
        for (const auto& tokens : corpus) out.push_back({hash_ngrams(tokens, cfg.buckets), label});
    };

    // Per-class split so holdout keeps both labels even for skewed corpora.
    // Both classes share one split stream: equal-sized corpora then hold out
    // the same index positions, so a document duplicated across classes never
    // straddles the train/holdout boundary (where memorization would invert
    // its held-out sibling instead of scoring at chance).
    auto split = [&cfg](std::size_t n) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        Rng rng = derive_stream(cfg.seed, "filter_split");
        rng.shuffle(idx);
        std::size_t holdout = static_cast<std::size_t>(cfg.holdout_frac * n);
        holdout = std::max<std::size_t>(1, std::min(holdout, n - 1));
        return std::pair{std::vector<std::size_t>(idx.begin(), idx.begin() + holdout),
                         std::vector<std::size_t>(idx.begin() + holdout, idx.end())};
    };

    std::vector<Doc> train, holdout;
    {
        std::vector<Doc> pos, neg;
        featurize(positives, 1.0, pos);
        featurize(negatives, 0.0, neg);
        const auto [pos_hold, pos_train] = split(pos.size());
        const auto [neg_hold, neg_train] = split(neg.size());
        for (auto i : pos_train) train.push_back(std::move(pos[i]));
        for (auto i : pos_hold) holdout.push_back(pos[i]);
        for (auto i : neg_train) train.push_back(std::move(neg[i]));
        for (auto i : neg_hold) holdout.push_back(neg[i]);
    }

    FilterTrainResult res;
    res.model.buckets = cfg.buckets;
    res.model.threshold = cfg.threshold;
    res.model.weights.assign(cfg.buckets, 0.0);
    res.train_size = train.size();
    res.holdout_size = holdout.size();

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng = derive_stream(cfg.seed, "filter_epoch", epoch);
        rng.shuffle(order);
        for (auto i : order) {
            const Doc& doc = train[i];
            const double err = res.model.score_features(doc.x) - doc.y;
            for (const auto& [idx, cnt] : doc.x) res.model.weights[idx] -= cfg.lr * err * cnt;
            res.model.bias -= cfg.lr * err;
        }
    }

    std::size_t correct = 0;
    for (const auto& doc : holdout) {
        const bool keep = res.model.score_features(doc.x) >= cfg.threshold;
        if (keep == (doc.y > 0.5)) ++correct;
    }
    res.holdout_accuracy = static_cast<double>(correct) / static_cast<double>(holdout.size());
    return res;
}

/// Keeps examples whose first caption scores at or above the threshold.
/// Order-preserving and pure. The returned spec's n reflects the retained
/// count; its seed records provenance only.
inline world::Dataset filter_dataset(const NGramFilterModel& model, const world::Dataset& ds) {
    world::Dataset out;
    out.spec = ds.spec;
    out.universe_config = ds.universe_config;
    out.universe_hash = ds.universe_hash;
    for (const auto& ex : ds.examples) {
        if (ex.captions.empty()) throw DataError("filter_dataset: example without captions");
        if (model.keeps(ex.captions[0])) out.examples.push_back(ex);
    }
    out.spec.n = out.examples.size();
    return out;
}

// ---------------------------------------------------------------------------
// Filter model binary format: "CLFM", version, shape, weights, checksum.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kFilterMagic = 0x4d464c43; // "CLFM"
inline constexpr std::uint32_t kFilterVersion = 1;

inline void save_filter(const NGramFilterModel& model, const std::string& path) {
    std::string buf;
    bytes::put_u32(buf, kFilterMagic);
    bytes::put_u32(buf, kFilterVersion);
    bytes::put_u32(buf, model.buckets);
    bytes::put_f64(buf, model.bias);
    bytes::put_f64(buf, model.threshold);
    bytes::put_u64(buf, model.weights.size());
    for (double w : model.weights) bytes::put_f64(buf, w);
    bytes::put_u64(buf, fnv1a(buf.data(), buf.size()));
    bytes::write_file_bytes(path, buf, "save_filter");
}

inline NGramFilterModel load_filter(const std::string& path) {
    const std::string buf = bytes::read_file_bytes(path, "load_filter");
    bytes::ByteReader r(buf, "load_filter");
    if (r.u32() != kFilterMagic) throw SerializationError("load_filter: bad magic");
    if (r.u32() != kFilterVersion) throw SerializationError("load_filter: unsupported version");
    NGramFilterModel model;
    model.buckets = r.u32();
    model.bias = r.f64();
    model.threshold = r.f64();
    const std::uint64_t n = r.u64();
    if (n != model.buckets)
        throw SerializationError("load_filter: weight count does not match buckets");
    model.weights.resize(n);
    for (auto& w : model.weights) w = r.f64();
    const std::size_t payload_end = r.pos();
    const std::uint64_t checksum = r.u64();
    if (!r.at_end()) throw SerializationError("load_filter: trailing bytes");
    if (fnv1a(buf.data(), payload_end) != checksum)
        throw SerializationError("load_filter: checksum mismatch");
    return model;
}

// ---------------------------------------------------------------------------
// Ground-truth descriptiveness and local paraphrasing.
// ---------------------------------------------------------------------------

/// Fraction of the scene's objects that the caption names via any synonym.
inline double oracle_descriptiveness(const std::vector<std::string>& caption,
                                     const std::vector<std::uint32_t>& scene_objects,
                                     const world::ObjectUniverse& universe) {
    if (scene_objects.empty())
        throw ParameterError("oracle_descriptiveness: empty scene");
    std::set<int> mentioned;
    for (const auto& tok : caption) {
        const int obj = universe.object_of_token(tok);
        if (obj >= 0) mentioned.insert(obj);
    }
    std::size_t hit = 0;
    for (auto id : scene_objects)
        if (mentioned.count(static_cast<int>(id))) ++hit;
    return static_cast<double>(hit) / static_cast<double>(scene_objects.size());
}

inline double oracle_descriptiveness(const world::Example& ex,
                                     const world::ObjectUniverse& universe,
                                     std::size_t caption_index = 0) {
    if (caption_index >= ex.captions.size())
        throw ParameterError("oracle_descriptiveness: caption index out of range");
    return oracle_descriptiveness(ex.captions[caption_index], ex.label_ids(), universe);
}

/// Re-renders a caption with a fresh template and fresh synonym choices while
/// preserving the set of mentioned objects and the noise tokens. The local
/// stand-in for a language-model paraphrase.
inline std::vector<std::string> paraphrase(const std::vector<std::string>& caption,
                                           const world::ObjectUniverse& universe, Rng& rng) {
    std::vector<int> objects; // first-mention order, deduplicated
    std::set<int> seen;
    std::vector<std::string> noise;
    for (const auto& tok : caption) {
        if (!universe.token_ids.count(tok))
            throw DataError("paraphrase: token '" + tok + "' not from this universe");
        const int obj = universe.object_of_token(tok);
        if (obj >= 0) {
            if (seen.insert(obj).second) objects.push_back(obj);
        } else if (universe.is_noise_token(tok)) {
            noise.push_back(tok);
        }
        // template words are dropped; the new template re-supplies its own
    }

    const std::size_t tmpl_idx = rng.uniform_int(universe.templates.size());
    std::vector<std::string> content;
    content.reserve(objects.size() + noise.size());
    for (int obj : objects) {
        const auto& syns = universe.synonyms[obj];
        content.push_back(syns[rng.uniform_int(syns.size())]);
    }
    content.insert(content.end(), noise.begin(), noise.end());
    rng.shuffle(content);

    const auto& tmpl = universe.templates[tmpl_idx];
    std::vector<std::string> out = tmpl.prefix;
    out.insert(out.end(), content.begin(), content.end());
    out.insert(out.end(), tmpl.suffix.begin(), tmpl.suffix.end());
    return out;
}

} // namespace captionops
} // namespace caplab
