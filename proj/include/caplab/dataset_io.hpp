#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "caplab/errors.hpp"
#include "caplab/world.hpp"

namespace caplab {
namespace world {

using nlohmann::json;

inline constexpr const char* kDatasetFormat = "caplab.dataset";
inline constexpr int kDatasetVersion = 1;

// Strict object parsing: every listed key must be present and no others may
// appear. Catches typos in hand-edited configs instead of ignoring them.
inline void require_exact_keys(const json& obj, std::initializer_list<const char*> keys,
                               const std::string& context) {
    if (!obj.is_object()) throw ConfigError(context + ": expected a JSON object");
    for (const char* k : keys)
        if (!obj.contains(k)) throw ConfigError(context + ": missing key '" + k + "'");
    for (const auto& [k, v] : obj.items()) {
        bool known = false;
        for (const char* want : keys)
            if (k == want) known = true;
        if (!known) throw ConfigError(context + ": unknown key '" + k + "'");
    }
}

inline std::string hash_to_hex(std::uint64_t h) {
    std::ostringstream os;
    os << "0x" << std::hex << h;
    return os.str();
}

inline std::uint64_t hash_from_hex(const std::string& s) {
    if (s.rfind("0x", 0) != 0) throw SerializationError("bad hash literal: " + s);
    return std::stoull(s.substr(2), nullptr, 16);
}

inline json to_json(const UniverseConfig& c) {
    return {{"num_objects", c.num_objects},
            {"embed_dim", c.embed_dim},
            {"synonyms_per_object", c.synonyms_per_object},
            {"num_templates", c.num_templates},
            {"noise_vocab_size", c.noise_vocab_size},
            {"seed", c.seed}};
}

inline UniverseConfig universe_config_from_json(const json& j, const std::string& context) {
    require_exact_keys(j,
                       {"num_objects", "embed_dim", "synonyms_per_object", "num_templates",
                        "noise_vocab_size", "seed"},
                       context);
    UniverseConfig c;
    c.num_objects = j.at("num_objects").get<std::uint32_t>();
    c.embed_dim = j.at("embed_dim").get<std::uint32_t>();
    c.synonyms_per_object = j.at("synonyms_per_object").get<std::uint32_t>();
    c.num_templates = j.at("num_templates").get<std::uint32_t>();
    c.noise_vocab_size = j.at("noise_vocab_size").get<std::uint32_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

inline json to_json(const CaptionKnobs& k) {
    return {{"delta", k.delta},
            {"consistent", k.consistent},
            {"complete", k.complete},
            {"mention_prob", k.mention_prob},
            {"fixed_template", k.fixed_template}};
}

inline CaptionKnobs caption_knobs_from_json(const json& j, const std::string& context) {
    require_exact_keys(j, {"delta", "consistent", "complete", "mention_prob", "fixed_template"},
                       context);
    CaptionKnobs k;
    k.delta = j.at("delta").get<double>();
    k.consistent = j.at("consistent").get<bool>();
    k.complete = j.at("complete").get<bool>();
    k.mention_prob = j.at("mention_prob").get<double>();
    k.fixed_template = j.at("fixed_template").get<bool>();
    return k;
}

inline json to_json(const DatasetSpec& s) {
    return {{"n", s.n},
            {"captions_per_image", s.captions_per_image},
            {"knobs", to_json(s.knobs)},
            {"image_noise_sigma", s.image_noise_sigma},
            {"seed", s.seed}};
}

inline DatasetSpec dataset_spec_from_json(const json& j, const std::string& context) {
    require_exact_keys(j, {"n", "captions_per_image", "knobs", "image_noise_sigma", "seed"},
                       context);
    DatasetSpec s;
    s.n = j.at("n").get<std::uint64_t>();
    s.captions_per_image = j.at("captions_per_image").get<std::uint32_t>();
    s.knobs = caption_knobs_from_json(j.at("knobs"), context + ".knobs");
    s.image_noise_sigma = j.at("image_noise_sigma").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

/// JSONL layout: one header object, then one object per example. Doubles
/// round-trip exactly through the serializer, so save/load is bit-faithful.
inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw SerializationError("save_dataset: cannot open " + path);
    json header = {{"format", kDatasetFormat},
                   {"version", kDatasetVersion},
                   {"spec", to_json(ds.spec)},
                   {"universe", to_json(ds.universe_config)},
                   {"universe_hash", hash_to_hex(ds.universe_hash)}};
    out << header.dump() << "\n";
    for (const auto& ex : ds.examples) {
        json rec = {{"image", ex.image}, {"captions", ex.captions},
                    {"labels", ex.label_ids()}};
        out << rec.dump() << "\n";
    }
    out.flush();
    if (!out) throw SerializationError("save_dataset: write failed for " + path);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SerializationError("load_dataset: cannot open " + path);
    std::string line;
    if (!std::getline(in, line))
        throw SerializationError("load_dataset: empty file " + path);

    Dataset ds;
    try {
        const json header = json::parse(line);
        require_exact_keys(header, {"format", "version", "spec", "universe", "universe_hash"},
                           "dataset header");
        if (header.at("format").get<std::string>() != kDatasetFormat)
            throw SerializationError("load_dataset: unexpected format '" +
                                     header.at("format").get<std::string>() + "'");
        if (header.at("version").get<int>() != kDatasetVersion)
            throw SerializationError("load_dataset: unsupported version " +
                                     std::to_string(header.at("version").get<int>()));
        ds.spec = dataset_spec_from_json(header.at("spec"), "dataset header spec");
        ds.universe_config =
            universe_config_from_json(header.at("universe"), "dataset header universe");
        ds.universe_hash = hash_from_hex(header.at("universe_hash").get<std::string>());
    } catch (const json::exception& e) {
        throw SerializationError(std::string("load_dataset: bad header: ") + e.what());
    }

    const ObjectUniverse universe = make_universe(ds.universe_config);
    if (universe.content_hash() != ds.universe_hash)
        throw SerializationError("load_dataset: universe hash mismatch; file was written "
                                 "against a different universe");

    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const json rec = json::parse(line);
            require_exact_keys(rec, {"image", "captions", "labels"},
                               "dataset record " + std::to_string(line_no));
            Example ex;
            ex.image = rec.at("image").get<std::vector<double>>();
            ex.captions = rec.at("captions").get<std::vector<std::vector<std::string>>>();
            ex.labels.assign(ds.universe_config.num_objects, 0);
            for (auto id : rec.at("labels").get<std::vector<std::uint32_t>>()) {
                if (id >= ds.universe_config.num_objects)
                    throw SerializationError("load_dataset: label id out of range at line " +
                                             std::to_string(line_no));
                ex.labels[id] = 1;
            }
            if (ex.captions.empty())
                throw SerializationError("load_dataset: example without captions at line " +
                                         std::to_string(line_no));
            ds.examples.push_back(std::move(ex));
        } catch (const json::exception& e) {
            throw SerializationError("load_dataset: bad record at line " +
                                     std::to_string(line_no) + ": " + e.what());
        }
    }
    if (ds.examples.size() != ds.spec.n)
        throw SerializationError("load_dataset: header promises " + std::to_string(ds.spec.n) +
                                 " examples, file has " + std::to_string(ds.examples.size()));
    return ds;
}

} // namespace world
} // namespace caplab
