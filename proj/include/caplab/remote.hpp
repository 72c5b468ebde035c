#pragma once

// Remote paraphrase client. Assembles a fixed few-shot prompt and speaks a
// minimal text-completion HTTP contract: POST prompt + sampling settings,
// receive completion strings. The endpoint is an external service; nothing
// here depends on which model sits behind it.

#include <array>
#include <cstdlib>
#include <iostream>
#include <semaphore>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "caplab/captionops.hpp"
#include "caplab/errors.hpp"
#include "caplab/rng.hpp"
#include "caplab/world.hpp"

namespace caplab::remote {

// One in-context example: a caption and a known-good paraphrase of it.
struct PromptPair {
    std::string input;
    std::string output;
};

// The few-shot context is always exactly this many pairs.
inline constexpr std::size_t kNumContextPairs = 4;

// Lays out the completion prompt: one block per context pair, blank line
// between blocks, then the target block left open after "Output:". The byte
// layout is load-bearing (golden-file tested); do not touch casually.
inline std::string build_paraphrase_prompt(std::span<const PromptPair> context,
                                           const std::string& target) {
    if (context.size() != kNumContextPairs) {
        throw ParameterError("build_paraphrase_prompt: expected " +
                             std::to_string(kNumContextPairs) + " context pairs, got " +
                             std::to_string(context.size()));
    }
    std::string prompt;
    for (const PromptPair& pair : context) {
        prompt += "Paraphrase the sentence below\n";
        prompt += "Input: " + pair.input + "\n";
        prompt += "Output: " + pair.output + "\n";
        prompt += "\n";
    }
    prompt += "Paraphrase the sentence below\n";
    prompt += "Input: " + target + "\n";
    prompt += "Output:";
    return prompt;
}

// Builds a usable few-shot context from the synthetic world itself: sample a
// scene, caption it, paraphrase locally. Good enough to prime a completion
// model without any hand-written strings.
inline std::vector<PromptPair> default_context_pairs(const world::ObjectUniverse& universe,
                                                     std::uint64_t seed) {
    std::vector<PromptPair> pairs;
    pairs.reserve(kNumContextPairs);
    world::CaptionKnobs knobs;
    knobs.consistent = false;
    knobs.fixed_template = false;
    for (std::size_t i = 0; i < kNumContextPairs; ++i) {
        Rng rng = derive_stream(seed, "prompt_context", i);
        world::LatentScene scene = world::sample_scene(universe, rng);
        std::vector<std::string> caption = world::generate_caption(scene, universe, knobs, rng);
        std::vector<std::string> para = captionops::paraphrase(caption, universe, rng);
        pairs.push_back({world::join_tokens(caption), world::join_tokens(para)});
    }
    return pairs;
}

// One paraphrase call. samples, temperature and stop have no meaningful
// defaults on purpose: callers must choose them, and the zero-initialized
// request fails validation.
struct ParaphraseRequest {
    std::string target;
    std::vector<PromptPair> context;
    int samples{0};
    double temperature{-1.0};
    // stop sequence forwarded to the server; generation ends there. Required,
    // like temperature: no guessed default.
    std::string stop;

    void validate() const {
        if (context.size() != kNumContextPairs) {
            throw ParameterError("ParaphraseRequest: context must hold " +
                                 std::to_string(kNumContextPairs) + " pairs, got " +
                                 std::to_string(context.size()));
        }
        if (target.empty()) throw ParameterError("ParaphraseRequest: empty target caption");
        if (samples < 1) {
            throw ParameterError("ParaphraseRequest: samples must be >= 1, got " +
                                 std::to_string(samples));
        }
        if (!(temperature >= 0.0)) {
            throw ParameterError("ParaphraseRequest: temperature must be set and >= 0");
        }
        if (stop.empty()) throw ParameterError("ParaphraseRequest: stop sequence must be set");
    }
};

// Where and how to reach the completion endpoint. url is scheme://host:port;
// the client posts to url + "/v1/completions".
struct EndpointConfig {
    std::string url;
    std::string auth_token;       // sent as a bearer token when non-empty
    int timeout_seconds{30};      // per request, connect and read
    int max_retries{2};           // transport-level retries after the first try
    int max_in_flight{4};

    void validate() const {
        if (url.empty()) throw ConfigError("EndpointConfig: url is empty");
        if (timeout_seconds < 1) throw ConfigError("EndpointConfig: timeout_seconds must be >= 1");
        if (max_retries < 0) throw ConfigError("EndpointConfig: max_retries must be >= 0");
        if (max_in_flight < 1) throw ConfigError("EndpointConfig: max_in_flight must be >= 1");
    }
};

// Reads CAPLAB_PARAPHRASE_ENDPOINT (required) and CAPLAB_PARAPHRASE_TOKEN
// (optional) from the environment.
inline EndpointConfig endpoint_from_env() {
    EndpointConfig cfg;
    const char* url = std::getenv("CAPLAB_PARAPHRASE_ENDPOINT");
    if (url == nullptr || *url == '\0') {
        throw ConfigError("CAPLAB_PARAPHRASE_ENDPOINT is not set");
    }
    cfg.url = url;
    if (const char* token = std::getenv("CAPLAB_PARAPHRASE_TOKEN")) cfg.auth_token = token;
    cfg.validate();
    return cfg;
}

namespace detail {

// Keeps the first line only (a completion model happily rambles past the
// answer), additionally cuts at the stop sequence in case the server ignored
// it, then strips surrounding whitespace.
inline std::string clean_completion(std::string text, const std::string& stop) {
    if (std::size_t nl = text.find('\n'); nl != std::string::npos) text.resize(nl);
    if (!stop.empty()) {
        if (std::size_t pos = text.find(stop); pos != std::string::npos) text.resize(pos);
    }
    const char* ws = " \t\r\n";
    std::size_t begin = text.find_first_not_of(ws);
    if (begin == std::string::npos) return {};
    std::size_t end = text.find_last_not_of(ws);
    return text.substr(begin, end - begin + 1);
}

} // namespace detail

// Blocking client with bounded concurrency. Transport failures (unreachable,
// non-200) are retried; a well-formed HTTP reply carrying garbage JSON is not,
// since resending the same request cannot fix the server.
class RemoteParaphraseClient {
public:
    static constexpr const char* kCompletionPath = "/v1/completions";
    // semaphore capacity bound; practical max_in_flight is far below this
    static constexpr int kMaxInFlightCeiling = 256;

    explicit RemoteParaphraseClient(EndpointConfig config)
        : config_(std::move(config)),
          in_flight_(std::min(config_.max_in_flight, kMaxInFlightCeiling)) {
        config_.validate();
        while (!config_.url.empty() && config_.url.back() == '/') config_.url.pop_back();
    }

    const EndpointConfig& config() const { return config_; }

    // Returns cleaned paraphrases, at most request.samples of them. Empty
    // completions are dropped with a warning rather than failing the call.
    std::vector<std::string> paraphrase(const ParaphraseRequest& request) {
        request.validate();
        const std::string prompt = build_paraphrase_prompt(request.context, request.target);
        nlohmann::json body{{"prompt", prompt},
                            {"temperature", request.temperature},
                            {"n", request.samples},
                            {"stop", request.stop}};
        const std::string payload = body.dump();

        std::counting_semaphore<kMaxInFlightCeiling>& gate = in_flight_;
        gate.acquire();
        struct Release {
            std::counting_semaphore<kMaxInFlightCeiling>& gate;
            ~Release() { gate.release(); }
        } release{gate};

        const int attempts_allowed = 1 + config_.max_retries;
        std::string last_failure;
        for (int attempt = 1; attempt <= attempts_allowed; ++attempt) {
            httplib::Client cli(config_.url);
            cli.set_connection_timeout(config_.timeout_seconds, 0);
            cli.set_read_timeout(config_.timeout_seconds, 0);
            cli.set_write_timeout(config_.timeout_seconds, 0);
            httplib::Headers headers;
            if (!config_.auth_token.empty()) {
                headers.emplace("Authorization", "Bearer " + config_.auth_token);
            }
            httplib::Result res = cli.Post(kCompletionPath, headers, payload, "application/json");
            if (!res) {
                last_failure = "no response (" + httplib::to_string(res.error()) + ")";
                continue;
            }
            if (res->status != 200) {
                last_failure = "HTTP status " + std::to_string(res->status);
                continue;
            }
            return parse_completions(res->body, request, attempt);
        }
        throw TransportError("paraphrase endpoint " + config_.url + " failed after " +
                                 std::to_string(attempts_allowed) + " attempts: " + last_failure,
                             attempts_allowed);
    }

private:
    std::vector<std::string> parse_completions(const std::string& body,
                                               const ParaphraseRequest& request,
                                               int attempts_used) const {
        nlohmann::json reply;
        try {
            reply = nlohmann::json::parse(body);
        } catch (const nlohmann::json::exception& e) {
            throw TransportError("paraphrase endpoint returned unparseable JSON: " +
                                     std::string(e.what()),
                                 attempts_used);
        }
        if (!reply.is_object() || !reply.contains("completions") ||
            !reply["completions"].is_array()) {
            throw TransportError("paraphrase reply lacks a \"completions\" array", attempts_used);
        }
        std::vector<std::string> out;
        out.reserve(reply["completions"].size());
        for (const nlohmann::json& entry : reply["completions"]) {
            if (!entry.is_string()) {
                throw TransportError("paraphrase reply holds a non-string completion",
                                     attempts_used);
            }
            std::string cleaned = detail::clean_completion(entry.get<std::string>(), request.stop);
            if (cleaned.empty()) {
                std::cerr << "warning: dropping empty paraphrase completion for target \""
                          << request.target << "\"\n";
                continue;
            }
            out.push_back(std::move(cleaned));
        }
        return out;
    }

    EndpointConfig config_;
    std::counting_semaphore<kMaxInFlightCeiling> in_flight_;
};

} // namespace caplab::remote
