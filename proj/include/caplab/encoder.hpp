#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "caplab/layers.hpp"

namespace caplab {
namespace objective {

using numkit::DenseMatrix;
using numkit::ParamTensor;

enum class HeadKind { linear, mlp_one_hidden };

/// Projection head g mapping encoder features to the embedding space.
/// linear: one affine map (with bias). mlp_one_hidden: affine-ReLU-affine
/// with hidden width equal to the embedding width.
class ProjectionHead {
public:
    ProjectionHead() = default;
    ProjectionHead(HeadKind kind, std::size_t in_dim, std::size_t out_dim, Rng& rng)
        : kind_(kind) {
        if (kind_ == HeadKind::linear) {
            first_ = numkit::AffineLayer(in_dim, out_dim, rng);
        } else {
            first_ = numkit::AffineLayer(in_dim, out_dim, rng);
            second_ = numkit::AffineLayer(out_dim, out_dim, rng);
        }
    }

    DenseMatrix forward(const DenseMatrix& input) {
        if (kind_ == HeadKind::linear) return first_.forward(input);
        return second_.forward(relu_.forward(first_.forward(input)));
    }

    DenseMatrix backward(const DenseMatrix& grad_out) {
        if (kind_ == HeadKind::linear) return first_.backward(grad_out);
        return first_.backward(relu_.backward(second_.backward(grad_out)));
    }

    std::vector<ParamTensor*> params() {
        if (kind_ == HeadKind::linear) return {&first_.weight(), &first_.bias()};
        return {&first_.weight(), &first_.bias(), &second_.weight(), &second_.bias()};
    }

    HeadKind kind() const { return kind_; }
    numkit::AffineLayer& first_layer() { return first_; }
    numkit::AffineLayer& second_layer() { return second_; }

private:
    HeadKind kind_{HeadKind::linear};
    numkit::AffineLayer first_;
    numkit::ReluLayer relu_;
    numkit::AffineLayer second_;
};

struct EncoderConfig {
    std::size_t input_dim{32};      // image feature width, matches the world's embed_dim
    std::size_t hidden_width{128};
    std::size_t feature_dim{128};   // encoder output width = probe feature width
    std::size_t proj_dim{32};       // embedding width after the projection head
    std::size_t text_token_dim{32}; // token embedding width before the text MLP
    std::size_t vocab_size{0};      // 0 for image-only stacks

    bool operator==(const EncoderConfig&) const = default;
};

/// The full parameter set of one contrastive model. shared=true is the
/// image-only regime: one encoder, one MLP head, both views through the same
/// weights. shared=false is the image-text regime: separate encoders, linear
/// heads, plus a token-embedding table feeding the text MLP.
class EncoderStack {
public:
    EncoderStack() = default;

    static EncoderStack make_shared_image(const EncoderConfig& cfg, std::uint64_t seed) {
        EncoderStack s;
        s.config_ = cfg;
        s.shared_ = true;
        Rng enc = derive_stream(seed, "image_encoder");
        s.image_encoder_ = numkit::MlpEncoder(cfg.input_dim, cfg.hidden_width,
                                              cfg.feature_dim, enc);
        Rng head = derive_stream(seed, "image_head");
        s.image_head_ = ProjectionHead(HeadKind::mlp_one_hidden, cfg.feature_dim,
                                       cfg.proj_dim, head);
        return s;
    }

    static EncoderStack make_image_text(const EncoderConfig& cfg, std::uint64_t seed) {
        if (cfg.vocab_size == 0)
            throw ParameterError("EncoderStack: image-text stack needs vocab_size > 0");
        EncoderStack s;
        s.config_ = cfg;
        s.shared_ = false;
        Rng enc = derive_stream(seed, "image_encoder");
        s.image_encoder_ = numkit::MlpEncoder(cfg.input_dim, cfg.hidden_width,
                                              cfg.feature_dim, enc);
        Rng head = derive_stream(seed, "image_head");
        s.image_head_ = ProjectionHead(HeadKind::linear, cfg.feature_dim, cfg.proj_dim, head);
        Rng bag = derive_stream(seed, "text_table");
        s.text_bag_ = numkit::EmbeddingBagLayer(cfg.vocab_size, cfg.text_token_dim, bag);
        Rng tenc = derive_stream(seed, "text_encoder");
        s.text_encoder_ = numkit::MlpEncoder(cfg.text_token_dim, cfg.hidden_width,
                                             cfg.feature_dim, tenc);
        Rng thead = derive_stream(seed, "text_head");
        s.text_head_ = ProjectionHead(HeadKind::linear, cfg.feature_dim, cfg.proj_dim, thead);
        return s;
    }

    bool shared() const { return shared_; }
    const EncoderConfig& config() const { return config_; }

    double temperature() const {
        return learnable_temperature_ ? std::exp(log_tau_.value.at(0, 0)) : temperature_;
    }
    void set_temperature(double tau) {
        if (!(tau > 0.0)) throw ParameterError("EncoderStack: temperature must be > 0");
        temperature_ = tau;
        if (learnable_temperature_) log_tau_.value.at(0, 0) = std::log(tau);
    }
    void set_learnable_temperature(bool on) {
        learnable_temperature_ = on;
        if (on) {
            log_tau_ = ParamTensor(DenseMatrix(1, 1));
            log_tau_.value.at(0, 0) = std::log(temperature_);
            log_tau_.decay = false;
        }
    }
    bool learnable_temperature() const { return learnable_temperature_; }
    ParamTensor& log_tau() { return log_tau_; }

    // Encoder features before the projection head; what the linear probe sees.
    DenseMatrix features(const DenseMatrix& images) { return image_encoder_.forward(images); }

    /// images -> normalized embeddings; layer caches hold the activations for
    /// backward_images. One forward per backward, in that order.
    DenseMatrix embed_images(const DenseMatrix& images) {
        DenseMatrix proj = image_head_.forward(image_encoder_.forward(images));
        last_image_embeddings_ = numkit::l2_normalize_rows(proj, image_norms_);
        return last_image_embeddings_;
    }

    /// Returns dL/dImages; callers that only need parameter grads discard it.
    DenseMatrix backward_images(const DenseMatrix& grad_embeddings) {
        DenseMatrix g = numkit::l2_normalize_rows_backward(last_image_embeddings_,
                                                           image_norms_, grad_embeddings);
        return image_encoder_.backward(image_head_.backward(g));
    }

    DenseMatrix embed_tokens(const std::vector<std::vector<std::uint32_t>>& token_batch) {
        if (shared_)
            throw ParameterError("EncoderStack: shared stack has no text path");
        DenseMatrix proj = text_head_.forward(text_encoder_.forward(text_bag_.forward(token_batch)));
        last_text_embeddings_ = numkit::l2_normalize_rows(proj, text_norms_);
        return last_text_embeddings_;
    }

    void backward_tokens(const DenseMatrix& grad_embeddings) {
        DenseMatrix g = numkit::l2_normalize_rows_backward(last_text_embeddings_,
                                                           text_norms_, grad_embeddings);
        text_bag_.backward(text_encoder_.backward(text_head_.backward(g)));
    }

    /// All trainable tensors in a fixed order; the optimizer walks this list.
    std::vector<ParamTensor*> params() {
        std::vector<ParamTensor*> out;
        for (auto* p : image_encoder_.params()) out.push_back(p);
        for (auto* p : image_head_.params()) out.push_back(p);
        if (!shared_) {
            out.push_back(&text_bag_.table());
            for (auto* p : text_encoder_.params()) out.push_back(p);
            for (auto* p : text_head_.params()) out.push_back(p);
        }
        if (learnable_temperature_) out.push_back(&log_tau_);
        return out;
    }

    void zero_grads() {
        for (auto* p : params()) p->zero_grad();
    }

    std::uint64_t fingerprint() const {
        std::uint64_t h = hash_str("encoder_stack");
        auto& self = const_cast<EncoderStack&>(*this);
        for (auto* p : self.params()) h = numkit::fingerprint(p->value, h);
        return h;
    }

    numkit::MlpEncoder& image_encoder() { return image_encoder_; }
    ProjectionHead& image_head() { return image_head_; }
    numkit::EmbeddingBagLayer& text_bag() { return text_bag_; }
    numkit::MlpEncoder& text_encoder() { return text_encoder_; }
    ProjectionHead& text_head() { return text_head_; }

private:
    EncoderConfig config_;
    bool shared_{true};
    double temperature_{0.07};
    bool learnable_temperature_{false};
    ParamTensor log_tau_;

    numkit::MlpEncoder image_encoder_;
    ProjectionHead image_head_;
    numkit::EmbeddingBagLayer text_bag_;
    numkit::MlpEncoder text_encoder_;
    ProjectionHead text_head_;

    std::vector<double> image_norms_;
    std::vector<double> text_norms_;
    DenseMatrix last_image_embeddings_;
    DenseMatrix last_text_embeddings_;
};

} // namespace objective
} // namespace caplab
