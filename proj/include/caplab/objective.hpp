#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "caplab/encoder.hpp"
#include "caplab/errors.hpp"
#include "caplab/matrix.hpp"
#include "caplab/world.hpp"

namespace caplab {
namespace objective {

inline double cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw DimensionError("cosine: lengths " + std::to_string(a.size()) + " vs " +
                             std::to_string(b.size()));
    const double na = numkit::norm2(a);
    const double nb = numkit::norm2(b);
    if (!(na > numkit::kNormalizeEpsilon) || !(nb > numkit::kNormalizeEpsilon))
        throw DegenerateVectorError("cosine: degenerate input vector");
    return numkit::dot(a, b) / (na * nb);
}

/// A point on the unit sphere; the constructor normalizes.
struct Embedding {
    std::vector<double> v;
};

inline Embedding make_embedding(std::span<const double> raw) {
    return Embedding{numkit::l2_normalize(raw)};
}

// ---------------------------------------------------------------------------
// Single-anchor InfoNCE.
//
//   loss = -log( exp(sim(a, p)/tau) / sum_{c in {p} u negs} exp(sim(a, c)/tau) )
//
// sim is cosine similarity, computed from the raw inputs, so finite-difference
// probes that perturb inputs off the sphere still differentiate the exact
// function being evaluated.
// ---------------------------------------------------------------------------

struct InfoNceResult {
    double loss{0.0};
    std::vector<double> grad_anchor;
    std::vector<double> grad_positive;
    std::vector<std::vector<double>> grad_negatives;
};

// Inputs must be unit-norm to this tolerance; loose enough that perturbed
// probe points pass, tight enough to catch unnormalized embeddings.
inline constexpr double kUnitNormSlack = 1e-4;

namespace detail {

inline void require_near_unit(std::span<const double> v, const char* what) {
    const double n = numkit::norm2(v);
    if (std::abs(n - 1.0) > kUnitNormSlack)
        throw ParameterError(std::string(what) + ": expected unit norm, got " +
                             std::to_string(n));
}

// d cos(a,c) / da = c/(|a||c|) - cos * a/|a|^2, accumulated with weight w.
inline void add_cosine_grad_wrt_first(std::span<const double> a, std::span<const double> c,
                                      double cos_ac, double w, std::vector<double>& out) {
    const double na = numkit::norm2(a);
    const double nc = numkit::norm2(c);
    const double inv_cross = 1.0 / (na * nc);
    const double inv_aa = 1.0 / (na * na);
    for (std::size_t i = 0; i < a.size(); ++i)
        out[i] += w * (c[i] * inv_cross - cos_ac * a[i] * inv_aa);
}

} // namespace detail

inline InfoNceResult info_nce(std::span<const double> anchor,
                              std::span<const double> positive,
                              const std::vector<std::vector<double>>& negatives,
                              double tau) {
    if (!(tau > 0.0)) throw ParameterError("info_nce: temperature must be > 0");
    if (negatives.empty()) throw ParameterError("info_nce: empty negative set");
    detail::require_near_unit(anchor, "info_nce anchor");
    detail::require_near_unit(positive, "info_nce positive");
    for (const auto& n : negatives) detail::require_near_unit(n, "info_nce negative");

    const std::size_t m = negatives.size();
    std::vector<std::span<const double>> cand;
    cand.reserve(m + 1);
    cand.push_back(positive);
    for (const auto& n : negatives) cand.push_back(n);

    std::vector<double> cos(m + 1), logits(m + 1);
    double max_logit = -1e300;
    for (std::size_t j = 0; j <= m; ++j) {
        cos[j] = cosine(anchor, cand[j]);
        logits[j] = cos[j] / tau;
        max_logit = std::max(max_logit, logits[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j <= m; ++j) z += std::exp(logits[j] - max_logit);

    InfoNceResult res;
    res.loss = -logits[0] + max_logit + std::log(z);
    res.grad_anchor.assign(anchor.size(), 0.0);
    res.grad_positive.assign(anchor.size(), 0.0);
    res.grad_negatives.assign(m, std::vector<double>(anchor.size(), 0.0));

    for (std::size_t j = 0; j <= m; ++j) {
        const double softmax_j = std::exp(logits[j] - max_logit) / z;
        const double dloss_dcos = (softmax_j - (j == 0 ? 1.0 : 0.0)) / tau;
        detail::add_cosine_grad_wrt_first(anchor, cand[j], cos[j], dloss_dcos,
                                          res.grad_anchor);
        auto& gj = j == 0 ? res.grad_positive : res.grad_negatives[j - 1];
        detail::add_cosine_grad_wrt_first(cand[j], anchor, cos[j], dloss_dcos, gj);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Batch losses at the embedding level. Both operate on rows that are already
// exactly unit-norm (the stack normalizes), so similarity is a plain dot
// product and the gradient flows through it.
// ---------------------------------------------------------------------------

enum class LossDirection { symmetric, image_to_text, text_to_image };

struct EmbeddingLossResult {
    double loss{0.0};
    DenseMatrix grad; // dL/dE, same shape as the embedding matrix
    double grad_log_tau{0.0};
};

struct PairEmbeddingLossResult {
    double loss{0.0};
    DenseMatrix grad_image;
    DenseMatrix grad_text;
    double grad_log_tau{0.0};
};

namespace detail {

inline void require_unit_rows(const DenseMatrix& e, const char* what) {
    for (std::size_t i = 0; i < e.rows; ++i) {
        const double n = numkit::norm2(e.row(i));
        if (std::abs(n - 1.0) > 1e-9)
            throw ParameterError(std::string(what) + ": row " + std::to_string(i) +
                                 " has norm " + std::to_string(n));
    }
}

} // namespace detail

/// Image-only batch objective over 2N stacked views (rows i and i+N are the
/// two views of example i). Every anchor scores its sibling against the
/// 2N-2 other views; the loss is averaged over all 2N anchors.
inline EmbeddingLossResult nt_xent_from_embeddings(const DenseMatrix& e, double tau,
                                                   bool want_tau_grad = false) {
    if (!(tau > 0.0))
        throw ParameterError("nt_xent_from_embeddings: temperature must be > 0");
    if (e.rows < 4 || e.rows % 2 != 0)
        throw ParameterError("nt_xent_from_embeddings: need an even batch of >= 4 views");
    detail::require_unit_rows(e, "nt_xent_from_embeddings");

    const std::size_t two_n = e.rows;
    const std::size_t n = two_n / 2;
    const DenseMatrix sim = numkit::matmul_a_bt(e, e); // E E^T
    const double anchor_weight = 1.0 / static_cast<double>(two_n);

    DenseMatrix dlogits(two_n, two_n); // dTotal / d(sim/tau), zero diagonal
    double total = 0.0;
    for (std::size_t k = 0; k < two_n; ++k) {
        const std::size_t pos = (k + n) % two_n;
        double row_max = -1e300;
        for (std::size_t j = 0; j < two_n; ++j)
            if (j != k) row_max = std::max(row_max, sim.at(k, j) / tau);
        double z = 0.0;
        for (std::size_t j = 0; j < two_n; ++j)
            if (j != k) z += std::exp(sim.at(k, j) / tau - row_max);
        total += anchor_weight * (-(sim.at(k, pos) / tau) + row_max + std::log(z));
        for (std::size_t j = 0; j < two_n; ++j) {
            if (j == k) continue;
            const double softmax_kj = std::exp(sim.at(k, j) / tau - row_max) / z;
            dlogits.at(k, j) = anchor_weight * (softmax_kj - (j == pos ? 1.0 : 0.0));
        }
    }

    EmbeddingLossResult res;
    res.loss = total;
    if (want_tau_grad) {
        double acc = 0.0;
        for (std::size_t k = 0; k < two_n; ++k)
            for (std::size_t j = 0; j < two_n; ++j)
                acc += dlogits.at(k, j) * (sim.at(k, j) / tau);
        res.grad_log_tau = -acc;
    }
    numkit::scale_inplace(dlogits, 1.0 / tau); // now dTotal/dSim
    res.grad = numkit::matmul(dlogits, e);
    numkit::add_inplace(res.grad, numkit::matmul_at_b(dlogits, e));
    return res;
}

/// Image-text batch objective over N aligned pairs. Row i of the logit
/// matrix scores image i against all N texts; the matched text is the only
/// positive, so each anchor sees N-1 negatives. The symmetric form averages
/// the image->text and text->image cross-entropies.
inline PairEmbeddingLossResult clip_loss_from_embeddings(
    const DenseMatrix& z_image, const DenseMatrix& z_text, double tau,
    LossDirection direction = LossDirection::symmetric, bool want_tau_grad = false) {
    if (!(tau > 0.0))
        throw ParameterError("clip_loss_from_embeddings: temperature must be > 0");
    numkit::require_same_shape(z_image, z_text, "clip_loss_from_embeddings");
    if (z_image.rows < 2)
        throw ParameterError("clip_loss_from_embeddings: need a batch of >= 2 pairs");
    detail::require_unit_rows(z_image, "clip_loss_from_embeddings images");
    detail::require_unit_rows(z_text, "clip_loss_from_embeddings texts");

    const std::size_t n = z_image.rows;
    const DenseMatrix sim = numkit::matmul_a_bt(z_image, z_text); // image x text
    const double inv_n = 1.0 / static_cast<double>(n);

    DenseMatrix dlogits(n, n); // dTotal / d(sim/tau)
    double total = 0.0;

    const bool use_i2t = direction != LossDirection::text_to_image;
    const bool use_t2i = direction != LossDirection::image_to_text;
    const double dir_weight = direction == LossDirection::symmetric ? 0.5 : 1.0;

    if (use_i2t) {
        for (std::size_t i = 0; i < n; ++i) {
            double row_max = -1e300;
            for (std::size_t j = 0; j < n; ++j)
                row_max = std::max(row_max, sim.at(i, j) / tau);
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j) z += std::exp(sim.at(i, j) / tau - row_max);
            total += dir_weight * inv_n * (-(sim.at(i, i) / tau) + row_max + std::log(z));
            for (std::size_t j = 0; j < n; ++j) {
                const double p = std::exp(sim.at(i, j) / tau - row_max) / z;
                dlogits.at(i, j) += dir_weight * inv_n * (p - (i == j ? 1.0 : 0.0));
            }
        }
    }
    if (use_t2i) {
        for (std::size_t j = 0; j < n; ++j) {
            double col_max = -1e300;
            for (std::size_t i = 0; i < n; ++i)
                col_max = std::max(col_max, sim.at(i, j) / tau);
            double z = 0.0;
            for (std::size_t i = 0; i < n; ++i) z += std::exp(sim.at(i, j) / tau - col_max);
            total += dir_weight * inv_n * (-(sim.at(j, j) / tau) + col_max + std::log(z));
            for (std::size_t i = 0; i < n; ++i) {
                const double p = std::exp(sim.at(i, j) / tau - col_max) / z;
                dlogits.at(i, j) += dir_weight * inv_n * (p - (i == j ? 1.0 : 0.0));
            }
        }
    }

    PairEmbeddingLossResult res;
    res.loss = total;
    if (want_tau_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                acc += dlogits.at(i, j) * (sim.at(i, j) / tau);
        res.grad_log_tau = -acc;
    }
    numkit::scale_inplace(dlogits, 1.0 / tau);
    res.grad_image = numkit::matmul(dlogits, z_text);
    res.grad_text = numkit::matmul_at_b(dlogits, z_image);
    return res;
}

// ---------------------------------------------------------------------------
// Full-stack batch steps: build views, run the forward pass, leave gradients
// accumulated in the stack's parameters.
// ---------------------------------------------------------------------------

struct BatchLossResult {
    double loss{0.0};
    std::size_t negatives_per_anchor{0};
};

/// Two independently augmented views per example through the shared encoder.
inline BatchLossResult simclr_batch_loss(const std::vector<world::Example>& batch,
                                         const world::AugmentPolicy& policy,
                                         EncoderStack& stack, Rng& rng) {
    const std::size_t n = batch.size();
    if (n < 2) throw ParameterError("simclr_batch_loss: batch of >= 2 examples required");
    if (!stack.shared())
        throw ParameterError("simclr_batch_loss: stack must share one encoder across views");
    if (stack.image_head().kind() != HeadKind::mlp_one_hidden)
        throw ParameterError("simclr_batch_loss: image-only training uses the MLP head");

    const std::size_t dim = stack.config().input_dim;
    DenseMatrix views(2 * n, dim);
    for (std::size_t pass = 0; pass < 2; ++pass) {
        for (std::size_t i = 0; i < n; ++i) {
            if (batch[i].image.size() != dim)
                throw DimensionError("simclr_batch_loss: image of length " +
                                     std::to_string(batch[i].image.size()) +
                                     " vs input_dim " + std::to_string(dim));
            const auto v = world::augment_image(batch[i].image, policy, rng);
            for (std::size_t j = 0; j < dim; ++j) views.at(pass * n + i, j) = v[j];
        }
    }

    const DenseMatrix e = stack.embed_images(views);
    auto res = nt_xent_from_embeddings(e, stack.temperature(), stack.learnable_temperature());
    if (stack.learnable_temperature()) stack.log_tau().grad.at(0, 0) += res.grad_log_tau;
    stack.backward_images(res.grad);
    return {res.loss, 2 * n - 2};
}

/// One (image, selected caption) pair per example through the two-tower
/// stack. Pass an augment policy to transform images before encoding; the
/// caption side is never transformed here (caption sampling happens upstream
/// via the caption_indices).
inline BatchLossResult clip_batch_loss(const std::vector<world::Example>& batch,
                                       const std::vector<std::size_t>& caption_indices,
                                       EncoderStack& stack,
                                       const world::ObjectUniverse& universe,
                                       LossDirection direction = LossDirection::symmetric,
                                       const world::AugmentPolicy* image_aug = nullptr,
                                       Rng* rng = nullptr) {
    const std::size_t n = batch.size();
    if (n < 2) throw ParameterError("clip_batch_loss: batch of >= 2 examples required");
    if (stack.shared())
        throw ParameterError("clip_batch_loss: stack must have separate image/text towers");
    if (stack.image_head().kind() != HeadKind::linear ||
        stack.text_head().kind() != HeadKind::linear)
        throw ParameterError("clip_batch_loss: image-text training uses linear heads");
    if (caption_indices.size() != n)
        throw ParameterError("clip_batch_loss: one caption index per example required");
    if (image_aug != nullptr && rng == nullptr)
        throw ParameterError("clip_batch_loss: augmentation needs an rng");

    const std::size_t dim = stack.config().input_dim;
    DenseMatrix images(n, dim);
    std::vector<std::vector<std::uint32_t>> tokens(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (batch[i].image.size() != dim)
            throw DimensionError("clip_batch_loss: image of length " +
                                 std::to_string(batch[i].image.size()) + " vs input_dim " +
                                 std::to_string(dim));
        if (caption_indices[i] >= batch[i].captions.size())
            throw DataError("clip_batch_loss: caption index " +
                            std::to_string(caption_indices[i]) + " out of range for " +
                            std::to_string(batch[i].captions.size()) + " captions");
        if (image_aug != nullptr) {
            const auto v = world::augment_image(batch[i].image, *image_aug, *rng);
            for (std::size_t j = 0; j < dim; ++j) images.at(i, j) = v[j];
        } else {
            for (std::size_t j = 0; j < dim; ++j) images.at(i, j) = batch[i].image[j];
        }
        tokens[i] = universe.tokens_to_ids(batch[i].captions[caption_indices[i]]);
    }

    const DenseMatrix zi = stack.embed_images(images);
    const DenseMatrix zt = stack.embed_tokens(tokens);
    auto res = clip_loss_from_embeddings(zi, zt, stack.temperature(), direction,
                                         stack.learnable_temperature());
    if (stack.learnable_temperature()) stack.log_tau().grad.at(0, 0) += res.grad_log_tau;
    stack.backward_images(res.grad_image);
    stack.backward_tokens(res.grad_text);
    return {res.loss, n - 1};
}

} // namespace objective
} // namespace caplab
