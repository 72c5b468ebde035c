#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "caplab/matrix.hpp"
#include "caplab/optim.hpp"
#include "caplab/rng.hpp"

namespace caplab {
namespace numkit {

/// output = input * W + bias (bias broadcast over rows). Stateless form of
/// the affine map; AffineLayer wraps it with activation caching.
inline DenseMatrix affine_forward(const DenseMatrix& input, const ParamTensor& weight,
                                  const ParamTensor& bias) {
    if (input.cols != weight.value.rows)
        throw DimensionError("affine_forward: input " + input.shape_str() +
                             " vs weight " + weight.value.shape_str());
    if (bias.value.cols != weight.value.cols || bias.value.rows != 1)
        throw DimensionError("affine_forward: bias " + bias.value.shape_str() +
                             " vs weight " + weight.value.shape_str());
    DenseMatrix out = matmul(input, weight.value);
    for (std::size_t i = 0; i < out.rows; ++i)
        for (std::size_t j = 0; j < out.cols; ++j) out.at(i, j) += bias.value.at(0, j);
    return out;
}

/// Fully-connected layer with cached input for the backward pass. Gradients
/// accumulate into the ParamTensors; backward returns dL/dInput.
class AffineLayer {
public:
    AffineLayer() = default;
    AffineLayer(std::size_t in_dim, std::size_t out_dim, Rng& rng)
        : weight_(DenseMatrix::gaussian(in_dim, out_dim,
                                        1.0 / std::sqrt(static_cast<double>(in_dim)), rng)),
          bias_(DenseMatrix(1, out_dim)) {
        bias_.decay = false;
    }

    DenseMatrix forward(const DenseMatrix& input) {
        cached_input_ = input;
        return affine_forward(input, weight_, bias_);
    }

    DenseMatrix backward(const DenseMatrix& grad_out) {
        add_inplace(weight_.grad, matmul_at_b(cached_input_, grad_out));
        add_inplace(bias_.grad, column_sums(grad_out));
        return matmul_a_bt(grad_out, weight_.value);
    }

    ParamTensor& weight() { return weight_; }
    ParamTensor& bias() { return bias_; }
    const ParamTensor& weight() const { return weight_; }
    const ParamTensor& bias() const { return bias_; }

    std::size_t in_dim() const { return weight_.value.rows; }
    std::size_t out_dim() const { return weight_.value.cols; }

private:
    ParamTensor weight_;
    ParamTensor bias_;
    DenseMatrix cached_input_;
};

class ReluLayer {
public:
    DenseMatrix forward(const DenseMatrix& input) {
        mask_ = input;
        DenseMatrix out = input;
        for (std::size_t i = 0; i < out.data.size(); ++i) {
            if (out.data[i] < 0.0) out.data[i] = 0.0;
            mask_.data[i] = input.data[i] > 0.0 ? 1.0 : 0.0;
        }
        return out;
    }

    DenseMatrix backward(const DenseMatrix& grad_out) {
        DenseMatrix g = grad_out;
        for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] *= mask_.data[i];
        return g;
    }

private:
    DenseMatrix mask_;
};

/// Token-id lookup table with mean pooling: a caption becomes the mean of its
/// token embeddings. The minimal text featurizer for a desk-scale world.
class EmbeddingBagLayer {
public:
    EmbeddingBagLayer() = default;
    EmbeddingBagLayer(std::size_t vocab_size, std::size_t dim, Rng& rng)
        : table_(DenseMatrix::gaussian(vocab_size, dim,
                                       1.0 / std::sqrt(static_cast<double>(dim)), rng)) {}

    DenseMatrix forward(const std::vector<std::vector<std::uint32_t>>& token_batch) {
        cached_tokens_ = token_batch;
        DenseMatrix out(token_batch.size(), table_.value.cols);
        for (std::size_t i = 0; i < token_batch.size(); ++i) {
            const auto& ids = token_batch[i];
            if (ids.empty())
                throw DataError("EmbeddingBagLayer: empty token sequence at row " +
                                std::to_string(i));
            const double inv = 1.0 / static_cast<double>(ids.size());
            for (std::uint32_t id : ids) {
                if (id >= table_.value.rows)
                    throw DataError("EmbeddingBagLayer: token id " + std::to_string(id) +
                                    " outside vocab of " + std::to_string(table_.value.rows));
                for (std::size_t j = 0; j < table_.value.cols; ++j)
                    out.at(i, j) += inv * table_.value.at(id, j);
            }
        }
        return out;
    }

    void backward(const DenseMatrix& grad_out) {
        for (std::size_t i = 0; i < cached_tokens_.size(); ++i) {
            const auto& ids = cached_tokens_[i];
            const double inv = 1.0 / static_cast<double>(ids.size());
            for (std::uint32_t id : ids)
                for (std::size_t j = 0; j < table_.value.cols; ++j)
                    table_.grad.at(id, j) += inv * grad_out.at(i, j);
        }
    }

    ParamTensor& table() { return table_; }
    const ParamTensor& table() const { return table_; }

private:
    ParamTensor table_;
    std::vector<std::vector<std::uint32_t>> cached_tokens_;
};

/// Two affine layers with a ReLU between: the desk-scale encoder phi.
/// Output of the last affine is the (pre-projection-head) feature vector.
class MlpEncoder {
public:
    MlpEncoder() = default;
    MlpEncoder(std::size_t in_dim, std::size_t hidden, std::size_t out_dim, Rng& rng)
        : l1_(in_dim, hidden, rng), l2_(hidden, out_dim, rng) {}

    DenseMatrix forward(const DenseMatrix& input) {
        return l2_.forward(relu_.forward(l1_.forward(input)));
    }

    DenseMatrix backward(const DenseMatrix& grad_out) {
        return l1_.backward(relu_.backward(l2_.backward(grad_out)));
    }

    std::vector<ParamTensor*> params() {
        return {&l1_.weight(), &l1_.bias(), &l2_.weight(), &l2_.bias()};
    }

    std::size_t in_dim() const { return l1_.in_dim(); }
    std::size_t out_dim() const { return l2_.out_dim(); }

private:
    AffineLayer l1_;
    ReluLayer relu_;
    AffineLayer l2_;
};

} // namespace numkit
} // namespace caplab
