#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "modt/diffcore/tape.hpp"

namespace modt::diff {

/// Contiguous run of rows that forms one independent causal sequence.
struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
};

/// Row-stochastic attention matrix of one head over one segment, row-major
/// `length x length`, zero above the diagonal.
struct AttentionWeights {
  std::size_t segment = 0;
  std::size_t head = 0;
  std::size_t length = 0;
  std::vector<double> weights;
};

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
void backward(Tape<T>& tape, Tensor<T>& loss) {
  tape.backward(loss);
}

// [m x k] . [k x n]
template <class T>
Tensor<T>& matmul(Tape<T>& tape, Tensor<T>& a, Tensor<T>& b);

/// x . weight (+ bias broadcast over rows). x is [N x in], weight [in x out].
template <class T>
Tensor<T>& affine(Tape<T>& tape, Tensor<T>& x, Tensor<T>& weight, Tensor<T>* bias);

template <class T>
Tensor<T>& add(Tape<T>& tape, Tensor<T>& a, Tensor<T>& b);

/// Elementwise product.
template <class T>
Tensor<T>& mul(Tape<T>& tape, Tensor<T>& a, Tensor<T>& b);

/// Adds a length-`cols` vector to every row of x.
template <class T>
Tensor<T>& add_row_vector(Tape<T>& tape, Tensor<T>& x, Tensor<T>& v);

template <class T>
Tensor<T>& scale(Tape<T>& tape, Tensor<T>& x, T factor);

template <class T>
Tensor<T>& relu(Tape<T>& tape, Tensor<T>& x);

template <class T>
Tensor<T>& sigmoid(Tape<T>& tape, Tensor<T>& x);

/// Gradient passes only where lo <= x <= hi.
template <class T>
Tensor<T>& clamp(Tape<T>& tape, Tensor<T>& x, T lo, T hi);

/// Max-subtracted softmax over the last dimension.
template <class T>
Tensor<T>& softmax_lastdim(Tape<T>& tape, Tensor<T>& x);

template <class T>
Tensor<T>& layer_norm(Tape<T>& tape, Tensor<T>& x, Tensor<T>& gain, Tensor<T>& bias,
                      T eps = T(kLayerNormEps));

/// Inverted dropout. Identity (returns `x` itself) when rate is 0.
template <class T>
Tensor<T>& dropout(Tape<T>& tape, Tensor<T>& x, double rate, std::uint64_t seed);

/// Multi-head causal self-attention. `qkv` is [N x 3D] holding the query,
/// key and value projections side by side; every segment attends only within
/// itself and only to earlier-or-equal rows. Output is [N x D]. When
/// `capture` is non-null the softmax weights are appended to it.
template <class T>
Tensor<T>& causal_attention(Tape<T>& tape, Tensor<T>& qkv, std::span<const Segment> segments,
                            std::size_t num_heads, std::vector<AttentionWeights>* capture = nullptr);

/// out[i] = x[indices[i]]; gradients scatter-add back.
template <class T>
Tensor<T>& gather_rows(Tape<T>& tape, Tensor<T>& x, std::span<const std::size_t> indices);

/// Stacks 2-D tensors with equal column counts.
template <class T>
Tensor<T>& concat_rows(Tape<T>& tape, std::span<Tensor<T>* const> parts);

template <class T>
Tensor<T>& sum(Tape<T>& tape, Tensor<T>& x);

/// sum_i weights[i] * scalars[i]
template <class T>
Tensor<T>& weighted_sum(Tape<T>& tape, std::span<Tensor<T>* const> scalars, std::span<const T> weights);

}  // namespace modt::diff
