#include "modt/diffcore/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

namespace modt::diff {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Map = Eigen::Map<RowMat<T>>;
template <class T>
using CMap = Eigen::Map<const RowMat<T>>;
template <class T>
using RowVec = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;

template <class T>
CMap<T> cmat(const Buffer<T>& v, std::size_t r, std::size_t c) {
  return CMap<T>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <class T>
Map<T> mat(Buffer<T>& v, std::size_t r, std::size_t c) {
  return Map<T>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2) throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_string(s));
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shapes " + shape_string(a) + " and " + shape_string(b) + " differ");
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

template <class T>
Tensor<T>& matmul(Tape<T>& tape, Tensor<T>& a, Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0]) {
    throw DimensionError("matmul: cannot multiply " + shape_string(a.shape) + " by " + shape_string(b.shape));
  }
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Buffer<T> out(m * n);
  mat(out, m, n).noalias() = cmat(a.values, m, k) * cmat(b.values, k, n);
  auto& y = tape.emit({m, n}, std::move(out), a.requires_grad || b.requires_grad);
  tape.record("matmul", {&a, &b}, y, [&a, &b, &y, m, k, n] {
    auto dy = cmat(y.grad, m, n);
    if (a.requires_grad) {
      a.ensure_grad();
      mat(a.grad, m, k).noalias() += dy * cmat(b.values, k, n).transpose();
    }
    if (b.requires_grad) {
      b.ensure_grad();
      mat(b.grad, k, n).noalias() += cmat(a.values, m, k).transpose() * dy;
    }
  });
  return y;
}

template <class T>
Tensor<T>& affine(Tape<T>& tape, Tensor<T>& x, Tensor<T>& w, Tensor<T>* bias) {
  if (x.rank() != 2 || w.rank() != 2 || x.shape[1] != w.shape[0]) {
    throw DimensionError("affine: cannot multiply " + shape_string(x.shape) + " by " + shape_string(w.shape));
  }
  const std::size_t n = x.shape[0], in = x.shape[1], out_dim = w.shape[1];
  if (bias && bias->numel() != out_dim) {
    throw DimensionError("affine: bias " + shape_string(bias->shape) + " does not match weight " + shape_string(w.shape));
  }
  Buffer<T> out(n * out_dim);
  auto y_map = mat(out, n, out_dim);
  y_map.noalias() = cmat(x.values, n, in) * cmat(w.values, in, out_dim);
  if (bias) {
    y_map.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias->values.data(),
                                                                         static_cast<Eigen::Index>(out_dim));
  }
  const bool rg = x.requires_grad || w.requires_grad || (bias && bias->requires_grad);
  auto& y = tape.emit({n, out_dim}, std::move(out), rg);
  tape.record("affine", {&x, &w, bias}, y, [&x, &w, bias, &y, n, in, out_dim] {
    auto dy = cmat(y.grad, n, out_dim);
    if (x.requires_grad) {
      x.ensure_grad();
      mat(x.grad, n, in).noalias() += dy * cmat(w.values, in, out_dim).transpose();
    }
    if (w.requires_grad) {
      w.ensure_grad();
      mat(w.grad, in, out_dim).noalias() += cmat(x.values, n, in).transpose() * dy;
    }
    if (bias && bias->requires_grad) {
      bias->ensure_grad();
      mat(bias->grad, 1, out_dim) += dy.colwise().sum();
    }
  });
  return y;
}

template <class T>
Tensor<T>& add(Tape<T>& tape, Tensor<T>& a, Tensor<T>& b) {
  require_same(a.shape, b.shape, "add");
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values[i] + b.values[i];
  auto& y = tape.emit(a.shape, std::move(out), a.requires_grad || b.requires_grad);
  tape.record("add", {&a, &b}, y, [&a, &b, &y] {
    for (Tensor<T>* in : {&a, &b}) {
      if (!in->requires_grad) continue;
      in->ensure_grad();
      for (std::size_t i = 0; i < y.grad.size(); ++i) in->grad[i] += y.grad[i];
    }
  });
  return y;
}

template <class T>
Tensor<T>& mul(Tape<T>& tape, Tensor<T>& a, Tensor<T>& b) {
  require_same(a.shape, b.shape, "mul");
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values[i] * b.values[i];
  auto& y = tape.emit(a.shape, std::move(out), a.requires_grad || b.requires_grad);
  tape.record("mul", {&a, &b}, y, [&a, &b, &y] {
    if (a.requires_grad) {
      a.ensure_grad();
      for (std::size_t i = 0; i < y.grad.size(); ++i) a.grad[i] += y.grad[i] * b.values[i];
    }
    if (b.requires_grad) {
      b.ensure_grad();
      for (std::size_t i = 0; i < y.grad.size(); ++i) b.grad[i] += y.grad[i] * a.values[i];
    }
  });
  return y;
}

template <class T>
Tensor<T>& add_row_vector(Tape<T>& tape, Tensor<T>& x, Tensor<T>& v) {
  const std::size_t cols = x.cols(), rows = x.rows();
  if (v.numel() != cols) {
    throw DimensionError("add_row_vector: vector " + shape_string(v.shape) + " does not match rows of " +
                         shape_string(x.shape));
  }
  Buffer<T> out(x.values);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += v.values[c];
  auto& y = tape.emit(x.shape, std::move(out), x.requires_grad || v.requires_grad);
  tape.record("add_row_vector", {&x, &v}, y, [&x, &v, &y, rows, cols] {
    if (x.requires_grad) {
      x.ensure_grad();
      for (std::size_t i = 0; i < y.grad.size(); ++i) x.grad[i] += y.grad[i];
    }
    if (v.requires_grad) {
      v.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) v.grad[c] += y.grad[r * cols + c];
    }
  });
  return y;
}

template <class T>
Tensor<T>& scale(Tape<T>& tape, Tensor<T>& x, T factor) {
  Buffer<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values[i] * factor;
  auto& y = tape.emit(x.shape, std::move(out), x.requires_grad);
  tape.record("scale", {&x}, y, [&x, &y, factor] {
    x.ensure_grad();
    for (std::size_t i = 0; i < y.grad.size(); ++i) x.grad[i] += y.grad[i] * factor;
  });
  return y;
}

template <class T>
Tensor<T>& relu(Tape<T>& tape, Tensor<T>& x) {
  Buffer<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values[i] > T(0) ? x.values[i] : T(0);
  auto& y = tape.emit(x.shape, std::move(out), x.requires_grad);
  tape.record("relu", {&x}, y, [&x, &y] {
    x.ensure_grad();
    for (std::size_t i = 0; i < y.grad.size(); ++i)
      if (x.values[i] > T(0)) x.grad[i] += y.grad[i];
  });
  return y;
}

template <class T>
Tensor<T>& sigmoid(Tape<T>& tape, Tensor<T>& x) {
  Buffer<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.values[i];
    // Evaluate on the branch that cannot overflow exp().
    if (v >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  auto& y = tape.emit(x.shape, std::move(out), x.requires_grad);
  tape.record("sigmoid", {&x}, y, [&x, &y] {
    x.ensure_grad();
    for (std::size_t i = 0; i < y.grad.size(); ++i) {
      const T s = y.values[i];
      x.grad[i] += y.grad[i] * s * (T(1) - s);
    }
  });
  return y;
}

template <class T>
Tensor<T>& clamp(Tape<T>& tape, Tensor<T>& x, T lo, T hi) {
  Buffer<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x.values[i], lo, hi);
  auto& y = tape.emit(x.shape, std::move(out), x.requires_grad);
  tape.record("clamp", {&x}, y, [&x, &y, lo, hi] {
    x.ensure_grad();
    for (std::size_t i = 0; i < y.grad.size(); ++i)
      if (x.values[i] >= lo && x.values[i] <= hi) x.grad[i] += y.grad[i];
  });
  return y;
}

template <class T>
Tensor<T>& softmax_lastdim(Tape<T>& tape, Tensor<T>& x) {
  const std::size_t cols = x.cols(), rows = x.rows();
  if (cols == 0) throw ContractViolation("softmax_lastdim: last dimension is empty");
  Buffer<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.values.data() + r * cols;
    T* o = out.data() + r * cols;
    const T mx = *std::max_element(in, in + cols);
    T z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  auto& y = tape.emit(x.shape, std::move(out), x.requires_grad);
  tape.record("softmax_lastdim", {&x}, y, [&x, &y, rows, cols] {
    x.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* p = y.values.data() + r * cols;
      const T* dp = y.grad.data() + r * cols;
      T dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += p[c] * dp[c];
      for (std::size_t c = 0; c < cols; ++c) x.grad[r * cols + c] += p[c] * (dp[c] - dot);
    }
  });
  return y;
}

template <class T>
Tensor<T>& layer_norm(Tape<T>& tape, Tensor<T>& x, Tensor<T>& gain, Tensor<T>& bias, T eps) {
  const std::size_t cols = x.cols(), rows = x.rows();
  if (gain.numel() != cols || bias.numel() != cols) {
    throw DimensionError("layer_norm: gain " + shape_string(gain.shape) + " / bias " + shape_string(bias.shape) +
                         " do not match last dimension of " + shape_string(x.shape));
  }
  Buffer<T> out(x.numel()), xhat(x.numel()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.values.data() + r * cols;
    T mean = 0;
    for (std::size_t c = 0; c < cols; ++c) mean += in[c];
    mean /= T(cols);
    T var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= T(cols);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      xhat[i] = (in[c] - mean) * rstd[r];
      out[i] = xhat[i] * gain.values[c] + bias.values[c];
    }
  }
  auto& y = tape.emit(x.shape, std::move(out), x.requires_grad || gain.requires_grad || bias.requires_grad);
  tape.record("layer_norm", {&x, &gain, &bias}, y,
              [&x, &gain, &bias, &y, rows, cols, xhat = std::move(xhat), rstd = std::move(rstd)] {
                if (gain.requires_grad) gain.ensure_grad();
                if (bias.requires_grad) bias.ensure_grad();
                if (x.requires_grad) x.ensure_grad();
                Buffer<T> dxhat(cols);
                for (std::size_t r = 0; r < rows; ++r) {
                  T mean_d = 0, mean_dx = 0;
                  for (std::size_t c = 0; c < cols; ++c) {
                    const std::size_t i = r * cols + c;
                    const T dy = y.grad[i];
                    if (gain.requires_grad) gain.grad[c] += dy * xhat[i];
                    if (bias.requires_grad) bias.grad[c] += dy;
                    dxhat[c] = dy * gain.values[c];
                    mean_d += dxhat[c];
                    mean_dx += dxhat[c] * xhat[i];
                  }
                  if (!x.requires_grad) continue;
                  mean_d /= T(cols);
                  mean_dx /= T(cols);
                  for (std::size_t c = 0; c < cols; ++c) {
                    const std::size_t i = r * cols + c;
                    x.grad[i] += rstd[r] * (dxhat[c] - mean_d - xhat[i] * mean_dx);
                  }
                }
              });
  return y;
}

template <class T>
Tensor<T>& dropout(Tape<T>& tape, Tensor<T>& x, double rate, std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) throw ContractViolation("dropout: rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  std::mt19937_64 rng(splitmix64(seed));
  std::bernoulli_distribution keep(1.0 - rate);
  const T inv = T(1) / T(1.0 - rate);
  Buffer<T> mask(x.numel()), out(x.numel());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = keep(rng) ? inv : T(0);
    out[i] = x.values[i] * mask[i];
  }
  auto& y = tape.emit(x.shape, std::move(out), x.requires_grad);
  tape.record("dropout", {&x}, y, [&x, &y, mask = std::move(mask)] {
    x.ensure_grad();
    for (std::size_t i = 0; i < y.grad.size(); ++i) x.grad[i] += y.grad[i] * mask[i];
  });
  return y;
}

template <class T>
Tensor<T>& causal_attention(Tape<T>& tape, Tensor<T>& qkv, std::span<const Segment> segments,
                            std::size_t num_heads, std::vector<AttentionWeights>* capture) {
  require_rank2(qkv.shape, "causal_attention");
  const std::size_t n = qkv.shape[0], width = qkv.shape[1];
  if (num_heads == 0 || width % (3 * num_heads) != 0) {
    throw DimensionError("causal_attention: width of " + shape_string(qkv.shape) + " is not 3 x heads(" +
                         std::to_string(num_heads) + ") x head_dim");
  }
  const std::size_t dim = width / 3, hd = dim / num_heads;
  for (const auto& seg : segments) {
    if (seg.length == 0 || seg.offset + seg.length > n) {
      throw ContractViolation("causal_attention: segment out of range");
    }
  }
  const T inv_sqrt = T(1) / std::sqrt(T(hd));

  // probs[s][h] holds a dense length x length lower-triangular matrix.
  std::vector<Buffer<T>> probs(segments.size() * num_heads);
  Buffer<T> out(n * dim, T(0));
  Buffer<T> scores;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto [off, len] = segments[s];
    for (std::size_t h = 0; h < num_heads; ++h) {
      auto& p = probs[s * num_heads + h];
      p.assign(len * len, T(0));
      scores.resize(len);
      for (std::size_t i = 0; i < len; ++i) {
        const T* q = qkv.values.data() + (off + i) * width + h * hd;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const T* k = qkv.values.data() + (off + j) * width + dim + h * hd;
          T acc = 0;
          for (std::size_t c = 0; c < hd; ++c) acc += q[c] * k[c];
          scores[j] = acc * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        T z = 0;
        for (std::size_t j = 0; j <= i; ++j) z += (scores[j] = std::exp(scores[j] - mx));
        T* o = out.data() + (off + i) * dim + h * hd;
        for (std::size_t j = 0; j <= i; ++j) {
          const T pij = scores[j] / z;
          p[i * len + j] = pij;
          const T* v = qkv.values.data() + (off + j) * width + 2 * dim + h * hd;
          for (std::size_t c = 0; c < hd; ++c) o[c] += pij * v[c];
        }
      }
      if (capture) {
        capture->push_back(AttentionWeights{s, h, len, std::vector<double>(p.begin(), p.end())});
      }
    }
  }

  auto& y = tape.emit({n, dim}, std::move(out), qkv.requires_grad);
  std::vector<Segment> segs(segments.begin(), segments.end());
  tape.record("causal_attention", {&qkv}, y,
              [&qkv, &y, segs = std::move(segs), probs = std::move(probs), num_heads, width, dim, hd, inv_sqrt] {
                qkv.ensure_grad();
                Buffer<T> dp;
                for (std::size_t s = 0; s < segs.size(); ++s) {
                  const auto [off, len] = segs[s];
                  for (std::size_t h = 0; h < num_heads; ++h) {
                    const auto& p = probs[s * num_heads + h];
                    dp.resize(len);
                    for (std::size_t i = 0; i < len; ++i) {
                      const T* dout = y.grad.data() + (off + i) * dim + h * hd;
                      T dot = 0;
                      for (std::size_t j = 0; j <= i; ++j) {
                        const T* v = qkv.values.data() + (off + j) * width + 2 * dim + h * hd;
                        T* dv = qkv.grad.data() + (off + j) * width + 2 * dim + h * hd;
                        const T pij = p[i * len + j];
                        T acc = 0;
                        for (std::size_t c = 0; c < hd; ++c) {
                          acc += dout[c] * v[c];
                          dv[c] += pij * dout[c];
                        }
                        dp[j] = acc;
                        dot += pij * acc;
                      }
                      const T* q = qkv.values.data() + (off + i) * width + h * hd;
                      T* dq = qkv.grad.data() + (off + i) * width + h * hd;
                      for (std::size_t j = 0; j <= i; ++j) {
                        const T ds = p[i * len + j] * (dp[j] - dot) * inv_sqrt;
                        if (ds == T(0)) continue;
                        const T* k = qkv.values.data() + (off + j) * width + dim + h * hd;
                        T* dk = qkv.grad.data() + (off + j) * width + dim + h * hd;
                        for (std::size_t c = 0; c < hd; ++c) {
                          dq[c] += ds * k[c];
                          dk[c] += ds * q[c];
                        }
                      }
                    }
                  }
                }
              });
  return y;
}

template <class T>
Tensor<T>& gather_rows(Tape<T>& tape, Tensor<T>& x, std::span<const std::size_t> indices) {
  const std::size_t cols = x.cols(), rows = x.rows();
  Buffer<T> out(indices.size() * cols);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) {
      throw DimensionError("gather_rows: row " + std::to_string(indices[i]) + " out of range for " +
                           shape_string(x.shape));
    }
    std::copy_n(x.values.data() + indices[i] * cols, cols, out.data() + i * cols);
  }
  auto& y = tape.emit({indices.size(), cols}, std::move(out), x.requires_grad);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  tape.record("gather_rows", {&x}, y, [&x, &y, idx = std::move(idx), cols] {
    x.ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < cols; ++c) x.grad[idx[i] * cols + c] += y.grad[i * cols + c];
  });
  return y;
}

template <class T>
Tensor<T>& concat_rows(Tape<T>& tape, std::span<Tensor<T>* const> parts) {
  if (parts.empty()) throw ContractViolation("concat_rows: nothing to concatenate");
  const std::size_t cols = parts.front()->cols();
  std::size_t rows = 0;
  bool rg = false;
  for (const Tensor<T>* p : parts) {
    if (p->cols() != cols) {
      throw DimensionError("concat_rows: " + shape_string(p->shape) + " does not have " + std::to_string(cols) +
                           " columns");
    }
    rows += p->rows();
    rg = rg || p->requires_grad;
  }
  Buffer<T> out;
  out.reserve(rows * cols);
  for (const Tensor<T>* p : parts) out.insert(out.end(), p->values.begin(), p->values.end());
  auto& y = tape.emit({rows, cols}, std::move(out), rg);
  std::vector<Tensor<T>*> inputs(parts.begin(), parts.end());
  tape.record("concat_rows", inputs, y, [inputs, &y] {
    std::size_t at = 0;
    for (Tensor<T>* p : inputs) {
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::size_t i = 0; i < p->numel(); ++i) p->grad[i] += y.grad[at + i];
      }
      at += p->numel();
    }
  });
  return y;
}

template <class T>
Tensor<T>& sum(Tape<T>& tape, Tensor<T>& x) {
  T acc = 0;
  for (T v : x.values) acc += v;
  auto& y = tape.emit({}, Buffer<T>{acc}, x.requires_grad);
  tape.record("sum", {&x}, y, [&x, &y] {
    x.ensure_grad();
    for (auto& g : x.grad) g += y.grad[0];
  });
  return y;
}

template <class T>
Tensor<T>& weighted_sum(Tape<T>& tape, std::span<Tensor<T>* const> scalars, std::span<const T> weights) {
  if (scalars.size() != weights.size()) throw ContractViolation("weighted_sum: one weight per scalar required");
  T acc = 0;
  bool rg = false;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i]->numel() != 1) throw DimensionError("weighted_sum: " + shape_string(scalars[i]->shape) + " is not a scalar");
    acc += weights[i] * scalars[i]->values[0];
    rg = rg || scalars[i]->requires_grad;
  }
  auto& y = tape.emit({}, Buffer<T>{acc}, rg);
  std::vector<Tensor<T>*> inputs(scalars.begin(), scalars.end());
  Buffer<T> w(weights.begin(), weights.end());
  tape.record("weighted_sum", inputs, y, [inputs, w = std::move(w), &y] {
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (!inputs[i]->requires_grad) continue;
      inputs[i]->ensure_grad();
      inputs[i]->grad[0] += w[i] * y.grad[0];
    }
  });
  return y;
}

#define MODT_INSTANTIATE_OPS(T)                                                                              \
  template Tensor<T>& matmul(Tape<T>&, Tensor<T>&, Tensor<T>&);                                             \
  template Tensor<T>& affine(Tape<T>&, Tensor<T>&, Tensor<T>&, Tensor<T>*);                                 \
  template Tensor<T>& add(Tape<T>&, Tensor<T>&, Tensor<T>&);                                                \
  template Tensor<T>& mul(Tape<T>&, Tensor<T>&, Tensor<T>&);                                                \
  template Tensor<T>& add_row_vector(Tape<T>&, Tensor<T>&, Tensor<T>&);                                     \
  template Tensor<T>& scale(Tape<T>&, Tensor<T>&, T);                                                       \
  template Tensor<T>& relu(Tape<T>&, Tensor<T>&);                                                           \
  template Tensor<T>& sigmoid(Tape<T>&, Tensor<T>&);                                                        \
  template Tensor<T>& clamp(Tape<T>&, Tensor<T>&, T, T);                                                    \
  template Tensor<T>& softmax_lastdim(Tape<T>&, Tensor<T>&);                                                \
  template Tensor<T>& layer_norm(Tape<T>&, Tensor<T>&, Tensor<T>&, Tensor<T>&, T);                          \
  template Tensor<T>& dropout(Tape<T>&, Tensor<T>&, double, std::uint64_t);                                 \
  template Tensor<T>& causal_attention(Tape<T>&, Tensor<T>&, std::span<const Segment>, std::size_t,         \
                                       std::vector<AttentionWeights>*);                                     \
  template Tensor<T>& gather_rows(Tape<T>&, Tensor<T>&, std::span<const std::size_t>);                      \
  template Tensor<T>& concat_rows(Tape<T>&, std::span<Tensor<T>* const>);                                   \
  template Tensor<T>& sum(Tape<T>&, Tensor<T>&);                                                            \
  template Tensor<T>& weighted_sum(Tape<T>&, std::span<Tensor<T>* const>, std::span<const T>);

MODT_INSTANTIATE_OPS(float)
MODT_INSTANTIATE_OPS(double)

}  // namespace modt::diff
