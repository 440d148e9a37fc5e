// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0

#include "tristream/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include <Eigen/Core>

#include "tristream/error.hpp"

namespace tristream {

namespace {

std::atomic<bool> g_fault_injection{false};

template <typename T>
using Node = TensorNode<T>;

void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2) {
    throw DimensionError(std::string(op) + " needs a matrix, got " +
                         shape_string(s));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

// c[m,n] += a[m,k] * b[k,n]
template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;

// c[m,n] += a[m,k] * b[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
             N = static_cast<Eigen::Index>(n);
  MapM<T>(c, M, N).noalias() += MapC<T>(a, M, K) * MapC<T>(b, K, N);
}

// a[m,k] += c[m,n] * b[k,n]^T
template <typename T>
void gemm_nt(const T* c, const T* b, T* a, std::size_t m, std::size_t k,
             std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
             N = static_cast<Eigen::Index>(n);
  MapM<T>(a, M, K).noalias() += MapC<T>(c, M, N) * MapC<T>(b, K, N).transpose();
}

// b[k,n] += a[m,k]^T * c[m,n]
template <typename T>
void gemm_tn(const T* a, const T* c, T* b, std::size_t m, std::size_t k,
             std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
             N = static_cast<Eigen::Index>(n);
  MapM<T>(b, K, N).noalias() += MapC<T>(a, M, K).transpose() * MapC<T>(c, M, N);
}

template <typename T>
void check_finite(std::span<const T> x, const char* op) {
  for (T v : x) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite input");
    }
  }
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace

AttentionMask::AttentionMask(std::size_t queries, std::size_t keys, bool fill)
    : queries_(queries), keys_(keys), bits_(queries * keys, fill ? 1 : 0) {}

AttentionMask AttentionMask::causal(std::size_t queries, std::size_t keys,
                                    std::size_t offset) {
  AttentionMask m(queries, keys);
  for (std::size_t i = 0; i < queries; ++i) {
    m.allow_range(i, 0, std::min(keys, offset + i + 1));
  }
  return m;
}

void AttentionMask::allow_range(std::size_t q, std::size_t begin,
                                std::size_t end) {
  for (std::size_t k = begin; k < end && k < keys_; ++k) set(q, k);
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a.shape(), "matmul");
  require_rank2(b.shape(), "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents disagree for " +
                         shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return Tensor<T>::from_op(
      {m, n}, std::move(out), "matmul", {a, b}, [m, k, n](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
          gemm_nt(self.grad.data(), pb.data.data(), pa.ensure_grad().data(), m,
                  k, n);
        }
        if (pb.requires_grad) {
          gemm_tn(pa.data.data(), self.grad.data(), pb.ensure_grad().data(), m,
                  k, n);
        }
      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return Tensor<T>::from_op(a.shape(), std::move(out), "add", {a, b},
                            [](Node<T>& self) {
                              for (auto& p : self.parents) {
                                if (!p->requires_grad) continue;
                                auto& g = p->ensure_grad();
                                for (std::size_t i = 0; i < g.size(); ++i)
                                  g[i] += self.grad[i];
                              }
                            });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  return Tensor<T>::from_op(a.shape(), std::move(out), "sub", {a, b},
                            [](Node<T>& self) {
                              const T sign[2] = {T(1), T(-1)};
                              for (std::size_t k = 0; k < 2; ++k) {
                                auto& p = *self.parents[k];
                                if (!p.requires_grad) continue;
                                auto& g = p.ensure_grad();
                                for (std::size_t i = 0; i < g.size(); ++i)
                                  g[i] += sign[k] * self.grad[i];
                              }
                            });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return Tensor<T>::from_op(
      a.shape(), std::move(out), "mul", {a, b}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
          auto& g = pa.ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
          auto& g = pb.ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * pa.data[i];
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * factor;
  return Tensor<T>::from_op(a.shape(), std::move(out), "scale", {a},
                            [factor](Node<T>& self) {
                              auto& g = self.parents[0]->ensure_grad();
                              for (std::size_t i = 0; i < g.size(); ++i)
                                g[i] += factor * self.grad[i];
                            });
}

template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& bias) {
  require_rank2(a.shape(), "add_row");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (bias.size() != n) {
    throw DimensionError("add_row: bias " + shape_string(bias.shape()) +
                         " does not match " + shape_string(a.shape()));
  }
  std::vector<T> out(a.values());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.at(j);
  return Tensor<T>::from_op(
      a.shape(), std::move(out), "add_row", {a, bias},
      [m, n](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
          auto& g = pa.ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb.requires_grad) {
          auto& g = pb.ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
        }
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = x.at(i) > T(0) ? x.at(i) : T(0);
  return Tensor<T>::from_op(x.shape(), std::move(out), "relu", {x},
                            [](Node<T>& self) {
                              auto& p = *self.parents[0];
                              auto& g = p.ensure_grad();
                              for (std::size_t i = 0; i < g.size(); ++i)
                                if (p.data[i] > T(0)) g[i] += self.grad[i];
                            });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = x.at(i) * sigmoid(x.at(i));
  return Tensor<T>::from_op(
      x.shape(), std::move(out), "silu", {x}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        auto& g = p.ensure_grad();
        const bool broken = g_fault_injection.load();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T xv = p.data[i];
          const T s = sigmoid(xv);
          const T d = broken ? s : s * (T(1) + xv * (T(1) - s));
          g[i] += self.grad[i] * d;
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T a = T(0.044715);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.at(i);
    out[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + a * v * v * v)));
  }
  return Tensor<T>::from_op(
      x.shape(), std::move(out), "gelu", {x}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T v = p.data[i];
          const T t = std::tanh(c * (v + a * v * v * v));
          const T d = T(0.5) * (T(1) + t) +
                      T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3) * a * v * v);
          g[i] += self.grad[i] * d;
        }
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) +
                         " out of range for " + shape_string(x.shape()));
  }
  check_finite<T>(x.data(), "softmax");
  const auto& s = x.shape();
  const std::size_t n = s[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * n * inner + j;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x.at(base + i * inner));
      T total = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T e = std::exp(x.at(base + i * inner) - mx);
        out[base + i * inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= total;
    }
  }
  return Tensor<T>::from_op(
      s, std::move(out), "softmax", {x},
      [outer, inner, n](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        const auto& y = self.data;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t j = 0; j < inner; ++j) {
            const std::size_t base = o * n * inner + j;
            T dot = 0;
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t idx = base + i * inner;
              dot += self.grad[idx] * y[idx];
            }
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t idx = base + i * inner;
              g[idx] += y[idx] * (self.grad[idx] - dot);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& x) {
  require_rank2(x.shape(), "log_softmax_rows");
  check_finite<T>(x.data(), "log_softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x.data().data() + i * n;
    const T mx = *std::max_element(row, row + n);
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(row[j] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j] - lse;
  }
  return Tensor<T>::from_op(
      x.shape(), std::move(out), "log_softmax", {x}, [m, n](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
          T total = 0;
          for (std::size_t j = 0; j < n; ++j) total += self.grad[i * n + j];
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = i * n + j;
            g[idx] += self.grad[idx] - std::exp(self.data[idx]) * total;
          }
        }
      });
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& scale, T eps) {
  require_rank2(x.shape(), "rms_norm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (scale.size() != n) {
    throw DimensionError("rms_norm: scale " + shape_string(scale.shape()) +
                         " does not match " + shape_string(x.shape()));
  }
  std::vector<T> out(x.size());
  std::vector<T> inv_rms(m);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x.data().data() + i * n;
    T ss = 0;
    for (std::size_t j = 0; j < n; ++j) ss += row[j] * row[j];
    const T r = T(1) / std::sqrt(ss / T(n) + eps);
    inv_rms[i] = r;
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = row[j] * r * scale.at(j);
  }
  return Tensor<T>::from_op(
      x.shape(), std::move(out), "rms_norm", {x, scale},
      [m, n, inv_rms = std::move(inv_rms)](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& ps = *self.parents[1];
        for (std::size_t i = 0; i < m; ++i) {
          const T r = inv_rms[i];
          const T* xr = px.data.data() + i * n;
          const T* gy = self.grad.data() + i * n;
          if (ps.requires_grad) {
            auto& gs = ps.ensure_grad();
            for (std::size_t j = 0; j < n; ++j) gs[j] += gy[j] * xr[j] * r;
          }
          if (px.requires_grad) {
            auto& gx = px.ensure_grad();
            T dot = 0;  // sum_j dxhat_j * xhat_j
            for (std::size_t j = 0; j < n; ++j)
              dot += gy[j] * ps.data[j] * xr[j] * r;
            const T mean_dot = dot / T(n);
            for (std::size_t j = 0; j < n; ++j) {
              const T dxhat = gy[j] * ps.data[j];
              gx[i * n + j] += r * (dxhat - xr[j] * r * mean_dot);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int64_t> ids) {
  require_rank2(table.shape(), "embedding");
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) +
                           " outside table of " + std::to_string(v) + " rows");
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
    std::copy_n(table.data().data() + rows[i] * d, d, out.data() + i * d);
  }
  return Tensor<T>::from_op(
      {ids.size(), d}, std::move(out), "embedding", {table},
      [d, rows = std::move(rows)](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < rows.size(); ++i)
          for (std::size_t j = 0; j < d; ++j)
            g[rows[i] * d + j] += self.grad[i * d + j];
      });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  require_rank2(x.shape(), "gather_rows");
  const std::size_t m = x.dim(0), d = x.dim(1);
  std::vector<T> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[i]) +
                           " outside " + shape_string(x.shape()));
    }
    std::copy_n(x.data().data() + rows[i] * d, d, out.data() + i * d);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return Tensor<T>::from_op(
      {rows.size(), d}, std::move(out), "gather_rows", {x},
      [d, idx = std::move(idx)](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t j = 0; j < d; ++j)
            g[idx[i] * d + j] += self.grad[i * d + j];
      });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_rank2(x.shape(), "slice_rows");
  const std::size_t d = x.dim(1);
  if (begin > end || end > x.dim(0)) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") outside " +
                         shape_string(x.shape()));
  }
  std::vector<T> out(x.data().begin() + begin * d, x.data().begin() + end * d);
  return Tensor<T>::from_op(
      {end - begin, d}, std::move(out), "slice_rows", {x},
      [begin, d](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          g[begin * d + i] += self.grad[i];
      });
}

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t d = parts[0].dim(1);
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank2(p.shape(), "concat_rows");
    if (p.dim(1) != d) {
      throw DimensionError("concat_rows: column mismatch " +
                           shape_string(parts[0].shape()) + " vs " +
                           shape_string(p.shape()));
    }
    total += p.dim(0);
  }
  std::vector<T> out;
  out.reserve(total * d);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  std::vector<Tensor<T>> parents(parts.begin(), parts.end());
  return Tensor<T>::from_op(
      {total, d}, std::move(out), "concat_rows", std::move(parents),
      [offsets = std::move(offsets)](Node<T>& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
          auto& p = *self.parents[k];
          if (!p.requires_grad || p.data.empty()) continue;
          auto& g = p.ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[offsets[k] + i];
        }
      });
}

template <typename T>
Tensor<T> rope(const Tensor<T>& x, std::span<const std::size_t> positions,
               std::size_t n_heads, T base) {
  require_rank2(x.shape(), "rope");
  const std::size_t t = x.dim(0), d = x.dim(1);
  if (positions.size() != t || n_heads == 0 || d % n_heads != 0 ||
      (d / n_heads) % 2 != 0) {
    throw DimensionError("rope: incompatible positions/heads for " +
                         shape_string(x.shape()));
  }
  const std::size_t hd = d / n_heads, half = hd / 2;
  std::vector<T> cosv(t * half), sinv(t * half);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < half; ++j) {
      const T freq = std::pow(base, -T(2 * j) / T(hd));
      const T angle = T(positions[i]) * freq;
      cosv[i * half + j] = std::cos(angle);
      sinv[i * half + j] = std::sin(angle);
    }
  }
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t off = i * d + h * hd;
      for (std::size_t j = 0; j < half; ++j) {
        const T c = cosv[i * half + j], s = sinv[i * half + j];
        const T x0 = x.at(off + 2 * j), x1 = x.at(off + 2 * j + 1);
        out[off + 2 * j] = x0 * c - x1 * s;
        out[off + 2 * j + 1] = x0 * s + x1 * c;
      }
    }
  }
  return Tensor<T>::from_op(
      x.shape(), std::move(out), "rope", {x},
      [t, d, hd, half, n_heads, cosv = std::move(cosv),
       sinv = std::move(sinv)](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < t; ++i) {
          for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t off = i * d + h * hd;
            for (std::size_t j = 0; j < half; ++j) {
              const T c = cosv[i * half + j], s = sinv[i * half + j];
              const T g0 = self.grad[off + 2 * j], g1 = self.grad[off + 2 * j + 1];
              g[off + 2 * j] += g0 * c + g1 * s;
              g[off + 2 * j + 1] += -g0 * s + g1 * c;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> masked_attention(const Tensor<T>& q, const Tensor<T>& k,
                           const Tensor<T>& v, const AttentionMask& mask,
                           std::size_t n_heads) {
  require_rank2(q.shape(), "masked_attention");
  require_rank2(k.shape(), "masked_attention");
  require_rank2(v.shape(), "masked_attention");
  const std::size_t tq = q.dim(0), tk = k.dim(0), d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d || v.dim(0) != tk || n_heads == 0 ||
      d % n_heads != 0) {
    throw DimensionError("masked_attention: incompatible q " +
                         shape_string(q.shape()) + ", k " +
                         shape_string(k.shape()) + ", v " +
                         shape_string(v.shape()));
  }
  if (mask.queries() != tq || mask.keys() != tk) {
    throw DimensionError("masked_attention: mask is " +
                         std::to_string(mask.queries()) + "x" +
                         std::to_string(mask.keys()) + " but scores are " +
                         std::to_string(tq) + "x" + std::to_string(tk));
  }
  for (std::size_t i = 0; i < tq; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < tk && !any; ++j) any = mask.allowed(i, j);
    if (!any) {
      throw ConfigError("masked_attention: query row " + std::to_string(i) +
                        " has no allowed key");
    }
  }
  const std::size_t hd = d / n_heads;
  const T sc = T(1) / std::sqrt(T(hd));
  const T* qd = q.data().data();
  const T* kd = k.data().data();
  const T* vd = v.data().data();
  std::vector<T> probs(n_heads * tq * tk, T(0));
  std::vector<T> out(tq * d, T(0));
  for (std::size_t h = 0; h < n_heads; ++h) {
    for (std::size_t i = 0; i < tq; ++i) {
      T* p = probs.data() + (h * tq + i) * tk;
      const T* qi = qd + i * d + h * hd;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < tk; ++j) {
        if (!mask.allowed(i, j)) continue;
        const T* kj = kd + j * d + h * hd;
        T s = 0;
        for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
        p[j] = s * sc;
        mx = std::max(mx, p[j]);
      }
      T total = 0;
      for (std::size_t j = 0; j < tk; ++j) {
        if (!mask.allowed(i, j)) continue;
        p[j] = std::exp(p[j] - mx);
        total += p[j];
      }
      T* oi = out.data() + i * d + h * hd;
      for (std::size_t j = 0; j < tk; ++j) {
        if (!mask.allowed(i, j)) continue;
        p[j] /= total;
        const T* vj = vd + j * d + h * hd;
        for (std::size_t c = 0; c < hd; ++c) oi[c] += p[j] * vj[c];
      }
    }
  }
  return Tensor<T>::from_op(
      {tq, d}, std::move(out), "masked_attention", {q, k, v},
      [tq, tk, d, hd, n_heads, sc, probs = std::move(probs)](Node<T>& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        T* gq = pq.requires_grad ? pq.ensure_grad().data() : nullptr;
        T* gk = pk.requires_grad ? pk.ensure_grad().data() : nullptr;
        T* gv = pv.requires_grad ? pv.ensure_grad().data() : nullptr;
        std::vector<T> dp(tk);
        for (std::size_t h = 0; h < n_heads; ++h) {
          for (std::size_t i = 0; i < tq; ++i) {
            const T* p = probs.data() + (h * tq + i) * tk;
            const T* go = self.grad.data() + i * d + h * hd;
            T dot = 0;
            for (std::size_t j = 0; j < tk; ++j) {
              dp[j] = 0;
              if (p[j] == T(0)) continue;
              const T* vj = pv.data.data() + j * d + h * hd;
              T s = 0;
              for (std::size_t c = 0; c < hd; ++c) s += go[c] * vj[c];
              dp[j] = s;
              dot += s * p[j];
              if (gv) {
                T* gvj = gv + j * d + h * hd;
                for (std::size_t c = 0; c < hd; ++c) gvj[c] += p[j] * go[c];
              }
            }
            const T* qi = pq.data.data() + i * d + h * hd;
            for (std::size_t j = 0; j < tk; ++j) {
              if (p[j] == T(0)) continue;
              const T ds = p[j] * (dp[j] - dot) * sc;
              const T* kj = pk.data.data() + j * d + h * hd;
              if (gq) {
                T* gqi = gq + i * d + h * hd;
                for (std::size_t c = 0; c < hd; ++c) gqi[c] += ds * kj[c];
              }
              if (gk) {
                T* gkj = gk + j * d + h * hd;
                for (std::size_t c = 0; c < hd; ++c) gkj[c] += ds * qi[c];
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits,
                        std::span<const std::int64_t> targets) {
  require_rank2(logits.shape(), "cross_entropy");
  const std::size_t m = logits.dim(0), n = logits.dim(1);
  if (targets.size() != m) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " +
                         shape_string(logits.shape()));
  }
  check_finite<T>(logits.data(), "cross_entropy");
  std::vector<T> probs(m * n);
  T loss = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = logits.data().data() + i * n;
    const T mx = *std::max_element(row, row + n);
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      probs[i * n + j] = std::exp(row[j] - mx);
      total += probs[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= total;
    if (targets[i] < 0) continue;
    if (static_cast<std::size_t>(targets[i]) >= n) {
      throw DimensionError("cross_entropy: target " +
                           std::to_string(targets[i]) + " outside " +
                           std::to_string(n) + " classes");
    }
    loss -= row[targets[i]] - mx - std::log(total);
    ++count;
  }
  const T denom = count ? T(count) : T(1);
  std::vector<std::int64_t> tg(targets.begin(), targets.end());
  return Tensor<T>::from_op(
      {}, {loss / denom}, "cross_entropy", {logits},
      [m, n, denom, probs = std::move(probs), tg = std::move(tg)](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        const T up = self.grad[0] / denom;
        for (std::size_t i = 0; i < m; ++i) {
          if (tg[i] < 0) continue;
          for (std::size_t j = 0; j < n; ++j)
            g[i * n + j] += up * probs[i * n + j];
          g[i * n + tg[i]] -= up;
        }
      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  return Tensor<T>::from_op({}, {total}, "sum", {x}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& gi : g) gi += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.size() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), T(1) / T(x.size()));
}

template <typename T>
Tensor<T> weighted_sum(std::span<const Tensor<T>> terms,
                       std::span<const T> weights) {
  if (terms.size() != weights.size()) {
    throw DimensionError("weighted_sum: term/weight count mismatch");
  }
  T total = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].size() != 1) {
      throw DimensionError("weighted_sum: non-scalar term " +
                           shape_string(terms[i].shape()));
    }
    total += weights[i] * terms[i].item();
  }
  std::vector<Tensor<T>> parents(terms.begin(), terms.end());
  std::vector<T> w(weights.begin(), weights.end());
  return Tensor<T>::from_op({}, {total}, "weighted_sum", std::move(parents),
                            [w = std::move(w)](Node<T>& self) {
                              for (std::size_t i = 0; i < w.size(); ++i) {
                                auto& p = *self.parents[i];
                                if (!p.requires_grad) continue;
                                p.ensure_grad()[0] += w[i] * self.grad[0];
                              }
                            });
}

namespace testing {
void set_fault_injection(bool enabled) { g_fault_injection = enabled; }
bool fault_injection() { return g_fault_injection.load(); }
}  // namespace testing

#define TRISTREAM_INSTANTIATE_OPS(T)                                          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> scale(const Tensor<T>&, T);                              \
  template Tensor<T> add_row(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> relu(const Tensor<T>&);                                  \
  template Tensor<T> silu(const Tensor<T>&);                                  \
  template Tensor<T> gelu(const Tensor<T>&);                                  \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                  \
  template Tensor<T> log_softmax_rows(const Tensor<T>&);                      \
  template Tensor<T> rms_norm(const Tensor<T>&, const Tensor<T>&, T);         \
  template Tensor<T> embedding(const Tensor<T>&,                              \
                               std::span<const std::int64_t>);                \
  template Tensor<T> gather_rows(const Tensor<T>&,                            \
                                 std::span<const std::size_t>);               \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);  \
  template Tensor<T> concat_rows(std::span<const Tensor<T>>);                 \
  template Tensor<T> rope(const Tensor<T>&, std::span<const std::size_t>,     \
                          std::size_t, T);                                    \
  template Tensor<T> masked_attention(const Tensor<T>&, const Tensor<T>&,     \
                                      const Tensor<T>&, const AttentionMask&, \
                                      std::size_t);                           \
  template Tensor<T> cross_entropy(const Tensor<T>&,                          \
                                   std::span<const std::int64_t>);            \
  template Tensor<T> sum(const Tensor<T>&);                                   \
  template Tensor<T> mean(const Tensor<T>&);                                  \
  template Tensor<T> weighted_sum(std::span<const Tensor<T>>,                 \
                                  std::span<const T>);

TRISTREAM_INSTANTIATE_OPS(float)
TRISTREAM_INSTANTIATE_OPS(double)

#undef TRISTREAM_INSTANTIATE_OPS

}  // namespace tristream
