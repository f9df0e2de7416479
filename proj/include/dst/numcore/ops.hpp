#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dst/numcore/errors.hpp"
#include "dst/numcore/kernels.hpp"
#include "dst/numcore/tape.hpp"
#include "dst/numcore/tensor.hpp"

namespace dst::num {

/// A run of rows belonging to one sequence inside a stacked matrix. Rows in
/// [offset + valid, offset + rows) are padding.
struct Segment {
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t valid = 0;
};

namespace detail {

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw DimensionError("matmul: cannot multiply " + shape_str(av.shape()) + " by " +
                         shape_str(bv.shape()));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out = Tensor::matrix(m, n);
  kernels::gemm(m, k, n, av.data(), k, bv.data(), n, out.data(), n, false);
  const NodeId ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), {ia, ib},
      [ia, ib, m, k, n](const Tape& t, const Tensor& g, std::span<Tensor* const> gin) {
        if (gin[0]) {
          const Tensor bt = transpose(t.value(ib));
          kernels::gemm(m, n, k, g.data(), n, bt.data(), k, gin[0]->data(), k, true);
        }
        if (gin[1]) {
          const Tensor at = transpose(t.value(ia));
          kernels::gemm(k, m, n, at.data(), m, g.data(), n, gin[1]->data(), n, true);
        }
      });
}

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape().record(std::move(out), {a.id(), b.id()},
                         [](const Tape&, const Tensor& g, std::span<Tensor* const> gin) {
                           for (Tensor* gi : gin) {
                             if (!gi) continue;
                             for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
                           }
                         });
}

inline Var hadamard(const Var& a, const Var& b) {
  detail::require_same_shape(a.value(), b.value(), "hadamard");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const NodeId ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib},
                         [ia, ib](const Tape& t, const Tensor& g, std::span<Tensor* const> gin) {
                           const Tensor& av = t.value(ia);
                           const Tensor& bv = t.value(ib);
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             if (gin[0]) (*gin[0])[i] += g[i] * bv[i];
                             if (gin[1]) (*gin[1])[i] += g[i] * av[i];
                           }
                         });
}

// x[m x n] + bias[n] broadcast over rows.
inline Var add_bias(const Var& x, const Var& bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  detail::require_matrix(xv, "add_bias");
  if (bv.size() != xv.cols()) {
    throw DimensionError("add_bias: bias " + shape_str(bv.shape()) + " does not match " +
                         shape_str(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t m = xv.rows(), n = xv.cols();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out(r, c) += bv[c];
  return x.tape().record(std::move(out), {x.id(), bias.id()},
                         [m, n](const Tape&, const Tensor& g, std::span<Tensor* const> gin) {
                           if (gin[0])
                             for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                           if (gin[1])
                             for (std::size_t r = 0; r < m; ++r)
                               for (std::size_t c = 0; c < n; ++c) (*gin[1])[c] += g[r * n + c];
                         });
}

inline Var scale(const Var& x, double factor) {
  Tensor out = x.value();
  for (double& v : out.values()) v *= factor;
  return x.tape().record(std::move(out), {x.id()},
                         [factor](const Tape&, const Tensor& g, std::span<Tensor* const> gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += factor * g[i];
                         });
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return x.tape().record(Tensor::scalar(s), {x.id()},
                         [](const Tape&, const Tensor& g, std::span<Tensor* const> gin) {
                           const double gs = g[0];
                           for (double& v : gin[0]->values()) v += gs;
                         });
}

namespace detail {

// Unary op whose derivative is expressed through its own output.
template <typename F, typename DF>
Var unary(const Var& x, F f, DF dfdy) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  Tape& tape = x.tape();
  const NodeId next = tape.size();
  return tape.record(std::move(out), {x.id()},
                     [next, dfdy](const Tape& t, const Tensor& g, std::span<Tensor* const> gin) {
                       const Tensor& y = t.value(next);
                       for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * dfdy(y[i]);
                     });
}

}  // namespace detail

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& x) {
  return detail::unary(x, sigmoid_scalar, [](double y) { return y * (1.0 - y); });
}

inline Var tanh_(const Var& x) {
  return detail::unary(x, [](double v) { return std::tanh(v); }, [](double y) { return 1.0 - y * y; });
}

inline Var relu(const Var& x) {
  return detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                       [](double y) { return y > 0.0 ? 1.0 : 0.0; });
}

inline void softmax_inplace(double* row, std::size_t n) {
  double mx = row[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, row[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    row[i] = std::exp(row[i] - mx);
    s += row[i];
  }
  const double inv = 1.0 / s;
  for (std::size_t i = 0; i < n; ++i) row[i] *= inv;
}

inline Var softmax_rows(const Var& x) {
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "softmax_rows");
  const std::size_t m = xv.rows(), n = xv.cols();
  if (n == 0) throw ContractError("softmax_rows: rows must have at least one column");
  Tensor out = xv;
  for (std::size_t r = 0; r < m; ++r) softmax_inplace(out.data() + r * n, n);
  Tape& tape = x.tape();
  const NodeId next = tape.size();
  return tape.record(std::move(out), {x.id()},
                     [next, m, n](const Tape& t, const Tensor& g, std::span<Tensor* const> gin) {
                       const Tensor& y = t.value(next);
                       for (std::size_t r = 0; r < m; ++r) {
                         const double* yr = y.data() + r * n;
                         const double* gr = g.data() + r * n;
                         const double d = kernels::dot(yr, gr, n);
                         double* out = gin[0]->data() + r * n;
                         for (std::size_t c = 0; c < n; ++c) out[c] += yr[c] * (gr[c] - d);
                       }
                     });
}

inline constexpr double kLayerNormEps = 1e-5;

inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = kLayerNormEps) {
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "layer_norm");
  const std::size_t m = xv.rows(), n = xv.cols();
  if (gain.value().size() != n || bias.value().size() != n) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.value().shape()) + "/" +
                         shape_str(bias.value().shape()) + " do not match " + shape_str(xv.shape()));
  }
  auto normalized = std::make_shared<Tensor>(xv.shape());
  auto rstd = std::make_shared<std::vector<double>>(m);
  Tensor out(xv.shape());
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < m; ++r) {
    const double* xr = xv.data() + r * n;
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += xr[c];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (xr[c] - mean) * rs;
      (*normalized)(r, c) = h;
      out(r, c) = gv[c] * h + bv[c];
    }
  }
  const NodeId ig = gain.id();
  return x.tape().record(
      std::move(out), {x.id(), gain.id(), bias.id()},
      [normalized, rstd, ig, m, n](const Tape& t, const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& gv = t.value(ig);
        const Tensor& h = *normalized;
        std::vector<double> dh(n);
        for (std::size_t r = 0; r < m; ++r) {
          const double* gr = g.data() + r * n;
          const double* hr = h.data() + r * n;
          if (gin[1])
            for (std::size_t c = 0; c < n; ++c) (*gin[1])[c] += gr[c] * hr[c];
          if (gin[2])
            for (std::size_t c = 0; c < n; ++c) (*gin[2])[c] += gr[c];
          if (!gin[0]) continue;
          double sum_dh = 0.0, sum_dh_h = 0.0;
          for (std::size_t c = 0; c < n; ++c) {
            dh[c] = gr[c] * gv[c];
            sum_dh += dh[c];
            sum_dh_h += dh[c] * hr[c];
          }
          const double k = (*rstd)[r] / static_cast<double>(n);
          double* out = gin[0]->data() + r * n;
          for (std::size_t c = 0; c < n; ++c)
            out[c] += k * (static_cast<double>(n) * dh[c] - sum_dh - hr[c] * sum_dh_h);
        }
      });
}

// Mean negative log-likelihood of the true class over the rows of logits.
inline Var cross_entropy(const Var& logits, std::span<const std::size_t> labels) {
  const Tensor& lv = logits.value();
  detail::require_matrix(lv, "cross_entropy");
  const std::size_t b = lv.rows(), c = lv.cols();
  if (labels.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(b) + " rows");
  }
  if (b == 0) throw ContractError("cross_entropy: empty batch");
  auto probs = std::make_shared<Tensor>(lv);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  double loss = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    if (lab[r] >= c) {
      throw IndexError("cross_entropy: label " + std::to_string(lab[r]) + " out of range for " +
                       std::to_string(c) + " classes");
    }
    const double* z = lv.data() + r * c;
    double mx = z[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - mx);
    const double lse = mx + std::log(s);
    loss += lse - z[lab[r]];
    for (std::size_t j = 0; j < c; ++j) (*probs)(r, j) = std::exp(z[j] - lse);
  }
  loss /= static_cast<double>(b);
  return logits.tape().record(
      Tensor::scalar(loss), {logits.id()},
      [probs, lab = std::move(lab), b, c](const Tape&, const Tensor& g, std::span<Tensor* const> gin) {
        const double k = g[0] / static_cast<double>(b);
        for (std::size_t r = 0; r < b; ++r)
          for (std::size_t j = 0; j < c; ++j)
            (*gin[0])(r, j) += k * ((*probs)(r, j) - (j == lab[r] ? 1.0 : 0.0));
      });
}

// Uniform double in [0, 1) from the top 53 bits of one engine draw.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Standard normal via Box-Muller; two engine draws per call.
inline double normal01(std::mt19937_64& rng) {
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// Uniform integer in [0, n).
inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
}

// Inverted dropout. Identity when rate is zero.
inline Var dropout(const Var& x, double rate, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  const double keep = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(x.value().size());
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = uniform01(rng) < rate ? 0.0 : keep;
    out[i] *= (*mask)[i];
  }
  return x.tape().record(std::move(out), {x.id()},
                         [mask](const Tape&, const Tensor& g, std::span<Tensor* const> gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * (*mask)[i];
                         });
}

inline Var slice_cols(const Var& x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "slice_cols");
  const std::size_t m = xv.rows(), n = xv.cols();
  if (begin + count > n) {
    throw DimensionError("slice_cols: columns [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of " + shape_str(xv.shape()));
  }
  Tensor out = Tensor::matrix(m, count);
  for (std::size_t r = 0; r < m; ++r)
    std::copy_n(xv.data() + r * n + begin, count, out.data() + r * count);
  return x.tape().record(std::move(out), {x.id()},
                         [m, n, begin, count](const Tape&, const Tensor& g, std::span<Tensor* const> gin) {
                           for (std::size_t r = 0; r < m; ++r)
                             kernels::axpy(1.0, g.data() + r * count, gin[0]->data() + r * n + begin, count);
                         });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: nothing to concatenate");
  const std::size_t m = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::vector<NodeId> ids;
  std::size_t total = 0;
  for (const Var& p : parts) {
    detail::require_matrix(p.value(), "concat_cols");
    if (p.value().rows() != m) {
      throw DimensionError("concat_cols: row counts differ (" + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()) + ")");
    }
    widths.push_back(p.value().cols());
    ids.push_back(p.id());
    total += widths.back();
  }
  Tensor out = Tensor::matrix(m, total);
  std::size_t at = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& pv = parts[i].value();
    for (std::size_t r = 0; r < m; ++r)
      std::copy_n(pv.data() + r * widths[i], widths[i], out.data() + r * total + at);
    at += widths[i];
  }
  return parts[0].tape().record(
      std::move(out), std::move(ids),
      [widths, m, total](const Tape&, const Tensor& g, std::span<Tensor* const> gin) {
        std::size_t at = 0;
        for (std::size_t i = 0; i < widths.size(); ++i) {
          if (gin[i])
            for (std::size_t r = 0; r < m; ++r)
              kernels::axpy(1.0, g.data() + r * total + at, gin[i]->data() + r * widths[i], widths[i]);
          at += widths[i];
        }
      });
}

// Mean over the valid rows of each segment: [total rows x n] -> [segments x n].
inline Var segment_mean(const Var& x, std::span<const Segment> segments) {
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "segment_mean");
  const std::size_t n = xv.cols();
  std::vector<Segment> segs(segments.begin(), segments.end());
  Tensor out = Tensor::matrix(segs.size(), n);
  for (std::size_t s = 0; s < segs.size(); ++s) {
    const Segment& sg = segs[s];
    if (sg.valid == 0 || sg.valid > sg.rows || sg.offset + sg.rows > xv.rows()) {
      throw ContractError("segment_mean: segment " + std::to_string(s) + " is empty or out of range");
    }
    const double inv = 1.0 / static_cast<double>(sg.valid);
    for (std::size_t r = 0; r < sg.valid; ++r)
      kernels::axpy(inv, xv.data() + (sg.offset + r) * n, out.data() + s * n, n);
  }
  return x.tape().record(std::move(out), {x.id()},
                         [segs = std::move(segs), n](const Tape&, const Tensor& g, std::span<Tensor* const> gin) {
                           for (std::size_t s = 0; s < segs.size(); ++s) {
                             const double inv = 1.0 / static_cast<double>(segs[s].valid);
                             for (std::size_t r = 0; r < segs[s].valid; ++r)
                               kernels::axpy(inv, g.data() + s * n, gin[0]->data() + (segs[s].offset + r) * n, n);
                           }
                         });
}

}  // namespace dst::num
