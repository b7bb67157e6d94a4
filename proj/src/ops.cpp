#include "pop/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>

#include "pop/errors.hpp"

namespace pop {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMat = Eigen::Map<const RowMat>;
using MutMat = Eigen::Map<RowMat>;
using Strided = Eigen::OuterStride<>;
using ConstStridedMat = Eigen::Map<const RowMat, 0, Strided>;
using MutStridedMat = Eigen::Map<RowMat, 0, Strided>;

void check_finite(const Buffer& values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) throw OverflowError(std::string(op) + " produced a non-finite value");
  }
}

// Wraps a freshly computed result and records it when any input is tracked.
Tensor finish(Shape shape, Buffer out, const char* op, std::initializer_list<const Tensor*> inputs,
              GradientTape::BackwardFn fn) {
  check_finite(out, op);
  Tensor result(std::move(shape), std::move(out));
  GradientTape* tape = common_tape(inputs);
  if (!tape) return result;
  return tape->record(std::move(result), inputs, std::move(fn));
}

enum class Broadcast { kSame, kRow, kScalar };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.numel() == 1) return Broadcast::kScalar;
  if (b.rank() == 1 && b.numel() == a.cols()) return Broadcast::kRow;
  throw DimensionError(std::string(op) + ": cannot combine " + shape_str(a.shape()) + " with " +
                       shape_str(b.shape()));
}

std::size_t bcast_index(Broadcast kind, std::size_t i, std::size_t cols) {
  switch (kind) {
    case Broadcast::kSame:
      return i;
    case Broadcast::kRow:
      return i % cols;
    case Broadcast::kScalar:
      return 0;
  }
  return 0;
}

void require_increasing(std::span<const std::size_t> pos, const char* what) {
  for (std::size_t i = 1; i < pos.size(); ++i) {
    if (pos[i] <= pos[i - 1]) {
      throw ContractError(std::string("attention: ") + what + " positions must be strictly increasing");
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer out(m * n);
  MutMat(out.data(), m, n).noalias() = ConstMat(a.ptr(), m, k) * ConstMat(b.ptr(), k, n);
  return finish({m, n}, std::move(out), "matmul", {&a, &b},
                [a = a.detach(), b = b.detach(), m, k, n](std::span<const double> g,
                                                          std::span<Buffer* const> gin) {
                  ConstMat dc(g.data(), m, n);
                  if (gin[0]) {
                    MutMat(gin[0]->data(), m, k).noalias() += dc * ConstMat(b.ptr(), k, n).transpose();
                  }
                  if (gin[1]) {
                    MutMat(gin[1]->data(), k, n).noalias() += ConstMat(a.ptr(), m, k).transpose() * dc;
                  }
                });
}

namespace {

template <class Fwd, class GradA, class GradB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, GradA ga, GradB gb) {
  const Broadcast kind = broadcast_kind(a, b, op);
  const std::size_t n = a.numel(), cols = a.cols();
  Buffer out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(a[i], b[bcast_index(kind, i, cols)]);
  return finish(a.shape(), std::move(out), op, {&a, &b},
                [a = a.detach(), b = b.detach(), kind, n, cols, ga, gb](
                    std::span<const double> g, std::span<Buffer* const> gin) {
                  if (gin[0]) {
                    auto& da = *gin[0];
                    for (std::size_t i = 0; i < n; ++i) {
                      da[i] += g[i] * ga(a[i], b[bcast_index(kind, i, cols)]);
                    }
                  }
                  if (gin[1]) {
                    auto& db = *gin[1];
                    for (std::size_t i = 0; i < n; ++i) {
                      const std::size_t j = bcast_index(kind, i, cols);
                      db[j] += g[i] * gb(a[i], b[j]);
                    }
                  }
                });
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, const char* op, Fwd fwd, Deriv deriv) {
  const std::size_t n = a.numel();
  Buffer out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(a[i]);
  return finish(a.shape(), std::move(out), op, {&a},
                [a = a.detach(), n, deriv](std::span<const double> g, std::span<Buffer* const> gin) {
                  auto& da = *gin[0];
                  for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * deriv(a[i]);
                });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, "scale", [factor](double x) { return x * factor; }, [factor](double) { return factor; });
}

Tensor silu(const Tensor& a) {
  return unary(
      a, "silu", [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double x) {
        const double t = std::tanh(x);
        return 1.0 - t * t;
      });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const std::size_t n = a.numel();
  return finish({}, Buffer{s}, "sum", {&a}, [n](std::span<const double> g, std::span<Buffer* const> gin) {
    auto& da = *gin[0];
    for (std::size_t i = 0; i < n; ++i) da[i] += g[0];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  Tensor viewed = a.view(std::move(shape));
  GradientTape* tape = common_tape({&a});
  if (!tape) return viewed;
  return tape->record(std::move(viewed), {&a}, [](std::span<const double> g, std::span<Buffer* const> gin) {
    auto& da = *gin[0];
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  const std::size_t rows = a.rows(), cols = a.cols();
  if (count == 0 || begin + count > rows) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of " + shape_str(a.shape()));
  }
  Buffer out(a.data().begin() + begin * cols, a.data().begin() + (begin + count) * cols);
  Shape shape = a.shape();
  if (shape.size() <= 1) {
    shape = {count, cols};
  } else {
    // Rows span every dimension except the last; keep trailing dims when
    // slicing along the leading one.
    std::size_t inner = rows / shape[0];
    if (inner == 1) {
      shape[0] = count;
    } else if (begin % inner == 0 && count % inner == 0) {
      shape[0] = count / inner;
    } else {
      shape = {count, cols};
    }
  }
  return finish(std::move(shape), std::move(out), "slice_rows", {&a},
                [begin, cols](std::span<const double> g, std::span<Buffer* const> gin) {
                  auto& da = *gin[0];
                  for (std::size_t i = 0; i < g.size(); ++i) da[begin * cols + i] += g[i];
                });
}

Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps) {
  const std::size_t d = x.cols(), rows = x.rows();
  if (weight.numel() != d || weight.rank() != 1) {
    throw DimensionError("rmsnorm: weight " + shape_str(weight.shape()) + " does not match input " +
                         shape_str(x.shape()));
  }
  if (!(eps >= 0.0)) throw ConfigError("rmsnorm: eps must be nonnegative");
  Buffer out(x.numel());
  std::vector<double> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.ptr() + r * d;
    double ss = 0.0;
    for (std::size_t i = 0; i < d; ++i) ss += xr[i] * xr[i];
    inv[r] = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = xr[i] * inv[r] * weight[i];
  }
  return finish(x.shape(), std::move(out), "rmsnorm", {&x, &weight},
                [x = x.detach(), w = weight.detach(), inv = std::move(inv), d, rows](
                    std::span<const double> g, std::span<Buffer* const> gin) {
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* xr = x.ptr() + r * d;
                    const double* gr = g.data() + r * d;
                    const double s = inv[r];
                    if (gin[0]) {
                      double dot = 0.0;
                      for (std::size_t i = 0; i < d; ++i) dot += gr[i] * w[i] * xr[i];
                      const double c = s * s * s * dot / static_cast<double>(d);
                      double* dx = gin[0]->data() + r * d;
                      for (std::size_t i = 0; i < d; ++i) dx[i] += s * w[i] * gr[i] - c * xr[i];
                    }
                    if (gin[1]) {
                      auto& dw = *gin[1];
                      for (std::size_t i = 0; i < d; ++i) dw[i] += gr[i] * xr[i] * s;
                    }
                  }
                });
}

Tensor softmax_rows(const Tensor& x) {
  const std::size_t n = x.cols(), rows = x.rows();
  Buffer out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.ptr() + r * n;
    double* yr = out.data() + r * n;
    const double m = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += (yr[i] = std::exp(xr[i] - m));
    for (std::size_t i = 0; i < n; ++i) yr[i] /= z;
  }
  Tensor probs = Tensor(x.shape(), out);
  return finish(x.shape(), std::move(out), "softmax_rows", {&x},
                [probs, n, rows](std::span<const double> g, std::span<Buffer* const> gin) {
                  auto& dx = *gin[0];
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* y = probs.ptr() + r * n;
                    const double* gr = g.data() + r * n;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < n; ++i) dot += gr[i] * y[i];
                    for (std::size_t i = 0; i < n; ++i) dx[r * n + i] += y[i] * (gr[i] - dot);
                  }
                });
}

Tensor rope_apply(const Tensor& x, std::span<const std::size_t> positions, double theta_base,
                  bool inverse) {
  if (x.rank() != 3) throw DimensionError("rope_apply: expected [T x heads x head_dim], got " + shape_str(x.shape()));
  const std::size_t t = x.dim(0), heads = x.dim(1), dh = x.dim(2);
  if (dh % 2 != 0) throw ConfigError("rope_apply: head_dim must be even, got " + std::to_string(dh));
  if (positions.size() != t) {
    throw DimensionError("rope_apply: " + std::to_string(positions.size()) + " positions for " +
                         std::to_string(t) + " rows");
  }
  const std::size_t half = dh / 2;
  std::vector<double> cs(t * half), sn(t * half);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(theta_base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
    for (std::size_t p = 0; p < t; ++p) {
      const double angle = static_cast<double>(positions[p]) * freq;
      cs[p * half + i] = std::cos(angle);
      sn[p * half + i] = inverse ? -std::sin(angle) : std::sin(angle);
    }
  }
  auto rotate = [=](const double* src, double* dst, const std::vector<double>& c,
                    const std::vector<double>& s, double sign, bool accumulate) {
    for (std::size_t p = 0; p < t; ++p) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t base = (p * heads + h) * dh;
        for (std::size_t i = 0; i < half; ++i) {
          const double cv = c[p * half + i], sv = sign * s[p * half + i];
          const double a = src[base + 2 * i], b = src[base + 2 * i + 1];
          const double r0 = a * cv - b * sv, r1 = a * sv + b * cv;
          if (accumulate) {
            dst[base + 2 * i] += r0;
            dst[base + 2 * i + 1] += r1;
          } else {
            dst[base + 2 * i] = r0;
            dst[base + 2 * i + 1] = r1;
          }
        }
      }
    }
  };
  Buffer out(x.numel());
  rotate(x.ptr(), out.data(), cs, sn, 1.0, false);
  return finish(x.shape(), std::move(out), "rope_apply", {&x},
                [rotate, cs = std::move(cs), sn = std::move(sn)](std::span<const double> g,
                                                                 std::span<Buffer* const> gin) {
                  // The transpose of a rotation is the opposite rotation.
                  rotate(g.data(), gin[0]->data(), cs, sn, -1.0, true);
                });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::span<const bool> mask) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [T x V], got " + shape_str(logits.shape()));
  const std::size_t t = logits.dim(0), v = logits.dim(1);
  if (targets.size() != t || mask.size() != t) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets and " +
                         std::to_string(mask.size()) + " mask entries for " + std::to_string(t) + " rows");
  }
  for (std::size_t r = 0; r < t; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[r]) + " outside vocabulary of " +
                       std::to_string(v));
    }
  }
  double loss = 0.0;
  std::vector<double> probs;
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < t; ++r) {
    if (!mask[r]) continue;
    const double* lr = logits.ptr() + r * v;
    const double m = *std::max_element(lr, lr + v);
    double z = 0.0;
    for (std::size_t i = 0; i < v; ++i) z += std::exp(lr[i] - m);
    const double lse = m + std::log(z);
    loss += lse - lr[targets[r]];
    rows.push_back(r);
    for (std::size_t i = 0; i < v; ++i) probs.push_back(std::exp(lr[i] - lse));
  }
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  return finish({}, Buffer{loss}, "cross_entropy", {&logits},
                [probs = std::move(probs), rows = std::move(rows), tgt = std::move(tgt), v](
                    std::span<const double> g, std::span<Buffer* const> gin) {
                  auto& dl = *gin[0];
                  for (std::size_t k = 0; k < rows.size(); ++k) {
                    const std::size_t r = rows[k];
                    for (std::size_t i = 0; i < v; ++i) dl[r * v + i] += g[0] * probs[k * v + i];
                    dl[r * v + tgt[r]] -= g[0];
                  }
                });
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be [V x d], got " + shape_str(table.shape()));
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  Buffer out(ids.size() * d);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
      throw IndexError("embedding: token " + std::to_string(ids[t]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    std::copy_n(table.ptr() + static_cast<std::size_t>(ids[t]) * d, d, out.data() + t * d);
  }
  std::vector<std::int32_t> id_copy(ids.begin(), ids.end());
  return finish({ids.size(), d}, std::move(out), "embedding", {&table},
                [id_copy = std::move(id_copy), d](std::span<const double> g, std::span<Buffer* const> gin) {
                  auto& dt = *gin[0];
                  for (std::size_t t = 0; t < id_copy.size(); ++t) {
                    double* row = dt.data() + static_cast<std::size_t>(id_copy[t]) * d;
                    for (std::size_t i = 0; i < d; ++i) row[i] += g[t * d + i];
                  }
                });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::size_t> q_pos,
                 std::span<const std::size_t> k_pos) {
  if (q.rank() != 3 || k.rank() != 3 || v.shape() != k.shape() || q.dim(2) != k.dim(2)) {
    throw DimensionError("attention: incompatible shapes q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  }
  const std::size_t t = q.dim(0), heads = q.dim(1), dh = q.dim(2);
  const std::size_t s = k.dim(0), kv_heads = k.dim(1);
  if (kv_heads == 0 || heads % kv_heads != 0) {
    throw DimensionError("attention: " + std::to_string(heads) + " query heads cannot share " +
                         std::to_string(kv_heads) + " kv heads");
  }
  if (q_pos.size() != t || k_pos.size() != s) throw DimensionError("attention: position count mismatch");
  require_increasing(q_pos, "query");
  require_increasing(k_pos, "key");

  // Number of visible keys for each query row.
  std::vector<std::size_t> visible(t);
  for (std::size_t i = 0; i < t; ++i) {
    visible[i] = static_cast<std::size_t>(std::upper_bound(k_pos.begin(), k_pos.end(), q_pos[i]) - k_pos.begin());
    if (visible[i] == 0) throw ContractError("attention: query at position " + std::to_string(q_pos[i]) + " sees no keys");
  }

  const bool tracked = q.tracked() || k.tracked() || v.tracked();
  const std::size_t group = heads / kv_heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  const Strided q_stride(static_cast<Eigen::Index>(heads * dh));
  const Strided kv_stride(static_cast<Eigen::Index>(kv_heads * dh));

  Buffer out(t * heads * dh, 0.0);
  // Attention probabilities per head, kept only when a backward pass may need them.
  std::vector<RowMat> saved;
  if (tracked) saved.resize(heads);

  constexpr std::size_t kBlock = 128;
  RowMat scores;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t g = h / group;
    ConstStridedMat qh(q.ptr() + h * dh, t, dh, q_stride);
    ConstStridedMat kg(k.ptr() + g * dh, s, dh, kv_stride);
    ConstStridedMat vg(v.ptr() + g * dh, s, dh, kv_stride);
    MutStridedMat oh(out.data() + h * dh, t, dh, q_stride);
    if (tracked) saved[h].setZero(t, s);
    for (std::size_t r0 = 0; r0 < t; r0 += kBlock) {
      const std::size_t nb = std::min(kBlock, t - r0);
      const std::size_t nk = visible[r0 + nb - 1];
      scores.noalias() = (qh.middleRows(r0, nb) * kg.topRows(nk).transpose()) * scl;
      for (std::size_t i = 0; i < nb; ++i) {
        const std::size_t lim = visible[r0 + i];
        double* row = scores.data() + i * nk;
        const double m = *std::max_element(row, row + lim);
        double z = 0.0;
        for (std::size_t j = 0; j < lim; ++j) z += (row[j] = std::exp(row[j] - m));
        for (std::size_t j = 0; j < lim; ++j) row[j] /= z;
        for (std::size_t j = lim; j < nk; ++j) row[j] = 0.0;
      }
      oh.middleRows(r0, nb).noalias() = scores * vg.topRows(nk);
      if (tracked) saved[h].block(r0, 0, nb, nk) = scores;
    }
  }

  return finish({t, heads, dh}, std::move(out), "attention", {&q, &k, &v},
                [q = q.detach(), k = k.detach(), v = v.detach(), saved = std::move(saved), t, s, heads, kv_heads,
                 dh, group, scl](std::span<const double> gout, std::span<Buffer* const> gin) {
                  const Strided q_stride(static_cast<Eigen::Index>(heads * dh));
                  const Strided kv_stride(static_cast<Eigen::Index>(kv_heads * dh));
                  RowMat dp, ds;
                  for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t g = h / group;
                    const RowMat& p = saved[h];
                    ConstStridedMat qh(q.ptr() + h * dh, t, dh, q_stride);
                    ConstStridedMat kg(k.ptr() + g * dh, s, dh, kv_stride);
                    ConstStridedMat vg(v.ptr() + g * dh, s, dh, kv_stride);
                    ConstStridedMat doh(gout.data() + h * dh, t, dh, q_stride);
                    if (gin[2]) {
                      MutStridedMat dv(gin[2]->data() + g * dh, s, dh, kv_stride);
                      dv.noalias() += p.transpose() * doh;
                    }
                    if (!gin[0] && !gin[1]) continue;
                    dp.noalias() = doh * vg.transpose();
                    ds = p.cwiseProduct(dp);
                    Eigen::VectorXd rowdot = ds.rowwise().sum();
                    ds -= (p.array().colwise() * rowdot.array()).matrix();
                    if (gin[0]) {
                      MutStridedMat dq(gin[0]->data() + h * dh, t, dh, q_stride);
                      dq.noalias() += (ds * kg) * scl;
                    }
                    if (gin[1]) {
                      MutStridedMat dk(gin[1]->data() + g * dh, s, dh, kv_stride);
                      dk.noalias() += (ds.transpose() * qh) * scl;
                    }
                  }
                });
}

Tensor gate_rows(const Tensor& x, const Tensor& prefill_gate, const Tensor& decode_gate, std::size_t split) {
  if (prefill_gate.numel() != 1 || decode_gate.numel() != 1) {
    throw DimensionError("gate_rows: gates must have one element");
  }
  const double gp = prefill_gate.item(), gd = decode_gate.item();
  if (!prefill_gate.tracked() && !decode_gate.tracked() && gp == 1.0 && gd == 1.0) return x;
  const std::size_t rows = x.rows(), cols = x.cols();
  Buffer out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double gate = r < split ? gp : gd;
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] * gate;
  }
  return finish(x.shape(), std::move(out), "gate_rows", {&x, &prefill_gate, &decode_gate},
                [x = x.detach(), gp, gd, rows, cols, split](std::span<const double> g,
                                                            std::span<Buffer* const> gin) {
                  if (gin[0]) {
                    auto& dx = *gin[0];
                    for (std::size_t r = 0; r < rows; ++r) {
                      const double gate = r < split ? gp : gd;
                      for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] += g[r * cols + c] * gate;
                    }
                  }
                  double acc_p = 0.0, acc_d = 0.0;
                  for (std::size_t r = 0; r < rows; ++r) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) acc += g[r * cols + c] * x[r * cols + c];
                    (r < split ? acc_p : acc_d) += acc;
                  }
                  if (gin[1]) (*gin[1])[0] += acc_p;
                  if (gin[2]) (*gin[2])[0] += acc_d;
                });
}

}  // namespace pop
