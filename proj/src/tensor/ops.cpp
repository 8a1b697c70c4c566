#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "cofs/tensor.hpp"

namespace cofs {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

using NodePtr = std::shared_ptr<detail::Node>;

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

void require_2d(const Tensor& t, const char* op) {
  require(t.ndim() == 2, std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

ConstMapMat cmap(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return ConstMapMat(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

MapMat mmap(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MapMat(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

bool wants_grad(const NodePtr& n) { return n->requires_grad; }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  std::vector<double> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  Tensor r = make_result(a.shape(), std::move(out), {a, b});
  set_backward(r, [pa = a.node_ptr(), pb = b.node_ptr()](detail::Node& o) {
    for (const auto& p : {pa, pb}) {
      if (!wants_grad(p)) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
  return r;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  std::vector<double> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  Tensor r = make_result(a.shape(), std::move(out), {a, b});
  set_backward(r, [pa = a.node_ptr(), pb = b.node_ptr()](detail::Node& o) {
    if (wants_grad(pa)) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (wants_grad(pb)) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
  return r;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  std::vector<double> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  Tensor r = make_result(a.shape(), std::move(out), {a, b});
  set_backward(r, [pa = a.node_ptr(), pb = b.node_ptr()](detail::Node& o) {
    if (wants_grad(pa)) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pb->value[i];
    }
    if (wants_grad(pb)) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pa->value[i];
    }
  });
  return r;
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& x : out) x *= s;
  Tensor r = make_result(a.shape(), std::move(out), {a});
  set_backward(r, [pa = a.node_ptr(), s](detail::Node& o) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * o.grad[i];
  });
  return r;
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  require_2d(a, "add_bias");
  const std::size_t m = a.rows(), n = a.cols();
  require(bias.numel() == n, "add_bias: bias has " + std::to_string(bias.numel()) + " entries, expected " +
                                 std::to_string(n));
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = bias.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  Tensor r = make_result(a.shape(), std::move(out), {a, bias});
  set_backward(r, [pa = a.node_ptr(), pb = bias.node_ptr(), m, n](detail::Node& o) {
    if (wants_grad(pa)) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (wants_grad(pb)) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += o.grad[i * n + j];
    }
  });
  return r;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  require(b.rows() == k, "matmul: inner dimensions differ " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  std::vector<double> out(m * n);
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  mmap(out, m, n).noalias() = cmap(av, m, k) * cmap(bv, k, n);
  Tensor r = make_result({m, n}, std::move(out), {a, b});
  set_backward(r, [pa = a.node_ptr(), pb = b.node_ptr(), m, k, n](detail::Node& o) {
    auto dc = cmap(o.grad, m, n);
    if (wants_grad(pa)) mmap(pa->ensure_grad(), m, k).noalias() += dc * cmap(pb->value, k, n).transpose();
    if (wants_grad(pb)) mmap(pb->ensure_grad(), k, n).noalias() += cmap(pa->value, m, k).transpose() * dc;
  });
  return r;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_bias(matmul(x, w), b); }

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  mmap(out, n, m) = cmap(a.node()->value, m, n).transpose();
  Tensor r = make_result({n, m}, std::move(out), {a});
  set_backward(r, [pa = a.node_ptr(), m, n](detail::Node& o) {
    mmap(pa->ensure_grad(), m, n) += cmap(o.grad, n, m).transpose();
  });
  return r;
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  Tensor r = make_result(x.shape(), std::move(out), {x});
  set_backward(r, [px = x.node_ptr()](detail::Node& o) {
    auto& g = px->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (px->value[i] > 0.0) g[i] += o.grad[i];
  });
  return r;
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  std::vector<double> out(x.numel());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * inv_sqrt2));
  Tensor r = make_result(x.shape(), std::move(out), {x});
  set_backward(r, [px = x.node_ptr(), inv_sqrt_2pi](detail::Node& o) {
    auto& g = px->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = px->value[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      g[i] += o.grad[i] * (cdf + v * pdf);
    }
  });
  return r;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require(x.ndim() == 1 || x.ndim() == 2, "softmax: expected 1-D or 2-D input");
  require(axis < x.ndim(), "softmax: axis out of range");
  // View as [outer x len] with stride between consecutive elements of a line.
  std::size_t lines, len, stride, line_step;
  if (x.ndim() == 1) {
    lines = 1, len = x.dim(0), stride = 1, line_step = 0;
  } else if (axis == 1) {
    lines = x.dim(0), len = x.dim(1), stride = 1, line_step = x.dim(1);
  } else {
    lines = x.dim(1), len = x.dim(0), stride = x.dim(1), line_step = 1;
  }
  std::vector<double> out(x.numel());
  auto xv = x.values();
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t base = l * line_step;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * stride]);
    double sum = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      const double e = std::exp(xv[base + j * stride] - mx);
      out[base + j * stride] = e;
      sum += e;
    }
    for (std::size_t j = 0; j < len; ++j) out[base + j * stride] /= sum;
  }
  Tensor r = make_result(x.shape(), std::move(out), {x});
  set_backward(r, [px = x.node_ptr(), lines, len, stride, line_step](detail::Node& o) {
    auto& g = px->ensure_grad();
    for (std::size_t l = 0; l < lines; ++l) {
      const std::size_t base = l * line_step;
      double dot = 0.0;
      for (std::size_t j = 0; j < len; ++j) dot += o.grad[base + j * stride] * o.value[base + j * stride];
      for (std::size_t j = 0; j < len; ++j) {
        const std::size_t idx = base + j * stride;
        g[idx] += o.value[idx] * (o.grad[idx] - dot);
      }
    }
  });
  return r;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_2d(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  require(gain.numel() == n && bias.numel() == n, "layer_norm: gain/bias size mismatch");
  std::vector<double> out(m * n), xhat(m * n), inv_std(m);
  auto xv = x.values();
  auto gv = gain.values(), bv = bias.values();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mean) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gv[j] + bv[j];
    }
  }
  Tensor r = make_result(x.shape(), std::move(out), {x, gain, bias});
  set_backward(r, [px = x.node_ptr(), pg = gain.node_ptr(), pb = bias.node_ptr(), xhat = std::move(xhat),
                   inv_std = std::move(inv_std), m, n](detail::Node& o) {
    if (wants_grad(pg)) {
      auto& g = pg->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += o.grad[i * n + j] * xhat[i * n + j];
    }
    if (wants_grad(pb)) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += o.grad[i * n + j];
    }
    if (wants_grad(px)) {
      auto& g = px->ensure_grad();
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < m; ++i) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double dy = o.grad[i * n + j] * pg->value[j];
          sum_dy += dy;
          sum_dy_xhat += dy * xhat[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) {
          const double dy = o.grad[i * n + j] * pg->value[j];
          g[i * n + j] += inv_std[i] * (dy - inv_n * sum_dy - xhat[i * n + j] * inv_n * sum_dy_xhat);
        }
      }
    }
  });
  return r;
}

Tensor reduce_sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  Tensor r = make_result({1}, {s}, {a});
  set_backward(r, [pa = a.node_ptr()](detail::Node& o) {
    auto& g = pa->ensure_grad();
    for (double& v : g) v += o.grad[0];
  });
  return r;
}

Tensor reduce_mean(const Tensor& a) {
  require(a.numel() > 0, "reduce_mean: empty tensor");
  return scale(reduce_sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mean_rows(const Tensor& a) {
  require_2d(a, "mean_rows");
  const std::size_t m = a.rows(), n = a.cols();
  require(m > 0, "mean_rows: no rows");
  std::vector<double> out(n, 0.0);
  auto av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += av[i * n + j];
  for (double& v : out) v /= static_cast<double>(m);
  Tensor r = make_result({1, n}, std::move(out), {a});
  set_backward(r, [pa = a.node_ptr(), m, n](detail::Node& o) {
    auto& g = pa->ensure_grad();
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += o.grad[j] * inv;
  });
  return r;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_rows: nothing to concatenate");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    require(p.ndim() == 2 && p.cols() == n, "concat_rows: column count mismatch");
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  Tensor r = make_result({m, n}, std::move(out), inputs);
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node_ptr());
  set_backward(r, [nodes = std::move(nodes)](detail::Node& o) {
    std::size_t offset = 0;
    for (const auto& p : nodes) {
      if (wants_grad(p)) {
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[offset + i];
      }
      offset += p->value.size();
    }
  });
  return r;
}

Tensor concat_rows(std::initializer_list<Tensor> parts) {
  return concat_rows(std::span<const Tensor>(parts.begin(), parts.size()));
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  require_2d(a, "slice_rows");
  require(begin + count <= a.rows(), "slice_rows: range out of bounds");
  const std::size_t n = a.cols();
  auto av = a.values();
  std::vector<double> out(av.begin() + static_cast<std::ptrdiff_t>(begin * n),
                          av.begin() + static_cast<std::ptrdiff_t>((begin + count) * n));
  Tensor r = make_result({count, n}, std::move(out), {a});
  set_backward(r, [pa = a.node_ptr(), begin, n](detail::Node& o) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[begin * n + i] += o.grad[i];
  });
  return r;
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
  require_2d(table, "gather_rows");
  const std::size_t n = table.cols(), rows = table.rows();
  std::vector<double> out(indices.size() * n);
  auto tv = table.values();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < rows, "gather_rows: index " + std::to_string(indices[i]) + " out of range " +
                                   std::to_string(rows));
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(indices[i] * n), n, out.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  Tensor r = make_result({indices.size(), n}, std::move(out), {table});
  set_backward(r, [pt = table.node_ptr(), idx = std::vector<std::size_t>(indices.begin(), indices.end()),
                   n](detail::Node& o) {
    auto& g = pt->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += o.grad[i * n + j];
  });
  return r;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionSpec& spec) {
  require_2d(q, "attention");
  require_2d(k, "attention");
  require_2d(v, "attention");
  const std::size_t d = q.cols();
  require(k.cols() == d && v.cols() == d, "attention: q/k/v width mismatch");
  require(k.rows() == v.rows(), "attention: k/v row mismatch");
  require(spec.heads > 0 && d % spec.heads == 0, "attention: width not divisible by head count");
  const std::size_t heads = spec.heads, dh = d / heads;

  std::vector<AttentionSegment> segments = spec.segments;
  if (segments.empty()) segments.push_back({0, q.rows(), 0, k.rows()});
  for (const auto& s : segments) {
    require(s.q_begin + s.q_len <= q.rows() && s.k_begin + s.k_len <= k.rows(), "attention: segment out of range");
  }
  if (spec.mask) {
    require(segments.size() == 1, "attention: explicit mask needs a single segment");
    const auto& mk = *spec.mask;
    require(mk.size() == segments[0].q_len, "attention: mask row count mismatch");
    for (const auto& row : mk) require(row.size() == segments[0].k_len, "attention: mask column count mismatch");
  }

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto& qv = q.node()->value;
  const auto& kv = k.node()->value;
  const auto& vv = v.node()->value;
  std::vector<double> out(q.rows() * d, 0.0);

  // Probabilities per (segment, head), kept for the backward pass.
  std::vector<RowMat> probs;
  probs.reserve(segments.size() * heads);
  using Stride = Eigen::OuterStride<>;
  using ConstBlock = Eigen::Map<const RowMat, 0, Stride>;
  using Block = Eigen::Map<RowMat, 0, Stride>;
  const auto ed = static_cast<Eigen::Index>(d);
  const auto edh = static_cast<Eigen::Index>(dh);

  for (const auto& s : segments) {
    const auto nq = static_cast<Eigen::Index>(s.q_len), nk = static_cast<Eigen::Index>(s.k_len);
    for (std::size_t h = 0; h < heads; ++h) {
      ConstBlock qh(qv.data() + s.q_begin * d + h * dh, nq, edh, Stride(ed));
      ConstBlock kh(kv.data() + s.k_begin * d + h * dh, nk, edh, Stride(ed));
      ConstBlock vh(vv.data() + s.k_begin * d + h * dh, nk, edh, Stride(ed));
      RowMat p = (qh * kh.transpose()) * inv_sqrt;
      for (Eigen::Index i = 0; i < nq; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        auto allowed = [&](Eigen::Index j) {
          if (spec.causal && static_cast<std::size_t>(j) > static_cast<std::size_t>(i)) return false;
          if (spec.mask) return static_cast<bool>((*spec.mask)[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
          return true;
        };
        for (Eigen::Index j = 0; j < nk; ++j)
          if (allowed(j)) mx = std::max(mx, p(i, j));
        double sum = 0.0;
        for (Eigen::Index j = 0; j < nk; ++j) {
          if (allowed(j)) {
            p(i, j) = std::exp(p(i, j) - mx);
            sum += p(i, j);
          } else {
            p(i, j) = 0.0;
          }
        }
        if (sum > 0.0) p.row(i) /= sum;
      }
      Block oh(out.data() + s.q_begin * d + h * dh, nq, edh, Stride(ed));
      oh.noalias() = p * vh;
      probs.push_back(std::move(p));
    }
  }

  Tensor r = make_result(q.shape(), std::move(out), {q, k, v});
  set_backward(r, [pq = q.node_ptr(), pk = k.node_ptr(), pv = v.node_ptr(), segments = std::move(segments),
                   probs = std::move(probs), heads, dh, d, inv_sqrt](detail::Node& o) {
    const auto ed = static_cast<Eigen::Index>(d);
    const auto edh = static_cast<Eigen::Index>(dh);
    auto* gq = wants_grad(pq) ? &pq->ensure_grad() : nullptr;
    auto* gk = wants_grad(pk) ? &pk->ensure_grad() : nullptr;
    auto* gv = wants_grad(pv) ? &pv->ensure_grad() : nullptr;
    std::size_t idx = 0;
    for (const auto& s : segments) {
      const auto nq = static_cast<Eigen::Index>(s.q_len), nk = static_cast<Eigen::Index>(s.k_len);
      for (std::size_t h = 0; h < heads; ++h, ++idx) {
        const RowMat& p = probs[idx];
        ConstBlock doh(o.grad.data() + s.q_begin * d + h * dh, nq, edh, Stride(ed));
        ConstBlock qh(pq->value.data() + s.q_begin * d + h * dh, nq, edh, Stride(ed));
        ConstBlock kh(pk->value.data() + s.k_begin * d + h * dh, nk, edh, Stride(ed));
        ConstBlock vh(pv->value.data() + s.k_begin * d + h * dh, nk, edh, Stride(ed));
        if (gv) {
          Block g(gv->data() + s.k_begin * d + h * dh, nk, edh, Stride(ed));
          g.noalias() += p.transpose() * doh;
        }
        if (!gq && !gk) continue;
        RowMat dp = doh * vh.transpose();
        // dS = P o (dP - rowsum(dP o P))
        for (Eigen::Index i = 0; i < nq; ++i) {
          const double dot = dp.row(i).dot(p.row(i));
          dp.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
        }
        dp *= inv_sqrt;
        if (gq) {
          Block g(gq->data() + s.q_begin * d + h * dh, nq, edh, Stride(ed));
          g.noalias() += dp * kh;
        }
        if (gk) {
          Block g(gk->data() + s.k_begin * d + h * dh, nk, edh, Stride(ed));
          g.noalias() += dp.transpose() * qh;
        }
      }
    }
  });
  return r;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const std::optional<std::vector<std::vector<bool>>>& mask, std::size_t heads) {
  AttentionSpec spec;
  spec.heads = heads;
  spec.mask = mask;
  return attention(q, k, v, spec);
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad) {
  require(x.ndim() == 3, "conv2d: input must be [C x H x W]");
  require(w.ndim() == 4, "conv2d: weight must be [Cout x Cin x kh x kw]");
  const std::size_t cin = x.dim(0), hin = x.dim(1), win = x.dim(2);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  require(w.dim(1) == cin, "conv2d: channel mismatch");
  require(b.numel() == cout, "conv2d: bias size mismatch");
  require(stride > 0 && hin + 2 * pad >= kh && win + 2 * pad >= kw, "conv2d: kernel larger than padded input");
  const std::size_t hout = (hin + 2 * pad - kh) / stride + 1;
  const std::size_t wout = (win + 2 * pad - kw) / stride + 1;
  const std::size_t patch = cin * kh * kw, npos = hout * wout;

  // im2col: cols[patch x npos]
  auto im2col = [=](const std::vector<double>& xv) {
    std::vector<double> cols(patch * npos, 0.0);
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t u = 0; u < kh; ++u)
        for (std::size_t t = 0; t < kw; ++t) {
          const std::size_t row = (c * kh + u) * kw + t;
          for (std::size_t oy = 0; oy < hout; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + u) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(hin)) continue;
            for (std::size_t ox = 0; ox < wout; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + t) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(win)) continue;
              cols[row * npos + oy * wout + ox] = xv[(c * hin + static_cast<std::size_t>(iy)) * win + static_cast<std::size_t>(ix)];
            }
          }
        }
    return cols;
  };

  std::vector<double> cols = im2col(x.node()->value);
  std::vector<double> out(cout * npos);
  mmap(out, cout, npos).noalias() = cmap(w.node()->value, cout, patch) * cmap(cols, patch, npos);
  auto bv = b.values();
  for (std::size_t c = 0; c < cout; ++c)
    for (std::size_t p = 0; p < npos; ++p) out[c * npos + p] += bv[c];

  Tensor r = make_result({cout, hout, wout}, std::move(out), {x, w, b});
  set_backward(r, [px = x.node_ptr(), pw = w.node_ptr(), pb = b.node_ptr(), cols = std::move(cols), cin, hin, win,
                   cout, kh, kw, hout, wout, stride, pad, patch, npos](detail::Node& o) {
    auto dout = cmap(o.grad, cout, npos);
    if (wants_grad(pb)) {
      auto& g = pb->ensure_grad();
      for (std::size_t c = 0; c < cout; ++c) g[c] += dout.row(static_cast<Eigen::Index>(c)).sum();
    }
    if (wants_grad(pw)) mmap(pw->ensure_grad(), cout, patch).noalias() += dout * cmap(cols, patch, npos).transpose();
    if (wants_grad(px)) {
      RowMat dcols = cmap(pw->value, cout, patch).transpose() * dout;
      auto& g = px->ensure_grad();
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t u = 0; u < kh; ++u)
          for (std::size_t t = 0; t < kw; ++t) {
            const std::size_t row = (c * kh + u) * kw + t;
            for (std::size_t oy = 0; oy < hout; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + u) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(hin)) continue;
              for (std::size_t ox = 0; ox < wout; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + t) - static_cast<std::ptrdiff_t>(pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(win)) continue;
                g[(c * hin + static_cast<std::size_t>(iy)) * win + static_cast<std::size_t>(ix)] +=
                    dcols(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(oy * wout + ox));
              }
            }
          }
    }
  });
  return r;
}

Tensor global_avg_pool(const Tensor& x) {
  require(x.ndim() == 3, "global_avg_pool: input must be [C x H x W]");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  return mean_rows(transpose(x.reshape({c, hw})));
}

Tensor cross_entropy_sum(const Tensor& logits, std::span<const std::size_t> targets) {
  require_2d(logits, "cross_entropy_sum");
  const std::size_t m = logits.rows(), n = logits.cols();
  require(targets.size() == m, "cross_entropy_sum: one target per row required");
  auto lv = logits.values();
  std::vector<double> probs(m * n);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    require(targets[i] < n, "cross_entropy_sum: target out of range");
    const double* row = lv.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] = std::exp(row[j] - lse);
    total += lse - row[targets[i]];
  }
  Tensor r = make_result({1}, {total}, {logits});
  set_backward(r, [pl = logits.node_ptr(), probs = std::move(probs),
                   tg = std::vector<std::size_t>(targets.begin(), targets.end()), n](detail::Node& o) {
    auto& g = pl->ensure_grad();
    const double go = o.grad[0];
    for (std::size_t i = 0; i < tg.size(); ++i) {
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += go * probs[i * n + j];
      g[i * n + tg[i]] -= go;
    }
  });
  return r;
}

}  // namespace cofs
