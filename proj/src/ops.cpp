// SPDX-License-Identifier: Apache-2.0
#include "reefl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "reefl/error.hpp"

namespace reefl {
namespace {

void dim_error(const std::string& op, const Shape& a, const Shape& b) {
  throw Error(ErrorKind::kDimension, op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

bool any_grad(std::initializer_list<const Var*> vars) {
  return std::any_of(vars.begin(), vars.end(), [](const Var* v) { return v->requires_grad(); });
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < -r || axis >= r) {
    throw Error(ErrorKind::kDimension, "axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

// Outer/axis/inner decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    const double* a = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[p];
      const double* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    double* c = C + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* b = B + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[p] * b[p];
      c[j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
void gemm_tn(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    const double* b = B + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[p];
      double* c = C + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Var matmul(const Var& a, const Var& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.empty() || bs.size() != 2 || as.back() != bs[0]) dim_error("matmul", as, bs);
  const std::size_t k = bs[0], n = bs[1];
  const std::size_t m = a.value().numel() / k;
  Shape out_shape = as;
  out_shape.back() = n;
  Tensor out(out_shape, 0.0);
  gemm_nn(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n);
  Node* pa = a.node();
  Node* pb = b.node();
  return a.graph().record(std::move(out), "matmul", any_grad({&a, &b}), [pa, pb, m, k, n](Node& self) {
    const double* dc = self.grad.data().data();
    if (pa->requires_grad) gemm_nt(dc, pb->value.data().data(), pa->grad_buffer().data().data(), m, n, k);
    if (pb->requires_grad) gemm_tn(pa->value.data().data(), dc, pb->grad_buffer().data().data(), m, k, n);
  });
}

Var batched_matmul(const Var& a, const Var& b, bool transpose_b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0]) dim_error("batched_matmul", as, bs);
  const std::size_t batch = as[0], m = as[1], k = as[2];
  const std::size_t n = transpose_b ? bs[1] : bs[2];
  if ((transpose_b ? bs[2] : bs[1]) != k) dim_error("batched_matmul", as, bs);
  Tensor out({batch, m, n}, 0.0);
  const double* A = a.value().data().data();
  const double* B = b.value().data().data();
  double* C = out.data().data();
  for (std::size_t i = 0; i < batch; ++i) {
    if (transpose_b) {
      gemm_nt(A + i * m * k, B + i * n * k, C + i * m * n, m, k, n);
    } else {
      gemm_nn(A + i * m * k, B + i * k * n, C + i * m * n, m, k, n);
    }
  }
  Node* pa = a.node();
  Node* pb = b.node();
  return a.graph().record(std::move(out), "batched_matmul", any_grad({&a, &b}),
                          [pa, pb, batch, m, k, n, transpose_b](Node& self) {
                            const double* dC = self.grad.data().data();
                            const double* A = pa->value.data().data();
                            const double* B = pb->value.data().data();
                            double* dA = pa->requires_grad ? pa->grad_buffer().data().data() : nullptr;
                            double* dB = pb->requires_grad ? pb->grad_buffer().data().data() : nullptr;
                            for (std::size_t i = 0; i < batch; ++i) {
                              const double* dc = dC + i * m * n;
                              if (transpose_b) {
                                // C = A B^T: dA = dC B, dB = dC^T A
                                if (dA) gemm_nn(dc, B + i * n * k, dA + i * m * k, m, n, k);
                                if (dB) gemm_tn(dc, A + i * m * k, dB + i * n * k, m, n, k);
                              } else {
                                if (dA) gemm_nt(dc, B + i * k * n, dA + i * m * k, m, n, k);
                                if (dB) gemm_tn(A + i * m * k, dc, dB + i * k * n, m, k, n);
                              }
                            }
                          });
}

Var add(const Var& a, const Var& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (!is_suffix(as, bs)) dim_error("add", as, bs);
  const std::size_t span_b = b.value().numel();
  const std::size_t reps = a.value().numel() / span_b;
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t r = 0; r < reps; ++r) {
    for (std::size_t j = 0; j < span_b; ++j) o[r * span_b + j] += bv[j];
  }
  Node* pa = a.node();
  Node* pb = b.node();
  return a.graph().record(std::move(out), "add", any_grad({&a, &b}), [pa, pb, reps, span_b](Node& self) {
    auto g = self.grad.data();
    if (pa->requires_grad) {
      auto ga = pa->grad_buffer().data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (pb->requires_grad) {
      auto gb = pb->grad_buffer().data();
      for (std::size_t r = 0; r < reps; ++r) {
        for (std::size_t j = 0; j < span_b; ++j) gb[j] += g[r * span_b + j];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) dim_error("sub", a.shape(), b.shape());
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  Node* pa = a.node();
  Node* pb = b.node();
  return a.graph().record(std::move(out), "sub", any_grad({&a, &b}), [pa, pb](Node& self) {
    auto g = self.grad.data();
    if (pa->requires_grad) {
      auto ga = pa->grad_buffer().data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (pb->requires_grad) {
      auto gb = pb->grad_buffer().data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) dim_error("mul", a.shape(), b.shape());
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  Node* pa = a.node();
  Node* pb = b.node();
  return a.graph().record(std::move(out), "mul", any_grad({&a, &b}), [pa, pb](Node& self) {
    auto g = self.grad.data();
    if (pa->requires_grad) {
      auto ga = pa->grad_buffer().data();
      auto bv = pb->value.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (pb->requires_grad) {
      auto gb = pb->grad_buffer().data();
      auto av = pa->value.data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(const Var& x, double factor) {
  Tensor out = x.value();
  for (auto& v : out.data()) v *= factor;
  Node* px = x.node();
  return x.graph().record(std::move(out), "scale", x.requires_grad(), [px, factor](Node& self) {
    auto g = self.grad.data();
    auto gx = px->grad_buffer().data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
}

Var sum(const Var& x) {
  const auto v = x.value().data();
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  Node* px = x.node();
  return x.graph().record(Tensor::scalar(total), "sum", x.requires_grad(), [px](Node& self) {
    const double g = self.grad[0];
    for (auto& gx : px->grad_buffer().data()) gx += g;
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().numel())); }

double gelu_value(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

Var gelu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = gelu_value(v);
  Node* px = x.node();
  return x.graph().record(std::move(out), "gelu", x.requires_grad(), [px](Node& self) {
    auto g = self.grad.data();
    auto xv = px->value.data();
    auto gx = px->grad_buffer().data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const std::size_t d = x.value().last_dim();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) dim_error("layer_norm", x.shape(), gamma.shape());
  if (!(eps > 0.0)) throw Error(ErrorKind::kConfig, "layer_norm eps must be positive");
  const std::size_t rows = x.value().rows();
  Tensor out(x.shape(), 0.0);
  // Saved for backward: normalized values and per-row reciprocal std.
  auto xhat = std::make_shared<std::vector<double>>(x.value().numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  auto xv = x.value().data();
  auto gv = gamma.value().data();
  auto bv = beta.value().data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      o[r * d + j] = h * gv[j] + bv[j];
    }
  }
  Node* px = x.node();
  Node* pg = gamma.node();
  Node* pb = beta.node();
  return x.graph().record(std::move(out), "layer_norm", any_grad({&x, &gamma, &beta}),
                          [px, pg, pb, xhat, rstd, rows, d](Node& self) {
                            auto g = self.grad.data();
                            auto gv = pg->value.data();
                            if (pg->requires_grad || pb->requires_grad) {
                              auto& gg = pg->grad_buffer();
                              auto& gb = pb->grad_buffer();
                              for (std::size_t r = 0; r < rows; ++r) {
                                for (std::size_t j = 0; j < d; ++j) {
                                  gg[j] += g[r * d + j] * (*xhat)[r * d + j];
                                  gb[j] += g[r * d + j];
                                }
                              }
                            }
                            if (!px->requires_grad) return;
                            auto gx = px->grad_buffer().data();
                            const double inv_d = 1.0 / static_cast<double>(d);
                            for (std::size_t r = 0; r < rows; ++r) {
                              double mean_dh = 0.0, mean_dh_h = 0.0;
                              for (std::size_t j = 0; j < d; ++j) {
                                const double dh = g[r * d + j] * gv[j];
                                mean_dh += dh;
                                mean_dh_h += dh * (*xhat)[r * d + j];
                              }
                              mean_dh *= inv_d;
                              mean_dh_h *= inv_d;
                              const double rs = (*rstd)[r];
                              for (std::size_t j = 0; j < d; ++j) {
                                const double dh = g[r * d + j] * gv[j];
                                gx[r * d + j] += rs * (dh - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
                              }
                            }
                          });
}

Var softmax(const Var& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.value().rank());
  const AxisSplit s = split_at(x.shape(), ax);
  Tensor out(x.shape(), 0.0);
  auto xv = x.value().data();
  auto o = out.data();
  for (std::size_t a = 0; a < s.outer; ++a) {
    for (std::size_t c = 0; c < s.inner; ++c) {
      const std::size_t base = a * s.extent * s.inner + c;
      double mx = xv[base];
      for (std::size_t k = 1; k < s.extent; ++k) mx = std::max(mx, xv[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        const double e = std::exp(xv[base + k * s.inner] - mx);
        o[base + k * s.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) o[base + k * s.inner] /= z;
    }
  }
  Node* px = x.node();
  return x.graph().record(std::move(out), "softmax", x.requires_grad(), [px, s](Node& self) {
    auto g = self.grad.data();
    auto y = self.value.data();
    auto gx = px->grad_buffer().data();
    for (std::size_t a = 0; a < s.outer; ++a) {
      for (std::size_t c = 0; c < s.inner; ++c) {
        const std::size_t base = a * s.extent * s.inner + c;
        double dot = 0.0;
        for (std::size_t k = 0; k < s.extent; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t i = base + k * s.inner;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

Var log_softmax(const Var& x) {
  const std::size_t k = x.value().last_dim();
  const std::size_t rows = x.value().rows();
  Tensor out(x.shape(), 0.0);
  auto xv = x.value().data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) o[r * k + j] = row[j] - lse;
  }
  Node* px = x.node();
  return x.graph().record(std::move(out), "log_softmax", x.requires_grad(), [px, rows, k](Node& self) {
    auto g = self.grad.data();
    auto y = self.value.data();
    auto gx = px->grad_buffer().data();
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t j = 0; j < k; ++j) gs += g[r * k + j];
      for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += g[r * k + j] - std::exp(y[r * k + j]) * gs;
    }
  });
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size()) {
    throw Error(ErrorKind::kDimension, "cross_entropy: logits " + shape_str(s) + " vs " +
                                           std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = s[0], k = s[1];
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw Error(ErrorKind::kIndex, "label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
    }
  }
  Tensor probs = softmax_rows(logits.value());
  auto lv = logits.value().data();
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = lv.data() + b * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    loss += (mx + std::log(z)) - row[labels[b]];
  }
  loss /= static_cast<double>(batch);
  std::vector<int> saved(labels.begin(), labels.end());
  Node* px = logits.node();
  return logits.graph().record(
      Tensor::scalar(loss), "cross_entropy", logits.requires_grad(),
      [px, probs = std::move(probs), saved = std::move(saved), batch, k](Node& self) {
        const double g = self.grad[0] / static_cast<double>(batch);
        auto gx = px->grad_buffer().data();
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t j = 0; j < k; ++j) {
            const double onehot = static_cast<int>(j) == saved[b] ? 1.0 : 0.0;
            gx[b * k + j] += g * (probs[b * k + j] - onehot);
          }
        }
      });
}

Var kl_divergence(const Var& p, const Var& q) {
  if (p.shape() != q.shape()) dim_error("kl_divergence", p.shape(), q.shape());
  auto pv = p.value().data();
  auto qv = q.value().data();
  double total = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    total += pv[i] * (std::log(std::max(pv[i], kProbFloor)) - std::log(std::max(qv[i], kProbFloor)));
  }
  Node* pp = p.node();
  Node* pq = q.node();
  return p.graph().record(Tensor::scalar(total), "kl_divergence", any_grad({&p, &q}), [pp, pq](Node& self) {
    const double g = self.grad[0];
    auto pv = pp->value.data();
    auto qv = pq->value.data();
    if (pp->requires_grad) {
      auto gp = pp->grad_buffer().data();
      for (std::size_t i = 0; i < pv.size(); ++i) {
        const double lp = std::log(std::max(pv[i], kProbFloor));
        const double lq = std::log(std::max(qv[i], kProbFloor));
        gp[i] += g * (lp - lq + (pv[i] > kProbFloor ? 1.0 : 0.0));
      }
    }
    if (pq->requires_grad) {
      auto gq = pq->grad_buffer().data();
      for (std::size_t i = 0; i < pv.size(); ++i) {
        if (qv[i] > kProbFloor) gq[i] -= g * pv[i] / qv[i];
      }
    }
  });
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw Error(ErrorKind::kDimension, "concat of nothing");
  const Shape& first = parts[0].shape();
  const std::size_t ax = normalize_axis(axis, first.size());
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) dim_error("concat", first, s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != first[i]) dim_error("concat", first, s);
    }
    out_shape[ax] += s[ax];
  }
  const AxisSplit os = split_at(out_shape, ax);
  Tensor out(out_shape, 0.0);
  auto o = out.data();
  std::vector<Node*> nodes;
  std::vector<std::size_t> extents;
  bool needs_grad = false;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = p.shape()[ax] * os.inner;
    auto v = p.value().data();
    for (std::size_t a = 0; a < os.outer; ++a) {
      std::copy_n(v.data() + a * chunk, chunk, o.data() + a * os.extent * os.inner + offset);
    }
    offset += chunk;
    nodes.push_back(p.node());
    extents.push_back(chunk);
    needs_grad = needs_grad || p.requires_grad();
  }
  return parts[0].graph().record(std::move(out), "concat", needs_grad,
                                 [nodes = std::move(nodes), extents = std::move(extents), os](Node& self) {
                                   auto g = self.grad.data();
                                   std::size_t offset = 0;
                                   for (std::size_t i = 0; i < nodes.size(); ++i) {
                                     const std::size_t chunk = extents[i];
                                     if (nodes[i]->requires_grad) {
                                       auto gp = nodes[i]->grad_buffer().data();
                                       for (std::size_t a = 0; a < os.outer; ++a) {
                                         const double* src = g.data() + a * os.extent * os.inner + offset;
                                         double* dst = gp.data() + a * chunk;
                                         for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
                                       }
                                     }
                                     offset += chunk;
                                   }
                                 });
}

Var slice(const Var& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = normalize_axis(axis, x.value().rank());
  const AxisSplit s = split_at(x.shape(), ax);
  if (begin >= end || end > s.extent) {
    throw Error(ErrorKind::kIndex, "slice [" + std::to_string(begin) + "," + std::to_string(end) +
                                       ") outside axis of extent " + std::to_string(s.extent));
  }
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  const std::size_t chunk = (end - begin) * s.inner;
  const std::size_t skip = begin * s.inner;
  Tensor out(out_shape, 0.0);
  auto xv = x.value().data();
  auto o = out.data();
  for (std::size_t a = 0; a < s.outer; ++a) {
    std::copy_n(xv.data() + a * s.extent * s.inner + skip, chunk, o.data() + a * chunk);
  }
  Node* px = x.node();
  return x.graph().record(std::move(out), "slice", x.requires_grad(), [px, s, chunk, skip](Node& self) {
    auto g = self.grad.data();
    auto gx = px->grad_buffer().data();
    for (std::size_t a = 0; a < s.outer; ++a) {
      double* dst = gx.data() + a * s.extent * s.inner + skip;
      const double* src = g.data() + a * chunk;
      for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  Node* px = x.node();
  return x.graph().record(std::move(out), "reshape", x.requires_grad(), [px](Node& self) {
    auto g = self.grad.data();
    auto gx = px->grad_buffer().data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var permute(const Var& x, const std::vector<std::size_t>& order) {
  const Shape& in = x.shape();
  const std::size_t rank = in.size();
  if (order.size() != rank) throw Error(ErrorKind::kDimension, "permute order rank mismatch");
  std::vector<bool> seen(rank, false);
  for (auto o : order) {
    if (o >= rank || seen[o]) throw Error(ErrorKind::kDimension, "permute order is not a permutation");
    seen[o] = true;
  }
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out_shape(rank);
  std::vector<std::size_t> strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in[order[i]];
    strides[i] = in_strides[order[i]];
  }
  // gather[i] = source offset of output element i
  const std::size_t total = x.value().numel();
  auto gather = std::make_shared<std::vector<std::size_t>>(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < total; ++i) {
    (*gather)[i] = src;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      src += strides[ax];
      if (idx[ax] < out_shape[ax]) break;
      src -= strides[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  Tensor out(out_shape, 0.0);
  auto xv = x.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < total; ++i) o[i] = xv[(*gather)[i]];
  Node* px = x.node();
  return x.graph().record(std::move(out), "permute", x.requires_grad(), [px, gather](Node& self) {
    auto g = self.grad.data();
    auto gx = px->grad_buffer().data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*gather)[i]] += g[i];
  });
}

Var transpose(const Var& x) {
  const std::size_t rank = x.value().rank();
  if (rank < 2) throw Error(ErrorKind::kDimension, "transpose needs rank >= 2");
  std::vector<std::size_t> order(rank);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::swap(order[rank - 1], order[rank - 2]);
  return permute(x, order);
}

Var expand(const Var& x, std::size_t count) {
  if (count == 0) throw Error(ErrorKind::kDimension, "expand by zero");
  Shape out_shape = x.shape();
  out_shape.insert(out_shape.begin(), count);
  const std::size_t n = x.value().numel();
  Tensor out(out_shape, 0.0);
  auto xv = x.value().data();
  auto o = out.data();
  for (std::size_t c = 0; c < count; ++c) std::copy_n(xv.data(), n, o.data() + c * n);
  Node* px = x.node();
  return x.graph().record(std::move(out), "expand", x.requires_grad(), [px, count, n](Node& self) {
    auto g = self.grad.data();
    auto gx = px->grad_buffer().data();
    for (std::size_t c = 0; c < count; ++c) {
      for (std::size_t j = 0; j < n; ++j) gx[j] += g[c * n + j];
    }
  });
}

Var detach(const Var& x) { return x.graph().record(x.value(), "detach", false, nullptr); }

Tensor softmax_rows(const Tensor& x) {
  const std::size_t k = x.last_dim();
  const std::size_t rows = x.rows();
  Tensor out(x.shape(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data().data() + r * k;
    double* o = out.data().data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      o[j] = std::exp(row[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < k; ++j) o[j] /= z;
  }
  return out;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) {
    throw Error(ErrorKind::kDimension, "kl_divergence: length " + std::to_string(p.size()) + " vs " +
                                           std::to_string(q.size()));
  }
  auto check = [](std::span<const double> v, const char* name) {
    double total = 0.0;
    for (double x : v) {
      if (!(x >= 0.0) || !std::isfinite(x)) {
        throw Error(ErrorKind::kInput, std::string("kl_divergence: ") + name + " has a negative or non-finite entry");
      }
      total += x;
    }
    if (std::abs(total - 1.0) > 1e-6) {
      throw Error(ErrorKind::kInput, std::string("kl_divergence: ") + name + " does not sum to 1");
    }
  };
  check(p, "p");
  check(q, "q");
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    total += p[i] * (std::log(std::max(p[i], kProbFloor)) - std::log(std::max(q[i], kProbFloor)));
  }
  return std::max(total, 0.0);
}

}  // namespace reefl
