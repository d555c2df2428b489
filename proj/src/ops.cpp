#include "tbd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace tbd::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

// Gradient buffer of input i, or nullptr when that input takes no gradient.
std::vector<double>* grad_of(detail::Node& out, std::size_t i) {
  auto& p = out.inputs[i];
  if (!p || !p->requires_grad) return nullptr;
  return &p->ensure_grad();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

int last_dim(const Tensor& t) { return t.shape().back(); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
  return Tensor::make_result(a.shape(), std::move(v), {a, b}, [](detail::Node& out) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = grad_of(out, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
  return Tensor::make_result(a.shape(), std::move(v), {a, b}, [](detail::Node& out) {
    if (auto* g = grad_of(out, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i];
    }
    if (auto* g = grad_of(out, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= out.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
  return Tensor::make_result(a.shape(), std::move(v), {a, b}, [a, b](detail::Node& out) {
    if (auto* g = grad_of(out, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i] * b[i];
    }
    if (auto* g = grad_of(out, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i] * a[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * s;
  return Tensor::make_result(a.shape(), std::move(v), {a}, [s](detail::Node& out) {
    if (auto* g = grad_of(out, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i] * s;
    }
  });
}

Tensor add_channelwise(const Tensor& x, const Tensor& v) {
  if (x.rank() < 2) throw ShapeError("add_channelwise: x needs (N, C, ...)");
  const int n = x.dim(0);
  const int c = x.dim(1);
  const bool per_sample = v.rank() == 2;
  if (!((v.rank() == 1 && v.dim(0) == c) ||
        (per_sample && v.dim(0) == n && v.dim(1) == c))) {
    throw ShapeError("add_channelwise: " + shape_str(v.shape()) + " vs " +
                     shape_str(x.shape()));
  }
  const std::size_t inner = x.size() / (static_cast<std::size_t>(n) * c);
  std::vector<double> out(x.values());
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const double b = v[per_sample ? static_cast<std::size_t>(i) * c + ch : ch];
      double* p = out.data() + (static_cast<std::size_t>(i) * c + ch) * inner;
      for (std::size_t s = 0; s < inner; ++s) p[s] += b;
    }
  }
  return Tensor::make_result(
      x.shape(), std::move(out), {x, v}, [n, c, inner, per_sample](detail::Node& o) {
        if (auto* g = grad_of(o, 0)) {
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
        }
        if (auto* g = grad_of(o, 1)) {
          for (int i = 0; i < n; ++i) {
            for (int ch = 0; ch < c; ++ch) {
              const double* p = o.grad.data() + (static_cast<std::size_t>(i) * c + ch) * inner;
              double acc = 0.0;
              for (std::size_t s = 0; s < inner; ++s) acc += p[s];
              (*g)[per_sample ? static_cast<std::size_t>(i) * c + ch : ch] += acc;
            }
          }
        }
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (b.rank() != 2 || last_dim(a) != b.dim(0)) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const int k = b.dim(0);
  const int m = b.dim(1);
  const int rows = static_cast<int>(a.size() / k);
  std::vector<double> v(static_cast<std::size_t>(rows) * m);
  MatMap(v.data(), rows, m).noalias() =
      ConstMatMap(a.data().data(), rows, k) * ConstMatMap(b.data().data(), k, m);
  Shape shape = a.shape();
  shape.back() = m;
  return Tensor::make_result(shape, std::move(v), {a, b}, [a, b, rows, k, m](detail::Node& out) {
    ConstMatMap g(out.grad.data(), rows, m);
    if (auto* ga = grad_of(out, 0)) {
      MatMap(ga->data(), rows, k).noalias() += g * ConstMatMap(b.data().data(), k, m).transpose();
    }
    if (auto* gb = grad_of(out, 1)) {
      MatMap(gb->data(), k, m).noalias() += ConstMatMap(a.data().data(), rows, k).transpose() * g;
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  Tensor y = matmul(x, weight);
  if (!bias.defined()) return y;
  const int m = weight.dim(1);
  if (bias.rank() != 1 || bias.dim(0) != m) throw ShapeError("linear: bias shape");
  const std::size_t rows = y.size() / m;
  std::vector<double> v(y.values());
  for (std::size_t r = 0; r < rows; ++r) {
    for (int j = 0; j < m; ++j) v[r * m + j] += bias[j];
  }
  return Tensor::make_result(y.shape(), std::move(v), {y, bias}, [rows, m](detail::Node& out) {
    if (auto* g = grad_of(out, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i];
    }
    if (auto* g = grad_of(out, 1)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (int j = 0; j < m; ++j) (*g)[j] += out.grad[r * m + j];
      }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return Tensor::make_result(std::move(shape), x.values(), {x}, [](detail::Node& out) {
    if (auto* g = grad_of(out, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i];
    }
  });
}

namespace {

// For each output linear index, the matching input linear index.
std::vector<std::size_t> permute_index(const Shape& in_shape, const std::vector<int>& perm) {
  const std::size_t r = in_shape.size();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(r);
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[static_cast<std::size_t>(perm[i])];
    strides[i] = in_strides[static_cast<std::size_t>(perm[i])];
  }
  const std::size_t total = numel(in_shape);
  std::vector<std::size_t> map(total);
  std::vector<int> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < total; ++o) {
    map[o] = src;
    for (std::size_t d = r; d-- > 0;) {
      src += strides[d];
      if (++idx[d] < out_shape[d]) break;
      src -= strides[d] * static_cast<std::size_t>(out_shape[d]);
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  if (perm.size() != x.shape().size()) throw ShapeError("permute: rank mismatch");
  std::vector<int> check(perm);
  std::sort(check.begin(), check.end());
  for (std::size_t i = 0; i < check.size(); ++i) {
    if (check[i] != static_cast<int>(i)) throw ShapeError("permute: invalid axes");
  }
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = x.dim(perm[i]);
  auto map = std::make_shared<std::vector<std::size_t>>(permute_index(x.shape(), perm));
  std::vector<double> v(x.size());
  for (std::size_t o = 0; o < v.size(); ++o) v[o] = x[(*map)[o]];
  return Tensor::make_result(std::move(out_shape), std::move(v), {x}, [map](detail::Node& out) {
    if (auto* g = grad_of(out, 0)) {
      for (std::size_t o = 0; o < out.grad.size(); ++o) (*g)[(*map)[o]] += out.grad[o];
    }
  });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const int r = xs[0].rank();
  if (axis < 0) axis += r;
  Shape shape = xs[0].shape();
  int total_axis = 0;
  for (const auto& t : xs) {
    if (t.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < r; ++d) {
      if (d != axis && t.dim(d) != shape[d]) {
        throw ShapeError("concat: " + shape_str(t.shape()) + " vs " + shape_str(shape));
      }
    }
    total_axis += t.dim(axis);
  }
  shape[axis] = total_axis;
  std::size_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= shape[d];
  std::size_t inner = 1;
  for (int d = axis + 1; d < r; ++d) inner *= shape[d];
  std::vector<std::size_t> chunk;
  for (const auto& t : xs) chunk.push_back(static_cast<std::size_t>(t.dim(axis)) * inner);
  const std::size_t row = static_cast<std::size_t>(total_axis) * inner;
  std::vector<double> v(numel(shape));
  std::size_t offset = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double* src = xs[i].data().data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src + o * chunk[i], chunk[i], v.data() + o * row + offset);
    }
    offset += chunk[i];
  }
  return Tensor::make_result(shape, std::move(v), xs, [chunk, outer, row](detail::Node& out) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      if (auto* g = grad_of(out, i)) {
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = out.grad.data() + o * row + offset;
          double* dst = g->data() + o * chunk[i];
          for (std::size_t j = 0; j < chunk[i]; ++j) dst[j] += src[j];
        }
      }
      offset += chunk[i];
    }
  });
}

Tensor slice(const Tensor& x, int axis, int start, int length) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (start < 0 || length < 0 || start + length > x.dim(axis)) {
    throw ShapeError("slice: range out of bounds for " + shape_str(x.shape()));
  }
  Shape shape = x.shape();
  shape[axis] = length;
  std::size_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= shape[d];
  std::size_t inner = 1;
  for (int d = axis + 1; d < r; ++d) inner *= shape[d];
  const std::size_t in_row = static_cast<std::size_t>(x.dim(axis)) * inner;
  const std::size_t out_row = static_cast<std::size_t>(length) * inner;
  const std::size_t off = static_cast<std::size_t>(start) * inner;
  std::vector<double> v(outer * out_row);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().data() + o * in_row + off, out_row, v.data() + o * out_row);
  }
  return Tensor::make_result(shape, std::move(v), {x}, [outer, in_row, out_row, off](detail::Node& out) {
    if (auto* g = grad_of(out, 0)) {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < out_row; ++j) (*g)[o * in_row + off + j] += out.grad[o * out_row + j];
      }
    }
  });
}

Tensor repeat_leading(const Tensor& x, int times) {
  Shape shape{times};
  shape.insert(shape.end(), x.shape().begin(), x.shape().end());
  const std::size_t n = x.size();
  std::vector<double> v(n * static_cast<std::size_t>(times));
  for (int i = 0; i < times; ++i) std::copy_n(x.data().data(), n, v.data() + i * n);
  return Tensor::make_result(shape, std::move(v), {x}, [n, times](detail::Node& out) {
    if (auto* g = grad_of(out, 0)) {
      for (int i = 0; i < times; ++i) {
        for (std::size_t j = 0; j < n; ++j) (*g)[j] += out.grad[i * n + j];
      }
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride,
              int padding) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(1) != x.dim(1) ||
      weight.dim(2) != weight.dim(3)) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " weight " +
                     shape_str(weight.shape()));
  }
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int o = weight.dim(0), k = weight.dim(2);
  const int ho = (h + 2 * padding - k) / stride + 1;
  const int wo = (w + 2 * padding - k) / stride + 1;
  const int ck = c * k * k;
  const int hw = ho * wo;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != o)) throw ShapeError("conv2d: bias");

  auto cols = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * ck * hw, 0.0);
  for (int s = 0; s < n; ++s) {
    const double* xs = x.data().data() + static_cast<std::size_t>(s) * c * h * w;
    double* col = cols->data() + static_cast<std::size_t>(s) * ck * hw;
    for (int ch = 0; ch < c; ++ch) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          double* dst = col + (static_cast<std::size_t>(ch) * k * k + ky * k + kx) * hw;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= h) continue;
            const double* src = xs + (static_cast<std::size_t>(ch) * h + iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - padding + kx;
              if (ix >= 0 && ix < w) dst[oy * wo + ox] = src[ix];
            }
          }
        }
      }
    }
  }
  std::vector<double> v(static_cast<std::size_t>(n) * o * hw);
  ConstMatMap wmat(weight.data().data(), o, ck);
  for (int s = 0; s < n; ++s) {
    MatMap out(v.data() + static_cast<std::size_t>(s) * o * hw, o, hw);
    out.noalias() = wmat * ConstMatMap(cols->data() + static_cast<std::size_t>(s) * ck * hw, ck, hw);
    if (bias.defined()) {
      for (int oc = 0; oc < o; ++oc) out.row(oc).array() += bias[oc];
    }
  }
  return Tensor::make_result(
      {n, o, ho, wo}, std::move(v), {x, weight, bias},
      [=](detail::Node& outn) {
        auto* gx = grad_of(outn, 0);
        auto* gw = grad_of(outn, 1);
        auto* gb = grad_of(outn, 2);
        RowMat dcol;
        for (int s = 0; s < n; ++s) {
          ConstMatMap g(outn.grad.data() + static_cast<std::size_t>(s) * o * hw, o, hw);
          ConstMatMap col(cols->data() + static_cast<std::size_t>(s) * ck * hw, ck, hw);
          if (gw) MatMap(gw->data(), o, ck).noalias() += g * col.transpose();
          if (gb) {
            for (int oc = 0; oc < o; ++oc) (*gb)[oc] += g.row(oc).sum();
          }
          if (!gx) continue;
          dcol.noalias() = ConstMatMap(weight.data().data(), o, ck).transpose() * g;
          double* dxs = gx->data() + static_cast<std::size_t>(s) * c * h * w;
          for (int ch = 0; ch < c; ++ch) {
            for (int ky = 0; ky < k; ++ky) {
              for (int kx = 0; kx < k; ++kx) {
                const double* src = dcol.data() + (static_cast<std::size_t>(ch) * k * k + ky * k + kx) * hw;
                for (int oy = 0; oy < ho; ++oy) {
                  const int iy = oy * stride - padding + ky;
                  if (iy < 0 || iy >= h) continue;
                  double* dst = dxs + (static_cast<std::size_t>(ch) * h + iy) * w;
                  for (int ox = 0; ox < wo; ++ox) {
                    const int ix = ox * stride - padding + kx;
                    if (ix >= 0 && ix < w) dst[ix] += src[oy * wo + ox];
                  }
                }
              }
            }
          }
        }
      });
}

Tensor upsample_nearest2x(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("upsample: expects (N, C, H, W)");
  const int nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<double> v(x.size() * 4);
  for (int p = 0; p < nc; ++p) {
    for (int y = 0; y < 2 * h; ++y) {
      for (int xx = 0; xx < 2 * w; ++xx) {
        v[(static_cast<std::size_t>(p) * 2 * h + y) * 2 * w + xx] =
            x[(static_cast<std::size_t>(p) * h + y / 2) * w + xx / 2];
      }
    }
  }
  return Tensor::make_result({x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(v), {x},
                             [nc, h, w](detail::Node& out) {
                               if (auto* g = grad_of(out, 0)) {
                                 for (int p = 0; p < nc; ++p) {
                                   for (int y = 0; y < 2 * h; ++y) {
                                     for (int xx = 0; xx < 2 * w; ++xx) {
                                       (*g)[(static_cast<std::size_t>(p) * h + y / 2) * w + xx / 2] +=
                                           out.grad[(static_cast<std::size_t>(p) * 2 * h + y) * 2 * w + xx];
                                     }
                                   }
                                 }
                               }
                             });
}

namespace {

// Shared normalization kernel: `rows` independent blocks of `len` elements;
// channel (for the affine params) of element j in row r is given by chan(r, j).
template <typename ChanFn>
Tensor normalize_blocks(const Tensor& x, std::size_t rows, std::size_t len, const Tensor& gamma,
                        const Tensor& beta, double eps, ChanFn chan) {
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> v(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = x.data().data() + r * len;
    double mean = 0.0;
    for (std::size_t j = 0; j < len; ++j) mean += src[j];
    mean /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t j = 0; j < len; ++j) var += (src[j] - mean) * (src[j] - mean);
    var /= static_cast<double>(len);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < len; ++j) {
      const double xh = (src[j] - mean) * is;
      (*xhat)[r * len + j] = xh;
      const int ch = chan(r, j);
      v[r * len + j] = gamma[ch] * xh + beta[ch];
    }
  }
  return Tensor::make_result(x.shape(), std::move(v), {x, gamma, beta},
                             [=](detail::Node& out) {
                               auto* gx = grad_of(out, 0);
                               auto* gg = grad_of(out, 1);
                               auto* gbeta = grad_of(out, 2);
                               std::vector<double> dxh(len);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 double sum_d = 0.0, sum_dx = 0.0;
                                 for (std::size_t j = 0; j < len; ++j) {
                                   const std::size_t i = r * len + j;
                                   const int ch = chan(r, j);
                                   const double g = out.grad[i];
                                   if (gg) (*gg)[ch] += g * (*xhat)[i];
                                   if (gbeta) (*gbeta)[ch] += g;
                                   dxh[j] = g * gamma[ch];
                                   sum_d += dxh[j];
                                   sum_dx += dxh[j] * (*xhat)[i];
                                 }
                                 if (!gx) continue;
                                 const double inv_len = 1.0 / static_cast<double>(len);
                                 for (std::size_t j = 0; j < len; ++j) {
                                   const std::size_t i = r * len + j;
                                   (*gx)[i] += (*inv_std)[r] * (dxh[j] - inv_len * sum_d -
                                                                (*xhat)[i] * inv_len * sum_dx);
                                 }
                               }
                             });
}

}  // namespace

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  if (x.rank() < 2) throw ShapeError("group_norm: expects (N, C, ...)");
  const int n = x.dim(0), c = x.dim(1);
  if (groups <= 0 || c % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  if (gamma.size() != static_cast<std::size_t>(c) || beta.size() != static_cast<std::size_t>(c)) {
    throw ShapeError("group_norm: affine parameter size");
  }
  const std::size_t spatial = x.size() / (static_cast<std::size_t>(n) * c);
  const int per_group = c / groups;
  const std::size_t len = spatial * per_group;
  return normalize_blocks(x, static_cast<std::size_t>(n) * groups, len, gamma, beta, eps,
                          [groups, per_group, spatial](std::size_t r, std::size_t j) {
                            return static_cast<int>(r % groups) * per_group +
                                   static_cast<int>(j / spatial);
                          });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const int d = x.shape().back();
  if (gamma.size() != static_cast<std::size_t>(d) || beta.size() != static_cast<std::size_t>(d)) {
    throw ShapeError("layer_norm: affine parameter size");
  }
  return normalize_blocks(x, x.size() / d, d, gamma, beta, eps,
                          [](std::size_t, std::size_t j) { return static_cast<int>(j); });
}

namespace {

using ArrayMap = Eigen::Map<Eigen::ArrayXd>;
using ConstArrayMap = Eigen::Map<const Eigen::ArrayXd>;

// x * sigmoid(k x) and its derivative; k = 1 is SiLU, k = 1.702 the GELU fit.
Tensor sigmoid_gate(const Tensor& x, double k) {
  const auto n = static_cast<Eigen::Index>(x.size());
  auto sig = std::make_shared<std::vector<double>>(x.size());
  ConstArrayMap xa(x.data().data(), n);
  ArrayMap sa(sig->data(), n);
  sa = 1.0 / (1.0 + (-k * xa).exp());
  std::vector<double> v(x.size());
  ArrayMap(v.data(), n) = xa * sa;
  return Tensor::make_result(x.shape(), std::move(v), {x}, [x, sig, k, n](detail::Node& out) {
    if (auto* g = grad_of(out, 0)) {
      ConstArrayMap xa(x.data().data(), n);
      ConstArrayMap sa(sig->data(), n);
      ArrayMap(g->data(), n) += ConstArrayMap(out.grad.data(), n) * sa * (1.0 + k * xa * (1.0 - sa));
    }
  });
}

}  // namespace

Tensor silu(const Tensor& x) { return sigmoid_gate(x, 1.0); }

Tensor gelu(const Tensor& x) { return sigmoid_gate(x, 1.702); }

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) {
    throw ShapeError("attention: expects rank-3 tensors");
  }
  const int b = q.dim(0), nq = q.dim(1), d = q.dim(2);
  const int bk = k.dim(0), nk = k.dim(1);
  if (k.shape() != v.shape() || k.dim(2) != d || (bk != b && bk != 1)) {
    throw ShapeError("attention: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) +
                     " v " + shape_str(v.shape()));
  }
  if (heads <= 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  const int dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t pstride = static_cast<std::size_t>(nq) * nk;
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(b) * heads * pstride);
  // Blocked GEMM setup dominates for the tiny per-row and per-pixel problems.
  const bool small = static_cast<long>(nq) * nk * dh <= 32768;
  std::vector<double> out(q.size());
  // Keys of each (batch, head) sorted by their (k, v) rows. Summing in this
  // order makes the output bit-identical under any permutation of the keys.
  std::vector<RowMat> ks(static_cast<std::size_t>(bk) * heads), vs(ks.size());
  std::vector<std::vector<int>> order(ks.size());
  for (int kb = 0; kb < bk; ++kb) {
    for (int h = 0; h < heads; ++h) {
      const std::size_t slot = static_cast<std::size_t>(kb) * heads + h;
      const double* kp = k.data().data() + static_cast<std::size_t>(kb) * nk * d + h * dh;
      const double* vp = v.data().data() + static_cast<std::size_t>(kb) * nk * d + h * dh;
      auto& ord = order[slot];
      ord.resize(static_cast<std::size_t>(nk));
      std::iota(ord.begin(), ord.end(), 0);
      std::sort(ord.begin(), ord.end(), [&](int x, int y) {
        const double *kx = kp + static_cast<std::size_t>(x) * d, *ky = kp + static_cast<std::size_t>(y) * d;
        if (std::lexicographical_compare(kx, kx + dh, ky, ky + dh)) return true;
        if (std::lexicographical_compare(ky, ky + dh, kx, kx + dh)) return false;
        const double *vx = vp + static_cast<std::size_t>(x) * d, *vy = vp + static_cast<std::size_t>(y) * d;
        return std::lexicographical_compare(vx, vx + dh, vy, vy + dh);
      });
      ks[slot].resize(nk, dh);
      vs[slot].resize(nk, dh);
      for (int j = 0; j < nk; ++j) {
        const std::size_t src = static_cast<std::size_t>(ord[static_cast<std::size_t>(j)]) * d;
        std::copy(kp + src, kp + src + dh, ks[slot].row(j).data());
        std::copy(vp + src, vp + src + dh, vs[slot].row(j).data());
      }
    }
  }
  RowMat ps;
  for (int bi = 0; bi < b; ++bi) {
    const std::size_t kb = bk == 1 ? 0 : static_cast<std::size_t>(bi);
    for (int h = 0; h < heads; ++h) {
      const std::size_t slot = kb * heads + h;
      ConstStridedMap qh(q.data().data() + static_cast<std::size_t>(bi) * nq * d + h * dh, nq, dh,
                         Eigen::OuterStride<>(d));
      const RowMat& kh = ks[slot];
      const RowMat& vh = vs[slot];
      if (small) {
        ps.noalias() = qh.lazyProduct(kh.transpose()) * sc;
      } else {
        ps.noalias() = (qh * kh.transpose()) * sc;
      }
      for (int r = 0; r < nq; ++r) {
        const double mx = ps.row(r).maxCoeff();
        ps.row(r) = (ps.row(r).array() - mx).exp();
        ps.row(r) /= ps.row(r).sum();
      }
      StridedMap oh(out.data() + static_cast<std::size_t>(bi) * nq * d + h * dh, nq, dh,
                    Eigen::OuterStride<>(d));
      if (small) {
        oh.noalias() = ps.lazyProduct(vh);
      } else {
        oh.noalias() = ps * vh;
      }
      MatMap p(probs->data() + (static_cast<std::size_t>(bi) * heads + h) * pstride, nq, nk);
      const auto& ord = order[slot];
      for (int j = 0; j < nk; ++j) p.col(ord[static_cast<std::size_t>(j)]) = ps.col(j);
    }
  }
  return Tensor::make_result(
      q.shape(), std::move(out), {q, k, v}, [=](detail::Node& o) {
        auto* gq = grad_of(o, 0);
        auto* gk = grad_of(o, 1);
        auto* gv = grad_of(o, 2);
        RowMat dp, ds;
        for (int bi = 0; bi < b; ++bi) {
          const std::size_t kb = bk == 1 ? 0 : static_cast<std::size_t>(bi);
          for (int h = 0; h < heads; ++h) {
            const std::size_t qoff = static_cast<std::size_t>(bi) * nq * d + h * dh;
            const std::size_t koff = kb * nk * d + h * dh;
            ConstStridedMap go(o.grad.data() + qoff, nq, dh, Eigen::OuterStride<>(d));
            ConstMatMap p(probs->data() + (static_cast<std::size_t>(bi) * heads + h) * pstride, nq, nk);
            ConstStridedMap qh(q.data().data() + qoff, nq, dh, Eigen::OuterStride<>(d));
            ConstStridedMap kh(k.data().data() + koff, nk, dh, Eigen::OuterStride<>(d));
            ConstStridedMap vh(v.data().data() + koff, nk, dh, Eigen::OuterStride<>(d));
            if (gv) {
              StridedMap gvh(gv->data() + koff, nk, dh, Eigen::OuterStride<>(d));
              if (small) {
                gvh.noalias() += p.transpose().lazyProduct(go);
              } else {
                gvh.noalias() += p.transpose() * go;
              }
            }
            if (!gq && !gk) continue;
            if (small) {
              dp.noalias() = go.lazyProduct(vh.transpose());
            } else {
              dp.noalias() = go * vh.transpose();
            }
            ds.resize(nq, nk);
            for (int r = 0; r < nq; ++r) {
              const double dot = p.row(r).dot(dp.row(r));
              ds.row(r) = p.row(r).array() * (dp.row(r).array() - dot) * sc;
            }
            if (gq) {
              StridedMap gqh(gq->data() + qoff, nq, dh, Eigen::OuterStride<>(d));
              if (small) {
                gqh.noalias() += ds.lazyProduct(kh);
              } else {
                gqh.noalias() += ds * kh;
              }
            }
            if (gk) {
              StridedMap gkh(gk->data() + koff, nk, dh, Eigen::OuterStride<>(d));
              if (small) {
                gkh.noalias() += ds.transpose().lazyProduct(qh);
              } else {
                gkh.noalias() += ds.transpose() * qh;
              }
            }
          }
        }
      });
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be (V, D)");
  const int vocab = table.dim(0), d = table.dim(1);
  std::vector<double> v(ids.size() * static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) throw ShapeError("embedding: id out of range");
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, v.data() + i * d);
  }
  return Tensor::make_result({static_cast<int>(ids.size()), d}, std::move(v), {table},
                             [ids, d](detail::Node& out) {
                               if (auto* g = grad_of(out, 0)) {
                                 for (std::size_t i = 0; i < ids.size(); ++i) {
                                   for (int j = 0; j < d; ++j) {
                                     (*g)[static_cast<std::size_t>(ids[i]) * d + j] += out.grad[i * d + j];
                                   }
                                 }
                               }
                             });
}

Tensor blend(const Tensor& a, const Tensor& b, double alpha) {
  require_same_shape(a, b, "blend");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::lerp(b[i], a[i], alpha);
  return Tensor::make_result(a.shape(), std::move(v), {a, b}, [alpha](detail::Node& out) {
    if (auto* g = grad_of(out, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += alpha * out.grad[i];
    }
    if (auto* g = grad_of(out, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += (1.0 - alpha) * out.grad[i];
    }
  });
}

Tensor squared_error(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "squared_error");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - target[i];
    acc += e * e;
  }
  return Tensor::make_result({1}, {acc}, {pred, target}, [pred, target](detail::Node& out) {
    const double g0 = out.grad[0];
    if (auto* g = grad_of(out, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += 2.0 * (pred[i] - target[i]) * g0;
    }
    if (auto* g = grad_of(out, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= 2.0 * (pred[i] - target[i]) * g0;
    }
  });
}

Tensor sum(const Tensor& x) {
  const double acc = std::accumulate(x.data().begin(), x.data().end(), 0.0);
  return Tensor::make_result({1}, {acc}, {x}, [](detail::Node& out) {
    if (auto* g = grad_of(out, 0)) {
      for (double& v : *g) v += out.grad[0];
    }
  });
}

}  // namespace tbd::ops
