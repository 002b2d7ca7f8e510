#include "pulsereg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <string>

namespace pulsereg {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

constexpr std::int64_t kChunkTarget = 2048;

const char* weight_axis_name(std::size_t axis) {
  static constexpr std::array<const char*, 5> names{"out_channel", "in_channel", "kz", "ky", "kx"};
  return axis < names.size() ? names[axis] : "?";
}

void require_rank(const Shape& s, std::int64_t rank, const char* op, const char* what) {
  if (static_cast<std::int64_t>(s.size()) != rank)
    throw InvalidArgument(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                          to_string(s));
}

struct ConvGeometry {
  std::int64_t cin, d, h, w;
  std::int64_t cout, k;
  std::int64_t od, oh, ow;
  int stride, pad;
  [[nodiscard]] std::int64_t kernel_rows() const { return cin * k * k * k; }
  [[nodiscard]] std::int64_t out_voxels() const { return od * oh * ow; }
};

// Fills col (K x rows*ow, row-major) for output rows [r0, r0 + nr), where a
// row is one (oz, oy) pair.
template <typename T>
void im2col(const ConvGeometry& c, const T* in, std::int64_t r0, std::int64_t nr, T* col) {
  const std::int64_t mo = nr * c.ow;
  for (std::int64_t ci = 0; ci < c.cin; ++ci)
    for (std::int64_t kz = 0; kz < c.k; ++kz)
      for (std::int64_t ky = 0; ky < c.k; ++ky)
        for (std::int64_t kx = 0; kx < c.k; ++kx) {
          T* dst = col + (((ci * c.k + kz) * c.k + ky) * c.k + kx) * mo;
          for (std::int64_t r = 0; r < nr; ++r) {
            const std::int64_t oz = (r0 + r) / c.oh, oy = (r0 + r) % c.oh;
            const std::int64_t iz = oz * c.stride - c.pad + kz, iy = oy * c.stride - c.pad + ky;
            T* row = dst + r * c.ow;
            if (iz < 0 || iz >= c.d || iy < 0 || iy >= c.h) {
              std::fill(row, row + c.ow, T{});
              continue;
            }
            const T* src = in + ((ci * c.d + iz) * c.h + iy) * c.w;
            if (c.stride == 1) {
              const std::int64_t off = kx - c.pad;
              const std::int64_t lo = std::max<std::int64_t>(0, -off);
              const std::int64_t hi = std::min<std::int64_t>(c.ow, c.w - off);
              std::fill(row, row + std::min(lo, c.ow), T{});
              if (hi > lo) std::copy(src + lo + off, src + hi + off, row + lo);
              if (hi < c.ow) std::fill(row + std::max(hi, lo), row + c.ow, T{});
            } else {
              for (std::int64_t ox = 0; ox < c.ow; ++ox) {
                const std::int64_t ix = ox * c.stride - c.pad + kx;
                row[ox] = (ix >= 0 && ix < c.w) ? src[ix] : T{};
              }
            }
          }
        }
}

template <typename T>
void col2im_add(const ConvGeometry& c, const T* col, std::int64_t r0, std::int64_t nr, T* gin) {
  const std::int64_t mo = nr * c.ow;
  for (std::int64_t ci = 0; ci < c.cin; ++ci)
    for (std::int64_t kz = 0; kz < c.k; ++kz)
      for (std::int64_t ky = 0; ky < c.k; ++ky)
        for (std::int64_t kx = 0; kx < c.k; ++kx) {
          const T* srcrow = col + (((ci * c.k + kz) * c.k + ky) * c.k + kx) * mo;
          for (std::int64_t r = 0; r < nr; ++r) {
            const std::int64_t oz = (r0 + r) / c.oh, oy = (r0 + r) % c.oh;
            const std::int64_t iz = oz * c.stride - c.pad + kz, iy = oy * c.stride - c.pad + ky;
            if (iz < 0 || iz >= c.d || iy < 0 || iy >= c.h) continue;
            T* dst = gin + ((ci * c.d + iz) * c.h + iy) * c.w;
            const T* row = srcrow + r * c.ow;
            for (std::int64_t ox = 0; ox < c.ow; ++ox) {
              const std::int64_t ix = ox * c.stride - c.pad + kx;
              if (ix >= 0 && ix < c.w) dst[ix] += row[ox];
            }
          }
        }
}

}  // namespace

const char* image_axis_name(std::size_t axis) {
  static constexpr std::array<const char*, 4> names{"channel", "z", "y", "x"};
  return axis < names.size() ? names[axis] : "?";
}

template <typename T>
Tensor<T> conv3(Graph<T>& g, const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias, int stride,
                int padding) {
  require_rank(input.shape(), 4, "conv3", "input");
  require_rank(weights.shape(), 5, "conv3", "weights");
  const auto& ws = weights.shape();
  const auto& is = input.shape();
  if (ws[2] != ws[3] || ws[2] != ws[4])
    throw InvalidArgument("conv3: kernel must be cubic, got " + to_string(ws) + " (axis " + weight_axis_name(3) + "/" +
                          weight_axis_name(4) + ")");
  if (ws[1] != is[0])
    throw InvalidArgument("conv3: axis " + std::string(weight_axis_name(1)) + " of weights (" + std::to_string(ws[1]) +
                          ") does not match axis channel of input (" + std::to_string(is[0]) + ")");
  if (bias.shape() != Shape{ws[0]})
    throw InvalidArgument("conv3: bias shape " + to_string(bias.shape()) + " does not match axis out_channel (" +
                          std::to_string(ws[0]) + ")");
  if (stride < 1 || padding < 0) throw InvalidArgument("conv3: stride must be >= 1 and padding >= 0");

  ConvGeometry c{is[0], is[1], is[2], is[3], ws[0], ws[2], 0, 0, 0, stride, padding};
  const auto out_extent = [&](std::int64_t in, std::size_t axis) {
    const std::int64_t span = in + 2 * padding - c.k;
    if (span < 0)
      throw InvalidArgument("conv3: axis " + std::string(image_axis_name(axis)) + " extent " + std::to_string(in) +
                            " is smaller than the kernel");
    return span / stride + 1;
  };
  c.od = out_extent(c.d, 1);
  c.oh = out_extent(c.h, 2);
  c.ow = out_extent(c.w, 3);

  const std::int64_t vout = c.out_voxels();
  const std::int64_t krows = c.kernel_rows();
  const std::int64_t rows_total = c.od * c.oh;
  const std::int64_t rows_per_chunk = std::max<std::int64_t>(1, kChunkTarget / c.ow);

  Array<T> out(Shape{c.cout, c.od, c.oh, c.ow});
  {
    Eigen::Map<const RowMat<T>> wmat(weights.value().data(), c.cout, krows);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bvec(bias.value().data(), c.cout);
    std::vector<T> col(static_cast<std::size_t>(krows * rows_per_chunk * c.ow));
    for (std::int64_t r0 = 0; r0 < rows_total; r0 += rows_per_chunk) {
      const std::int64_t nr = std::min(rows_per_chunk, rows_total - r0);
      const std::int64_t mo = nr * c.ow;
      im2col(c, input.value().data(), r0, nr, col.data());
      Eigen::Map<const RowMat<T>> colmat(col.data(), krows, mo);
      StridedMap<T> o(out.data() + r0 * c.ow, c.cout, mo, Eigen::OuterStride<>(vout));
      o.noalias() = wmat * colmat;
      o.colwise() += bvec;
    }
  }

  Tensor<T> result(std::move(out), any_requires_grad<T>({&input, &weights, &bias}));
  if (!result.requires_grad()) return result;

  g.record(result, [c, input, weights, bias, result, rows_total, rows_per_chunk, krows, vout]() mutable {
    const auto& gout = result.grad();
    const bool need_in = input.requires_grad(), need_w = weights.requires_grad(), need_b = bias.requires_grad();
    Eigen::Map<const RowMat<T>> wmat(weights.value().data(), c.cout, krows);
    T* gin = need_in ? input.grad_buffer().data() : nullptr;
    T* gw = need_w ? weights.grad_buffer().data() : nullptr;
    T* gb = need_b ? bias.grad_buffer().data() : nullptr;
    std::vector<T> col(static_cast<std::size_t>(krows * rows_per_chunk * c.ow));
    std::vector<T> dcol(need_in ? col.size() : 0);
    for (std::int64_t r0 = 0; r0 < rows_total; r0 += rows_per_chunk) {
      const std::int64_t nr = std::min(rows_per_chunk, rows_total - r0);
      const std::int64_t mo = nr * c.ow;
      ConstStridedMap<T> go(gout.data() + r0 * c.ow, c.cout, mo, Eigen::OuterStride<>(vout));
      if (need_b) {
        // Plain loop: Eigen's vectorized reduction order depends on buffer alignment.
        for (std::int64_t co = 0; co < c.cout; ++co) {
          T s{};
          for (std::int64_t j = 0; j < mo; ++j) s += go(co, j);
          gb[co] += s;
        }
      }
      if (need_w) {
        im2col(c, input.value().data(), r0, nr, col.data());
        Eigen::Map<const RowMat<T>> colmat(col.data(), krows, mo);
        Eigen::Map<RowMat<T>> gwmat(gw, c.cout, krows);
        gwmat.noalias() += go * colmat.transpose();
      }
      if (need_in) {
        Eigen::Map<RowMat<T>> dc(dcol.data(), krows, mo);
        dc.noalias() = wmat.transpose() * go;
        col2im_add(c, dcol.data(), r0, nr, gin);
      }
    }
  });
  return result;
}

template <typename T>
Tensor<T> tconv3(Graph<T>& g, const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias, int stride,
                 std::span<const std::int64_t> target) {
  require_rank(input.shape(), 4, "tconv3", "input");
  require_rank(weights.shape(), 5, "tconv3", "weights");
  const auto& ws = weights.shape();
  const auto& is = input.shape();
  if (ws[0] != is[0])
    throw InvalidArgument("tconv3: axis in_channel of weights (" + std::to_string(ws[0]) +
                          ") does not match axis channel of input (" + std::to_string(is[0]) + ")");
  const std::int64_t k = ws[2];
  if (ws[3] != k || ws[4] != k) throw InvalidArgument("tconv3: kernel must be cubic, got " + to_string(ws));
  if (stride != k)
    throw InvalidArgument("tconv3: kernel extent " + std::to_string(k) + " must equal stride " + std::to_string(stride));
  const std::int64_t cin = is[0], cout = ws[1];
  if (bias.shape() != Shape{cout})
    throw InvalidArgument("tconv3: bias shape " + to_string(bias.shape()) + " does not match output channels");
  const std::int64_t d = is[1], h = is[2], w = is[3];
  const std::int64_t od = d * k, oh = h * k, ow = w * k;
  if (!target.empty()) {
    if (target.size() != 3) throw InvalidArgument("tconv3: target must list (D, H, W)");
    const std::array<std::int64_t, 3> produced{od, oh, ow};
    for (std::size_t a = 0; a < 3; ++a)
      if (target[a] != produced[a])
        throw InvalidArgument("tconv3: axis " + std::string(image_axis_name(a + 1)) + " target extent " +
                              std::to_string(target[a]) + " is not " + std::to_string(k) + "x the input extent " +
                              std::to_string(produced[a] / k));
  }

  const std::int64_t k3 = k * k * k;
  const std::int64_t v = d * h * w;
  const std::int64_t vout = od * oh * ow;
  // wt(co * k3 + t, ci) = W[ci, co, t]
  RowMat<T> wt(cout * k3, cin);
  for (std::int64_t ci = 0; ci < cin; ++ci)
    for (std::int64_t co = 0; co < cout; ++co)
      for (std::int64_t t = 0; t < k3; ++t) wt(co * k3 + t, ci) = weights.value().values[(ci * cout + co) * k3 + t];

  const auto scatter_index = [=](std::int64_t co, std::int64_t t, std::int64_t vi) {
    const std::int64_t z = vi / (h * w), y = (vi / w) % h, x = vi % w;
    const std::int64_t a = t / (k * k), b = (t / k) % k, cc = t % k;
    return ((co * od + z * k + a) * oh + y * k + b) * ow + x * k + cc;
  };

  Array<T> out(Shape{cout, od, oh, ow});
  const std::int64_t chunk = std::max<std::int64_t>(1, kChunkTarget);
  {
    RowMat<T> tmp;
    for (std::int64_t v0 = 0; v0 < v; v0 += chunk) {
      const std::int64_t nv = std::min(chunk, v - v0);
      ConstStridedMap<T> xin(input.value().data() + v0, cin, nv, Eigen::OuterStride<>(v));
      tmp.noalias() = wt * xin;
      for (std::int64_t co = 0; co < cout; ++co) {
        const T bv = bias.value().values[co];
        for (std::int64_t t = 0; t < k3; ++t)
          for (std::int64_t j = 0; j < nv; ++j) out.values[scatter_index(co, t, v0 + j)] = tmp(co * k3 + t, j) + bv;
      }
    }
  }

  Tensor<T> result(std::move(out), any_requires_grad<T>({&input, &weights, &bias}));
  if (!result.requires_grad()) return result;

  g.record(result, [=, wt = std::move(wt)]() mutable {
    const auto& gout = result.grad();
    const bool need_in = input.requires_grad(), need_w = weights.requires_grad();
    if (bias.requires_grad()) {
      auto& gb = bias.grad_buffer();
      for (std::int64_t co = 0; co < cout; ++co) {
        T s{};
        for (std::int64_t i = 0; i < vout; ++i) s += gout[co * vout + i];
        gb[co] += s;
      }
    }
    if (!need_in && !need_w) return;
    RowMat<T> dtmp(cout * k3, chunk);
    RowMat<T> dwt = RowMat<T>::Zero(cout * k3, cin);
    for (std::int64_t v0 = 0; v0 < v; v0 += chunk) {
      const std::int64_t nv = std::min(chunk, v - v0);
      for (std::int64_t co = 0; co < cout; ++co)
        for (std::int64_t t = 0; t < k3; ++t)
          for (std::int64_t j = 0; j < nv; ++j) dtmp(co * k3 + t, j) = gout[scatter_index(co, t, v0 + j)];
      auto dblock = dtmp.leftCols(nv);
      if (need_in) {
        StridedMap<T> gi(input.grad_buffer().data() + v0, cin, nv, Eigen::OuterStride<>(v));
        gi.noalias() += wt.transpose() * dblock;
      }
      if (need_w) {
        ConstStridedMap<T> xin(input.value().data() + v0, cin, nv, Eigen::OuterStride<>(v));
        dwt.noalias() += dblock * xin.transpose();
      }
    }
    if (need_w) {
      auto& gw = weights.grad_buffer();
      for (std::int64_t ci = 0; ci < cin; ++ci)
        for (std::int64_t co = 0; co < cout; ++co)
          for (std::int64_t t = 0; t < k3; ++t) gw[(ci * cout + co) * k3 + t] += dwt(co * k3 + t, ci);
    }
  });
  return result;
}

template <typename T>
Tensor<T> avgpool3(Graph<T>& g, const Tensor<T>& input) {
  require_rank(input.shape(), 4, "avgpool3", "input");
  const auto& s = input.shape();
  for (std::size_t a = 1; a < 4; ++a)
    if (s[a] % 2 != 0)
      throw InvalidArgument("avgpool3: axis " + std::string(image_axis_name(a)) + " has odd extent " +
                            std::to_string(s[a]) + "; pad before pooling");
  const std::int64_t c = s[0], d = s[1], h = s[2], w = s[3];
  const std::int64_t od = d / 2, oh = h / 2, ow = w / 2;
  Array<T> out(Shape{c, od, oh, ow});
  const auto& in = input.value();
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t z = 0; z < od; ++z)
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t x = 0; x < ow; ++x) {
          T acc{};
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) acc += in(ch, 2 * z + dz, 2 * y + dy, 2 * x + dx);
          out(ch, z, y, x) = acc / T{8};
        }
  Tensor<T> result(std::move(out), input.requires_grad());
  if (!result.requires_grad()) return result;
  g.record(result, [input, result, c, od, oh, ow, h, w, d]() mutable {
    const auto& gout = result.grad();
    auto& gin = input.grad_buffer();
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t z = 0; z < od; ++z)
        for (std::int64_t y = 0; y < oh; ++y)
          for (std::int64_t x = 0; x < ow; ++x) {
            const T gv = gout[((ch * od + z) * oh + y) * ow + x] / T{8};
            for (int dz = 0; dz < 2; ++dz)
              for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) gin[((ch * d + 2 * z + dz) * h + 2 * y + dy) * w + 2 * x + dx] += gv;
          }
  });
  return result;
}

template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != sb.size())
    throw InvalidArgument("add: rank mismatch " + to_string(sa) + " vs " + to_string(sb));
  for (std::size_t i = 0; i < sa.size(); ++i)
    if (sa[i] != sb[i])
      throw InvalidArgument("add: extent mismatch on axis " +
                            std::string(sa.size() == 4 ? image_axis_name(i) : std::to_string(i).c_str()) + " (" +
                            std::to_string(sa[i]) + " vs " + std::to_string(sb[i]) + ")");
  Array<T> out(sa);
  const auto& va = a.value().values;
  const auto& vb = b.value().values;
  for (std::size_t i = 0; i < va.size(); ++i) out.values[i] = va[i] + vb[i];
  Tensor<T> result(std::move(out), any_requires_grad<T>({&a, &b}));
  if (!result.requires_grad()) return result;
  g.record(result, [a, b, result]() mutable {
    const auto& go = result.grad();
    for (const Tensor<T>* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto& gi = t->grad_buffer();
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
    }
  });
  return result;
}

template <typename T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& a) {
  Array<T> out(a.shape());
  const auto& va = a.value().values;
  for (std::size_t i = 0; i < va.size(); ++i) out.values[i] = va[i] > T{0} ? va[i] : T{0};
  Tensor<T> result(std::move(out), a.requires_grad());
  if (!result.requires_grad()) return result;
  g.record(result, [a, result]() mutable {
    const auto& go = result.grad();
    const auto& va = a.value().values;
    auto& gi = a.grad_buffer();
    for (std::size_t i = 0; i < go.size(); ++i)
      if (va[i] > T{0}) gi[i] += go[i];
  });
  return result;
}

template <typename T>
Tensor<T> slice_channels(Graph<T>& g, const Tensor<T>& a, std::int64_t first, std::int64_t count) {
  require_rank(a.shape(), 4, "slice_channels", "input");
  Tensor<T> result(channel_slice(a.value(), first, count), a.requires_grad());
  if (!result.requires_grad()) return result;
  const std::int64_t offset = first * a.value().voxels();
  g.record(result, [a, result, offset]() mutable {
    const auto& go = result.grad();
    auto& gi = a.grad_buffer();
    for (std::size_t i = 0; i < go.size(); ++i) gi[offset + i] += go[i];
  });
  return result;
}

template <typename T>
Tensor<T> linear_combination(Graph<T>& g, std::span<const Tensor<T>> terms, std::span<const double> weights,
                             double bias) {
  if (terms.size() != weights.size())
    throw InvalidArgument("linear_combination: " + std::to_string(terms.size()) + " terms but " +
                          std::to_string(weights.size()) + " weights");
  double acc = bias;
  bool needs = false;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    acc += weights[i] * static_cast<double>(terms[i].item());
    needs = needs || terms[i].requires_grad();
  }
  Tensor<T> result(Array<T>(Shape{1}, static_cast<T>(acc)), needs);
  if (!needs) return result;
  std::vector<Tensor<T>> ts(terms.begin(), terms.end());
  std::vector<double> ws(weights.begin(), weights.end());
  g.record(result, [ts, ws, result]() mutable {
    const T go = result.grad()[0];
    for (std::size_t i = 0; i < ts.size(); ++i)
      if (ts[i].requires_grad()) ts[i].grad_buffer()[0] += static_cast<T>(ws[i]) * go;
  });
  return result;
}

template <typename T>
Tensor<T> dot_const(Graph<T>& g, const Tensor<T>& a, const Array<T>& x) {
  if (a.shape() != x.shape)
    throw InvalidArgument("dot_const: shape " + to_string(a.shape()) + " vs " + to_string(x.shape));
  double acc = 0;
  const auto& va = a.value().values;
  for (std::size_t i = 0; i < va.size(); ++i) acc += static_cast<double>(va[i]) * static_cast<double>(x.values[i]);
  Tensor<T> result(Array<T>(Shape{1}, static_cast<T>(acc)), a.requires_grad());
  if (!result.requires_grad()) return result;
  g.record(result, [a, x, result]() mutable {
    const T go = result.grad()[0];
    auto& gi = a.grad_buffer();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go * x.values[i];
  });
  return result;
}

template <typename T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& a) {
  double acc = 0;
  for (const T v : a.value().values) acc += static_cast<double>(v);
  Tensor<T> result(Array<T>(Shape{1}, static_cast<T>(acc)), a.requires_grad());
  if (!result.requires_grad()) return result;
  g.record(result, [a, result]() mutable {
    const T go = result.grad()[0];
    for (auto& gi : a.grad_buffer()) gi += go;
  });
  return result;
}

#define PULSEREG_INSTANTIATE_OPS(T)                                                                                   \
  template Tensor<T> conv3(Graph<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);               \
  template Tensor<T> tconv3(Graph<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int,                    \
                            std::span<const std::int64_t>);                                                          \
  template Tensor<T> avgpool3(Graph<T>&, const Tensor<T>&);                                                          \
  template Tensor<T> add(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> relu(Graph<T>&, const Tensor<T>&);                                                              \
  template Tensor<T> slice_channels(Graph<T>&, const Tensor<T>&, std::int64_t, std::int64_t);                        \
  template Tensor<T> linear_combination(Graph<T>&, std::span<const Tensor<T>>, std::span<const double>, double);     \
  template Tensor<T> dot_const(Graph<T>&, const Tensor<T>&, const Array<T>&);                                        \
  template Tensor<T> sum(Graph<T>&, const Tensor<T>&);

PULSEREG_INSTANTIATE_OPS(float)
PULSEREG_INSTANTIATE_OPS(double)

}  // namespace pulsereg
