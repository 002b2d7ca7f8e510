#include "pulsereg/loss.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <string>

#include "pulsereg/ops.hpp"
#include "pulsereg/warp.hpp"
#include "trilinear.hpp"

namespace pulsereg {

using detail::Trilinear;

void LossWeights::validate() const {
  if (!(lambda0 >= 0) || !(lambda1 >= 0) || !(alpha >= 0))
    throw InvalidArgument("LossWeights: lambda0, lambda1 and alpha must be >= 0");
  if (!(displacement_cap > 0)) throw InvalidArgument("LossWeights: displacement_cap must be > 0");
}

namespace {

struct Moments {
  double mean_a = 0, mean_b = 0, saa = 0, sbb = 0, sab = 0;
  std::int64_t count = 0;
};

template <typename T>
Moments centered_moments(const std::vector<T>& a, const std::vector<T>& b, const Mask* mask) {
  if (a.size() != b.size()) throw InvalidArgument("ncc: inputs differ in size");
  if (mask && mask->values.size() != a.size()) throw InvalidArgument("ncc: mask does not match the inputs");
  Moments m;
  const auto in = [&](std::size_t i) { return !mask || mask->values[i] != 0; };
  for (std::size_t i = 0; i < a.size(); ++i)
    if (in(i)) {
      m.mean_a += static_cast<double>(a[i]);
      m.mean_b += static_cast<double>(b[i]);
      ++m.count;
    }
  if (m.count < 2) throw InvalidArgument("ncc: need at least 2 voxels, got " + std::to_string(m.count));
  m.mean_a /= static_cast<double>(m.count);
  m.mean_b /= static_cast<double>(m.count);
  for (std::size_t i = 0; i < a.size(); ++i)
    if (in(i)) {
      const double da = static_cast<double>(a[i]) - m.mean_a, db = static_cast<double>(b[i]) - m.mean_b;
      m.saa += da * da;
      m.sbb += db * db;
      m.sab += da * db;
    }
  return m;
}

bool degenerate(const Moments& m) {
  const auto n = static_cast<double>(m.count);
  return m.saa / n <= kNccEpsilon || m.sbb / n <= kNccEpsilon;
}

Shape phase_shape(const Shape& fields) {
  if (fields.size() != 4 || fields[0] % 3 != 0 || fields[0] < 6)
    throw InvalidArgument("loss: fields must be 3N x D x H x W with N >= 2, got " + to_string(fields));
  return fields;
}

}  // namespace

template <typename T>
NccValue ncc(const Array<T>& a, const Array<T>& b, const Mask* mask) {
  if (a.shape != b.shape) throw InvalidArgument("ncc: shape " + to_string(a.shape) + " vs " + to_string(b.shape));
  const Moments m = centered_moments(a.values, b.values, mask);
  if (degenerate(m)) return {0.0, true};
  return {m.sab / std::sqrt(m.saa * m.sbb), false};
}

template <typename T>
NccTensor<T> ncc(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b, const Mask* mask) {
  if (a.shape() != b.shape())
    throw InvalidArgument("ncc: shape " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const Moments m = centered_moments(a.value().values, b.value().values, mask);
  const bool flat = degenerate(m);
  const double r = flat ? 0.0 : m.sab / std::sqrt(m.saa * m.sbb);
  Tensor<T> out(Array<T>(Shape{1}, static_cast<T>(r)), !flat && any_requires_grad<T>({&a, &b}));
  if (out.requires_grad()) {
    g.record(out, [a, b, out, m, r, mask]() {
      const double go = static_cast<double>(out.grad()[0]);
      const double inv = 1.0 / std::sqrt(m.saa * m.sbb);
      const auto& va = a.value().values;
      const auto& vb = b.value().values;
      T* ga = a.requires_grad() ? a.grad_buffer().data() : nullptr;
      T* gb = b.requires_grad() ? b.grad_buffer().data() : nullptr;
      for (std::size_t i = 0; i < va.size(); ++i) {
        if (mask && mask->values[i] == 0) continue;
        const double da = static_cast<double>(va[i]) - m.mean_a, db = static_cast<double>(vb[i]) - m.mean_b;
        if (ga) ga[i] += static_cast<T>(go * (db * inv - r * da / m.saa));
        if (gb) gb[i] += static_cast<T>(go * (da * inv - r * db / m.sbb));
      }
    });
  }
  return {out, flat};
}

template <typename T>
NccTensor<T> dissimilarity(Graph<T>& g, const Array<T>& images, const Tensor<T>& fields, const Mask* mask) {
  phase_shape(fields.shape());
  const std::int64_t n = images.dim(0);
  if (images.rank() != 4 || fields.shape()[0] != 3 * n)
    throw InvalidArgument("dissimilarity: " + std::to_string(n) + " images need " + std::to_string(3 * n) +
                          " field channels, got " + to_string(fields.shape()));
  std::vector<Tensor<T>> terms;
  bool flat = false;
  for (std::int64_t k = 0; k < n; ++k) {
    const Tensor<T> fixed(channel_slice(images, k, 1));
    const Tensor<T> moving(channel_slice(images, (k + 1) % n, 1));
    const Tensor<T> u = slice_channels(g, fields, 3 * k, 3);
    auto r = ncc(g, fixed, warp_volume(g, moving, u), mask);
    flat = flat || r.degenerate;
    terms.push_back(r.value);
  }
  const std::vector<double> w(terms.size(), -0.5 / static_cast<double>(n));
  return {linear_combination<T>(g, terms, w, 0.5), flat};
}

template <typename T>
double gradient_energy(const Array<T>& fields) {
  const std::int64_t c = fields.dim(0), d = fields.dim(1), h = fields.dim(2), w = fields.dim(3);
  double acc = 0;
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t z = 0; z < d; ++z)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          const double v = static_cast<double>(fields(ch, z, y, x));
          if (x + 1 < w) acc += std::pow(static_cast<double>(fields(ch, z, y, x + 1)) - v, 2);
          if (y + 1 < h) acc += std::pow(static_cast<double>(fields(ch, z, y + 1, x)) - v, 2);
          if (z + 1 < d) acc += std::pow(static_cast<double>(fields(ch, z + 1, y, x)) - v, 2);
        }
  return acc / static_cast<double>(fields.size());
}

namespace {

// Visits every seam pair: fn(channel, z, y, x, band value, distance) with
// (z, y, x) the border voxel inside the patch. Returns the pair count (per
// phase, i.e. counting a 3-vector once).
template <typename T, typename Fn>
std::int64_t for_each_seam_pair(const Array<T>& fields, const SeamContext<T>& seams, Fn&& fn) {
  const std::int64_t c = fields.dim(0);
  std::int64_t pairs = 0;
  for (int axis = 0; axis < 3; ++axis) {
    if (!seams.band[axis]) continue;
    const Array<T>& band = *seams.band[axis];
    const std::int64_t layers = band.dim(static_cast<std::size_t>(3 - axis));
    Shape expect = fields.shape;
    expect[static_cast<std::size_t>(3 - axis)] = layers;
    if (band.shape != expect)
      throw InvalidArgument("seam band on axis " + std::to_string(axis) + " has shape " + to_string(band.shape) +
                            ", expected " + to_string(expect));
    const std::int64_t zn = axis == 2 ? 1 : std::min(seams.valid.z, fields.dim(1));
    const std::int64_t yn = axis == 1 ? 1 : std::min(seams.valid.y, fields.dim(2));
    const std::int64_t xn = axis == 0 ? 1 : std::min(seams.valid.x, fields.dim(3));
    for (std::int64_t k = 0; k < layers; ++k) {
      const double dist = static_cast<double>(k + 1);
      for (std::int64_t z = 0; z < zn; ++z)
        for (std::int64_t y = 0; y < yn; ++y)
          for (std::int64_t x = 0; x < xn; ++x) {
            const std::int64_t bz = axis == 2 ? k : z, by = axis == 1 ? k : y, bx = axis == 0 ? k : x;
            for (std::int64_t ch = 0; ch < c; ++ch) fn(ch, z, y, x, band(ch, bz, by, bx), dist);
            pairs += c / 3;
          }
    }
  }
  return pairs;
}

}  // namespace

template <typename T>
double seam_energy(const Array<T>& fields, const SeamContext<T>& seams) {
  double acc = 0;
  const std::int64_t pairs =
      for_each_seam_pair(fields, seams, [&](std::int64_t ch, std::int64_t z, std::int64_t y, std::int64_t x, T v, double d) {
        const double diff = static_cast<double>(fields(ch, z, y, x)) - static_cast<double>(v);
        acc += diff * diff / d;
      });
  return pairs > 0 ? acc / static_cast<double>(pairs) : 0.0;
}

template <typename T>
Tensor<T> smoothness(Graph<T>& g, const Tensor<T>& fields, const SeamContext<T>& seams, double alpha, double s_max) {
  phase_shape(fields.shape());
  if (!(alpha >= 0) || !(s_max > 0)) throw InvalidArgument("smoothness: need alpha >= 0 and s_max > 0");
  const double scale = 1.0 / (4.0 * s_max * s_max * (1.0 + alpha));
  const double e = gradient_energy(fields.value());
  const double s = alpha > 0 ? seam_energy(fields.value(), seams) : 0.0;
  Tensor<T> out(Array<T>(Shape{1}, static_cast<T>(scale * (e + alpha * s))), fields.requires_grad());
  if (!out.requires_grad()) return out;
  g.record(out, [fields, seams, alpha, scale, out]() {
    const double go = static_cast<double>(out.grad()[0]) * scale;
    const Array<T>& u = fields.value();
    auto& gu = fields.grad_buffer();
    const std::int64_t c = u.dim(0), d = u.dim(1), h = u.dim(2), w = u.dim(3);
    const double ge = 2.0 * go / static_cast<double>(u.size());
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t z = 0; z < d; ++z)
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t x = 0; x < w; ++x) {
            const std::int64_t i = ((ch * d + z) * h + y) * w + x;
            const double v = static_cast<double>(u.values[i]);
            const auto edge = [&](std::int64_t j) {
              const double diff = (static_cast<double>(u.values[j]) - v) * ge;
              gu[j] += static_cast<T>(diff);
              gu[i] -= static_cast<T>(diff);
            };
            if (x + 1 < w) edge(i + 1);
            if (y + 1 < h) edge(i + w);
            if (z + 1 < d) edge(i + h * w);
          }
    if (alpha <= 0) return;
    std::vector<std::pair<std::int64_t, double>> contrib;
    const std::int64_t pairs = for_each_seam_pair(
        u, seams, [&](std::int64_t ch, std::int64_t z, std::int64_t y, std::int64_t x, T bv, double dist) {
          const std::int64_t i = ((ch * d + z) * h + y) * w + x;
          contrib.emplace_back(i, 2.0 * (static_cast<double>(u.values[i]) - static_cast<double>(bv)) / dist);
        });
    if (pairs == 0) return;
    const double gs = go * alpha / static_cast<double>(pairs);
    for (const auto& [i, v] : contrib) gu[i] += static_cast<T>(gs * v);
  });
  return out;
}

namespace {

template <typename T>
std::vector<Array<T>> split_phases(const Array<T>& fields) {
  std::vector<Array<T>> out;
  for (std::int64_t n = 0; n < fields.dim(0) / 3; ++n) out.push_back(channel_slice(fields, 3 * n, 3));
  return out;
}

}  // namespace

template <typename T>
Tensor<T> cyclic(Graph<T>& g, const Tensor<T>& fields, double s_max) {
  phase_shape(fields.shape());
  if (!(s_max > 0)) throw InvalidArgument("cyclic: s_max must be > 0");
  const auto phases = split_phases(fields.value());
  const auto n = static_cast<double>(phases.size());
  auto pos = std::make_shared<std::vector<Array<double>>>(
      trajectory_positions(std::span<const Array<T>>(phases), 0));
  const Array<double>& first = pos->front();
  const Array<double>& last = pos->back();
  const std::int64_t v = first.voxels();
  const double scale = 1.0 / (static_cast<double>(v) * n * n * s_max * s_max);
  double acc = 0;
  for (std::size_t i = 0; i < first.values.size(); ++i) acc += std::pow(last.values[i] - first.values[i], 2);
  Tensor<T> out(Array<T>(Shape{1}, static_cast<T>(acc * scale)), fields.requires_grad());
  if (!out.requires_grad()) return out;
  g.record(out, [fields, pos, scale, out]() {
    const double go = static_cast<double>(out.grad()[0]) * scale;
    const auto& s = fields.shape();
    const std::int64_t d = s[1], h = s[2], w = s[3], vox = d * h * w;
    auto& gu = fields.grad_buffer();
    const Array<double>& p0 = pos->front();
    const Array<double>& pn = pos->back();
    const std::size_t steps = pos->size() - 1;
    for (std::int64_t i = 0; i < vox; ++i) {
      const double gs[3] = {2.0 * go * (pn.values[i] - p0.values[i]),
                            2.0 * go * (pn.values[vox + i] - p0.values[vox + i]),
                            2.0 * go * (pn.values[2 * vox + i] - p0.values[2 * vox + i])};
      if (gs[0] == 0 && gs[1] == 0 && gs[2] == 0) continue;
      for (std::size_t k = 0; k < steps; ++k) {
        const Array<double>& p = (*pos)[k];
        const Trilinear t(p.values[i], p.values[vox + i], p.values[2 * vox + i], d, h, w);
        T* base = gu.data() + static_cast<std::int64_t>(3 * k) * vox;
        for (int c = 0; c < 3; ++c)
          for (int j = 0; j < 8; ++j) base[c * vox + t.index[j]] += static_cast<T>(t.weight[j] * gs[c]);
      }
    }
  });
  return out;
}

template <typename T>
double cyclic_at_positions(const Array<T>& fields, std::span<const Array<double>> positions, double s_max) {
  phase_shape(fields.shape);
  const auto phases = split_phases(fields);
  if (positions.size() < phases.size())
    throw InvalidArgument("cyclic_at_positions: need " + std::to_string(phases.size()) + " position grids");
  const std::int64_t v = fields.voxels();
  double acc = 0;
  for (std::int64_t i = 0; i < v; ++i) {
    Vec3 s;
    for (std::size_t k = 0; k < phases.size(); ++k) {
      const auto& p = positions[k].values;
      s = s + sample_vector(phases[k], Vec3{p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(v + i)],
                                            p[static_cast<std::size_t>(2 * v + i)]});
    }
    acc += s.x * s.x + s.y * s.y + s.z * s.z;
  }
  const auto n = static_cast<double>(phases.size());
  return acc / (static_cast<double>(v) * n * n * s_max * s_max);
}

template <typename T>
LossTerms<T> total_loss(Graph<T>& g, const Array<T>& images, const Tensor<T>& fields, const Mask* mask,
                        const SeamContext<T>& seams, const LossWeights& weights) {
  weights.validate();
  const auto d = dissimilarity(g, images, fields, mask);
  const Tensor<T> r = smoothness(g, fields, seams, weights.alpha, weights.displacement_cap);
  const Tensor<T> c = cyclic(g, fields, weights.displacement_cap);
  const std::vector<Tensor<T>> terms{d.value, r, c};
  const std::vector<double> w{1.0, weights.lambda0, weights.lambda1};
  LossTerms<T> out;
  out.total = linear_combination<T>(g, terms, w);
  out.dissimilarity = static_cast<double>(d.value.item());
  out.smoothness = static_cast<double>(r.item());
  out.cyclic = static_cast<double>(c.item());
  out.degenerate = d.degenerate;
  return out;
}

void write_loss_csv(const std::filesystem::path& path, std::span<const LossRecord> trace) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write loss trace " + path.string());
  os << "iteration,dissimilarity,smoothness,cyclic,total\n" << std::setprecision(10);
  for (const auto& r : trace)
    os << r.iteration << ',' << r.dissimilarity << ',' << r.smoothness << ',' << r.cyclic << ',' << r.total << '\n';
  if (!os) throw IoError("failed writing loss trace " + path.string());
}

#define PULSEREG_INSTANTIATE_LOSS(T)                                                                              \
  template NccValue ncc<T>(const Array<T>&, const Array<T>&, const Mask*);                                        \
  template NccTensor<T> ncc<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&, const Mask*);                       \
  template NccTensor<T> dissimilarity<T>(Graph<T>&, const Array<T>&, const Tensor<T>&, const Mask*);              \
  template double gradient_energy<T>(const Array<T>&);                                                            \
  template double seam_energy<T>(const Array<T>&, const SeamContext<T>&);                                         \
  template Tensor<T> smoothness<T>(Graph<T>&, const Tensor<T>&, const SeamContext<T>&, double, double);           \
  template Tensor<T> cyclic<T>(Graph<T>&, const Tensor<T>&, double);                                              \
  template double cyclic_at_positions<T>(const Array<T>&, std::span<const Array<double>>, double);                \
  template LossTerms<T> total_loss<T>(Graph<T>&, const Array<T>&, const Tensor<T>&, const Mask*,                  \
                                      const SeamContext<T>&, const LossWeights&);

PULSEREG_INSTANTIATE_LOSS(float)
PULSEREG_INSTANTIATE_LOSS(double)

}  // namespace pulsereg
