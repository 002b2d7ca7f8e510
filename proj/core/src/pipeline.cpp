#include "pulsereg/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <deque>
#include <mutex>
#include <numeric>
#include <thread>

#include "pulsereg/ops.hpp"
#include "pulsereg/random.hpp"

namespace pulsereg {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::int64_t round_up(std::int64_t v, std::int64_t m) { return (v + m - 1) / m * m; }

Extent3 extent_of(const Shape& s) { return {s[3], s[2], s[1]}; }

// Largest 6-connected component of zero voxels in one D x H x W channel.
std::vector<std::uint8_t> largest_zero_component(const float* vol, std::int64_t d, std::int64_t h, std::int64_t w) {
  const std::int64_t n = d * h * w;
  std::vector<std::int32_t> label(static_cast<std::size_t>(n), -1);
  std::vector<std::int64_t> sizes;
  std::vector<std::int64_t> stack;
  for (std::int64_t seed = 0; seed < n; ++seed) {
    if (vol[seed] != 0.0f || label[seed] >= 0) continue;
    const auto id = static_cast<std::int32_t>(sizes.size());
    std::int64_t size = 0;
    stack.push_back(seed);
    label[seed] = id;
    while (!stack.empty()) {
      const std::int64_t i = stack.back();
      stack.pop_back();
      ++size;
      const std::int64_t x = i % w, y = (i / w) % h, z = i / (w * h);
      const auto visit = [&](bool ok, std::int64_t j) {
        if (ok && vol[j] == 0.0f && label[j] < 0) {
          label[j] = id;
          stack.push_back(j);
        }
      };
      visit(x > 0, i - 1);
      visit(x + 1 < w, i + 1);
      visit(y > 0, i - w);
      visit(y + 1 < h, i + w);
      visit(z > 0, i - w * h);
      visit(z + 1 < d, i + w * h);
    }
    sizes.push_back(size);
  }
  std::vector<std::uint8_t> out(static_cast<std::size_t>(n), 0);
  if (sizes.empty()) return out;
  const auto best = static_cast<std::int32_t>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  for (std::int64_t i = 0; i < n; ++i) out[i] = label[i] == best ? 1 : 0;
  return out;
}

}  // namespace

Mask auto_foreground(const Array<float>& images) {
  if (images.rank() != 4) throw InvalidArgument("auto_foreground: images must be N x D x H x W");
  const std::int64_t d = images.dim(1), h = images.dim(2), w = images.dim(3), v = d * h * w;
  Mask out(Shape{1, d, h, w}, 0);
  for (std::int64_t n = 0; n < images.dim(0); ++n) {
    const auto bg = largest_zero_component(images.data() + n * v, d, h, w);
    for (std::int64_t i = 0; i < v; ++i)
      if (!bg[i]) out.values[i] = 1;
  }
  return out;
}

Volume4D resample_isotropic(const Volume4D& v, double mm) {
  if (!(mm > 0)) throw InvalidArgument("resample_isotropic: voxel size must be > 0");
  v.validate();
  Grid g = v.grid;
  for (int a = 0; a < 3; ++a) {
    const double length = static_cast<double>(v.grid.dims[a] - 1) * v.grid.spacing[a];
    g.dims[a] = std::max<std::int64_t>(1, std::llround(length / mm) + 1);
    g.spacing[a] = mm;
  }
  Volume4D out;
  out.grid = g;
  out.sources = v.sources;
  out.images = Array<float>(Shape{v.images.dim(0), g.dims.z, g.dims.y, g.dims.x});
  if (v.mask) out.mask = Mask(Shape{1, g.dims.z, g.dims.y, g.dims.x});
  const std::int64_t vox = g.dims.count();
  for (std::int64_t z = 0, i = 0; z < g.dims.z; ++z)
    for (std::int64_t y = 0; y < g.dims.y; ++y)
      for (std::int64_t x = 0; x < g.dims.x; ++x, ++i) {
        const Vec3 src = v.grid.to_voxel(g.to_mm({static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)}));
        for (std::int64_t n = 0; n < v.images.dim(0); ++n)
          out.images.values[n * vox + i] = static_cast<float>(sample_clamped(v.images, n, src.x, src.y, src.z));
        if (v.mask) {
          const auto clampi = [](double p, std::int64_t n) {
            return std::clamp<std::int64_t>(std::llround(p), 0, n - 1);
          };
          out.mask->values[i] = (*v.mask)(0, clampi(src.z, v.grid.dims.z), clampi(src.y, v.grid.dims.y),
                                          clampi(src.x, v.grid.dims.x));
        }
      }
  return out;
}

Volume4D preprocess(const Volume4D& raw, const PreprocessOptions& options) {
  raw.validate();
  Volume4D v = raw;
  const Shape mshape{1, raw.grid.dims.z, raw.grid.dims.y, raw.grid.dims.x};
  switch (options.mask_mode) {
    case MaskMode::None:
      v.mask = Mask(mshape, 1);
      break;
    case MaskMode::File:
      if (!options.mask) throw InvalidArgument("preprocess: mask mode 'file' without a mask");
      if (options.mask->shape != mshape)
        throw InvalidArgument("preprocess: mask shape " + to_string(options.mask->shape) + " does not match images " +
                              to_string(mshape));
      v.mask = *options.mask;
      break;
    case MaskMode::Auto:
      v.mask = auto_foreground(raw.images);
      break;
  }
  if (options.isotropic_mm) v = resample_isotropic(v, *options.isotropic_mm);

  const std::int64_t vox = v.grid.dims.count();
  const std::int64_t fg = std::count_if(v.mask->values.begin(), v.mask->values.end(), [](auto m) { return m != 0; });
  if (fg == 0) throw InvalidArgument("preprocess: empty foreground");
  double mean = 0;
  for (std::int64_t n = 0; n < v.phases(); ++n)
    for (std::int64_t i = 0; i < vox; ++i)
      if (v.mask->values[i]) mean += v.images.values[n * vox + i];
  const double count = static_cast<double>(fg) * v.phases();
  mean /= count;
  double var = 0;
  for (std::int64_t n = 0; n < v.phases(); ++n)
    for (std::int64_t i = 0; i < vox; ++i)
      if (v.mask->values[i]) var += std::pow(v.images.values[n * vox + i] - mean, 2);
  const double sd = std::sqrt(var / count);
  if (!(sd > 1e-8)) throw InvalidArgument("preprocess: foreground intensities have zero variance");
  for (std::int64_t n = 0; n < v.phases(); ++n)
    for (std::int64_t i = 0; i < vox; ++i) {
      float& p = v.images.values[n * vox + i];
      p = v.mask->values[i] ? static_cast<float>((p - mean) / sd) : 0.0f;
    }
  return v;
}

template <typename T>
Array<T> pad_replicate(const Array<T>& a, std::int64_t multiple) {
  if (a.rank() != 4 || multiple < 1) throw InvalidArgument("pad_replicate: need a 4-D array and multiple >= 1");
  const std::int64_t c = a.dim(0), d = a.dim(1), h = a.dim(2), w = a.dim(3);
  const std::int64_t pd = round_up(d, multiple), ph = round_up(h, multiple), pw = round_up(w, multiple);
  if (pd == d && ph == h && pw == w) return a;
  Array<T> out(Shape{c, pd, ph, pw});
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t z = 0; z < pd; ++z)
      for (std::int64_t y = 0; y < ph; ++y)
        for (std::int64_t x = 0; x < pw; ++x)
          out(ch, z, y, x) = a(ch, std::min(z, d - 1), std::min(y, h - 1), std::min(x, w - 1));
  return out;
}

template <typename T>
Array<T> crop(const Array<T>& a, Extent3 e) {
  if (a.rank() != 4 || e.z > a.dim(1) || e.y > a.dim(2) || e.x > a.dim(3))
    throw InvalidArgument("crop: extent larger than " + to_string(a.shape));
  Array<T> out(Shape{a.dim(0), e.z, e.y, e.x});
  for (std::int64_t ch = 0; ch < a.dim(0); ++ch)
    for (std::int64_t z = 0; z < e.z; ++z)
      for (std::int64_t y = 0; y < e.y; ++y)
        std::copy_n(&a(ch, z, y, 0), e.x, &out(ch, z, y, 0));
  return out;
}

template <typename T>
Array<T> downsample_image(const Array<T>& a) {
  Graph<T> g;
  return avgpool3(g, Tensor<T>(a)).value();
}

template <typename T>
Array<T> downsample_field(const Array<T>& a) {
  Array<T> out = downsample_image(a);
  for (T& v : out.values) v /= T{2};
  return out;
}

Mask downsample_mask(const Mask& m) {
  if (m.rank() != 4 || m.dim(1) % 2 || m.dim(2) % 2 || m.dim(3) % 2)
    throw InvalidArgument("downsample_mask: extents must be even, got " + to_string(m.shape));
  Mask out(Shape{m.dim(0), m.dim(1) / 2, m.dim(2) / 2, m.dim(3) / 2}, 0);
  for (std::int64_t c = 0; c < m.dim(0); ++c)
    for (std::int64_t z = 0; z < m.dim(1); ++z)
      for (std::int64_t y = 0; y < m.dim(2); ++y)
        for (std::int64_t x = 0; x < m.dim(3); ++x)
          if (m(c, z, y, x)) out(c, z / 2, y / 2, x / 2) = 1;
  return out;
}

template <typename T>
Array<T> upsample_field(const Array<T>& a) {
  if (a.rank() != 4) throw InvalidArgument("upsample_field: need a 4-D array");
  const std::int64_t c = a.dim(0), d = 2 * a.dim(1), h = 2 * a.dim(2), w = 2 * a.dim(3);
  Array<T> out(Shape{c, d, h, w});
  const auto coarse = [](std::int64_t j) { return (static_cast<double>(j) - 0.5) / 2.0; };
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t z = 0; z < d; ++z)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
          out(ch, z, y, x) = static_cast<T>(2.0 * sample_clamped(a, ch, coarse(x), coarse(y), coarse(z)));
  return out;
}

template <typename T>
Array<T> resample_field(const Array<T>& field, const Grid& from, const Grid& to) {
  if (field.rank() != 4 || field.dim(0) % 3 != 0 || !(extent_of(field.shape) == from.dims))
    throw InvalidArgument("resample_field: field " + to_string(field.shape) + " does not match the source grid");
  Array<T> out(Shape{field.dim(0), to.dims.z, to.dims.y, to.dims.x});
  const std::int64_t vox = to.dims.count();
  for (std::int64_t z = 0, i = 0; z < to.dims.z; ++z)
    for (std::int64_t y = 0; y < to.dims.y; ++y)
      for (std::int64_t x = 0; x < to.dims.x; ++x, ++i) {
        const Vec3 p = from.to_voxel(to.to_mm({static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)}));
        for (std::int64_t ch = 0; ch < field.dim(0); ++ch) {
          const int comp = static_cast<int>(ch % 3);
          out.values[ch * vox + i] = static_cast<T>(sample_clamped(field, ch, p.x, p.y, p.z) * from.spacing[comp] /
                                                    to.spacing[comp]);
        }
      }
  return out;
}

bool converged(const std::vector<double>& history, double eps, int window) {
  if (window < 2) throw InvalidArgument("converged: window must be >= 2");
  const auto n = history.size();
  if (n <= static_cast<std::size_t>(window)) return false;
  const double mean = std::accumulate(history.end() - 1 - window, history.end() - 1, 0.0) / window;
  return std::abs(history.back() - mean) < eps;
}

void PipelineConfig::validate() const {
  if (patch < 4 || patch % 4) throw InvalidArgument("patch edge must be a positive multiple of 4, got " + std::to_string(patch));
  if (levels < 1 || levels > 5) throw InvalidArgument("levels must be in [1, 5], got " + std::to_string(levels));
  if (!(eps > 0)) throw InvalidArgument("convergence eps must be > 0");
  if (window < 2) throw InvalidArgument("convergence window must be >= 2");
  if (max_iterations < 1) throw InvalidArgument("max_iterations must be >= 1");
  if (threads < 1) throw InvalidArgument("threads must be >= 1");
  if (!(coarse_alpha >= 0)) throw InvalidArgument("coarse_alpha must be >= 0");
  weights.validate();
}

std::vector<int> PipelineConfig::factors() const {
  std::vector<int> f;
  for (int l = levels - 1; l >= 0; --l) f.push_back(1 << l);
  return f;
}

template <typename T>
Array<T> RegistrationResult<T>::field_mm(int phase) const {
  Array<T> f = fields.fields.at(static_cast<std::size_t>(phase));
  const std::int64_t v = f.voxels();
  for (int c = 0; c < 3; ++c)
    for (std::int64_t i = 0; i < v; ++i) f.values[c * v + i] *= static_cast<T>(fields.grid.spacing[c]);
  return f;
}

namespace {

template <typename T>
struct LevelJob {
  const Array<T>* images;  // N x D x H x W
  const Mask* mask;
  const Array<T>* base;    // accumulated field from coarser levels
  Array<T>* field;         // level output, written patch by patch
  Extent3 dims, edge;
  int level, factor;
  LossWeights weights;
  UNetConfig network;
  const PipelineConfig* config;
};

// Copies a box starting at `origin` with extent `edge`, clamping reads to the
// array (edge replication).
template <typename A>
A extract(const A& src, Extent3 origin, Extent3 edge) {
  A out(Shape{src.dim(0), edge.z, edge.y, edge.x});
  const std::int64_t d = src.dim(1), h = src.dim(2), w = src.dim(3);
  for (std::int64_t c = 0; c < src.dim(0); ++c)
    for (std::int64_t z = 0; z < edge.z; ++z)
      for (std::int64_t y = 0; y < edge.y; ++y)
        for (std::int64_t x = 0; x < edge.x; ++x)
          out(c, z, y, x) = src(c, std::min(origin.z + z, d - 1), std::min(origin.y + y, h - 1),
                                std::min(origin.x + x, w - 1));
  return out;
}

template <typename T>
SeamContext<T> seam_context(const LevelJob<T>& job, Extent3 origin, Extent3 valid) {
  SeamContext<T> s;
  s.valid = valid;
  if (job.weights.alpha <= 0) return s;
  const Array<T>& f = *job.field;
  for (int axis = 0; axis < 3; ++axis) {
    if (origin[axis] == 0) continue;
    const std::int64_t layers = std::min<std::int64_t>(kSeamBand, origin[axis]);
    Extent3 e = job.edge;
    e[axis] = layers;
    Array<T> band(Shape{f.dim(0), e.z, e.y, e.x});
    for (std::int64_t c = 0; c < f.dim(0); ++c)
      for (std::int64_t z = 0; z < e.z; ++z)
        for (std::int64_t y = 0; y < e.y; ++y)
          for (std::int64_t x = 0; x < e.x; ++x) {
            std::int64_t at[3] = {origin.x + x, origin.y + y, origin.z + z};
            at[axis] = origin[axis] - 1 - (axis == 0 ? x : axis == 1 ? y : z);
            band(c, z, y, x) = f(c, std::min(at[2], job.dims.z - 1), std::min(at[1], job.dims.y - 1),
                                 std::min(at[0], job.dims.x - 1));
          }
    s.band[axis] = std::move(band);
  }
  return s;
}

template <typename T>
PatchReport run_patch(const LevelJob<T>& job, int index, Extent3 origin) {
  const auto t0 = Clock::now();
  const PipelineConfig& cfg = *job.config;
  PatchReport rep;
  rep.level = job.level;
  rep.factor = job.factor;
  rep.index = index;
  rep.origin = origin;
  for (int a = 0; a < 3; ++a) rep.extent[a] = std::min(job.edge[a], job.dims[a] - origin[a]);

  const Array<T> images = extract(*job.images, origin, job.edge);
  const Array<T> base = extract(*job.base, origin, job.edge);
  Mask mask = extract(*job.mask, origin, job.edge);
  for (std::int64_t z = 0; z < job.edge.z; ++z)
    for (std::int64_t y = 0; y < job.edge.y; ++y)
      for (std::int64_t x = 0; x < job.edge.x; ++x)
        if (z >= rep.extent.z || y >= rep.extent.y || x >= rep.extent.x) mask(0, z, y, x) = 0;
  const auto fg = std::count_if(mask.values.begin(), mask.values.end(), [](auto m) { return m != 0; });
  Array<T> result = base;
  if (fg < 2) {
    rep.skipped = true;
    rep.note = "fewer than 2 foreground voxels";
  } else {
    const SeamContext<T> seams = seam_context(job, origin, rep.extent);
    const std::uint64_t seed = mix_seed(mix_seed(cfg.seed, static_cast<std::uint64_t>(job.level)),
                                        static_cast<std::uint64_t>(index));
    UNetParams<T> params = init_params<T>(job.network, seed);
    Graph<T> g;
    register_parameters(g, params);
    std::vector<Tensor<T>> ptensors = params.tensors();
    AdamState<T> adam;
    const Tensor<T> input(images);
    const Tensor<T> base_t(base);
    std::vector<double> history;
    for (int it = 0;; ++it) {
      g.clear_tape();
      const Tensor<T> residual = forward(g, params, input);
      const Tensor<T> total = add(g, base_t, residual);
      const LossTerms<T> terms = total_loss(g, images, total, &mask, seams, job.weights);
      const LossRecord rec{it, terms.dissimilarity, terms.smoothness, terms.cyclic, static_cast<double>(terms.total.item())};
      if (it == 0) rep.first = rec;
      if (it == 0 && terms.degenerate) {
        rep.skipped = true;
        rep.note = "constant intensities in a phase";
        break;
      }
      if (!std::isfinite(rec.total)) {
        rep.diverged = true;
        rep.note = "non-finite loss at iteration " + std::to_string(it) + " (D=" + std::to_string(rec.dissimilarity) +
                   ", R=" + std::to_string(rec.smoothness) + ", C=" + std::to_string(rec.cyclic) + ")";
        break;
      }
      result = total.value();
      rep.last = rec;
      rep.iterations = it + 1;
      history.push_back(rec.total);
      if (cfg.keep_traces) rep.trace.push_back(rec);
      if (converged(history, cfg.eps, cfg.window)) {
        rep.converged = true;
        break;
      }
      if (it + 1 >= cfg.max_iterations) {
        rep.capped = true;
        break;
      }
      g.zero_parameter_grads();
      g.backward(terms.total);
      adam_step<T>(ptensors, adam, cfg.adam);
    }
  }
  Array<T>& f = *job.field;
  for (std::int64_t c = 0; c < f.dim(0); ++c)
    for (std::int64_t z = 0; z < rep.extent.z; ++z)
      for (std::int64_t y = 0; y < rep.extent.y; ++y)
        std::copy_n(&result(c, z, y, 0), rep.extent.x, &f(c, origin.z + z, origin.y + y, origin.x));
  rep.seconds = seconds_since(t0);
  return rep;
}

template <typename T>
LevelReport run_level(const LevelJob<T>& job, const PatchCallback& on_patch, bool& diverged) {
  const auto t0 = Clock::now();
  LevelReport rep;
  rep.factor = job.factor;
  rep.dims = job.dims;
  rep.patch_edge = job.edge;
  rep.alpha = job.weights.alpha;
  rep.displacement_cap = job.weights.displacement_cap;
  Extent3 count;
  for (int a = 0; a < 3; ++a) count[a] = (job.dims[a] + job.edge[a] - 1) / job.edge[a];
  rep.patches.resize(static_cast<std::size_t>(count.count()));

  // Patches on one anti-diagonal (iz + iy + ix) share no face, and all their
  // lower neighbors belong to earlier diagonals.
  std::mutex lock;
  const std::int64_t diagonals = count.x + count.y + count.z - 2;
  for (std::int64_t diag = 0; diag < diagonals; ++diag) {
    std::deque<std::int64_t> queue;
    for (std::int64_t iz = 0; iz < count.z; ++iz)
      for (std::int64_t iy = 0; iy < count.y; ++iy) {
        const std::int64_t ix = diag - iz - iy;
        if (ix >= 0 && ix < count.x) queue.push_back((iz * count.y + iy) * count.x + ix);
      }
    std::sort(queue.begin(), queue.end());
    const auto work = [&]() {
      for (;;) {
        std::int64_t idx;
        {
          std::lock_guard guard(lock);
          if (queue.empty()) return;
          idx = queue.front();
          queue.pop_front();
        }
        const Extent3 origin{(idx % count.x) * job.edge.x, ((idx / count.x) % count.y) * job.edge.y,
                             (idx / (count.x * count.y)) * job.edge.z};
        PatchReport pr = run_patch(job, static_cast<int>(idx), origin);
        std::lock_guard guard(lock);
        if (pr.diverged) {
          diverged = true;
          spdlog::error("level x{} patch {}: {}", job.factor, idx, pr.note);
        } else if (pr.capped) {
          spdlog::warn("level x{} patch {}: iteration cap {} reached", job.factor, idx, job.config->max_iterations);
        }
        if (on_patch) on_patch(pr);
        rep.patches[static_cast<std::size_t>(idx)] = std::move(pr);
      }
    };
    const auto workers = std::min<std::size_t>(static_cast<std::size_t>(job.config->threads), queue.size());
    if (workers <= 1) {
      work();
    } else {
      std::vector<std::jthread> pool;
      for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work);
    }
  }
  rep.seconds = seconds_since(t0);
  return rep;
}

template <typename T>
Array<T> subtract(const Array<T>& a, const Array<T>& b) {
  Array<T> out = a;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] -= b.values[i];
  return out;
}

}  // namespace

template <typename T>
RegistrationResult<T> register_volumes(const Volume4D& volumes, const PipelineConfig& config,
                                       const PatchCallback& on_patch) {
  const auto t0 = Clock::now();
  volumes.validate();
  config.validate();
  const int n = volumes.phases();
  UNetConfig net = config.network;
  net.in_channels = n;
  net.validate();

  const auto factors = config.factors();
  const std::int64_t divisor = net.size_divisor();
  const Array<T> images = pad_replicate(volumes.images.cast<T>(), factors.front());
  Mask mask = volumes.mask ? *volumes.mask : Mask(Shape{1, volumes.grid.dims.z, volumes.grid.dims.y, volumes.grid.dims.x}, 1);
  {
    Mask padded(Shape{1, images.dim(1), images.dim(2), images.dim(3)}, 0);
    for (std::int64_t z = 0; z < mask.dim(1); ++z)
      for (std::int64_t y = 0; y < mask.dim(2); ++y)
        std::copy_n(&mask(0, z, y, 0), mask.dim(3), &padded(0, z, y, 0));
    mask = std::move(padded);
  }

  std::vector<Array<T>> pyr_images{images};
  std::vector<Mask> pyr_masks{mask};
  for (std::size_t l = 1; l < factors.size(); ++l) {
    pyr_images.insert(pyr_images.begin(), downsample_image(pyr_images.front()));
    pyr_masks.insert(pyr_masks.begin(), downsample_mask(pyr_masks.front()));
  }

  RegistrationResult<T> result;
  result.config = config;
  Array<T> field;
  for (std::size_t l = 0; l < factors.size(); ++l) {
    const Extent3 dims = extent_of(pyr_images[l].shape);
    const Array<T> base = l == 0 ? Array<T>(Shape{3 * n, dims.z, dims.y, dims.x}) : upsample_field(field);
    field = base;
    LevelJob<T> job;
    job.images = &pyr_images[l];
    job.mask = &pyr_masks[l];
    job.base = &base;
    job.field = &field;
    job.dims = dims;
    for (int a = 0; a < 3; ++a) job.edge[a] = std::min<std::int64_t>(config.patch, round_up(dims[a], divisor));
    job.level = static_cast<int>(l);
    job.factor = factors[l];
    job.weights = config.weights;
    job.weights.alpha = l == 0 ? config.coarse_alpha : config.weights.alpha;
    job.weights.displacement_cap = static_cast<double>(std::max({job.edge.x, job.edge.y, job.edge.z})) / 2.0;
    job.network = net;
    job.config = &config;
    spdlog::debug("level x{}: {}x{}x{} voxels, patch {}x{}x{}", job.factor, dims.x, dims.y, dims.z, job.edge.x,
                  job.edge.y, job.edge.z);
    result.levels.push_back(run_level(job, on_patch, result.diverged));
    // Rebuild the level field from its residual so that the stored residuals
    // reproduce the output bit for bit.
    result.residuals.push_back(subtract(field, base));
    for (std::size_t i = 0; i < field.values.size(); ++i) field.values[i] = base.values[i] + result.residuals.back().values[i];
  }
  result.fields = split_field_stack(crop(field, volumes.grid.dims), volumes.grid);
  result.seconds = seconds_since(t0);
  return result;
}

template <typename T>
Array<T> accumulate_residuals(const std::vector<Array<T>>& residuals, Extent3 extent) {
  if (residuals.empty()) throw InvalidArgument("accumulate_residuals: no levels");
  Array<T> acc = residuals.front();
  for (std::size_t l = 1; l < residuals.size(); ++l) {
    acc = upsample_field(acc);
    if (acc.shape != residuals[l].shape) throw InvalidArgument("accumulate_residuals: level shapes do not chain");
    for (std::size_t i = 0; i < acc.values.size(); ++i) acc.values[i] += residuals[l].values[i];
  }
  return crop(acc, extent);
}

#define PULSEREG_INSTANTIATE_PIPELINE(T)                                                                     \
  template Array<T> pad_replicate<T>(const Array<T>&, std::int64_t);                                        \
  template Array<T> crop<T>(const Array<T>&, Extent3);                                                      \
  template Array<T> downsample_image<T>(const Array<T>&);                                                   \
  template Array<T> downsample_field<T>(const Array<T>&);                                                   \
  template Array<T> upsample_field<T>(const Array<T>&);                                                     \
  template Array<T> resample_field<T>(const Array<T>&, const Grid&, const Grid&);                           \
  template struct RegistrationResult<T>;                                                                    \
  template RegistrationResult<T> register_volumes<T>(const Volume4D&, const PipelineConfig&, const PatchCallback&); \
  template Array<T> accumulate_residuals<T>(const std::vector<Array<T>>&, Extent3);

PULSEREG_INSTANTIATE_PIPELINE(float)
PULSEREG_INSTANTIATE_PIPELINE(double)

}  // namespace pulsereg
