#include "pulsereg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace pulsereg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_same_grid(const Mask& a, const Mask& b, const char* op) {
  if (a.rank() != 4 || a.shape != b.shape)
    throw InvalidArgument(std::string(op) + ": masks " + to_string(a.shape) + " and " + to_string(b.shape) +
                          " are not on one grid");
}

bool any_set(const Mask& m) {
  return std::any_of(m.values.begin(), m.values.end(), [](auto v) { return v != 0; });
}

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) along one line
// with sample positions k * step; f holds squared distances (inf = no seed).
void edt_line(std::vector<double>& f, double step, std::vector<double>& out, std::vector<std::int64_t>& v,
              std::vector<double>& z) {
  const auto n = static_cast<std::int64_t>(f.size());
  std::int64_t k = -1;
  for (std::int64_t q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    const double xq = static_cast<double>(q) * step;
    while (k >= 0) {
      const double xv = static_cast<double>(v[k]) * step;
      const double s = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv));
      if (s <= z[k]) {
        --k;
        continue;
      }
      ++k;
      v[k] = q;
      z[k] = s;
      break;
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
    }
  }
  if (k < 0) {
    std::fill(out.begin(), out.end(), kInf);
    return;
  }
  std::int64_t j = 0;
  for (std::int64_t q = 0; q < n; ++q) {
    const double xq = static_cast<double>(q) * step;
    while (j < k && z[j + 1] < xq) ++j;
    const double dx = xq - static_cast<double>(v[j]) * step;
    out[q] = dx * dx + f[v[j]];
  }
}

std::vector<double> directed(const Mask& from_border, const Array<double>& dist_to) {
  std::vector<double> d;
  for (std::size_t i = 0; i < from_border.values.size(); ++i)
    if (from_border.values[i]) d.push_back(dist_to.values[i]);
  return d;
}

MaskScores score_masks(const Mask& a, const Mask& b, Vec3 spacing) {
  MaskScores s;
  s.dice = dice(a, b).value;
  if (any_set(a) && any_set(b)) {
    const auto sd = surface_distance(a, b, spacing);
    s.hausdorff = sd.hausdorff;
    s.assd = sd.assd;
  } else {
    s.hausdorff = s.assd = kInf;
  }
  return s;
}

int wrap(int i, int n) { return ((i % n) + n) % n; }

}  // namespace

Stats summarize(std::span<const double> values) {
  Stats s;
  s.count = values.size();
  if (values.empty()) return s;
  double sum = 0;
  for (const double v : values) {
    sum += v;
    s.max = std::max(s.max, v);
  }
  s.mean = sum / static_cast<double>(values.size());
  double var = 0;
  for (const double v : values) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / static_cast<double>(values.size()));
  return s;
}

std::vector<double> landmark_distances(std::span<const Vec3> a, std::span<const Vec3> b) {
  if (a.size() != b.size())
    throw InvalidArgument("tre: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + " landmarks");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = (a[i] - b[i]).norm();
  return d;
}

Stats tre(std::span<const Vec3> a, std::span<const Vec3> b) {
  const auto d = landmark_distances(a, b);
  return summarize(d);
}

DiceValue dice(const Mask& a, const Mask& b) {
  require_same_grid(a, b, "dice");
  std::int64_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const bool x = a.values[i] != 0, y = b.values[i] != 0;
    na += x;
    nb += y;
    both += x && y;
  }
  if (na + nb == 0) return {1.0, true};
  return {2.0 * static_cast<double>(both) / static_cast<double>(na + nb), false};
}

Mask border_voxels(const Mask& m) {
  if (m.rank() != 4) throw InvalidArgument("border_voxels: mask must be 1 x D x H x W");
  const std::int64_t d = m.dim(1), h = m.dim(2), w = m.dim(3);
  Mask out(m.shape, 0);
  const auto off = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
    return z < 0 || y < 0 || x < 0 || z >= d || y >= h || x >= w || m(0, z, y, x) == 0;
  };
  for (std::int64_t z = 0; z < d; ++z)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        if (m(0, z, y, x) && (off(z, y, x - 1) || off(z, y, x + 1) || off(z, y - 1, x) || off(z, y + 1, x) ||
                              off(z - 1, y, x) || off(z + 1, y, x)))
          out(0, z, y, x) = 1;
  return out;
}

Array<double> distance_transform(const Mask& seeds, Vec3 spacing) {
  if (seeds.rank() != 4) throw InvalidArgument("distance_transform: mask must be 1 x D x H x W");
  const std::int64_t d = seeds.dim(1), h = seeds.dim(2), w = seeds.dim(3);
  Array<double> sq(seeds.shape);
  for (std::size_t i = 0; i < sq.values.size(); ++i) sq.values[i] = seeds.values[i] ? 0.0 : kInf;
  const std::int64_t longest = std::max({d, h, w});
  std::vector<double> f, out(static_cast<std::size_t>(longest)), z(static_cast<std::size_t>(longest) + 1);
  std::vector<std::int64_t> v(static_cast<std::size_t>(longest));
  const auto pass = [&](std::int64_t n, std::int64_t stride, double step, auto&& starts) {
    f.resize(static_cast<std::size_t>(n));
    out.resize(static_cast<std::size_t>(n));
    for (const std::int64_t s : starts) {
      for (std::int64_t k = 0; k < n; ++k) f[k] = sq.values[s + k * stride];
      edt_line(f, step, out, v, z);
      for (std::int64_t k = 0; k < n; ++k) sq.values[s + k * stride] = out[k];
    }
  };
  std::vector<std::int64_t> starts;
  for (std::int64_t zz = 0; zz < d; ++zz)
    for (std::int64_t y = 0; y < h; ++y) starts.push_back((zz * h + y) * w);
  pass(w, 1, spacing.x, starts);
  starts.clear();
  for (std::int64_t zz = 0; zz < d; ++zz)
    for (std::int64_t x = 0; x < w; ++x) starts.push_back(zz * h * w + x);
  pass(h, w, spacing.y, starts);
  starts.clear();
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) starts.push_back(y * w + x);
  pass(d, h * w, spacing.z, starts);
  for (double& x : sq.values) x = std::sqrt(x);
  return sq;
}

SurfaceDistance surface_distance(const Mask& a, const Mask& b, Vec3 spacing) {
  require_same_grid(a, b, "surface_distance");
  if (!any_set(a) || !any_set(b)) throw InvalidArgument("surface_distance: empty mask");
  const Mask ba = border_voxels(a), bb = border_voxels(b);
  const auto ab = directed(ba, distance_transform(bb, spacing));
  const auto ba_d = directed(bb, distance_transform(ba, spacing));
  const Stats s1 = summarize(ab), s2 = summarize(ba_d);
  return {std::max(s1.max, s2.max), 0.5 * (s1.mean + s2.mean)};
}

template <typename T>
Array<double> jacobian_determinant(const Array<T>& field) {
  if (field.rank() != 4 || field.dim(0) != 3)
    throw InvalidArgument("jacobian_determinant: field must be 3 x D x H x W, got " + to_string(field.shape));
  const std::int64_t d = field.dim(1), h = field.dim(2), w = field.dim(3);
  const std::int64_t n[3] = {w, h, d};
  Array<double> det(Shape{1, d, h, w});
  for (std::int64_t z = 0; z < d; ++z)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const std::int64_t p[3] = {x, y, z};
        double j[3][3];
        for (int a = 0; a < 3; ++a) {
          std::int64_t lo[3] = {x, y, z}, hi[3] = {x, y, z};
          if (p[a] > 0) lo[a] -= 1;
          if (p[a] + 1 < n[a]) hi[a] += 1;
          const double span = static_cast<double>(hi[a] - lo[a]);
          for (int c = 0; c < 3; ++c) {
            const double g = span > 0 ? (static_cast<double>(field(c, hi[2], hi[1], hi[0])) -
                                         static_cast<double>(field(c, lo[2], lo[1], lo[0]))) /
                                            span
                                      : 0.0;
            j[c][a] = (c == a ? 1.0 : 0.0) + g;
          }
        }
        det(0, z, y, x) = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) -
                          j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0]) +
                          j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
      }
  return det;
}

JacobianStats jacobian_summary(const Array<double>& det) {
  const std::int64_t d = det.dim(1), h = det.dim(2), w = det.dim(3);
  std::vector<double> inner, outer;
  for (std::int64_t z = 0; z < d; ++z)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const bool interior = x > 0 && y > 0 && z > 0 && x + 1 < w && y + 1 < h && z + 1 < d;
        (interior ? inner : outer).push_back(det(0, z, y, x));
      }
  JacobianStats s;
  s.interior = summarize(inner);
  s.border = summarize(outer);
  s.folded = std::count_if(inner.begin(), inner.end(), [](double v) { return v <= 0; });
  if (!inner.empty()) s.fof_percent = 100.0 * static_cast<double>(s.folded) / static_cast<double>(inner.size());
  if (!outer.empty())
    s.border_fof_percent = 100.0 * static_cast<double>(std::count_if(outer.begin(), outer.end(), [](double v) { return v <= 0; })) /
                           static_cast<double>(outer.size());
  return s;
}

template <typename T>
JacobianStats jacobian_stats(const Array<T>& field) {
  return jacobian_summary(jacobian_determinant(field));
}

template <typename T>
Mask transport_mask(const FieldSet<T>& fields, const Mask& mask, int i, int j) {
  fields.validate();
  const int n = fields.phases();
  i = wrap(i, n);
  j = wrap(j, n);
  const Shape expect{1, fields.grid.dims.z, fields.grid.dims.y, fields.grid.dims.x};
  if (mask.shape != expect) throw InvalidArgument("transport_mask: mask " + to_string(mask.shape) + " is not on the field grid");
  const Array<T> pull = i == j ? closure_defect(fields, i) : compose(fields, j, i);
  Array<T> labels(mask.shape);
  for (std::size_t k = 0; k < mask.values.size(); ++k) labels.values[k] = mask.values[k] ? T{1} : T{0};
  const Array<T> warped = warp_volume(labels, pull);
  Mask out(mask.shape, 0);
  for (std::size_t k = 0; k < out.values.size(); ++k) out.values[k] = warped.values[k] >= T(0.5) ? 1 : 0;
  return out;
}

template <typename T>
std::vector<Vec3> transport_landmarks(const FieldSet<T>& fields, std::span<const Vec3> points, int i, int j) {
  fields.validate();
  const int n = fields.phases();
  i = wrap(i, n);
  j = wrap(j, n);
  const int steps = i == j ? n : wrap(j - i, n);
  std::vector<Vec3> p(points.begin(), points.end());
  for (int k = 0; k < steps; ++k) p = warp_points(p, fields.fields[static_cast<std::size_t>(wrap(i + k, n))], fields.grid).points;
  return p;
}

template <typename T>
Eval4D eval4d(const FieldSet<T>& fields, const PhaseAnnotations& ann) {
  fields.validate();
  const int n = fields.phases();
  const auto has_lm = [&](int p) { return static_cast<std::size_t>(p) < ann.landmarks.size() && ann.landmarks[p].has_value(); };
  const auto has_mask = [&](int p) { return static_cast<std::size_t>(p) < ann.masks.size() && ann.masks[p].has_value(); };
  Eval4D out;
  out.phases = n;
  std::vector<std::vector<double>> pooled(static_cast<std::size_t>(n) + 1), pooled_before(static_cast<std::size_t>(n) + 1);
  std::vector<std::vector<double>> dices(static_cast<std::size_t>(n) + 1), dices_before(static_cast<std::size_t>(n) + 1);
  for (int i = 0; i < n; ++i) {
    if (!has_lm(i) && !has_mask(i)) continue;
    for (int k = 1; k <= n; ++k) {
      const int j = (i + k) % n;
      MatrixEntry e{i, j, k, {}, {}, {}, {}};
      if (has_lm(i) && has_lm(j)) {
        const auto& src = *ann.landmarks[i];
        const auto moved = transport_landmarks(fields, src, i, j);
        const auto after = landmark_distances(moved, *ann.landmarks[j]);
        const auto before = landmark_distances(src, *ann.landmarks[j]);
        e.tre = summarize(after);
        e.tre_before = summarize(before);
        pooled[k].insert(pooled[k].end(), after.begin(), after.end());
        pooled_before[k].insert(pooled_before[k].end(), before.begin(), before.end());
      }
      if (has_mask(i) && has_mask(j)) {
        const Mask moved = transport_mask(fields, *ann.masks[i], i, j);
        e.masks = score_masks(moved, *ann.masks[j], fields.grid.spacing);
        e.masks_before = score_masks(*ann.masks[i], *ann.masks[j], fields.grid.spacing);
        dices[k].push_back(e.masks->dice);
        dices_before[k].push_back(e.masks_before->dice);
      }
      if (e.tre || e.masks) out.entries.push_back(e);
    }
  }
  const auto curve = [&](const auto& after, const auto& before) {
    std::vector<CurvePoint> c;
    for (int k = 1; k <= n; ++k) {
      if (after[k].empty()) continue;
      const Stats a = summarize(after[k]), b = summarize(before[k]);
      c.push_back({k, after[k].size(), a.mean, a.std, b.mean, b.std});
    }
    return c;
  };
  out.landmark_curve = curve(pooled, pooled_before);
  out.dice_curve = curve(dices, dices_before);
  return out;
}

template <typename T>
InverseConsistency inverse_consistency_3d(const FieldSet<T>& fields, const PhaseAnnotations& ann) {
  fields.validate();
  if (fields.phases() != 2)
    throw InvalidArgument("inverse_consistency_3d: needs exactly 2 fields, got " + std::to_string(fields.phases()));
  InverseConsistency out;
  std::vector<double> tres, dices;
  for (int start = 0; start < 2; ++start) {
    RoundTrip rt;
    rt.start = start;
    const bool lm = static_cast<std::size_t>(start) < ann.landmarks.size() && ann.landmarks[start];
    const bool mk = static_cast<std::size_t>(start) < ann.masks.size() && ann.masks[start];
    if (!lm && !mk) {
      out.notices.push_back("no annotations for phase " + std::to_string(start) + "; round trip skipped");
      continue;
    }
    if (lm) {
      const auto& p = *ann.landmarks[start];
      rt.tre = tre(transport_landmarks(fields, p, start, start), p);
      tres.push_back(rt.tre->mean);
    }
    if (mk) {
      const Mask& m = *ann.masks[start];
      rt.masks = score_masks(transport_mask(fields, m, start, start), m, fields.grid.spacing);
      dices.push_back(rt.masks->dice);
    }
    out.directions.push_back(rt);
  }
  if (!tres.empty()) out.mean_tre = summarize(tres).mean;
  if (!dices.empty()) out.mean_dice = summarize(dices).mean;
  return out;
}

#define PULSEREG_INSTANTIATE_METRICS(T)                                                                    \
  template Array<double> jacobian_determinant<T>(const Array<T>&);                                        \
  template JacobianStats jacobian_stats<T>(const Array<T>&);                                              \
  template Mask transport_mask<T>(const FieldSet<T>&, const Mask&, int, int);                             \
  template std::vector<Vec3> transport_landmarks<T>(const FieldSet<T>&, std::span<const Vec3>, int, int); \
  template Eval4D eval4d<T>(const FieldSet<T>&, const PhaseAnnotations&);                                 \
  template InverseConsistency inverse_consistency_3d<T>(const FieldSet<T>&, const PhaseAnnotations&);

PULSEREG_INSTANTIATE_METRICS(float)
PULSEREG_INSTANTIATE_METRICS(double)

}  // namespace pulsereg
