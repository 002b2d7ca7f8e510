#include "pulsereg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "pulsereg/random.hpp"

namespace pulsereg {

void PhantomSpec::validate() const {
  if (phases < 2) throw InvalidArgument("phantom: need at least 2 phases, got " + std::to_string(phases));
  if (size.x < 4 || size.y < 4 || size.z < 4) throw InvalidArgument("phantom: every extent must be >= 4");
  const double r = resolved_radius();
  if (!(r > 0)) throw InvalidArgument("phantom: radius must be > 0");
  if (!(amplitude >= 0)) throw InvalidArgument("phantom: amplitude must be >= 0");
  if (amplitude >= r / 2)
    throw InvalidArgument("phantom: amplitude " + std::to_string(amplitude) + " must stay below radius / 2 = " +
                          std::to_string(r / 2));
  if (!(noise >= 0)) throw InvalidArgument("phantom: noise must be >= 0");
  if (!(texture_sigma > 0)) throw InvalidArgument("phantom: texture sigma must be > 0");
  if (landmarks < 0) throw InvalidArgument("phantom: landmark count must be >= 0");
}

Vec3 PhantomSpec::resolved_center() const {
  if (center) return *center;
  return {static_cast<double>(size.x - 1) / 2, static_cast<double>(size.y - 1) / 2, static_cast<double>(size.z - 1) / 2};
}

double PhantomSpec::resolved_radius() const {
  return radius ? *radius : 0.4 * static_cast<double>(std::min({size.x, size.y, size.z}));
}

PhantomMotion::PhantomMotion(Vec3 center, double radius, double relative_amplitude, int phases)
    : center_(center), radius_(radius), amplitude_(relative_amplitude), phases_(phases) {
  if (phases < 2 || !(radius > 0) || !(std::abs(relative_amplitude) < 0.5))
    throw InvalidArgument("PhantomMotion: need N >= 2, radius > 0 and |a| < 1/2");
}

double PhantomMotion::scale(int phase) const {
  const int n = ((phase % phases_) + phases_) % phases_;
  if (n == 0) return 0.0;
  if (phases_ == 2) return amplitude_;  // sin(pi) = 0 would freeze a two-phase series
  return amplitude_ * std::sin(2.0 * std::numbers::pi * n / phases_);
}

Vec3 PhantomMotion::forward(int phase, Vec3 q) const {
  const double a = scale(phase);
  const Vec3 r = q - center_;
  const double rho = r.norm();
  const double w = rho <= radius_ ? 1.0 : std::pow(radius_ / rho, 3);
  return center_ + (1.0 + a * w) * r;
}

Vec3 PhantomMotion::inverse(int phase, Vec3 x) const {
  const double a = scale(phase);
  const Vec3 r = x - center_;
  const double big_r = r.norm();
  if (a == 0.0 || big_r == 0.0) return x;
  double rho;
  if (big_r <= radius_ * (1.0 + a)) {
    rho = big_r / (1.0 + a);
  } else {
    // Solve rho + a r0^3 / rho^2 = R on the exterior branch (monotone there).
    const double r3 = radius_ * radius_ * radius_;
    double lo = radius_, hi = big_r + std::abs(a) * radius_ + 1.0;
    rho = std::clamp(big_r - a * r3 / (big_r * big_r), lo, hi);
    for (int it = 0; it < 100; ++it) {
      const double f = rho + a * r3 / (rho * rho) - big_r;
      if (f > 0) hi = rho;
      else lo = rho;
      const double df = 1.0 - 2.0 * a * r3 / (rho * rho * rho);
      double next = rho - f / df;
      if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
      if (std::abs(next - rho) <= 1e-15 * big_r) {
        rho = next;
        break;
      }
      rho = next;
    }
  }
  return center_ + (rho / big_r) * r;
}

Vec3 PhantomMotion::displacement(int phase, Vec3 x) const {
  return forward(phase + 1, inverse(phase, x)) - x;
}

namespace {

// Separable Gaussian filter with clamped borders, in place.
void gaussian_filter(Array<double>& a, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= sum;
  const std::int64_t d = a.dim(1), h = a.dim(2), w = a.dim(3);
  const std::int64_t n[3] = {w, h, d}, stride[3] = {1, w, w * h};
  std::vector<double> line;
  for (int axis = 0; axis < 3; ++axis) {
    Array<double> out(a.shape);
    for (std::int64_t i = 0; i < a.size(); ++i) {
      const std::int64_t pos = (i / stride[axis]) % n[axis];
      double acc = 0;
      for (int t = -radius; t <= radius; ++t) {
        const std::int64_t p = std::clamp<std::int64_t>(pos + t, 0, n[axis] - 1);
        acc += k[t + radius] * a.values[i + (p - pos) * stride[axis]];
      }
      out.values[i] = acc;
    }
    a = std::move(out);
  }
}

}  // namespace

Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const Vec3 c = spec.resolved_center();
  const double r0 = spec.resolved_radius();
  PhantomMotion motion(c, r0, spec.amplitude / r0, spec.phases);
  const Extent3 e = spec.size;
  const std::int64_t vox = e.count();
  const int n = spec.phases;

  Rng rng(mix_seed(spec.seed, 0x7068616e746f6dULL));
  Array<double> texture(Shape{1, e.z, e.y, e.x});
  for (double& v : texture.values) v = rng.normal();
  gaussian_filter(texture, spec.texture_sigma);
  double mean = 0, sq = 0;
  for (const double v : texture.values) mean += v;
  mean /= static_cast<double>(vox);
  for (const double v : texture.values) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(vox));
  for (double& v : texture.values) v = (v - mean) / sd;

  const auto reference = [&](Vec3 q) {
    const double rho = (q - c).norm();
    return sample_clamped(texture, 0, q.x, q.y, q.z) + spec.contrast * 0.5 * (1.0 + std::tanh(r0 - rho));
  };

  Phantom ph{{}, {}, {}, {}, motion};
  ph.volumes.grid.dims = e;
  ph.volumes.images = Array<float>(Shape{n, e.z, e.y, e.x});
  ph.truth.grid = ph.volumes.grid;
  for (int p = 0; p < n; ++p) {
    Rng noise(mix_seed(spec.seed, static_cast<std::uint64_t>(p) + 1));
    Mask mask(Shape{1, e.z, e.y, e.x}, 0);
    Array<double> field(Shape{3, e.z, e.y, e.x});
    for (std::int64_t z = 0, i = 0; z < e.z; ++z)
      for (std::int64_t y = 0; y < e.y; ++y)
        for (std::int64_t x = 0; x < e.x; ++x, ++i) {
          const Vec3 pos{static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
          const Vec3 q = motion.inverse(p, pos);
          double value = reference(q);
          if (spec.noise > 0) value += spec.noise * noise.normal();
          ph.volumes.images.values[p * vox + i] = static_cast<float>(value);
          mask.values[i] = (q - c).norm() <= r0 ? 1 : 0;
          const Vec3 u = motion.forward(p + 1, q) - pos;
          field.values[i] = u.x;
          field.values[vox + i] = u.y;
          field.values[2 * vox + i] = u.z;
        }
    ph.masks.push_back(std::move(mask));
    ph.truth.fields.push_back(std::move(field));
  }

  // Fibonacci lattice on the reference sphere.
  std::vector<Vec3> ref;
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (int k = 0; k < spec.landmarks; ++k) {
    const double zc = 1.0 - 2.0 * (k + 0.5) / spec.landmarks;
    const double rr = std::sqrt(std::max(0.0, 1.0 - zc * zc));
    ref.push_back(c + r0 * Vec3{rr * std::cos(golden * k), rr * std::sin(golden * k), zc});
  }
  for (int p = 0; p < n; ++p) {
    std::vector<Vec3> pts;
    for (const Vec3& q : ref) pts.push_back(ph.volumes.grid.to_mm(motion.forward(p, q)));
    ph.landmarks.push_back(std::move(pts));
  }
  return ph;
}

}  // namespace pulsereg
